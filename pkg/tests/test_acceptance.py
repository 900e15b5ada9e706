"""End-to-end acceptance checks.

Eleven numbered checks covering gradient correctness, calibration oracles,
gating boundary behavior, compute accounting, threshold monotonicity,
training-regime contracts, the scheduler hand trace, desk-scale accuracy
and exit targets, the easy-versus-hard exit report, the with/without
comparison, and serialization. Each test prints one PASS or FAIL line with
its headline numbers (run pytest with -rA to see the lines for passing
tests).
"""

import math
import time

import numpy as np

from gatewire import (
    Adam,
    BatchNorm,
    GateConfig,
    Linear,
    NetworkSpec,
    PlateauScheduler,
    Relu,
    SideNetSpec,
    SyntheticSpec,
    Tensor,
    TrainConfig,
    build,
    ece,
    gen_synthetic,
    infer_batch,
    load_checkpoint,
    load_csv,
    param_count,
    run_experiment,
    save_checkpoint,
    save_csv,
    split,
    sweep,
    train,
)
from gatewire.calibration import (
    FULL_EDGES,
    bin_predictions,
    calibration_report,
    read_reliability_csv,
    write_reliability_csv,
)
from gatewire.gating import evaluate_rows, read_inference_csv, write_inference_csv
from gatewire.harness import (
    DEFAULT_THETAS,
    exit_fraction_by_group,
    read_sweep_csv,
    write_sweep_csv,
)
from gatewire.tensor import mul, softmax, tsum
from gatewire.training import check_gradient_independence, read_train_log_csv

from test_tensor import GRAD_CASES, max_rel_err


def _verdict(num: int, ok: bool, detail: str):
    print(f"{'PASS' if ok else 'FAIL'} [{num:2d}] {detail}")
    assert ok, f"[{num}] {detail}"


def _bytes_of(tensors: dict) -> dict:
    return {k: (v.data if isinstance(v, Tensor) else v).tobytes() for k, v in tensors.items()}


def _main_bytes(model) -> dict:
    return {k: v.tobytes() for k, v in model.checkpoint_tensors().items() if k.startswith("main.")}


# ---------------------------------------------------------------------------
# 1. Every differentiable op against central finite differences


def test_01_gradients_match_finite_differences():
    t0 = time.perf_counter()
    worst, worst_name = 0.0, ""
    for name, builder in GRAD_CASES:
        forward, leaves = builder()
        err = max_rel_err(forward, leaves)
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - t0
    ok = len(GRAD_CASES) >= 20 and worst < 1e-4 and elapsed < 30.0
    _verdict(
        1, ok,
        f"gradients: {len(GRAD_CASES)} shapes, max rel err {worst:.2e} ({worst_name}), "
        f"{elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. Softmax and binning oracles, plus brute-force re-binning


def test_02_softmax_and_binning_oracles():
    probs = softmax(Tensor(np.array([[1.0, 2.0, 3.0]]))).data.reshape(-1)
    oracle = np.array([0.09003057317038046, 0.24472847105479764, 0.6652409557748219])
    softmax_err = float(np.abs(probs - oracle).max())

    hand = ece(bin_predictions([(0.25, True), (0.55, False), (0.85, True), (0.95, True)]))

    rng = np.random.default_rng(123)
    records = [
        (float(c), bool(k))
        for c, k in zip(rng.uniform(0.0, 1.0, 1000), rng.integers(0, 2, 1000))
    ]
    bins = bin_predictions(records, FULL_EDGES)
    rebin_ok = True
    brute_terms = []
    for b, (lo, hi) in zip(bins, zip(FULL_EDGES, FULL_EDGES[1:])):
        last = hi == FULL_EDGES[-1]
        members = [r for r in records if lo <= r[0] < hi or (last and r[0] == hi)]
        n = len(members)
        mean_conf = math.fsum(c for c, _ in members) / n if n else None
        acc = sum(1 for _, k in members if k) / n if n else None
        rebin_ok &= b.n == n and b.mean_confidence == mean_conf and b.accuracy == acc
        if n:
            brute_terms.append(n * abs(acc - mean_conf))
    rebin_ok &= ece(bins) == math.fsum(brute_terms) / len(records)

    ok = softmax_err < 1e-5 and hand == 0.375 and rebin_ok
    _verdict(
        2, ok,
        f"softmax err {softmax_err:.1e}, hand ECE {hand} (want 0.375), "
        f"1000-record re-binning exact: {rebin_ok}",
    )


# ---------------------------------------------------------------------------
# 3. Threshold extremes reduce to single-network evaluation


def test_03_threshold_extremes_match_single_network_outputs(desk_bundle):
    model, test = desk_bundle.model, desk_bundle.splits.test
    heads = evaluate_rows(model, test.features)
    side_ref = [int(np.argmax(h.side_probs[0])) for h in heads]
    main_ref = [int(np.argmax(h.main_probs)) for h in heads]

    zero, _ = infer_batch(model, test.features, test.labels, GateConfig(theta=0.0))
    past_one = GateConfig(theta=math.nextafter(1.0, 2.0))
    never, _ = infer_batch(model, test.features, test.labels, past_one)

    all_side = all(r.source == "side0" for r in zero)
    all_main = all(r.source == "main" for r in never)
    side_match = [r.predicted_class for r in zero] == side_ref
    main_match = [r.predicted_class for r in never] == main_ref
    ok = all_side and all_main and side_match and main_match
    _verdict(
        3, ok,
        f"theta=0 equals sidenet-only and theta=1+eps equals mainnet-only on "
        f"{len(heads)} rows (exits {all_side}/{all_main}, matches {side_match}/{main_match})",
    )


# ---------------------------------------------------------------------------
# 4. Parameter accounting oracles


def test_04_parameter_accounting():
    spec = NetworkSpec(
        main_blocks=(Linear(8, 16), Relu(), Linear(16, 4)),
        num_classes=4,
        sidenets=(SideNetSpec(attach_index=1, input_dim=16, num_classes=4),),
    )
    model = build(spec, seed=0)
    side, main = param_count(model, "side0"), param_count(model, "main")

    # Pick theta between the 2nd and 3rd largest side confidences so exactly
    # two of four inputs exit early.
    rng = np.random.default_rng(4)
    X = rng.normal(size=(4, 8))
    confs = sorted(h.side_confs[0] for h in evaluate_rows(model, X))
    theta = (confs[1] + confs[2]) / 2.0
    results, stats = infer_batch(model, X, np.zeros(4, dtype=int), GateConfig(theta=theta))
    exits = sum(r.source != "main" for r in results)

    big = NetworkSpec(
        main_blocks=(BatchNorm(768), Relu(), Linear(768, 1)),
        num_classes=2,
        head="sigmoid",
        sidenets=(SideNetSpec(attach_index=1, input_dim=768, num_classes=2, head="sigmoid"),),
    )
    weights_only = param_count(build(big, seed=0), "side0", weights_only=True)

    ok = (
        side == 884
        and main == 952
        and exits == 2
        and stats.avg_params == 918.0
        and weights_only == 24608
    )
    _verdict(
        4, ok,
        f"param counts side {side} (want 884), main {main} (want 952), "
        f"{exits}-of-4 exits avg {stats.avg_params} (want 918.0), "
        f"weights-only {weights_only} (want 24608)",
    )


# ---------------------------------------------------------------------------
# 5. Sweep monotone in theta on the trained desk model


def test_05_sweep_monotonicity(desk_bundle):
    rows = sweep(desk_bundle.model, desk_bundle.splits.test, DEFAULT_THETAS).rows
    params_ok = all(a.avg_params <= b.avg_params for a, b in zip(rows, rows[1:]))
    exits_ok = all(
        a.early_exit_fraction >= b.early_exit_fraction for a, b in zip(rows, rows[1:])
    )
    ok = params_ok and exits_ok
    _verdict(
        5, ok,
        f"over {len(rows)} thetas avg_params {rows[0].avg_params:.0f} -> "
        f"{rows[-1].avg_params:.0f} non-decreasing: {params_ok}; exit fraction "
        f"{rows[0].early_exit_fraction:.2f} -> {rows[-1].early_exit_fraction:.2f} "
        f"non-increasing: {exits_ok}",
    )


# ---------------------------------------------------------------------------
# 6. Training-regime contracts


def _blob_problem():
    data = gen_synthetic(
        SyntheticSpec(num_classes=2, per_class=100, dim=4,
                      easy_fraction=1.0, separation=10.0, seed=7)
    )
    return split(data, (0.6, 0.2, 0.2), 3)


def _blob_spec(with_side: bool) -> NetworkSpec:
    sides = (SideNetSpec(attach_index=2, input_dim=16, num_classes=2),) if with_side else ()
    return NetworkSpec(
        main_blocks=(Linear(4, 16), BatchNorm(16), Relu(), Linear(16, 2)),
        num_classes=2,
        sidenets=sides,
    )


def test_06_training_regime_contracts():
    splits = _blob_problem()

    # Frozen mode: every mainnet byte (weights and running stats) untouched.
    frozen = build(_blob_spec(True), seed=5)
    before = _main_bytes(frozen)
    train(frozen, splits.train, splits.val,
          TrainConfig(mode="frozen", epochs=3, batch_size=16, lr_init=0.003, seed=1))
    frozen_ok = _main_bytes(frozen) == before

    # Joint with alpha=0: identical update sequence to training without any
    # sidenet, bit for bit, under the same seeds.
    twin_with = build(_blob_spec(True), seed=5)
    twin_without = build(_blob_spec(False), seed=5)
    for m in (twin_with, twin_without):
        train(m, splits.train, splits.val,
              TrainConfig(mode="joint", alpha=0.0, epochs=5, batch_size=16,
                          lr_init=0.003, seed=11))
    alpha_zero_ok = _main_bytes(twin_with) == _main_bytes(twin_without)

    # Two sidenets: no cross-gradients, and stepping one sidenet leaves the
    # other sidenet's parameters and the backbone bit-identical.
    model = build(
        NetworkSpec(
            main_blocks=(Linear(4, 8), Relu(), Linear(8, 8), Relu(), Linear(8, 3)),
            num_classes=3,
            sidenets=(
                SideNetSpec(attach_index=1, input_dim=8, num_classes=3, hidden_units=6),
                SideNetSpec(attach_index=3, input_dim=8, num_classes=3, hidden_units=6),
            ),
        ),
        seed=2,
    )
    rng = np.random.default_rng(0)
    X = rng.normal(size=(8, 4))
    y = rng.integers(0, 3, size=8)
    independent = check_gradient_independence(model, X, y)

    model.set_requires_grad(main=False, side=True)
    model.train_mode(frozen_main=True)
    _, side_probs, _ = model.forward(X)
    score = tsum(mul(side_probs[0], Tensor(np.eye(3)[y])))
    model.zero_grad()
    score.backward()
    untouched_before = _main_bytes(model) | _bytes_of(model.side_parameters(1))
    stepped_before = _bytes_of(model.side_parameters(0))
    Adam().step(model.side_parameters(0), lr=0.01)
    model.eval_mode()
    model.set_requires_grad(main=True, side=True)
    untouched_ok = (_main_bytes(model) | _bytes_of(model.side_parameters(1))) == untouched_before
    stepped_ok = _bytes_of(model.side_parameters(0)) != stepped_before

    ok = frozen_ok and alpha_zero_ok and independent and untouched_ok and stepped_ok
    _verdict(
        6, ok,
        f"frozen backbone untouched: {frozen_ok}; alpha=0 bit-equals sidenet-free: "
        f"{alpha_zero_ok}; cross-grads zero: {independent}; one-sidenet step leaves "
        f"the rest bit-identical: {untouched_ok and stepped_ok}",
    )


# ---------------------------------------------------------------------------
# 7. Plateau scheduler hand trace


def test_07_plateau_scheduler_trace():
    sched = PlateauScheduler(lr_init=0.0003, patience=5, factor=3.0)
    for loss in (1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95):
        sched.step(loss)
    ratio = sched.lr_init / sched.lr
    ok = sched.decays == 1 and abs(sched.lr - 0.0001) < 1e-12 and ratio == 3.0
    _verdict(
        7, ok,
        f"7-loss trace: {sched.decays} decay(s), lr 0.0003 -> {sched.lr:.6g}, "
        f"ratio {ratio}",
    )


# ---------------------------------------------------------------------------
# 8. Desk-scale experiment hits its accuracy and exit targets


def test_08_desk_experiment_targets(desk_experiments):
    runs, train_seconds = desk_experiments
    t0 = time.perf_counter()
    main_accs, exit_fracs, gated_accs = [], [], []
    for r in runs:
        result = sweep(r.model, r.splits.test, DEFAULT_THETAS)
        main_accs.append(result.main_only.accuracy)
        at_09 = next(row for row in result.rows if row.theta == 0.9)
        exit_fracs.append(at_09.early_exit_fraction)
        gated_accs.append(at_09.accuracy)
    elapsed = train_seconds + (time.perf_counter() - t0)

    mean = lambda xs: sum(xs) / len(xs)
    main_mean, exit_mean, gated_mean = mean(main_accs), mean(exit_fracs), mean(gated_accs)
    gap = abs(gated_mean - main_mean)
    ok = main_mean >= 0.90 and exit_mean >= 0.30 and gap <= 0.02 and elapsed < 300.0
    _verdict(
        8, ok,
        f"5-seed means: main acc {main_mean:.4f} (>= 0.90), exit@0.9 {exit_mean:.3f} "
        f"(>= 0.30), gated-vs-main gap {gap * 100:.2f}pp (<= 2pp), {elapsed:.0f}s (< 300s)",
    )


# ---------------------------------------------------------------------------
# 9. Easy inputs exit more often than hard ones; calibration reported


def test_09_easy_hard_exit_report(desk_bundle, tmp_path):
    model, test = desk_bundle.model, desk_bundle.splits.test
    results, _ = infer_batch(model, test.features, test.labels, GateConfig(theta=0.9))
    easy, hard = exit_fraction_by_group(
        results, test.labels, desk_bundle.data_spec.easy_classes()
    )

    side_rep = calibration_report(model, test.features, test.labels, "side0", scheme="full")
    main_rep = calibration_report(model, test.features, test.labels, "main", scheme="full")
    side_csv, main_csv = tmp_path / "reliability_side0.csv", tmp_path / "reliability_main.csv"
    write_reliability_csv(side_rep, side_csv)
    write_reliability_csv(main_rep, main_csv)
    emitted = side_csv.exists() and main_csv.exists()

    ok = easy is not None and hard is not None and emitted
    _verdict(
        9, ok,
        f"report-only: exit@0.9 easy {easy:.3f} vs hard {hard:.3f} "
        f"(easy exits more: {easy > hard}); ECE side0 {side_rep.ece:.4f}, "
        f"main {main_rep.ece:.4f}; reliability CSVs emitted: {emitted}",
    )


# ---------------------------------------------------------------------------
# 10. Joint training leaves backbone accuracy within 2pp of training alone


def test_10_with_without_gap(five_seed_compare):
    runs, _ = five_seed_compare
    mean_with = sum(r.with_sidenet for r in runs) / len(runs)
    mean_without = sum(r.without_sidenet for r in runs) / len(runs)
    gap = abs(mean_with - mean_without)
    ok = gap <= 0.02
    _verdict(
        10, ok,
        f"5-seed backbone accuracy with {mean_with:.4f} vs without {mean_without:.4f}, "
        f"gap {gap * 100:.2f}pp (<= 2pp)",
    )


# ---------------------------------------------------------------------------
# 11. Serialization: bit-exact round trips and byte-identical reruns


def test_11_serialization_round_trips(desk_bundle, tmp_path):
    model, test = desk_bundle.model, desk_bundle.splits.test

    # Checkpoint round trip, including batchnorm running stats dirtied by training.
    ckpt = tmp_path / "desk.ckpt"
    save_checkpoint(model, str(ckpt))
    back = load_checkpoint(str(ckpt))
    t_orig, t_back = model.checkpoint_tensors(), back.checkpoint_tensors()
    ckpt_ok = set(t_orig) == set(t_back) and all(
        t_orig[k].tobytes() == t_back[k].tobytes() for k in t_orig
    )

    # Every CSV format re-parses to equal values.
    data_csv = tmp_path / "test.csv"
    save_csv(test, str(data_csv))
    loaded = load_csv(str(data_csv))
    csv_ok = (
        np.array_equal(loaded.features, test.features)
        and np.array_equal(loaded.labels, test.labels)
        and loaded.num_classes == test.num_classes
    )

    log_csv = tmp_path / "log.csv"
    desk_bundle.log.to_csv(str(log_csv))
    csv_ok &= read_train_log_csv(str(log_csv)).rows == desk_bundle.log.rows

    sweep_rows = sweep(model, test, (0.0, 0.9, 1.0)).rows
    sweep_csv = tmp_path / "sweep.csv"
    write_sweep_csv(sweep_rows, str(sweep_csv))
    csv_ok &= tuple(read_sweep_csv(str(sweep_csv))) == tuple(sweep_rows)

    results, _ = infer_batch(model, test.features, test.labels, GateConfig(theta=0.9))
    inf_csv = tmp_path / "inference.csv"
    write_inference_csv(results, test.labels, str(inf_csv))
    back_results, back_labels = read_inference_csv(str(inf_csv))
    csv_ok &= back_results == results and back_labels == [int(y) for y in test.labels]

    report = calibration_report(model, test.features, test.labels, "main", scheme="full")
    rel_csv = tmp_path / "reliability.csv"
    write_reliability_csv(report, str(rel_csv))
    csv_ok &= read_reliability_csv(str(rel_csv)) == list(report.bins)

    # Identical seeds give byte-identical checkpoints and sweep CSVs.
    small = SyntheticSpec(num_classes=3, per_class=60, dim=6,
                          easy_fraction=0.5, separation=8.0, seed=42)
    paths = []
    for tag in ("a", "b"):
        r = run_experiment(9, data_spec=small, epochs=4, batch_size=16)
        cp = tmp_path / f"rerun_{tag}.ckpt"
        sw = tmp_path / f"rerun_{tag}.csv"
        save_checkpoint(r.model, str(cp))
        write_sweep_csv(sweep(r.model, r.splits.test, DEFAULT_THETAS).rows, str(sw))
        paths.append((cp, sw))
    rerun_ok = (
        paths[0][0].read_bytes() == paths[1][0].read_bytes()
        and paths[0][1].read_bytes() == paths[1][1].read_bytes()
    )

    ok = ckpt_ok and csv_ok and rerun_ok
    _verdict(
        11, ok,
        f"checkpoint round-trip bit-exact: {ckpt_ok}; CSV re-parse equality: {csv_ok}; "
        f"seeded reruns byte-identical: {rerun_ok}",
    )
