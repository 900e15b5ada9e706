"""Command-line entry point.

Subcommands: gen, train, sweep, calibrate, compare, info. Configuration lives
in one JSON document; command-line flags override file values which override
defaults. One master seed (flag > config > GATEWIRE_SEED > 0) fans out to
data generation, splitting, initialization, and shuffling, so every command
is byte-reproducible given identical inputs.

Exit codes: 0 success, 2 validation or configuration error, 1 runtime or
I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .calibration import calibration_report, report_to_json, write_reliability_csv
from .data import SyntheticSpec, gen_synthetic, load_csv, save_csv, split
from .errors import CheckpointError, ConfigError, DataError, GatewireError, SpecError
from .graph import (
    BatchNorm,
    Linear,
    Relu,
    Residual,
    build,
    load_checkpoint,
    param_count,
    save_checkpoint,
    spec_from_json,
)
from .harness import (
    DEFAULT_FRACTIONS,
    DEFAULT_THETAS,
    comparison_to_json,
    compare_with_without,
    default_network_spec,
    default_train_config,
    derive_seeds,
    sweep,
    write_sweep_csv,
)
from .training import TrainConfig, train

_TOP_KEYS = ("seed", "data", "split", "network", "train", "gate", "thetas", "out_dir")
_DATA_KEYS = ("kind", "path", "num_classes", "per_class", "dim", "easy_fraction", "separation", "seed")
_TRAIN_KEYS = ("mode", "alpha", "lr_init", "epochs", "batch_size", "plateau_patience",
               "decay_factor", "sidenet_count")
_GATE_KEYS = ("theta", "count_mode")


def _check_keys(obj: dict, allowed, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def load_config(path) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    _check_keys(cfg, _TOP_KEYS, path)
    return cfg


def resolve_seed(flag_seed, cfg: dict) -> int:
    if flag_seed is not None:
        return flag_seed
    if "seed" in cfg:
        if not isinstance(cfg["seed"], int):
            raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")
        return cfg["seed"]
    env = os.environ.get("GATEWIRE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"GATEWIRE_SEED must be an integer, got {env!r}") from None
    return 0


def _synthetic_from_config(obj: dict, default_seed: int, overrides: dict) -> SyntheticSpec:
    _check_keys(obj, _DATA_KEYS, "data")
    if obj.get("kind", "synthetic") != "synthetic":
        raise ConfigError("this command needs a synthetic data spec")
    spec = SyntheticSpec(
        num_classes=int(obj.get("num_classes", 6)),
        per_class=int(obj.get("per_class", 584)),
        dim=int(obj.get("dim", 16)),
        easy_fraction=float(obj.get("easy_fraction", 0.5)),
        separation=float(obj.get("separation", 8.0)),
        seed=int(obj.get("seed", default_seed)),
    )
    live = {k: v for k, v in overrides.items() if v is not None}
    if live:
        spec = replace(spec, **live)
    spec.validate()
    return spec


def _train_config_from(cfg: dict, shuffle_seed: int, overrides: dict) -> TrainConfig:
    obj = cfg.get("train", {})
    _check_keys(obj, _TRAIN_KEYS, "train")
    tc = default_train_config(shuffle_seed=shuffle_seed)
    fields = {k: obj[k] for k in _TRAIN_KEYS if k in obj}
    fields.update({k: v for k, v in overrides.items() if v is not None})
    tc = replace(tc, **fields)
    tc.validate()
    return tc


def _fractions_from(cfg: dict):
    if "split" not in cfg:
        return DEFAULT_FRACTIONS
    fr = cfg["split"]
    if not isinstance(fr, list) or len(fr) != 3:
        raise ConfigError("split must be a list of three fractions")
    return tuple(float(x) for x in fr)


def _thetas_from(cfg: dict, flag: str | None):
    if flag is not None:
        try:
            thetas = [float(t) for t in flag.split(",") if t.strip() != ""]
        except ValueError:
            raise ConfigError(f"bad theta list {flag!r}") from None
    elif "thetas" in cfg:
        thetas = [float(t) for t in cfg["thetas"]]
    else:
        thetas = list(DEFAULT_THETAS)
    if not thetas or any(t < 0 for t in thetas):
        raise ConfigError(f"thetas must be nonempty and nonnegative, got {thetas!r}")
    return thetas


# ---------------------------------------------------------------------------
# Commands


def cmd_gen(args) -> int:
    # A --spec file is either a bare synthetic spec or a full run config with a
    # "data" section; presence of any top-level run-config key decides.
    cfg = {}
    data_obj = {}
    if args.spec:
        try:
            with open(args.spec) as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.spec}: invalid JSON: {e}") from None
        if isinstance(loaded, dict) and "data" in loaded:
            _check_keys(loaded, _TOP_KEYS, args.spec)
            cfg = loaded
            data_obj = cfg["data"]
        else:
            data_obj = loaded
    seed = resolve_seed(args.seed, cfg)
    spec = _synthetic_from_config(
        data_obj,
        derive_seeds(seed)["data"],
        {
            "num_classes": args.classes,
            "per_class": args.per_class,
            "dim": args.dim,
            "easy_fraction": args.easy_fraction,
            "separation": args.separation,
        },
    )
    ds = gen_synthetic(spec)
    save_csv(ds, args.out)
    print(f"wrote {len(ds)} rows ({spec.num_classes} classes, dim {spec.dim}) to {args.out}")
    return 0


def _load_or_gen_data(cfg: dict, data_seed: int):
    obj = cfg.get("data", {})
    _check_keys(obj, _DATA_KEYS, "data")
    if obj.get("kind", "synthetic") == "csv":
        if "path" not in obj:
            raise ConfigError("data of kind csv needs a path")
        return load_csv(obj["path"])
    return gen_synthetic(_synthetic_from_config(obj, data_seed, {}))


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    seed = resolve_seed(args.seed, cfg)
    seeds = derive_seeds(seed)

    dataset = _load_or_gen_data(cfg, seeds["data"])
    splits = split(dataset, _fractions_from(cfg), seeds["split"])

    if "network" in cfg:
        net_spec = spec_from_json(cfg["network"])
    else:
        net_spec = default_network_spec(
            dim=dataset.features.shape[1], num_classes=dataset.num_classes
        )
    model = build(net_spec, seeds["build"])

    tc = _train_config_from(
        cfg,
        seeds["shuffle"],
        {
            "mode": args.mode,
            "alpha": args.alpha,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "lr_init": args.lr,
        },
    )
    log = train(model, splits.train, splits.val, tc)

    save_checkpoint(model, args.out)
    log_path = args.log or f"{args.out}.log.csv"
    log.to_csv(log_path)
    test_path = args.test_out or f"{args.out}.test.csv"
    save_csv(splits.test, test_path)

    last = log.rows[-1]
    sides = " ".join(f"side{j}={a:.4f}" for j, a in enumerate(last.val_acc_sides))
    print(f"checkpoint: {args.out}")
    print(f"train log:  {log_path}")
    print(f"test set:   {test_path} (standardized, {len(splits.test)} rows)")
    print(f"final val accuracy: main={last.val_acc_main:.4f} {sides}".rstrip())
    return 0


def cmd_sweep(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if not model.spec.sidenets:
        raise ConfigError("checkpoint has no sidenet; nothing to sweep")
    dataset = load_csv(args.data)
    thetas = _thetas_from(load_config(args.config) if args.config else {}, args.thetas)
    result = sweep(model, dataset, thetas, count_mode=args.count_mode)
    write_sweep_csv(result.rows, args.out)
    print(f"wrote {len(result.rows)} rows to {args.out}")
    fmt = lambda r, name: (
        f"{name}: accuracy={r.accuracy:.4f} exit_fraction={r.early_exit_fraction:.3f} "
        f"avg_params={r.avg_params:.1f}"
    )
    print(fmt(result.side_only, "sidenet-only baseline"))
    print(fmt(result.main_only, "mainnet-only baseline"))
    return 0


def cmd_calibrate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_csv(args.data)
    report = calibration_report(
        model, dataset.features, dataset.labels, args.head, scheme=args.bins
    )
    write_reliability_csv(report, args.out)
    report_path = args.report or f"{os.path.splitext(args.out)[0]}.json"
    with open(report_path, "w") as f:
        json.dump(report_to_json(report), f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"reliability: {args.out}")
    print(f"report:     {report_path}")
    print(f"{args.head} ece={report.ece:.6f} over {report.total_n} predictions")
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    seed = resolve_seed(args.seed, cfg)
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")

    data_obj = cfg.get("data", {})
    _check_keys(data_obj, _DATA_KEYS, "data")
    if data_obj.get("kind", "synthetic") == "csv":
        raise ConfigError("compare generates its data; csv input is not supported")
    net_spec = spec_from_json(cfg["network"]) if "network" in cfg else None
    tc = _train_config_from(cfg, 0, {"epochs": args.epochs, "alpha": args.alpha})

    runs = []
    for i in range(args.seeds):
        master = seed + i
        data_spec = _synthetic_from_config(data_obj, derive_seeds(master)["data"], {})
        runs.append(
            compare_with_without(
                master,
                data_spec=data_spec,
                net_spec=net_spec,
                fractions=_fractions_from(cfg),
                alpha=tc.alpha,
                epochs=tc.epochs,
                batch_size=tc.batch_size,
                lr_init=tc.lr_init,
            )
        )
        r = runs[-1]
        print(
            f"seed {master}: with={r.with_sidenet:.4f} without={r.without_sidenet:.4f} "
            f"ensemble={r.ensemble:.4f}"
        )
    with open(args.out, "w") as f:
        json.dump(comparison_to_json(runs), f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {args.out}")
    return 0


def _describe_block(b, indent: str = "  "):
    if isinstance(b, Linear):
        return f"{indent}linear {b.in_dim} -> {b.out_dim}" + ("" if b.bias else " (no bias)")
    if isinstance(b, Relu):
        return f"{indent}relu"
    if isinstance(b, BatchNorm):
        return f"{indent}batchnorm {b.width}"
    if isinstance(b, Residual):
        inner = "\n".join(_describe_block(x, indent + "    ") for x in b.inner)
        return f"{indent}residual_block\n{inner}"
    return f"{indent}?"


def cmd_info(args) -> int:
    model = load_checkpoint(args.checkpoint)
    spec = model.spec
    print(f"head: {spec.head}, classes: {spec.num_classes}")
    print("main blocks:")
    for i, b in enumerate(spec.main_blocks):
        print(f"{i:3d}{_describe_block(b)}")
    for j, sn in enumerate(spec.sidenets):
        print(
            f"sidenet {j}: attach after block {sn.attach_index}, "
            f"{sn.input_dim} -> {sn.hidden_units} -> {sn.output_units()} ({sn.head})"
        )
    for j in range(len(spec.sidenets)):
        print(
            f"params side{j} exit: {param_count(model, f'side{j}')} "
            f"(weights only {param_count(model, f'side{j}', True)})"
        )
    print(
        f"params main exit:  {param_count(model, 'main')} "
        f"(weights only {param_count(model, 'main', True)})"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gatewire",
        description="Confidence-gated early-exit networks: generate, train, sweep, calibrate.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset CSV")
    g.add_argument("--spec", help="JSON file: a synthetic spec or a run config with a data section")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int)
    g.add_argument("--per-class", type=int, dest="per_class")
    g.add_argument("--dim", type=int)
    g.add_argument("--easy-fraction", type=float, dest="easy_fraction")
    g.add_argument("--separation", type=float)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="train log CSV path (default <out>.log.csv)")
    t.add_argument("--test-out", dest="test_out",
                   help="standardized test split CSV (default <out>.test.csv)")
    t.add_argument("--mode", choices=["joint", "frozen"])
    t.add_argument("--alpha", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="threshold sweep over a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="dataset CSV in model input space")
    s.add_argument("--thetas", help="comma-separated thresholds")
    s.add_argument("--config", help="run config JSON (thetas fallback)")
    s.add_argument("--count-mode", dest="count_mode", choices=["exact", "weights_only"],
                   default="exact")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("calibrate", help="reliability diagram and ECE for one head")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--head", default="main", help="main or side<j>")
    c.add_argument("--bins", choices=["paper", "full"], default="paper")
    c.add_argument("--out", required=True, help="reliability CSV path")
    c.add_argument("--report", help="report JSON path (default: csv path with .json)")
    c.set_defaults(func=cmd_calibrate)

    m = sub.add_parser("compare", help="train with and without the sidenet, same seed")
    m.add_argument("--config", help="run config JSON")
    m.add_argument("--out", required=True, help="comparison JSON path")
    m.add_argument("--seeds", type=int, default=1, help="number of seeds (master, master+1, ...)")
    m.add_argument("--seed", type=int)
    m.add_argument("--epochs", type=int)
    m.add_argument("--alpha", type=float)
    m.set_defaults(func=cmd_compare)

    i = sub.add_parser("info", help="print checkpoint architecture and parameter counts")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_info)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SpecError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CheckpointError, GatewireError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
