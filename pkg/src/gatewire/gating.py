"""Confidence-gated early exit over a built model.

An input runs through the main blocks until it reaches a sidenet's attach
point; the sidenet's confidence (max softmax probability, or max(p, 1-p) for
a sigmoid head) is compared against theta. At or above theta the sidenet's
prediction is returned and the remaining blocks never run; below it the same
intermediate representation continues through the main net, so nothing is
recomputed. With several sidenets the attach points are checked in network
order and the first to fire wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import csv
import numpy as np

from .errors import DataError, GatewireError, ProbabilityError, ShapeError, SpecError
from .graph import Model, param_count
from .tensor import Tensor
from .training import predictions

PROB_TOL = 1e-6


@dataclass(frozen=True)
class GateConfig:
    theta: float = 0.9
    count_mode: str = "exact"  # exact | weights_only

    def __post_init__(self):
        if self.theta < 0:
            raise SpecError(f"theta must be >= 0, got {self.theta}")
        if self.count_mode not in ("exact", "weights_only"):
            raise SpecError(f"unknown count_mode {self.count_mode!r}")

    @property
    def weights_only(self) -> bool:
        return self.count_mode == "weights_only"


@dataclass(frozen=True)
class InferenceResult:
    predicted_class: int
    source: str  # "side<j>" or "main"
    confidence: float
    params_used: int


def confidence(probs: np.ndarray, head: str) -> float:
    """Max softmax probability, or max(p, 1-p) for a sigmoid head."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    if head == "sigmoid":
        if probs.shape != (1,) or not 0.0 <= probs[0] <= 1.0:
            raise ProbabilityError(f"invalid sigmoid probability {probs!r}")
        p = float(probs[0])
        return max(p, 1.0 - p)
    if probs.min() < -PROB_TOL or abs(probs.sum() - 1.0) > PROB_TOL:
        raise ProbabilityError(
            f"row is not a probability distribution (sum {probs.sum()!r})"
        )
    return float(probs.max())


def ensemble_predict(side_probs, main_probs) -> int:
    """Argmax of the elementwise sum; ties go to the lowest class index."""
    a = np.asarray(side_probs, dtype=np.float64).reshape(-1)
    b = np.asarray(main_probs, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"ensemble rows differ in length: {a.shape[0]} vs {b.shape[0]}")
    return int(np.argmax(a + b))


def _attach_order(model: Model):
    return sorted(range(len(model.spec.sidenets)),
                  key=lambda j: model.spec.sidenets[j].attach_index)


def _side_result(model: Model, j: int, probs_row, conf, gate: GateConfig) -> InferenceResult:
    head = model.spec.sidenets[j].head
    return InferenceResult(
        predicted_class=int(predictions(probs_row.reshape(1, -1), head)[0]),
        source=f"side{j}",
        confidence=conf,
        params_used=param_count(model, f"side{j}", gate.weights_only),
    )


def _main_result(model: Model, probs_row, gate: GateConfig) -> InferenceResult:
    return InferenceResult(
        predicted_class=int(predictions(probs_row.reshape(1, -1), model.spec.head)[0]),
        source="main",
        confidence=confidence(probs_row, model.spec.head),
        params_used=param_count(model, "main", gate.weights_only),
    )


def infer_one(model: Model, x, gate: GateConfig) -> InferenceResult:
    """Gated prediction for a single input row. Stops at the first sidenet whose
    confidence reaches theta; otherwise the intermediate continues onward."""
    if not model.spec.sidenets:
        raise GatewireError("gated inference needs at least one sidenet")
    model.eval_mode()
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    h = Tensor(x)
    pos = 0
    for j in _attach_order(model):
        attach = model.spec.sidenets[j].attach_index
        h = model.run_main(h if pos else x, start=pos, stop=attach + 1)[-1]
        probs_row = model.side_forward(j, h).data[0]
        conf = confidence(probs_row, model.spec.sidenets[j].head)
        if conf >= gate.theta:
            return _side_result(model, j, probs_row, conf, gate)
        pos = attach + 1
    out = model.run_main(h if pos else x, start=pos)[-1]
    probs_row = model._apply_head(out, model.spec.head).data[0]
    return _main_result(model, probs_row, gate)


@dataclass(frozen=True)
class RowHeads:
    """Every head's output for one input, in attach-check order, gating not yet applied."""
    side_js: tuple
    side_probs: tuple  # probability rows
    side_confs: tuple
    main_probs: np.ndarray


def evaluate_rows(model: Model, X) -> list:
    """Ungated per-row head outputs. Rows are evaluated one at a time with the
    same op sequence gating uses, so thresholding these values afterwards
    reproduces infer_one bit-for-bit."""
    if not model.spec.sidenets:
        raise GatewireError("gated inference needs at least one sidenet")
    model.eval_mode()
    X = np.asarray(X, dtype=np.float64)
    order = _attach_order(model)
    rows = []
    for r in range(X.shape[0]):
        x = X[r : r + 1]
        h = Tensor(x)
        pos = 0
        js, probs, confs = [], [], []
        for j in order:
            attach = model.spec.sidenets[j].attach_index
            h = model.run_main(h if pos else x, start=pos, stop=attach + 1)[-1]
            row = model.side_forward(j, h).data[0]
            js.append(j)
            probs.append(row)
            confs.append(confidence(row, model.spec.sidenets[j].head))
            pos = attach + 1
        out = model.run_main(h if pos else x, start=pos)[-1]
        main_row = model._apply_head(out, model.spec.head).data[0]
        rows.append(RowHeads(tuple(js), tuple(probs), tuple(confs), main_row))
    return rows


def decide(model: Model, heads: RowHeads, gate: GateConfig) -> InferenceResult:
    for j, probs_row, conf in zip(heads.side_js, heads.side_probs, heads.side_confs):
        if conf >= gate.theta:
            return _side_result(model, j, probs_row, conf, gate)
    return _main_result(model, heads.main_probs, gate)


@dataclass(frozen=True)
class BatchStats:
    accuracy: float
    early_exit_fraction: float
    avg_params: float


def aggregate(results, labels) -> BatchStats:
    correct = sum(1 for r, y in zip(results, labels) if r.predicted_class == int(y))
    exited = sum(1 for r in results if r.source != "main")
    n = len(results)
    return BatchStats(
        accuracy=correct / n,
        early_exit_fraction=exited / n,
        avg_params=float(np.mean([r.params_used for r in results])),
    )


def infer_batch(model: Model, X, labels, gate: GateConfig):
    """Gated prediction for every row, in input order, plus aggregates."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if X.shape[0] != labels.shape[0]:
        raise DataError(f"{X.shape[0]} inputs but {labels.shape[0]} labels")
    if X.shape[0] == 0:
        raise DataError("empty batch")
    results = [decide(model, heads, gate) for heads in evaluate_rows(model, X)]
    return results, aggregate(results, labels)


def write_inference_csv(results, labels, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "true_label", "pred", "source", "confidence", "params_used"])
        for i, (r, y) in enumerate(zip(results, labels)):
            w.writerow([i, int(y), r.predicted_class, r.source, repr(r.confidence), r.params_used])


def read_inference_csv(path):
    results, labels = [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for rec in reader:
            labels.append(int(rec[1]))
            results.append(
                InferenceResult(
                    predicted_class=int(rec[2]),
                    source=rec[3],
                    confidence=float(rec[4]),
                    params_used=int(rec[5]),
                )
            )
    return results, labels
