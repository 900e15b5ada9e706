"""Expected calibration error and reliability-diagram statistics.

Default bins follow the 8-bin scheme over [0.2, 1.0]: half-open [lo, hi)
except the last bin, which closes at 1.0 so a fully confident prediction is
representable. Confidence below 0.2 is an error under that scheme (softmax
confidence is bounded below by 1/C, so small class counts never get there);
the "full" scheme uses 10 bins over [0, 1] for heads that do.
"""

from __future__ import annotations

import csv
import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .errors import DataError, GatewireError
from .training import predictions

PAPER_EDGES = tuple(k / 10 for k in range(2, 11))  # 0.2 .. 1.0, 8 bins
FULL_EDGES = tuple(k / 10 for k in range(0, 11))  # 0.0 .. 1.0, 10 bins


def edges_for(scheme: str):
    if scheme == "paper":
        return PAPER_EDGES
    if scheme == "full":
        return FULL_EDGES
    raise GatewireError(f"unknown bin scheme {scheme!r}")


@dataclass(frozen=True)
class BinStats:
    lower: float
    upper: float
    n: int
    mean_confidence: float | None  # None when the bin is empty
    accuracy: float | None


@dataclass(frozen=True)
class CalibrationReport:
    bins: tuple
    ece: float
    total_n: int


def bin_predictions(records, edges=PAPER_EDGES) -> list:
    """Place (confidence, correct) records into bins.

    Each bin is [lower, upper) except the last, which includes its upper edge.
    A confidence outside [edges[0], edges[-1]] names the offending record.
    """
    edges = list(edges)
    nbins = len(edges) - 1
    confs = [[] for _ in range(nbins)]
    hits = [0] * nbins
    for i, (conf, correct) in enumerate(records):
        conf = float(conf)
        if conf < edges[0] or conf > edges[-1]:
            raise DataError(
                f"record {i}: confidence {conf!r} outside bin range "
                f"[{edges[0]}, {edges[-1]}]"
            )
        b = nbins - 1 if conf == edges[-1] else bisect_right(edges, conf) - 1
        confs[b].append(conf)
        hits[b] += bool(correct)
    out = []
    for b in range(nbins):
        n = len(confs[b])
        out.append(
            BinStats(
                lower=edges[b],
                upper=edges[b + 1],
                n=n,
                mean_confidence=math.fsum(confs[b]) / n if n else None,
                accuracy=hits[b] / n if n else None,
            )
        )
    return out


def ece(bins) -> float:
    """Sum over bins of (n_i/n) * |accuracy_i - mean_confidence_i|.

    Accumulated with math.fsum: the result is the correctly rounded value of
    the exact sum, which the small hand-checkable cases depend on.
    """
    total = sum(b.n for b in bins)
    if total == 0:
        raise DataError("ece of zero predictions")
    return math.fsum(b.n * abs(b.accuracy - b.mean_confidence) for b in bins if b.n) / total


def head_records(model, features, labels, source: str):
    """(confidence, correct) for one head over a dataset, gating not applied."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[0] == 0:
        raise DataError("empty dataset")
    model.eval_mode()
    main_probs, side_probs, _ = model.forward(features)
    if source == "main":
        probs, head = main_probs.data, model.spec.head
    elif source.startswith("side"):
        try:
            j = int(source[4:])
            probs, head = side_probs[j].data, model.spec.sidenets[j].head
        except (ValueError, IndexError):
            raise GatewireError(f"unknown head {source!r}") from None
    else:
        raise GatewireError(f"unknown head {source!r}")
    preds = predictions(probs, head)
    if head == "sigmoid":
        p = probs.reshape(-1)
        confs = np.maximum(p, 1.0 - p)
    else:
        confs = probs.max(axis=1)
    return [(float(c), bool(p == y)) for c, p, y in zip(confs, preds, labels)]


def calibration_report(model, features, labels, source: str, scheme: str = "paper") -> CalibrationReport:
    records = head_records(model, features, labels, source)
    bins = bin_predictions(records, edges_for(scheme))
    return CalibrationReport(bins=tuple(bins), ece=ece(bins), total_n=len(records))


def report_to_json(report: CalibrationReport) -> dict:
    return {
        "ece": report.ece,
        "total_n": report.total_n,
        "bins": [
            {
                "lower": b.lower,
                "upper": b.upper,
                "n": b.n,
                "mean_confidence": b.mean_confidence,
                "accuracy": b.accuracy,
            }
            for b in report.bins
        ],
    }


def write_reliability_csv(report: CalibrationReport, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_lower", "bin_upper", "n", "mean_confidence", "accuracy"])
        for b in report.bins:
            w.writerow(
                [
                    repr(b.lower),
                    repr(b.upper),
                    b.n,
                    "" if b.mean_confidence is None else repr(b.mean_confidence),
                    "" if b.accuracy is None else repr(b.accuracy),
                ]
            )


def read_reliability_csv(path) -> list:
    bins = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for rec in reader:
            bins.append(
                BinStats(
                    lower=float(rec[0]),
                    upper=float(rec[1]),
                    n=int(rec[2]),
                    mean_confidence=float(rec[3]) if rec[3] else None,
                    accuracy=float(rec[4]) if rec[4] else None,
                )
            )
    return bins
