"""Semantic and binary change-detection scores in the SECOND benchmark style.

Pixels are labelled 0 when the two dates agree and ``1 + class`` (the
second-date class) otherwise; a ``(C+1) x (C+1)`` confusion matrix with ground
truth on rows and prediction on columns accumulates those labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UndefinedMetricError

METRIC_NAMES = ("OA", "mIoU", "SeK", "Score", "F_scd", "Kappa_scd",
                "IoU_bin", "F1_bin", "Precision_bin", "Recall_bin", "Kappa_bin")


@dataclass(frozen=True)
class SCDConfusion:
    C: int
    Q: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.C < 1:
            raise ValueError("need at least one semantic class")
        q = np.zeros((self.C + 1, self.C + 1), dtype=np.int64) if self.Q is None else np.asarray(self.Q, dtype=np.int64)
        if q.shape != (self.C + 1, self.C + 1):
            raise ShapeError(f"confusion must be {(self.C + 1,) * 2}, got {q.shape}")
        if (q < 0).any():
            raise ValueError("confusion counts must be non-negative")
        q = q.copy()
        q.flags.writeable = False
        object.__setattr__(self, "Q", q)

    @property
    def total(self) -> int:
        return int(self.Q.sum())

    @property
    def binary(self) -> np.ndarray:
        q = self.Q
        return np.array([[q[0, 0], q[0, 1:].sum()],
                         [q[1:, 0].sum(), q[1:, 1:].sum()]], dtype=np.int64)

    def __add__(self, other: "SCDConfusion") -> "SCDConfusion":
        if other.C != self.C:
            raise ShapeError("cannot merge confusions with different class counts")
        return SCDConfusion(self.C, self.Q + other.Q)

    def __eq__(self, other):
        return isinstance(other, SCDConfusion) and self.C == other.C and np.array_equal(self.Q, other.Q)


def change_labels(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    first, second = np.asarray(first, dtype=np.int64), np.asarray(second, dtype=np.int64)
    return np.where(first == second, 0, second + 1)


def accumulate(conf: SCDConfusion, gt_pair, pred_pair, valid: np.ndarray | None = None) -> SCDConfusion:
    """Add one bi-temporal pair; ``valid`` optionally masks out ignored pixels."""
    layers = [np.asarray(a) for a in (*gt_pair, *pred_pair)]
    shape = layers[0].shape
    if any(a.shape != shape for a in layers) or (valid is not None and np.shape(valid) != shape):
        raise ShapeError(f"all layouts must share one shape, got {[a.shape for a in layers]}")
    for a in layers:
        if a.size and (a.min() < 0 or a.max() >= conf.C):
            raise ShapeError(f"class indices must lie in 0..{conf.C - 1}")
    gt = change_labels(*layers[:2]).ravel()
    pred = change_labels(*layers[2:]).ravel()
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).ravel()
        gt, pred = gt[keep], pred[keep]
    n = conf.C + 1
    counts = np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
    return SCDConfusion(conf.C, conf.Q + counts)


def _ratio(num, den):
    return (float(num) / float(den), True) if den else (0.0, False)


def cohen_kappa(matrix: np.ndarray) -> tuple[float, bool]:
    m = np.asarray(matrix, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        return 0.0, False
    po = np.trace(m) / total
    pe = float(m.sum(axis=1) @ m.sum(axis=0)) / total ** 2
    if pe >= 1.0:
        return 0.0, False
    return float((po - pe) / (1.0 - pe)), True


def _f1(p, r):
    return (2 * p * r / (p + r), True) if p + r > 0 else (0.0, False)


def score(conf: SCDConfusion) -> dict[str, tuple[float, str]]:
    """Every metric as ``name -> (value, "ok" | "degenerate")``."""
    q = conf.Q.astype(np.float64)
    total = q.sum()
    if total <= 0:
        raise UndefinedMetricError("confusion matrix is empty")
    b = conf.binary.astype(np.float64)
    res: dict[str, tuple[float, bool]] = {}

    res["OA"] = (float(np.trace(q) / total), True)
    iou_nc = _ratio(b[0, 0], b[0, 0] + b[0, 1] + b[1, 0])
    iou_c = _ratio(b[1, 1], b[1, 1] + b[0, 1] + b[1, 0])
    res["mIoU"] = ((iou_nc[0] + iou_c[0]) / 2, iou_nc[1] and iou_c[1])

    q_nc = q.copy()
    q_nc[0, 0] = 0
    res["Kappa_scd"] = cohen_kappa(q_nc)
    res["SeK"] = (math.exp(iou_c[0] - 1.0) * res["Kappa_scd"][0], res["Kappa_scd"][1] and iou_c[1])
    res["Score"] = (0.3 * res["mIoU"][0] + 0.7 * res["SeK"][0], res["mIoU"][1] and res["SeK"][1])

    sc_tp = np.trace(q[1:, 1:])
    sc_p = _ratio(sc_tp, q[:, 1:].sum())
    sc_r = _ratio(sc_tp, q[1:, :].sum())
    f = _f1(sc_p[0], sc_r[0])
    res["F_scd"] = (f[0], f[1] and sc_p[1] and sc_r[1])

    res["IoU_bin"] = iou_c
    prec = _ratio(b[1, 1], b[:, 1].sum())
    rec = _ratio(b[1, 1], b[1, :].sum())
    res["Precision_bin"] = prec
    res["Recall_bin"] = rec
    f = _f1(prec[0], rec[0])
    res["F1_bin"] = (f[0], f[1] and prec[1] and rec[1])
    res["Kappa_bin"] = cohen_kappa(b)
    return {name: (res[name][0], "ok" if res[name][1] else "degenerate") for name in METRIC_NAMES}


def format_report(metrics: dict[str, tuple[float, str]]) -> str:
    return "".join(f"metric={name} value={value!r} flag={flag}\n" for name, (value, flag) in metrics.items())


def parse_report(text: str) -> dict[str, tuple[float, str]]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        fields = dict(part.split("=", 1) for part in line.split())
        out[fields["metric"]] = (float(fields["value"]), fields["flag"])
    return out
