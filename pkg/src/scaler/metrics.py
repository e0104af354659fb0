"""MAE, adaptive F-beta, adaptive E-measure and S-measure for binary segmentation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError

EPS = np.finfo(np.float64).eps
CSV_COLUMNS = ("sample_id", "mae", "f_beta", "e_phi", "s_alpha")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} must be equal H x W shapes")
    return p, g > 0.5


def adaptive_threshold(pred: np.ndarray) -> float:
    """min(2 * mean, 1), with a correctly rounded sum so ties do not depend on summation order."""
    return min(2.0 * math.fsum(pred.ravel()) / pred.size, 1.0)


def binarize(pred: np.ndarray) -> np.ndarray:
    """pred >= min(2 mean, 1), with all-zero pixels never counted as foreground."""
    return (pred >= adaptive_threshold(pred)) & (pred > 0)


def mae(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean(np.abs(p - g)))


def f_beta(pred, gt, beta2: float = 0.3) -> float:
    p, g = _pair(pred, gt)
    if not g.any():
        raise ValueError("F-beta needs a non-empty ground-truth foreground")
    b = binarize(p)
    tp = np.count_nonzero(b & g)
    if tp == 0:
        return 0.0
    precision = tp / np.count_nonzero(b)
    recall = tp / np.count_nonzero(g)
    return float((1 + beta2) * precision * recall / (beta2 * precision + recall))


def e_measure(pred, gt) -> float:
    """Enhanced-alignment measure at the adaptive threshold, clamped to [0, 1]."""
    p, g = _pair(pred, gt)
    b = binarize(p)
    n = g.size
    n_fg = np.count_nonzero(g)
    if n_fg == 0:
        score = np.count_nonzero(~b)
    elif n_fg == n:
        score = np.count_nonzero(b)
    else:
        # the aligned maps only take four distinct value pairs
        mu_b = np.count_nonzero(b) / n
        mu_g = n_fg / n
        score = 0.0
        for bv in (0.0, 1.0):
            for gv in (0.0, 1.0):
                count = np.count_nonzero((b == bool(bv)) & (g == bool(gv)))
                if not count:
                    continue
                a, c = bv - mu_b, gv - mu_g
                align = 2 * a * c / (a * a + c * c + EPS)
                score += count * (align + 1) ** 2 / 4
    return float(np.clip(score / (n - 1 + EPS), 0.0, 1.0))


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n < 2:
        return 1.0 if n == 0 or abs(pred.mean() - gt.mean()) == 0 else 0.0
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1)
    sy = ((gt - y) ** 2).sum() / (n - 1)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return float(alpha / (beta + EPS))
    if beta == 0:
        return 1.0
    return 0.0


def _s_object(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2 * x / (x * x + 1 + sigma + EPS))


def _object_score(p: np.ndarray, g: np.ndarray) -> float:
    u = g.mean()
    fg = _s_object((p * g)[g])
    bg = _s_object(((1 - p) * (1 - g))[~g])
    return float(u * fg + (1 - u) * bg)


def _region_score(p: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    ys, xs = np.nonzero(g)
    cy = int(np.round(ys.mean())) + 1
    cx = int(np.round(xs.mean())) + 1
    area = h * w
    weights = (cx * cy / area, (w - cx) * cy / area, cx * (h - cy) / area)
    weights = (*weights, 1 - sum(weights))
    gf = g.astype(np.float64)
    quads = ((slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
             (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w)))
    return float(sum(wt * _ssim(p[q], gf[q]) for wt, q in zip(weights, quads) if wt > 0))


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object-aware + (1 - alpha) * region-aware similarity."""
    p, g = _pair(pred, gt)
    y = g.mean()
    if y == 0:
        score = 1 - p.mean()
    elif y == 1:
        score = p.mean()
    else:
        score = alpha * _object_score(p, g) + (1 - alpha) * _region_score(p, g)
    return float(np.clip(score, 0.0, 1.0))


@dataclass
class MetricReport:
    sample_ids: list = field(default_factory=list)
    per_sample: dict[str, list[float]] = field(
        default_factory=lambda: {"mae": [], "f_beta": [], "e_phi": [], "s_alpha": []})

    def add(self, sample_id, pred, gt) -> None:
        self.sample_ids.append(sample_id)
        self.per_sample["mae"].append(mae(pred, gt))
        self.per_sample["f_beta"].append(f_beta(pred, gt))
        self.per_sample["e_phi"].append(e_measure(pred, gt))
        self.per_sample["s_alpha"].append(s_measure(pred, gt))

    @property
    def means(self) -> dict[str, float]:
        return {k: float(np.mean(v)) if v else float("nan") for k, v in self.per_sample.items()}

    @property
    def mae(self) -> float:
        return self.means["mae"]

    @property
    def f_beta(self) -> float:
        return self.means["f_beta"]

    def to_dict(self) -> dict:
        rows = [dict(sample_id=sid, **{k: self.per_sample[k][i] for k in self.per_sample})
                for i, sid in enumerate(self.sample_ids)]
        return {"mean": self.means, "per_sample": rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for i, sid in enumerate(self.sample_ids):
            writer.writerow([sid] + [repr(self.per_sample[k][i]) for k in CSV_COLUMNS[1:]])
        return buf.getvalue()


def evaluate_predictions(preds, gts, ids=None) -> MetricReport:
    report = MetricReport()
    ids = ids if ids is not None else range(len(preds))
    for sid, p, g in zip(ids, preds, gts):
        report.add(sid, p, g)
    return report
