"""Training objectives, built as graph nodes on the prediction's graph.

Predictions are graph variables of shape 1x1xHxW; targets and weight maps are
plain H x W arrays (fixed supervision). Cross-entropy uses natural logs, the
entropy weighting uses bits.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .autodiff import ShapeError, Var
from .pseudolabel import entropy, trust_mask, uncertainty

IOU_SMOOTH = 1.0

HARD, EASY, NORMAL = "hard", "easy", "normal"


@dataclass(frozen=True)
class RefinementThresholds:
    hard_entropy: float = 0.8
    easy_entropy: float = 0.2
    trust_low: float = 0.1
    trust_high: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.easy_entropy < self.hard_entropy <= 1.0:
            raise ValueError("need 0 <= easy_entropy < hard_entropy <= 1")


@dataclass(frozen=True)
class RefineOptions:
    """Switches for the ablation runs; the defaults are the full method."""

    use_entropy_weight: bool = True
    use_uncertainty_weight: bool = True
    trust_from_plf: bool = False


def _target(pred: Var, arr, what: str) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.size != int(np.prod(pred.shape)) or a.shape[-2:] != pred.shape[-2:]:
        raise ShapeError(f"{what} shape {a.shape} does not match prediction {pred.shape}")
    return a.reshape(pred.shape)


def _ce_sum(pred: Var, target: np.ndarray, weights: np.ndarray) -> Var:
    """sum_i w_i * [t_i log p_i + (1 - t_i) log(1 - p_i)]  (note: not negated)."""
    g = pred.graph
    pos = g.mul(g.const(weights * target), g.log(pred))
    neg = g.mul(g.const(weights * (1.0 - target)), g.log(g.one_minus(pred)))
    return g.sum(g.add(pos, neg))


def bce(pred: Var, target, pixel_weights=None) -> Var:
    """Binary cross-entropy averaged over all N pixels: sum(w * ce) / N."""
    t = _target(pred, target, "target")
    w = np.ones(pred.shape) if pixel_weights is None else _target(pred, pixel_weights, "weights")
    return pred.graph.scale(_ce_sum(pred, t, w), -1.0 / t.size)


def soft_iou(pred: Var, target, pixel_weights=None, smooth: float = IOU_SMOOTH) -> Var:
    """1 - (sum w p t + s) / (sum w (p + t - p t) + s)."""
    g = pred.graph
    t = _target(pred, target, "target")
    w = np.ones(pred.shape) if pixel_weights is None else _target(pred, pixel_weights, "weights")
    inter = g.sum(g.mul(g.const(w * t), pred))
    # union = sum w (1 - t) p + sum w t
    union_p = g.sum(g.mul(g.const(w * (1.0 - t)), pred))
    num = g.add(inter, g.const(smooth))
    den = g.add(union_p, g.const(float((w * t).sum()) + smooth))
    return g.add(g.const(1.0), g.scale(g.div(num, den), -1.0))


def partial_ce(pred: Var, annotation) -> Var:
    """Cross-entropy over annotated pixels only (+1 fg, -1 bg, 0 unknown)."""
    labels = _target(pred, getattr(annotation, "labels", annotation), "annotation")
    known = (labels != 0).astype(np.float64)
    count = int(known.sum())
    if count == 0:
        raise ValueError("annotation has no labeled pixels")
    t = (labels > 0).astype(np.float64)
    return pred.graph.scale(_ce_sum(pred, t, known), -1.0 / count)


def supervised(pred: Var, dense) -> Var:
    g = pred.graph
    return g.add(bce(pred, dense), soft_iou(pred, dense))


def refine_basic(pl, pred: Var, extra_weights=None,
                 options: RefineOptions = RefineOptions()) -> Var:
    """(1 - E(pl)) * [CE(pred, pl; U) + IoU(pred, pl; U)] with U = (2 pl - 1)^2 per pixel."""
    pl = np.asarray(pl, dtype=np.float64)
    g = pred.graph
    conf = 1.0 - entropy(pl) if options.use_entropy_weight else 1.0
    w = uncertainty(pl) if options.use_uncertainty_weight else np.ones(pl.shape[-2:])
    if extra_weights is not None:
        w = w * np.asarray(extra_weights).reshape(w.shape)
    base = g.add(bce(pred, pl, w), soft_iou(pred, pl, w))
    return g.scale(base, conf)


class Refined(NamedTuple):
    loss: Var
    branch: str


def select_branch(pl_entropy: float, pred_entropy: float,
                  thr: RefinementThresholds = RefinementThresholds()) -> str:
    """Hard is tested before easy; both conditions can hold at once."""
    if pl_entropy >= thr.hard_entropy:
        return HARD
    if pred_entropy <= thr.easy_entropy:
        return EASY
    return NORMAL


PredStrong = Var | Callable[[], Var] | None


def _resolve(pred_strong: PredStrong) -> Var:
    return pred_strong() if callable(pred_strong) else pred_strong


def refine_piecewise(pl, pred_weak: Var, pred_strong: PredStrong = None,
                     thr: RefinementThresholds = RefinementThresholds(),
                     options: RefineOptions = RefineOptions(), trust_source=None,
                     pred_entropy: float | None = None) -> Refined:
    """Difficulty-dependent refinement.

    hard  (E(pl) >= thr.hard):         trust-masked R_b(pl, pred_weak)
    easy  (E(pred_weak) <= thr.easy):  R_b(pl, pred_weak) + R_b(pl, pred_strong)
    else:                              R_b(pl, pred_weak)

    ``pred_strong`` may be a zero-argument callable so the strong-view forward
    pass is only run when the easy branch fires. ``trust_source`` overrides the
    map the trust mask is computed from (default: ``pl`` itself).
    """
    pl = np.asarray(pl, dtype=np.float64)
    if pred_entropy is None:
        pred_entropy = entropy(pred_weak.value)
    branch = select_branch(entropy(pl), pred_entropy, thr)
    if branch == HARD:
        src = pl if trust_source is None else trust_source
        w = trust_mask(src, thr.trust_low, thr.trust_high)
        return Refined(refine_basic(pl, pred_weak, w, options), branch)
    if branch == EASY:
        strong = _resolve(pred_strong)
        if strong is None:
            raise ValueError("easy branch selected but no strong-view prediction supplied")
        g = pred_weak.graph
        return Refined(g.add(refine_basic(pl, pred_weak, None, options),
                             refine_basic(pl, strong, None, options)), branch)
    return Refined(refine_basic(pl, pred_weak, None, options), branch)


@dataclass
class LossReport:
    terms: dict[str, Var]
    total: Var
    branches: dict[str, str] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        out = {k: float(v.value) for k, v in self.terms.items()}
        out["total"] = float(self.total.value)
        return out

    def to_dict(self) -> dict:
        return {"terms": self.values(), "branches": dict(self.branches)}


def _total(terms: dict[str, Var]) -> Var:
    vs = list(terms.values())
    g = vs[0].graph
    total = vs[0]
    for v in vs[1:]:
        total = g.add(total, v)
    return total


def _supervision_terms(pred: Var, mode: str, labeled: bool, annotation, dense) -> dict[str, Var]:
    if mode == "weak":
        if annotation is None:
            raise ValueError("weak mode requires a sparse annotation")
        return {"supervised": partial_ce(pred, annotation)}
    if mode != "semi":
        raise ValueError(f"unknown mode {mode!r}")
    if not labeled:
        return {}
    if dense is None:
        raise ValueError("labeled semi-supervised sample requires a dense mask")
    return {"supervised_ce": bce(pred, dense), "supervised_iou": soft_iou(pred, dense)}


def phase1_loss(mode: str, labeled: bool, pl_t, pl_f, pred_weak: Var,
                pred_strong: PredStrong = None, annotation=None, dense=None,
                thr: RefinementThresholds = RefinementThresholds(),
                options: RefineOptions = RefineOptions(), use_plf: bool = True) -> LossReport:
    """Student objective: R(PL_T) + R(PL_F) + supervision for the sample's regime."""
    pred_entropy = entropy(pred_weak.value)
    cache: list[Var] = []

    def strong_once():
        if not cache:
            cache.append(_resolve(pred_strong))
        return cache[0]

    terms: dict[str, Var] = {}
    branches: dict[str, str] = {}
    trust_src = pl_f if options.trust_from_plf else None
    r = refine_piecewise(pl_t, pred_weak, strong_once, thr, options, trust_src, pred_entropy)
    terms["r_teacher"], branches["r_teacher"] = r.loss, r.branch
    if use_plf:
        r = refine_piecewise(pl_f, pred_weak, strong_once, thr, options, None, pred_entropy)
        terms["r_fused"], branches["r_fused"] = r.loss, r.branch
    terms.update(_supervision_terms(pred_weak, mode, labeled, annotation, dense))
    return LossReport(terms, _total(terms), branches)


def aug_invariance(y2_weak: Var, y2_strong: Var, warp: Callable | None = None) -> Var:
    """CE + IoU of the strong view against the detached weak-view prediction.

    ``warp`` maps the detached weak prediction into the strong view's frame
    when the two views do not share geometry.
    """
    g = y2_strong.graph
    target = y2_weak.value.copy()
    if warp is not None:
        target = warp(target)
    target = _target(y2_strong, target, "weak-view target")
    return g.add(bce(y2_strong, target), soft_iou(y2_strong, target))


def noise_resistance(y2: Var, pl_m, use_uncertainty_weight: bool = True) -> Var:
    """U(PL_M)-weighted CE + IoU, without the sample-level entropy factor."""
    pl_m = np.asarray(pl_m, dtype=np.float64)
    w = uncertainty(pl_m) if use_uncertainty_weight else None
    g = y2.graph
    return g.add(bce(y2, pl_m, w), soft_iou(y2, pl_m, w))


def phase2_loss(mode: str, labeled: bool, y2_weak: Var, y2_strong: Var, pl_m,
                annotation=None, dense=None, lai_warp: Callable | None = None,
                lnr_with_refine: bool = False,
                thr: RefinementThresholds = RefinementThresholds(),
                options: RefineOptions = RefineOptions()) -> LossReport:
    """Generalist objective: L_ai + L_nr + supervision for the sample's regime."""
    terms = {"ai": aug_invariance(y2_weak, y2_strong, lai_warp)}
    branches = {}
    if lnr_with_refine:
        r = refine_piecewise(pl_m, y2_weak, y2_strong, thr, options)
        terms["nr"], branches["nr"] = r.loss, r.branch
    else:
        terms["nr"] = noise_resistance(y2_weak, pl_m, options.use_uncertainty_weight)
    terms.update(_supervision_terms(y2_weak, mode, labeled, annotation, dense))
    return LossReport(terms, _total(terms), branches)
