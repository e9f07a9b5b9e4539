"""Instance-matched mask evaluation: IoU, Overlap/Boundary P/R/F, F@.75,
and occlusion-classification scores.

Predictions and ground truths are matched one-to-one by maximizing total
Overlap-F between amodal masks; every reported score is an average over the
matched pairs. Scores over occluded ("invisible") regions only average pairs
whose ground-truth occluded region is nonempty, since the IoU of two empty
sets carries no information.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .scene import InstanceAnnotation, occlusion_flag


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    a = a.astype(bool)
    b = b.astype(bool)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def overlap_prf(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """Area precision/recall/F between binary masks (0 on empty operands)."""
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    inter = int((pred & gt).sum())
    p = inter / int(pred.sum()) if pred.any() else 0.0
    r = inter / int(gt.sum()) if gt.any() else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Set pixels 4-adjacent to an unset pixel; the image border counts as unset."""
    mask = mask.astype(bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def default_boundary_tolerance(shape: tuple[int, int]) -> float:
    """0.5% of the image diagonal, at least 1 px."""
    h, w = shape
    return max(1.0, 0.005 * float(np.hypot(h, w)))


def boundary_prf(
    pred: np.ndarray, gt: np.ndarray, tolerance_px: float | None = None
) -> tuple[float, float, float]:
    """Boundary precision/recall/F with a Euclidean distance tolerance.

    A boundary pixel counts as matched when some boundary pixel of the other
    mask lies within ``tolerance_px``. Defaults to the diagonal-proportional
    tolerance so scores transfer across canvas sizes.
    """
    if tolerance_px is None:
        tolerance_px = default_boundary_tolerance(pred.shape)
    if tolerance_px < 0:
        raise ValueError("tolerance_px must be non-negative")
    pb = boundary_pixels(pred)
    gb = boundary_pixels(gt)
    p = _boundary_fraction_within(pb, gb, tolerance_px)
    r = _boundary_fraction_within(gb, pb, tolerance_px)
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def _boundary_fraction_within(src: np.ndarray, ref: np.ndarray, tol: float) -> float:
    if not src.any():
        return 0.0
    if not ref.any():
        return 0.0
    dist_to_ref = ndimage.distance_transform_edt(~ref)
    return float((dist_to_ref[src] <= tol).mean())


@dataclass
class MatchResult:
    """Partial bijection between prediction and ground-truth indices."""

    pairs: list[tuple[int, int]]
    unmatched_preds: list[int]
    unmatched_gts: list[int]


def hungarian_match(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> MatchResult:
    """Optimal one-to-one matching maximizing total Overlap-F.

    Pairs whose Overlap-F is zero are discarded to the unmatched lists, so
    disjoint masks never count as matched.
    """
    if not preds or not gts:
        return MatchResult([], list(range(len(preds))), list(range(len(gts))))
    f_matrix = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            f_matrix[i, j] = overlap_prf(p, g)[2]
    rows, cols = linear_sum_assignment(f_matrix, maximize=True)
    pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if f_matrix[i, j] > 0.0]
    matched_p = {i for i, _ in pairs}
    matched_g = {j for _, j in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_preds=[i for i in range(len(preds)) if i not in matched_p],
        unmatched_gts=[j for j in range(len(gts)) if j not in matched_g],
    )


@dataclass
class OcclusionMetrics:
    """Occlusion-classification counts and scores over matched instances.

    alpha = matched pairs, beta = predicted-occluded among them, gamma =
    ground-truth-occluded, delta = correct occlusion predictions. Score
    fields are None when their denominator count is zero and alpha is 0.
    """

    alpha: int = 0
    beta: int = 0
    gamma: int = 0
    delta: int = 0

    @property
    def acc_o(self) -> float | None:
        return self.delta / self.alpha if self.alpha > 0 else None

    @property
    def p_o(self) -> float | None:
        if self.alpha == 0:
            return None
        return self.delta / self.beta if self.beta > 0 else 0.0

    @property
    def r_o(self) -> float | None:
        if self.alpha == 0:
            return None
        return self.delta / self.gamma if self.gamma > 0 else 0.0

    @property
    def f_o(self) -> float | None:
        p, r = self.p_o, self.r_o
        if p is None or r is None:
            return None
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class MetricsReport:
    """Every score of the evaluation protocol, plus the counts behind them.

    Mask-quality fields are None ("undefined") when no pair contributes,
    never silently zero. ``n_occluded_pairs`` counts matched pairs with a
    nonempty ground-truth occluded region; those are the pairs behind
    ``miou_occ`` and the invisible-mask averages.
    """

    n_preds: int = 0
    n_gts: int = 0
    n_matched: int = 0
    n_occluded_pairs: int = 0
    miou_full: float | None = None
    miou_occ: float | None = None
    amodal_overlap_prf: tuple[float, float, float] | None = None
    amodal_boundary_prf: tuple[float, float, float] | None = None
    invisible_overlap_prf: tuple[float, float, float] | None = None
    invisible_boundary_prf: tuple[float, float, float] | None = None
    f_at_75: float | None = None
    occlusion: OcclusionMetrics = field(default_factory=OcclusionMetrics)

    def to_dict(self) -> dict:
        def prf(t):
            if t is None:
                return None
            return {"precision": t[0], "recall": t[1], "f": t[2]}

        return {
            "n_preds": self.n_preds,
            "n_gts": self.n_gts,
            "n_matched": self.n_matched,
            "n_occluded_pairs": self.n_occluded_pairs,
            "miou_full": self.miou_full,
            "miou_occ": self.miou_occ,
            "amodal_overlap": prf(self.amodal_overlap_prf),
            "amodal_boundary": prf(self.amodal_boundary_prf),
            "invisible_overlap": prf(self.invisible_overlap_prf),
            "invisible_boundary": prf(self.invisible_boundary_prf),
            "f_at_75": self.f_at_75,
            "occlusion": {
                "alpha": self.occlusion.alpha,
                "beta": self.occlusion.beta,
                "gamma": self.occlusion.gamma,
                "delta": self.occlusion.delta,
                "acc_o": self.occlusion.acc_o,
                "p_o": self.occlusion.p_o,
                "r_o": self.occlusion.r_o,
                "f_o": self.occlusion.f_o,
            },
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _mean_prf(rows: list[tuple[float, float, float]]):
    if not rows:
        return None
    arr = np.asarray(rows, dtype=np.float64)
    p, r, f = arr.mean(axis=0)
    return (float(p), float(r), float(f))


def evaluate_scene(
    preds: Sequence,
    gts: Sequence[InstanceAnnotation],
    boundary_tolerance_px: float | None = None,
) -> MetricsReport:
    """Score one scene's predictions against its annotations.

    ``preds`` need ``amodal_mask`` and ``visible_mask`` attributes (full-image
    binary arrays); each prediction's occlusion flag is derived from its own
    visible/amodal area ratio. Matching runs on amodal masks.
    """
    match = hungarian_match([p.amodal_mask for p in preds], [g.amodal_mask for g in gts])
    report = MetricsReport(n_preds=len(preds), n_gts=len(gts), n_matched=len(match.pairs))
    if not match.pairs:
        return report

    full_ious: list[float] = []
    occ_ious: list[float] = []
    amodal_ov: list[tuple[float, float, float]] = []
    amodal_bo: list[tuple[float, float, float]] = []
    inv_ov: list[tuple[float, float, float]] = []
    inv_bo: list[tuple[float, float, float]] = []
    occ = OcclusionMetrics()
    n_above = 0

    for pi, gi in match.pairs:
        pred, gt = preds[pi], gts[gi]
        pred_amodal = pred.amodal_mask.astype(bool)
        pred_visible = pred.visible_mask.astype(bool)
        pred_occluded = pred_amodal & ~pred_visible

        full_ious.append(iou(pred_amodal, gt.amodal_mask))
        ov = overlap_prf(pred_amodal, gt.amodal_mask)
        amodal_ov.append(ov)
        amodal_bo.append(boundary_prf(pred_amodal, gt.amodal_mask, boundary_tolerance_px))
        if ov[2] > 0.75:
            n_above += 1

        if gt.occluded_mask.any():
            occ_ious.append(iou(pred_occluded, gt.occluded_mask))
            inv_ov.append(overlap_prf(pred_occluded, gt.occluded_mask))
            inv_bo.append(boundary_prf(pred_occluded, gt.occluded_mask, boundary_tolerance_px))

        amodal_area = int(pred_amodal.sum())
        pred_flag = (
            occlusion_flag(int(pred_visible.sum()), amodal_area) if amodal_area > 0 else False
        )
        occ.alpha += 1
        occ.beta += int(pred_flag)
        occ.gamma += int(gt.occluded_flag)
        occ.delta += int(pred_flag and gt.occluded_flag)

    report.n_occluded_pairs = len(occ_ious)
    report.miou_full = float(np.mean(full_ious))
    report.miou_occ = float(np.mean(occ_ious)) if occ_ious else None
    report.amodal_overlap_prf = _mean_prf(amodal_ov)
    report.amodal_boundary_prf = _mean_prf(amodal_bo)
    report.invisible_overlap_prf = _mean_prf(inv_ov)
    report.invisible_boundary_prf = _mean_prf(inv_bo)
    report.f_at_75 = 100.0 * n_above / len(match.pairs)
    report.occlusion = occ
    return report


def aggregate_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Combine per-scene reports, weighting each mean by its pair count."""
    total = MetricsReport()
    for r in reports:
        total.n_preds += r.n_preds
        total.n_gts += r.n_gts
        total.n_matched += r.n_matched
        total.n_occluded_pairs += r.n_occluded_pairs
        total.occlusion.alpha += r.occlusion.alpha
        total.occlusion.beta += r.occlusion.beta
        total.occlusion.gamma += r.occlusion.gamma
        total.occlusion.delta += r.occlusion.delta

    def wmean(values_weights):
        pairs = [(v, w) for v, w in values_weights if v is not None and w > 0]
        if not pairs:
            return None
        wsum = sum(w for _, w in pairs)
        return sum(v * w for v, w in pairs) / wsum

    def wmean_prf(values_weights):
        pairs = [(v, w) for v, w in values_weights if v is not None and w > 0]
        if not pairs:
            return None
        wsum = sum(w for _, w in pairs)
        return tuple(
            sum(v[k] * w for v, w in pairs) / wsum for k in range(3)
        )

    total.miou_full = wmean((r.miou_full, r.n_matched) for r in reports)
    total.miou_occ = wmean((r.miou_occ, r.n_occluded_pairs) for r in reports)
    total.f_at_75 = wmean((r.f_at_75, r.n_matched) for r in reports)
    total.amodal_overlap_prf = wmean_prf((r.amodal_overlap_prf, r.n_matched) for r in reports)
    total.amodal_boundary_prf = wmean_prf((r.amodal_boundary_prf, r.n_matched) for r in reports)
    total.invisible_overlap_prf = wmean_prf(
        (r.invisible_overlap_prf, r.n_occluded_pairs) for r in reports
    )
    total.invisible_boundary_prf = wmean_prf(
        (r.invisible_boundary_prf, r.n_occluded_pairs) for r in reports
    )
    return total


def render_table(report: MetricsReport) -> str:
    """Fixed-width summary table (columns OV, BO, F@.75, FO, ACCO)."""

    def fmt(x, scale=100.0):
        return "   -  " if x is None else f"{scale * x:6.2f}"

    def fmt_f(t):
        return "   -  " if t is None else f"{100.0 * t[2]:6.2f}"

    lines = [
        "              OV      BO    F@.75",
        f"Amodal    {fmt_f(report.amodal_overlap_prf)}  {fmt_f(report.amodal_boundary_prf)}  {fmt(report.f_at_75, 1.0)}",
        f"Invisible {fmt_f(report.invisible_overlap_prf)}  {fmt_f(report.invisible_boundary_prf)}     -  ",
        "",
        f"mIoU full {fmt(report.miou_full)}   mIoU occ {fmt(report.miou_occ)}",
        f"Occlusion FO {fmt(report.occlusion.f_o)}   ACCO {fmt(report.occlusion.acc_o)}"
        f"   (a={report.occlusion.alpha} b={report.occlusion.beta}"
        f" g={report.occlusion.gamma} d={report.occlusion.delta})",
        f"matched {report.n_matched}/{report.n_gts} gt instances, {report.n_preds} predictions",
    ]
    return "\n".join(lines)
