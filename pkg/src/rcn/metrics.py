"""Detection (FPPI / log-average miss rate) and tracking (OPE success) metrics."""

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidArgument
from .tracking import BoundingBox

# Caltech convention; the only place the sampling grid is defined.
MR_FPPI_POINTS = np.logspace(-2.0, 0.0, 9)
OPE_THRESHOLDS = np.round(np.arange(21) * 0.05, 10)

# Longer-side ranges (px) for the size-stratified detection numbers.
SIZE_STRATA = {
    "all": (0.0, math.inf),
    "small": (0.0, 11.0),
    "mid": (11.0, 13.0),
    "large": (13.0, math.inf),
}


@dataclass(frozen=True)
class CurvePoint:
    x: float
    y: float
    threshold: float = float("nan")


@dataclass
class FrameResult:
    """Scored detections and ground truth for one evaluated frame."""

    detections: List[Tuple[BoundingBox, float]]
    gts: List[BoundingBox]
    ignore: Optional[List[bool]] = None


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (a.area + b.area - inter))


def match_detections(dets: Sequence[Tuple[BoundingBox, float]], gts: Sequence[BoundingBox],
                     iou_thr: float = 0.5, ignore: Optional[Sequence[bool]] = None):
    """Greedy matching in descending score order.

    Each detection takes the still-unmatched ground truth with the highest IoU
    at or above ``iou_thr``; non-ignored ground truth is preferred over ignored.
    Detections matched to an ignored box count as neither TP nor FP.

    Returns ``(tp, fp, fn)``: tp is a list of (det index, gt index), fp a list of
    det indices, fn a list of unmatched non-ignored gt indices.
    """
    if not 0 < iou_thr < 1:
        raise InvalidArgument(f"iou threshold must be in (0, 1), got {iou_thr}")
    ignore = [False] * len(gts) if ignore is None else list(ignore)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    taken = [False] * len(gts)
    tp, fp = [], []
    for di in order:
        box = dets[di][0]
        best, best_iou, best_ign = -1, iou_thr, True
        for gi, g in enumerate(gts):
            if taken[gi]:
                continue
            o = iou(box, g)
            if o < iou_thr:
                continue
            # a real gt always beats an ignored one; among equals take higher IoU
            if best == -1 or (best_ign and not ignore[gi]) or (best_ign == ignore[gi] and o > best_iou):
                best, best_iou, best_ign = gi, o, ignore[gi]
        if best == -1:
            fp.append(di)
        else:
            taken[best] = True
            if not ignore[best]:
                tp.append((di, best))
    fn = [gi for gi in range(len(gts)) if not taken[gi] and not ignore[gi]]
    return tp, fp, fn


def fppi_mr_curve(frames: Sequence[FrameResult], iou_thr: float = 0.5) -> List[CurvePoint]:
    """Miss rate against FPPI, one point per distinct score plus the empty start.

    A detection's TP/FP status does not depend on lower-scored detections under
    greedy matching, so frames are matched once and the score is swept after.
    """
    if not frames:
        raise InvalidArgument("need at least one frame")
    scored = []  # (score, is_tp)
    n_gt = 0
    for fr in frames:
        tp, fp, fn = match_detections(fr.detections, fr.gts, iou_thr, fr.ignore)
        n_gt += len(tp) + len(fn)
        scored += [(fr.detections[d][1], True) for d, _ in tp]
        scored += [(fr.detections[d][1], False) for d in fp]
    if n_gt == 0:
        raise InvalidArgument("no ground truth in the evaluated frames")
    for s, _ in scored:
        if not math.isfinite(s):
            raise InvalidArgument("detection scores must be finite")
    n_frames = len(frames)
    scored.sort(key=lambda p: -p[0])
    curve = [CurvePoint(0.0, 1.0, math.inf)]
    n_tp = n_fp = 0
    i = 0
    while i < len(scored):
        s = scored[i][0]
        while i < len(scored) and scored[i][0] == s:
            n_tp += scored[i][1]
            n_fp += not scored[i][1]
            i += 1
        curve.append(CurvePoint(n_fp / n_frames, 1.0 - n_tp / n_gt, s))
    return curve


def log_average_mr(curve: Sequence[CurvePoint], points=MR_FPPI_POINTS) -> float:
    """Arithmetic mean of the staircase's miss rate at the reference FPPI points.

    At each reference the last curve point with FPPI <= ref is used; references
    below the curve's first FPPI take the first miss rate.
    """
    if not curve:
        raise InvalidArgument("empty curve")
    xs = np.array([p.x for p in curve])
    ys = np.array([p.y for p in curve])
    vals = []
    for ref in points:
        idx = np.nonzero(xs <= ref + 1e-12)[0]
        vals.append(ys[idx[-1]] if idx.size else ys[0])
    return float(np.clip(np.mean(vals), 0.0, 1.0))


def stratify(frames: Sequence[FrameResult], lo: float, hi: float) -> List[FrameResult]:
    """Mark ground truth outside [lo, hi) longer side as ignored."""
    out = []
    for fr in frames:
        base = fr.ignore or [False] * len(fr.gts)
        ign = [b or not (lo <= max(g.w, g.h) < hi) for g, b in zip(fr.gts, base)]
        out.append(FrameResult(fr.detections, fr.gts, ign))
    return out


def detection_summary(frames: Sequence[FrameResult], iou_thr=0.5, strata=SIZE_STRATA):
    """MR per size stratum; strata without ground truth report None."""
    res = {}
    for name, (lo, hi) in strata.items():
        try:
            res[name] = log_average_mr(fppi_mr_curve(stratify(frames, lo, hi), iou_thr))
        except InvalidArgument:
            res[name] = None
    return res


def ope_success_curve(pred: Sequence[BoundingBox], gt: Sequence[BoundingBox], thresholds=OPE_THRESHOLDS):
    """Returns (curve, auc); success(t) is the fraction of frames with IoU > t."""
    if len(pred) != len(gt):
        raise InvalidArgument(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    if not len(gt):
        raise InvalidArgument("empty trajectory")
    overlaps = np.array([iou(p, g) for p, g in zip(pred, gt)])
    return success_from_overlaps(overlaps, thresholds)


def success_from_overlaps(overlaps, thresholds=OPE_THRESHOLDS):
    overlaps = np.asarray(overlaps, dtype=np.float64)
    curve = [CurvePoint(float(t), float(np.mean(overlaps > t)), float(t)) for t in thresholds]
    return curve, float(np.mean([p.y for p in curve]))


def center_rmse(pred: Sequence[BoundingBox], gt: Sequence[BoundingBox]) -> float:
    d = [np.subtract(p.center, g.center) for p, g in zip(pred, gt)]
    return float(np.sqrt(np.mean(np.sum(np.square(d), axis=1))))


# ---------------------------------------------------------------------------
# output


def write_curve_csv(path, curve: Sequence[CurvePoint], x_name="x", y_name="y"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", x_name, y_name])
        for p in curve:
            w.writerow([repr(p.threshold), repr(p.x), repr(p.y)])


def write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"]


def write_svg(path, curves: Dict[str, Sequence[CurvePoint]], log_x=False, title="",
              x_label="x", y_label="y", x_range=None):
    """Minimal dependency-free line plot."""
    W, H, M = 480, 360, 50
    pts = [p for c in curves.values() for p in c]
    if x_range is None:
        xs = [p.x for p in pts if not log_x or p.x > 0] or [1.0]
        x_range = (min(xs), max(xs))
    x0, x1 = (math.log10(v) for v in x_range) if log_x else x_range
    if x1 <= x0:
        x1 = x0 + 1.0

    def px(x):
        if log_x:
            x = math.log10(min(max(x, x_range[0]), x_range[1]))
        return M + (x - x0) / (x1 - x0) * (W - 2 * M)

    def py(y):
        return H - M - y * (H - 2 * M)

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<line x1="{M}" y1="{H - M}" x2="{W - M}" y2="{H - M}" stroke="black"/>',
             f'<line x1="{M}" y1="{M}" x2="{M}" y2="{H - M}" stroke="black"/>',
             f'<text x="{W / 2}" y="{M / 2}" text-anchor="middle" font-size="14">{title}</text>',
             f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="12">{x_label}</text>',
             f'<text x="15" y="{H / 2}" font-size="12" transform="rotate(-90 15 {H / 2})">{y_label}</text>']
    for i, (name, curve) in enumerate(sorted(curves.items())):
        colour = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{px(p.x):.2f},{py(p.y):.2f}" for p in curve if not (log_x and p.x <= 0))
        lines.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{coords}"/>')
        lines.append(f'<text x="{W - M + 5}" y="{M + 15 * i}" font-size="11" fill="{colour}">{name}</text>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
