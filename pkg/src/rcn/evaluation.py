"""Detection and tracking evaluation pipelines shared by the CLI and tests."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from . import autograd as ag
from .autograd import Tensor
from .kalman import NoiseConfig, smooth_trajectory
from .metrics import (
    SIZE_STRATA,
    FrameResult,
    detection_summary,
    ope_success_curve,
)
from .synthetic import propose_candidates
from .tracking import (
    BoundingBox,
    SearchWindowPolicy,
    correlation_map_for,
    crop,
    expand_window,
    localize,
    template_window,
)


@dataclass
class Detection:
    clip_id: str
    candidate_id: int
    box: BoundingBox
    score: float
    per_step: List[float]
    trajectory: List[BoundingBox]

    def to_json(self):
        return {
            "clip_id": self.clip_id,
            "candidate_id": self.candidate_id,
            "box": self.box.to_list(),
            "score": self.score,
            "per_step": list(self.per_step),
            "trajectory": [b.to_list() for b in self.trajectory],
        }


def detect_dataset(model, clips, mode="full", l=None, noise_sigma=0.01, proposals=None):
    """Propose on frames 0/1 and score every candidate; returns a list of Detection."""
    out = []
    for i, clip in enumerate(clips):
        props = proposals[i] if proposals is not None else propose_candidates(clip, noise_sigma=noise_sigma)
        if not props:
            continue
        for k, (box, (rec, traj)) in enumerate(zip(props, model.detect(clip.frames, props, mode=mode, l=l))):
            out.append(Detection(clip.clip_id, k, box, rec.average, [float(v) for v in rec.per_step], traj))
    return out


def frame_results(detections: Sequence[Detection], clips, annotations) -> List[FrameResult]:
    by_clip: Dict[str, list] = {c.clip_id: [] for c in clips}
    for d in detections:
        by_clip[d.clip_id].append((d.box, d.score))
    return [FrameResult(by_clip[c.clip_id], [r.box for r in a.at_frame(0, "positive")])
            for c, a in zip(clips, annotations)]


def evaluate_detection(model, clips, annotations, mode="full", l=None, strata=SIZE_STRATA, proposals=None):
    """Returns (detections, summary dict of MR per stratum)."""
    dets = detect_dataset(model, clips, mode=mode, l=l, proposals=proposals)
    return dets, detection_summary(frame_results(dets, clips, annotations), strata=strata)


# ---------------------------------------------------------------------------
# tracking


@dataclass
class PixelCorrTracker:
    """Template matching on raw pixels with the learned tracker's crop geometry."""

    template_size: tuple = (16, 16)
    window_size: tuple = (48, 48)
    alpha: float = 1.0
    zero_mean: bool = False

    def _prep(self, x):
        if self.zero_mean:
            x = x - x.mean(axis=(1, 2), keepdims=True)
        return x

    def track(self, frames, box0: BoundingBox) -> List[BoundingBox]:
        policy = SearchWindowPolicy(self.alpha)
        tw, th = self.template_size
        sw, sh = self.window_size
        tmpl = self._prep(crop(frames[0], template_window(box0, policy, self.template_size, self.window_size), tw, th))
        box, traj = box0, [box0]
        for t in range(1, len(frames)):
            win = expand_window(box, policy)
            patch = self._prep(crop(frames[t], win, sw, sh))
            resp = ag.cross_correlate(Tensor(patch[None]), Tensor(tmpl[None])).data[0]
            box = localize(correlation_map_for(resp, box, win, 1, self.window_size), box)
            traj.append(box)
        return traj


@dataclass
class TrackingReport:
    auc: float
    curve: list
    per_track_auc: List[float] = field(default_factory=list)
    trajectories: List[dict] = field(default_factory=list)


def gt_tracks(annotations, label: Optional[str] = "positive"):
    for ci, ann in enumerate(annotations):
        for tid in ann.track_ids(label):
            yield ci, tid, ann.track(tid)


def evaluate_tracking(tracker_fn, clips, annotations, kalman=False, noise: NoiseConfig = NoiseConfig(),
                      label: Optional[str] = "positive") -> TrackingReport:
    """One-pass evaluation from the ground-truth first box; curve and AUC pooled over all frames.

    ``tracker_fn(frames, box0)`` returns a trajectory the length of the clip.
    """
    preds, gts, per_track, records = [], [], [], []
    for ci, tid, gt in gt_tracks(annotations, label):
        pred = tracker_fn(clips[ci].frames[:len(gt)], gt[0])
        if kalman:
            pred = smooth_trajectory(pred, noise)
        _, auc = ope_success_curve(pred, gt)
        per_track.append(auc)
        preds.extend(pred)
        gts.extend(gt)
        records.append({"clip_id": clips[ci].clip_id, "track_id": tid, "boxes": [b.to_list() for b in pred]})
    if not gts:
        return TrackingReport(float("nan"), [], [], [])
    curve, auc = ope_success_curve(preds, gts)
    return TrackingReport(auc, curve, per_track, records)


def model_tracker(model, mode="full"):
    return lambda frames, box0: model.track(frames, box0, mode=mode)

