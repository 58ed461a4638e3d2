"""Two-phase training.

Phase 1 trains the backbone with a throw-away single-frame scoring head.
Phase 2 freezes the backbone, tracks every candidate with a plain
backbone-plus-correlation tracker, stores the search windows along those
tracks, and trains the recurrent cell and scoring head on the stored windows
(teacher forcing). Because the backbone is frozen its features are computed
once per sample and reused across iterations.
"""

import csv
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, Tensor, backward, no_grad, sgd_step
from .autograd.params import read_checkpoint
from .errors import InvalidArgument, TrainingError
from .metrics import iou
from .model import MODES, RCNModel, add_fc, save_checkpoint
from .synthetic import AnnotationSet, VideoClip, propose_candidates
from .tracking import BoundingBox, correlation_map_for, expand_window, localize

POSITIVE_IOU = 0.5


@dataclass
class TrainConfig:
    iterations: int = 4000
    batch_size: int = 5
    base_lr: float = 0.01
    lr_decay: float = 0.1
    decay_interval: int = 1000
    momentum: float = 0.9
    phase: int = 2
    snippet_len: int = 5
    mode: str = "full"
    seed: int = 0
    balanced: bool = True
    include_gt: bool = True
    phase1_hidden: int = 64
    phase1_target: str = "objectness"  # or "label": the positive/negative motion labels
    log_every: int = 1

    def validate(self):
        if self.iterations < 0 or self.batch_size < 1 or self.decay_interval < 1:
            raise InvalidArgument("iterations, batch size, and decay interval must be positive")
        if not self.base_lr > 0 or not 0 < self.lr_decay <= 1 or not 0 <= self.momentum < 1:
            raise InvalidArgument("invalid learning-rate or momentum settings")
        if self.phase not in (1, 2):
            raise InvalidArgument(f"phase must be 1 or 2, got {self.phase}")
        if self.mode not in MODES:
            raise InvalidArgument(f"unknown mode {self.mode!r}")
        if self.phase1_target not in ("objectness", "label"):
            raise InvalidArgument(f"unknown phase-1 target {self.phase1_target!r}")
        if self.snippet_len < 2:
            raise InvalidArgument("snippet length must be at least 2")
        return self

    def lr_at(self, iteration: int) -> float:
        return self.base_lr * self.lr_decay ** (iteration // self.decay_interval)


@dataclass
class Candidate:
    clip_index: int
    box: BoundingBox
    label: int


@dataclass
class TrainingSample:
    """Template crop plus search-window crops along a stored trajectory."""

    template: np.ndarray  # [3, th, tw]
    windows: np.ndarray  # [steps, 3, sh, sw]
    label: int
    trajectory: List[BoundingBox] = field(default_factory=list)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InvalidArgument(f"label must be 0 or 1, got {self.label}")


@dataclass
class TrainResult:
    losses: List[float]
    val_loss_start: float = float("nan")
    val_loss_end: float = float("nan")
    checkpoint: Optional[str] = None


Dataset = Sequence[Tuple[VideoClip, AnnotationSet]]


# ---------------------------------------------------------------------------
# candidates and labels


def label_for(box: BoundingBox, ann: AnnotationSet, frame: int = 0) -> int:
    return int(any(iou(box, r.box) >= POSITIVE_IOU for r in ann.at_frame(frame, "positive")))


def build_candidates(dataset: Dataset, include_gt=True, noise_sigma=0.01) -> List[Candidate]:
    """Frame-1 proposals of every clip (plus ground-truth boxes when asked), labelled by IoU."""
    out = []
    for ci, (clip, ann) in enumerate(dataset):
        boxes = propose_candidates(clip, noise_sigma=noise_sigma)
        if include_gt:
            boxes = boxes + [r.box for r in ann.at_frame(0)]
        out += [Candidate(ci, b, label_for(b, ann)) for b in boxes]
    return out


def objectness_candidates(dataset: Dataset, noise_sigma=0.01, seed=0) -> List[Candidate]:
    """Frame-1 crops labelled by whether they are centred on any object, whatever its class.

    A single frame carries no positive/negative information, so the phase-1
    head scores objectness instead: proposals and ground-truth boxes, plus for
    every object one box pushed off it by at least its own width and one box
    of the same size on empty background.
    """
    out = []
    for ci, (clip, ann) in enumerate(dataset):
        rng = np.random.default_rng([int(seed), ci])
        objs = [r.box for r in ann.at_frame(0)]
        boxes = propose_candidates(clip, noise_sigma=noise_sigma) + objs
        for b in objs:
            ang = rng.uniform(0, 2 * np.pi)
            d = b.w * rng.uniform(1.0, 1.5)
            boxes.append(b.translated(d * np.cos(ang), d * np.sin(ang)))
            w, h = clip.size
            for _ in range(50):
                bg = BoundingBox(rng.uniform(0, w - b.w), rng.uniform(0, h - b.h), b.w, b.h)
                if all(iou(bg, o) == 0 for o in objs):
                    boxes.append(bg)
                    break
        out += [Candidate(ci, b, int(any(iou(b, o) >= POSITIVE_IOU for o in objs))) for b in boxes]
    return out


def sample_batch(labels: np.ndarray, batch_size: int, rng, balanced=True) -> np.ndarray:
    if balanced:
        pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
        if pos.size and neg.size:
            take_pos = rng.random(batch_size) < 0.5
            return np.where(take_pos, rng.choice(pos, batch_size), rng.choice(neg, batch_size))
    return rng.choice(labels.size, batch_size)


def iteration_rng(seed, iteration):
    """Independent stream per iteration so a resumed run replays the same batches."""
    return np.random.default_rng([int(seed), int(iteration)])


# ---------------------------------------------------------------------------
# plain correlation tracker used for teacher trajectories


def precompute_trajectories(model: RCNModel, dataset: Dataset, candidates: Sequence[Candidate], l: int,
                            batch: int = 64) -> List[List[BoundingBox]]:
    """Track each candidate for l-1 steps with backbone features and correlation only."""
    by_clip: Dict[int, List[int]] = {}
    for i, c in enumerate(candidates):
        by_clip.setdefault(c.clip_index, []).append(i)
    result: Dict[int, List[BoundingBox]] = {}
    stride = model.config.total_stride
    for ci, idxs in by_clip.items():
        frames = dataset[ci][0].frames
        if l > len(frames):
            raise InvalidArgument(f"snippet length {l} exceeds clip length {len(frames)}")
        boxes0 = [candidates[i].box for i in idxs]
        with no_grad():
            tf = model.backbone(Tensor(model.crop_templates(frames[0], boxes0)))
        boxes = list(boxes0)
        paths = [[b] for b in boxes0]
        for t in range(1, l):
            windows = [expand_window(b, model.policy) for b in boxes]
            with no_grad():
                wf = model.backbone(Tensor(model.crop_windows(frames[t], windows)))
                resp = ag.cross_correlate(wf, tf).data
            for k in range(len(boxes)):
                cmap = correlation_map_for(resp[k], boxes[k], windows[k], stride, model.config.window_size)
                boxes[k] = localize(cmap, boxes[k])
                paths[k].append(boxes[k])
        for k, i in enumerate(idxs):
            result[i] = paths[k]
    return [result[i] for i in range(len(candidates))]


def window_plan(mode: str, box0: BoundingBox, traj: Sequence[BoundingBox], l: int, policy):
    """(frame index, window) pairs the given submodel observes during training."""
    if mode == "single-frame":
        return [(0, expand_window(box0, policy))]
    if mode == "no-track":
        return [(t, expand_window(box0, policy)) for t in range(1, l)]
    return [(t, expand_window(traj[t - 1], policy)) for t in range(1, l)]


def build_samples(model: RCNModel, dataset: Dataset, candidates: Sequence[Candidate],
                  trajectories, mode: str, l: int) -> List[TrainingSample]:
    samples = []
    sw, sh = model.config.window_size
    for c, traj in zip(candidates, trajectories):
        frames = dataset[c.clip_index][0].frames
        plan = window_plan(mode, c.box, traj, l, model.policy)
        template = model.crop_templates(frames[0], [c.box])[0]
        wins = np.stack([model.crop_windows(frames[t], [w])[0] for t, w in plan])
        samples.append(TrainingSample(template, wins, c.label, list(traj)))
    return samples


def encode_samples(model: RCNModel, samples: Sequence[TrainingSample], chunk=64):
    """Frozen-backbone features: (template feats [N,...], window feats [N, steps, ...])."""
    tfs, wfs = [], []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        with no_grad():
            tfs.append(model.backbone(Tensor(np.stack([s.template for s in part]))).data)
            wins = np.stack([s.windows for s in part])
            n, steps = wins.shape[:2]
            wf = model.backbone(Tensor(wins.reshape((n * steps,) + wins.shape[2:]))).data
            wfs.append(wf.reshape((n, steps) + wf.shape[1:]))
    if not tfs:
        raise InvalidArgument("no training samples")
    return np.concatenate(tfs), np.concatenate(wfs)


# ---------------------------------------------------------------------------
# shared loop


class _Logger:
    def __init__(self, path):
        self.path = path
        self.fh = None
        if path:
            exists = os.path.exists(path)
            self.fh = open(path, "a", newline="")
            self.writer = csv.writer(self.fh)
            if not exists or os.path.getsize(path) == 0:
                self.writer.writerow(["iteration", "lr", "loss", "wall_time"])

    def log(self, it, lr, loss, wall):
        if self.fh:
            self.writer.writerow([it, repr(lr), repr(loss), f"{wall:.3f}"])

    def close(self):
        if self.fh:
            self.fh.close()


def _run_loop(cfg: TrainConfig, params: ParamStore, loss_fn, labels: np.ndarray, out_dir: Optional[str],
              save_fn, start_iter=0, log_name="train_log.csv"):
    logger = _Logger(os.path.join(out_dir, log_name) if out_dir else None)
    losses = []
    t0 = time.perf_counter()
    try:
        for it in range(start_iter, cfg.iterations):
            rng = iteration_rng(cfg.seed, it)
            idx = sample_batch(labels, cfg.batch_size, rng, cfg.balanced)
            loss = loss_fn(idx)
            value = float(loss.data)
            lr = cfg.lr_at(it)
            if not math.isfinite(value):
                dump = None
                if out_dir:
                    dump = os.path.join(out_dir, f"nan_dump_iter{it}.ckpt")
                    save_fn(dump, it, params)
                raise TrainingError(f"non-finite loss {value} at iteration {it}", iteration=it, dump_path=dump)
            backward(loss)
            sgd_step(params, lr, cfg.momentum)
            losses.append(value)
            if it % cfg.log_every == 0:
                logger.log(it, lr, value, time.perf_counter() - t0)
            if out_dir and (it + 1) % cfg.decay_interval == 0 and it + 1 < cfg.iterations:
                save_fn(os.path.join(out_dir, f"phase{cfg.phase}_iter{it + 1}.ckpt"), it + 1, params)
    finally:
        logger.close()
    return losses


def _velocity_extras(params: ParamStore):
    return {f"velocity/{k}": v for k, v in sorted(params.velocity.items())}


def _restore_velocity(params: ParamStore, extras):
    for k, v in extras.items():
        if k.startswith("velocity/"):
            params.velocity[k[len("velocity/"):]] = np.array(v)


# ---------------------------------------------------------------------------
# phase 1


class SingleFrameHead:
    """Temporary scoring head on flattened backbone features of the template crop."""

    prefix = "phase1"

    def __init__(self, model: RCNModel, hidden: int, rng=None, params: Optional[ParamStore] = None):
        self.model = model
        tw, th = model.config.feature_size(model.config.template_size)
        d_in = model.config.feat_ch * tw * th
        if params is None:
            params = ParamStore()
            rng = rng or np.random.default_rng(0)
            add_fc(params, f"{self.prefix}/fc1", d_in, hidden, rng)
            add_fc(params, f"{self.prefix}/fc2", hidden, 1, rng)
        self.params = params

    def __call__(self, feats: Tensor) -> Tensor:
        n = feats.shape[0]
        z = ag.reshape(feats, (n, -1))
        z = ag.relu(ag.fully_connected(z, self.params[f"{self.prefix}/fc1/w"], self.params[f"{self.prefix}/fc1/b"]))
        return ag.reshape(ag.fully_connected(z, self.params[f"{self.prefix}/fc2/w"],
                                             self.params[f"{self.prefix}/fc2/b"]), (n,))


def _phase1_store(model: RCNModel, head: SingleFrameHead) -> ParamStore:
    store = ParamStore()
    for name, t in model.params.items():
        if name.startswith("backbone/"):
            store._params[name] = t
    for name, t in head.params.items():
        store._params[name] = t
    return store


def _phase1_loss(model, head, crops, labels):
    feats = model.backbone(Tensor(crops))
    return ag.sigmoid_cross_entropy(head(feats), Tensor(labels.astype(np.float64)))


def phase1_crops(model: RCNModel, dataset: Dataset, candidates: Sequence[Candidate]):
    return np.stack([model.crop_templates(dataset[c.clip_index][0].frames[0], [c.box])[0] for c in candidates])


def evaluate_phase1_loss(model, head, crops, labels, chunk=128):
    total = 0.0
    with no_grad():
        for i in range(0, len(labels), chunk):
            total += float(_phase1_loss(model, head, crops[i:i + chunk], labels[i:i + chunk]).data) * len(labels[i:i + chunk])
    return total / max(len(labels), 1)


def _phase1_candidates(cfg: TrainConfig, dataset: Dataset, seed, include_gt):
    if cfg.phase1_target == "label":
        return build_candidates(dataset, include_gt)
    return objectness_candidates(dataset, seed=seed)


def train_phase1(model: RCNModel, cfg: TrainConfig, dataset: Dataset, out_dir: Optional[str] = None,
                 val_dataset: Optional[Dataset] = None, candidates=None, resume: Optional[str] = None):
    """Trains backbone + single-frame head in place. Returns (TrainResult, head)."""
    cfg.validate()
    if candidates is None:
        candidates = _phase1_candidates(cfg, dataset, cfg.seed, cfg.include_gt)
    labels = np.array([c.label for c in candidates])
    crops = phase1_crops(model, dataset, candidates)
    head = SingleFrameHead(model, cfg.phase1_hidden, np.random.default_rng([cfg.seed, 1]))
    store = _phase1_store(model, head)
    start = 0
    if resume:
        start = _resume_into(store, resume)
    val = None
    if val_dataset is not None:
        vc = _phase1_candidates(cfg, val_dataset, cfg.seed + 1, False)
        if vc:
            val = (phase1_crops(model, val_dataset, vc), np.array([c.label for c in vc]))
    v0 = evaluate_phase1_loss(model, head, *val) if val else float("nan")

    def save_fn(path, it, params):
        save_checkpoint(model, path, meta={"phase": 1, "iteration": it, "train": asdict(cfg)},
                        extra={**{n: t.data for n, t in head.params.items()}, **_velocity_extras(params)})

    losses = _run_loop(cfg, store, lambda idx: _phase1_loss(model, head, crops[idx], labels[idx]),
                       labels, out_dir, save_fn, start, log_name="phase1_log.csv")
    v1 = evaluate_phase1_loss(model, head, *val) if val else float("nan")
    ckpt = None
    if out_dir:
        ckpt = os.path.join(out_dir, "phase1.ckpt")
        save_fn(ckpt, cfg.iterations, store)
    return TrainResult(losses, v0, v1, ckpt), head


def _resume_into(store: ParamStore, path) -> int:
    header, arrays = read_checkpoint(path)
    store.load_arrays({k: v for k, v in arrays.items() if k in store})
    _restore_velocity(store, {k: v for k, v in arrays.items() if k.startswith("velocity/")})
    return int(header["meta"].get("iteration", 0))


# ---------------------------------------------------------------------------
# phase 2


def _phase2_store(model: RCNModel, used=None) -> ParamStore:
    store = ParamStore()
    for name, t in model.params.items():
        if not name.startswith("backbone/") and (used is None or name in used):
            store._params[name] = t
    return store


def used_parameters(model: RCNModel, tf, wf, labels, mode) -> set:
    """Names of parameters the submodel's loss actually depends on.

    The ablated submodels skip parts of the cell (no-lstm never touches the
    recurrent kernels), and those stay untouched instead of tripping the
    optimizer's missing-gradient check.
    """
    model.params.zero_grad()
    backward(phase2_loss(model, tf[:1], wf[:1], labels[:1], mode))
    used = {n for n, t in model.params.items() if t.grad is not None}
    model.params.zero_grad()
    return used


def phase2_loss(model: RCNModel, tf: np.ndarray, wf: np.ndarray, labels: np.ndarray, mode: str):
    """Sigmoid cross-entropy of the step-averaged logit, from cached backbone features."""
    steps = [Tensor(wf[:, s]) for s in range(wf.shape[1])]
    per_step = model.snippet_logits(Tensor(tf), steps, mode=mode)
    avg = ag.mean(per_step, axis=1)
    return ag.sigmoid_cross_entropy(avg, Tensor(labels.astype(np.float64)))


def prepare_phase2(model: RCNModel, dataset: Dataset, cfg: TrainConfig, candidates=None, trajectories=None):
    if candidates is None:
        candidates = build_candidates(dataset, cfg.include_gt)
    if trajectories is None:
        trajectories = precompute_trajectories(model, dataset, candidates, cfg.snippet_len)
    samples = build_samples(model, dataset, candidates, trajectories, cfg.mode, cfg.snippet_len)
    return candidates, trajectories, samples


def train_phase2(model: RCNModel, cfg: TrainConfig, dataset: Dataset, out_dir: Optional[str] = None,
                 candidates=None, trajectories=None, samples=None, resume: Optional[str] = None,
                 features=None):
    """Trains cell + head in place with the backbone frozen."""
    cfg.validate()
    if samples is None:
        candidates, trajectories, samples = prepare_phase2(model, dataset, cfg, candidates, trajectories)
    labels = np.array([s.label for s in samples])
    tf, wf = features if features is not None else encode_samples(model, samples)
    model.params.freeze("backbone/")
    store = _phase2_store(model, used_parameters(model, tf, wf, labels, cfg.mode))
    start = _resume_into(store, resume) if resume else 0

    def save_fn(path, it, params):
        save_checkpoint(model, path, meta={"phase": 2, "iteration": it, "train": asdict(cfg)},
                        extra=_velocity_extras(params))

    losses = _run_loop(cfg, store, lambda idx: phase2_loss(model, tf[idx], wf[idx], labels[idx], cfg.mode),
                       labels, out_dir, save_fn, start, log_name="phase2_log.csv")
    ckpt = None
    if out_dir:
        ckpt = os.path.join(out_dir, "phase2.ckpt")
        save_fn(ckpt, cfg.iterations, store)
    return TrainResult(losses, checkpoint=ckpt)
