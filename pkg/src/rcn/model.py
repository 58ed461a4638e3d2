"""Network assembly and the joint detection-and-tracking inference loop.

Data flow for one step of one candidate:

    window = expand(box)                      -> crop -> backbone  (A)
    h, c   = recurrent cell(features, h, c)                        (B)
    box    = localize(xcorr(h, template_feat))                     (C)
    logit  = fc2(relu(fc1([template_feat, h])))                    (D)

``mode`` selects the ablation submodels, all of which reuse the same
parameter tensors:

* ``full``          A+B+C+D
* ``no-track``      A+B+D, search window stays at the initial location
* ``no-lstm``       A+C+D, severed-recurrence encoding per step, logits averaged
* ``single-frame``  A+D, one scoring pass on the first frame
"""

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, Tensor, no_grad
from .autograd.params import (
    extras_from_checkpoint,
    params_from_checkpoint,
    read_checkpoint,
    write_checkpoint,
)
from .cells import ConvGRUCell, ConvLSTMCell, ConvLSTMState, glorot_kernel
from .errors import FormatError, InvalidArgument, InvalidState
from .tracking import (
    BoundingBox,
    SearchWindowPolicy,
    Trajectory,
    correlation_map_for,
    crop_many,
    expand_window,
    localize,
    template_window,
)

MODES = ("full", "no-track", "no-lstm", "single-frame")
TRACKING_MODES = ("full", "no-lstm")
MODEL_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    out_ch: int
    kernel: int = 3
    stride: int = 1
    pool: int = 2


@dataclass
class RCNConfig:
    backbone: Tuple[LayerSpec, ...] = (LayerSpec(8), LayerSpec(16))
    in_ch: int = 3
    hidden_ch: int = 32
    k: int = 3
    fc_hidden: int = 128
    template_size: Tuple[int, int] = (16, 16)  # (w, h)
    window_size: Tuple[int, int] = (48, 48)
    snippet_len: int = 5
    cell: str = "convlstm"
    alpha: float = 1.0
    head_pool: str = "flatten"
    input_norm: str = "crop-mean"
    input_scale: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.backbone = tuple(l if isinstance(l, LayerSpec) else LayerSpec(**l) if isinstance(l, dict)
                              else LayerSpec(*l) for l in self.backbone)
        self.template_size = tuple(int(v) for v in self.template_size)
        self.window_size = tuple(int(v) for v in self.window_size)

    @property
    def total_stride(self):
        s = 1
        for layer in self.backbone:
            s *= layer.stride * max(layer.pool, 1)
        return s

    @property
    def feat_ch(self):
        return self.backbone[-1].out_ch if self.backbone else self.in_ch

    def feature_size(self, size):
        """Backbone output (w, h) for an input of (w, h); raises if any layer is not exact."""
        w, h = size
        for i, layer in enumerate(self.backbone):
            pad = (layer.kernel - 1) // 2
            for n in (w, h):
                if (n + 2 * pad - layer.kernel) % layer.stride:
                    raise InvalidArgument(f"layer {i}: extent {n} not divisible by stride {layer.stride}")
            w = (w + 2 * pad - layer.kernel) // layer.stride + 1
            h = (h + 2 * pad - layer.kernel) // layer.stride + 1
            if layer.pool > 1:
                if w % layer.pool or h % layer.pool:
                    raise InvalidArgument(f"layer {i}: extent {w}x{h} not divisible by pool {layer.pool}")
                w, h = w // layer.pool, h // layer.pool
        return w, h

    def validate(self):
        if self.cell not in ("convlstm", "convgru"):
            raise InvalidArgument(f"unknown cell kind {self.cell!r}")
        if self.input_norm not in ("crop-mean", "none"):
            raise InvalidArgument(f"unknown input_norm {self.input_norm!r}")
        if not self.input_scale > 0:
            raise InvalidArgument("input_scale must be positive")
        if self.head_pool not in ("flatten", "mean"):
            raise InvalidArgument(f"unknown head_pool {self.head_pool!r}")
        if self.k < 1 or self.k % 2 == 0:
            raise InvalidArgument(f"recurrent kernel must be odd, got {self.k}")
        if self.snippet_len < 2:
            raise InvalidArgument("snippet_len must be at least 2")
        if not self.alpha > 0:
            raise InvalidArgument("alpha must be positive")
        tw, th = self.template_size
        sw, sh = self.window_size
        if not (sw > tw and sh > th):
            raise InvalidArgument(f"window {self.window_size} must exceed template {self.template_size}")
        s = self.total_stride
        for n in (tw, th, sw, sh):
            if n % s:
                raise InvalidArgument(f"total stride {s} does not divide {n}")
        self.feature_size(self.template_size)
        self.feature_size(self.window_size)
        for v in (self.hidden_ch, self.fc_hidden, self.in_ch):
            if v < 1:
                raise InvalidArgument("channel counts must be positive")
        return self

    def head_input_dim(self):
        if self.head_pool == "mean":
            return 2 * self.hidden_ch
        tw, th = self.feature_size(self.template_size)
        sw, sh = self.feature_size(self.window_size)
        return self.hidden_ch * (tw * th + sw * sh)

    def to_dict(self):
        d = asdict(self)
        d["backbone"] = [asdict(l) for l in self.backbone]
        d["template_size"] = list(self.template_size)
        d["window_size"] = list(self.window_size)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrackerState:
    """Per-candidate state; the template encoding is fixed at initialization."""

    box: BoundingBox
    template_feat: Optional[np.ndarray]
    box0: BoundingBox
    h: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    steps: int = 0

    def __post_init__(self):
        if self.template_feat is not None:
            self.template_feat.setflags(write=False)


@dataclass
class ScoreRecord:
    per_step: List[float]
    average: float = field(init=False)

    def __post_init__(self):
        self.per_step = [float(v) for v in self.per_step]
        self.average = float(np.mean(self.per_step)) if self.per_step else float("nan")

    @property
    def confidence(self):
        return 1.0 / (1.0 + math.exp(-self.average)) if self.average >= 0 else (
            math.exp(self.average) / (1.0 + math.exp(self.average)))


class RCNModel:
    def __init__(self, config: RCNConfig, params: ParamStore):
        self.config = config.validate()
        self.params = params
        self.policy = SearchWindowPolicy(config.alpha)
        cell_cls = ConvLSTMCell if config.cell == "convlstm" else ConvGRUCell
        self.cell = cell_cls(params, config.cell, config.feat_ch, config.hidden_ch, config.k)

    # -- building blocks ---------------------------------------------------

    def normalize(self, x: Tensor) -> Tensor:
        """Per-crop, per-channel mean removal and a fixed contrast scale.

        A plain bright sky otherwise puts a large constant offset on every
        feature channel and the small object dominates nothing.
        """
        if self.config.input_norm == "none":
            return x
        n, c = x.shape[:2]
        mu = ag.reshape(ag.mean(x, (2, 3)), (n, c, 1, 1))
        return ag.scale(ag.sub(x, mu), 1.0 / self.config.input_scale)

    def backbone(self, x: Tensor) -> Tensor:
        x = self.normalize(x)
        for i, layer in enumerate(self.config.backbone):
            w, b = self.params[f"backbone/conv{i}/w"], self.params[f"backbone/conv{i}/b"]
            x = ag.relu(ag.conv2d(x, w, b, layer.stride, (layer.kernel - 1) // 2))
            if layer.pool > 1:
                x = ag.max_pool2d(x, layer.pool, layer.pool)
        return x

    def head(self, template_feat: Tensor, h: Tensor) -> Tensor:
        n = h.shape[0]
        if self.config.head_pool == "mean":
            parts = [ag.mean(template_feat, (2, 3)), ag.mean(h, (2, 3))]
        else:
            parts = [ag.reshape(template_feat, (n, -1)), ag.reshape(h, (n, -1))]
        z = ag.concat(parts, axis=1)
        z = ag.relu(ag.fully_connected(z, self.params["head/fc1/w"], self.params["head/fc1/b"]))
        out = ag.fully_connected(z, self.params["head/fc2/w"], self.params["head/fc2/b"])
        return ag.reshape(out, (n,))

    def recurrent(self, feats: Tensor, h, c, mode):
        """One update of the search stream. Returns (h_new, c_new)."""
        if mode in ("no-lstm", "single-frame"):
            return self.cell.encode(feats), None
        if self.config.cell == "convlstm":
            state = None if h is None else ConvLSTMState(h, c)
            h_new, st = self.cell.step(feats, state)
            return h_new, st.c
        return self.cell.step(feats, h), None

    def encode_template(self, template_pixels: Tensor) -> Tensor:
        return self.cell.encode(self.backbone(template_pixels))

    def _check_mode(self, mode):
        if mode not in MODES:
            raise InvalidArgument(f"unknown mode {mode!r}; expected one of {MODES}")

    # -- geometry ----------------------------------------------------------

    def search_window(self, state_box, box0, mode):
        return expand_window(box0 if mode == "no-track" else state_box, self.policy)

    def template_region(self, box):
        return template_window(box, self.policy, self.config.template_size, self.config.window_size)

    def crop_templates(self, frame, boxes):
        tw, th = self.config.template_size
        return crop_many(frame, [self.template_region(b) for b in boxes], tw, th)

    def crop_windows(self, frame, windows):
        sw, sh = self.config.window_size
        return crop_many(frame, windows, sw, sh)

    # -- inference (batched over candidates) --------------------------------

    def initialize(self, frame0, boxes: Sequence[BoundingBox]) -> List[TrackerState]:
        for b in boxes:
            if not isinstance(b, BoundingBox):
                raise InvalidArgument(f"expected BoundingBox, got {type(b).__name__}")
        if not boxes:
            return []
        with no_grad():
            tf = self.encode_template(Tensor(self.crop_templates(frame0, boxes))).data
        return [TrackerState(box=b, template_feat=np.array(tf[i]), box0=b) for i, b in enumerate(boxes)]

    def step_batch(self, states: Sequence[TrackerState], frame, mode="full"):
        """Advance every state by one frame. Returns (logits array, new states)."""
        self._check_mode(mode)
        for s in states:
            if not isinstance(s, TrackerState) or s.template_feat is None:
                raise InvalidState("candidate state was not initialized")
        windows = [self.search_window(s.box, s.box0, mode) for s in states]
        tf = np.stack([s.template_feat for s in states])
        h = c = None
        if states[0].h is not None and mode not in ("no-lstm", "single-frame"):
            h = Tensor(np.stack([s.h for s in states]))
            if states[0].c is not None:
                c = Tensor(np.stack([s.c for s in states]))
        with no_grad():
            feats = self.backbone(Tensor(self.crop_windows(frame, windows)))
            tft = Tensor(tf)
            h_new, c_new = self.recurrent(feats, h, c, mode)
            logits = self.head(tft, h_new).data
            resp = ag.cross_correlate(h_new, tft).data if mode in TRACKING_MODES else None
        out = []
        for i, s in enumerate(states):
            box = s.box
            if resp is not None:
                cmap = correlation_map_for(resp[i], s.box, windows[i], self.config.total_stride,
                                           self.config.window_size)
                box = localize(cmap, s.box)
            out.append(TrackerState(
                box=box, template_feat=s.template_feat, box0=s.box0,
                h=np.array(h_new.data[i]),
                c=None if c_new is None else np.array(c_new.data[i]),
                steps=s.steps + 1,
            ))
        return logits, out

    def detect(self, frames, candidates: Sequence[BoundingBox], mode="full", l=None):
        """Score candidates proposed on ``frames[0]`` over an ``l``-frame snippet."""
        self._check_mode(mode)
        l = self.config.snippet_len if l is None else int(l)
        if l < 1:
            raise InvalidArgument("snippet length must be positive")
        n_frames = len(frames)
        if n_frames < 2 and mode != "single-frame" and l > 1:
            raise InvalidArgument("detection needs at least two frames")
        if l > n_frames:
            raise InvalidArgument(f"snippet length {l} exceeds clip length {n_frames}")
        if not candidates:
            return []
        states = self.initialize(frames[0], candidates)
        traj = [[b] for b in candidates]
        logits = [[] for _ in candidates]
        if mode == "single-frame" or l == 1:
            lg, _ = self.step_batch(states, frames[0], mode="single-frame")
            for i in range(len(candidates)):
                logits[i].append(lg[i])
        else:
            for t in range(1, l):
                lg, states = self.step_batch(states, frames[t], mode=mode)
                for i, s in enumerate(states):
                    logits[i].append(lg[i])
                    traj[i].append(s.box)
        return [(ScoreRecord(lg), tr) for lg, tr in zip(logits, traj)]

    def track(self, frames, box0: BoundingBox, mode="full") -> Trajectory:
        """One-pass tracking of a single box over every frame of the clip."""
        states = self.initialize(frames[0], [box0])
        traj = [box0]
        for t in range(1, len(frames)):
            _, states = self.step_batch(states, frames[t], mode=mode)
            traj.append(states[0].box)
        return traj

    # -- differentiable paths ------------------------------------------------

    def snippet_logits(self, template_feats_raw: Tensor, window_feats: Sequence[Tensor], mode="full"):
        """Per-step logits [N, steps] from backbone features (teacher forcing)."""
        self._check_mode(mode)
        tf = self.cell.encode(template_feats_raw)
        steps = window_feats[:1] if mode == "single-frame" else window_feats
        h = c = None
        logits = []
        for feats in steps:
            h, c = self.recurrent(feats, h, c, mode)
            logits.append(self.head(tf, h))
        return ag.stack(logits, axis=1)

    def frames_logits(self, frames, boxes0: Sequence[BoundingBox], mode="full", l=None):
        """End-to-end differentiable snippet from raw frames, tracking in the loop.

        Returns (per-step logits Tensor [N, steps], trajectories). Localization is
        an argmax and carries no gradient.
        """
        self._check_mode(mode)
        l = self.config.snippet_len if l is None else l
        tf = self.encode_template(Tensor(self.crop_templates(frames[0], boxes0)))
        boxes = list(boxes0)
        traj = [[b] for b in boxes0]
        h = c = None
        logits = []
        frame_ids = [0] if (mode == "single-frame" or l == 1) else range(1, l)
        for t in frame_ids:
            windows = [self.search_window(b, b0, mode) for b, b0 in zip(boxes, boxes0)]
            feats = self.backbone(Tensor(self.crop_windows(frames[t], windows)))
            h, c = self.recurrent(feats, h, c, mode)
            logits.append(self.head(tf, h))
            if mode in TRACKING_MODES and t > 0:
                resp = ag.cross_correlate(h, tf).data
                for i in range(len(boxes)):
                    cmap = correlation_map_for(resp[i], boxes[i], windows[i], self.config.total_stride,
                                               self.config.window_size)
                    boxes[i] = localize(cmap, boxes[i])
            if t > 0:
                for i in range(len(boxes)):
                    traj[i].append(boxes[i])
        return ag.stack(logits, axis=1), traj


# ---------------------------------------------------------------------------
# construction and persistence


def init_model(config: RCNConfig, seed: Optional[int] = None) -> RCNModel:
    config.validate()
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    params = ParamStore()
    in_ch = config.in_ch
    for i, layer in enumerate(config.backbone):
        params.add(f"backbone/conv{i}/w", glorot_kernel(rng, layer.out_ch, in_ch, layer.kernel))
        params.add(f"backbone/conv{i}/b", np.zeros(layer.out_ch))
        in_ch = layer.out_ch
    cell_cls = ConvLSTMCell if config.cell == "convlstm" else ConvGRUCell
    cell_cls.create(params, config.cell, config.feat_ch, config.hidden_ch, config.k, rng=rng)
    add_fc(params, "head/fc1", config.head_input_dim(), config.fc_hidden, rng)
    add_fc(params, "head/fc2", config.fc_hidden, 1, rng)
    return RCNModel(config, params)


def add_fc(params, prefix, d_in, d_out, rng):
    limit = np.sqrt(6.0 / (d_in + d_out))
    params.add(f"{prefix}/w", rng.uniform(-limit, limit, size=(d_out, d_in)))
    params.add(f"{prefix}/b", np.zeros(d_out))


def parameter_count(config: RCNConfig) -> int:
    """Closed-form count of the parameters init_model creates."""
    total, in_ch = 0, config.in_ch
    for layer in config.backbone:
        total += layer.out_ch * in_ch * layer.kernel ** 2 + layer.out_ch
        in_ch = layer.out_ch
    gates = 4 if config.cell == "convlstm" else 3
    hid, k2 = config.hidden_ch, config.k ** 2
    total += gates * (hid * config.feat_ch * k2 + hid * hid * k2 + hid)
    total += config.fc_hidden * config.head_input_dim() + config.fc_hidden
    total += config.fc_hidden + 1
    return total


def encode_frame(model: RCNModel, patch) -> np.ndarray:
    """Backbone features of a [3,H,W] (or batched) patch."""
    arr = patch.data if isinstance(patch, Tensor) else np.asarray(patch, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != model.config.in_ch:
        raise InvalidArgument(f"patch must be [{model.config.in_ch},H,W], got {arr.shape[1:]}")
    model.config.feature_size((arr.shape[3], arr.shape[2]))
    with no_grad():
        out = model.backbone(Tensor(arr)).data
    return out[0] if single else out


def initialize_candidate(model: RCNModel, frame0, box0: BoundingBox) -> TrackerState:
    return model.initialize(frame0, [box0])[0]


def rcn_step(model: RCNModel, state: TrackerState, frame, mode="full"):
    """Returns (logit, new_state) for a single candidate."""
    if not isinstance(state, TrackerState):
        raise InvalidState("candidate state was not initialized")
    logits, states = model.step_batch([state], frame, mode=mode)
    return float(logits[0]), states[0]


def detect_clip(model: RCNModel, frames, candidates, mode="full", l=None):
    return model.detect(frames, candidates, mode=mode, l=l)


def save_checkpoint(model: RCNModel, path, meta=None, extra=None):
    header_meta = {"kind": "rcn", "model_version": MODEL_VERSION, "config": model.config.to_dict()}
    header_meta.update(meta or {})
    write_checkpoint(path, model.params, meta=header_meta, extra=extra)


def load_checkpoint(path, with_header=False):
    header, arrays = read_checkpoint(path)
    meta = header.get("meta", {})
    if meta.get("kind") != "rcn" or meta.get("model_version") != MODEL_VERSION:
        raise FormatError(f"{path}: not an RCN checkpoint of version {MODEL_VERSION}")
    try:
        config = RCNConfig.from_dict(meta["config"])
        model = RCNModel(config, params_from_checkpoint(header, arrays))
        reference = init_model(config, 0)
    except (KeyError, TypeError, InvalidArgument) as exc:
        raise FormatError(f"{path}: invalid config in header: {exc}") from exc
    for name in reference.params:
        if name not in model.params or model.params[name].shape != reference.params[name].shape:
            raise FormatError(f"{path}: parameter {name!r} missing or mis-shaped")
    if with_header:
        return model, header, extras_from_checkpoint(header, arrays)
    return model
