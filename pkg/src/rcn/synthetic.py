"""Synthetic "tiny flying object" clips and frame-difference proposals.

Positives are two-lobed sprites whose lobe angle oscillates (flapping);
negatives use the same sprite frozen at a random point of the same angle
distribution. Size, colour, and speed are drawn from one shared distribution, so
a single frame carries no class information and only deformation over time does.

Frames are quantized to 8 bits at generation so a PNG round trip is exact.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError, InvalidArgument
from .tracking import BoundingBox

DATASET_FORMAT_VERSION = 1
LABELS = ("positive", "negative")
SUPERSAMPLE = 4


@dataclass
class SceneConfig:
    frame_w: int = 128
    frame_h: int = 128
    length: int = 8
    n_positive: int = 2
    n_negative: int = 2
    size_min: float = 10.0
    size_mode: float = 12.0
    size_max: float = 14.0
    displacement: float = 0.35  # per-frame speed / object size
    period_min: float = 3.0
    period_max: float = 6.0
    flap_amplitude: float = 35.0  # degrees
    turn_prob: float = 0.15
    min_separation: float = 2.5  # frame-0 centre distance, in units of size_max
    background: str = "plain"
    noise_sigma: float = 0.01
    seed: int = 0

    def validate(self, snippet_len: int = 1):
        if self.length < snippet_len + 1:
            raise InvalidArgument(f"clip length {self.length} must be at least l+1={snippet_len + 1}")
        if self.size_min < 6:
            raise InvalidArgument("object size must be at least 6 px")
        if not self.size_min <= self.size_mode <= self.size_max:
            raise InvalidArgument("size range must satisfy min <= mode <= max")
        if self.displacement < 0:
            raise InvalidArgument("displacement fraction must be nonnegative")
        if min(self.n_positive, self.n_negative) < 0:
            raise InvalidArgument("object counts must be nonnegative")
        if self.background not in ("plain", "clutter"):
            raise InvalidArgument(f"unknown background mode {self.background!r}")
        if self.noise_sigma < 0 or not 0 < self.period_min <= self.period_max:
            raise InvalidArgument("invalid noise or period range")
        if self.frame_w < 2 * self.size_max or self.frame_h < 2 * self.size_max:
            raise InvalidArgument("frame too small for the object size range")
        return self


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, 3, H, W] in [0, 1]
    clip_id: str = "clip"
    fps: float = 30.0

    def __len__(self):
        return self.frames.shape[0]

    def __getitem__(self, t):
        return self.frames[t]

    @property
    def size(self):
        return self.frames.shape[3], self.frames.shape[2]


@dataclass(frozen=True)
class AnnotationRecord:
    track_id: int
    frame: int
    box: BoundingBox
    label: str

    def to_json(self):
        return {"track_id": self.track_id, "frame": self.frame, "box": self.box.to_list(), "label": self.label}

    @classmethod
    def from_json(cls, d):
        if d.get("label") not in LABELS:
            raise FormatError(f"unknown label {d.get('label')!r}")
        return cls(int(d["track_id"]), int(d["frame"]), BoundingBox.from_list(d["box"]), d["label"])


@dataclass
class AnnotationSet:
    records: List[AnnotationRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def at_frame(self, t, label=None):
        return [r for r in self.records if r.frame == t and (label is None or r.label == label)]

    def track(self, track_id) -> List[BoundingBox]:
        return [r.box for r in sorted(self.records, key=lambda r: r.frame) if r.track_id == track_id]

    def track_ids(self, label=None):
        return sorted({r.track_id for r in self.records if label is None or r.label == label})

    def to_json(self):
        return [r.to_json() for r in self.records]


# ---------------------------------------------------------------------------
# rendering


def _background(cfg: SceneConfig, rng) -> np.ndarray:
    h, w = cfg.frame_h, cfg.frame_w
    top = np.array([0.62, 0.74, 0.90]) + rng.uniform(-0.05, 0.05, 3)
    bottom = np.array([0.82, 0.88, 0.95]) + rng.uniform(-0.05, 0.05, 3)
    ramp = np.linspace(0.0, 1.0, h)[None, :, None]
    bg = top[:, None, None] * (1 - ramp) + bottom[:, None, None] * ramp
    bg = np.broadcast_to(bg, (3, h, w)).copy()
    if cfg.background == "clutter":
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(rng.integers(3, 7)):
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            sx, sy = rng.uniform(6, 20), rng.uniform(4, 12)
            amp = rng.uniform(0.05, 0.15) * rng.choice([-1.0, 1.0])
            blob = np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))
            bg += amp * blob[None]
    return bg


def sprite_coverage(size: float, angle_deg: float, cx: float, cy: float, w: int, h: int):
    """Anti-aliased coverage of the two-lobed sprite on a (h, w) grid.

    Returns (coverage patch, x0, y0) with the patch placed at the integer offset.
    Each lobe is an ellipse from the center outwards, mirrored about the
    vertical axis; ``angle_deg`` is the lobe elevation above horizontal.
    """
    half = size / 2.0
    x0, y0 = int(math.floor(cx - half)) - 1, int(math.floor(cy - half)) - 1
    n = int(math.ceil(size)) + 3
    ss = SUPERSAMPLE
    offs = (np.arange(n * ss) + 0.5) / ss
    xs = x0 + offs[None, :] - cx
    ys = y0 + offs[:, None] - cy
    a = math.radians(angle_deg)
    semi_major, semi_minor = 0.25 * size, 0.11 * size
    inside = (xs / (0.14 * size)) ** 2 + (ys / (0.14 * size)) ** 2 <= 1.0  # body
    for sign in (-1.0, 1.0):
        ux, uy = sign * math.cos(a), -math.sin(a)
        ex, ey = 0.24 * size * ux, 0.24 * size * uy
        px, py = xs - ex, ys - ey
        along = px * ux + py * uy
        across = -px * uy + py * ux
        inside |= (along / semi_major) ** 2 + (across / semi_minor) ** 2 <= 1.0
    cov = inside.reshape(n, ss, n, ss).mean(axis=(1, 3))
    return cov, x0, y0


def _paste(frame, cov, x0, y0, colour):
    _, h, w = frame.shape
    ph, pw = cov.shape
    fx0, fy0 = max(x0, 0), max(y0, 0)
    fx1, fy1 = min(x0 + pw, w), min(y0 + ph, h)
    if fx1 <= fx0 or fy1 <= fy0:
        return
    c = cov[fy0 - y0:fy1 - y0, fx0 - x0:fx1 - x0]
    region = frame[:, fy0:fy1, fx0:fx1]
    frame[:, fy0:fy1, fx0:fx1] = region * (1 - c) + colour[:, None, None] * c


def _path(cfg: SceneConfig, size, rng):
    """Piecewise-linear centre path with reflection at the frame margins."""
    half = size / 2.0
    lo_x, hi_x = half, cfg.frame_w - half
    lo_y, hi_y = half, cfg.frame_h - half
    pos = np.array([rng.uniform(lo_x + size, hi_x - size), rng.uniform(lo_y + size, hi_y - size)])
    speed = cfg.displacement * size * rng.uniform(0.7, 1.3)
    heading = rng.uniform(0, 2 * math.pi)
    centres = [pos.copy()]
    for _ in range(cfg.length - 1):
        if rng.random() < cfg.turn_prob:
            heading += rng.uniform(-math.pi / 3, math.pi / 3)
        vel = speed * np.array([math.cos(heading), math.sin(heading)])
        pos = pos + vel
        for axis, (lo, hi) in enumerate(((lo_x, hi_x), (lo_y, hi_y))):
            if pos[axis] < lo:
                pos[axis] = 2 * lo - pos[axis]
                vel[axis] = -vel[axis]
            elif pos[axis] > hi:
                pos[axis] = 2 * hi - pos[axis]
                vel[axis] = -vel[axis]
        heading = math.atan2(vel[1], vel[0])
        centres.append(pos.copy())
    return np.array(centres), speed


@dataclass
class ObjectSpec:
    label: str
    size: float
    colour: np.ndarray
    speed: float
    centres: np.ndarray
    angles: np.ndarray


def sample_objects(cfg: SceneConfig, rng) -> List[ObjectSpec]:
    objs = []
    labels = ["positive"] * cfg.n_positive + ["negative"] * cfg.n_negative
    sep = cfg.min_separation * cfg.size_max
    for label in labels:
        size = rng.triangular(cfg.size_min, cfg.size_mode, cfg.size_max)
        colour = np.full(3, rng.uniform(0.14, 0.26)) + rng.uniform(-0.03, 0.03, 3)
        # rejection keeps frame-0 objects apart so their difference blobs stay distinct
        for _ in range(200):
            centres, speed = _path(cfg, size, rng)
            if all(np.hypot(*(centres[0] - o.centres[0])) >= sep for o in objs):
                break
        base = rng.uniform(-10.0, 10.0)
        period = rng.uniform(cfg.period_min, cfg.period_max)
        phase = rng.uniform(0, 2 * math.pi)
        t = np.arange(cfg.length)
        if label == "positive":
            angles = base + cfg.flap_amplitude * np.sin(2 * math.pi * t / period + phase)
        else:
            angles = np.full(cfg.length, base + cfg.flap_amplitude * math.sin(phase))
        objs.append(ObjectSpec(label, size, colour, speed, centres, angles))
    return objs


def generate_clip(config: SceneConfig, seed: Optional[int] = None, clip_id: str = "clip"):
    """Render one clip; deterministic in ``seed`` (defaults to config.seed)."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    bg = _background(config, rng)
    objs = sample_objects(config, rng)
    frames = np.empty((config.length, 3, config.frame_h, config.frame_w))
    records = []
    for t in range(config.length):
        f = bg.copy()
        for obj in objs:
            cx, cy = obj.centres[t]
            cov, x0, y0 = sprite_coverage(obj.size, obj.angles[t], cx, cy, config.frame_w, config.frame_h)
            _paste(f, cov, x0, y0, obj.colour)
        if config.noise_sigma > 0:
            f = f + rng.normal(0.0, config.noise_sigma, f.shape)
        frames[t] = f
    for tid, obj in enumerate(objs):
        for t in range(config.length):
            cx, cy = obj.centres[t]
            records.append(AnnotationRecord(tid, t, BoundingBox.from_center(cx, cy, obj.size, obj.size), obj.label))
    frames = np.round(np.clip(frames, 0.0, 1.0) * 255.0) / 255.0
    return VideoClip(frames, clip_id=clip_id), AnnotationSet(records)


def generate_clips(config: SceneConfig, n_clips: int, seed: Optional[int] = None):
    """Clips drawn from independent substreams of one seed sequence."""
    base = config.seed if seed is None else seed
    children = np.random.SeedSequence(base).spawn(n_clips)
    out = []
    for i, child in enumerate(children):
        out.append(generate_clip(config, seed=int(child.generate_state(1)[0]), clip_id=f"clip_{i:04d}"))
    return out


# ---------------------------------------------------------------------------
# proposals


def default_threshold(noise_sigma):
    return max(4.0 * noise_sigma, 0.05)


def propose_candidates(clip, min_area: int = 4, threshold: Optional[float] = None,
                       noise_sigma: float = 0.01, dilate: int = 1, square: bool = True,
                       polarity: Optional[str] = "dark") -> List[BoundingBox]:
    """Boxes of connected components of |I_1 - I_0| (8-connectivity).

    ``dilate`` grows the mask before labelling so the fragments left where an
    object overlaps its own previous silhouette merge into one component; box
    extents are taken from the undilated pixels. With ``square`` each box is
    widened to a square on its centre, matching the square search geometry and
    the square annotations.

    ``polarity="dark"`` takes the box extents only from component pixels that
    are darker in the first frame than in the second, i.e. where a dark object
    sat at t=0, so the box follows the first-frame silhouette instead of the
    union of both positions. Components without such pixels fall back to all
    their pixels. ``None`` disables the refinement.
    """
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    if frames.shape[0] < 2:
        raise InvalidArgument("proposals need at least two frames")
    thr = default_threshold(noise_sigma) if threshold is None else threshold
    signed = frames[1] - frames[0]
    mask = np.abs(signed).max(axis=0) > thr
    if polarity == "dark":
        first = signed.mean(axis=0) > thr
    elif polarity is None:
        first = mask
    else:
        raise InvalidArgument(f"unknown polarity {polarity!r}")
    grown = ndimage.binary_dilation(mask, iterations=dilate) if dilate > 0 else mask
    labels, n = ndimage.label(grown, structure=np.ones((3, 3), dtype=bool))
    boxes = []
    for k in range(1, n + 1):
        comp = (labels == k) & mask
        if comp.sum() < min_area:
            continue
        ys, xs = np.nonzero(comp & first)
        if ys.size == 0:
            ys, xs = np.nonzero(comp)
        x0, y0 = xs.min(), ys.min()
        box = BoundingBox(float(x0), float(y0), float(xs.max() - x0 + 1), float(ys.max() - y0 + 1))
        if square:
            side = max(box.w, box.h)
            box = BoundingBox.from_center(*box.center, side, side)
        boxes.append(box)
    return boxes


# ---------------------------------------------------------------------------
# dataset IO


def split_ids(clip_ids: Sequence[str], fractions=(0.7, 0.1, 0.2)) -> Dict[str, List[str]]:
    n = len(clip_ids)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    ids = list(clip_ids)
    return {"train": ids[:n_train], "val": ids[n_train:n_train + n_val], "test": ids[n_train + n_val:]}


def _write_png(path, frame):
    from PIL import Image

    arr = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def _read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def write_dataset(clips: Sequence[VideoClip], annotations: Sequence[AnnotationSet], out_dir,
                  config: Optional[SceneConfig] = None, splits=None):
    if len(clips) != len(annotations):
        raise InvalidArgument("clips and annotations differ in length")
    os.makedirs(out_dir, exist_ok=True)
    for clip, ann in zip(clips, annotations):
        d = os.path.join(out_dir, clip.clip_id)
        os.makedirs(d, exist_ok=True)
        for t in range(len(clip)):
            _write_png(os.path.join(d, f"frame_{t:04d}.png"), clip.frames[t])
        with open(os.path.join(d, "annotations.json"), "w") as fh:
            json.dump({"clip_id": clip.clip_id, "fps": clip.fps, "num_frames": len(clip),
                       "records": ann.to_json()}, fh, indent=1, sort_keys=True)
    ids = [c.clip_id for c in clips]
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "config": asdict(config) if config is not None else None,
        "clips": ids,
        "splits": splits if splits is not None else split_ids(ids),
    }
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return meta


def read_dataset(in_dir, split: Optional[str] = None):
    """Returns (clips, annotations, meta); ``split`` restricts to one split's clips."""
    meta_path = os.path.join(in_dir, "dataset.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{meta_path}: {exc}") from exc
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise FormatError(f"{meta_path}: unsupported format version {meta.get('format_version')!r}")
    ids = meta["clips"] if split is None else meta["splits"].get(split)
    if ids is None:
        raise InvalidArgument(f"unknown split {split!r}")
    clips, anns = [], []
    for cid in ids:
        d = os.path.join(in_dir, cid)
        ann_path = os.path.join(d, "annotations.json")
        try:
            with open(ann_path) as fh:
                raw = json.load(fh)
            records = [AnnotationRecord.from_json(r) for r in raw["records"]]
            n = int(raw["num_frames"])
            frames = np.stack([_read_png(os.path.join(d, f"frame_{t:04d}.png")) for t in range(n)])
        except FormatError as exc:
            raise FormatError(f"clip {cid}: {exc}") from exc
        except (OSError, KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"clip {cid}: {exc}") from exc
        clips.append(VideoClip(frames, clip_id=cid, fps=float(raw.get("fps", 30.0))))
        anns.append(AnnotationSet(records))
    return clips, anns, meta
