"""Search-window geometry, nearest-neighbour cropping, and correlation localization.

Both the template and the search window are resampled at the same image-to-crop
scale (set by the window), so one map cell always corresponds to
``stride * scale`` image pixels regardless of the candidate's size.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import InvalidArgument


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel space; stored un-clipped."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidArgument(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise InvalidArgument(f"degenerate box w={self.w} h={self.h}")

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(float(cx) - w / 2.0, float(cy) - h / 2.0, float(w), float(h))

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    @property
    def area(self):
        return self.w * self.h

    def translated(self, dx, dy):
        return BoundingBox(self.x + dx, self.y + dy, self.w, self.h)

    def clipped(self, frame_w, frame_h):
        """Intersection with the frame, or None when the box lies fully outside."""
        x0, y0 = max(self.x, 0.0), max(self.y, 0.0)
        x1, y1 = min(self.x + self.w, float(frame_w)), min(self.y + self.h, float(frame_h))
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)

    def to_list(self):
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, v):
        return cls(*map(float, v))


Trajectory = List[BoundingBox]


@dataclass(frozen=True)
class SearchWindowPolicy:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidArgument(f"alpha must be positive, got {self.alpha}")


@dataclass
class CorrelationMap:
    """Correlation responses plus the affine map from cell to image coordinates.

    ``origin`` is the image position the box center moves to when the argmax is
    cell (0, 0); ``pixel_scale`` is image pixels per crop pixel along (x, y).
    """

    map: np.ndarray
    stride: int
    origin: Tuple[float, float]
    pixel_scale: Tuple[float, float] = (1.0, 1.0)
    response: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def cell_to_image(self, row, col):
        ox, oy = self.origin
        sx, sy = self.pixel_scale
        return ox + self.stride * sx * col, oy + self.stride * sy * row


def expand_window(box: BoundingBox, policy: SearchWindowPolicy = SearchWindowPolicy(),
                  frame_w: int = 0, frame_h: int = 0) -> BoundingBox:
    """Square window of side 2R, R = alpha * max(w, h), on the box center.

    The frame size is accepted for interface symmetry; windows may extend past
    the frame and the cropper zero-pads.
    """
    r = policy.alpha * max(box.w, box.h)
    cx, cy = box.center
    return BoundingBox.from_center(cx, cy, 2.0 * r, 2.0 * r)


def template_window(box: BoundingBox, policy: SearchWindowPolicy, template_size, window_size):
    """Region cropped for the template, at the same scale as the search window."""
    win = expand_window(box, policy)
    (tw, th), (sw, sh) = template_size, window_size
    cx, cy = box.center
    return BoundingBox.from_center(cx, cy, win.w * tw / sw, win.h * th / sh)


def _sample_index(start, extent, n_out, limit):
    idx = np.floor(start + (np.arange(n_out) + 0.5) * (extent / n_out)).astype(np.int64)
    valid = (idx >= 0) & (idx < limit)
    return np.clip(idx, 0, limit - 1), valid


def crop(frame, window: BoundingBox, out_w: int, out_h: int) -> np.ndarray:
    """Nearest-neighbour resample of ``window`` to ``(out_h, out_w)``; outside reads 0."""
    if out_w <= 0 or out_h <= 0:
        raise InvalidArgument(f"crop output must be positive, got {out_w}x{out_h}")
    if not (window.w > 0 and window.h > 0):
        raise InvalidArgument("degenerate crop window")
    data = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    _, fh, fw = data.shape
    xs, vx = _sample_index(window.x, window.w, out_w, fw)
    ys, vy = _sample_index(window.y, window.h, out_h, fh)
    out = data[:, ys[:, None], xs[None, :]].astype(np.float64)
    out *= (vy[:, None] & vx[None, :])
    return out


def crop_many(frame, windows: Sequence[BoundingBox], out_w, out_h) -> np.ndarray:
    data = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if not windows:
        return np.zeros((0, data.shape[0], out_h, out_w))
    return np.stack([crop(data, w, out_w, out_h) for w in windows])


def cross_correlate(window_feat, template_feat, stride=1, origin=(0.0, 0.0), pixel_scale=(1.0, 1.0)):
    """Single-candidate correlation: [D,Hf,Wf] x [D,hf,wf] -> CorrelationMap [1,Hc,Wc].

    The differentiable output is kept on ``response`` for gradient checks.
    """
    wf = window_feat if isinstance(window_feat, Tensor) else Tensor(window_feat)
    tf = template_feat if isinstance(template_feat, Tensor) else Tensor(template_feat)
    if wf.ndim != 3 or tf.ndim != 3:
        raise InvalidArgument("cross_correlate expects [D,H,W] inputs")
    out = ag.cross_correlate(ag.reshape(wf, (1,) + wf.shape), ag.reshape(tf, (1,) + tf.shape))
    return CorrelationMap(out.data.copy(), stride, origin, pixel_scale, response=out)


def correlation_map_for(responses: np.ndarray, box_prev: BoundingBox, window: BoundingBox,
                        stride: int, window_size) -> CorrelationMap:
    """Attach geometry to raw responses so the map's center cell lands on box_prev's center."""
    hc, wc = responses.shape[-2:]
    sx, sy = window.w / window_size[0], window.h / window_size[1]
    cx, cy = box_prev.center
    origin = (cx - stride * sx * (wc - 1) / 2.0, cy - stride * sy * (hc - 1) / 2.0)
    return CorrelationMap(np.asarray(responses).reshape(1, hc, wc), stride, origin, (sx, sy))


def localize(cmap: CorrelationMap, box_prev: BoundingBox) -> BoundingBox:
    """Translate box_prev so its center sits at the argmax cell (first row-major on ties)."""
    m = np.asarray(cmap.map)
    m2 = m.reshape(m.shape[-2:])
    if m2.size == 0:
        raise InvalidArgument("empty correlation map")
    flat = int(np.argmax(m2))
    row, col = divmod(flat, m2.shape[1])
    cx, cy = cmap.cell_to_image(row, col)
    return BoundingBox.from_center(cx, cy, box_prev.w, box_prev.h)


def batch_track(model, frame, states, mode="full"):
    """Advance N candidates one frame in a single batched forward pass.

    Returns a list index-aligned with ``states`` of ``(logit, box, new_state)``.
    """
    if not states:
        return []
    shapes = {s.template_feat.shape for s in states}
    if len(shapes) != 1:
        raise InvalidArgument(f"inconsistent template shapes {sorted(shapes)}")
    logits, new_states = model.step_batch(states, frame, mode=mode)
    return [(float(l), s.box, s) for l, s in zip(logits, new_states)]
