"""Convolutional recurrent cells: ConvLSTM, ConvGRU, and their severed-recurrence encoders.

All maps are batched ``[N, C, H, W]``; a 3-D input is treated as a batch of one
and the result is returned un-batched. A ``None`` previous state means zeros,
which lets the first step skip the recurrent convolutions entirely.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, Tensor
from .errors import InvalidArgument

LSTM_GATES = ("i", "f", "c", "o")
GRU_GATES = ("z", "r", "h")


def glorot_kernel(rng, out_ch, in_ch, k):
    limit = np.sqrt(6.0 / ((in_ch + out_ch) * k * k))
    return rng.uniform(-limit, limit, size=(out_ch, in_ch, k, k))


def _batched(x):
    if x.ndim == 3:
        return ag.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise InvalidArgument(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")
    return x, False


def _unbatch(t, squeeze):
    return ag.reshape(t, t.shape[1:]) if squeeze else t


@dataclass
class ConvLSTMState:
    h: Optional[Tensor] = None
    c: Optional[Tensor] = None

    @property
    def is_zero(self):
        return self.h is None


class ConvLSTMCell:
    """Holds references to the eight kernels and four biases in a ParamStore."""

    kind = "convlstm"

    def __init__(self, params: ParamStore, prefix: str, in_ch: int, hidden_ch: int, k: int):
        if k < 1 or k % 2 == 0:
            raise InvalidArgument(f"recurrent kernel size must be odd and positive, got {k}")
        self.params = params
        self.prefix = prefix.rstrip("/")
        self.in_ch, self.hidden_ch, self.k = in_ch, hidden_ch, k
        self.pad = (k - 1) // 2

    @classmethod
    def create(cls, params, prefix, in_ch, hidden_ch, k=3, rng=None, forget_bias=1.0):
        cell = cls(params, prefix, in_ch, hidden_ch, k)
        rng = rng or np.random.default_rng(0)
        for g in LSTM_GATES:
            params.add(cell._name(f"w_x{g}"), glorot_kernel(rng, hidden_ch, in_ch, k))
            params.add(cell._name(f"w_h{g}"), glorot_kernel(rng, hidden_ch, hidden_ch, k))
        for g in LSTM_GATES:
            init = forget_bias if g == "f" else 0.0
            params.add(cell._name(f"b_{g}"), np.full(hidden_ch, init))
        return cell

    def _name(self, p):
        return f"{self.prefix}/{p}"

    def p(self, name) -> Tensor:
        return self.params[self._name(name)]

    def _check(self, x, state):
        if x.shape[1] != self.in_ch:
            raise InvalidArgument(f"{self.prefix}: input has {x.shape[1]} channels, expected {self.in_ch}")
        if state is not None and not state.is_zero:
            want = (x.shape[0], self.hidden_ch) + x.shape[2:]
            if state.h.shape != want or state.c.shape != want:
                raise InvalidArgument(f"{self.prefix}: state {state.h.shape} does not match input {x.shape}")

    def _xconv(self, x, gates):
        w = ag.concat([self.p(f"w_x{g}") for g in gates], axis=0)
        b = ag.concat([self.p(f"b_{g}") for g in gates], axis=0)
        out = ag.conv2d(x, w, b, 1, self.pad)
        return ag.split(out, [self.hidden_ch] * len(gates), axis=1)

    def _hconv(self, h, gates):
        w = ag.concat([self.p(f"w_h{g}") for g in gates], axis=0)
        out = ag.conv2d(h, w, None, 1, self.pad)
        return ag.split(out, [self.hidden_ch] * len(gates), axis=1)

    def step(self, x, state: Optional[ConvLSTMState] = None):
        """Returns ``(h_new, state_new)``; the gate maps of the step are kept on
        ``self.last_gates`` for inspection."""
        x, squeeze = _batched(x)
        if state is not None and not state.is_zero and squeeze:
            state = ConvLSTMState(_batched(state.h)[0], _batched(state.c)[0])
        self._check(x, state)
        xi, xf, xc, xo = self._xconv(x, LSTM_GATES)
        if state is None or state.is_zero:
            i, f, o = ag.sigmoid(xi), ag.sigmoid(xf), ag.sigmoid(xo)
            c = ag.hadamard(i, ag.tanh(xc))
        else:
            hi, hf, hc, ho = self._hconv(state.h, LSTM_GATES)
            i = ag.sigmoid(ag.add(xi, hi))
            f = ag.sigmoid(ag.add(xf, hf))
            o = ag.sigmoid(ag.add(xo, ho))
            c = ag.add(ag.hadamard(f, state.c), ag.hadamard(i, ag.tanh(ag.add(xc, hc))))
        h = ag.hadamard(o, ag.tanh(c))
        self.last_gates = {"i": i, "f": f, "o": o}
        h, c = _unbatch(h, squeeze), _unbatch(c, squeeze)
        return h, ConvLSTMState(h, c)

    def encode(self, x):
        """Severed recurrence: forget gate forced to zero, previous hidden state zero."""
        x, squeeze = _batched(x)
        self._check(x, None)
        xi, xc, xo = self._xconv(x, ("i", "c", "o"))
        c = ag.hadamard(ag.sigmoid(xi), ag.tanh(xc))
        h = ag.hadamard(ag.sigmoid(xo), ag.tanh(c))
        return _unbatch(h, squeeze)


class ConvGRUCell:
    kind = "convgru"

    def __init__(self, params: ParamStore, prefix: str, in_ch: int, hidden_ch: int, k: int):
        if k < 1 or k % 2 == 0:
            raise InvalidArgument(f"recurrent kernel size must be odd and positive, got {k}")
        self.params = params
        self.prefix = prefix.rstrip("/")
        self.in_ch, self.hidden_ch, self.k = in_ch, hidden_ch, k
        self.pad = (k - 1) // 2

    @classmethod
    def create(cls, params, prefix, in_ch, hidden_ch, k=3, rng=None):
        cell = cls(params, prefix, in_ch, hidden_ch, k)
        rng = rng or np.random.default_rng(0)
        for g in GRU_GATES:
            params.add(cell._name(f"w_x{g}"), glorot_kernel(rng, hidden_ch, in_ch, k))
            params.add(cell._name(f"w_h{g}"), glorot_kernel(rng, hidden_ch, hidden_ch, k))
        for g in GRU_GATES:
            params.add(cell._name(f"b_{g}"), np.zeros(hidden_ch))
        return cell

    _name = ConvLSTMCell._name
    p = ConvLSTMCell.p
    _xconv = ConvLSTMCell._xconv

    def _check(self, x, h_prev):
        if x.shape[1] != self.in_ch:
            raise InvalidArgument(f"{self.prefix}: input has {x.shape[1]} channels, expected {self.in_ch}")
        if h_prev is not None:
            want = (x.shape[0], self.hidden_ch) + x.shape[2:]
            if h_prev.shape != want:
                raise InvalidArgument(f"{self.prefix}: state {h_prev.shape} does not match input {x.shape}")

    def step(self, x, h_prev: Optional[Tensor] = None):
        x, squeeze = _batched(x)
        if h_prev is not None and squeeze:
            h_prev = _batched(h_prev)[0]
        self._check(x, h_prev)
        xz, xr, xh = self._xconv(x, GRU_GATES)
        if h_prev is None:
            z = ag.sigmoid(xz)
            self.last_gates = {"z": z, "r": ag.sigmoid(xr)}
            h = ag.hadamard(ag.one_minus(z), ag.tanh(xh))
            return _unbatch(h, squeeze)
        pad = self.pad
        wz, wr = self.p("w_hz"), self.p("w_hr")
        hz, hr = ag.split(ag.conv2d(h_prev, ag.concat([wz, wr], axis=0), None, 1, pad),
                          [self.hidden_ch] * 2, axis=1)
        z = ag.sigmoid(ag.add(xz, hz))
        r = ag.sigmoid(ag.add(xr, hr))
        cand = ag.tanh(ag.add(xh, ag.conv2d(ag.hadamard(r, h_prev), self.p("w_hh"), None, 1, pad)))
        h = ag.add(ag.hadamard(z, h_prev), ag.hadamard(ag.one_minus(z), cand))
        self.last_gates = {"z": z, "r": r}
        return _unbatch(h, squeeze)

    def encode(self, x):
        """GRU analogue of the severed encoder: h_prev = 0."""
        return self.step(x, None)


def convlstm_step(cell: ConvLSTMCell, x, state: Optional[ConvLSTMState] = None):
    return cell.step(x, state)


def convgru_step(cell: ConvGRUCell, x, h_prev=None):
    return cell.step(x, h_prev)


def template_encode(cell, x):
    return cell.encode(x)
