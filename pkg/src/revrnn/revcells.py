"""Reversible recurrent cells over two-group fixed-point hidden states.

Every reversible cell splits its hidden state into two halves and updates
them in turn, group 2 reading the *new* group 1.  Gates and candidates are
computed in float64 from decoded hidden values and then quantized; the
forget multiplications go through a buffer (see :mod:`revrnn.revbuffer`) so
``reverse`` undoes ``forward`` bit for bit.

Each cell also exposes a float surrogate of its step (quantizers removed) and
a ``step_backward`` that differentiates that surrogate at given states.  The
training engine feeds it either stored states or states recovered by
``reverse``; quantizers are treated as identity in the backward pass.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import (
    FixedFormat,
    add_raw,
    dequantize,
    quantize,
    quantize_gate,
    restrict_forgetting,
    sub_raw,
)
from .revbuffer import BigBuffer, BitStack, BufferTensor, SplitBuffer, ideal_bits_per_step


def sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass
class RevState:
    """Raw fixed-point components plus the buffers that make them reversible."""

    values: dict[str, np.ndarray]
    buffers: dict = field(default_factory=dict)
    ideal_bits: float = 0.0

    def __getattr__(self, name):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def copy(self) -> "RevState":
        return RevState(
            {k: v.copy() for k, v in self.values.items()},
            {k: b.copy() for k, b in self.buffers.items()},
            self.ideal_bits,
        )

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}

    def values_equal(self, other) -> bool:
        vals = other.values if isinstance(other, RevState) else other
        return self.values.keys() == vals.keys() and all(np.array_equal(self.values[k], vals[k]) for k in self.values)

    def equals(self, other: "RevState") -> bool:
        """Bit-exact equality of values and buffer contents."""
        return (
            self.values_equal(other)
            and self.buffers.keys() == other.buffers.keys()
            and all(self.buffers[k].state_equal(other.buffers[k]) for k in self.buffers)
        )

    def measured_bits(self) -> int:
        return sum(b.measured_bits() for b in self.buffers.values())

    def stored_bits(self) -> int:
        return sum(b.stored_bits() for b in self.buffers.values() if isinstance(b, SplitBuffer))

    def buffer_bits(self) -> int:
        return sum(
            b.buffer_bits() if isinstance(b, SplitBuffer) else b.measured_bits() for b in self.buffers.values()
        )


# -- float group kernels -----------------------------------------------------


def _gru_gates(W, U, x, u, floor, n_gate_rows):
    hg = U.shape[0]
    xa = np.concatenate([x, u], axis=1)
    s = sigmoid(xa @ W.T)
    if n_gate_rows == 2 * hg:
        zs, r = s[:, :hg], s[:, hg:]
        z = restrict_forgetting(zs, floor) if floor else zs
    else:
        # discrete-forgetting groups only produce the reset gate here
        zs, r, z = None, s, None
    xb = np.concatenate([x, r * u], axis=1)
    g = np.tanh(xb @ U.T)
    return z, r, g, xa, xb, zs


def _gru_group_backward(W, U, x, u, h, floor, dh_new, nf=False, z_fixed=None):
    """Gradients of ``h' = z*h + (1-z)*g`` (or ``h + (1-z)*g`` when ``nf``)."""
    z, r, g, xa, xb, zs = _gru_gates(W, U, x, u, floor, W.shape[0])
    fixed = z_fixed is not None
    if fixed:
        z = z_fixed
    if nf:
        dh = dh_new
        dz = -dh_new * g
    else:
        dh = dh_new * z
        dz = dh_new * (h - g)
    dg = dh_new * (1.0 - z)
    db = dg * (1.0 - g * g)
    dU = db.T @ xb
    dxb = db @ U
    e = x.shape[1]
    dx = dxb[:, :e]
    dru = dxb[:, e:]
    dr = dru * u
    du = dru * r
    dr_pre = dr * r * (1.0 - r)
    if fixed:
        da = dr_pre
    else:
        dzs = dz * (1.0 - floor)
        da = np.concatenate([dzs * zs * (1.0 - zs), dr_pre], axis=1)
    dW = da.T @ xa
    dxa = da @ W
    return dh, du + dxa[:, e:], dx + dxa[:, :e], dW, dU


def _lstm_gates(W, U, x, u, floor):
    hg = U.shape[0]
    xa = np.concatenate([x, u], axis=1)
    s = sigmoid(xa @ W.T)
    g = np.tanh(xa @ U.T)
    fs, i, o = s[:, :hg], s[:, hg : 2 * hg], s[:, 2 * hg : 3 * hg]
    ps = s[:, 3 * hg :] if W.shape[0] == 4 * hg else None
    f = restrict_forgetting(fs, floor) if floor else fs
    p = None if ps is None else (restrict_forgetting(ps, floor) if floor else ps)
    return f, i, o, p, g, xa, fs, ps


def _lstm_group_backward(W, U, x, u, h, c, c_new, floor, dh_new, dc_new):
    """Gradients of ``c' = f*c + i*g`` and ``h' = p*h + o*tanh(c')``."""
    f, i, o, p, g, xa, fs, ps = _lstm_gates(W, U, x, u, floor)
    tc = np.tanh(c_new)
    dp = dh_new * h
    dh = dh_new * p
    do = dh_new * tc
    dcn = dc_new + dh_new * o * (1.0 - tc * tc)
    df = dcn * c
    dc = dcn * f
    di = dcn * g
    dg = dcn * i
    da = np.concatenate(
        [
            df * (1.0 - floor) * fs * (1.0 - fs),
            di * i * (1.0 - i),
            do * o * (1.0 - o),
            dp * (1.0 - floor) * ps * (1.0 - ps),
        ],
        axis=1,
    )
    dgb = dg * (1.0 - g * g)
    dW = da.T @ xa
    dU = dgb.T @ xa
    dxa = da @ W + dgb @ U
    e = x.shape[1]
    return dh, dc, dxa[:, e:], dxa[:, :e], dW, dU


# -- cells -------------------------------------------------------------------


class RecurrentCell:
    """Common construction, parameter storage and state helpers."""

    kind = "base"
    reversible = True
    components: tuple[str, ...] = ("h1", "h2")
    buffered: tuple[str, ...] = ("h1", "h2")

    def __init__(
        self,
        input_size: int,
        hidden_size: int,
        fmt: FixedFormat | None = None,
        forget_floor: float = 0.0,
        buffer_mode: str = "limb",
        seed: int | None = 0,
    ):
        if hidden_size % 2 and self.reversible:
            raise ValueError("reversible cells need an even hidden size")
        if not 0.0 <= forget_floor < 1.0:
            raise ValueError("forget floor must lie in [0, 1)")
        if buffer_mode not in ("limb", "big"):
            raise ValueError(f"unknown buffer mode {buffer_mode!r}")
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.fmt = fmt or FixedFormat()
        self.forget_floor = float(forget_floor)
        self.buffer_mode = buffer_mode
        self.params = self.init_params(np.random.default_rng(seed))

    @property
    def group_size(self) -> int:
        return self.hidden_size // 2

    @property
    def state_units(self) -> int:
        """Hidden units counted by naive activation storage."""
        return self.hidden_size * len(self.components) // 2

    def param_shapes(self) -> dict[str, tuple[int, int]]:
        raise NotImplementedError

    def init_params(self, rng) -> dict[str, np.ndarray]:
        bound = 1.0 / np.sqrt(self.hidden_size)
        return {k: rng.uniform(-bound, bound, size=s) for k, s in self.param_shapes().items()}

    def _new_buffer(self, batch: int, stored: np.ndarray | None):
        shape = (batch, self.group_size)
        if self.buffer_mode == "big":
            return BigBuffer(shape, rz=self.fmt.rz)
        if stored is not None and stored.any():
            return SplitBuffer(shape, stored, rz=self.fmt.rz, rh=self.fmt.rh)
        return BufferTensor(shape, rz=self.fmt.rz, rh=self.fmt.rh)

    def init_state(self, batch: int, values: dict | None = None, stored_units: int = 0) -> RevState:
        """Fresh state with empty buffers.

        ``stored_units`` keeps the first ``k`` units of ``[h1; h2]`` at full
        precision instead of buffering them.
        """
        hg = self.group_size
        if values is None:
            vals = {k: np.zeros((batch, hg), dtype=np.int64) for k in self.components}
        else:
            vals = {k: np.asarray(values[k], dtype=np.int64).copy() for k in self.components}
        stored = {"h1": np.arange(hg) < stored_units, "h2": np.arange(hg) + hg < stored_units}
        bufs = {k: self._new_buffer(batch, stored.get(k)) for k in self.buffered}
        return RevState(vals, bufs)

    def encode_state(self, floats: dict | tuple, batch: int | None = None) -> RevState:
        if isinstance(floats, tuple):
            floats = dict(zip(self.components, floats))
        vals = {k: quantize(np.asarray(floats[k]), self.fmt) for k in self.components}
        return self.init_state(batch or next(iter(vals.values())).shape[0], vals)

    def decode(self, state: RevState) -> tuple[np.ndarray, ...]:
        return tuple(dequantize(state.values[k], self.fmt) for k in self.components)

    def output(self, fstate: tuple) -> np.ndarray:
        """Readout features ``[h1; h2]`` from a float state."""
        return np.concatenate([fstate[0], fstate[1]], axis=1)

    def output_backward(self, dout: np.ndarray) -> tuple:
        hg = self.group_size
        zeros = [np.zeros_like(dout[:, :hg]) for _ in self.components[2:]]
        return (dout[:, :hg], dout[:, hg:], *zeros)

    def zero_float_state(self, batch: int) -> tuple:
        return tuple(np.zeros((batch, self.group_size)) for _ in self.components)

    def _mul(self, state, new_vals, name, raw, zq):
        new_vals[name] = state.buffers[name].push(raw, zq)
        state.ideal_bits += float(np.sum(ideal_bits_per_step(zq, self.fmt.rz)))

    def _finish(self, state: RevState, vals: dict) -> RevState:
        return RevState(vals, state.buffers, state.ideal_bits)

    # checkpoint format: magic, header length, JSON header, then row-major float64 matrices
    _MAGIC = b"RVPC"

    def header(self) -> dict:
        return {
            "cell": self.kind,
            "E": self.input_size,
            "H": self.hidden_size,
            "R_H": self.fmt.rh,
            "R_Z": self.fmt.rz,
            "a": self.forget_floor,
            "width": self.fmt.width,
            "matrices": [[k, list(v.shape)] for k, v in self.params.items()],
        }

    def params_to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode()
        body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self.params.values())
        return self._MAGIC + struct.pack("<I", len(head)) + head + body


class RevGRU(RecurrentCell):
    """Reversible GRU: ``h_i = z_i*h_i + (1-z_i)*g_i`` per group."""

    kind = "revgru"
    nf = False

    def param_shapes(self):
        hg, n = self.group_size, self.input_size + self.group_size
        return {"W1": (2 * hg, n), "U1": (hg, n), "W2": (2 * hg, n), "U2": (hg, n)}

    def _gates(self, i, x, u):
        p = self.params
        z, r, g, *_ = _gru_gates(p[f"W{i}"], p[f"U{i}"], x, u, 0.0 if self.nf else self.forget_floor, 2 * self.group_size)
        return z, (1.0 - z) * g

    def _update(self, state, vals, name, x, u):
        z, add = self._gates(name[1], x, u)
        if self.nf:
            vals[name] = add_raw(state.values[name], quantize(add, self.fmt), self.fmt)
        else:
            self._mul(state, vals, name, state.values[name], quantize_gate(z, self.fmt.rz))
            vals[name] = add_raw(vals[name], quantize(add, self.fmt), self.fmt)

    def _undo(self, state, vals, name, x, u):
        z, add = self._gates(name[1], x, u)
        shifted = sub_raw(vals[name], quantize(add, self.fmt), self.fmt)
        if self.nf:
            vals[name] = shifted
        else:
            zq = quantize_gate(z, self.fmt.rz)
            vals[name] = state.buffers[name].pop(shifted, zq)
            state.ideal_bits -= float(np.sum(ideal_bits_per_step(zq, self.fmt.rz)))

    def forward(self, x: np.ndarray, state: RevState) -> RevState:
        vals = dict(state.values)
        self._update(state, vals, "h1", x, dequantize(state.values["h2"], self.fmt))
        self._update(state, vals, "h2", x, dequantize(vals["h1"], self.fmt))
        return self._finish(state, vals)

    def reverse(self, x: np.ndarray, state: RevState) -> RevState:
        vals = dict(state.values)
        self._undo(state, vals, "h2", x, dequantize(vals["h1"], self.fmt))
        self._undo(state, vals, "h1", x, dequantize(vals["h2"], self.fmt))
        return self._finish(state, vals)

    def surrogate_step(self, x, fstate):
        h1, h2 = fstate
        z1, a1 = self._gates("1", x, h2)
        h1n = (h1 if self.nf else z1 * h1) + a1
        z2, a2 = self._gates("2", x, h1n)
        h2n = (h2 if self.nf else z2 * h2) + a2
        return h1n, h2n

    def step_backward(self, x, prev, new, dnew):
        p, a = self.params, 0.0 if self.nf else self.forget_floor
        (h1p, h2p), (h1n, _), (dh1n, dh2n) = prev, new, dnew
        dh2p, du2, dx2, dW2, dU2 = _gru_group_backward(p["W2"], p["U2"], x, h1n, h2p, a, dh2n, self.nf)
        dh1p, du1, dx1, dW1, dU1 = _gru_group_backward(p["W1"], p["U1"], x, h2p, h1p, a, dh1n + du2, self.nf)
        grads = {"W1": dW1, "U1": dU1, "W2": dW2, "U2": dU2}
        return (dh1p, dh2p + du1), dx1 + dx2, grads


class NFRevGRU(RevGRU):
    """No-forgetting RevGRU: ``h_i = h_i + (1-z_i)*g_i``; no buffers, 64-bit storage."""

    kind = "nf-revgru"
    nf = True
    buffered = ()

    def __init__(self, input_size, hidden_size, fmt=None, forget_floor=0.0, buffer_mode="limb", seed=0):
        fmt = (fmt or FixedFormat()).widened()
        super().__init__(input_size, hidden_size, fmt, 0.0, buffer_mode, seed)


class RevLSTM(RecurrentCell):
    """Reversible LSTM with an extra ``p`` gate multiplying the previous ``h``."""

    kind = "revlstm"
    components = ("h1", "h2", "c1", "c2")
    buffered = ("c1", "h1", "c2", "h2")

    def param_shapes(self):
        hg, n = self.group_size, self.input_size + self.group_size
        return {"W1": (4 * hg, n), "U1": (hg, n), "W2": (4 * hg, n), "U2": (hg, n)}

    def _gates(self, i, x, u):
        p = self.params
        f, ig, o, pg, g, *_ = _lstm_gates(p[f"W{i}"], p[f"U{i}"], x, u, self.forget_floor)
        return f, ig * g, o, pg

    def _group_forward(self, state, vals, i, x, u):
        f, cadd, o, pg = self._gates(i, x, u)
        q = lambda v: quantize_gate(v, self.fmt.rz)  # noqa: E731
        self._mul(state, vals, f"c{i}", state.values[f"c{i}"], q(f))
        vals[f"c{i}"] = add_raw(vals[f"c{i}"], quantize(cadd, self.fmt), self.fmt)
        hadd = o * np.tanh(dequantize(vals[f"c{i}"], self.fmt))
        self._mul(state, vals, f"h{i}", state.values[f"h{i}"], q(pg))
        vals[f"h{i}"] = add_raw(vals[f"h{i}"], quantize(hadd, self.fmt), self.fmt)

    def _group_reverse(self, state, vals, i, x, u):
        f, cadd, o, pg = self._gates(i, x, u)
        rz = self.fmt.rz
        # the h term needs this step's c, so h is undone before c
        hadd = o * np.tanh(dequantize(vals[f"c{i}"], self.fmt))
        pq, fq = quantize_gate(pg, rz), quantize_gate(f, rz)
        vals[f"h{i}"] = state.buffers[f"h{i}"].pop(sub_raw(vals[f"h{i}"], quantize(hadd, self.fmt), self.fmt), pq)
        vals[f"c{i}"] = state.buffers[f"c{i}"].pop(sub_raw(vals[f"c{i}"], quantize(cadd, self.fmt), self.fmt), fq)
        state.ideal_bits -= float(np.sum(ideal_bits_per_step(pq, rz)) + np.sum(ideal_bits_per_step(fq, rz)))

    def forward(self, x, state):
        vals = dict(state.values)
        self._group_forward(state, vals, "1", x, dequantize(state.values["h2"], self.fmt))
        self._group_forward(state, vals, "2", x, dequantize(vals["h1"], self.fmt))
        return self._finish(state, vals)

    def reverse(self, x, state):
        vals = dict(state.values)
        self._group_reverse(state, vals, "2", x, dequantize(vals["h1"], self.fmt))
        self._group_reverse(state, vals, "1", x, dequantize(vals["h2"], self.fmt))
        return self._finish(state, vals)

    def surrogate_step(self, x, fstate):
        h1, h2, c1, c2 = fstate
        f, cadd, o, pg = self._gates("1", x, h2)
        c1n = f * c1 + cadd
        h1n = pg * h1 + o * np.tanh(c1n)
        f, cadd, o, pg = self._gates("2", x, h1n)
        c2n = f * c2 + cadd
        h2n = pg * h2 + o * np.tanh(c2n)
        return h1n, h2n, c1n, c2n

    def step_backward(self, x, prev, new, dnew):
        p, a = self.params, self.forget_floor
        h1p, h2p, c1p, c2p = prev
        h1n, _, c1n, c2n = new
        dh1n, dh2n, dc1n, dc2n = dnew
        dh2p, dc2p, du2, dx2, dW2, dU2 = _lstm_group_backward(p["W2"], p["U2"], x, h1n, h2p, c2p, c2n, a, dh2n, dc2n)
        dh1p, dc1p, du1, dx1, dW1, dU1 = _lstm_group_backward(
            p["W1"], p["U1"], x, h2p, h1p, c1p, c1n, a, dh1n + du2, dc1n
        )
        grads = {"W1": dW1, "U1": dU1, "W2": dW2, "U2": dU2}
        return (dh1p, dh2p + du1, dc1p, dc2p), dx1 + dx2, grads


class DFRevGRU(RecurrentCell):
    """RevGRU whose forget gates are powers of two chosen by argmax.

    Multiplying by ``2**-k`` is an arithmetic right shift; the shifted-off
    bits go onto a bit stack that holds ``max_bits`` bits per unit per step.
    The selection is not differentiable, so ``Q1``/``Q2`` receive no gradient.
    """

    kind = "df-revgru"

    def __init__(self, input_size, hidden_size, fmt=None, forget_floor=0.0, buffer_mode="limb", seed=0, max_bits=2):
        if max_bits < 1:
            raise ValueError("max_bits must be at least 1")
        self.max_bits = max_bits
        super().__init__(input_size, hidden_size, fmt, 0.0, "limb", seed)

    def param_shapes(self):
        hg, n = self.group_size, self.input_size + self.group_size
        q = (self.max_bits + 1) * hg
        return {"W1": (hg, n), "U1": (hg, n), "Q1": (q, n), "W2": (hg, n), "U2": (hg, n), "Q2": (q, n)}

    def _new_buffer(self, batch, stored):
        return BitStack((batch, self.group_size), self.max_bits)

    def shifts(self, i, x, u) -> np.ndarray:
        xa = np.concatenate([x, u], axis=1)
        scores = np.maximum(xa @ self.params[f"Q{i}"].T, 0.0)
        return np.argmax(scores.reshape(len(x), self.group_size, self.max_bits + 1), axis=2).astype(np.int64)

    def _gates(self, i, x, u):
        p = self.params
        k = self.shifts(i, x, u)
        z = np.ldexp(1.0, -k)
        _, _, g, *_ = _gru_gates(p[f"W{i}"], p[f"U{i}"], x, u, 0.0, self.group_size)
        return k, z, (1.0 - z) * g

    def _update(self, state, vals, name, x, u):
        k, _, add = self._gates(name[1], x, u)
        raw = state.values[name]
        state.buffers[name].push(raw & ((np.int64(1) << k) - 1))
        state.ideal_bits += float(k.sum())
        vals[name] = add_raw(raw >> k, quantize(add, self.fmt), self.fmt)

    def _undo(self, state, vals, name, x, u):
        k, _, add = self._gates(name[1], x, u)
        shifted = sub_raw(vals[name], quantize(add, self.fmt), self.fmt)
        low = state.buffers[name].pop()
        state.ideal_bits -= float(k.sum())
        vals[name] = (shifted << k) + low

    forward = RevGRU.forward
    reverse = RevGRU.reverse

    def surrogate_step(self, x, fstate):
        h1, h2 = fstate
        _, z1, a1 = self._gates("1", x, h2)
        h1n = z1 * h1 + a1
        _, z2, a2 = self._gates("2", x, h1n)
        return h1n, z2 * h2 + a2

    def step_backward(self, x, prev, new, dnew):
        p = self.params
        (h1p, h2p), (h1n, _), (dh1n, dh2n) = prev, new, dnew
        z2 = np.ldexp(1.0, -self.shifts("2", x, h1n))
        z1 = np.ldexp(1.0, -self.shifts("1", x, h2p))
        dh2p, du2, dx2, dW2, dU2 = _gru_group_backward(p["W2"], p["U2"], x, h1n, h2p, 0.0, dh2n, z_fixed=z2)
        dh1p, du1, dx1, dW1, dU1 = _gru_group_backward(p["W1"], p["U1"], x, h2p, h1p, 0.0, dh1n + du2, z_fixed=z1)
        grads = {
            "W1": dW1,
            "U1": dU1,
            "Q1": np.zeros_like(p["Q1"]),
            "W2": dW2,
            "U2": dU2,
            "Q2": np.zeros_like(p["Q2"]),
        }
        return (dh1p, dh2p + du1), dx1 + dx2, grads


# -- non-reversible baselines --------------------------------------------------


class _Baseline(RecurrentCell):
    """Float cells trained with stored activations; their state is a float tuple."""

    reversible = False

    def zero_float_state(self, batch):
        return tuple(np.zeros((batch, self.hidden_size)) for _ in self.components)

    def init_state(self, batch, values=None, stored_units=0):
        if values is None:
            return self.zero_float_state(batch)
        if isinstance(values, dict):
            return tuple(values[k] for k in self.components)
        return tuple(values)

    def decode(self, state):
        return state

    def forward(self, x, state):
        return self.surrogate_step(x, state)

    def output(self, fstate):
        return fstate[0]

    def output_backward(self, dout):
        return (dout, *[np.zeros_like(dout) for _ in self.components[1:]])


class GRU(_Baseline):
    kind = "gru"
    components = ("h",)

    def param_shapes(self):
        n = self.input_size + self.hidden_size
        return {"W": (2 * self.hidden_size, n), "U": (self.hidden_size, n)}

    def surrogate_step(self, x, fstate):
        (h,) = fstate
        z, r, g, *_ = _gru_gates(self.params["W"], self.params["U"], x, h, 0.0, 2 * self.hidden_size)
        return (z * h + (1.0 - z) * g,)

    def step_backward(self, x, prev, new, dnew):
        (h,), (dh_new,) = prev, dnew
        dh, du, dx, dW, dU = _gru_group_backward(self.params["W"], self.params["U"], x, h, h, 0.0, dh_new)
        return (dh + du,), dx, {"W": dW, "U": dU}


class LSTM(_Baseline):
    kind = "lstm"
    components = ("h", "c")

    def param_shapes(self):
        n = self.input_size + self.hidden_size
        return {"W": (3 * self.hidden_size, n), "U": (self.hidden_size, n)}

    def surrogate_step(self, x, fstate):
        h, c = fstate
        f, i, o, _, g, *_ = _lstm_gates(self.params["W"], self.params["U"], x, h, 0.0)
        c_new = f * c + i * g
        return o * np.tanh(c_new), c_new

    def step_backward(self, x, prev, new, dnew):
        W, U = self.params["W"], self.params["U"]
        (h, c), (_, c_new), (dh_new, dc_new) = prev, new, dnew
        hs = self.hidden_size
        f, i, o, _, g, xa, _, _ = _lstm_gates(W, U, x, h, 0.0)
        tc = np.tanh(c_new)
        do = dh_new * tc
        dcn = dc_new + dh_new * o * (1.0 - tc * tc)
        da = np.concatenate([dcn * c * f * (1 - f), dcn * g * i * (1 - i), do * o * (1 - o)], axis=1)
        dgb = dcn * i * (1.0 - g * g)
        dxa = da @ W + dgb @ U
        e = x.shape[1]
        assert dxa.shape[1] == e + hs
        return (dxa[:, e:], dcn * f), dxa[:, :e], {"W": da.T @ xa, "U": dgb.T @ xa}


CELLS = {c.kind: c for c in (RevGRU, RevLSTM, NFRevGRU, DFRevGRU, GRU, LSTM)}


def make_cell(kind: str, input_size: int, hidden_size: int, **kw) -> RecurrentCell:
    try:
        cls = CELLS[kind]
    except KeyError:
        raise ValueError(f"unknown cell {kind!r}; choose from {sorted(CELLS)}") from None
    if cls is not DFRevGRU:
        kw.pop("max_bits", None)
    return cls(input_size, hidden_size, **kw)


def load_params(data: bytes) -> RecurrentCell:
    """Rebuild a cell from :meth:`RecurrentCell.params_to_bytes` output."""
    if data[:4] != RecurrentCell._MAGIC:
        raise ValueError("not a parameter checkpoint")
    (n,) = struct.unpack_from("<I", data, 4)
    head = json.loads(data[8 : 8 + n])
    kw = {"fmt": FixedFormat(head["R_H"], head["R_Z"], 32), "forget_floor": head["a"]}
    if head["cell"] == "df-revgru":
        kw["max_bits"] = (dict(head["matrices"])["Q1"][0] // (head["H"] // 2)) - 1
    cell = make_cell(head["cell"], head["E"], head["H"], **kw)
    off = 8 + n
    for name, shape in head["matrices"]:
        size = int(np.prod(shape)) * 8
        cell.params[name] = np.frombuffer(data[off : off + size], dtype="<f8").reshape(shape).astype(np.float64)
        off += size
    if off != len(data):
        raise ValueError("trailing bytes in parameter checkpoint")
    return cell


# state snapshot: magic, header length, JSON header, raw int64 values, then
# length-prefixed buffer snapshots in header order
_STATE_MAGIC = b"RVST"


def state_to_bytes(state: RevState) -> bytes:
    for name, buf in state.buffers.items():
        if not isinstance(buf, BufferTensor):
            raise TypeError(f"buffer {name!r} ({type(buf).__name__}) has no snapshot format")
    head = {
        "values": [[k, list(v.shape)] for k, v in state.values.items()],
        "buffers": list(state.buffers),
        "ideal_bits": state.ideal_bits,
    }
    hb = json.dumps(head).encode()
    parts = [_STATE_MAGIC, struct.pack("<I", len(hb)), hb]
    parts += [np.ascontiguousarray(v, dtype="<i8").tobytes() for v in state.values.values()]
    for buf in state.buffers.values():
        blob = buf.to_bytes()
        parts += [struct.pack("<Q", len(blob)), blob]
    return b"".join(parts)


def state_from_bytes(data: bytes) -> RevState:
    if data[:4] != _STATE_MAGIC:
        raise ValueError("not a state snapshot")
    (n,) = struct.unpack_from("<I", data, 4)
    head = json.loads(data[8 : 8 + n])
    off = 8 + n
    vals = {}
    for name, shape in head["values"]:
        size = int(np.prod(shape)) * 8
        vals[name] = np.frombuffer(data[off : off + size], dtype="<i8").reshape(shape).astype(np.int64)
        off += size
    bufs = {}
    for name in head["buffers"]:
        (size,) = struct.unpack_from("<Q", data, off)
        off += 8
        bufs[name] = BufferTensor.from_bytes(data[off : off + size])
        off += size
    if off != len(data):
        raise ValueError("trailing bytes in state snapshot")
    return RevState(vals, bufs, head["ideal_bits"])
