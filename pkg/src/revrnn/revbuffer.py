"""Exactly reversible multiplication of fixed-point values by forget gates.

The forward step multiplies ``h = raw / 2**rh`` by ``z = zr / 2**rz`` and
pushes the information the multiplication destroys onto an integer buffer;
the reverse step pops it back.  Three buffer realizations share one interface
(``push(h, z) -> h'`` and ``pop(h', z) -> h``):

* :class:`BigBuffer` keeps one unbounded Python integer per unit (reference).
* :class:`LimbBuffer` keeps a per-unit list of 64-bit limbs.
* :class:`BufferTensor` stores limbs as a ``(D, *shape)`` uint64 array whose
  limb count is shared across every position, so one overflowing position
  appends a limb everywhere.

Signed hidden values use floored division with non-negative remainders, so
``h == (h // 2**rz) * 2**rz + h % 2**rz`` holds for negative ``h`` too.
"""

from __future__ import annotations

import math
import struct
from typing import Iterable

import numpy as np

from .fixedpoint import DEFAULT_RH, DEFAULT_RZ, FixedPoint, ForgetGate

LIMB_BITS = 64
NAIVE_BITS = 32


class BufferUnderflow(RuntimeError):
    """Reverse was requested more times than forward."""


class BufferCorruption(RuntimeError):
    """Buffer contents are inconsistent with the requested reversal."""


# -- single-step transcripts -------------------------------------------------


def forward_transcript(h: int, z: int, b: int, rz: int) -> tuple[int, int]:
    """Algorithm 1 on plain Python integers, one line per step."""
    b = b * 2**rz
    b = b + h % 2**rz
    h = h // 2**rz
    h = h * z
    h = h + b % z
    b = b // z
    return h, b


def reverse_transcript(h: int, z: int, b: int, rz: int) -> tuple[int, int]:
    b = b * z
    b = b + h % z
    h = h // z
    h = h * 2**rz
    h = h + b % 2**rz
    b = b // 2**rz
    return h, b


def _limb_forward(h: np.ndarray, z: np.ndarray, b: np.ndarray, rz: int) -> tuple[np.ndarray, np.ndarray]:
    # b is uint64 and already below 2**(64 - rz), so the shift cannot overflow.
    mask = np.int64(2**rz - 1)
    zu = z.astype(np.uint64)
    b = (b << np.uint64(rz)) | (h & mask).astype(np.uint64)
    h = (h >> np.int64(rz)) * z + (b % zu).astype(np.int64)
    return h, b // zu


def _limb_reverse(h: np.ndarray, z: np.ndarray, b: np.ndarray, rz: int) -> tuple[np.ndarray, np.ndarray]:
    zu = z.astype(np.uint64)
    b = b * zu + (h % z).astype(np.uint64)
    h = (h // z << np.int64(rz)) + (b & np.uint64(2**rz - 1)).astype(np.int64)
    return h, b >> np.uint64(rz)


def _as_raw(h) -> np.ndarray:
    return np.asarray(h, dtype=np.int64)


# -- buffers -----------------------------------------------------------------


class _StepCounter:
    """Forward/reverse step bookkeeping shared by the buffer classes."""

    def __init__(self):
        self.steps = 0

    def _advance(self):
        self.steps += 1

    def _retreat(self):
        if self.steps == 0:
            raise BufferUnderflow("reverse requested on a buffer with no recorded steps")
        self.steps -= 1


class BigBuffer(_StepCounter):
    """Unbounded integer buffer, one Python int per position."""

    def __init__(self, shape=(), rz: int = DEFAULT_RZ):
        super().__init__()
        self.shape = tuple(shape)
        self.rz = rz
        self.value = np.zeros(self.shape, dtype=object)
        self.value[...] = 0

    def push(self, h, z) -> np.ndarray:
        h_obj = _as_raw(h).astype(object)
        z_obj = _as_raw(z).astype(object)
        h_new, self.value = forward_transcript(h_obj, z_obj, self.value, self.rz)
        self._advance()
        return np.asarray(h_new, dtype=object).astype(np.int64)

    def pop(self, h, z) -> np.ndarray:
        self._retreat()
        h_obj = _as_raw(h).astype(object)
        z_obj = _as_raw(z).astype(object)
        h_old, self.value = reverse_transcript(h_obj, z_obj, self.value, self.rz)
        return np.asarray(h_old, dtype=object).astype(np.int64)

    def bit_lengths(self) -> np.ndarray:
        return np.vectorize(lambda v: int(v).bit_length(), otypes=[np.int64])(self.value)

    def measured_bits(self) -> int:
        return int(self.bit_lengths().sum())

    def copy(self) -> "BigBuffer":
        out = BigBuffer(self.shape, self.rz)
        out.value = self.value.copy()
        out.steps = self.steps
        return out

    def state_equal(self, other: "BigBuffer") -> bool:
        return self.steps == other.steps and bool(np.all(self.value == other.value))


class LimbBuffer(_StepCounter):
    """Per-unit list of 64-bit limbs ``(B_0, ..., B_D)``; the last is active."""

    def __init__(self, rz: int = DEFAULT_RZ):
        super().__init__()
        self.rz = rz
        self.limbs: list[int] = []
        self.append_steps: list[int] = []

    @property
    def threshold(self) -> int:
        return 2 ** (LIMB_BITS - self.rz)

    def guard(self) -> bool:
        """Append a fresh zero limb if the active one could overflow."""
        if not self.limbs or self.limbs[-1] >= self.threshold:
            self.limbs.append(0)
            self.append_steps.append(self.steps)
            return True
        return False

    def push(self, h: int, z: int) -> int:
        self.guard()
        h, b = forward_transcript(int(h), int(z), self.limbs[-1], self.rz)
        assert 0 <= b < 2**LIMB_BITS
        self.limbs[-1] = b
        self._advance()
        return h

    def pop(self, h: int, z: int) -> int:
        if not self.limbs:
            raise BufferUnderflow("reverse requested on an empty limb sequence")
        self._retreat()
        h, b = reverse_transcript(int(h), int(z), self.limbs[-1], self.rz)
        if not 0 <= b < 2**LIMB_BITS:
            raise BufferCorruption("limb left 64-bit range during reversal")
        self.limbs[-1] = b
        if self.append_steps and self.append_steps[-1] == self.steps:
            if b != 0:
                raise BufferCorruption(f"limb opened at step {self.steps} is not empty on reversal")
            self.limbs.pop()
            self.append_steps.pop()
        return h

    @property
    def n_limbs(self) -> int:
        return len(self.limbs)

    def measured_bits(self) -> int:
        return LIMB_BITS * len(self.limbs)


class BufferTensor(_StepCounter):
    """Limb buffers for a whole ``(N, H)`` block; logically a ``(D, N, H)`` uint64 tensor."""

    def __init__(self, shape, rz: int = DEFAULT_RZ, rh: int = DEFAULT_RH):
        super().__init__()
        self.shape = tuple(shape)
        self.rz = rz
        self.rh = rh
        self.past: list[np.ndarray] = []
        self.active: np.ndarray | None = None
        self.append_steps: list[int] = []

    @property
    def threshold(self) -> np.uint64:
        return np.uint64(2 ** (LIMB_BITS - self.rz))

    @property
    def n_limbs(self) -> int:
        return len(self.append_steps)

    def guard(self) -> bool:
        if self.active is not None and not np.any(self.active >= self.threshold):
            return False
        if self.active is not None:
            self.past.append(self.active)
        self.active = np.zeros(self.shape, dtype=np.uint64)
        self.append_steps.append(self.steps)
        return True

    def push(self, h, z) -> np.ndarray:
        self.guard()
        h_new, self.active = _limb_forward(_as_raw(h), _as_raw(z), self.active, self.rz)
        self._advance()
        return h_new

    def pop(self, h, z) -> np.ndarray:
        if self.active is None:
            raise BufferUnderflow("reverse requested on an empty limb sequence")
        self._retreat()
        h_old, self.active = _limb_reverse(_as_raw(h), _as_raw(z), self.active, self.rz)
        if self.append_steps[-1] == self.steps:
            if np.any(self.active != 0):
                bad = tuple(int(i) for i in np.argwhere(self.active != 0)[0])
                raise BufferCorruption(f"limb opened at step {self.steps} is not empty at position {bad}")
            self.append_steps.pop()
            self.active = self.past.pop() if self.past else None
        return h_old

    def limb_array(self) -> np.ndarray:
        """All limbs, oldest first, with the active limb last."""
        if self.active is None:
            return np.zeros((0,) + self.shape, dtype=np.uint64)
        return np.stack(self.past + [self.active])

    def measured_bits(self) -> int:
        return measured_bits(self)

    def copy(self) -> "BufferTensor":
        out = BufferTensor(self.shape, self.rz, self.rh)
        out.past = [x.copy() for x in self.past]
        out.active = None if self.active is None else self.active.copy()
        out.append_steps = list(self.append_steps)
        out.steps = self.steps
        return out

    def state_equal(self, other: "BufferTensor") -> bool:
        return (
            self.steps == other.steps
            and self.append_steps == other.append_steps
            and np.array_equal(self.limb_array(), other.limb_array())
        )

    def flip_bit(self, limb: int, index: tuple, bit: int) -> None:
        """Corrupt one stored bit; used by fault-injection checks."""
        target = self.active if limb == self.n_limbs - 1 else self.past[limb]
        target[tuple(index)] ^= np.uint64(1 << bit)

    # -- serialization ----------------------------------------------------

    _MAGIC = b"RVBT"
    _HEADER = struct.Struct("<4sIIIIIIQ")

    def to_bytes(self) -> bytes:
        if len(self.shape) != 2:
            raise ValueError("snapshots are defined for (N, H) buffers")
        n, h = self.shape
        limbs = self.limb_array()
        head = self._HEADER.pack(
            self._MAGIC, n, h, self.n_limbs, self.rh, self.rz, len(self.append_steps), self.steps
        )
        sched = struct.pack(f"<{len(self.append_steps)}Q", *self.append_steps)
        return head + sched + limbs.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BufferTensor":
        magic, n, h, d, rh, rz, n_sched, steps = cls._HEADER.unpack_from(data, 0)
        if magic != cls._MAGIC:
            raise ValueError("not a buffer snapshot")
        off = cls._HEADER.size
        sched = list(struct.unpack_from(f"<{n_sched}Q", data, off))
        off += 8 * n_sched
        expected = off + 8 * d * n * h
        if len(data) != expected:
            raise ValueError(f"snapshot length {len(data)} does not match header (expected {expected})")
        limbs = np.frombuffer(data, dtype="<u8", offset=off).astype(np.uint64).reshape(d, n, h)
        if len(sched) != d:
            raise ValueError("append schedule length does not match limb count")
        out = cls((n, h), rz=rz, rh=rh)
        out.steps = steps
        out.append_steps = sched
        out.past = [limbs[i].copy() for i in range(d - 1)]
        out.active = limbs[-1].copy() if d else None
        return out


def limb_guard(buf):
    """Apply the overflow guard to a :class:`LimbBuffer` or :class:`BufferTensor`."""
    buf.guard()
    return buf


# -- scalar API ---------------------------------------------------------------


def rev_mul_forward(h: FixedPoint, z: ForgetGate, buf: BigBuffer | LimbBuffer):
    """Multiply ``h`` by ``z``, storing lost bits in ``buf``; returns ``(h', buf)``."""
    if isinstance(buf, BigBuffer):
        raw = int(buf.push(np.int64(h.raw), np.int64(z.raw)))
    else:
        raw = buf.push(h.raw, z.raw)
    return FixedPoint(raw, h.frac_bits, h.width), buf


def rev_mul_reverse(h: FixedPoint, z: ForgetGate, buf: BigBuffer | LimbBuffer):
    if isinstance(buf, BigBuffer):
        raw = int(buf.pop(np.int64(h.raw), np.int64(z.raw)))
    else:
        raw = buf.pop(h.raw, z.raw)
    return FixedPoint(raw, h.frac_bits, h.width), buf


# -- discrete forgetting bit stack -------------------------------------------


class BitStack(_StepCounter):
    """Fixed-width bit pushes onto vectorized 64-bit limbs.

    Each push stores exactly ``nbits`` bits per position regardless of how
    many are meaningful, which keeps every position's stack the same height.
    """

    def __init__(self, shape, nbits: int):
        super().__init__()
        if not 1 <= nbits <= 32:
            raise ValueError("bit-stack pushes must be between 1 and 32 bits wide")
        self.shape = tuple(shape)
        self.nbits = nbits
        self.limbs: list[np.ndarray] = []
        self.append_steps: list[int] = []

    def push(self, bits: np.ndarray) -> None:
        bits = np.asarray(bits, dtype=np.int64)
        if np.any(bits < 0) or np.any(bits >= 2**self.nbits):
            raise ValueError("pushed values do not fit the stack width")
        if not self.limbs or np.any(self.limbs[-1] >= np.uint64(2 ** (LIMB_BITS - self.nbits))):
            self.limbs.append(np.zeros(self.shape, dtype=np.uint64))
            self.append_steps.append(self.steps)
        self.limbs[-1] = (self.limbs[-1] << np.uint64(self.nbits)) | bits.astype(np.uint64)
        self._advance()

    def pop(self) -> np.ndarray:
        if not self.limbs:
            raise BufferUnderflow("pop from an empty bit stack")
        self._retreat()
        top = self.limbs[-1]
        out = (top & np.uint64(2**self.nbits - 1)).astype(np.int64)
        self.limbs[-1] = top >> np.uint64(self.nbits)
        if self.append_steps[-1] == self.steps:
            if np.any(self.limbs[-1] != 0):
                raise BufferCorruption("bit-stack limb not empty when closing it")
            self.limbs.pop()
            self.append_steps.pop()
        return out

    @property
    def n_limbs(self) -> int:
        return len(self.limbs)

    def measured_bits(self) -> int:
        return LIMB_BITS * self.n_limbs * int(np.prod(self.shape, dtype=np.int64))

    def copy(self) -> "BitStack":
        out = BitStack(self.shape, self.nbits)
        out.limbs = [x.copy() for x in self.limbs]
        out.append_steps = list(self.append_steps)
        out.steps = self.steps
        return out

    def state_equal(self, other: "BitStack") -> bool:
        return (
            self.steps == other.steps
            and self.append_steps == other.append_steps
            and len(self.limbs) == len(other.limbs)
            and all(np.array_equal(a, b) for a, b in zip(self.limbs, other.limbs))
        )


# -- full-precision slices (attention) ----------------------------------------


def lossy_mul(h: np.ndarray, z: np.ndarray, rz: int) -> np.ndarray:
    """Round-half-even ``h * z / 2**rz`` without keeping the lost bits."""
    prod = _as_raw(h) * _as_raw(z)
    q = prod >> np.int64(rz)
    r = prod & np.int64(2**rz - 1)
    half = 2 ** (rz - 1)
    up = (r > half) | ((r == half) & (q & 1 == 1))
    return q + up


class SplitBuffer(_StepCounter):
    """Columns in ``stored`` keep their full value history; the rest use limbs.

    Stored columns are multiplied lossily and restored from history, which is
    how hidden-state slices kept for attention avoid the buffer entirely.
    """

    def __init__(self, shape, stored: np.ndarray, rz: int = DEFAULT_RZ, rh: int = DEFAULT_RH):
        super().__init__()
        self.shape = tuple(shape)
        self.stored = np.asarray(stored, dtype=bool)
        if self.stored.shape != (self.shape[-1],):
            raise ValueError("stored-column mask must match the unit dimension")
        self.rz = rz
        n_buf = int((~self.stored).sum())
        self.tensor = BufferTensor(self.shape[:-1] + (n_buf,), rz=rz, rh=rh)
        self.history: list[np.ndarray] = []

    def push(self, h, z) -> np.ndarray:
        h, z = _as_raw(h), _as_raw(z)
        out = np.empty_like(h)
        keep = self.stored
        out[..., ~keep] = self.tensor.push(h[..., ~keep], z[..., ~keep])
        out[..., keep] = lossy_mul(h[..., keep], z[..., keep], self.rz)
        self.history.append(h[..., keep].copy())
        self._advance()
        return out

    def pop(self, h, z) -> np.ndarray:
        if not self.history:
            raise BufferUnderflow("no stored slice history to restore")
        self._retreat()
        h, z = _as_raw(h), _as_raw(z)
        out = np.empty_like(h)
        out[..., ~self.stored] = self.tensor.pop(h[..., ~self.stored], z[..., ~self.stored])
        prev = self.history.pop()
        if not np.array_equal(lossy_mul(prev, z[..., self.stored], self.rz), h[..., self.stored]):
            raise BufferCorruption("stored slice is inconsistent with the current state")
        out[..., self.stored] = prev
        return out

    def stored_bits(self) -> int:
        return sum(NAIVE_BITS * x.size for x in self.history)

    def buffer_bits(self) -> int:
        return self.tensor.measured_bits()

    def measured_bits(self) -> int:
        return self.stored_bits() + self.buffer_bits()

    def copy(self) -> "SplitBuffer":
        out = SplitBuffer(self.shape, self.stored, self.rz, self.tensor.rh)
        out.tensor = self.tensor.copy()
        out.history = [x.copy() for x in self.history]
        out.steps = self.steps
        return out

    def state_equal(self, other: "SplitBuffer") -> bool:
        return (
            self.steps == other.steps
            and self.tensor.state_equal(other.tensor)
            and len(self.history) == len(other.history)
            and all(np.array_equal(a, b) for a, b in zip(self.history, other.history))
        )


# -- accounting ---------------------------------------------------------------


def ideal_bits_per_step(z, rz: int | None = None):
    """Bits destroyed by multiplying by ``z``: ``rz - log2(z*)``.

    Accepts a :class:`ForgetGate` or raw numerators (then ``rz`` is required).
    """
    if isinstance(z, ForgetGate):
        return z.frac_bits - math.log2(z.raw)
    if rz is None:
        raise ValueError("rz is required for raw gate numerators")
    return rz - np.log2(np.asarray(z, dtype=np.float64))


def ideal_total_bits(gate_history: Iterable, rz: int = DEFAULT_RZ) -> float:
    """Sum of per-step ideal costs over every gate numerator in the history."""
    total = 0.0
    for gates in gate_history:
        if isinstance(gates, ForgetGate):
            total += ideal_bits_per_step(gates)
        else:
            total += float(np.sum(ideal_bits_per_step(gates, rz)))
    return total


def measured_bits(buf) -> int:
    """Bits of limb storage held by ``buf``: ``64 * D * N * H`` for a tensor."""
    if isinstance(buf, BufferTensor):
        return LIMB_BITS * buf.n_limbs * int(np.prod(buf.shape, dtype=np.int64))
    return buf.measured_bits()


def savings_ratio(T: int, H: int, measured: int, N: int = 1) -> float:
    """Naive activation storage (32 bits per unit per step) over ``measured``.

    Returns ``inf`` when nothing was stored.
    """
    if measured == 0:
        return math.inf
    return NAIVE_BITS * T * H * N / measured
