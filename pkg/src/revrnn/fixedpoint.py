"""Fixed-point hidden values and quantized forget gates.

A hidden value ``h`` is stored as a signed integer ``raw`` with an implied
radix point: ``h = raw / 2**frac_bits``.  A forget gate ``z`` is stored as an
unsigned integer ``raw`` in ``[1, 2**frac_bits - 1]`` so that ``0 < z < 1``.

Scalar types (:class:`FixedPoint`, :class:`ForgetGate`) are provided for the
single-unit API; the array helpers at the bottom of the module are what the
recurrent cells use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_RH = 23
DEFAULT_RZ = 10
DEFAULT_WIDTH = 32


class FixedPointOverflow(ArithmeticError):
    """A fixed-point value left its representable range."""


def _check_formats(rh: int, rz: int) -> None:
    if rz >= rh:
        raise ValueError(f"gate fraction bits ({rz}) must be smaller than hidden fraction bits ({rh})")
    if rz < 1:
        raise ValueError("gate fraction bits must be positive")


@dataclass(frozen=True)
class FixedFormat:
    """Radix positions and storage width shared by a model's fixed-point values."""

    rh: int = DEFAULT_RH
    rz: int = DEFAULT_RZ
    width: int = DEFAULT_WIDTH

    def __post_init__(self):
        _check_formats(self.rh, self.rz)
        if self.width not in (32, 64):
            raise ValueError("storage width must be 32 or 64 bits")
        if self.rh >= self.width - 1:
            raise ValueError("no integer bits left for the hidden state")

    @property
    def _magnitude_bits(self) -> int:
        # 64-bit storage keeps a guard bit so int64 sums of in-range values cannot wrap.
        return self.width - 1 if self.width == 32 else self.width - 2

    @property
    def raw_max(self) -> int:
        return 2**self._magnitude_bits - 1

    @property
    def raw_min(self) -> int:
        return -(2**self._magnitude_bits)

    @property
    def value_limit(self) -> float:
        """Exclusive bound on ``|h|``."""
        return float(2 ** (self._magnitude_bits - self.rh))

    def widened(self) -> "FixedFormat":
        return FixedFormat(self.rh, self.rz, 64)


@dataclass(frozen=True)
class FixedPoint:
    raw: int
    frac_bits: int = DEFAULT_RH
    width: int = DEFAULT_WIDTH

    def __post_init__(self):
        lo, hi = -(2 ** (self.width - 1)), 2 ** (self.width - 1) - 1
        if not lo <= self.raw <= hi:
            raise FixedPointOverflow(f"raw value {self.raw} outside {self.width}-bit range")

    @property
    def value(self) -> float:
        return self.raw / 2**self.frac_bits

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class ForgetGate:
    raw: int
    frac_bits: int = DEFAULT_RZ

    def __post_init__(self):
        if not 1 <= self.raw <= 2**self.frac_bits - 1:
            raise ValueError(f"gate numerator {self.raw} outside [1, {2**self.frac_bits - 1}]")

    @property
    def value(self) -> float:
        return self.raw / 2**self.frac_bits


def _round_half_even_scalar(x: float) -> int:
    # Python's round() is half-even and exact for floats.
    return int(round(x))


def encode_hidden(x: float, rh: int = DEFAULT_RH, width: int = DEFAULT_WIDTH) -> FixedPoint:
    limit = 2 ** (width - 1 - rh)
    if not abs(x) < limit:
        raise FixedPointOverflow(f"|{x}| is not below {limit}")
    return FixedPoint(_round_half_even_scalar(x * 2**rh), rh, width)


def decode(h: FixedPoint) -> float:
    return h.value


def encode_gate(p: float, rz: int = DEFAULT_RZ) -> ForgetGate:
    raw = _round_half_even_scalar(p * 2**rz)
    return ForgetGate(min(max(raw, 1), 2**rz - 1), rz)


def restrict_forgetting(p, a: float):
    """Map ``p`` from ``(0, 1)`` into ``(a, 1)``; works on scalars and arrays."""
    if not 0.0 <= a < 1.0:
        raise ValueError(f"forget floor must lie in [0, 1), got {a}")
    return (1.0 - a) * p + a


def bits_limit_to_floor(bits: int | None) -> float:
    """Forget floor that caps forgetting at ``bits`` bits per unit per step."""
    if bits is None:
        return 0.0
    if bits < 1:
        raise ValueError("bits limit must be at least 1")
    return 2.0 ** (-bits)


def fixed_add(a: FixedPoint, b: FixedPoint) -> FixedPoint:
    if a.frac_bits != b.frac_bits:
        raise ValueError("operands use different radix points")
    return FixedPoint(a.raw + b.raw, a.frac_bits, max(a.width, b.width))


def fixed_sub(a: FixedPoint, b: FixedPoint) -> FixedPoint:
    if a.frac_bits != b.frac_bits:
        raise ValueError("operands use different radix points")
    return FixedPoint(a.raw - b.raw, a.frac_bits, max(a.width, b.width))


# -- array helpers ----------------------------------------------------------


def check_range(raw: np.ndarray, fmt: FixedFormat, what: str = "hidden state") -> np.ndarray:
    if raw.size and (raw.max() > fmt.raw_max or raw.min() < fmt.raw_min):
        bad = np.flatnonzero((raw > fmt.raw_max) | (raw < fmt.raw_min))[0]
        raise FixedPointOverflow(
            f"{what} overflowed {fmt.width}-bit storage at flat index {bad} "
            f"(|h| must stay below {fmt.value_limit:g})"
        )
    return raw


def quantize(x: np.ndarray, fmt: FixedFormat) -> np.ndarray:
    """Round-half-even ``x * 2**rh`` to int64 raw values, range-checked."""
    scaled = np.rint(np.asarray(x, dtype=np.float64) * 2.0**fmt.rh)
    if scaled.size and np.max(np.abs(scaled)) >= 2.0**63:
        raise FixedPointOverflow(f"value too large for {fmt.width}-bit fixed point")
    return check_range(scaled.astype(np.int64), fmt)


def dequantize(raw: np.ndarray, fmt: FixedFormat) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / 2.0**fmt.rh


def quantize_gate(p: np.ndarray, rz: int) -> np.ndarray:
    raw = np.rint(np.asarray(p, dtype=np.float64) * 2.0**rz)
    return np.clip(raw, 1, 2**rz - 1).astype(np.int64)


def add_raw(a: np.ndarray, b: np.ndarray, fmt: FixedFormat) -> np.ndarray:
    return check_range(a + b, fmt)


def sub_raw(a: np.ndarray, b: np.ndarray, fmt: FixedFormat) -> np.ndarray:
    return check_range(a - b, fmt)
