import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from revrnn.fixedpoint import (
    FixedFormat,
    FixedPoint,
    FixedPointOverflow,
    ForgetGate,
    bits_limit_to_floor,
    decode,
    dequantize,
    encode_gate,
    encode_hidden,
    fixed_add,
    fixed_sub,
    quantize,
    quantize_gate,
    restrict_forgetting,
)


def test_encode_hidden_basic_values():
    assert encode_hidden(0.0).raw == 0
    assert encode_hidden(1.0).raw == 8388608
    assert encode_hidden(-1.0).raw == -8388608


def test_encode_hidden_rounds_half_to_even():
    ulp = 2.0**-23
    assert encode_hidden(0.5 * ulp).raw == 0
    assert encode_hidden(1.5 * ulp).raw == 2
    assert encode_hidden(2.5 * ulp).raw == 2
    assert encode_hidden(-1.5 * ulp).raw == -2


def test_encode_hidden_error_bound_on_many_samples():
    rng = np.random.default_rng(0)
    xs = rng.uniform(-16, 16, 100_000)
    fmt = FixedFormat()
    err = np.abs(dequantize(quantize(xs, fmt), fmt) - xs)
    assert err.max() <= 2.0**-24
    # scalar and array paths agree
    for x in xs[:200]:
        assert encode_hidden(float(x)).raw == int(quantize(np.array([x]), fmt)[0])


@pytest.mark.parametrize("x", [256.0, -256.0, 1e9, float("inf")])
def test_encode_hidden_overflow(x):
    with pytest.raises(FixedPointOverflow):
        encode_hidden(x)


def test_encode_hidden_just_inside_range():
    assert encode_hidden(255.99).raw > 0


@given(st.integers(-(2**31) + 1, 2**31 - 1))
def test_multiples_of_ulp_round_trip_exactly(raw):
    x = raw / 2**23
    assert encode_hidden(x).raw == raw
    assert decode(encode_hidden(x)) == x


def test_encode_gate_examples():
    assert encode_gate(0.5).raw == 512
    assert encode_gate(1e-9).raw == 1
    assert encode_gate(0.999999).raw == 1023
    assert encode_gate(0.0).raw == 1
    assert encode_gate(1.0).raw == 1023


@given(st.floats(0, 1), st.floats(0, 1))
def test_encode_gate_monotone_and_in_range(p, q):
    a, b = encode_gate(min(p, q)), encode_gate(max(p, q))
    assert 1 <= a.raw <= b.raw <= 1023


def test_quantize_gate_matches_scalar():
    ps = np.linspace(0, 1, 2049)
    vec = quantize_gate(ps, 10)
    assert vec.min() == 1 and vec.max() == 1023
    assert [encode_gate(float(p)).raw for p in ps] == vec.tolist()


def test_forget_gate_rejects_out_of_range():
    with pytest.raises(ValueError):
        ForgetGate(0)
    with pytest.raises(ValueError):
        ForgetGate(1024, 10)
    assert ForgetGate(1023).value == pytest.approx(1023 / 1024)


def test_restrict_forgetting():
    assert restrict_forgetting(0.2, 0.5) == pytest.approx(0.6)
    assert restrict_forgetting(0.37, 0.0) == 0.37
    for bad in (-0.1, 1.0, 2.0):
        with pytest.raises(ValueError):
            restrict_forgetting(0.5, bad)


@given(st.floats(1e-12, 1 - 1e-12), st.integers(1, 5))
def test_restricted_gates_forget_at_most_the_limit(p, bits):
    a = bits_limit_to_floor(bits)
    out = restrict_forgetting(p, a)
    assert a <= out <= 1.0
    assert encode_gate(out).raw >= 2 ** (10 - bits)


def test_bits_limit_to_floor():
    assert bits_limit_to_floor(None) == 0.0
    assert bits_limit_to_floor(1) == 0.5
    assert bits_limit_to_floor(2) == 0.25
    with pytest.raises(ValueError):
        bits_limit_to_floor(0)


def test_fixed_add_sub_examples():
    one, minus = encode_hidden(1.0), encode_hidden(-1.0)
    assert fixed_add(one, minus).raw == 0
    near = FixedPoint(2**31 - 1)
    with pytest.raises(FixedPointOverflow):
        fixed_add(near, FixedPoint(1))
    with pytest.raises(ValueError):
        fixed_add(FixedPoint(1, 23), FixedPoint(1, 22))


def test_add_then_sub_is_identity_on_many_pairs():
    rng = np.random.default_rng(1)
    a = rng.integers(-(2**30), 2**30, 100_000)
    b = rng.integers(-(2**30), 2**30, 100_000)
    for x, y in zip(a[:500], b[:500]):
        fa, fb = FixedPoint(int(x)), FixedPoint(int(y))
        assert fixed_sub(fixed_add(fa, fb), fb) == fa
    assert np.array_equal((a + b) - b, a)


def test_format_validation():
    with pytest.raises(ValueError):
        FixedFormat(10, 10)
    with pytest.raises(ValueError):
        FixedFormat(23, 0)
    with pytest.raises(ValueError):
        FixedFormat(23, 10, 16)
    fmt = FixedFormat()
    assert fmt.value_limit == 256.0
    assert fmt.widened().width == 64


def test_array_quantize_overflow_is_reported():
    with pytest.raises(FixedPointOverflow):
        quantize(np.array([0.0, 300.0]), FixedFormat())
