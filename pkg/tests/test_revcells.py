import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from revrnn.fixedpoint import FixedFormat, quantize
from revrnn.revbuffer import BufferUnderflow
from revrnn.revcells import (
    CELLS,
    DFRevGRU,
    RevState,
    load_params,
    make_cell,
    state_from_bytes,
    state_to_bytes,
)

REVERSIBLE = ["revgru", "revlstm", "nf-revgru", "df-revgru"]


def random_state(cell, N, rng, scale=0.9):
    vals = {k: rng.uniform(-scale, scale, (N, cell.group_size)) for k in cell.components}
    return cell.encode_state(vals)


def run(cell, xs, state):
    for x in xs:
        state = cell.forward(x, state)
    return state


def unrun(cell, xs, state):
    for x in reversed(xs):
        state = cell.reverse(x, state)
    return state


@pytest.mark.parametrize("kind", REVERSIBLE)
@pytest.mark.parametrize("mode", ["limb", "big"])
def test_forward_then_reverse_is_identity(kind, mode):
    rng = np.random.default_rng(0)
    cell = make_cell(kind, 8, 8, buffer_mode=mode, seed=3)
    xs = list(rng.normal(size=(50, 3, 8)))
    s0 = random_state(cell, 3, rng)
    start = s0.snapshot()
    s = unrun(cell, xs, run(cell, xs, s0))
    assert s.values_equal(start)
    assert s.measured_bits() == 0
    assert s.ideal_bits == pytest.approx(0.0, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(REVERSIBLE), st.integers(0, 2**32 - 1), st.integers(1, 30), st.floats(0, 0.9))
def test_reversal_property(kind, seed, T, floor):
    rng = np.random.default_rng(seed)
    cell = make_cell(kind, 5, 6, seed=seed, forget_floor=floor)
    xs = list(rng.normal(size=(T, 2, 5)))
    s0 = random_state(cell, 2, rng)
    start = s0.snapshot()
    assert unrun(cell, xs, run(cell, xs, s0)).values_equal(start)


def test_long_horizon_recovery():
    rng = np.random.default_rng(1)
    cell = make_cell("revgru", 8, 64, seed=1)
    xs = list(rng.normal(size=(1000, 1, 8)))
    s0 = random_state(cell, 1, rng)
    start = s0.snapshot()
    s = run(cell, xs, s0)
    assert max(b.n_limbs for b in s.buffers.values()) > 1
    assert unrun(cell, xs, s).values_equal(start)


def zero_cell(kind, E=4, H=6):
    cell = make_cell(kind, E, H)
    for k in cell.params:
        cell.params[k][...] = 0.0
    return cell


def test_zero_weight_revgru_halves_and_costs_one_bit():
    cell = zero_cell("revgru")
    rng = np.random.default_rng(2)
    s = random_state(cell, 2, rng)
    x = np.zeros((2, 4))
    prev = s.snapshot()
    for t in range(1, 21):
        s = cell.forward(x, s)
        for k in ("h1", "h2"):
            # within the noise bound of an exact halving
            assert np.all(np.abs(2 * s.values[k] - prev[k]) <= 2 * 2**10)
        assert s.ideal_bits == t * 2 * 6
        prev = s.snapshot()
    back = cell.reverse(x, s)
    assert np.all(np.abs(back.values["h1"] - 2 * prev["h1"]) <= 2 * 2**10)


def test_zero_weight_revlstm():
    cell = zero_cell("revlstm")
    s = random_state(cell, 2, np.random.default_rng(3))
    c0, h0 = cell.decode(s)[2], cell.decode(s)[0]
    s = cell.forward(np.zeros((2, 4)), s)
    h1, _, c1, _ = cell.decode(s)
    assert np.allclose(c1, 0.5 * c0, atol=2**-12)
    assert np.allclose(h1, 0.5 * h0 + 0.5 * np.tanh(c1), atol=2**-12)
    # c and h buffers each cost one bit per unit per group
    assert s.ideal_bits == 4 * 2 * 3


def test_zero_weight_nf_keeps_state():
    cell = zero_cell("nf-revgru")
    s = random_state(cell, 2, np.random.default_rng(4))
    start = s.snapshot()
    for _ in range(30):
        s = cell.forward(np.zeros((2, 4)), s)
    assert s.values_equal(start)


def test_nf_stores_nothing_and_uses_wide_words():
    rng = np.random.default_rng(5)
    cell = make_cell("nf-revgru", 4, 8, seed=5)
    assert cell.fmt.width == 64
    s = random_state(cell, 2, rng)
    assert s.buffers == {}
    s = run(cell, list(rng.normal(size=(50, 2, 4))), s)
    assert s.measured_bits() == 0 and s.ideal_bits == 0


def test_forget_floor_bounds_gates():
    rng = np.random.default_rng(6)
    cell = make_cell("revgru", 4, 8, seed=6, forget_floor=0.5)
    cell.params["W1"] *= 20
    cell.params["W2"] *= 20
    s = random_state(cell, 4, rng)
    T = 40
    s = run(cell, list(rng.normal(size=(T, 4, 4)) * 5), s)
    # each step at most 1 bit per unit: every quantized gate is >= 512
    assert s.ideal_bits <= T * 4 * 8 + 1e-9
    z, _ = cell._gates("1", rng.normal(size=(50, 4)) * 5, rng.normal(size=(50, 4)))
    from revrnn.fixedpoint import quantize_gate

    assert quantize_gate(z, 10).min() >= 512


def test_df_zero_shift_pushes_zero_bits():
    cell = DFRevGRU(4, 6, max_bits=2)
    cell.params["Q1"][...] = 0.0
    cell.params["Q2"][...] = 0.0  # argmax of equal scores selects k=0
    rng = np.random.default_rng(7)
    s = random_state(cell, 2, rng)
    x = rng.normal(size=(2, 4))
    assert np.all(cell.shifts("1", x, rng.normal(size=(2, 3))) == 0)
    s1 = cell.forward(x, s.copy())
    assert s1.ideal_bits == 0
    stack = s1.buffers["h1"]
    assert stack.steps == 1 and np.all(stack.limbs[-1] == 0)


def test_df_single_bit_recovered():
    cell = DFRevGRU(2, 2, max_bits=1)
    for k in cell.params:
        cell.params[k][...] = 0.0
    cell.params["Q1"][1, :] = 1.0  # score for k=1 wins on positive inputs
    s = cell.init_state(1, {"h1": np.array([[7]]), "h2": np.array([[0]])})
    x = np.ones((1, 2))
    s1 = cell.forward(x, s)
    assert s1.values["h1"][0, 0] == 3
    back = cell.reverse(x, s1)
    assert back.values["h1"][0, 0] == 7


def test_df_random_negative_values_round_trip():
    rng = np.random.default_rng(8)
    cell = DFRevGRU(3, 8, max_bits=3, seed=8)
    cell.params["Q1"] *= 10
    cell.params["Q2"] *= 10
    s = cell.init_state(4, {k: rng.integers(-(2**30), 2**30, (4, 4)) for k in ("h1", "h2")})
    start = s.snapshot()
    xs = list(rng.normal(size=(100, 4, 3)))
    s = run(cell, xs, s)
    assert s.ideal_bits > 0
    assert unrun(cell, xs, s).values_equal(start)


def test_reverse_underflow():
    cell = make_cell("revgru", 2, 4)
    s = cell.init_state(1)
    with pytest.raises(BufferUnderflow):
        cell.reverse(np.zeros((1, 2)), s)


def test_determinism():
    rng = np.random.default_rng(9)
    cell = make_cell("revlstm", 5, 8, seed=9)
    xs = list(rng.normal(size=(20, 3, 5)))
    s0 = random_state(cell, 3, rng)
    a = run(cell, xs, s0.copy())
    b = run(cell, xs, s0.copy())
    assert a.equals(b)


def test_params_round_trip():
    for kind in CELLS:
        cell = make_cell(kind, 3, 6, seed=2, forget_floor=0.25 if kind in ("revgru", "revlstm") else 0.0)
        back = load_params(cell.params_to_bytes())
        assert type(back) is type(cell)
        assert back.forget_floor == cell.forget_floor
        assert all(np.array_equal(back.params[k], cell.params[k]) for k in cell.params)
    with pytest.raises(ValueError):
        load_params(b"nope")
    with pytest.raises(ValueError):
        load_params(make_cell("revgru", 3, 6).params_to_bytes() + b"x")


def test_state_snapshot_resumes_mid_sequence():
    rng = np.random.default_rng(10)
    cell = make_cell("revlstm", 4, 6, seed=10)
    xs = list(rng.normal(size=(30, 2, 4)))
    s0 = random_state(cell, 2, rng)
    start = s0.snapshot()
    s = run(cell, xs, s0)
    restored = state_from_bytes(state_to_bytes(s))
    assert restored.equals(s)
    assert unrun(cell, xs, restored).values_equal(start)
    with pytest.raises(TypeError):
        state_to_bytes(make_cell("revgru", 2, 4, buffer_mode="big").init_state(1))


def test_constructor_validation():
    with pytest.raises(ValueError):
        make_cell("revgru", 3, 5)
    with pytest.raises(ValueError):
        make_cell("revgru", 3, 4, forget_floor=1.0)
    with pytest.raises(ValueError):
        make_cell("bogus", 3, 4)
    with pytest.raises(ValueError):
        make_cell("revgru", 3, 4, buffer_mode="tape")


def test_encode_state_quantizes():
    cell = make_cell("revgru", 2, 4)
    s = cell.encode_state((np.full((1, 2), 0.5), np.zeros((1, 2))))
    assert isinstance(s, RevState)
    assert np.array_equal(s.values["h1"], quantize(np.full((1, 2), 0.5), FixedFormat()))
