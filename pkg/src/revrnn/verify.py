"""Self-check suites run by ``revrnn verify``.

Each suite returns a :class:`SuiteResult` with a pass count and, on failure,
a description of the first (shrunk where possible) failing case.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .revbuffer import (
    BigBuffer,
    BufferCorruption,
    BufferTensor,
    BufferUnderflow,
    ideal_total_bits,
    savings_ratio,
)
from .revcells import make_cell
from .revgrad import (
    ReversalMismatch,
    SequenceModel,
    finite_diff_check,
    reversible_backward,
    run_forward,
    stored_activation_backward,
)

RZ, RH = 10, 23


@dataclass
class SuiteResult:
    name: str
    passed: int
    total: int
    seconds: float = 0.0
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None and self.passed == self.total


def _algorithm1(h: int, z: int, b: int, rz: int) -> tuple[int, int]:
    # written out independently of revbuffer, with divmod on Python ints
    b = (b << rz) + (h & ((1 << rz) - 1))
    h = (h >> rz) * z
    q, r = divmod(b, z)
    return h + r, q


def _shrink_triple(h, z, b, fails):
    """Greedy shrink toward small magnitudes while ``fails`` keeps failing."""
    changed = True
    while changed:
        changed = False
        for cand in ((h // 2, z, b), (h, z, b // 2), (h, max(z // 2, 1), b), (h - (h > 0) + (h < 0), z, b)):
            if cand != (h, z, b) and fails(*cand):
                h, z, b = cand
                changed = True
                break
    return h, z, b


def suite_buffer(cases: int = 100_000, seed: int = 0) -> SuiteResult:
    """Vector round trips and transcript agreement for single multiplications."""
    rng = np.random.default_rng(seed)
    h = rng.integers(-(2**31), 2**31, cases)
    z = rng.integers(1, 2**RZ, cases)
    b = rng.integers(0, 2**63, cases, dtype=np.uint64) >> rng.integers(0, 63, cases).astype(np.uint64)
    b0 = b.astype(object)

    def fails(hi, zi, bi):
        buf = BigBuffer((), RZ)
        buf.value = np.asarray(bi, dtype=object)
        buf.steps = 1
        hn = int(buf.push(np.int64(hi), np.int64(zi)))
        expect_h, expect_b = _algorithm1(int(hi), int(zi), int(bi), RZ)
        back = int(buf.pop(np.int64(hn), np.int64(zi)))
        return hn != expect_h or int(buf.value) != expect_b or back != hi or int(buf.value) != bi

    # worked example at R_H = R_Z = 4
    c2 = BigBuffer((), 4)
    c2.value = np.asarray(1, dtype=object)
    c2.steps = 1
    h33 = int(c2.push(np.int64(16), np.int64(17)))
    if (h33, int(c2.value)) != (33, 0) or int(c2.pop(np.int64(33), np.int64(17))) != 16 or int(c2.value) != 1:
        return SuiteResult("buffer", 0, cases + 1, failure="worked example h*=16, z*=17, B=1 did not map to (33, 0) and back")

    buf = BigBuffer((cases,), RZ)
    buf.value = b0.copy()
    buf.steps = 1
    hn = buf.push(h, z)
    expect = [_algorithm1(int(a), int(c), int(d), RZ) for a, c, d in zip(h, z, b0)]
    eh = np.array([e[0] for e in expect], dtype=np.int64)
    eb = np.array([e[1] for e in expect], dtype=object)
    ok = (hn == eh) & (buf.value == eb)
    back = buf.pop(hn, z)
    ok &= (back == h) & (buf.value == b0)
    passed = int(ok.sum())
    if passed != cases:
        i = int(np.flatnonzero(~ok)[0])
        hs, zs, bs = _shrink_triple(int(h[i]), int(z[i]), int(b0[i]), fails)
        return SuiteResult("buffer", passed + 1, cases + 1, failure=f"round trip failed for h*={hs}, z*={zs}, B={bs}")
    return SuiteResult("buffer", cases + 1, cases + 1)


def suite_noise(cases: int = 1_000_000, seed: int = 0, rh: int = RH, rz: int = RZ) -> SuiteResult:
    """``|h' - h z| <= 2**(rz - rh)`` for multiplications on pre-filled limb buffers."""
    rng = np.random.default_rng(seed)
    buf = BufferTensor((cases,), rz=rz, rh=rh)
    h = rng.integers(-(2**31), 2**31, cases)
    # fill the buffers with some history so ``B mod z*`` is not trivially zero
    for _ in range(3):
        h = buf.push(h, rng.integers(1, 2**rz, cases))
    h = rng.integers(-(2**31), 2**31, cases)
    z = rng.integers(1, 2**rz, cases)
    hn = buf.push(h, z)
    # compare in units of 2**-(rh + rz) with exact integers
    err = np.abs(hn.astype(object) * 2**rz - h.astype(object) * z.astype(object))
    bad = err > 2 ** (2 * rz)
    n_bad = int(np.sum(bad))
    if n_bad:
        i = int(np.flatnonzero(bad)[0])
        return SuiteResult("noise", cases - n_bad, cases, failure=f"h*={h[i]}, z*={z[i]}: error {err[i]} > 2^{2 * rz} (scaled)")
    return SuiteResult("noise", cases, cases)


REVERSIBLE = ("revgru", "revlstm", "nf-revgru", "df-revgru")


def _random_inputs(rng, T, N, E):
    return rng.normal(0.0, 1.0, (T, N, E))


def check_cell_reversal(kind, seed, T=50, H=8, N=2, E=8, fault=None, buffer_mode="limb"):
    """Forward ``T`` steps then reverse; returns ``None`` or a failure message.

    ``fault=(buffer_name, limb, bit)`` flips one stored bit before reversing;
    the message then locates the first step and unit where recovery diverges.
    """
    rng = np.random.default_rng(seed)
    cell = make_cell(kind, E, H, seed=seed, buffer_mode=buffer_mode)
    xs = _random_inputs(rng, T, N, E)
    state = cell.init_state(N, cell.encode_state(tuple(rng.uniform(-1, 1, (N, H // 2)) for _ in cell.components)).values)
    start = state.copy()
    record = [state.snapshot()]
    for t in range(T):
        state = cell.forward(xs[t], state)
        record.append(state.snapshot())
    if fault is not None:
        name, limb, bit = fault
        state.buffers[name].flip_bit(limb, (0, 0), bit)
    try:
        for t in range(T - 1, -1, -1):
            state = cell.reverse(xs[t], state)
            for k, v in state.values.items():
                if not np.array_equal(v, record[t][k]):
                    n, u = (int(i) for i in np.argwhere(v != record[t][k])[0])
                    return f"{kind} seed {seed}: {k} differs after reversing to t={t}, batch {n}, unit {u}"
    except (BufferCorruption, BufferUnderflow) as exc:
        return f"{kind} seed {seed}: reversing step t={t} failed: {exc}"
    if not state.equals(start):
        return f"{kind} seed {seed}: buffers not restored to their initial contents"
    return None


def suite_cells(cases: int = 20, seed: int = 0, T: int = 50, fault: bool = False) -> SuiteResult:
    total = cases * len(REVERSIBLE)
    passed = 0
    for i in range(cases):
        for kind in REVERSIBLE:
            f = None
            if fault and kind == "revgru":
                f = ("h1", 0, 5)
            msg = check_cell_reversal(kind, seed + i, T=T, fault=f)
            if msg:
                return SuiteResult("cells", passed, total, failure=msg)
            passed += 1
    return SuiteResult("cells", passed, total)


def limb_equivalence(T: int = 400, N: int = 2, H: int = 4, seed: int = 0, rz: int = RZ, rh: int = RH) -> dict:
    """Compare unbounded and limb buffers on the same external program.

    Each step pushes a fresh hidden value with a fresh gate (the program), so
    both buffer kinds see identical inputs; both must give the program back
    on reversal.  Returns recovered trajectories and bit counts.
    """
    rng = np.random.default_rng(seed)
    hs = rng.integers(-(2**30), 2**30, (T, N, H))
    zs = rng.integers(1, 2**rz, (T, N, H))
    big = BigBuffer((N, H), rz)
    limb = BufferTensor((N, H), rz=rz, rh=rh)
    out_big, out_limb = [], []
    for t in range(T):
        out_big.append(big.push(hs[t], zs[t]))
        out_limb.append(limb.push(hs[t], zs[t]))
    big_bits = big.bit_lengths()
    limb_count = limb.n_limbs
    rec_big = np.empty_like(hs)
    rec_limb = np.empty_like(hs)
    for t in range(T - 1, -1, -1):
        rec_big[t] = big.pop(out_big[t], zs[t])
        rec_limb[t] = limb.pop(out_limb[t], zs[t])
    return {
        "program": hs,
        "recovered_big": rec_big,
        "recovered_limb": rec_limb,
        "big_bits": big_bits,
        "limbs": limb_count,
        "limb_bits_per_unit": 64 * limb_count,
        "empty_after": big.measured_bits() == 0 and limb.n_limbs == 0,
    }


def suite_limbs(cases: int = 5, seed: int = 0) -> SuiteResult:
    total = 0
    for i in range(cases):
        r = limb_equivalence(T=400, seed=seed + i)
        total += 1
        if r["limbs"] < 3:
            return SuiteResult("limbs", i, cases, failure=f"seed {seed + i}: only {r['limbs']} limbs appended")
        if not (np.array_equal(r["recovered_big"], r["program"]) and np.array_equal(r["recovered_limb"], r["program"])):
            return SuiteResult("limbs", i, cases, failure=f"seed {seed + i}: recovered trajectories differ")
        waste = r["limb_bits_per_unit"] - r["big_bits"]
        if np.any(waste < 0) or np.any(waste > r["limbs"] * (RZ - 1 + 63)):
            return SuiteResult("limbs", i, cases, failure=f"seed {seed + i}: limb waste {waste.max()} out of bounds")
        if not r["empty_after"]:
            return SuiteResult("limbs", i, cases, failure=f"seed {seed + i}: buffers not empty after reversal")
    return SuiteResult("limbs", cases, cases)


def gradient_equivalence(kind: str, seed: int, H: int = 8, T: int = 10, N: int = 3, V: int = 5) -> bool:
    rng = np.random.default_rng(seed)
    model = SequenceModel(make_cell(kind, V, H, seed=seed), V, seed=seed)
    x = np.eye(V)[rng.integers(0, V, (T, N))]
    y = rng.integers(0, V, (T, N))
    tape, states = run_forward(model, x, y, record=True)
    g_stored, d_stored, _ = stored_activation_backward(model, states, x, targets=y)
    g_rev, d_rev, _ = reversible_backward(model, tape)
    same = g_stored.keys() == g_rev.keys() and all(np.array_equal(g_stored[k], g_rev[k]) for k in g_stored)
    return same and all(np.array_equal(a, b) for a, b in zip(d_stored, d_rev))


def suite_grad(cases: int = 25, seed: int = 0) -> SuiteResult:
    passed = 0
    total = cases * len(REVERSIBLE) + 2
    for i in range(cases):
        for kind in REVERSIBLE:
            try:
                ok = gradient_equivalence(kind, seed + i, H=2 * (1 + i % 8), T=1 + (i * 7) % 20)
            except ReversalMismatch as exc:
                return SuiteResult("grad", passed, total, failure=f"{kind} seed {seed + i}: {exc}")
            if not ok:
                return SuiteResult("grad", passed, total, failure=f"{kind} seed {seed + i}: gradients differ")
            passed += 1
    rng = np.random.default_rng(seed)
    for kind in ("revgru", "revlstm"):
        model = SequenceModel(make_cell(kind, 8, 8, seed=seed), 8, seed=seed)
        x = np.eye(8)[rng.integers(0, 8, (5, 2))]
        y = rng.integers(0, 8, (5, 2))
        err = finite_diff_check(model, x, y, epsilon=1e-5)
        if not err < 1e-4:
            return SuiteResult("grad", passed, total, failure=f"{kind} surrogate finite-difference error {err:.2e}")
        passed += 1
    return SuiteResult("grad", passed, total)


def zero_weight_accounting(T: int = 1000, H: int = 64, N: int = 4) -> dict:
    """Run a zero-weight RevGRU (every gate exactly 0.5) and tally its bits."""
    cell = make_cell("revgru", 4, H)
    for p in cell.params.values():
        p[...] = 0.0
    rng = np.random.default_rng(0)
    state = cell.encode_state(tuple(rng.uniform(-4, 4, (N, H // 2)) for _ in range(2)))
    x = np.zeros((N, 4))
    for _ in range(T):
        state = cell.forward(x, state)
    gates = np.full((T, N, H), 512)
    return {
        "ideal_bits": state.ideal_bits,
        "ideal_from_history": ideal_total_bits(gates, RZ),
        "expected_ideal": T * H * N,
        "measured_bits": state.measured_bits(),
        "savings_ratio": savings_ratio(T, H, state.measured_bits(), N),
    }


def suite_accounting(cases: int = 1, seed: int = 0) -> SuiteResult:
    r = zero_weight_accounting()
    checks = [
        (r["ideal_bits"] == r["expected_ideal"], f"ideal bits {r['ideal_bits']} != {r['expected_ideal']}"),
        (r["ideal_from_history"] == r["expected_ideal"], "ideal_total_bits disagrees with the tally"),
        (r["measured_bits"] / r["ideal_bits"] <= 2.5, f"measured/ideal = {r['measured_bits'] / r['ideal_bits']:.2f}"),
        (savings_ratio(10, 8, 0) == float("inf"), "empty buffer ratio should be infinite"),
    ]
    for i, (ok, msg) in enumerate(checks):
        if not ok:
            return SuiteResult("accounting", i, len(checks), failure=msg)
    return SuiteResult("accounting", len(checks), len(checks))


SUITES = {
    "buffer": suite_buffer,
    "noise": suite_noise,
    "cells": suite_cells,
    "limbs": suite_limbs,
    "grad": suite_grad,
    "accounting": suite_accounting,
}


def run_suites(names=None, cases: int | None = None, seed: int = 0, fault: bool = False) -> list[SuiteResult]:
    out = []
    for name in names or SUITES:
        fn = SUITES[name]
        kw = {"seed": seed}
        if cases is not None:
            kw["cases"] = cases
        if name == "cells" and fault:
            kw["fault"] = True
        t0 = time.perf_counter()
        res = fn(**kw)
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out

