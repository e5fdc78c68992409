"""Acceptance checks with pinned tolerances; each prints one PASS/FAIL line."""

import time

import numpy as np
import pytest

from revrnn.cli import main
from revrnn.experiment import memstats, start_run, train
from revrnn.fixedpoint import quantize_gate
from revrnn.revbuffer import BigBuffer, BufferTensor, forward_transcript, reverse_transcript
from revrnn.revcells import make_cell
from revrnn.revgrad import (
    SequenceModel,
    finite_diff_check,
    reversible_backward,
    run_forward,
    stored_activation_backward,
)
from revrnn.seq2seq_attention import AttentionParams, attention_step, encoder_memory_report
from revrnn.tasks import evaluate_tokens_correct, parse_config, synthetic_text

RH, RZ = 23, 10


def quiet(*a, **k):
    pass


def run_config(text, out, steps=None):
    run = start_run(parse_config(text), out, timing=False, echo=quiet)
    last = train(run, steps=steps, log_every=0)
    return run, last


# -- 1 ---------------------------------------------------------------------------


def oracle_forward(h, z, b):
    q, r = divmod(h, 2**RZ)
    b, s = divmod(b * 2**RZ + r, z)
    return q * z + s, b


def test_criterion_1_bit_exact_buffer_reversal(criterion):
    t0 = time.perf_counter()
    worked = forward_transcript(16, 17, 1, 4) == (33, 0) and reverse_transcript(33, 17, 0, 4) == (16, 1)
    rng = np.random.default_rng(2024)
    n = 100_000
    h = rng.integers(-(2**31), 2**31, n)
    z = rng.integers(1, 2**RZ, n)
    b = rng.integers(0, 2 ** (64 - RZ), n, dtype=np.uint64)
    buf = BufferTensor((n,), rz=RZ, rh=RH)
    buf.guard()
    buf.active[...] = b
    buf.steps = 1  # as if an earlier step had filled the limb
    hn = buf.push(h, z)
    b_after = buf.active.copy()
    expect = [oracle_forward(int(a), int(c), int(d)) for a, c, d in zip(h, z, b)]
    agree = np.array_equal(hn, [e[0] for e in expect]) and all(int(x) == e[1] for x, e in zip(b_after, expect))
    back = buf.pop(hn, z)
    exact = np.array_equal(back, h) and np.array_equal(buf.active, b)
    big = BigBuffer((n,), RZ)
    big.value = b.astype(object)
    big.steps = 1
    big_back = big.pop(big.push(h, z), z)
    exact = exact and np.array_equal(big_back, h) and all(int(x) == int(y) for x, y in zip(big.value, b))
    secs = time.perf_counter() - t0
    ok = worked and agree and exact and secs < 5.0
    criterion(1, "bit-exact buffer reversal", ok, f"worked vector {worked}, {n} triples exact {agree and exact}, {secs:.2f}s < 5s")


# -- 2 ---------------------------------------------------------------------------


def reverse_check(kind, seed, H=64, T=1000, N=1, E=8):
    rng = np.random.default_rng(seed)
    cell = make_cell(kind, E, H, seed=seed)
    xs = rng.normal(size=(T, N, E))
    state = cell.encode_state(tuple(rng.uniform(-1, 1, (N, H // 2)) for _ in cell.components))
    start = state.copy()
    for t in range(T):
        state = cell.forward(xs[t], state)
    bits = state.measured_bits()
    for t in reversed(range(T)):
        state = cell.reverse(xs[t], state)
    return state.equals(start), bits


def test_criterion_2_cell_reversal(criterion):
    t0 = time.perf_counter()
    failures = []
    nf_bits = []
    for kind in ("revgru", "revlstm", "nf-revgru"):
        for seed in range(20):
            ok, bits = reverse_check(kind, seed)
            if not ok:
                failures.append(f"{kind}/{seed}")
            if kind == "nf-revgru":
                nf_bits.append(bits)
    secs = time.perf_counter() - t0
    ok = not failures and max(nf_bits) == 0 and secs < 60.0
    criterion(2, "cell reversal H=64 T=1000", ok, f"60 runs, failures {failures or 'none'}, NF bits {max(nf_bits)}, {secs:.1f}s < 60s")


# -- 3 ---------------------------------------------------------------------------


def test_criterion_3_limb_big_equivalence(criterion):
    rng = np.random.default_rng(3)
    T, shape = 600, (2, 8)
    hs = rng.integers(-(2**31) + 1, 2**31, (T,) + shape)
    zs = rng.integers(1, 2**RZ, (T,) + shape)
    big, limb = BigBuffer(shape, RZ), BufferTensor(shape, rz=RZ, rh=RH)
    out_big, out_limb = [], []
    for t in range(T):
        out_big.append(big.push(hs[t], zs[t]))
        out_limb.append(limb.push(hs[t], zs[t]))
    appends = limb.n_limbs - 1
    waste = 64 * limb.n_limbs - big.bit_lengths()
    worst_per_append = float(np.max(waste) / limb.n_limbs)
    rec_big, rec_limb = [], []
    for t in reversed(range(T)):
        rec_big.append(big.pop(out_big[t], zs[t]))
        rec_limb.append(limb.pop(out_limb[t], zs[t]))
    same = all(np.array_equal(a, b) for a, b in zip(rec_big, rec_limb))
    correct = all(np.array_equal(r, hs[T - 1 - i]) for i, r in enumerate(rec_big))
    ok = same and correct and appends >= 3 and np.all(waste >= 0) and worst_per_append <= RZ - 1 + 63
    criterion(
        3,
        "limb / big-integer equivalence",
        ok,
        f"{appends} appends per unit, trajectories identical {same and correct}, worst waste {worst_per_append:.1f} bits/limb <= {RZ - 1 + 63}",
    )


# -- 4 ---------------------------------------------------------------------------


def test_criterion_4_gradient_equivalence(criterion):
    mismatched = []
    count = 0
    for seed in range(25):
        for kind in ("revgru", "revlstm", "nf-revgru", "df-revgru"):
            rng = np.random.default_rng(1000 + seed)
            H = 2 * int(rng.integers(1, 9))
            T = int(rng.integers(1, 21))
            V = int(rng.integers(2, 8))
            model = SequenceModel(make_cell(kind, V, H, seed=seed), V, seed=seed)
            x = np.eye(V)[rng.integers(0, V, (T, 3))]
            y = rng.integers(0, V, (T, 3))
            tape, states = run_forward(model, x, y, record=True)
            gs, ds, _ = stored_activation_backward(model, states, x, targets=y)
            gr, dr, _ = reversible_backward(model, tape)
            same = gs.keys() == gr.keys() and all(np.array_equal(gs[k], gr[k]) for k in gs)
            same = same and all(np.array_equal(a, b) for a, b in zip(ds, dr))
            count += 1
            if not same:
                mismatched.append(f"{kind}/{seed}")
    fd = {}
    for kind in ("revgru", "revlstm"):
        rng = np.random.default_rng(7)
        model = SequenceModel(make_cell(kind, 8, 8, seed=7), 8, seed=7)
        x = np.eye(8)[rng.integers(0, 8, (5, 2))]
        y = rng.integers(0, 8, (5, 2))
        fd[kind] = finite_diff_check(model, x, y, epsilon=1e-5, n_checks=80)
    ok = count == 100 and not mismatched and max(fd.values()) < 1e-4
    detail = f"{count} models, mismatches {mismatched or 'none'}, surrogate FD max rel err " + ", ".join(
        f"{k} {v:.1e}" for k, v in fd.items()
    )
    criterion(4, "gradient equivalence", ok, detail)


# -- 5 ---------------------------------------------------------------------------


def test_criterion_5_noise_bound(criterion):
    rng = np.random.default_rng(5)
    n = 1_000_000
    buf = BufferTensor((n,), rz=RZ, rh=RH)
    h = rng.integers(-(2**31), 2**31, n)
    for _ in range(3):
        h = buf.push(h, rng.integers(1, 2**RZ, n))
    h = rng.integers(-(2**31), 2**31, n)
    z = rng.integers(1, 2**RZ, n)
    hn = buf.push(h, z)
    err = np.abs((hn.astype(np.float64) / 2**RH) - (h.astype(np.float64) / 2**RH) * (z / 2**RZ))
    # exact integer form of the same bound
    exact = np.abs(hn.astype(object) * 2**RZ - h.astype(object) * z.astype(object))
    violations = int(np.sum(exact > 2 ** (2 * RZ)))
    criterion(5, "noise bound", violations == 0, f"{n} multiplications, max error {err.max():.3e} <= 2^-13 = {2.0**-13:.3e}, violations {violations}")


# -- 6 ---------------------------------------------------------------------------


def test_criterion_6_accounting(criterion, tmp_path):
    T, H, N = 1000, 64, 4
    cell = make_cell("revgru", 4, H)
    for p in cell.params.values():
        p[...] = 0.0
    rng = np.random.default_rng(6)
    state = cell.encode_state(tuple(rng.uniform(-4, 4, (N, H // 2)) for _ in range(2)))
    group_ideal = []
    for _ in range(T):
        before = state.ideal_bits
        state = cell.forward(np.zeros((N, 4)), state)
        group_ideal.append(state.ideal_bits - before)
    ideal = state.ideal_bits
    measured = state.measured_bits()
    exact = ideal == T * H * N and all(g == H * N for g in group_ideal)
    over = measured / ideal

    cfg = tmp_path / "limit2.cfg"
    cfg.write_text("task = repeat\ncell = revgru\nhidden = 16\nT = 100\nV = 8\nbatch = 64\nsteps = 150\nlr = 0.003\nn_eval = 200\n")
    out = tmp_path / "limit2"
    code = main(["train", str(cfg), "--out", str(out), "--bits-limit", "2", "--quiet", "--no-wall-clock"])
    rep = memstats(out)
    savings = rep["ratios"]["savings_final"]
    ok = exact and over <= 2.5 and code == 0 and savings >= 8.0
    criterion(
        6,
        "memory accounting",
        ok,
        f"zero-weight ideal {ideal:.0f} == T*H*N {T * H * N}, measured/ideal {over:.3f} <= 2.5, "
        f"bits-limit 2 savings {savings:.2f}x (min {rep['ratios']['savings_min']:.2f}) >= 8",
    )


# -- 7 ---------------------------------------------------------------------------


TREND_RUNS = {
    "repeat": ("nf-revgru", 16, 12.0, 12.5),
    "memorize": ("lstm", 8, 5.0, 5.5),
}


@pytest.mark.slow
@pytest.mark.parametrize("task", ["repeat", "memorize"])
def test_criterion_7_capacity_trend(criterion, tmp_path, task):
    cell, hidden, need, stop_at = TREND_RUNS[task]
    text = (
        f"task = {task}\ncell = {cell}\nhidden = {hidden}\nT = 20\nV = 8\nbatch = 256\nlr = 0.003\n"
        f"steps = 50000\neval_every = 500\nn_eval = 2000\ntarget_accuracy = {stop_at}\nseed = 0\n"
    )
    t0 = time.perf_counter()
    run, _ = run_config(text, tmp_path / task)
    ev = evaluate_tokens_correct(run.model, task, 20, 8, n_eval=10_000, seed=777)
    mins = (time.perf_counter() - t0) / 60
    ok = ev.tokens_correct >= need and run.step <= 50_000 and mins <= 30
    criterion(
        7,
        f"{task} with {cell} ({hidden} units)",
        ok,
        f"{ev.tokens_correct:.2f}/20 tokens on 10000 sequences >= {need} (chance 2.5), "
        f"{ev.bits_per_unit:.2f} bits/unit, {run.step} steps, {mins:.1f} min",
    )


# -- 8 ---------------------------------------------------------------------------


def direct_attention(dec, ann, p):
    N, S, A = ann.shape
    hid = np.empty((N, p.Wc.shape[0]))
    for n in range(N):
        scores = np.array([sum(dec[n, i] * p.Wa[i, j] * ann[n, s, j] for i in range(dec.shape[1]) for j in range(A)) for s in range(S)])
        w = np.exp(scores - scores.max())
        w = w / w.sum()
        ctx = [sum(w[s] * ann[n, s, j] for s in range(S)) for j in range(A)]
        cat = np.array(ctx + list(dec[n]))
        hid[n] = [np.tanh(sum(p.Wc[r, c] * cat[c] for c in range(len(cat)))) for r in range(p.Wc.shape[0])]
    return hid


def encoder_gate_history(D=128, T=60, N=4, seed=8):
    """Quantized forget gates of a 1-bit-restricted RevGRU encoder run, ``[h1; h2]`` order."""
    rng = np.random.default_rng(seed)
    cell = make_cell("revgru", 16, D, seed=seed, forget_floor=0.5)
    state = cell.init_state(N)
    hist = []
    for _ in range(T):
        x = rng.normal(size=(N, 16))
        _, h2 = cell.decode(state)
        z1, _ = cell._gates("1", x, h2)
        state = cell.forward(x, state)
        h1, _ = cell.decode(state)
        z2, _ = cell._gates("2", x, h1)
        hist.append(np.concatenate([quantize_gate(z1, RZ), quantize_gate(z2, RZ)], axis=1))
    return np.stack(hist)


@pytest.mark.slow
def test_criterion_8_attention(criterion, tmp_path):
    rng = np.random.default_rng(8)
    p = AttentionParams.init(6, 6, 6, 5, rng)
    dec = rng.normal(size=(3, 6))
    ann = rng.normal(size=(3, 4, 6))
    oracle_err = float(np.max(np.abs(attention_step(dec, ann, p).hidden - direct_attention(dec, ann, p))))

    D, T = 128, 60
    g = encoder_gate_history(D, T)
    modes = [("emb", 0), ("emb+slice", 20), ("slice", 100), ("full", D)]
    ratios = [encoder_memory_report(m, k, D, T, g)["ratio"] for m, k in modes]
    ordered = all(a >= b for a, b in zip(ratios, ratios[1:])) and ratios[-1] == 1.0

    text = (
        "task = translate\ncell = revgru\nhidden = 32\nembed = 16\nattention = emb+slice:8\nV = 16\nmax_len = 10\n"
        "batch = 64\nlr = 0.003\nclip = 5\nsteps = 20000\neval_every = 250\nn_eval = 1000\ntarget_accuracy = 0.95\n"
    )
    run, last = run_config(text, tmp_path / "translate")
    acc = last["token_accuracy"]
    ok = oracle_err < 1e-12 and ordered and acc >= 0.9 and run.step <= 20_000
    criterion(
        8,
        "attention oracle, memory ordering, toy translation",
        ok,
        f"oracle err {oracle_err:.1e} < 1e-12, ratios Emb {ratios[0]:.2f} >= Emb+20H {ratios[1]:.2f} >= 100H {ratios[2]:.2f} "
        f">= Full {ratios[3]:.2f}, reverse-translation accuracy {acc:.3f} >= 0.9 after {run.step} steps",
    )


# -- 9 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_9_char_lm_smoke(criterion, tmp_path):
    corpus = tmp_path / "corpus.txt"
    corpus.write_bytes(synthetic_text(1 << 20, seed=0))
    ppl = {}
    for cell in ("gru", "revgru"):
        text = f"task = charlm\ncell = {cell}\nhidden = 64\nT = 70\nbatch = 32\nlr = 0.003\nsteps = 800\ncorpus = {corpus}\nseed = 0\n"
        run, _ = run_config(text, tmp_path / cell)
        ppl[cell] = run.lm_perplexity()
    rel = ppl["revgru"] / ppl["gru"] - 1.0
    criterion(
        9,
        "byte-level LM smoke run",
        rel <= 0.15,
        f"RevGRU perplexity {ppl['revgru']:.3f} vs GRU {ppl['gru']:.3f} on the same 1 MB corpus, gap {100 * rel:+.1f}% <= 15%",
    )


def test_verify_command_passes_on_fresh_checkout(capsys):
    assert main(["verify"]) == 0
