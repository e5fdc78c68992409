"""Encoder-decoder with attention over embeddings and encoder-state slices.

Both the encoder and the decoder are reversible cells trained with the
reversible backward walk.  The encoder keeps the first ``k`` units of
``[h1; h2]`` at full precision (these are the attended slices) and buffers the
rest; source embeddings are recomputed from tokens so they cost nothing.

Scores use the bilinear form ``h_dec^T W_a s_j``.  The attentional hidden
state ``tanh(W_c [c; h_dec])`` is recomputed during the backward pass from
the reconstructed decoder state.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .revbuffer import BufferTensor, NAIVE_BITS
from .revcells import RecurrentCell, make_cell
from .revgrad import (
    AdamState,
    ArrayLoss,
    _add_grads,
    _backward_walk,
    adam_step,
    clip_grad_norm,
    cross_entropy,
    reverse_walk,
    softmax,
)

MODES = ("emb", "slice", "emb+slice", "full")


def parse_attention(spec: str, hidden: int) -> tuple[str, int]:
    """``emb``, ``slice:K``, ``emb+slice:K`` or ``full`` -> ``(mode, k)``."""
    spec = spec.strip().lower()
    if spec == "emb":
        return "emb", 0
    if spec == "full":
        return "full", hidden
    m = re.fullmatch(r"(emb\+slice|slice):(\d+)", spec)
    if not m:
        raise ValueError(f"bad attention spec {spec!r}; expected emb, slice:K, emb+slice:K or full")
    k = int(m.group(2))
    if not 1 <= k <= hidden:
        raise ValueError(f"slice size {k} outside [1, {hidden}]")
    return m.group(1), k


def annotation_dim(mode: str, k: int, embed: int) -> int:
    return {"emb": embed, "slice": k, "emb+slice": embed + k, "full": k}[mode]


def build_annotations(embeddings: np.ndarray, enc_states: np.ndarray | None, mode: str, k: int = 0) -> np.ndarray:
    """Annotation vectors per source position.

    ``embeddings`` is ``(N, S, E)``; ``enc_states`` is ``(N, S, D)`` decoded
    encoder outputs ``[h1; h2]`` (only the first ``k`` columns are read).
    """
    if mode not in MODES:
        raise ValueError(f"unknown attention mode {mode!r}")
    if mode == "emb":
        return embeddings
    D = enc_states.shape[-1]
    if mode == "full":
        k = D
    if not 1 <= k <= D:
        raise ValueError(f"slice size {k} outside [1, {D}]")
    sl = enc_states[..., :k]
    return sl if mode in ("slice", "full") else np.concatenate([embeddings, sl], axis=-1)


@dataclass
class AttentionParams:
    Wa: np.ndarray  # (D_dec, A)
    Wc: np.ndarray  # (C, A + D_dec)
    Ws: np.ndarray  # (V, C)
    bs: np.ndarray  # (V,)

    @classmethod
    def init(cls, dec_dim: int, ann_dim: int, comb_dim: int, n_out: int, rng) -> "AttentionParams":
        def u(shape, fan):
            b = 1.0 / np.sqrt(fan)
            return rng.uniform(-b, b, shape)

        return cls(
            u((dec_dim, ann_dim), dec_dim),
            u((comb_dim, ann_dim + dec_dim), ann_dim + dec_dim),
            u((n_out, comb_dim), comb_dim),
            np.zeros(n_out),
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"Wa": self.Wa, "Wc": self.Wc, "Ws": self.Ws, "bs": self.bs}


@dataclass
class AttentionOut:
    hidden: np.ndarray  # attentional hidden tanh(Wc [c; h])
    weights: np.ndarray  # (N, S)
    context: np.ndarray  # (N, A)
    logits: np.ndarray
    query: np.ndarray


def attention_step(dec_state: np.ndarray, annotations: np.ndarray, params: AttentionParams, mask: np.ndarray | None = None) -> AttentionOut:
    """Luong "general" attention for one decoder step over a batch.

    ``dec_state`` is ``(N, D)``, ``annotations`` ``(N, S, A)`` and ``mask``
    an optional boolean ``(N, S)`` of valid source positions.
    """
    q = dec_state @ params.Wa
    scores = np.einsum("na,nsa->ns", q, annotations)
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    alpha = softmax(scores)
    ctx = np.einsum("ns,nsa->na", alpha, annotations)
    hid = np.tanh(np.concatenate([ctx, dec_state], axis=1) @ params.Wc.T)
    return AttentionOut(hid, alpha, ctx, hid @ params.Ws.T + params.bs, q)


def attention_backward(dec_state, annotations, params: AttentionParams, out: AttentionOut, dlogits):
    """Returns ``(d_dec_state, d_annotations, grads)``."""
    hid, alpha, ctx, q = out.hidden, out.weights, out.context, out.query
    A = annotations.shape[-1]
    grads = {"Ws": dlogits.T @ hid, "bs": dlogits.sum(axis=0)}
    dpre = (dlogits @ params.Ws) * (1.0 - hid * hid)
    cat = np.concatenate([ctx, dec_state], axis=1)
    grads["Wc"] = dpre.T @ cat
    dcat = dpre @ params.Wc
    dctx, dh = dcat[:, :A], dcat[:, A:]
    dalpha = np.einsum("na,nsa->ns", dctx, annotations)
    dscores = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    dann = alpha[:, :, None] * dctx[:, None, :] + dscores[:, :, None] * q[:, None, :]
    dq = np.einsum("ns,nsa->na", dscores, annotations)
    grads["Wa"] = dec_state.T @ dq
    dh = dh + dq @ params.Wa.T
    return dh, dann, grads


def encoder_memory_report(mode: str, k: int, D: int, T: int, gate_history, rz: int = 10, rh: int = 23, N: int | None = None) -> dict:
    """Encoder activation memory for an attention mode.

    ``gate_history`` holds raw gate numerators, shape ``(T, N, D)`` in
    ``[h1; h2]`` column order.  The first ``k`` columns are stored at full
    precision (32 bits per step); the rest are replayed through a limb
    buffer starting from a zero hidden state.
    """
    gates = np.asarray(gate_history, dtype=np.int64)
    if gates.ndim == 2:
        gates = gates[:, None, :]
    if gates.shape[0] != T or gates.shape[2] != D:
        raise ValueError(f"gate history shape {gates.shape} does not match T={T}, D={D}")
    n = gates.shape[1] if N is None else N
    if mode == "full":
        k = D
    elif mode == "emb":
        k = 0
    if not 0 <= k <= D:
        raise ValueError(f"slice size {k} outside [0, {D}]")
    stored = NAIVE_BITS * k * T * n
    buffer_bits = 0
    if k < D:
        buf = BufferTensor((gates.shape[1], D - k), rz=rz, rh=rh)
        h = np.zeros((gates.shape[1], D - k), dtype=np.int64)
        for t in range(T):
            h = buf.push(h, gates[t, :, k:])
        buffer_bits = buf.measured_bits()
    naive = NAIVE_BITS * D * T * n
    used = stored + buffer_bits
    return {
        "mode": mode,
        "k": k,
        "stored_slice_bits": stored,
        "buffer_bits": buffer_bits,
        "naive_bits": naive,
        "ratio": float("inf") if used == 0 else naive / used,
    }


# -- model -------------------------------------------------------------------------------


@dataclass
class Batch:
    src: np.ndarray  # (N, S) token ids
    src_mask: np.ndarray  # (N, S) bool
    tgt_in: np.ndarray  # (L, N) decoder input ids
    tgt_out: np.ndarray  # (L, N) targets, -1 = padding


def make_batch(pairs, src_vocab, tgt_vocab) -> Batch:
    """Pad a list of ``(src_tokens, tgt_tokens)`` into arrays."""
    from .tasks import BOS, EOS, PAD

    N = len(pairs)
    S = max(len(s) for s, _ in pairs)
    L = max(len(t) for _, t in pairs) + 1
    src = np.full((N, S), src_vocab.stoi[PAD], dtype=np.int64)
    mask = np.zeros((N, S), dtype=bool)
    tin = np.full((L, N), tgt_vocab.stoi[PAD], dtype=np.int64)
    tout = np.full((L, N), -1, dtype=np.int64)
    for n, (s, t) in enumerate(pairs):
        ids = src_vocab.encode(s)
        src[n, : len(ids)] = ids
        mask[n, : len(ids)] = True
        tids = tgt_vocab.encode(t)
        tin[: len(tids) + 1, n] = [tgt_vocab.stoi[BOS], *tids]
        tout[: len(tids) + 1, n] = [*tids, tgt_vocab.stoi[EOS]]
    return Batch(src, mask, tin, tout)


class _AttentionLoss:
    """Decoder loss head: attention, readout and cross-entropy per step."""

    def __init__(self, model: "Seq2Seq", ann, mask, targets, norm):
        self.model, self.ann, self.mask, self.targets, self.norm = model, ann, mask, targets, norm
        self.dann = np.zeros_like(ann)

    def step(self, t, feats):
        att = self.model.attn
        out = attention_step(feats, self.ann, att, self.mask)
        _, dlogits, _ = cross_entropy(out.logits, self.targets[t])
        dlogits /= self.norm
        dh, dann, g = attention_backward(feats, self.ann, att, out, dlogits)
        self.dann += dann
        return dh, {f"attn.{k}": v for k, v in g.items()}


@dataclass
class Seq2SeqStep:
    loss: float
    correct: int
    n_targets: int
    enc_stored_bits: int
    enc_buffer_bits: int
    enc_ratio: float
    dec_ratio: float
    measured_bits: int = 0
    ideal_bits: float = 0.0
    savings_ratio: float = 1.0


class Seq2Seq:
    """Reversible encoder and decoder joined by slice/embedding attention."""

    def __init__(
        self,
        src_vocab: int,
        tgt_vocab: int,
        embed: int = 16,
        hidden: int = 32,
        attention: str = "emb+slice:8",
        cell: str = "revgru",
        comb: int | None = None,
        seed: int = 0,
        **cell_kw,
    ):
        self.mode, self.k = parse_attention(attention, hidden)
        rng = np.random.default_rng(seed)
        self.encoder: RecurrentCell = make_cell(cell, embed, hidden, seed=seed + 1, **cell_kw)
        self.decoder: RecurrentCell = make_cell(cell, embed, hidden, seed=seed + 2, **cell_kw)
        if not self.encoder.reversible:
            raise ValueError("the seq2seq model needs reversible cells")
        self.embed = embed
        self.hidden = hidden
        self.emb = {"src": rng.normal(0, 0.3, (src_vocab, embed)), "tgt": rng.normal(0, 0.3, (tgt_vocab, embed))}
        A = annotation_dim(self.mode, self.k, embed)
        self.attn = AttentionParams.init(hidden, A, comb or hidden, tgt_vocab, rng)

    @property
    def stored_units(self) -> int:
        return 0 if self.mode == "emb" else self.k

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.params.items()})
        out.update({f"emb.{k}": v for k, v in self.emb.items()})
        out.update({f"attn.{k}": v for k, v in self.attn.as_dict().items()})
        return out

    # -- forward passes

    def _run(self, cell, inputs, state, path, keep=None):
        """Step ``cell`` over ``inputs``; returns ``(final, record, outputs)``.

        ``path`` is ``reversible`` (quantized, nothing recorded), ``stored``
        (quantized, decoded states recorded) or ``surrogate`` (float).
        """
        decode = (lambda s: s) if path == "surrogate" else cell.decode
        record = [decode(state)] if path != "reversible" else None
        outs = []
        for t in range(inputs.shape[0]):
            if path == "surrogate":
                state = cell.surrogate_step(inputs[t], state)
            else:
                state = cell.forward(inputs[t], state)
            fs = decode(state)
            if record is not None:
                record.append(fs)
            if keep is not None:
                outs.append(keep(t, fs))
        return state, record, outs

    def encode(self, src: np.ndarray, path: str = "reversible"):
        """Run the encoder; returns ``(inputs, initial, final, record, annotations)``."""
        enc = self.encoder
        x = self.emb["src"][src.T]  # (S, N, E)
        N = src.shape[0]
        if path == "surrogate":
            state = enc.zero_float_state(N)
            initial = state
        else:
            state = enc.init_state(N, stored_units=self.stored_units)
            initial = state.snapshot()
        keep = None if self.mode == "emb" else (lambda t, fs: enc.output(fs)[:, : self.k])
        state, record, slices = self._run(enc, x, state, path, keep)
        hs = np.stack(slices, axis=1) if slices else None
        ann = build_annotations(np.transpose(x, (1, 0, 2)), hs, self.mode, self.k)
        return x, initial, state, record, ann

    def _decoder_start(self, enc_final, batch, path="reversible"):
        if path == "surrogate":
            return tuple(a.copy() for a in enc_final)
        return self.decoder.init_state(batch, enc_final.values)

    # -- training

    def loss_and_grads(self, b: Batch, path: str = "reversible"):
        """Mean token loss, gradients and memory figures for one batch.

        ``reversible`` rebuilds every state during the backward pass;
        ``stored`` runs the same quantized model over recorded states (an
        exact oracle for ``reversible``); ``surrogate`` is the float model.
        """
        if path not in ("reversible", "stored", "surrogate"):
            raise ValueError(f"unknown path {path!r}")
        enc, dec = self.encoder, self.decoder
        x, enc_init, enc_final, enc_rec, ann = self.encode(b.src, path)
        S, N = x.shape[0], x.shape[1]
        quantized = path != "surrogate"
        if quantized:
            enc_stored, enc_buffer = enc_final.stored_bits(), enc_final.buffer_bits()
        else:
            enc_stored = enc_buffer = 0
        enc_ratio = _ratio(S * N * enc.state_units, enc_stored + enc_buffer)

        y = self.emb["tgt"][b.tgt_in]  # (L, N, E)
        start = self._decoder_start(enc_final, N, path)
        dec_init = start if not quantized else start.snapshot()
        n_t = max(int(np.sum(b.tgt_out >= 0)), 1)
        tally = [0.0, 0]

        def score(t, fs):
            out = attention_step(dec.output(fs), ann, self.attn, b.src_mask)
            l, _, c = cross_entropy(out.logits, b.tgt_out[t])
            tally[0] += l
            tally[1] += c

        state, dec_rec, _ = self._run(dec, y, start, path, score)
        loss, correct = tally
        if quantized:
            dec_bits = state.measured_bits()
            dec_ratio = _ratio(y.shape[0] * N * dec.state_units, dec_bits)
            measured = enc_stored + enc_buffer + dec_bits
            ideal = enc_final.ideal_bits + state.ideal_bits
            overall = _ratio((S + y.shape[0]) * N * dec.state_units, measured)
        else:
            dec_ratio = overall = 1.0
            measured, ideal = 0, 0.0

        head = _AttentionLoss(self, ann, b.src_mask, b.tgt_out, n_t)
        if path == "reversible":
            grads, ddec0, dy = reverse_walk(dec, y, state, dec_init, head, want_dx=True)
        else:
            grads, ddec0, dy = _backward_walk(dec, y, head, dec_rec[-1], lambda t: (dec_rec[t], dec_rec), want_dx=True)
        grads = {("dec." + k[5:] if k.startswith("cell.") else k): v for k, v in grads.items()}

        # encoder: slice gradients per step, plus the decoder's start state
        dann = head.dann
        dfeats = np.zeros((S, N, self.hidden))
        A_emb = self.embed if self.mode in ("emb", "emb+slice") else 0
        if self.mode != "emb":
            dfeats[:, :, : self.k] = np.transpose(dann[:, :, A_emb:], (1, 0, 2))
        eloss = ArrayLoss(dfeats)
        if path == "reversible":
            egrads, _, dx = reverse_walk(enc, x, enc_final, enc_init, eloss, want_dx=True, dfinal=ddec0)
        else:
            egrads, _, dx = _backward_walk(
                enc, x, eloss, enc_rec[-1], lambda t: (enc_rec[t], enc_rec), want_dx=True, dfinal=ddec0
            )
        _add_grads(grads, {"enc." + k[5:]: v for k, v in egrads.items()})

        dsrc = np.zeros_like(self.emb["src"])
        dxs = np.stack(dx)  # (S, N, E)
        if A_emb:
            dxs = dxs + np.transpose(dann[:, :, :A_emb], (1, 0, 2))
        np.add.at(dsrc, b.src.T, dxs)
        dtgt = np.zeros_like(self.emb["tgt"])
        np.add.at(dtgt, b.tgt_in, np.stack(dy))
        grads["emb.src"] = dsrc
        grads["emb.tgt"] = dtgt
        info = Seq2SeqStep(
            loss / n_t, correct, int(np.sum(b.tgt_out >= 0)), enc_stored, enc_buffer, enc_ratio, dec_ratio, measured, ideal, overall
        )
        return loss / n_t, grads, info

    def train_step(self, b: Batch, opt: AdamState, clip: float | None = None) -> Seq2SeqStep:
        _, grads, info = self.loss_and_grads(b)
        clip_grad_norm(grads, clip)
        adam_step(self.parameters(), grads, opt)
        return info

    # -- inference

    def greedy(self, src: np.ndarray, src_mask: np.ndarray, max_len: int, bos: int) -> np.ndarray:
        """Greedy decoding, ``(max_len, N)`` token ids."""
        dec = self.decoder
        _, _, enc_final, _, ann = self.encode(src)
        N = src.shape[0]
        state = self._decoder_start(enc_final, N)
        tok = np.full(N, bos)
        out = np.empty((max_len, N), dtype=np.int64)
        for t in range(max_len):
            state = dec.forward(self.emb["tgt"][tok], state)
            o = attention_step(dec.output(dec.decode(state)), ann, self.attn, src_mask)
            tok = np.argmax(o.logits, axis=1)
            out[t] = tok
        return out

    def token_accuracy(self, b: Batch, bos: int) -> float:
        """Greedy-decoding accuracy over reference positions (end marker included)."""
        pred = self.greedy(b.src, b.src_mask, b.tgt_out.shape[0], bos)
        valid = b.tgt_out >= 0
        return float(np.sum((pred == b.tgt_out) & valid) / np.sum(valid))


def _ratio(units_steps: int, bits: int) -> float:
    return float("inf") if bits == 0 else NAIVE_BITS * units_steps / bits
