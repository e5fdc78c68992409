"""Synthetic tasks, small corpora and run configuration files.

Token batches are time-major: ``inputs`` has shape ``(T, N, width)`` (one-hot)
and ``targets`` shape ``(T, N)`` with ``-1`` marking steps that carry no
prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IGNORE = -1


@dataclass
class SequenceBatch:
    tokens: np.ndarray  # (N, T) source tokens
    inputs: np.ndarray  # (steps, N, width) one-hot inputs
    targets: np.ndarray  # (steps, N), IGNORE where nothing is predicted
    vocab_size: int
    has_marker: bool = False

    @property
    def n_predictions(self) -> int:
        """Predicted tokens per sequence."""
        return int(np.sum(self.targets[:, 0] >= 0))


def _one_hot(tokens: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros(tokens.shape + (width,))
    np.put_along_axis(out, tokens[..., None], 1.0, axis=-1)
    return out


def gen_repeat(batch: int, T: int, V: int = 8, seed=None) -> SequenceBatch:
    """Each token must be emitted one step after it is read.

    The model reads ``T + 1`` tokens; the prediction at step ``t + 1`` is the
    token read at step ``t``, so there are ``T`` scored predictions.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, V, (batch, T + 1))
    targets = np.full((T + 1, batch), IGNORE, dtype=np.int64)
    targets[1:] = tokens[:, :T].T
    return SequenceBatch(tokens[:, :T], _one_hot(tokens.T, V), targets, V)


def gen_memorize(batch: int, T: int, V: int = 8, seed=None) -> SequenceBatch:
    """Read ``T`` tokens, then output them in reverse order.

    Inputs are ``V + 1`` wide: the extra channel is 0 while reading and 1
    during the output phase, where the token channels are blank.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, V, (batch, T))
    inputs = np.zeros((2 * T, batch, V + 1))
    inputs[:T, :, :V] = _one_hot(tokens.T, V)
    inputs[T:, :, V] = 1.0
    targets = np.full((2 * T, batch), IGNORE, dtype=np.int64)
    targets[T:] = tokens[:, ::-1].T
    return SequenceBatch(tokens, inputs, targets, V, has_marker=True)


TASKS = {"repeat": gen_repeat, "memorize": gen_memorize}


def input_width(task: str, V: int) -> int:
    return V + 1 if task == "memorize" else V


def bits_per_unit(correct: float, T: int, V: int, units: int) -> float:
    """Information stored per hidden unit, after removing chance accuracy."""
    return (correct - T / V) * math.log2(V) / units


@dataclass
class Evaluation:
    tokens_correct: float
    bits_per_unit: float
    n_eval: int


def evaluate_tokens_correct(model, task: str, T: int, V: int = 8, n_eval: int = 10_000, seed: int = 12345, chunk: int = 2000) -> Evaluation:
    """Mean correctly predicted tokens per sequence over ``n_eval`` fresh sequences."""
    from .revgrad import predict

    gen = TASKS[task]
    rng = np.random.default_rng(seed)
    total = 0
    done = 0
    while done < n_eval:
        n = min(chunk, n_eval - done)
        b = gen(n, T, V, rng)
        pred = predict(model, b.inputs)
        total += int(np.sum((pred == b.targets) & (b.targets >= 0)))
        done += n
    mean = total / n_eval
    units = model.cell.hidden_size
    return Evaluation(mean, bits_per_unit(mean, T, V, units), n_eval)


# -- byte-level language modelling --------------------------------------------------


@dataclass
class CharCorpus:
    data: np.ndarray  # uint8
    batch: int
    T: int
    vocab_size: int = 256

    @property
    def n_batches(self) -> int:
        return len(self.data) // (self.batch * self.T)

    def streams(self) -> np.ndarray:
        per = len(self.data) // self.batch
        return self.data[: per * self.batch].reshape(self.batch, per).astype(np.int64)

    def batches(self):
        """Contiguous TBPTT windows ``(inputs, targets)`` of shape ``(T, batch, 256)``/``(T, batch)``.

        Targets are the next byte of each stream; the last position of the
        final window has no successor and is ignored.
        """
        s = self.streams()
        nxt = np.full_like(s, IGNORE)
        nxt[:, :-1] = s[:, 1:]
        for i in range(self.n_batches):
            sl = slice(i * self.T, (i + 1) * self.T)
            yield _one_hot(s[:, sl].T, 256), nxt[:, sl].T

    def split(self, fraction: float = 0.9) -> tuple["CharCorpus", "CharCorpus"]:
        cut = int(len(self.data) * fraction)
        return CharCorpus(self.data[:cut], self.batch, self.T), CharCorpus(self.data[cut:], self.batch, self.T)


def char_lm_corpus(path, batch: int = 32, T: int = 70) -> CharCorpus:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc.strerror or exc}") from exc
    if len(raw) < batch * T:
        raise ValueError(f"corpus {path} has {len(raw)} bytes, fewer than one batch ({batch}x{T})")
    return CharCorpus(np.frombuffer(raw, dtype=np.uint8), batch, T)


_SYLLABLES = ["ka", "to", "re", "mi", "su", "na", "lo", "pe", "di", "gu", "an", "el", "or", "is", "um", "et"]


def synthetic_text(n_bytes: int = 1 << 20, seed: int = 0) -> bytes:
    """Pseudo-English text from a bigram word model, for LM smoke runs."""
    rng = np.random.default_rng(seed)
    words = []
    for _ in range(300):
        k = int(rng.integers(1, 4))
        words.append("".join(_SYLLABLES[j] for j in rng.integers(0, len(_SYLLABLES), k)))
    n = len(words)
    # each word has a handful of likely successors
    succ = rng.integers(0, n, (n, 4))
    # Zipf-ish unigram fallback
    zipf = 1.0 / np.arange(1, n + 1)
    zipf /= zipf.sum()
    out = []
    size = 0
    w = 0
    since_stop = 0
    while size < n_bytes:
        if rng.random() < 0.7:
            w = int(succ[w, rng.integers(4)])
        else:
            w = int(rng.choice(n, p=zipf))
        tok = words[w]
        since_stop += 1
        if since_stop > 4 and rng.random() < 0.15:
            tok += ".\n" if rng.random() < 0.3 else "."
            since_stop = 0
        out.append(tok)
        size += len(tok) + 1
    return " ".join(out).encode("ascii")[:n_bytes]


def perplexity(mean_nll: float) -> float:
    return float(math.exp(mean_nll))


# -- toy translation ------------------------------------------------------------------


@dataclass
class ParallelCorpus:
    pairs: list[tuple[list[str], list[str]]]

    def __len__(self):
        return len(self.pairs)

    def to_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for src, tgt in self.pairs:
                fh.write(" ".join(src) + "\t" + " ".join(tgt) + "\n")

    @classmethod
    def from_tsv(cls, path) -> "ParallelCorpus":
        pairs = []
        try:
            fh = open(path, encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read parallel corpus {path}: {exc.strerror or exc}") from exc
        with fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: expected one tab between source and target")
                pairs.append((parts[0].split(), parts[1].split()))
        return cls(pairs)


def toy_translation(n: int, max_len: int = 10, V: int = 16, seed=None, min_len: int = 1) -> ParallelCorpus:
    """Random token strings paired with their reversal."""
    if n < 1:
        raise ValueError("need at least one sentence pair")
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(V)]
    pairs = []
    for _ in range(n):
        L = int(rng.integers(min_len, max_len + 1))
        src = [words[j] for j in rng.integers(0, V, L)]
        pairs.append((src, src[::-1]))
    return ParallelCorpus(pairs)


PAD, BOS, EOS = "<pad>", "<s>", "</s>"


class Vocabulary:
    def __init__(self, tokens):
        self.itos = list(dict.fromkeys([PAD, BOS, EOS, *tokens]))
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def encode(self, toks) -> list[int]:
        try:
            return [self.stoi[t] for t in toks]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]

    @classmethod
    def build(cls, sentences) -> "Vocabulary":
        seen = sorted({t for s in sentences for t in s})
        return cls(seen)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            lines = Path(path).read_text(encoding="utf-8").split()
        except OSError as exc:
            raise OSError(f"cannot read vocabulary {path}: {exc.strerror or exc}") from exc
        return cls(lines)


# -- run configuration files ------------------------------------------------------------


class ConfigError(ValueError):
    def __init__(self, msg: str, lineno: int | None = None, path=None):
        where = f"{path or '<config>'}:{lineno}: " if lineno else (f"{path}: " if path else "")
        super().__init__(where + msg)
        self.lineno = lineno


def _parse_bits(v: str):
    return None if v.lower() == "none" else int(v)


CONFIG_KEYS = {
    "task": str,
    "T": int,
    "V": int,
    "hidden": int,
    "cell": str,
    "bits_limit": _parse_bits,
    "seed": int,
    "steps": int,
    "batch": int,
    "lr": float,
    "clip": lambda v: None if v.lower() == "none" else float(v),
    "rh": int,
    "rz": int,
    "attention": str,
    "corpus": str,
    "embed": int,
    "eval_every": int,
    "n_eval": int,
    "max_len": int,
    "n_pairs": int,
    "target_accuracy": float,
}

DEFAULTS = {
    "task": "repeat",
    "T": 20,
    "V": 8,
    "hidden": 16,
    "cell": "revgru",
    "bits_limit": None,
    "seed": 0,
    "steps": 1000,
    "batch": 256,
    "lr": 1e-3,
    "clip": None,
    "rh": 23,
    "rz": 10,
    "attention": "emb+slice:8",
    "corpus": None,
    "embed": 16,
    "eval_every": 0,
    "n_eval": 1000,
    "max_len": 10,
    "n_pairs": 20000,
    "target_accuracy": None,
}

TASK_NAMES = ("repeat", "memorize", "charlm", "translate")
CELL_NAMES = ("revgru", "revlstm", "nf-revgru", "df-revgru", "gru", "lstm")


def validate_config(cfg: dict, lines: dict | None = None, path=None) -> dict:
    lines = lines or {}

    def fail(key, msg):
        raise ConfigError(msg, lines.get(key), path)

    if cfg["task"] not in TASK_NAMES:
        fail("task", f"unknown task {cfg['task']!r} (choose from {', '.join(TASK_NAMES)})")
    if cfg["cell"] not in CELL_NAMES:
        fail("cell", f"unknown cell {cfg['cell']!r} (choose from {', '.join(CELL_NAMES)})")
    for key in ("T", "V", "hidden", "steps", "batch"):
        if cfg[key] < 1:
            fail(key, f"{key} must be positive")
    if cfg["bits_limit"] is not None and cfg["bits_limit"] < 1:
        fail("bits_limit", "bits_limit must be >= 1 or none")
    if not 1 <= cfg["rz"] < cfg["rh"] < 31:
        fail("rz" if "rz" in lines else "rh", "need 1 <= rz < rh < 31")
    return cfg


def parse_config(text: str, path=None) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    cfg = dict(DEFAULTS)
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno, path)
        if key in lines:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", lineno, path)
        try:
            cfg[key] = CONFIG_KEYS[key](value)
        except ValueError:
            raise ConfigError(f"bad value {value!r} for {key}", lineno, path) from None
        lines[key] = lineno
    return validate_config(cfg, lines, path)


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror or exc}", path=path) from exc
    return parse_config(text, path)


def dump_config(cfg: dict) -> str:
    def fmt(v):
        return "none" if v is None else str(v)

    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in CONFIG_KEYS if cfg.get(k) is not None or k in ("bits_limit", "clip"))
