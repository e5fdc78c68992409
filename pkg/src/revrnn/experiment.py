"""Training runs driven by a config: run directories, logs, resume, audits.

A run directory holds

``config.txt``      the resolved config (overrides applied)
``log.csv``         one row per training step
``params.bin``      cell checkpoint(s) in the binary parameter format
``checkpoint.npz``  every parameter plus optimizer state, for ``--resume``
``snapshot.bin``    a mid-sequence state with its buffers (reversible cells)
``eval.csv``        periodic evaluations, when ``eval_every`` is set

Batches are drawn from ``default_rng([seed, step])`` so a resumed run sees
the same data as an uninterrupted one.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np

from .fixedpoint import FixedFormat, bits_limit_to_floor
from .revcells import make_cell, state_from_bytes, state_to_bytes
from .revgrad import AdamState, SequenceModel, run_forward, train_step
from .tasks import (
    BOS,
    TASKS,
    Vocabulary,
    char_lm_corpus,
    dump_config,
    evaluate_tokens_correct,
    input_width,
    load_config,
    perplexity,
    synthetic_text,
    toy_translation,
)

LOG_FIELDS = ["step", "loss", "tokens_correct", "measured_bits", "ideal_bits", "savings_ratio", "wall_ms"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10)) if math.isfinite(v) else ("inf" if v > 0 else "nan")
    return str(v)


def cell_kwargs(cfg: dict) -> dict:
    kw = {"fmt": FixedFormat(cfg["rh"], cfg["rz"]), "forget_floor": bits_limit_to_floor(cfg["bits_limit"])}
    return kw


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class Run:
    """One configured training run writing into ``out``."""

    def __init__(self, cfg: dict, out, timing: bool = True, echo=print):
        self.cfg = cfg
        self.out = Path(out)
        self.timing = timing
        self.echo = echo
        self.step = 0
        self.carry = None
        self._build()

    # -- construction

    def _build(self):
        cfg = self.cfg
        self.opt = AdamState(lr=cfg["lr"])
        task = cfg["task"]
        if task == "translate":
            from .seq2seq_attention import Seq2Seq

            words = [f"w{i}" for i in range(cfg["V"])]
            self.vocab = Vocabulary(words)
            self.model = Seq2Seq(
                len(self.vocab),
                len(self.vocab),
                embed=cfg["embed"],
                hidden=cfg["hidden"],
                attention=cfg["attention"],
                cell=cfg["cell"],
                seed=cfg["seed"],
                **cell_kwargs(cfg),
            )
            return
        if task == "charlm":
            width, n_out = 256, 256
        else:
            width, n_out = input_width(task, cfg["V"]), cfg["V"]
        cell = make_cell(cfg["cell"], width, cfg["hidden"], seed=cfg["seed"], **cell_kwargs(cfg))
        self.model = SequenceModel(cell, n_out, seed=cfg["seed"])

    def parameters(self) -> dict:
        return self.model.parameters()

    # -- data

    def _rng(self, step):
        return np.random.default_rng([self.cfg["seed"], step])

    def _corpus(self):
        if not hasattr(self, "_lm"):
            path = self.cfg["corpus"]
            if path in (None, "synthetic"):
                path = self.out / "corpus.txt"
                if not path.exists():
                    path.write_bytes(synthetic_text(1 << 20, self.cfg["seed"]))
            corpus = char_lm_corpus(path, self.cfg["batch"], self.cfg["T"])
            self._lm = corpus.split(0.9)
            self._windows = list(self._lm[0].batches())
        return self._lm

    # -- one step

    def train_one(self) -> dict:
        cfg = self.cfg
        step = self.step
        t0 = time.perf_counter()
        if cfg["task"] == "translate":
            from .seq2seq_attention import make_batch

            pairs = toy_translation(cfg["batch"], cfg["max_len"], cfg["V"], seed=self._rng(step)).pairs
            r = self.model.train_step(make_batch(pairs, self.vocab, self.vocab), self.opt, cfg["clip"])
            row = [r.loss, r.correct / cfg["batch"], r.measured_bits, r.ideal_bits, r.savings_ratio]
        else:
            if cfg["task"] == "charlm":
                self._corpus()
                k = step % len(self._windows)
                if k == 0:
                    self.carry = None
                x, y = self._windows[k]
            else:
                b = TASKS[cfg["task"]](cfg["batch"], cfg["T"], cfg["V"], seed=self._rng(step))
                x, y = b.inputs, b.targets
            r = train_step(self.model, x, y, self.opt, cfg["clip"], initial=self.carry)
            if cfg["task"] == "charlm":
                self.carry = r.final
            row = [r.loss, r.correct / cfg["batch"], r.measured_bits, r.ideal_bits, r.savings_ratio]
        wall = (time.perf_counter() - t0) * 1000.0 if self.timing else 0.0
        self.step += 1
        return dict(zip(LOG_FIELDS, [step, *row, wall]))

    # -- evaluation

    def evaluate(self) -> dict:
        cfg = self.cfg
        if cfg["task"] in TASKS:
            ev = evaluate_tokens_correct(self.model, cfg["task"], cfg["T"], cfg["V"], n_eval=cfg["n_eval"], seed=cfg["seed"] + 1)
            return {"tokens_correct": ev.tokens_correct, "bits_per_unit": ev.bits_per_unit}
        if cfg["task"] == "charlm":
            return {"perplexity": self.lm_perplexity()}
        from .seq2seq_attention import make_batch

        test = toy_translation(cfg["n_eval"], cfg["max_len"], cfg["V"], seed=cfg["seed"] + 1)
        acc = self.model.token_accuracy(make_batch(test.pairs, self.vocab, self.vocab), self.vocab.stoi[BOS])
        return {"token_accuracy": acc}

    def lm_perplexity(self, split: int = 1) -> float:
        """Per-byte perplexity over a corpus split, carrying state across windows."""
        corpus = self._corpus()[split]
        total, count, carry = 0.0, 0, None
        for x, y in corpus.batches():
            tape, _ = run_forward(self.model, x, y, initial=carry)
            carry = tape.final_state.snapshot() if self.model.cell.reversible else tape.final_state
            total += tape.loss * tape.n_targets
            count += tape.n_targets
        return perplexity(total / max(count, 1))

    # -- persistence

    def save(self):
        out = self.out
        if self.cfg["task"] == "translate":
            (out / "params.bin").write_bytes(self.model.encoder.params_to_bytes())
            (out / "decoder_params.bin").write_bytes(self.model.decoder.params_to_bytes())
            self.vocab.save(out / "vocab.txt")
        else:
            (out / "params.bin").write_bytes(self.model.cell.params_to_bytes())
        arrays = {f"p/{k}": v for k, v in self.parameters().items()}
        arrays.update({f"m/{k}": v for k, v in self.opt.m.items()})
        arrays.update({f"v/{k}": v for k, v in self.opt.v.items()})
        arrays["adam_t"] = np.array(self.opt.t)
        arrays["step"] = np.array(self.step)
        if self.carry is not None:
            carry = self.carry if isinstance(self.carry, dict) else dict(enumerate(self.carry))
            arrays.update({f"carry/{k}": v for k, v in carry.items()})
        np.savez(out / "checkpoint.npz", **arrays)

    def load_checkpoint(self):
        data = np.load(self.out / "checkpoint.npz")
        params = self.parameters()
        carry = {}
        for key in data.files:
            kind, _, name = key.partition("/")
            if kind == "p":
                params[name][...] = data[key]
            elif kind == "m":
                self.opt.m[name] = data[key].copy()
            elif kind == "v":
                self.opt.v[name] = data[key].copy()
            elif kind == "carry":
                carry[name] = data[key].copy()
        self.opt.t = int(data["adam_t"])
        self.step = int(data["step"])
        if carry:
            if self.model.cell.reversible:
                self.carry = carry
            else:
                self.carry = tuple(carry[str(i)] for i in range(len(carry)))

    def write_snapshot(self) -> dict | None:
        """Run the next batch forward and store the mid-sequence state with its buffers."""
        if self.cfg["task"] not in TASKS:
            return None
        cell = self.model.cell
        if not cell.reversible or not cell.buffered or cell.kind == "df-revgru":
            return None
        b = TASKS[self.cfg["task"]](min(self.cfg["batch"], 8), self.cfg["T"], self.cfg["V"], seed=self._rng(self.step))
        tape, _ = run_forward(self.model, b.inputs)
        (self.out / "snapshot.bin").write_bytes(state_to_bytes(tape.final_state))
        return {"steps": int(b.inputs.shape[0]), "batch": int(b.inputs.shape[1])}


def start_run(cfg: dict, out, timing=True, echo=print, resume=False) -> Run:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out, timing, echo)
    if resume:
        run.load_checkpoint()
    else:
        (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
        with open(out / "log.csv", "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_FIELDS)
    return run


def train(run: Run, steps: int | None = None, log_every: int = 100) -> dict:
    """Train until ``steps`` (default: the config's) and return the last evaluation."""
    cfg = run.cfg
    steps = cfg["steps"] if steps is None else steps
    last_eval = {}
    target = cfg.get("target_accuracy")
    with open(run.out / "log.csv", "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        while run.step < steps:
            row = run.train_one()
            w.writerow([_fmt(row[k]) for k in LOG_FIELDS])
            if log_every and (row["step"] % log_every == 0 or run.step == steps):
                run.echo(
                    f"step {row['step']:6d}  loss {row['loss']:.4f}  correct {row['tokens_correct']:.3f}  "
                    f"ratio {row['savings_ratio']:.2f}"
                )
            if cfg["eval_every"] and run.step % cfg["eval_every"] == 0:
                fh.flush()
                last_eval = run.evaluate()
                _append_eval(run, last_eval)
                run.echo(f"eval at step {run.step}: " + ", ".join(f"{k} {v:.4f}" for k, v in last_eval.items()))
                if target is not None and _reached(last_eval, target):
                    break
    run.save()
    run.write_snapshot()
    return last_eval


def _reached(ev: dict, target: float) -> bool:
    v = next(iter(ev.values()))
    return v <= target if "perplexity" in ev else v >= target


def _append_eval(run: Run, ev: dict):
    path = run.out / "eval.csv"
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["step", *ev])
        w.writerow([run.step, *(_fmt(v) for v in ev.values())])


# -- audits -----------------------------------------------------------------------------


def read_log(run_dir) -> list[dict]:
    with open(Path(run_dir) / "log.csv", newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def memstats(run_dir) -> dict:
    """Measured vs. ideal buffer bits and savings ratios over a run."""
    run_dir = Path(run_dir)
    text = (run_dir / "config.txt").read_text(encoding="utf-8")
    cfg = load_config(run_dir / "config.txt")
    rows = read_log(run_dir)
    if not rows:
        raise ValueError(f"{run_dir / 'log.csv'} has no rows")
    measured = np.array([r["measured_bits"] for r in rows])
    ideal = np.array([r["ideal_bits"] for r in rows])
    ratio = np.array([r["savings_ratio"] for r in rows])
    tail = max(1, len(rows) // 10)
    report = {
        "config_hash": config_hash(text),
        "cell": cfg["cell"],
        "task": cfg["task"],
        "bits_limit": cfg["bits_limit"],
        "steps": len(rows),
        "bits": {
            "measured_mean": float(measured.mean()),
            "ideal_mean": float(ideal.mean()),
            "measured_last": float(measured[-1]),
            "ideal_last": float(ideal[-1]),
            "measured_over_ideal": float(measured.sum() / ideal.sum()) if ideal.sum() > 0 else None,
        },
        "ratios": {
            "savings_mean": float(ratio.mean()) if np.all(np.isfinite(ratio)) else float("inf"),
            "savings_min": float(ratio.min()),
            "savings_final": float(ratio[-tail:].mean()),
        },
    }
    snap = run_dir / "snapshot.bin"
    if snap.exists():
        state = state_from_bytes(snap.read_bytes())
        report["snapshot"] = {
            "measured_bits": state.measured_bits(),
            "ideal_bits": state.ideal_bits,
            "limbs": {k: b.n_limbs for k, b in state.buffers.items()},
        }
    return report


def format_table(report: dict) -> str:
    lines = [
        f"run      {report['task']} / {report['cell']} (bits limit {report['bits_limit']}), config {report['config_hash']}",
        f"steps    {report['steps']}",
    ]
    b, r = report["bits"], report["ratios"]
    moi = b["measured_over_ideal"]
    lines += [
        f"{'':24s}{'mean':>14s}{'last':>14s}",
        f"{'measured bits':24s}{b['measured_mean']:14.1f}{b['measured_last']:14.1f}",
        f"{'ideal bits':24s}{b['ideal_mean']:14.1f}{b['ideal_last']:14.1f}",
        f"measured / ideal        {'n/a' if moi is None else f'{moi:.3f}'}",
        f"savings ratio           mean {r['savings_mean']:.2f}  min {r['savings_min']:.2f}  final {r['savings_final']:.2f}",
    ]
    if "snapshot" in report:
        s = report["snapshot"]
        lines.append(f"snapshot                {s['measured_bits']} measured bits, limbs {s['limbs']}")
    return "\n".join(lines)


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else "nan"
    return v


def report_json(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=2, sort_keys=True)
