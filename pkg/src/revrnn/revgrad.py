"""Backpropagation through time with reconstructed hidden states.

``reversible_backward`` walks a sequence backwards using only the final
state and its buffers, undoing one cell step at a time.  The stored-activation
baseline walks the same loop over a full record of states.  Both paths share
``_backward_walk`` so they perform the same floating-point operations in the
same order, which makes the stored path an exact oracle for the reversible one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .revbuffer import savings_ratio
from .revcells import RecurrentCell, RevState


class ReversalMismatch(AssertionError):
    """The state recovered at ``t = 0`` differs from the recorded initial state."""


# -- readout and losses ------------------------------------------------------


class SequenceModel:
    """A recurrent cell with a linear softmax readout of its hidden features."""

    def __init__(self, cell: RecurrentCell, n_out: int, seed: int | None = 0):
        self.cell = cell
        self.n_out = n_out
        rng = np.random.default_rng(None if seed is None else seed + 7919)
        n_feat = cell.hidden_size
        bound = 1.0 / np.sqrt(n_feat)
        self.head = {"Wo": rng.uniform(-bound, bound, (n_out, n_feat)), "bo": np.zeros(n_out)}

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"cell.{k}": v for k, v in self.cell.params.items()}
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.head["Wo"].T + self.head["bo"]


def softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray, int]:
    """Summed loss, gradient of the summed loss, and correct count; targets < 0 are ignored."""
    mask = targets >= 0
    probs = softmax(logits)
    idx = np.where(mask, targets, 0)
    rows = np.arange(len(targets))
    loss = -float(np.sum(np.log(probs[rows, idx] + 1e-300) * mask))
    grad = probs.copy()
    grad[rows, idx] -= 1.0
    grad *= mask[:, None]
    correct = int(np.sum((np.argmax(logits, axis=1) == targets) & mask))
    return loss, grad, correct


class HeadLoss:
    """Mean cross-entropy of the readout over all target tokens of a batch."""

    def __init__(self, model: SequenceModel, targets: np.ndarray):
        self.model = model
        self.targets = targets
        self.norm = max(int(np.sum(targets >= 0)), 1)

    def step(self, t: int, feats: np.ndarray):
        head = self.model.head
        _, dlogits, _ = cross_entropy(self.model.logits(feats), self.targets[t])
        dlogits /= self.norm
        grads = {"head.Wo": dlogits.T @ feats, "head.bo": dlogits.sum(axis=0)}
        return dlogits @ head["Wo"], grads


class ArrayLoss:
    """Fixed upstream gradients on the readout features, one array per step."""

    def __init__(self, dfeats: np.ndarray):
        self.dfeats = dfeats

    def step(self, t, feats):
        return self.dfeats[t], {}


# -- tape --------------------------------------------------------------------


@dataclass
class Tape:
    """Everything reversible backprop needs; no per-step hidden activations."""

    inputs: np.ndarray
    targets: np.ndarray | None
    initial: dict | tuple
    final_state: RevState | tuple
    loss: float = 0.0
    correct: int = 0
    n_targets: int = 0
    measured_bits: int = 0
    ideal_bits: float = 0.0
    buffer_bits: int = 0
    stored_bits: int = 0


def run_forward(model: SequenceModel, inputs, targets=None, initial=None, record: bool = False, stored_units: int = 0):
    """Run the quantized forward pass (float pass for baselines).

    Returns ``(tape, states)`` where ``states`` is the decoded state record
    ``[s_0, ..., s_T]`` when ``record`` is set (always for baselines).
    """
    cell = model.cell
    T, N = inputs.shape[0], inputs.shape[1]
    if cell.reversible:
        state = cell.init_state(N, initial, stored_units=stored_units)
        initial_snap = state.snapshot()
    else:
        state = cell.init_state(N, initial)
        initial_snap = state
        record = True
    decode = cell.decode
    states = [decode(state)] if record else None
    loss, correct = 0.0, 0
    for t in range(T):
        state = cell.forward(inputs[t], state)
        fs = decode(state)
        if states is not None:
            states.append(fs)
        if targets is not None:
            l, _, c = cross_entropy(model.logits(cell.output(fs)), targets[t])
            loss += l
            correct += c
    tape = Tape(inputs, targets, initial_snap, state)
    if targets is not None:
        tape.n_targets = int(np.sum(targets >= 0))
        tape.loss = loss / max(tape.n_targets, 1)
        tape.correct = correct
    if cell.reversible:
        tape.measured_bits = state.measured_bits()
        tape.ideal_bits = state.ideal_bits
        tape.buffer_bits = state.buffer_bits()
        tape.stored_bits = state.stored_bits()
    return tape, states


# -- backward ----------------------------------------------------------------


class MemoryMeter:
    """Peak bytes of activation arrays live at any one step of a backward walk."""

    def __init__(self):
        self.peak = 0

    @classmethod
    def nbytes(cls, obj) -> int:
        if isinstance(obj, np.ndarray):
            return obj.nbytes
        if isinstance(obj, dict):
            return sum(cls.nbytes(v) for v in obj.values())
        if isinstance(obj, (tuple, list)):
            return sum(cls.nbytes(v) for v in obj)
        return 0

    def observe(self, *arrays) -> None:
        self.peak = max(self.peak, self.nbytes(arrays))


def _add_grads(acc: dict, grads: dict, prefix: str = "") -> None:
    for k, v in grads.items():
        key = prefix + k
        if key in acc:
            acc[key] += v
        else:
            acc[key] = v.copy()


def _backward_walk(cell, inputs, loss, final_fstate, prev_of: Callable, meter=None, want_dx=False, dfinal=None):
    T = inputs.shape[0]
    grads: dict[str, np.ndarray] = {}
    f_new = final_fstate
    if dfinal is None:
        carry = tuple(np.zeros_like(a) for a in f_new)
    else:
        carry = tuple(np.array(d, dtype=np.float64) for d in dfinal)
    dxs = [None] * T if want_dx else None
    for t in range(T - 1, -1, -1):
        dout, hgrads = loss.step(t, cell.output(f_new))
        _add_grads(grads, hgrads)
        carry = tuple(c + d for c, d in zip(carry, cell.output_backward(dout)))
        f_prev, live = prev_of(t)
        carry, dx, cgrads = cell.step_backward(inputs[t], f_prev, f_new, carry)
        _add_grads(grads, cgrads, "cell.")
        if want_dx:
            dxs[t] = dx
        if meter is not None:
            meter.observe(live, f_prev, f_new, carry, dx)
        f_new = f_prev
    return grads, carry, dxs


def reverse_walk(cell, inputs, final_state: RevState, initial: dict, loss, meter=None, want_dx=False, dfinal=None):
    """Backward walk that rebuilds each earlier state with ``cell.reverse``.

    ``dfinal`` is an upstream gradient on the final state.  Returns
    ``(grads, dstate0, dxs)``; grads are keyed ``cell.<name>``.  The final
    state's buffers are consumed.
    """
    holder = {"state": final_state}

    def prev_of(t):
        prev = cell.reverse(inputs[t], holder["state"])
        holder["state"] = prev
        return cell.decode(prev), prev.values

    out = _backward_walk(cell, inputs, loss, cell.decode(final_state), prev_of, meter, want_dx, dfinal)
    recovered = holder["state"]
    if not recovered.values_equal(initial):
        bad = [k for k in recovered.values if not np.array_equal(recovered.values[k], initial[k])]
        raise ReversalMismatch(f"recovered initial state differs in {bad}")
    return out


def reversible_backward(model: SequenceModel, tape: Tape, loss=None, meter: MemoryMeter | None = None, want_dx=False, dfinal=None):
    """Gradients from the tape alone, reconstructing each earlier state.

    Returns ``(grads, dstate0, dxs)``.  Raises :class:`ReversalMismatch` if the
    recovered initial state differs from the tape's snapshot.  The tape's
    final state is consumed: its buffers are emptied by the walk.
    """
    if loss is None:
        loss = HeadLoss(model, tape.targets)
    return reverse_walk(model.cell, tape.inputs, tape.final_state, tape.initial, loss, meter, want_dx, dfinal)


def stored_activation_backward(model: SequenceModel, states: list, inputs, loss=None, targets=None, meter=None, want_dx=False, dfinal=None):
    """Ordinary BPTT over a record ``[s_0, ..., s_T]`` of decoded states."""
    cell = model.cell
    if loss is None:
        loss = HeadLoss(model, targets)

    def prev_of(t):
        return states[t], states

    return _backward_walk(cell, inputs, loss, states[-1], prev_of, meter, want_dx, dfinal)


# -- gradient checking ---------------------------------------------------------


def surrogate_loss(model: SequenceModel, inputs, targets, initial=None) -> tuple[float, list]:
    cell = model.cell
    fs = initial if initial is not None else cell.zero_float_state(inputs.shape[1])
    states = [fs]
    total = 0.0
    for t in range(inputs.shape[0]):
        fs = cell.surrogate_step(inputs[t], fs)
        states.append(fs)
        total += cross_entropy(model.logits(cell.output(fs)), targets[t])[0]
    return total / max(int(np.sum(targets >= 0)), 1), states


def finite_diff_check(model: SequenceModel, inputs, targets, epsilon=1e-5, n_checks=40, seed=0, initial=None):
    """Max relative error between analytic and central-difference gradients.

    Runs on the float surrogate so the loss is differentiable.  Relative
    error is ``|a - n| / max(|a|, |n|, 1e-7)`` over a random parameter subset.
    """
    rng = np.random.default_rng(seed)
    _, states = surrogate_loss(model, inputs, targets, initial)
    analytic, _, _ = stored_activation_backward(model, states, inputs, targets=targets)
    params = model.parameters()
    worst = 0.0
    names = sorted(params)
    for _ in range(n_checks):
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p[idx]
        p[idx] = old + epsilon
        up, _ = surrogate_loss(model, inputs, targets, initial)
        p[idx] = old - epsilon
        down, _ = surrogate_loss(model, inputs, targets, initial)
        p[idx] = old
        num = (up - down) / (2 * epsilon)
        a = analytic.get(name, np.zeros_like(p))[idx]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-7))
    return worst


# -- optimizers ------------------------------------------------------------------


def clip_grad_norm(grads: dict, max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    for k, p in params.items():
        if k in grads:
            p -= lr * grads[k]
    return params


@dataclass
class AdamState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    b1, b2 = state.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# -- one training iteration ------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    correct: int
    n_targets: int
    measured_bits: int
    ideal_bits: float
    savings_ratio: float
    wall_ms: float
    final: dict | tuple | None = None


def train_step(model: SequenceModel, inputs, targets, optimizer, clip: float | None = None, initial=None) -> StepResult:
    """Forward, backward (reversible when the cell allows it) and one update."""
    t0 = time.perf_counter()
    cell = model.cell
    tape, states = run_forward(model, inputs, targets, initial)
    if cell.reversible:
        final = tape.final_state.snapshot()
        grads, _, _ = reversible_backward(model, tape)
        ratio = savings_ratio(inputs.shape[0], cell.state_units, tape.measured_bits, inputs.shape[1])
    else:
        final = tape.final_state
        grads, _, _ = stored_activation_backward(model, states, inputs, targets=targets)
        ratio = 1.0
    clip_grad_norm(grads, clip)
    params = model.parameters()
    if isinstance(optimizer, AdamState):
        adam_step(params, grads, optimizer)
    else:
        sgd_step(params, grads, float(optimizer))
    return StepResult(
        tape.loss,
        tape.correct,
        tape.n_targets,
        tape.measured_bits,
        tape.ideal_bits,
        ratio,
        (time.perf_counter() - t0) * 1000.0,
        final,
    )


def predict(model: SequenceModel, inputs, initial=None) -> np.ndarray:
    """Argmax token at every step, shape ``(T, N)``."""
    cell = model.cell
    state = cell.init_state(inputs.shape[1], initial)
    out = np.empty(inputs.shape[:2], dtype=np.int64)
    for t in range(inputs.shape[0]):
        state = cell.forward(inputs[t], state)
        out[t] = np.argmax(model.logits(cell.output(cell.decode(state))), axis=1)
    return out
