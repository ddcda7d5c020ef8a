"""Dense float64 math shared by every other module.

Matrices are plain numpy arrays (row-major, 64-bit). Feature files are the
only 32-bit surface; they are widened on ingestion. All gradients here are
hand-derived; `grad_check` is the finite-difference harness that keeps them
honest.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_EPS = 1e-12  # clamp applied to any probability before log


class NumericsError(ValueError):
    pass


def ensure_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {name}")
    return arr


# ---------------------------------------------------------------------------
# activations / losses
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-stabilized softmax along `axis`."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise NumericsError("softmax of empty input")
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient w.r.t. logits given gradient w.r.t. softmax outputs."""
    inner = np.sum(dprobs * probs, axis=axis, keepdims=True)
    return probs * (dprobs - inner)


def temporal_softmax(scores: np.ndarray) -> np.ndarray:
    """Attention over the time axis (axis 0) of a score vector or T x C matrix."""
    return softmax(scores, axis=0)


def cosine_similarity(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine similarity clamped to [-1, 1]; zero-norm inputs give 0 with a warning."""
    d, _, _, degenerate = _cosine_full(np.asarray(x, float), np.asarray(y, float))
    if degenerate:
        warnings.warn("cosine_similarity of zero-norm input, returning 0", RuntimeWarning)
    return d


def _cosine_full(x: np.ndarray, y: np.ndarray):
    """Cosine similarity plus gradients w.r.t. both inputs.

    Returns (d, dd/dx, dd/dy, degenerate). Gradients are zero when either
    norm vanishes or the clamp to [-1, 1] is active, matching the value path.
    """
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        return 0.0, np.zeros_like(x), np.zeros_like(y), True
    raw = float(np.dot(x, y) / (nx * ny))
    if raw > 1.0 or raw < -1.0:
        return float(np.clip(raw, -1.0, 1.0)), np.zeros_like(x), np.zeros_like(y), False
    gx = (y / ny - raw * x / nx) / nx
    gy = (x / nx - raw * y / ny) / ny
    return raw, gx, gy, False


def cross_entropy(target: np.ndarray, predicted: np.ndarray) -> float:
    """-sum(target * log(predicted)), predicted clamped to [PROB_EPS, 1]."""
    t = np.asarray(target, float)
    p = np.asarray(predicted, float)
    if t.shape != p.shape:
        raise NumericsError(f"cross_entropy shape mismatch {t.shape} vs {p.shape}")
    return float(-np.sum(t * np.log(np.maximum(p, PROB_EPS))))


def cross_entropy_backward(target: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """dL/dpredicted for cross_entropy; zero where the clamp is active."""
    t = np.asarray(target, float)
    p = np.asarray(predicted, float)
    grad = np.zeros_like(p)
    live = p > PROB_EPS
    grad[live] = -t[live] / p[live]
    return grad


def softmax_cross_entropy(logits: np.ndarray, target: np.ndarray):
    """Fused loss + gradient w.r.t. logits (clamp-aware)."""
    p = softmax(logits)
    loss = cross_entropy(target, p)
    dlogits = softmax_backward(p, cross_entropy_backward(target, p))
    return loss, p, dlogits


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# parameters and the optimizer
# ---------------------------------------------------------------------------

@dataclass
class Parameter:
    """A named weight array with an accumulated gradient of the same shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise NumericsError(f"grad shape mismatch for {self.name}")

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


@dataclass
class AdamState:
    """Adam moments keyed by parameter name, plus the shared step counter."""

    lr: float = 1e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled: bool = False
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState) -> None:
    """One bias-corrected Adam update over `params`, in place.

    Weight decay is coupled (added to the gradient) unless state.decoupled.
    Grads are left untouched; the caller zeroes them. A non-finite gradient
    aborts before any parameter is modified.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericsError(f"non-finite gradient in parameter '{p.name}'")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad
        if state.weight_decay != 0.0 and not state.decoupled:
            g = g + state.weight_decay * p.value
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay != 0.0 and state.decoupled:
            update = update + state.weight_decay * p.value
        p.value -= state.lr * update


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------

def grad_check(
    loss_fn: Callable[[], float],
    params: Sequence[Parameter],
    delta: float = 1e-5,
) -> float:
    """Max relative error between analytic and central finite-difference grads.

    `loss_fn` must zero the grads of `params`, recompute the loss and
    repopulate the grads, and return the loss. It is evaluated twice at the
    base point first; any discrepancy means a non-deterministic loss and is
    an error (finite differences would be meaningless).
    """
    base = loss_fn()
    again = loss_fn()
    if base != again:
        raise NumericsError(f"loss_fn is non-deterministic ({base!r} != {again!r})")
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + delta
            hi = loss_fn()
            flat[k] = orig - delta
            lo = loss_fn()
            flat[k] = orig
            fd = (hi - lo) / (2.0 * delta)
            a = gflat[k]
            err = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
            if err > worst:
                worst = err
    # restore analytic grads so a caller can keep using them
    loss_fn()
    return worst
