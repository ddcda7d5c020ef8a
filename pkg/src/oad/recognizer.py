"""Causal per-frame recognizer: LSTM, windowed max pooling, two heads.

The action head reads the current hidden state; the class-agnostic start
head reads an entrywise max over the last M+1 hidden states. Training uses
per-frame cross entropy plus a focal loss on the sparse start labels with
3x negative sampling. Backward passes are explicit; the max pool routes
gradient to the earliest maximal element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    PROB_EPS,
    NumericsError,
    relu,
    sigmoid,
    softmax,
    softmax_backward,
)


@dataclass
class FrameOutput:
    """Per-frame class distribution (index 0 = background) and start distribution."""

    action: np.ndarray  # C+1 probabilities
    start: np.ndarray   # 2 probabilities, index 1 = start


# ---------------------------------------------------------------------------
# recurrent cell
# ---------------------------------------------------------------------------

def lstm_step(x, h_prev, c_prev, wx, wh, b):
    """One LSTM step. Returns (h, c, cache). Gate order in the packed
    weights is input, forget, candidate, output."""
    hsz = h_prev.shape[0]
    z = x @ wx + h_prev @ wh + b
    i = sigmoid(z[:hsz])
    f = sigmoid(z[hsz:2 * hsz])
    g = np.tanh(z[2 * hsz:3 * hsz])
    o = sigmoid(z[3 * hsz:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    if not np.all(np.isfinite(h)):
        raise NumericsError("non-finite recurrent state")
    return h, c, (x, h_prev, c_prev, i, f, g, o, tc)


def lstm_step_backward(dh, dc, cache, wx, wh, dwx, dwh, db):
    """Backward through one step; accumulates weight grads, returns
    (dx, dh_prev, dc_prev)."""
    x, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dz = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        dg * (1.0 - g * g),
        do * o * (1.0 - o),
    ])
    dwx += np.outer(x, dz)
    dwh += np.outer(h_prev, dz)
    db += dz
    return dz @ wx.T, dz @ wh.T, dc_prev


# ---------------------------------------------------------------------------
# pooling and heads
# ---------------------------------------------------------------------------

def temporal_pool(ring) -> np.ndarray:
    """Entrywise max over the buffered hidden states (most recent window)."""
    if len(ring) == 0:
        raise NumericsError("temporal_pool of an empty buffer")
    if len(ring) == 1:
        return np.array(ring[0], copy=True)
    return np.max(np.stack(ring), axis=0)


def heads(h: np.ndarray, pooled: np.ndarray, act_w: np.ndarray,
          start_w: np.ndarray) -> FrameOutput:
    return FrameOutput(softmax(h @ act_w), softmax(pooled @ start_w))


# ---------------------------------------------------------------------------
# whole-sequence forward / backward (training path)
# ---------------------------------------------------------------------------

@dataclass
class SequenceForward:
    feats: np.ndarray        # T x D inputs
    hidden: np.ndarray       # T x H
    pooled: np.ndarray       # T x H
    pool_src: np.ndarray     # T x H source step of each pooled entry
    act_probs: np.ndarray    # T x (C+1)
    start_probs: np.ndarray  # T x 2
    caches: object           # cell caches (LSTM) or relu masks (no_rnn)


def forward_sequence(feats: np.ndarray, model, pool_window: int) -> SequenceForward:
    """Run the recognizer over one chunk from a zero initial state."""
    T = feats.shape[0]
    hsz = model.dims.hidden

    if model.no_rnn:
        pre1 = feats @ model["ff1_w"].value + model["ff1_b"].value
        h1 = relu(pre1)
        pre2 = h1 @ model["ff2_w"].value + model["ff2_b"].value
        hidden = relu(pre2)
        caches = (h1, pre1 > 0, pre2 > 0)
    else:
        hidden = np.empty((T, hsz))
        caches = []
        h = np.zeros(hsz)
        c = np.zeros(hsz)
        wx, wh, b = (model["rnn_wx"].value, model["rnn_wh"].value,
                     model["rnn_b"].value)
        for t in range(T):
            h, c, cache = lstm_step(feats[t], h, c, wx, wh, b)
            hidden[t] = h
            caches.append(cache)

    pooled = np.empty((T, hsz))
    pool_src = np.empty((T, hsz), dtype=np.int64)
    for t in range(T):
        lo = max(0, t - pool_window)
        window = hidden[lo:t + 1]
        am = np.argmax(window, axis=0)  # earliest max wins ties
        pool_src[t] = am + lo
        pooled[t] = window[am, np.arange(hsz)]

    act_probs = softmax(hidden @ model["act_w"].value, axis=1)
    start_probs = softmax(pooled @ model["start_w"].value, axis=1)
    return SequenceForward(feats, hidden, pooled, pool_src, act_probs,
                           start_probs, caches)


def backward_sequence(fwd: SequenceForward, dact_logits: np.ndarray,
                      dstart_logits: np.ndarray, model) -> np.ndarray:
    """Backprop head-logit gradients through pooling and the cell.

    Accumulates into the model's parameter grads and returns the gradient
    w.r.t. the chunk's input features.
    """
    T, hsz = fwd.hidden.shape
    model["act_w"].grad += fwd.hidden.T @ dact_logits
    model["start_w"].grad += fwd.pooled.T @ dstart_logits
    dh_direct = dact_logits @ model["act_w"].value.T
    dpooled = dstart_logits @ model["start_w"].value.T

    # route pooled gradient to the hidden state that produced each max
    dh_pool = np.zeros((T, hsz))
    cols = np.tile(np.arange(hsz), T)
    np.add.at(dh_pool, (fwd.pool_src.reshape(-1), cols), dpooled.reshape(-1))
    dh_total = dh_direct + dh_pool

    if model.no_rnn:
        h1, mask1, mask2 = fwd.caches
        dpre2 = dh_total * mask2
        model["ff2_w"].grad += h1.T @ dpre2
        model["ff2_b"].grad += dpre2.sum(axis=0)
        dpre1 = (dpre2 @ model["ff2_w"].value.T) * mask1
        model["ff1_w"].grad += fwd.feats.T @ dpre1
        model["ff1_b"].grad += dpre1.sum(axis=0)
        return dpre1 @ model["ff1_w"].value.T

    dfeats = np.zeros_like(fwd.feats)
    wx, wh = model["rnn_wx"].value, model["rnn_wh"].value
    dwx, dwh, db = (model["rnn_wx"].grad, model["rnn_wh"].grad,
                    model["rnn_b"].grad)
    dh_next = np.zeros(hsz)
    dc_next = np.zeros(hsz)
    for t in range(T - 1, -1, -1):
        dx, dh_next, dc_next = lstm_step_backward(
            dh_total[t] + dh_next, dc_next, fwd.caches[t], wx, wh, dwx, dwh, db)
        dfeats[t] = dx
    return dfeats


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def frame_loss(act_probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross entropy of per-frame class probabilities vs integer labels."""
    act_probs = np.atleast_2d(act_probs)
    labels = np.asarray(labels, dtype=np.int64)
    if act_probs.shape[0] != labels.shape[0]:
        raise NumericsError(
            f"{act_probs.shape[0]} prediction rows vs {labels.shape[0]} labels")
    picked = act_probs[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_EPS))))


def frame_loss_dlogits(act_probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of frame_loss w.r.t. the action-head logits."""
    n = labels.shape[0]
    picked = act_probs[np.arange(n), labels]
    dp = np.zeros_like(act_probs)
    live = picked > PROB_EPS
    dp[np.flatnonzero(live), labels[live]] = -1.0 / (picked[live] * n)
    return softmax_backward(act_probs, dp, axis=1)


def select_start_frames(start_bits: np.ndarray, neg_ratio: int,
                        rng: np.random.Generator) -> np.ndarray:
    """All positive frames plus up to neg_ratio-times-as-many sampled negatives.

    A batch with no positives still contributes one sampled negative so the
    start head keeps receiving signal.
    """
    bits = np.asarray(start_bits, dtype=bool)
    pos = np.flatnonzero(bits)
    neg_pool = np.flatnonzero(~bits)
    want = neg_ratio * pos.size if pos.size else min(1, neg_pool.size)
    n_neg = min(want, neg_pool.size)
    negs = rng.choice(neg_pool, size=n_neg, replace=False) if n_neg else neg_pool[:0]
    return np.sort(np.concatenate([pos, negs]))


def _focal_terms(p: np.ndarray, gamma: float):
    """Focal value -(1-p)^g * log(p) and its derivative w.r.t. p, elementwise."""
    logp = np.log(np.maximum(p, PROB_EPS))
    om = np.maximum(1.0 - p, 0.0)
    vals = -(om ** gamma) * logp
    d = np.zeros_like(p)
    if gamma > 0:
        inner = om > 0
        d[inner] += gamma * om[inner] ** (gamma - 1.0) * logp[inner]
    live = p > PROB_EPS
    d[live] -= (om[live] ** gamma) / p[live]
    return vals, d


def start_loss(start_probs: np.ndarray, start_bits: np.ndarray, gamma: float,
               neg_ratio: int, rng: np.random.Generator,
               normalize: str = "selected") -> float:
    loss, _ = start_loss_and_dlogits(start_probs, start_bits, gamma,
                                     neg_ratio, rng, normalize)
    return loss


def start_loss_and_dlogits(start_probs: np.ndarray, start_bits: np.ndarray,
                           gamma: float, neg_ratio: int,
                           rng: np.random.Generator,
                           normalize: str = "selected"):
    """Focal start loss over the selected frames plus its logit gradient.

    normalize="selected" averages over the selected frames; "all" divides
    by the total frame count instead (the sparser normalization).
    """
    if normalize not in ("selected", "all"):
        raise ValueError(f"unknown normalize {normalize!r}")
    bits = np.asarray(start_bits, dtype=bool)
    sel = select_start_frames(bits, neg_ratio, rng)
    dlogits = np.zeros_like(start_probs)
    if sel.size == 0:
        return 0.0, dlogits
    denom = sel.size if normalize == "selected" else start_probs.shape[0]
    m = bits[sel].astype(np.int64)  # true bit per selected frame
    p = start_probs[sel, m]
    vals, dp = _focal_terms(p, gamma)
    dprobs = np.zeros((sel.size, 2))
    dprobs[np.arange(sel.size), m] = dp / denom
    dlogits[sel] = softmax_backward(start_probs[sel], dprobs, axis=1)
    return float(vals.sum() / denom), dlogits


def oar_loss(frame_term: float, start_term: float) -> float:
    return frame_term + start_term
