"""Named finite-difference checks over every loss path.

Used by the `gradcheck` CLI subcommand and the acceptance suite. Each case
builds a small randomized instance, wires the analytic backward pass into
parameter grads, and compares against central differences.
"""

from __future__ import annotations

import numpy as np

from .config import Config
from .features import VideoEntry
from .model import Model, ModelDims
from .numerics import Parameter, grad_check, softmax_cross_entropy
from .proposals import (
    cas_loss_and_grads,
    frame_scores,
    mil_loss_and_grad,
    track_from_segments,
)
from .recognizer import (
    backward_sequence,
    forward_sequence,
    frame_loss,
    frame_loss_dlogits,
    start_loss_and_dlogits,
)
from .training import TrainVideo, total_loss


def toy_model(rng, d_in=5, d=5, hidden=6, classes=3, no_rnn=False) -> Model:
    return Model(ModelDims(d_in, d, hidden, classes), rng, no_rnn)


def toy_video(rng, video_id, num_frames, d_in, classes_present, num_classes,
              rate=1.0) -> TrainVideo:
    raw = rng.normal(size=(num_frames, d_in))
    # one short segment per labelled class, non-overlapping
    segs, cursor = [], 1
    for c in sorted(classes_present):
        ln = 3
        segs.append((c, cursor, min(cursor + ln - 1, num_frames - 1)))
        cursor += ln + 2
    entry = VideoEntry(video_id, "train", None, rate, set(classes_present),
                       [(c, s / rate, (e + 1) / rate) for c, s, e in segs])
    v = TrainVideo(entry, raw)
    v.pseudo_track = track_from_segments(segs, num_frames)
    v.pseudo_track.provenance = "pseudo"
    return v


def gradient_suite(seed: int = 0) -> list[dict]:
    """Run every check; returns dicts with name / max relative error / tol."""
    rng = np.random.default_rng(seed)
    results = []

    def case(name, err, tol):
        results.append({"name": name, "err": float(err), "tol": tol,
                        "ok": bool(err <= tol)})

    # softmax + cross entropy on raw logits
    logits = Parameter("logits", rng.normal(size=7))
    target = np.abs(rng.normal(size=7))
    target /= target.sum()

    def ce_fn():
        logits.zero_grad()
        loss, _, dlogits = softmax_cross_entropy(logits.value, target)
        logits.grad += dlogits
        return loss

    case("softmax_cross_entropy", grad_check(ce_fn, [logits]), 1e-5)

    # MIL through trunk + frame scores
    model = toy_model(np.random.default_rng(seed + 1))
    raw = rng.normal(size=(11, 5))

    def mil_fn():
        model.zero_grads()
        feats, cache = model.trunk_forward(raw)
        scores = frame_scores(feats, model["score_w"].value)
        loss, ds = mil_loss_and_grad(scores, {1, 3}, kappa=4)
        model["score_w"].grad += feats.T @ ds
        model.trunk_backward(ds @ model["score_w"].value.T, cache)
        return loss

    case("mil_loss", grad_check(mil_fn, model.parameters()), 1e-5)

    # CAS over a 3-video batch sharing classes
    model2 = toy_model(np.random.default_rng(seed + 2))
    raws = [rng.normal(size=(t, 5)) for t in (9, 12, 7)]
    labels = [{1, 2}, {1}, {2, 3}]

    def cas_fn():
        model2.zero_grads()
        feats, caches, scores = [], [], []
        for r in raws:
            f, c = model2.trunk_forward(r)
            feats.append(f)
            caches.append(c)
            scores.append(frame_scores(f, model2["score_w"].value))
        loss, ds, df = cas_loss_and_grads(feats, scores, labels, margin=0.5)
        for i in range(len(raws)):
            model2["score_w"].grad += feats[i].T @ ds[i]
            model2.trunk_backward(ds[i] @ model2["score_w"].value.T + df[i],
                                  caches[i])
        return loss

    case("cas_loss", grad_check(cas_fn, model2.parameters()), 1e-5)

    # recognizer chunk: frame + focal start loss through LSTM, pool, heads
    model3 = toy_model(np.random.default_rng(seed + 3))
    raw3 = rng.normal(size=(8, 5))
    labels3 = rng.integers(0, 4, size=8)
    bits3 = np.zeros(8, dtype=bool)
    bits3[[1, 5]] = True
    sel_rng_seed = seed + 100

    def oar_fn():
        model3.zero_grads()
        feats, cache = model3.trunk_forward(raw3)
        fwd = forward_sequence(feats, model3, pool_window=3)
        f_term = frame_loss(fwd.act_probs, labels3)
        dact = frame_loss_dlogits(fwd.act_probs, labels3)
        s_term, dstart = start_loss_and_dlogits(
            fwd.start_probs, bits3, gamma=2.0, neg_ratio=3,
            rng=np.random.default_rng(sel_rng_seed))
        dfeats = backward_sequence(fwd, dact, dstart, model3)
        model3.trunk_backward(dfeats, cache)
        return f_term + s_term

    case("recognizer_chunk", grad_check(oar_fn, model3.parameters()), 1e-4)

    # the whole objective on a 2-video batch
    cfg = Config(hidden_size=6, seq_len=6, pool_window=2, kappa=4,
                 batch_videos=2, seed=seed)
    model4 = toy_model(np.random.default_rng(seed + 4))
    batch = [toy_video(rng, "a", 10, 5, {1, 2}, 3),
             toy_video(rng, "b", 13, 5, {1, 3}, 3)]

    def total_fn():
        model4.zero_grads()
        return total_loss(model4, batch, cfg, iteration=0)["total"]

    case("total_loss", grad_check(total_fn, model4.parameters()), 1e-4)
    return results
