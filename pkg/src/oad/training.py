"""Joint training of the proposal generator and the online recognizer.

One iteration = one Adam step on one batch of videos. Pseudo labels are
mined offline from the proposal branch and refreshed every
`refresh_interval` iterations; videos holding segment annotations flip a
seeded 90/10 coin at each refresh between ground-truth and pseudo tracks.
The run is bit-reproducible for a given seed and config.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, config_hash, parse_config, serialize_config
from .features import Corpus, VideoEntry, load_entry_features, segments_to_frames
from .model import Model, ModelDims
from .numerics import AdamState, adam_step
from .proposals import (
    LabelTrack,
    cas_loss_and_grads,
    frame_scores,
    generate_proposals,
    mil_loss_and_grad,
    proposals_to_labels,
    track_from_segments,
    video_class_scores,
)
from .recognizer import (
    backward_sequence,
    forward_sequence,
    frame_loss,
    frame_loss_dlogits,
    start_loss_and_dlogits,
)

CKPT_MAGIC = b"OADCKPT1\n"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainVideo:
    entry: VideoEntry
    raw: np.ndarray
    gt_track: LabelTrack | None = None
    strong_available: bool = False
    use_ground_truth: bool = False
    pseudo_track: LabelTrack | None = None

    @property
    def num_frames(self) -> int:
        return self.raw.shape[0]

    def active_track(self) -> LabelTrack:
        if self.strong_available and self.use_ground_truth and self.gt_track is not None:
            return self.gt_track
        assert self.pseudo_track is not None, "proposals never refreshed"
        return self.pseudo_track


@dataclass
class TrainResult:
    model: Model
    adam: AdamState
    metrics: list
    refresh_log: list
    videos: list
    checkpoints: list = field(default_factory=list)
    final_checkpoint: Path | None = None


def largest_remainder_split(n: int, ratio: float) -> int:
    """Items assigned to the ratio-weighted bucket of a 2-way split of n."""
    qa, qb = ratio * n, (1.0 - ratio) * n
    fa, fb = int(np.floor(qa)), int(np.floor(qb))
    if fa + fb < n and (qa - fa) >= (qb - fb):
        fa += 1
    return fa


def assign_supervision(strong_available: np.ndarray, ratio: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Per-video use-ground-truth flags: a seeded ratio split among the
    strong-capable videos; everything else stays on pseudo labels."""
    strong_available = np.asarray(strong_available, dtype=bool)
    use_gt = np.zeros(strong_available.size, dtype=bool)
    idx = np.flatnonzero(strong_available)
    n_gt = largest_remainder_split(idx.size, ratio)
    use_gt[rng.permutation(idx)[:n_gt]] = True
    return use_gt


def refresh_proposals(model: Model, videos: list[TrainVideo], cfg: Config) -> None:
    """Regenerate pseudo label tracks from the current proposal branch.

    Runs offline over each full video; no causality constraint applies.
    """
    for v in videos:
        feats, _ = model.trunk_forward(v.raw)
        scores = frame_scores(feats, model["score_w"].value)
        shat = video_class_scores(scores, cfg.kappa)
        pset = generate_proposals(scores, shat, v.entry.labels, cfg.theta_class,
                                  cfg.theta_score, cfg.group_gap, cfg.min_len,
                                  cfg.score_mode, v.entry.video_id)
        v.pseudo_track = proposals_to_labels(pset, v.num_frames)


def _selection_rng(cfg: Config, iteration: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([cfg.seed, iteration, 0x5eed])))


def total_loss(model: Model, batch: list[TrainVideo], cfg: Config,
               iteration: int) -> dict:
    """Forward + backward over one batch; grads accumulate into the model.

    Returns the loss components. The recognizer loss runs over
    non-overlapping seq_len chunks of every batch video; the proposal
    losses run over full videos and are weighted by tpg_weight.
    """
    lam = cfg.tpg_weight
    pool_window = 0 if cfg.no_temporal_pool else cfg.pool_window
    kappa = cfg.kappa

    feats, trunk_caches, scores, dfeats = [], [], [], []
    for v in batch:
        f, cache = model.trunk_forward(v.raw)
        feats.append(f)
        trunk_caches.append(cache)
        scores.append(frame_scores(f, model["score_w"].value))
        dfeats.append(np.zeros_like(f))

    # ---- recognizer over chunks -------------------------------------------
    chunk_fwds = []
    labels_parts, bits_parts = [], []
    for vi, v in enumerate(batch):
        track = v.active_track()
        for s in range(0, v.num_frames, cfg.seq_len):
            e = min(s + cfg.seq_len, v.num_frames)
            chunk_fwds.append((vi, s, forward_sequence(feats[vi][s:e], model, pool_window)))
            labels_parts.append(track.frame_labels[s:e])
            bits_parts.append(track.start_bits[s:e])
    act_probs = np.concatenate([fw.act_probs for _, _, fw in chunk_fwds])
    start_probs = np.concatenate([fw.start_probs for _, _, fw in chunk_fwds])
    labels = np.concatenate(labels_parts)
    bits = np.concatenate(bits_parts)

    frame_term = frame_loss(act_probs, labels)
    dact = frame_loss_dlogits(act_probs, labels)
    start_term, dstart = start_loss_and_dlogits(
        start_probs, bits, cfg.focal_gamma, cfg.neg_ratio,
        _selection_rng(cfg, iteration), cfg.start_loss_norm)

    row = 0
    for vi, s, fw in chunk_fwds:
        n = fw.feats.shape[0]
        dfeats[vi][s:s + n] += backward_sequence(
            fw, dact[row:row + n], dstart[row:row + n], model)
        row += n

    # ---- proposal losses ---------------------------------------------------
    mil_term = cas_term = 0.0
    if not cfg.no_tpg_loss:
        mil_grads = []
        for v, s in zip(batch, scores):
            loss, ds = mil_loss_and_grad(s, v.entry.labels, kappa)
            mil_term += loss
            mil_grads.append(ds)
        mil_term /= len(batch)
        cas_term, cas_ds, cas_df = cas_loss_and_grads(
            feats, scores, [v.entry.labels for v in batch],
            cfg.cas_margin, cfg.cas_sign == "verbatim")
        w = model["score_w"].value
        for vi in range(len(batch)):
            dscore = lam * (mil_grads[vi] / len(batch) + cas_ds[vi])
            model["score_w"].grad += feats[vi].T @ dscore
            dfeats[vi] += dscore @ w.T
            dfeats[vi] += lam * cas_df[vi]

    for vi in range(len(batch)):
        model.trunk_backward(dfeats[vi], trunk_caches[vi])

    oar_term = frame_term + start_term
    total = oar_term if cfg.no_tpg_loss else oar_term + lam * (mil_term + cas_term)
    return {"oar": oar_term, "frame": frame_term, "start": start_term,
            "mil": mil_term, "cas": cas_term, "total": total}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Model, cfg: Config, adam: AdamState,
                    rng_states: dict, videos: list[TrainVideo],
                    epoch: int, iteration: int) -> Path:
    """Deterministic binary checkpoint: versioned JSON header + raw arrays."""
    path = Path(path)
    names = sorted(model.params)
    header = {
        "version": 1,
        "config": serialize_config(cfg),
        "config_hash": config_hash(cfg),
        "dims": [model.dims.feature_dim, model.dims.trunk_dim,
                 model.dims.hidden, model.dims.classes],
        "no_rnn": model.no_rnn,
        "epoch": epoch,
        "iteration": iteration,
        "adam_t": adam.t,
        "rng": rng_states,
        "params": [{"name": n, "shape": list(model.params[n].value.shape)}
                   for n in names],
        "tracks": [{
            "id": v.entry.video_id,
            "frames": int(v.num_frames),
            "provenance": v.pseudo_track.provenance if v.pseudo_track else "",
            "use_gt": bool(v.use_ground_truth),
            "strong": bool(v.strong_available),
        } for v in videos],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].value).tobytes())
        for n in names:
            fh.write(np.ascontiguousarray(
                adam.m.get(n, np.zeros_like(model.params[n].value))).tobytes())
            fh.write(np.ascontiguousarray(
                adam.v.get(n, np.zeros_like(model.params[n].value))).tobytes())
        for v in videos:
            if v.pseudo_track is None:
                fh.write(struct.pack("<I", 0))
                continue
            fh.write(struct.pack("<I", 1))
            fh.write(v.pseudo_track.frame_labels.astype("<i8").tobytes())
            fh.write(v.pseudo_track.start_bits.astype(np.uint8).tobytes())
    return path


@dataclass
class Checkpoint:
    model: Model
    cfg: Config
    adam: AdamState
    header: dict
    tracks: dict  # video_id -> LabelTrack (pseudo snapshot)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        if header.get("version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint version")
        cfg = parse_config(header["config"])
        dims = ModelDims(*header["dims"])
        model = Model(dims, np.random.Generator(np.random.PCG64(0)),
                      header["no_rnn"])
        names = sorted(model.params)
        assert [p["name"] for p in header["params"]] == names
        for n in names:
            p = model.params[n]
            raw = fh.read(p.value.size * 8)
            p.value[...] = np.frombuffer(raw, dtype="<f8").reshape(p.value.shape)
        adam = AdamState(cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2,
                         cfg.adam_eps, cfg.decay_mode == "decoupled",
                         t=header["adam_t"])
        for n in names:
            shape = model.params[n].value.shape
            size = model.params[n].value.size * 8
            adam.m[n] = np.frombuffer(fh.read(size), dtype="<f8").reshape(shape).copy()
            adam.v[n] = np.frombuffer(fh.read(size), dtype="<f8").reshape(shape).copy()
        tracks = {}
        for meta in header["tracks"]:
            (flag,) = struct.unpack("<I", fh.read(4))
            if not flag:
                continue
            t = meta["frames"]
            fl = np.frombuffer(fh.read(8 * t), dtype="<i8").copy()
            sb = np.frombuffer(fh.read(t), dtype=np.uint8).astype(bool)
            tracks[meta["id"]] = LabelTrack(fl, sb, meta["provenance"])
    return Checkpoint(model, cfg, adam, header, tracks)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def build_train_videos(corpus: Corpus) -> list[TrainVideo]:
    videos = []
    for entry in corpus.split("train"):
        seq = load_entry_features(entry)
        gt = None
        if entry.segments:
            gt = track_from_segments(
                segments_to_frames(entry.segments, entry.rate, seq.num_frames),
                seq.num_frames)
        videos.append(TrainVideo(entry, seq.data, gt))
    return videos


def train(corpus: Corpus, cfg: Config, out_dir=None) -> TrainResult:
    """Run the full joint loop; deterministic for a given (seed, config)."""
    cfg.validate()
    videos = build_train_videos(corpus)
    if not videos:
        raise ValueError("corpus has no training videos")
    d_in = videos[0].raw.shape[1]
    for v in videos:
        if v.raw.shape[1] != d_in:
            raise ValueError(f"{v.entry.video_id}: feature width {v.raw.shape[1]} != {d_in}")

    ss_init, ss_avail, ss_shuffle, ss_coin = np.random.SeedSequence(cfg.seed).spawn(4)
    dims = ModelDims(d_in, cfg.trunk_dim or d_in, cfg.hidden_size, corpus.num_classes)
    model = Model(dims, np.random.Generator(np.random.PCG64(ss_init)), cfg.no_rnn)
    adam = AdamState(cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2,
                     cfg.adam_eps, cfg.decay_mode == "decoupled")
    shuffle_rng = np.random.Generator(np.random.PCG64(ss_shuffle))
    coin_rng = np.random.Generator(np.random.PCG64(ss_coin))

    # which videos have segment annotations at all (the mixed-supervision knob)
    avail_rng = np.random.Generator(np.random.PCG64(ss_avail))
    candidates = [i for i, v in enumerate(videos) if v.gt_track is not None]
    n_strong = largest_remainder_split(len(candidates), cfg.strong_fraction)
    for i in avail_rng.permutation(np.array(candidates, dtype=np.int64))[:n_strong]:
        videos[i].strong_available = True

    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model, adam, [], [], videos)
    iteration = 0

    def rng_states():
        return {"shuffle": shuffle_rng.bit_generator.state,
                "coin": coin_rng.bit_generator.state}

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(videos))
        for lo in range(0, len(order), cfg.batch_videos):
            batch = [videos[i] for i in order[lo:lo + cfg.batch_videos]]
            if iteration % cfg.refresh_interval == 0:
                refresh_proposals(model, videos, cfg)
                use_gt = assign_supervision(
                    np.array([v.strong_available for v in videos]),
                    cfg.strong_ratio, coin_rng)
                for v, u in zip(videos, use_gt):
                    v.use_ground_truth = bool(u)
                result.refresh_log.append(iteration)
            model.zero_grads()
            comps = total_loss(model, batch, cfg, iteration)
            if not np.isfinite(comps["total"]) or comps["total"] > 1e6:
                raise TrainingDiverged(
                    f"loss diverged at iteration {iteration}: {comps['total']!r} "
                    f"(batch {[v.entry.video_id for v in batch]})",
                    result.checkpoints[-1] if result.checkpoints else None)
            adam_step(model.parameters(), adam)
            result.metrics.append({"iteration": iteration, **comps})
            iteration += 1
        if out_dir:
            p = save_checkpoint(out_dir / f"epoch_{epoch:04d}.ckpt", model, cfg,
                                adam, rng_states(), videos, epoch, iteration)
            result.checkpoints.append(p)

    if out_dir:
        result.final_checkpoint = save_checkpoint(
            out_dir / "final.ckpt", model, cfg, adam, rng_states(), videos,
            cfg.epochs, iteration)
        with open(out_dir / "metrics.tsv", "w") as fh:
            fh.write("iteration\tL_OAR\tL_MIL\tL_CAS\tL_total\n")
            for row in result.metrics:
                fh.write(f"{row['iteration']}\t{row['oar']!r}\t{row['mil']!r}"
                         f"\t{row['cas']!r}\t{row['total']!r}\n")
    return result
