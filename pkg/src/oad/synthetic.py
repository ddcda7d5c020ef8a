"""Deterministic synthetic corpus for desk-scale verification.

Frames are drawn near a background prototype or one of C class prototypes
(mutually orthogonal directions, `margin` apart) plus isotropic noise, so
separability is controlled by margin/noise. Ground-truth segments and
video-level labels are recorded in the manifest; the same seed always
produces byte-identical files.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Config
from .features import Corpus, VideoEntry, write_features, write_manifest


@dataclass
class SyntheticSpec:
    classes: int = 4
    dim: int = 16
    train_per_class: int = 12
    test_per_class: int = 6
    len_min: int = 40
    len_max: int = 120
    action_ratio: float = 0.2
    margin: float = 3.0
    noise: float = 0.5
    rate: float = 4.0
    second_class_prob: float = 0.25
    seed: int = 7

    @classmethod
    def from_config(cls, cfg: Config) -> "SyntheticSpec":
        return cls(cfg.synth_classes, cfg.synth_dim, cfg.synth_train_per_class,
                   cfg.synth_test_per_class, cfg.synth_len_min, cfg.synth_len_max,
                   cfg.synth_action_ratio, cfg.synth_margin, cfg.synth_noise,
                   cfg.synth_rate, cfg.synth_second_class_prob, cfg.seed)

    def validate(self) -> "SyntheticSpec":
        for name in ("classes", "dim", "train_per_class", "test_per_class",
                     "len_min", "len_max", "rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.action_ratio < 1:
            raise ValueError("action_ratio must be in (0, 1)")
        if self.len_min > self.len_max:
            raise ValueError("len_min > len_max")
        if self.margin <= self.noise:
            warnings.warn("margin <= noise: corpus may be unlearnable", RuntimeWarning)
        return self


def class_prototypes(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """(C+1) x D prototype matrix; row 0 is the background prototype."""
    protos = np.zeros((spec.classes + 1, spec.dim))
    gauss = rng.standard_normal((spec.classes, spec.dim))
    if spec.dim >= spec.classes:
        q, _ = np.linalg.qr(gauss.T)
        dirs = q[:, :spec.classes].T
    else:
        dirs = gauss / np.linalg.norm(gauss, axis=1, keepdims=True)
    protos[1:] = spec.margin * dirs
    return protos


def _instance_layout(num_frames: int, ratio: float, rng: np.random.Generator):
    """Non-overlapping (start, end) inclusive intervals totalling ~ratio*T frames."""
    budget = max(2, int(round(ratio * num_frames)))
    budget = min(budget, num_frames - 2)
    n_inst = int(min(rng.integers(1, 4), budget // 2))
    weights = rng.dirichlet(np.ones(n_inst))
    lengths = np.maximum(2, np.round(weights * budget).astype(int))
    while lengths.sum() > budget:
        lengths[int(np.argmax(lengths))] -= 1
    free = num_frames - int(lengths.sum())
    # n_inst+1 gaps: outer gaps may be empty, inner gaps need >= 1 frame
    inner = n_inst - 1
    extra = rng.multinomial(free - inner, np.ones(n_inst + 1) / (n_inst + 1))
    gaps = extra.copy()
    gaps[1:-1] += 1
    spans = []
    cursor = 0
    for g, ln in zip(gaps[:-1], lengths):
        cursor += int(g)
        spans.append((cursor, cursor + int(ln) - 1))
        cursor += int(ln)
    return spans


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Corpus:
    """Write feature files plus manifest under out_dir and return the corpus."""
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    protos = class_prototypes(spec, rng)

    corpus = Corpus(out_dir, spec.classes)
    for split, per_class in (("train", spec.train_per_class),
                             ("test", spec.test_per_class)):
        idx = 0
        for cls in range(1, spec.classes + 1):
            for _ in range(per_class):
                video_id = f"{split}_{idx:04d}"
                idx += 1
                T = int(rng.integers(spec.len_min, spec.len_max + 1))
                classes = [cls]
                if spec.classes > 1 and rng.random() < spec.second_class_prob:
                    other = int(rng.integers(1, spec.classes))
                    classes.append(other if other < cls else other + 1)
                spans = _instance_layout(T, spec.action_ratio, rng)
                # every listed class gets at least one instance
                inst_cls = [classes[i % len(classes)] for i in range(len(spans))]
                if len(spans) < len(classes):
                    classes = sorted(set(inst_cls))

                frame_cls = np.zeros(T, dtype=np.int64)
                segments = []
                for (s, e), c in zip(spans, inst_cls):
                    frame_cls[s:e + 1] = c
                    segments.append((c, s / spec.rate, (e + 1) / spec.rate))
                segments.sort(key=lambda seg: (seg[1], seg[0]))

                feats = protos[frame_cls] + spec.noise * rng.standard_normal((T, spec.dim))
                rel = Path("features") / f"{video_id}.feat"
                write_features(out_dir / rel, feats)
                corpus.videos.append(VideoEntry(
                    video_id, split, out_dir / rel, spec.rate,
                    set(classes), segments))
    write_manifest(corpus)
    return corpus
