"""Offline temporal proposal mining from video-level labels.

Frame scores are projected from trunk features, pooled top-k into video
scores for the multiple-instance loss, and regularized by a co-activity
similarity loss over same-class video pairs. Proposals come from two-stage
thresholding plus temporal grouping and are converted to per-frame pseudo
labels for the online recognizer.

Class indices are 1-based everywhere (0 is the background label); column
c-1 of a score matrix belongs to class c.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .numerics import (
    NumericsError,
    _cosine_full,
    cross_entropy,
    cross_entropy_backward,
    softmax,
    softmax_backward,
    temporal_softmax,
)


@dataclass(frozen=True)
class TemporalProposal:
    cls: int          # 1-based action class
    start: int        # first frame, inclusive
    end: int          # last frame, inclusive
    score: float      # mean raw frame score over [start, end]


@dataclass
class ProposalSet:
    video_id: str
    proposals: list[TemporalProposal] = field(default_factory=list)

    def for_class(self, cls: int) -> list[TemporalProposal]:
        return [p for p in self.proposals if p.cls == cls]


@dataclass
class LabelTrack:
    """Per-frame class labels (0 = background) plus binary start labels."""

    frame_labels: np.ndarray
    start_bits: np.ndarray
    provenance: str  # "ground_truth" | "pseudo"

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.frame_labels.astype(np.int64).tobytes())
        h.update(self.start_bits.astype(np.uint8).tobytes())
        h.update(self.provenance.encode())
        return h.hexdigest()


@dataclass
class RegionRepr:
    """High/low-attention feature aggregates of one video for one class."""

    video_id: str
    cls: int
    psi: np.ndarray  # attention-weighted feature sum
    phi: np.ndarray  # complement-weighted mean over the other frames


# ---------------------------------------------------------------------------
# scoring and the video-level loss
# ---------------------------------------------------------------------------

def frame_scores(features: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Linear projection of T x D features to T x C class scores."""
    features = np.asarray(features, float)
    weight = np.asarray(weight, float)
    if features.ndim != 2 or weight.ndim != 2 or features.shape[1] != weight.shape[0]:
        raise NumericsError(
            f"frame_scores shape mismatch {features.shape} @ {weight.shape}")
    return features @ weight


def topk_count(num_frames: int, kappa: int = 8) -> int:
    # floor(T / kappa) would give 0 for very short videos; clamp to 1
    return max(1, num_frames // kappa)


def topk_frame_indices(scores: np.ndarray, kappa: int = 8) -> np.ndarray:
    """Indices (k x C) of the k highest-scoring frames per class, ties by earliest frame."""
    k = topk_count(scores.shape[0], kappa)
    return np.argsort(-scores, axis=0, kind="stable")[:k]


def video_class_scores(scores: np.ndarray, kappa: int = 8) -> np.ndarray:
    """Per class, the mean of the top-k frame scores."""
    idx = topk_frame_indices(scores, kappa)
    return np.take_along_axis(scores, idx, axis=0).mean(axis=0)


def _label_target(classes: set[int], num_classes: int) -> np.ndarray:
    if not classes:
        raise NumericsError("video label set is empty")
    if not all(1 <= c <= num_classes for c in classes):
        raise NumericsError(f"class indices {sorted(classes)} out of range 1..{num_classes}")
    target = np.zeros(num_classes)
    for c in classes:
        target[c - 1] = 1.0
    return target / len(classes)


def mil_loss(video_scores: np.ndarray, classes: set[int]) -> float:
    """Cross entropy between the normalized multi-hot label and softmax(video scores)."""
    target = _label_target(classes, len(video_scores))
    return cross_entropy(target, softmax(video_scores))


def mil_loss_and_grad(scores: np.ndarray, classes: set[int], kappa: int = 8):
    """One video's MIL loss plus its gradient w.r.t. the frame scores."""
    idx = topk_frame_indices(scores, kappa)
    shat = np.take_along_axis(scores, idx, axis=0).mean(axis=0)
    target = _label_target(classes, scores.shape[1])
    probs = softmax(shat)
    loss = cross_entropy(target, probs)
    dshat = softmax_backward(probs, cross_entropy_backward(target, probs))
    dscores = np.zeros_like(scores)
    k = idx.shape[0]
    for c in range(scores.shape[1]):
        np.add.at(dscores[:, c], idx[:, c], dshat[c] / k)
    return loss, dscores


# ---------------------------------------------------------------------------
# co-activity similarity
# ---------------------------------------------------------------------------

def region_representations(features: np.ndarray, scores: np.ndarray,
                           video_id: str = "") -> list[RegionRepr]:
    """High/low-attention aggregates for every class of one video (T >= 2)."""
    T = features.shape[0]
    if T < 2:
        raise NumericsError("region representations need at least 2 frames")
    att = temporal_softmax(scores)  # T x C
    psi = features.T @ att                         # D x C
    phi = features.T @ (1.0 - att) / (T - 1)       # D x C
    return [RegionRepr(video_id, c + 1, psi[:, c].copy(), phi[:, c].copy())
            for c in range(scores.shape[1])]


def _pair_terms(psi_i, phi_i, psi_j, phi_j, margin: float, verbatim: bool):
    """The two hinge terms of one pair, with gradients w.r.t. all four vectors."""
    d_pp, g_pp_i, g_pp_j, _ = _cosine_full(psi_i, psi_j)
    d_pf, g_pf_i, g_pf_j, _ = _cosine_full(psi_i, phi_j)
    d_fp, g_fp_i, g_fp_j, _ = _cosine_full(phi_i, psi_j)

    if verbatim:
        u1 = d_pp - d_pf + margin
        u2 = d_pp - d_fp + margin
        s1, s2 = 1.0, -1.0
    else:
        # ranking form: same-class high-attention regions pulled together,
        # pushed away from low-attention regions
        u1 = d_pf - d_pp + margin
        u2 = d_fp - d_pp + margin
        s1, s2 = -1.0, 1.0

    loss = 0.5 * (max(0.0, u1) + max(0.0, u2))
    grads = [np.zeros_like(psi_i), np.zeros_like(phi_i),
             np.zeros_like(psi_j), np.zeros_like(phi_j)]
    if u1 > 0.0:
        grads[0] += 0.5 * (s1 * g_pp_i + s2 * g_pf_i)      # wrt psi_i
        grads[3] += 0.5 * s2 * g_pf_j                       # wrt phi_j
        grads[2] += 0.5 * s1 * g_pp_j                       # wrt psi_j
    if u2 > 0.0:
        grads[0] += 0.5 * s1 * g_pp_i
        grads[2] += 0.5 * (s1 * g_pp_j + s2 * g_fp_j)
        grads[1] += 0.5 * s2 * g_fp_i                       # wrt phi_i
    return loss, grads


def cas_pair_loss(a: RegionRepr, b: RegionRepr, margin: float,
                  verbatim: bool = False) -> float:
    """Hinge loss of one same-class video pair."""
    if a.cls != b.cls:
        raise NumericsError(f"pair loss across classes {a.cls} vs {b.cls}")
    loss, _ = _pair_terms(a.psi, a.phi, b.psi, b.phi, margin, verbatim)
    return loss


def cas_loss(reprs_per_video: list[list[RegionRepr]], labels: list[set[int]],
             margin: float, verbatim: bool = False) -> float:
    """Mean pair loss over all same-class pairs in a batch; 0 with no pairs."""
    num_classes = max((max(l) for l in labels if l), default=0)
    total, count = 0.0, 0
    for cls in range(1, num_classes + 1):
        members = [i for i, l in enumerate(labels) if cls in l and reprs_per_video[i]]
        for i, j in combinations(members, 2):
            total += cas_pair_loss(reprs_per_video[i][cls - 1],
                                   reprs_per_video[j][cls - 1], margin, verbatim)
            count += 1
    return total / count if count else 0.0


def cas_loss_and_grads(feats: list[np.ndarray], scores: list[np.ndarray],
                       labels: list[set[int]], margin: float,
                       verbatim: bool = False):
    """Batch CAS loss with gradients w.r.t. every score matrix and feature matrix.

    Videos shorter than 2 frames are skipped (their low-attention aggregate
    divides by T-1). Returns (loss, dscores list, dfeats list).
    """
    dscores = [np.zeros_like(s) for s in scores]
    dfeats = [np.zeros_like(f) for f in feats]
    num_classes = scores[0].shape[1] if scores else 0

    # per (video, class) aggregates for eligible videos
    att, psi, phi = {}, {}, {}
    for i, (f, s) in enumerate(zip(feats, scores)):
        if f.shape[0] < 2:
            continue
        a = temporal_softmax(s)
        att[i] = a
        psi[i] = f.T @ a
        phi[i] = f.T @ (1.0 - a) / (f.shape[0] - 1)

    pair_items = []  # (i, j, cls, loss, grads)
    for cls in range(1, num_classes + 1):
        members = [i for i, l in enumerate(labels) if cls in l and i in att]
        for i, j in combinations(members, 2):
            c = cls - 1
            loss, grads = _pair_terms(psi[i][:, c], phi[i][:, c],
                                      psi[j][:, c], phi[j][:, c], margin, verbatim)
            pair_items.append((i, j, cls, loss, grads))

    if not pair_items:
        return 0.0, dscores, dfeats

    scale = 1.0 / len(pair_items)
    dpsi = {k: np.zeros_like(psi[k]) for k in psi}
    dphi = {k: np.zeros_like(phi[k]) for k in phi}
    total = 0.0
    for i, j, cls, loss, (gpi, gfi, gpj, gfj) in pair_items:
        c = cls - 1
        total += loss
        dpsi[i][:, c] += scale * gpi
        dphi[i][:, c] += scale * gfi
        dpsi[j][:, c] += scale * gpj
        dphi[j][:, c] += scale * gfj

    for i in att:
        f, a = feats[i], att[i]
        T = f.shape[0]
        # psi = F^T a ; phi = F^T (1 - a) / (T - 1), per class column
        dfeats[i] += a @ dpsi[i].T
        dfeats[i] += (1.0 - a) @ dphi[i].T / (T - 1)
        da = f @ dpsi[i] - f @ dphi[i] / (T - 1)
        dscores[i] += softmax_backward(a, da, axis=0)
    return total * scale, dscores, dfeats


# ---------------------------------------------------------------------------
# proposal generation and pseudo labels
# ---------------------------------------------------------------------------

def generate_proposals(scores: np.ndarray, video_scores: np.ndarray,
                       classes: set[int], theta_class: float,
                       theta_score: float, gap: int = 0, min_len: int = 1,
                       score_mode: str = "raw",
                       video_id: str = "") -> ProposalSet:
    """Two-stage thresholding: keep confident classes, then group frames.

    Stage 1 keeps classes whose softmax video probability reaches
    theta_class; classes outside the video label are filtered out. Stage 2
    marks frames at or above theta_score (raw logits, or per-frame softmax
    values with score_mode="softmax"), bridges unmarked gaps up to `gap`
    frames, and drops groups shorter than min_len.
    """
    if score_mode not in ("raw", "softmax"):
        raise ValueError(f"unknown score_mode {score_mode!r}")
    class_probs = softmax(np.asarray(video_scores, float))
    frame_vals = scores if score_mode == "raw" else softmax(scores, axis=1)

    out = ProposalSet(video_id)
    for cls in range(1, scores.shape[1] + 1):
        if class_probs[cls - 1] < theta_class or cls not in classes:
            continue
        marked = np.flatnonzero(frame_vals[:, cls - 1] >= theta_score)
        if marked.size == 0:
            continue
        breaks = np.flatnonzero(np.diff(marked) > gap + 1)
        group_starts = np.concatenate(([0], breaks + 1))
        group_ends = np.concatenate((breaks, [marked.size - 1]))
        for gs, ge in zip(group_starts, group_ends):
            start, end = int(marked[gs]), int(marked[ge])
            if end - start + 1 < min_len:
                continue
            score = float(scores[start:end + 1, cls - 1].mean())
            out.proposals.append(TemporalProposal(cls, start, end, score))
    out.proposals.sort(key=lambda p: (p.cls, p.start))
    return out


def _paint_track(intervals, num_frames: int, provenance: str) -> LabelTrack:
    """Resolve possibly-overlapping class intervals into one label per frame.

    Higher score wins a contested frame; ties go to the lower class index.
    Start bits sit on the first frame of each same-class run of the
    resolved track, so every start is genuinely the onset of a segment.
    """
    frame_labels = np.zeros(num_frames, dtype=np.int64)
    for cls, start, end, score in sorted(
            intervals, key=lambda iv: (-iv[3], iv[0], iv[1])):
        if not (0 <= start <= end < num_frames):
            raise ValueError(
                f"interval [{start}, {end}] outside video of {num_frames} frames")
        span = frame_labels[start:end + 1]
        span[span == 0] = cls
    start_bits = np.zeros(num_frames, dtype=bool)
    prev = 0
    for t in range(num_frames):
        if frame_labels[t] != 0 and frame_labels[t] != prev:
            start_bits[t] = True
        prev = frame_labels[t]
    return LabelTrack(frame_labels, start_bits, provenance)


def proposals_to_labels(pset: ProposalSet, num_frames: int) -> LabelTrack:
    """Pseudo per-frame labels plus class-agnostic start bits from proposals."""
    return _paint_track([(p.cls, p.start, p.end, p.score) for p in pset.proposals],
                        num_frames, "pseudo")


def track_from_segments(segments, num_frames: int) -> LabelTrack:
    """Ground-truth label track from (class, start_frame, end_frame) segments."""
    return _paint_track([(c, s, e, 1.0) for c, s, e in segments],
                        num_frames, "ground_truth")
