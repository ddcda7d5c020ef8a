"""Frame-based and point-based average precision over detection logs.

F-AP ranks every test frame by its class probability; a frame is positive
when it lies inside a ground-truth segment of that class. P-AP ranks
emitted start events by confidence and greedily matches each to the
nearest unmatched ground-truth start of the same class and video within a
time threshold. Both use uninterpolated AP by default; means are over
classes with defined AP (background excluded).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import Corpus, segments_to_frames


class EvaluationError(ValueError):
    pass


def average_precision(ranked_positive: np.ndarray, total_positives: int,
                      interp: str = "none") -> float:
    """AP of a ranked boolean relevance list against `total_positives`."""
    if total_positives <= 0:
        raise EvaluationError("AP undefined without positives")
    flags = np.asarray(ranked_positive, dtype=bool)
    if flags.size == 0:
        return 0.0
    cum = np.cumsum(flags)
    ranks = np.arange(1, flags.size + 1)
    precision = cum / ranks
    if interp == "none":
        return float(precision[flags].sum() / total_positives)
    if interp == "11point":
        recall = cum / total_positives
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            at_least = precision[recall >= r - 1e-12]
            total += float(at_least.max()) if at_least.size else 0.0
        return total / 11.0
    raise EvaluationError(f"unknown interpolation {interp!r}")


def positive_frame_mask(segments, rate: float, num_frames: int, cls: int) -> np.ndarray:
    mask = np.zeros(num_frames, dtype=bool)
    for c, s, e in segments_to_frames(segments, rate, num_frames):
        if c == cls:
            mask[s:e + 1] = True
    return mask


def frame_ap(cls: int, logs: dict, corpus: Corpus,
             interp: str = "none") -> float | None:
    """F-AP of one class over all logged videos; None when the class has
    no positive frame (undefined, excluded from the mean)."""
    scores, positives = [], []
    for vid in sorted(logs):
        log = logs[vid]
        entry = corpus.by_id(vid)
        scores.append(log.act[:, cls])
        positives.append(positive_frame_mask(entry.segments, entry.rate,
                                             log.num_frames, cls))
    score_vec = np.concatenate(scores)
    pos_vec = np.concatenate(positives)
    if not pos_vec.any():
        return None
    order = np.argsort(-score_vec, kind="stable")  # ties keep (video, frame) order
    return average_precision(pos_vec[order], int(pos_vec.sum()), interp)


def ground_truth_starts(corpus: Corpus, video_ids) -> dict:
    """Per class, the (video_id, start_seconds) of every annotated segment."""
    out: dict[int, list] = {c: [] for c in range(1, corpus.num_classes + 1)}
    for vid in sorted(video_ids):
        for c, s, _ in corpus.by_id(vid).segments:
            out[c].append((vid, s))
    return out


def point_ap(cls: int, predictions, gt_starts, threshold_s: float,
             interp: str = "none") -> float | None:
    """P-AP of one class at a time threshold.

    predictions: (video_id, time_s, confidence) tuples; gt_starts:
    (video_id, time_s). A prediction is a true positive when an unmatched
    same-video ground-truth start lies within threshold_s seconds; matching
    is greedy in confidence order, nearest start first.
    """
    if not gt_starts:
        return None
    unmatched: dict[str, list] = {}
    for vid, t in gt_starts:
        unmatched.setdefault(vid, []).append(t)
    ranked = sorted(predictions, key=lambda p: (-p[2], p[0], p[1]))
    flags = np.zeros(len(ranked), dtype=bool)
    for k, (vid, t, _) in enumerate(ranked):
        pool = unmatched.get(vid, [])
        best = None
        for gi, gt in enumerate(pool):
            dist = abs(t - gt)
            if dist <= threshold_s and (best is None or (dist, gt) < best[:2]):
                best = (dist, gt, gi)
        if best is not None:
            pool.pop(best[2])
            flags[k] = True
    return average_precision(flags, len(gt_starts), interp)


def mean_ap(per_class: dict) -> float:
    defined = [v for v in per_class.values() if v is not None]
    if not defined:
        raise EvaluationError("no class has a defined AP")
    return float(np.mean(defined))


@dataclass
class EvalReport:
    f_ap: dict
    mean_f_ap: float
    p_ap: dict            # threshold -> {cls: ap | None}
    mean_p_ap: dict       # threshold -> mean
    skipped: list = field(default_factory=list)  # (metric, cls) with undefined AP

    def kv_lines(self) -> list[str]:
        lines = [f"mean_f_ap = {self.mean_f_ap:.6f}"]
        for thr in sorted(self.mean_p_ap):
            lines.append(f"mean_p_ap@{thr:g} = {self.mean_p_ap[thr]:.6f}")
        for cls in sorted(self.f_ap):
            v = self.f_ap[cls]
            lines.append(f"f_ap[{cls}] = " + ("undefined" if v is None else f"{v:.6f}"))
        return lines

    def table(self) -> str:
        thrs = sorted(self.mean_p_ap)
        head = "mean P-AP@ seconds: " + "  ".join(f"{t:>5g}" for t in thrs)
        vals = " " * 20 + "  ".join(f"{self.mean_p_ap[t]:5.3f}" for t in thrs)
        return "\n".join([head, vals, f"mean F-AP: {self.mean_f_ap:.3f}"])


def evaluate(corpus: Corpus, logs: dict, thresholds=tuple(range(1, 11)),
             interp: str = "none") -> EvalReport:
    """Full report over a dict of video_id -> DetectionLog."""
    if not logs:
        raise EvaluationError("no detection logs supplied")
    skipped = []
    f_ap = {}
    for cls in range(1, corpus.num_classes + 1):
        f_ap[cls] = frame_ap(cls, logs, corpus, interp)
        if f_ap[cls] is None:
            skipped.append(("f_ap", cls))

    gt = ground_truth_starts(corpus, logs.keys())
    preds: dict[int, list] = {c: [] for c in gt}
    for vid in sorted(logs):
        for ev in logs[vid].events:
            preds[ev.cls].append((vid, ev.time_s, ev.confidence))
    p_ap, mean_p = {}, {}
    for thr in thresholds:
        per = {cls: point_ap(cls, preds[cls], gt[cls], thr, interp) for cls in gt}
        for cls, v in per.items():
            if v is None and ("p_ap", cls) not in skipped:
                skipped.append(("p_ap", cls))
        p_ap[thr] = per
        mean_p[thr] = mean_ap(per)
    return EvalReport(f_ap, mean_ap(f_ap), p_ap, mean_p, skipped)
