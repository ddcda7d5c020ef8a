"""Feature-file codec and corpus manifest.

Feature files: magic "WOADF1", little-endian u32 T, u32 D, then T*D
little-endian float32 values, row-major. Values are widened to float64 on
ingestion; everything downstream is 64-bit.

The manifest is line-oriented, tab-separated text; one video per row with
its label set and optional ground-truth segments in seconds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"WOADF1"
HEADER_LEN = len(MAGIC) + 8
MAX_CELLS = 1 << 31  # refuse absurd T*D before allocating


class FeatureFileError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class FeatureSequence:
    video_id: str
    data: np.ndarray      # T x D float64
    rate: float = 1.0     # chunks per second

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


def write_features(path, matrix) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise FeatureFileError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    t, d = matrix.shape
    payload = np.ascontiguousarray(matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", t, d))
        fh.write(payload.tobytes())


def load_features(path, video_id: str | None = None, rate: float = 1.0) -> FeatureSequence:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise FeatureFileError(f"{path}: bad magic at byte 0")
    if len(blob) < HEADER_LEN:
        raise FeatureFileError(
            f"{path}: truncated header at byte {len(blob)} (need {HEADER_LEN})")
    t, d = struct.unpack_from("<II", blob, len(MAGIC))
    if t == 0:
        raise FeatureFileError(f"{path}: empty video (T=0) at byte {len(MAGIC)}")
    if d == 0:
        raise FeatureFileError(f"{path}: zero feature width at byte {len(MAGIC) + 4}")
    if t * d > MAX_CELLS:
        raise FeatureFileError(f"{path}: dimension overflow T*D={t * d}")
    have_floats = (len(blob) - HEADER_LEN) // 4
    if have_floats < t * d:
        raise FeatureFileError(
            f"{path}: truncated payload at byte {len(blob)}: "
            f"expected {t * d} floats, got {have_floats}")
    if len(blob) != HEADER_LEN + 4 * t * d:
        raise FeatureFileError(
            f"{path}: trailing data after byte {HEADER_LEN + 4 * t * d}")
    data = np.frombuffer(blob, dtype="<f4", count=t * d, offset=HEADER_LEN)
    return FeatureSequence(video_id or path.stem,
                           data.astype(np.float64).reshape(t, d), rate)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"
_FIELDS = ["video_id", "split", "path", "rate", "labels", "segments"]


@dataclass
class VideoEntry:
    video_id: str
    split: str                     # "train" | "test"
    path: Path
    rate: float
    labels: set[int]
    segments: list[tuple[int, float, float]] = field(default_factory=list)


@dataclass
class Corpus:
    root: Path
    num_classes: int
    videos: list[VideoEntry] = field(default_factory=list)

    def split(self, name: str) -> list[VideoEntry]:
        return [v for v in self.videos if v.split == name]

    def by_id(self, video_id: str) -> VideoEntry:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(video_id)


def write_manifest(corpus: Corpus, path=None) -> Path:
    path = Path(path) if path else corpus.root / MANIFEST_NAME
    lines = ["#corpus\tv1", f"#classes\t{corpus.num_classes}", "\t".join(_FIELDS)]
    for v in corpus.videos:
        segs = ";".join(f"{c}:{s:.6f}:{e:.6f}" for c, s, e in v.segments) or "-"
        rel = v.path.relative_to(corpus.root) if v.path.is_absolute() else v.path
        lines.append("\t".join([
            v.video_id, v.split, str(rel), repr(v.rate),
            ",".join(str(c) for c in sorted(v.labels)), segs,
        ]))
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(path) -> Corpus:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent

    def fail(lineno, msg):
        raise ManifestError(f"{path}:{lineno}: {msg}")

    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "#corpus\tv1":
        fail(1, "missing '#corpus\\tv1' header")
    if len(lines) < 2 or not lines[1].startswith("#classes\t"):
        fail(2, "missing '#classes' line")
    try:
        num_classes = int(lines[1].split("\t", 1)[1])
    except (IndexError, ValueError):
        fail(2, "unreadable class count")
    if num_classes < 1:
        fail(2, f"class count must be >= 1, got {num_classes}")
    if len(lines) < 3 or lines[2].split("\t") != _FIELDS:
        fail(3, f"field header must be {'/'.join(_FIELDS)}")

    corpus = Corpus(root, num_classes)
    seen = set()
    for lineno, line in enumerate(lines[3:], start=4):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != len(_FIELDS):
            fail(lineno, f"expected {len(_FIELDS)} columns, got {len(cols)}")
        vid, split, rel, rate_s, labels_s, segs_s = cols
        if vid in seen:
            fail(lineno, f"duplicate video_id {vid!r}")
        seen.add(vid)
        if split not in ("train", "test"):
            fail(lineno, f"split must be train or test, got {split!r}")
        try:
            rate = float(rate_s)
        except ValueError:
            fail(lineno, f"unreadable rate {rate_s!r}")
        if not rate > 0:
            fail(lineno, f"rate must be positive, got {rate}")
        labels = set()
        if labels_s:
            for tok in labels_s.split(","):
                try:
                    c = int(tok)
                except ValueError:
                    fail(lineno, f"unreadable class index {tok!r}")
                if not 1 <= c <= num_classes:
                    fail(lineno, f"class {c} outside 1..{num_classes}")
                labels.add(c)
        if split == "train" and not labels:
            fail(lineno, "training video with empty label set")
        segments = []
        if segs_s != "-":
            for tok in segs_s.split(";"):
                parts = tok.split(":")
                if len(parts) != 3:
                    fail(lineno, f"segment {tok!r} is not class:start:end")
                try:
                    c, s, e = int(parts[0]), float(parts[1]), float(parts[2])
                except ValueError:
                    fail(lineno, f"unreadable segment {tok!r}")
                if not 1 <= c <= num_classes:
                    fail(lineno, f"segment class {c} outside 1..{num_classes}")
                if not 0 <= s <= e:
                    fail(lineno, f"segment times must satisfy 0 <= start <= end, got {tok!r}")
                segments.append((c, s, e))
        corpus.videos.append(VideoEntry(vid, split, root / rel, rate, labels, segments))
    return corpus


def load_entry_features(entry: VideoEntry) -> FeatureSequence:
    try:
        seq = load_features(entry.path, entry.video_id, entry.rate)
    except FileNotFoundError:
        raise ManifestError(f"feature file missing for {entry.video_id}: {entry.path}")
    duration = seq.num_frames / entry.rate
    for c, s, e in entry.segments:
        if e > duration + 1e-6:
            raise ManifestError(
                f"{entry.video_id}: segment {c}:{s}:{e} ends after video ({duration:.3f}s)")
    return seq


def segments_to_frames(segments, rate: float, num_frames: int):
    """Convert (class, start_s, end_s) to inclusive frame intervals.

    Frame t covers [t/rate, (t+1)/rate); a frame belongs to a segment when
    its start time falls inside it.
    """
    out = []
    for cls, s, e in segments:
        sf = max(int(np.ceil(s * rate - 1e-9)), 0)
        ef = min(int(np.ceil(e * rate - 1e-9)) - 1, num_frames - 1)
        if ef >= sf:
            out.append((cls, sf, ef))
    return out
