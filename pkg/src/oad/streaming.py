"""Causal streaming inference with action-start emission.

A session consumes one feature vector per step and never looks ahead: the
outputs at time t are a pure function of frames 0..t. Start events fire
when the argmax of the combined start scores flips to a new action class
and clears the score threshold.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Model
from .numerics import relu
from .recognizer import FrameOutput, heads, lstm_step, temporal_pool


class StreamError(RuntimeError):
    pass


@dataclass
class StartEvent:
    frame: int
    time_s: float
    cls: int
    confidence: float


class StreamSession:
    """Single-owner causal decoder over one stream.

    State is the recurrent pair plus a bounded ring of recent hiddens, so
    per-step cost and memory do not grow with the stream length.
    """

    def __init__(self, model: Model, pool_window: int = 3, rate: float = 1.0,
                 start_threshold: float = 0.0, use_start_head: bool = True):
        self.model = model
        self.rate = rate
        self.threshold = start_threshold
        self.use_start_head = use_start_head
        hsz = model.dims.hidden
        self.h = np.zeros(hsz)
        self.c = np.zeros(hsz)
        self.ring = deque(maxlen=pool_window + 1)
        self.prev_cls = 0  # background, so an action at t=0 can fire
        self.t = 0
        self.poisoned = False

    @classmethod
    def from_config(cls, model: Model, cfg, rate: float) -> "StreamSession":
        return cls(model,
                   pool_window=0 if cfg.no_temporal_pool else cfg.pool_window,
                   rate=rate,
                   start_threshold=cfg.start_threshold,
                   use_start_head=not cfg.no_start_head)

    def step(self, frame: np.ndarray):
        """Consume one raw feature vector; returns (FrameOutput, combined
        start scores, StartEvent or None)."""
        if self.poisoned:
            raise StreamError("session poisoned by an earlier error")
        frame = np.asarray(frame, dtype=np.float64).ravel()
        if frame.shape[0] != self.model.dims.feature_dim:
            self.poisoned = True
            raise StreamError(
                f"frame width {frame.shape[0]} != {self.model.dims.feature_dim}")

        m = self.model
        f = relu(frame @ m["trunk_w"].value + m["trunk_b"].value)
        if m.no_rnn:
            h1 = relu(f @ m["ff1_w"].value + m["ff1_b"].value)
            self.h = relu(h1 @ m["ff2_w"].value + m["ff2_b"].value)
        else:
            self.h, self.c, _ = lstm_step(f, self.h, self.c, m["rnn_wx"].value,
                                          m["rnn_wh"].value, m["rnn_b"].value)
        self.ring.append(self.h)
        pooled = temporal_pool(self.ring)
        out = heads(self.h, pooled, m["act_w"].value, m["start_w"].value)

        if self.use_start_head:
            combined = np.empty_like(out.action)
            combined[0] = out.action[0] * out.start[0]
            combined[1:] = out.action[1:] * out.start[1]
        else:
            combined = out.action.copy()

        pred = int(np.argmax(combined))  # ties go to the lowest index
        event = None
        if pred != 0 and combined[pred] > self.threshold and pred != self.prev_cls:
            event = StartEvent(self.t, self.t / self.rate, pred,
                               float(combined[pred]))
        self.prev_cls = pred
        self.t += 1
        return out, combined, event


@dataclass
class DetectionLog:
    video_id: str
    rate: float
    num_classes: int
    act: np.ndarray        # T x (C+1)
    start: np.ndarray      # T x 2
    combined: np.ndarray   # T x (C+1)
    pred: np.ndarray       # T predicted classes (argmax of combined)
    events: list = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return self.act.shape[0]


def run_stream(session: StreamSession, frames: np.ndarray,
               video_id: str = "") -> DetectionLog:
    """Drive a session over a whole T x D matrix, frame by frame."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    T = frames.shape[0]
    if T == 0:
        raise StreamError("empty frame sequence")
    C1 = session.model.dims.classes + 1
    log = DetectionLog(video_id, session.rate, session.model.dims.classes,
                       np.empty((T, C1)), np.empty((T, 2)), np.empty((T, C1)),
                       np.empty(T, dtype=np.int64))
    for t in range(T):
        out, combined, event = session.step(frames[t])
        log.act[t] = out.action
        log.start[t] = out.start
        log.combined[t] = combined
        log.pred[t] = int(np.argmax(combined))
        if event is not None:
            log.events.append(event)
    return log


def stream_video(model: Model, cfg, frames: np.ndarray, rate: float,
                 video_id: str = "") -> DetectionLog:
    return run_stream(StreamSession.from_config(model, cfg, rate), frames, video_id)


# ---------------------------------------------------------------------------
# log files: one line per frame, 9 significant digits
# ---------------------------------------------------------------------------

LOG_HEADER = "#detlog\tv1"


def write_detection_log(path, log: DetectionLog) -> Path:
    path = Path(path)
    cols_per_row = 2 + (log.num_classes + 1) * 2 + 2 + 1
    event_frames = {e.frame for e in log.events}
    with open(path, "w") as fh:
        fh.write(f"{LOG_HEADER}\tvideo={log.video_id}\trate={log.rate!r}"
                 f"\tclasses={log.num_classes}\n")
        for t in range(log.num_frames):
            vals = [float(t), t / log.rate, *log.act[t], *log.start[t],
                    *log.combined[t]]
            row = "\t".join(f"{v:.9g}" for v in vals)
            fh.write(f"{row}\t{1 if t in event_frames else 0}\n")
            assert len(vals) + 1 == cols_per_row
    return path


def read_detection_log(path) -> DetectionLog:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(LOG_HEADER):
        raise ValueError(f"{path}: not a detection log")
    meta = dict(tok.split("=", 1) for tok in lines[0].split("\t")[2:])
    video_id = meta["video"]
    rate = float(meta["rate"])
    num_classes = int(meta["classes"])
    c1 = num_classes + 1
    rows = [line.split("\t") for line in lines[1:] if line.strip()]
    want = 2 + 2 * c1 + 2 + 1
    log = DetectionLog(video_id, rate, num_classes,
                       np.empty((len(rows), c1)), np.empty((len(rows), 2)),
                       np.empty((len(rows), c1)), np.empty(len(rows), dtype=np.int64))
    for t, cols in enumerate(rows):
        if len(cols) != want:
            raise ValueError(f"{path}:{t + 2}: expected {want} columns, got {len(cols)}")
        vals = [float(x) for x in cols[:-1]]
        log.act[t] = vals[2:2 + c1]
        log.start[t] = vals[2 + c1:4 + c1]
        log.combined[t] = vals[4 + c1:4 + 2 * c1]
        log.pred[t] = int(np.argmax(log.combined[t]))
        if cols[-1] == "1":
            cls = int(np.argmax(log.combined[t]))
            log.events.append(StartEvent(t, vals[1], cls,
                                         float(log.combined[t][cls])))
    return log
