"""PSNR frame scoring, per-video min-max normalization and threshold decisions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import VideoRecord, load_frames
from .errors import EmptyInput, SchemaError, ShapeMismatch, VideoTooShort
from .predictor import FramePredictor, predict

PSNR_CAP_DB = 100.0
DEFAULT_THRESHOLD = 0.8
SCORE_COLUMNS = ("video_id", "frame_index", "score")


def psnr(truth, pred) -> float:
    """PSNR in dB with the ground-truth frame's maximum as peak.

    An all-zero ground truth falls back to peak 1. Errors below
    ``peak**2 * 1e-10`` are reported as the 100 dB cap.
    """
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ShapeMismatch(f"truth {truth.shape} vs pred {pred.shape}")
    peak = float(truth.max())
    if peak <= 0:
        peak = 1.0
    mse = float(np.mean((truth - pred) ** 2))
    if mse < peak**2 * 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak**2 / mse))


def normalize_scores(psnr_values: Sequence[float]) -> np.ndarray:
    """Min-max normalize a video's PSNR series to [0, 1]; flat series map to all ones."""
    p = np.asarray(psnr_values, dtype=np.float64)
    if p.size == 0:
        raise EmptyInput("cannot normalize an empty score series")
    lo, hi = p.min(), p.max()
    if hi == lo:
        return np.ones_like(p)
    return np.clip((p - lo) / (hi - lo), 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class ScoreSeries:
    video_id: str
    scores: np.ndarray
    first_scored_frame: int
    threshold: float = DEFAULT_THRESHOLD
    psnr: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.scores)

    @property
    def frame_indices(self) -> np.ndarray:
        return np.arange(self.first_scored_frame, self.first_scored_frame + len(self.scores))

    def padded(self, frame_count: int, fill: float = 1.0) -> np.ndarray:
        """Full-length series (1-based frames 1..frame_count) with unscored frames set to ``fill``."""
        out = np.full(frame_count, fill, dtype=np.float64)
        out[self.first_scored_frame - 1 : self.first_scored_frame - 1 + len(self.scores)] = self.scores
        return out


def score_video(model: FramePredictor, video: VideoRecord, window: int, frames: np.ndarray | None = None,
                first_frame: int | None = None, threshold: float = DEFAULT_THRESHOLD,
                batch_size: int = 64) -> ScoreSeries:
    """Predict every frame from its T'-1 predecessors and score it.

    Frames ``first_frame..frame_count`` are scored (default ``first_frame`` is
    ``window``, the earliest predictable frame) and normalized together.
    """
    if first_frame is None:
        first_frame = window
    if first_frame < window:
        raise ValueError("first_frame must be at least the window length")
    if video.frame_count < first_frame:
        raise VideoTooShort(f"{video.video_id}: {video.frame_count} frames, scoring starts at {first_frame}")
    if frames is None:
        frames = load_frames(video)
    targets = list(range(first_frame, video.frame_count + 1))
    values = []
    for b in range(0, len(targets), batch_size):
        chunk = targets[b : b + batch_size]
        inputs = np.stack([frames[t - window : t - 1] for t in chunk])
        preds = predict(model, inputs)
        values.extend(psnr(frames[t - 1], p) for t, p in zip(chunk, preds))
    values = np.asarray(values)
    return ScoreSeries(video.video_id, normalize_scores(values), first_frame, threshold, values)


def decide(series: ScoreSeries | Sequence[float], threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """1 where the normalized score falls strictly below ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    scores = series.scores if isinstance(series, ScoreSeries) else np.asarray(series, dtype=np.float64)
    return (scores < threshold).astype(np.int8)


# --------------------------------------------------------------------------
# score files
# --------------------------------------------------------------------------


def write_scores(series: Iterable[ScoreSeries], path, pad_to: dict[str, int] | None = None) -> Path:
    """CSV ``video_id,frame_index,score``; ``pad_to`` maps ids to full lengths for padding with 1.0."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_COLUMNS)
        for s in series:
            if pad_to is not None and s.video_id in pad_to:
                values = s.padded(pad_to[s.video_id])
                frames = range(1, len(values) + 1)
            else:
                values, frames = s.scores, s.frame_indices
            for idx, v in zip(frames, values):
                writer.writerow([s.video_id, int(idx), repr(float(v))])
    return path


def read_scores(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Parse a score CSV into ``video_id -> (frame_indices, scores)`` sorted by frame."""
    path = Path(path)
    rows: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SCORE_COLUMNS:
            raise SchemaError(f"{path}: expected header {','.join(SCORE_COLUMNS)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise SchemaError(f"{path}:{line_no}: expected 3 columns")
            try:
                idx, val = int(row[1]), float(row[2])
            except ValueError as e:
                raise SchemaError(f"{path}:{line_no}: {e}") from e
            if idx < 1:
                raise SchemaError(f"{path}:{line_no}: frame_index must be >= 1")
            if not 0.0 <= val <= 1.0:
                raise SchemaError(f"{path}:{line_no}: score {val} outside [0, 1]")
            rows.setdefault(row[0], []).append((idx, val))
    out = {}
    for vid, items in rows.items():
        items.sort()
        idx = np.array([i for i, _ in items], dtype=np.int64)
        if len(np.unique(idx)) != len(idx):
            raise SchemaError(f"{path}: duplicate frame_index for {vid}")
        out[vid] = (idx, np.array([v for _, v in items], dtype=np.float64))
    return out

