"""Frame-level metrics and grouped reports.

Anomaly is the positive class. Scores produced by this package are normalcy
scores (high = normal), so they are negated before ranking; score files from
other detectors may declare anomaly polarity instead. AUC counts ties as 1/2
(Mann-Whitney). Average precision ranks by descending anomaly score with ties
kept in their original (concatenation) order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.stats import rankdata

from .dataset import Manifest
from .errors import (
    DegenerateLabels,
    NoEvaluableVideos,
    NoNegatives,
    NoPositives,
    ScenVADError,
    SchemaError,
    UnknownVideoId,
)
from .scoring import DEFAULT_THRESHOLD

POLARITIES = ("normalcy", "anomaly")
GROUP_KEYS = ("anomaly_type", "scenario")
REPORT_COLUMNS = ("group", "n_videos", "n_frames", "auc", "ap", "fpr", "status")


@dataclass(frozen=True)
class LabeledScores:
    per_video: Mapping[str, tuple[np.ndarray, np.ndarray]]
    polarity: str = "normalcy"

    def __post_init__(self):
        if self.polarity not in POLARITIES:
            raise SchemaError(f"polarity must be one of {POLARITIES}")
        clean = {}
        for vid, (scores, labels) in self.per_video.items():
            scores = np.asarray(scores, dtype=np.float64)
            labels = np.asarray(labels).astype(np.int8)
            if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
                raise SchemaError(f"{vid}: scores and labels must be equal-length nonempty 1-D sequences")
            if not np.isin(labels, (0, 1)).all():
                raise SchemaError(f"{vid}: labels must be 0/1")
            clean[vid] = (scores, labels)
        object.__setattr__(self, "per_video", clean)

    def __len__(self):
        return len(self.per_video)

    def anomaly(self, scores: np.ndarray) -> np.ndarray:
        return -scores if self.polarity == "normalcy" else scores

    def normalcy(self, scores: np.ndarray) -> np.ndarray:
        return scores if self.polarity == "normalcy" else 1.0 - scores

    def concatenated(self) -> tuple[np.ndarray, np.ndarray]:
        """Anomaly scores and labels of all frames, in insertion order of videos."""
        if not self.per_video:
            return np.zeros(0), np.zeros(0, dtype=np.int8)
        scores = np.concatenate([self.anomaly(s) for s, _ in self.per_video.values()])
        labels = np.concatenate([y for _, y in self.per_video.values()])
        return scores, labels

    def subset(self, video_ids: Iterable[str]) -> "LabeledScores":
        ids = set(video_ids)
        return LabeledScores({k: v for k, v in self.per_video.items() if k in ids}, self.polarity)

    @property
    def n_frames(self) -> int:
        return sum(len(s) for s, _ in self.per_video.values())


def auc_from_arrays(anomaly_scores, labels) -> float:
    """Mann-Whitney AUC of anomaly scores against 0/1 labels."""
    a = np.asarray(anomaly_scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"AUC needs both classes (positives={n_pos}, negatives={n_neg})")
    ranks = rankdata(a, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def micro_auc(data: LabeledScores) -> float:
    """ROC AUC over all frames of all videos concatenated."""
    a, y = data.concatenated()
    return auc_from_arrays(a, y)


def per_video_auc(data: LabeledScores) -> tuple[dict[str, float], list[str]]:
    """AUC of every video with both classes, plus the ids that were skipped."""
    values, excluded = {}, []
    for vid, (s, y) in data.per_video.items():
        if 0 < y.sum() < y.size:
            values[vid] = auc_from_arrays(data.anomaly(s), y)
        else:
            excluded.append(vid)
    return values, excluded


def macro_auc(data: LabeledScores) -> float:
    """Unweighted mean of per-video AUCs; single-class videos are excluded."""
    values, _ = per_video_auc(data)
    if not values:
        raise NoEvaluableVideos("no video contains both normal and anomalous frames")
    return float(np.mean(list(values.values())))


def ap_from_arrays(anomaly_scores, labels) -> float:
    a = np.asarray(anomaly_scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one anomalous frame")
    order = np.argsort(-a, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    return float(np.sum(precision[hits == 1]) / n_pos)


def average_precision(data: LabeledScores) -> float:
    """Step-interpolated AP: sum over ranks of recall increments times precision."""
    a, y = data.concatenated()
    return ap_from_arrays(a, y)


def fpr_at_threshold(data: LabeledScores, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Fraction of normal frames flagged anomalous (normalcy score below ``threshold``)."""
    flagged, negatives = 0, 0
    for s, y in data.per_video.values():
        neg = y == 0
        negatives += int(neg.sum())
        flagged += int((data.normalcy(s)[neg] < threshold).sum())
    if negatives == 0:
        raise NoNegatives("false positive rate needs at least one normal frame")
    return flagged / negatives


# --------------------------------------------------------------------------
# grouped reports
# --------------------------------------------------------------------------


@dataclass
class Report:
    group_by: str | None
    threshold: float
    rows: list[dict]
    overall: dict
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "group_by": self.group_by,
            "threshold": self.threshold,
            "rows": self.rows,
            "overall": self.overall,
            "metadata": self.metadata,
        }


def _metric_row(name: str, data: LabeledScores, threshold: float, with_macro: bool = False) -> dict:
    row = {"group": name, "n_videos": len(data), "n_frames": data.n_frames,
           "auc": None, "ap": None, "fpr": None, "status": "ok"}
    problems = []
    for key, fn in (("auc", micro_auc), ("ap", average_precision),
                    ("fpr", lambda d: fpr_at_threshold(d, threshold))):
        try:
            row[key] = fn(data)
        except ScenVADError as e:
            problems.append(type(e).__name__)
    if with_macro:
        try:
            row["macro_auc"] = macro_auc(data)
        except ScenVADError as e:
            row["macro_auc"] = None
            problems.append(type(e).__name__)
        row["macro_excluded"] = per_video_auc(data)[1]
    if problems:
        row["status"] = ";".join(dict.fromkeys(problems))
    return row


def grouped_report(data: LabeledScores, manifest: Manifest, group_by: str | None = "anomaly_type",
                   threshold: float = DEFAULT_THRESHOLD) -> Report:
    """One metrics row per group plus an overall row.

    A group's frames are those of its abnormal videos together with every
    normal video in ``data``; normal frames are shared negatives across groups.
    """
    if group_by is not None and group_by not in GROUP_KEYS:
        raise SchemaError(f"group_by must be one of {GROUP_KEYS}")
    for vid in data.per_video:
        if vid not in manifest:
            raise UnknownVideoId(vid)
    records = [manifest.get(v) for v in data.per_video]
    normal_ids = [r.video_id for r in records if not r.is_abnormal]

    rows = []
    if group_by is not None:
        groups: dict[str, list[str]] = {}
        for r in records:
            key = r.anomaly_type if group_by == "anomaly_type" else r.scenario_id
            if key is None:
                continue
            groups.setdefault(key, [])
            if r.is_abnormal:
                groups[key].append(r.video_id)
        for key in sorted(groups):
            rows.append(_metric_row(key, data.subset(groups[key] + normal_ids), threshold))

    overall = _metric_row("Overall", data, threshold, with_macro=True)
    ok = [r for r in rows if r["status"] == "ok"]
    metadata = {
        "negative_pool": "all normal videos",
        "polarity": data.polarity,
        "group_mean_auc": float(np.mean([r["auc"] for r in ok])) if ok else None,
        "group_mean_ap": float(np.mean([r["ap"] for r in ok])) if ok else None,
        "groups_excluded_from_mean": [r["group"] for r in rows if r["status"] != "ok"],
    }
    return Report(group_by, threshold, rows, overall, metadata)


def _pct(v):
    return "" if v is None else f"{100.0 * v:.2f}"


def write_report_csv(report: Report, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in report.rows + [report.overall]:
            writer.writerow([row["group"], row["n_videos"], row["n_frames"],
                             _pct(row["auc"]), _pct(row["ap"]), _pct(row["fpr"]), row["status"]])
    return path


def write_report_json(report: Report, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_json(), indent=2) + "\n")
    return path


def labeled_from_scores(scores: Mapping[str, tuple[np.ndarray, np.ndarray]], labels: Mapping[str, np.ndarray],
                        polarity: str = "normalcy") -> LabeledScores:
    """Align ``video_id -> (frame_indices, scores)`` with full-length frame labels."""
    per_video = {}
    for vid, (idx, vals) in scores.items():
        if vid not in labels:
            raise UnknownVideoId(vid)
        y = np.asarray(labels[vid])
        if idx.max() > len(y):
            raise SchemaError(f"{vid}: frame_index {idx.max()} beyond {len(y)} annotated frames")
        per_video[vid] = (vals, y[idx - 1])
    return LabeledScores(per_video, polarity)
