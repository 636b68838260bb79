"""On-disk dataset layout: manifests, annotations, protocol splits and temporal blocks.

Layout conventions
------------------
* A manifest is a JSON array of video records. Relative paths inside it are
  resolved against the directory holding the manifest file.
* Frames are 8-bit PNGs named ``frame_%06d.png`` with 1-based numbering.
* Frame annotations are newline-delimited ``0``/``1`` text files.

Frame indices are 1-based everywhere in this package.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DuplicateId,
    InsufficientVideos,
    MissingFile,
    SchemaError,
    SupervisionError,
    UnknownVideoId,
    VideoTooShort,
)

MANIFEST_KEYS = (
    "video_id",
    "scenario_id",
    "view_id",
    "frame_count",
    "fps",
    "label",
    "anomaly_type",
    "frames_path",
    "annotation_path",
)
FRAME_PATTERN = "frame_{:06d}.png"
LABELS = ("normal", "abnormal")
PROTOCOLS = ("protocol_i", "protocol_ii")

# train fraction of normal videos (both protocols) and of abnormal videos (protocol ii)
NORMAL_TRAIN_FRACTION = Fraction(3, 4)
ABNORMAL_TRAIN_FRACTION = Fraction(1, 2)


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    scenario_id: str
    view_id: str
    frame_count: int
    fps: float
    label: str
    anomaly_type: str | None
    frames_path: Path
    annotation_path: Path | None = None

    def __post_init__(self):
        if not isinstance(self.frame_count, int) or isinstance(self.frame_count, bool) or self.frame_count < 1:
            raise SchemaError(f"{self.video_id}: frame_count must be a positive integer")
        if not self.fps > 0:
            raise SchemaError(f"{self.video_id}: fps must be positive")
        if self.label not in LABELS:
            raise SchemaError(f"{self.video_id}: label must be one of {LABELS}, got {self.label!r}")
        if self.label == "normal" and self.anomaly_type is not None:
            raise SchemaError(f"{self.video_id}: normal video cannot carry an anomaly_type")
        if self.label == "abnormal" and self.anomaly_type is None:
            raise SchemaError(f"{self.video_id}: abnormal video needs an anomaly_type")

    @property
    def is_abnormal(self) -> bool:
        return self.label == "abnormal"

    def frame_file(self, index: int) -> Path:
        return Path(self.frames_path) / FRAME_PATTERN.format(index)

    def to_json(self, base: Path | None = None) -> dict:
        def rel(p):
            if p is None:
                return None
            p = Path(p)
            if base is not None:
                try:
                    return p.relative_to(base).as_posix()
                except ValueError:
                    pass
            return p.as_posix()

        return {
            "video_id": self.video_id,
            "scenario_id": self.scenario_id,
            "view_id": self.view_id,
            "frame_count": self.frame_count,
            "fps": self.fps,
            "label": self.label,
            "anomaly_type": self.anomaly_type,
            "frames_path": rel(self.frames_path),
            "annotation_path": rel(self.annotation_path),
        }


@dataclass(frozen=True)
class Manifest:
    records: tuple[VideoRecord, ...]
    scenario_index: Mapping[str, Mapping[str, tuple[str, ...]]] = field(default=None)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.video_id in seen:
                raise DuplicateId(f"duplicate video_id {r.video_id!r}")
            seen.add(r.video_id)
        index: dict[str, dict[str, list[str]]] = {}
        for r in self.records:
            index.setdefault(r.scenario_id, {}).setdefault(r.view_id, []).append(r.video_id)
        frozen = {s: {v: tuple(ids) for v, ids in views.items()} for s, views in index.items()}
        object.__setattr__(self, "scenario_index", frozen)
        object.__setattr__(self, "_by_id", {r.video_id: r for r in self.records})

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, video_id):
        return video_id in self._by_id

    def get(self, video_id: str) -> VideoRecord:
        try:
            return self._by_id[video_id]
        except KeyError:
            raise UnknownVideoId(video_id) from None

    def subset(self, video_ids: Iterable[str]) -> "Manifest":
        wanted = set(video_ids)
        missing = wanted - self._by_id.keys()
        if missing:
            raise UnknownVideoId(", ".join(sorted(missing)))
        return Manifest(tuple(r for r in self.records if r.video_id in wanted))

    @property
    def scenarios(self) -> list[str]:
        return sorted(self.scenario_index)


def _record_from_json(obj, base: Path) -> VideoRecord:
    if not isinstance(obj, dict):
        raise SchemaError(f"manifest entry must be an object, got {type(obj).__name__}")
    keys = set(obj)
    if keys != set(MANIFEST_KEYS):
        missing = sorted(set(MANIFEST_KEYS) - keys)
        extra = sorted(keys - set(MANIFEST_KEYS))
        raise SchemaError(f"manifest entry keys mismatch (missing={missing}, extra={extra})")
    for k in ("video_id", "scenario_id", "view_id", "label", "frames_path"):
        if not isinstance(obj[k], str):
            raise SchemaError(f"{k} must be a string")
    for k in ("anomaly_type", "annotation_path"):
        if obj[k] is not None and not isinstance(obj[k], str):
            raise SchemaError(f"{k} must be a string or null")
    if not isinstance(obj["fps"], (int, float)) or isinstance(obj["fps"], bool):
        raise SchemaError("fps must be a number")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    ann = obj["annotation_path"]
    return VideoRecord(
        video_id=obj["video_id"],
        scenario_id=obj["scenario_id"],
        view_id=obj["view_id"],
        frame_count=obj["frame_count"],
        fps=float(obj["fps"]),
        label=obj["label"],
        anomaly_type=obj["anomaly_type"],
        frames_path=resolve(obj["frames_path"]),
        annotation_path=resolve(ann) if ann is not None else None,
    )


def load_manifest(path) -> Manifest:
    """Read and validate a manifest file.

    Every referenced frame directory must hold ``frame_count`` frames and every
    annotation file must have one 0/1 line per frame.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, list):
        raise SchemaError("manifest must be a top-level JSON array")
    records = tuple(_record_from_json(obj, path.parent) for obj in data)
    manifest = Manifest(records)
    for r in records:
        if not Path(r.frames_path).is_dir():
            raise MissingFile(f"{r.video_id}: frames directory {r.frames_path}")
        for idx in (1, r.frame_count):
            if not r.frame_file(idx).is_file():
                raise MissingFile(f"{r.video_id}: {r.frame_file(idx)}")
        if r.annotation_path is not None:
            labels = read_annotation(r.annotation_path)
            if len(labels) != r.frame_count:
                raise SchemaError(
                    f"{r.video_id}: annotation has {len(labels)} lines, frame_count is {r.frame_count}"
                )
            if r.label == "normal" and labels.any():
                raise SchemaError(f"{r.video_id}: normal video has anomalous frames")
    return manifest


def save_manifest(manifest: Manifest | Sequence[VideoRecord], path) -> Path:
    path = Path(path)
    records = manifest.records if isinstance(manifest, Manifest) else tuple(manifest)
    payload = [r.to_json(base=path.parent) for r in records]
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def read_annotation(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    lines = path.read_text().split()
    if any(tok not in ("0", "1") for tok in lines):
        raise SchemaError(f"{path}: annotation lines must be '0' or '1'")
    return np.array([int(tok) for tok in lines], dtype=np.int8)


def write_annotation(labels, path) -> None:
    labels = np.asarray(labels)
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise SchemaError("annotation values must be 0 or 1")
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def frame_labels(record: VideoRecord) -> np.ndarray:
    """Frame-level labels; normal videos without an annotation file are all-zero."""
    if record.annotation_path is None:
        if record.is_abnormal:
            raise MissingFile(f"{record.video_id}: abnormal video has no frame annotation")
        return np.zeros(record.frame_count, dtype=np.int8)
    labels = read_annotation(record.annotation_path)
    if len(labels) != record.frame_count:
        raise SchemaError(f"{record.video_id}: annotation length mismatch")
    return labels


def load_frames(record: VideoRecord, color: bool = False) -> np.ndarray:
    """Load every frame of a video as float64 in [0, 1].

    Returns shape (T, H, W) in grayscale mode and (T, H, W, 3) with ``color``.
    """
    frames = []
    for idx in range(1, record.frame_count + 1):
        f = record.frame_file(idx)
        if not f.is_file():
            raise MissingFile(str(f))
        with Image.open(f) as im:
            im = im.convert("RGB" if color else "L")
            frames.append(np.asarray(im, dtype=np.float64) / 255.0)
    return np.stack(frames)


def quantize(frame: np.ndarray) -> np.ndarray:
    """[0,1] float to uint8 with round-half-up."""
    return np.floor(np.clip(frame, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_frames(frames: np.ndarray, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames, start=1):
        Image.fromarray(quantize(frame), mode="L").save(directory / FRAME_PATTERN.format(i))


# --------------------------------------------------------------------------
# protocol splits
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    protocol: str
    train_ids: frozenset[str]
    test_ids: frozenset[str]
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise SchemaError(f"unknown protocol {self.protocol!r}")
        object.__setattr__(self, "train_ids", frozenset(self.train_ids))
        object.__setattr__(self, "test_ids", frozenset(self.test_ids))
        if self.train_ids & self.test_ids:
            raise SchemaError("train and test ids overlap")

    @property
    def supervision(self) -> str:
        return "normal_only" if self.protocol == "protocol_i" else "video_level"

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "train_ids": sorted(self.train_ids),
            "test_ids": sorted(self.test_ids),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "SplitSpec":
        path = Path(path)
        if not path.is_file():
            raise MissingFile(str(path))
        obj = json.loads(path.read_text())
        if set(obj) != {"protocol", "seed", "train_ids", "test_ids"}:
            raise SchemaError("split file must have keys protocol, seed, train_ids, test_ids")
        return cls(obj["protocol"], frozenset(obj["train_ids"]), frozenset(obj["test_ids"]), int(obj["seed"]))


def _round_half_up(x: Fraction) -> int:
    return int((x + Fraction(1, 2)) // 1)


def _largest_remainder(sizes: Mapping[str, int], fraction: Fraction) -> dict[str, int]:
    """Allocate round(fraction * total) items across strata proportionally.

    Remainder ties go to the stratum that sorts first by key.
    """
    total = _round_half_up(fraction * sum(sizes.values()))
    quotas = {k: fraction * n for k, n in sizes.items()}
    alloc = {k: int(q // 1) for k, q in quotas.items()}
    leftover = total - sum(alloc.values())
    order = sorted(sizes, key=lambda k: (-(quotas[k] - alloc[k]), k))
    for k in order[:leftover]:
        alloc[k] += 1
    return alloc


def _stratified_pick(records: Sequence[VideoRecord], fraction: Fraction, rng: np.random.Generator) -> set[str]:
    by_scenario: dict[str, list[str]] = {}
    for r in records:
        by_scenario.setdefault(r.scenario_id, []).append(r.video_id)
    alloc = _largest_remainder({s: len(v) for s, v in by_scenario.items()}, fraction)
    picked = set()
    for s in sorted(by_scenario):
        ids = sorted(by_scenario[s])
        perm = rng.permutation(len(ids))
        picked.update(ids[i] for i in perm[: alloc[s]])
    return picked


def protocol_split(manifest: Manifest, protocol: str, seed: int = 0) -> SplitSpec:
    """Partition a manifest into train/test ids under one of the two protocols.

    protocol_i: 75% of normal videos train (normal-only supervision), the rest
    of the manifest is test. protocol_ii: additionally 50% of abnormal videos
    train with video-level labels only. Both draws are stratified by scenario.
    """
    if protocol not in PROTOCOLS:
        raise SchemaError(f"unknown protocol {protocol!r}")
    normals = [r for r in manifest if not r.is_abnormal]
    abnormals = [r for r in manifest if r.is_abnormal]

    n_train_normal = _round_half_up(NORMAL_TRAIN_FRACTION * len(normals))
    if n_train_normal < 1 or n_train_normal >= len(normals):
        raise InsufficientVideos(
            f"{len(normals)} normal videos cannot be split {NORMAL_TRAIN_FRACTION} train / rest test"
        )
    if protocol == "protocol_ii":
        n_train_abn = _round_half_up(ABNORMAL_TRAIN_FRACTION * len(abnormals))
        if n_train_abn < 1 or n_train_abn >= len(abnormals):
            raise InsufficientVideos(f"{len(abnormals)} abnormal videos cannot be split 1:1")

    rng = np.random.default_rng(np.random.SeedSequence([seed, PROTOCOLS.index(protocol)]))
    train = _stratified_pick(normals, NORMAL_TRAIN_FRACTION, rng)
    if protocol == "protocol_ii":
        train |= _stratified_pick(abnormals, ABNORMAL_TRAIN_FRACTION, rng)
    test = {r.video_id for r in manifest} - train
    return SplitSpec(protocol, frozenset(train), frozenset(test), seed)


class DatasetSplit:
    """Read-only accessors over a manifest under a split's supervision rules.

    Under protocol_ii, frame-level labels of training videos are withheld; only
    the video-level label is exposed.
    """

    def __init__(self, manifest: Manifest, split: SplitSpec):
        unknown = (split.train_ids | split.test_ids) - {r.video_id for r in manifest}
        if unknown:
            raise UnknownVideoId(", ".join(sorted(unknown)))
        self.manifest = manifest
        self.split = split

    def train_records(self) -> list[VideoRecord]:
        return [r for r in self.manifest if r.video_id in self.split.train_ids]

    def test_records(self) -> list[VideoRecord]:
        return [r for r in self.manifest if r.video_id in self.split.test_ids]

    def video_label(self, video_id: str) -> str:
        return self.manifest.get(video_id).label

    def frame_labels(self, video_id: str) -> np.ndarray:
        record = self.manifest.get(video_id)
        if video_id in self.split.train_ids and self.split.supervision == "video_level":
            raise SupervisionError(f"{video_id}: frame labels are withheld for training videos")
        return frame_labels(record)


# --------------------------------------------------------------------------
# temporal blocks
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TemporalBlock:
    """A window of ``T'`` consecutive frames; all but the last are model input.

    ``input_frames`` has shape (T'-1, H, W) and ``target_frame`` shape (H, W).
    """

    input_frames: np.ndarray
    target_frame: np.ndarray
    source_video: str
    start_index: int

    @property
    def window(self) -> int:
        return self.input_frames.shape[0] + 1

    @property
    def key(self) -> tuple[str, int]:
        return (self.source_video, self.start_index)


def block_at(frames: np.ndarray, video_id: str, start_index: int, window: int) -> TemporalBlock:
    s = start_index - 1
    return TemporalBlock(
        input_frames=frames[s : s + window - 1],
        target_frame=frames[s + window - 1],
        source_video=video_id,
        start_index=start_index,
    )


def slide_blocks(video: VideoRecord, window: int, frames: np.ndarray | None = None) -> list[TemporalBlock]:
    """All step-1 sliding windows of length ``window`` over a video."""
    if window < 2:
        raise ValueError("window must be at least 2")
    if video.frame_count < window:
        raise VideoTooShort(f"{video.video_id}: {video.frame_count} frames < window {window}")
    if frames is None:
        frames = load_frames(video)
    if len(frames) != video.frame_count:
        raise SchemaError(f"{video.video_id}: got {len(frames)} frames, expected {video.frame_count}")
    return [block_at(frames, video.video_id, i, window) for i in range(1, video.frame_count - window + 2)]


def num_blocks(frame_count: int, window: int) -> int:
    return max(0, frame_count - window + 1)


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
