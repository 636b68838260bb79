"""Deterministic multi-scenario, multi-view synthetic surveillance videos.

Each scenario is a small world of rectangular agents moving at constant
velocity with reflective bounces. A view is a fixed nearest-neighbour
viewpoint transform (flip, crop offset, zoom) of that world, so views of one
scenario share dynamics but look different. Anomalies are injected as
overlays confined to their frame window, which keeps every frame outside the
window identical to the anomaly-free rendering.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Manifest, VideoRecord, save_frames, save_manifest, write_annotation
from .errors import InvalidAnomalyWindow, InvalidConfig, IoError

ANOMALY_KINDS = ("speed_burst", "intruder", "appearance_flip", "illumination_spike")
HUMAN_ANALOG = frozenset({"speed_burst", "intruder", "appearance_flip"})
DEFAULT_MAGNITUDE = {
    "speed_burst": 4.0,
    "intruder": 2.0,
    "appearance_flip": 1.0,
    "illumination_spike": 0.5,
}
LIGHTING_AMPLITUDE = 0.1
AGENT_CONTRAST = 0.5
FPS = 30.0


@dataclass(frozen=True)
class Dynamics:
    n_agents: int = 3
    agent_speed_px_per_frame: float = 1.0
    agent_size_px: int = 4
    background_level: float = 0.3
    lighting_period_frames: int | None = None
    noise_std: float = 0.0

    @property
    def agent_level(self) -> float:
        b = self.background_level
        return b + AGENT_CONTRAST if b < 0.5 else b - AGENT_CONTRAST


@dataclass(frozen=True)
class SceneConfig:
    scenario_id: str
    dynamics: Dynamics = field(default_factory=Dynamics)
    frame_size: tuple[int, int] = (32, 32)
    seed: int = 0

    def __post_init__(self):
        h, w = self.frame_size
        d = self.dynamics
        if h < 1 or w < 1:
            raise InvalidConfig("frame_size must be positive")
        if d.n_agents < 0:
            raise InvalidConfig("n_agents must be >= 0")
        if not d.agent_speed_px_per_frame > 0:
            raise InvalidConfig("agent speed must be positive")
        if not 0 < d.agent_size_px < min(h, w):
            raise InvalidConfig("agent_size_px must be positive and smaller than the frame")
        if not 0.0 <= d.background_level <= 1.0:
            raise InvalidConfig("background_level must be in [0, 1]")
        if d.lighting_period_frames is not None and d.lighting_period_frames < 1:
            raise InvalidConfig("lighting_period_frames must be positive")
        if not 0.0 <= d.noise_std <= 0.2:
            raise InvalidConfig("noise_std must be in [0, 0.2]")

    def to_json(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "dynamics": dataclasses.asdict(self.dynamics),
            "frame_size": list(self.frame_size),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SceneConfig":
        return cls(
            scenario_id=obj["scenario_id"],
            dynamics=Dynamics(**obj.get("dynamics", {})),
            frame_size=tuple(obj.get("frame_size", (32, 32))),
            seed=int(obj.get("seed", 0)),
        )


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    start_frame: int
    end_frame: int
    magnitude: float | None = None

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise InvalidAnomalyWindow(f"unknown anomaly kind {self.kind!r}")
        if self.magnitude is None:
            object.__setattr__(self, "magnitude", DEFAULT_MAGNITUDE[self.kind])
        if not self.magnitude > 0:
            raise InvalidAnomalyWindow("magnitude must be positive")

    @property
    def human_analog(self) -> bool:
        return self.kind in HUMAN_ANALOG

    def covers(self, t: int) -> bool:
        return self.start_frame <= t <= self.end_frame


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def view_transform(view_id: str, frame_size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Row and column gather indices mapping view pixels to world pixels."""
    h, w = frame_size
    rng = np.random.default_rng(_stable_hash(view_id))
    flip = rng.random() < 0.5
    scale = rng.uniform(0.7, 1.0)
    oy = rng.uniform(0.0, (1.0 - scale) * h)
    ox = rng.uniform(0.0, (1.0 - scale) * w)
    rows = np.clip(np.floor(oy + (np.arange(h) + 0.5) * scale), 0, h - 1).astype(np.intp)
    cols = np.clip(np.floor(ox + (np.arange(w) + 0.5) * scale), 0, w - 1).astype(np.intp)
    if flip:
        cols = cols[::-1].copy()
    return rows, cols


def _simulate(pos: np.ndarray, vel: np.ndarray, limits: np.ndarray, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions and velocities at steps 0..steps of reflective motion, each (steps+1, n, 2)."""
    pos = pos.astype(np.float64).copy()
    vel = vel.astype(np.float64).copy()
    out = np.empty((steps + 1,) + pos.shape)
    vout = np.empty_like(out)
    out[0] = pos
    vout[0] = vel
    for k in range(1, steps + 1):
        pos += vel
        low = pos < 0
        pos[low] = -pos[low]
        vel[low] = -vel[low]
        high = pos > limits
        pos[high] = 2 * np.broadcast_to(limits, pos.shape)[high] - pos[high]
        vel[high] = -vel[high]
        # very fast agents can overshoot twice; clamp keeps them on the canvas
        np.clip(pos, 0, limits, out=pos)
        out[k] = pos
        vout[k] = vel
    return out, vout


def _spawn(rng: np.random.Generator, n: int, size: int, speed: float, frame_size) -> tuple:
    h, w = frame_size
    limits = np.array([h - size, w - size], dtype=np.float64)
    pos = rng.uniform(0, 1, size=(n, 2)) * limits
    angle = rng.uniform(0, 2 * np.pi, size=n)
    vel = speed * np.stack([np.sin(angle), np.cos(angle)], axis=1)
    return pos, vel, limits


def _draw(canvas: np.ndarray, pos, size: int, level: float) -> None:
    y, x = (int(v) for v in np.floor(np.asarray(pos) + 0.5))
    canvas[y : y + size, x : x + size] = level


def background_at(dynamics: Dynamics, t: int) -> float:
    """Background intensity of frame ``t`` (1-based)."""
    b = dynamics.background_level
    if dynamics.lighting_period_frames:
        b += LIGHTING_AMPLITUDE * np.sin(2 * np.pi * (t - 1) / dynamics.lighting_period_frames)
    return float(b)


def generate_video(
    config: SceneConfig,
    view_id: str,
    length: int,
    anomaly: AnomalySpec | None = None,
    ordinal: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one video.

    Returns frames of shape (length, H, W) in [0, 1] and a 0/1 annotation of
    length ``length``. ``ordinal`` selects the world instance within the
    scenario; the same ordinal seen from two views shows the same agents.
    """
    if length < 2:
        raise InvalidConfig("length must be >= 2")
    d = config.dynamics
    h, w = config.frame_size
    if anomaly is not None:
        if not 1 <= anomaly.start_frame <= anomaly.end_frame <= length:
            raise InvalidAnomalyWindow(
                f"window [{anomaly.start_frame}, {anomaly.end_frame}] does not fit in {length} frames"
            )
        if anomaly.kind in ("speed_burst", "appearance_flip") and d.n_agents == 0:
            raise InvalidAnomalyWindow(f"{anomaly.kind} needs at least one agent")

    world_rng = np.random.default_rng(np.random.SeedSequence([config.seed, ordinal, 0]))
    pos0, vel0, limits = _spawn(world_rng, d.n_agents, d.agent_size_px, d.agent_speed_px_per_frame, (h, w))
    track, velocity = _simulate(pos0, vel0, limits, length - 1)

    burst = intruder = None
    intruder_size = 0
    if anomaly is not None and anomaly.kind == "speed_burst":
        a = anomaly.start_frame
        burst, _ = _simulate(track[a - 1, :1], velocity[a - 1, :1] * anomaly.magnitude, limits, anomaly.end_frame - a)
    if anomaly is not None and anomaly.kind == "intruder":
        intruder_size = int(min(max(1, round(anomaly.magnitude * d.agent_size_px)), min(h, w) - 1))
        intruder_rng = np.random.default_rng(np.random.SeedSequence([config.seed, ordinal, 1]))
        ipos, ivel, ilim = _spawn(intruder_rng, 1, intruder_size, d.agent_speed_px_per_frame, (h, w))
        intruder, _ = _simulate(ipos, ivel, ilim, anomaly.end_frame - anomaly.start_frame)

    rows, cols = view_transform(view_id, (h, w))
    noise_rng = np.random.default_rng(np.random.SeedSequence([config.seed, ordinal, 2, _stable_hash(view_id)]))
    frames = np.empty((length, h, w), dtype=np.float64)
    labels = np.zeros(length, dtype=np.int8)
    level = d.agent_level
    for t in range(1, length + 1):
        active = anomaly is not None and anomaly.covers(t)
        world = np.full((h, w), background_at(d, t))
        for i in range(d.n_agents):
            p = track[t - 1, i]
            lvl = level
            if active and i == 0 and anomaly.kind == "speed_burst":
                p = burst[t - anomaly.start_frame, 0]
            if active and i == 0 and anomaly.kind == "appearance_flip":
                lvl = level + min(anomaly.magnitude, 1.0) * ((1.0 - level) - level)
            _draw(world, p, d.agent_size_px, lvl)
        if active and anomaly.kind == "intruder":
            _draw(world, intruder[t - anomaly.start_frame, 0], intruder_size, level)
        frame = world[rows[:, None], cols[None, :]]
        if active and anomaly.kind == "illumination_spike":
            frame = frame + anomaly.magnitude
        # noise is drawn for every frame so anomalies never shift the stream
        noise = noise_rng.normal(0.0, 1.0, size=(h, w))
        if d.noise_std > 0:
            frame = frame + d.noise_std * noise
        frames[t - 1] = np.clip(frame, 0.0, 1.0)
        labels[t - 1] = int(active)
    return frames, labels


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    scenarios: tuple[SceneConfig, ...]
    views_per_scenario: int = 2
    normals_per_view: int = 1
    abnormals_per_view: int = 1
    length: int = 40
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        for name in ("views_per_scenario", "normals_per_view", "abnormals_per_view"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be >= 0")
        if self.length < 2:
            raise InvalidConfig("length must be >= 2")
        ids = [s.scenario_id for s in self.scenarios]
        if len(set(ids)) != len(ids):
            raise InvalidConfig("scenario ids must be unique")

    def to_json(self) -> dict:
        return {
            "scenarios": [s.to_json() for s in self.scenarios],
            "views_per_scenario": self.views_per_scenario,
            "normals_per_view": self.normals_per_view,
            "abnormals_per_view": self.abnormals_per_view,
            "length": self.length,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSpec":
        return cls(
            scenarios=tuple(SceneConfig.from_json(s) for s in obj["scenarios"]),
            views_per_scenario=int(obj.get("views_per_scenario", 2)),
            normals_per_view=int(obj.get("normals_per_view", 1)),
            abnormals_per_view=int(obj.get("abnormals_per_view", 1)),
            length=int(obj.get("length", 40)),
            seed=int(obj.get("seed", 0)),
        )

    @classmethod
    def load(cls, path) -> "DatasetSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def anomaly_window(length: int, rng: np.random.Generator) -> tuple[int, int]:
    """Anomaly window covering a quarter of the video, starting in its middle fifth."""
    duration = max(1, round(0.25 * length))
    lo = int(0.4 * length) + 1
    hi = min(int(0.6 * length) + 1, length - duration + 1)
    lo = min(lo, hi)
    start = int(rng.integers(lo, hi + 1))
    return start, start + duration - 1


def generate_dataset(spec: DatasetSpec, out_dir) -> Manifest:
    """Render every video of ``spec`` into ``out_dir`` and write ``manifest.json``.

    Abnormal videos cycle through the anomaly kinds in a fixed order.
    """
    out_dir = Path(out_dir)
    plan = []
    kind_counter = 0
    window_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 99]))
    for cfg in spec.scenarios:
        world_seed = int(np.random.SeedSequence([spec.seed, cfg.seed]).generate_state(1)[0])
        scene = dataclasses.replace(cfg, seed=world_seed)
        for v in range(spec.views_per_scenario):
            view_id = f"view{v}"
            for k in range(spec.normals_per_view + spec.abnormals_per_view):
                if k < spec.normals_per_view:
                    vid = f"{cfg.scenario_id}_{view_id}_n{k:03d}"
                    anomaly = None
                else:
                    vid = f"{cfg.scenario_id}_{view_id}_a{k - spec.normals_per_view:03d}"
                    kind = ANOMALY_KINDS[kind_counter % len(ANOMALY_KINDS)]
                    if cfg.dynamics.n_agents == 0 and kind in ("speed_burst", "appearance_flip"):
                        kind = "illumination_spike"
                    kind_counter += 1
                    start, end = anomaly_window(spec.length, window_rng)
                    anomaly = AnomalySpec(kind, start, end)
                plan.append((vid, cfg.scenario_id, view_id, scene, k, anomaly))

    if not plan:
        return Manifest(())

    records = []
    try:
        for vid, scenario_id, view_id, scene, ordinal, anomaly in plan:
            frames, labels = generate_video(scene, view_id, spec.length, anomaly, ordinal=ordinal)
            frames_dir = out_dir / "frames" / vid
            ann_path = out_dir / "annotations" / f"{vid}.txt"
            save_frames(frames, frames_dir)
            ann_path.parent.mkdir(parents=True, exist_ok=True)
            write_annotation(labels, ann_path)
            records.append(
                VideoRecord(
                    video_id=vid,
                    scenario_id=scenario_id,
                    view_id=view_id,
                    frame_count=spec.length,
                    fps=FPS,
                    label="abnormal" if anomaly is not None else "normal",
                    anomaly_type=anomaly.kind if anomaly is not None else None,
                    frames_path=frames_dir,
                    annotation_path=ann_path,
                )
            )
        manifest = Manifest(tuple(records))
        save_manifest(manifest, out_dir / "manifest.json")
    except OSError as e:
        raise IoError(str(e)) from e
    return manifest


def default_scenarios(n: int, frame_size=(32, 32), seed: int = 0) -> list[SceneConfig]:
    """A family of visually distinct scenarios for quick experiments."""
    scenes = []
    rng = np.random.default_rng(seed)
    for i in range(n):
        scenes.append(
            SceneConfig(
                scenario_id=f"s{i:02d}",
                dynamics=Dynamics(
                    n_agents=int(rng.integers(1, 4)),
                    agent_speed_px_per_frame=float(rng.uniform(0.5, 2.0)),
                    agent_size_px=int(rng.integers(3, 7)),
                    background_level=float(rng.uniform(0.1, 0.9)),
                    lighting_period_frames=int(rng.integers(20, 60)) if rng.random() < 0.5 else None,
                    noise_std=float(rng.uniform(0.0, 0.03)),
                ),
                frame_size=tuple(frame_size),
                seed=i,
            )
        )
    return scenes


def records_by_view(records: Sequence[VideoRecord]) -> dict[tuple[str, str], list[VideoRecord]]:
    out: dict[tuple[str, str], list[VideoRecord]] = {}
    for r in records:
        out.setdefault((r.scenario_id, r.view_id), []).append(r)
    return out
