"""Episodic N-way K-shot meta-learning over (scenario, view) tasks.

Sampling comes in two flavours. ``scenario`` mode draws N distinct scenarios
and one random view inside each; ``view`` mode draws N distinct
(scenario, view) pairs and ignores the scenario grouping. Each task gets K
training blocks and V validation blocks drawn without replacement from the
chosen view's normal training videos.

The learner is MAML: inner gradient steps on a task's training blocks produce
adapted parameters, whose validation loss summed over tasks is the
meta-objective minimized w.r.t. the shared initialization.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import Manifest, SplitSpec, TemporalBlock, VideoRecord, block_at, load_frames, num_blocks
from .errors import EmptyTaskSet, InsufficientBlocks, InsufficientScenarios, InvalidConfig, VideoTooShort
from .predictor import FramePredictor, LossWeights, PredictorConfig, batch_loss, init_predictor, stack_pairs

log = logging.getLogger(__name__)

SAMPLER_MODES = ("scenario", "view")
OUTER_OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class MetaConfig:
    n_way: int = 7
    k_shot: int = 10
    val_size: int | None = None
    inner_lr: float = 0.05
    inner_steps: int = 1
    outer_lr: float = 0.1
    meta_batch_tasks: int | None = None
    epochs: int = 1500
    sampler_mode: str = "scenario"
    second_order: bool = False
    seed: int = 0
    window: int = 5
    outer_optimizer: str = "sgd"
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.val_size is None:
            object.__setattr__(self, "val_size", self.k_shot)
        if self.meta_batch_tasks is None:
            object.__setattr__(self, "meta_batch_tasks", self.n_way)
        if self.n_way < 1 or self.k_shot < 1 or self.val_size < 1:
            raise InvalidConfig("n_way, k_shot and val_size must be >= 1")
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise InvalidConfig("learning rates must be nonnegative")
        if self.inner_steps < 1 or self.meta_batch_tasks < 1 or self.epochs < 0:
            raise InvalidConfig("inner_steps and meta_batch_tasks must be >= 1, epochs >= 0")
        if self.sampler_mode not in SAMPLER_MODES:
            raise InvalidConfig(f"sampler_mode must be one of {SAMPLER_MODES}")
        if self.outer_optimizer not in OUTER_OPTIMIZERS:
            raise InvalidConfig(f"outer_optimizer must be one of {OUTER_OPTIMIZERS}")
        if self.window < 2:
            raise InvalidConfig("window must be >= 2")

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "MetaConfig":
        obj = dict(obj)
        if "loss" in obj:
            obj["loss"] = LossWeights(**obj["loss"])
        return cls(**obj)


@dataclass(frozen=True, eq=False)
class EpisodeTask:
    scenario_id: str
    view_id: str
    train_pairs: tuple[TemporalBlock, ...]
    val_pairs: tuple[TemporalBlock, ...]

    def __post_init__(self):
        object.__setattr__(self, "train_pairs", tuple(self.train_pairs))
        object.__setattr__(self, "val_pairs", tuple(self.val_pairs))
        if {p.key for p in self.train_pairs} & {p.key for p in self.val_pairs}:
            raise InvalidConfig("train and validation blocks overlap")

    @property
    def sort_key(self):
        return (
            self.scenario_id,
            self.view_id,
            tuple(p.key for p in self.train_pairs),
            tuple(p.key for p in self.val_pairs),
        )


class FrameStore:
    """Lazy per-video frame cache."""

    def __init__(self, loader: Callable[[VideoRecord], np.ndarray] = load_frames):
        self._loader = loader
        self._frames: dict[str, np.ndarray] = {}

    def __call__(self, record: VideoRecord) -> np.ndarray:
        if record.video_id not in self._frames:
            self._frames[record.video_id] = self._loader(record)
        return self._frames[record.video_id]

    def put(self, video_id: str, frames: np.ndarray) -> None:
        self._frames[video_id] = frames


def _eligible_records(manifest: Manifest, split: SplitSpec) -> list[VideoRecord]:
    # prediction models learn normality, so only normal training videos feed episodes
    return [r for r in manifest if r.video_id in split.train_ids and not r.is_abnormal]


def _views(records: Sequence[VideoRecord]) -> dict[tuple[str, str], list[VideoRecord]]:
    out: dict[tuple[str, str], list[VideoRecord]] = {}
    for r in sorted(records, key=lambda r: r.video_id):
        out.setdefault((r.scenario_id, r.view_id), []).append(r)
    return out


def _sample_task(scenario_id, view_id, records, config, rng, store) -> EpisodeTask:
    candidates = [(r, s) for r in records for s in range(1, num_blocks(r.frame_count, config.window) + 1)]
    need = config.k_shot + config.val_size
    if len(candidates) < need:
        raise InsufficientBlocks(
            f"({scenario_id}, {view_id}) has {len(candidates)} blocks, {need} required"
        )
    picks = rng.choice(len(candidates), size=need, replace=False)
    blocks = []
    for i in picks:
        r, start = candidates[i]
        blocks.append(block_at(store(r), r.video_id, int(start), config.window))
    return EpisodeTask(scenario_id, view_id, blocks[: config.k_shot], blocks[config.k_shot :])


def sample_episode(manifest: Manifest, split: SplitSpec, config: MetaConfig, rng: np.random.Generator,
                   store: FrameStore | None = None) -> list[EpisodeTask]:
    """Draw one N-way K-shot episode."""
    store = store or FrameStore()
    views = _views(_eligible_records(manifest, split))
    tasks = []
    if config.sampler_mode == "scenario":
        scenarios = sorted({s for s, _ in views})
        if len(scenarios) < config.n_way:
            raise InsufficientScenarios(f"{len(scenarios)} training scenarios, n_way={config.n_way}")
        for i in rng.choice(len(scenarios), size=config.n_way, replace=False):
            s = scenarios[i]
            options = sorted(v for sc, v in views if sc == s)
            v = options[int(rng.integers(len(options)))]
            tasks.append(_sample_task(s, v, views[(s, v)], config, rng, store))
    else:
        pairs = sorted(views)
        if len(pairs) < config.n_way:
            raise InsufficientScenarios(f"{len(pairs)} training views, n_way={config.n_way}")
        for i in rng.choice(len(pairs), size=config.n_way, replace=False):
            s, v = pairs[i]
            tasks.append(_sample_task(s, v, views[(s, v)], config, rng, store))
    return tasks


# --------------------------------------------------------------------------
# inner / outer optimization
# --------------------------------------------------------------------------


def _leaf_params(model: FramePredictor) -> OrderedDict:
    return OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in model.params.items())


def _adapt_params(cfg: PredictorConfig, params, pairs, config: MetaConfig, create_graph: bool):
    if config.inner_lr == 0:
        return params
    inputs, targets = stack_pairs(pairs, next(iter(params.values())).dtype)
    for _ in range(config.inner_steps):
        loss = batch_loss(cfg, params, inputs, targets, config.loss)
        grads = torch.autograd.grad(loss, list(params.values()), create_graph=create_graph)
        params = OrderedDict((k, p - config.inner_lr * g) for (k, p), g in zip(params.items(), grads))
        if not create_graph:
            params = OrderedDict((k, p.detach().requires_grad_(True)) for k, p in params.items())
    return params


def inner_adapt(model: FramePredictor, task: EpisodeTask | Sequence[TemporalBlock], config: MetaConfig) -> FramePredictor:
    """Plain gradient descent on the mean composite loss over the task's training blocks."""
    pairs = task.train_pairs if isinstance(task, EpisodeTask) else tuple(task)
    if config.inner_lr == 0 or not pairs:
        return model
    adapted = _adapt_params(model.config, _leaf_params(model), pairs, config, create_graph=False)
    return model.with_params(adapted)


def pairs_loss(model: FramePredictor, pairs: Sequence[TemporalBlock], weights: LossWeights) -> float:
    inputs, targets = stack_pairs(pairs, model.dtype)
    with torch.no_grad():
        return float(batch_loss(model.config, model.params, inputs, targets, weights))


def meta_objective(model: FramePredictor, tasks: Sequence[EpisodeTask], config: MetaConfig) -> tuple[float, torch.Tensor]:
    """Summed validation loss of the task-adapted models and its gradient w.r.t. the initialization.

    With ``second_order`` the gradient flows through the inner updates;
    otherwise the first-order approximation takes the gradient at the adapted
    parameters. Tasks are processed in a canonical order so the result does
    not depend on the order of ``tasks``.
    """
    if not tasks:
        raise EmptyTaskSet("meta_objective needs at least one task")
    ordered = sorted(tasks, key=lambda t: t.sort_key)
    cfg = model.config
    losses, grads = [], []
    for task in ordered:
        params = _leaf_params(model)
        adapted = _adapt_params(cfg, params, task.train_pairs, config, create_graph=config.second_order)
        inputs, targets = stack_pairs(task.val_pairs, model.dtype)
        val = batch_loss(cfg, adapted, inputs, targets, config.loss)
        wrt = params if config.second_order else adapted
        g = torch.autograd.grad(val, list(wrt.values()))
        losses.append(val.detach())
        grads.append(torch.cat([x.reshape(-1) for x in g]))
    total_loss = losses[0]
    total_grad = grads[0]
    for l, g in zip(losses[1:], grads[1:]):
        total_loss = total_loss + l
        total_grad = total_grad + g
    return float(total_loss), total_grad


def _episode_tasks(manifest, split, config, iteration, store) -> list[EpisodeTask]:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, iteration]))
    tasks: list[EpisodeTask] = []
    while len(tasks) < config.meta_batch_tasks:
        tasks.extend(sample_episode(manifest, split, config, rng, store))
    return tasks[: config.meta_batch_tasks]


def meta_train(
    manifest: Manifest,
    split: SplitSpec,
    config: MetaConfig,
    init_seed: int = 0,
    predictor_config: PredictorConfig | None = None,
    store: FrameStore | None = None,
    init_model: FramePredictor | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[FramePredictor, list[dict]]:
    """Run ``config.epochs`` outer iterations, one sampled mini-batch of tasks each."""
    store = store or FrameStore()
    if init_model is None:
        if predictor_config is None:
            first = _eligible_records(manifest, split)
            size = store(first[0]).shape[1:3] if first else (32, 32)
            predictor_config = PredictorConfig(frame_size=tuple(size), input_frames=config.window - 1)
        init_model = init_predictor(predictor_config, init_seed)
    if init_model.config.window != config.window:
        raise InvalidConfig("predictor input_frames must equal window - 1")
    model = init_model
    history: list[dict] = []
    if config.epochs == 0:
        return model, history

    flat = model.flat().clone()
    opt = None
    if config.outer_optimizer == "adam":
        flat.requires_grad_(True)
        opt = torch.optim.Adam([flat], lr=config.outer_lr)
    for it in range(config.epochs):
        t0 = time.perf_counter()
        tasks = _episode_tasks(manifest, split, config, it, store)
        loss, grad = meta_objective(model, tasks, config)
        with torch.no_grad():
            if opt is None:
                flat = flat - config.outer_lr * grad
            else:
                flat.grad = grad.to(flat.dtype)
                opt.step()
        model = FramePredictor.from_flat(model.config, flat.detach())
        wall_ms = (time.perf_counter() - t0) * 1000.0
        history.append({"iteration": it, "meta_loss": loss, "wall_ms": wall_ms})
        if progress is not None:
            progress(it, loss)
        log.debug("iteration %d meta_loss %.6f", it, loss)
    return model, history


def write_training_log(history: Sequence[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "meta_loss", "wall_ms"])
        for row in history:
            writer.writerow([row["iteration"], repr(float(row["meta_loss"])), f"{row['wall_ms']:.3f}"])
    return path


def save_meta_config(config: MetaConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# inference-time adaptation
# --------------------------------------------------------------------------


def adaptation_boundary(k_shot: int, window: int) -> int:
    """Last frame index consumed by adaptation; frames after it are for testing."""
    return k_shot + window - 1


def adapt_to_target(model: FramePredictor, target_video: VideoRecord, config: MetaConfig,
                    frames: np.ndarray | None = None) -> FramePredictor:
    """Adapt to a new video using its first K temporal blocks."""
    boundary = adaptation_boundary(config.k_shot, config.window)
    if target_video.frame_count < boundary:
        raise VideoTooShort(
            f"{target_video.video_id}: {target_video.frame_count} frames, adaptation needs {boundary}"
        )
    if frames is None:
        frames = load_frames(target_video)
    pairs = [block_at(frames, target_video.video_id, i, config.window) for i in range(1, config.k_shot + 1)]
    log.info("adapting to %s on frames 1..%d", target_video.video_id, boundary)
    return inner_adapt(model, pairs, config)


def with_inner_lr(config: MetaConfig, inner_lr: float) -> MetaConfig:
    return replace(config, inner_lr=inner_lr)
