"""Target-only noising, the velocity loss, context sampling and the SFT loop."""

from __future__ import annotations

import bisect
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .codec import TokenGrid, tokenize
from .dit import SentenceDiT
from .lora import trainable_parameters
from .sentence import ContextType, VisualSentence, build_sentence, modality_pattern, default_roles
from .worlds import (
    Clip,
    Direction,
    Task,
    TaskKind,
    random_scene,
    render_scene,
    DEFAULT_RESOLUTION,
    DEFAULT_VIDEO_FRAMES,
)

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "NoisySentence",
    "NumericalError",
    "REGIMES",
    "noising",
    "loss",
    "sample_context",
    "context_probabilities",
    "applicable_contexts",
    "sample_timestep",
    "natural_sentence",
    "training_sentence",
    "run_training",
    "TrainResult",
    "ALL_KINDS",
    "SentencePool",
    "make_optimizer",
]

REGIMES = ("per-task-per-context", "per-task-mixed", "co-train-all", "pretrain-natural")

# the six tasks as they are trained by default (understanding for annotators)
ALL_KINDS = tuple(TaskKind.of(t) for t in Task)


class NumericalError(RuntimeError):
    def __init__(self, message: str, record: dict | None = None):
        super().__init__(message)
        self.record = record or {}


@dataclass
class TrainConfig:
    regime: str = "per-task-per-context"
    tasks: tuple[str, ...] = ("depth_map",)
    direction: str | None = None
    context: str = "II"
    shots: int = 4
    lr: float = 1e-4
    batch_size: int = 1
    iters_per_epoch: int = 200
    epochs: int = 20
    seed: int = 0
    num_samples: int = 20
    data_seed: int = 0
    context_probs: dict[str, float] | None = None
    timestep_sampling: str = "uniform"
    text_mode: str | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    resolution: tuple[int, int] = DEFAULT_RESOLUTION
    video_frames: int = DEFAULT_VIDEO_FRAMES

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        self.tasks = tuple(self.tasks)
        self.resolution = tuple(self.resolution)
        self.betas = tuple(self.betas)
        if self.timestep_sampling not in ("uniform", "logit-normal"):
            raise ValueError("timestep_sampling is 'uniform' or 'logit-normal'")
        if self.context_probs is not None:
            total = sum(self.context_probs.values())
            if not math.isclose(total, 1.0, abs_tol=1e-9):
                raise ValueError(f"context probabilities sum to {total}, not 1")

    @property
    def kinds(self) -> tuple[TaskKind, ...]:
        if self.regime == "co-train-all" and not self.tasks:
            return ALL_KINDS
        return tuple(TaskKind.of(t, self.direction) for t in self.tasks)

    @property
    def total_iterations(self) -> int:
        return self.epochs * self.iters_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        d["resolution"] = list(self.resolution)
        d["betas"] = list(self.betas)
        return d


@dataclass(frozen=True, eq=False)
class NoisySentence:
    grid: TokenGrid
    t: float
    epsilon: np.ndarray  # (n_target, D)
    z_t: np.ndarray  # (N, D)

    @property
    def velocity_target(self) -> np.ndarray:
        return self.epsilon - self.grid.tokens[self.grid.target_mask]


def noising(grid: TokenGrid, t: float, seed) -> NoisySentence:
    """Interpolate only the target rows towards standard-normal noise.

    Target rows become ``(1 - t) * x + t * eps``; context rows are copied as is.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = grid.target_mask
    x = grid.tokens[mask]
    eps = rng.standard_normal(x.shape)
    z = grid.tokens.copy()
    z[mask] = (1.0 - t) * x + t * eps
    return NoisySentence(grid, float(t), eps, z)


def loss(model_out, epsilon, clean_target, mask):
    """Mean squared error between predicted and true velocity on target rows only.

    ``model_out`` is (N, D) over all tokens; ``epsilon`` and ``clean_target``
    are (n_target, D). Works on numpy arrays or torch tensors.
    """
    if isinstance(model_out, torch.Tensor):
        mask_t = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
        eps = torch.as_tensor(epsilon, dtype=model_out.dtype)
        x = torch.as_tensor(clean_target, dtype=model_out.dtype)
        return torch.mean((model_out[mask_t] - (eps - x)) ** 2)
    model_out = np.asarray(model_out)
    if model_out.shape[0] != np.asarray(mask).shape[0]:
        raise ValueError("model output and mask disagree on token count")
    v = np.asarray(epsilon) - np.asarray(clean_target)
    return float(np.mean((model_out[np.asarray(mask, dtype=bool)] - v) ** 2))


def applicable_contexts(task) -> tuple[ContextType, ...]:
    task = task.task if isinstance(task, TaskKind) else Task(task)
    if task is Task.CAMERA_MOVE:
        return (ContextType.I, ContextType.IV)
    return (ContextType.I, ContextType.II, ContextType.III)


def context_probabilities(task) -> dict[ContextType, float]:
    task = task.task if isinstance(task, TaskKind) else Task(task)
    if task is Task.CAMERA_MOVE:
        return {ContextType.I: 0.5, ContextType.IV: 0.5}
    return {ContextType.I: 0.3, ContextType.II: 0.3, ContextType.III: 0.4}


def sample_context(task, rng: np.random.Generator, probs=None) -> ContextType:
    table = context_probabilities(task) if probs is None else {
        ContextType(k): v for k, v in probs.items()
    }
    contexts = list(table)
    cdf = list(itertools.accumulate(table[c] for c in contexts))
    # what rng.choice(p=...) does, minus its per-call validation overhead
    return contexts[bisect.bisect_right(cdf, rng.random() * cdf[-1])]


def sample_timestep(rng: np.random.Generator, how: str = "uniform") -> float:
    if how == "uniform":
        # (0, 1]
        return float(1.0 - rng.random())
    return float(1.0 / (1.0 + np.exp(-rng.standard_normal())))


def natural_sentence(seed, context="I", shots: int = 4, resolution=DEFAULT_RESOLUTION,
                     video_frames: int = DEFAULT_VIDEO_FRAMES) -> VisualSentence:
    """One continuous natural video cut into consecutive clips (pre-training data)."""
    pattern = modality_pattern(context, shots)
    lengths = [1 if m.value == "image" else video_frames for m in pattern]
    rng = np.random.default_rng([int(seed), 0xA7])
    scene = random_scene(rng, sum(lengths))
    video = render_scene(scene, sum(lengths), resolution).frames
    clips, start = [], 0
    for n in lengths:
        clips.append(Clip.from_frames(video[start:start + n]))
        start += n
    return VisualSentence(tuple(clips), default_roles(shots), context, shots, Direction.GENERATION)


def training_sentence(kind: TaskKind, index: int, context, config: TrainConfig) -> VisualSentence:
    """Training sentence ``index`` (of ``config.num_samples``) for one task and context."""
    seed = config.data_seed * 100_003 + index
    return build_sentence(kind, seed, context, config.shots, config.resolution,
                          config.video_frames)


@dataclass
class TrainResult:
    model: SentenceDiT
    optimizer: torch.optim.Optimizer
    losses: list[dict] = field(default_factory=list)
    epoch: int = 0
    iteration: int = 0


class SentencePool:
    """Fixed training sentences grouped by (task kind, context)."""

    def __init__(self, sentences: Sequence[VisualSentence]):
        self.groups: dict[tuple[str, ContextType], list[VisualSentence]] = {}
        self._kinds: dict[str, TaskKind] = {}
        for s in sentences:
            if s.kind is None:
                raise ValueError("training sentences need a task kind")
            self._kinds.setdefault(s.kind.name, s.kind)
            self.groups.setdefault((s.kind.name, s.context_type), []).append(s)
        if not self.groups:
            raise ValueError("empty sentence pool")

    @property
    def kinds(self) -> tuple[TaskKind, ...]:
        return tuple(self._kinds.values())

    def contexts(self, kind: TaskKind) -> tuple[ContextType, ...]:
        return tuple(c for (k, c) in self.groups if k == kind.name)

    def size(self, kind: TaskKind, context: ContextType) -> int:
        return len(self.groups[(kind.name, context)])

    def get(self, kind: TaskKind, context: ContextType, index: int) -> VisualSentence:
        return self.groups[(kind.name, context)][index]


def _pick_context(config: TrainConfig, kind: TaskKind, rng, available=None) -> ContextType:
    if config.regime == "per-task-per-context":
        return ContextType(config.context)
    if config.regime == "pretrain-natural":
        return list(ContextType)[int(rng.integers(4))]
    probs = config.context_probs or {c.value: p for c, p in context_probabilities(kind).items()}
    if available is not None:
        probs = {c: p for c, p in probs.items() if ContextType(c) in available}
        if not probs:
            raise ValueError(f"no training data for {kind.name} in any applicable context")
    return sample_context(kind, rng, probs)


def _draw(config: TrainConfig, iteration: int, pool: SentencePool | None = None):
    """Everything random about one iteration, from a counter-based stream."""
    rng = np.random.default_rng([config.seed, iteration, 0x17])
    kinds = config.kinds if pool is None else pool.kinds
    kind = kinds[int(rng.integers(len(kinds)))] if len(kinds) > 1 else kinds[0]
    available = None if pool is None else pool.contexts(kind)
    context = _pick_context(config, kind, rng, available)
    size = config.num_samples if pool is None else pool.size(kind, context)
    index = int(rng.integers(size))
    t = sample_timestep(rng, config.timestep_sampling)
    return kind, context, index, t, rng


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for _, p in trainable_parameters(model)]
    if not params:
        raise ValueError("model has no trainable parameters")
    return torch.optim.Adam(params, lr=config.lr, betas=config.betas, weight_decay=0.0)


def run_training(model: SentenceDiT, config: TrainConfig, optimizer=None, start_epoch: int = 0,
                 on_epoch_end: Callable | None = None, pool: SentencePool | None = None,
                 log_every: int = 0) -> TrainResult:
    """Optimise the model's trainable parameters (the adapters, for SFT regimes).

    Iteration ``i`` draws its task, context, sample, timestep and noise from a
    stream seeded by ``(config.seed, i)``, so a run resumed at an epoch
    boundary replays exactly. Sentences come from ``pool`` when given,
    otherwise they are generated from ``config.data_seed``.
    """
    p = model.config.patch_size
    optimizer = optimizer or make_optimizer(model, config)
    mode = config.text_mode
    result = TrainResult(model, optimizer, epoch=start_epoch)
    model.train()
    for epoch in range(start_epoch, config.epochs):
        for it in range(config.iters_per_epoch):
            global_it = epoch * config.iters_per_epoch + it
            optimizer.zero_grad(set_to_none=True)
            total = 0.0
            records = []
            for b in range(config.batch_size):
                kind, context, index, t, rng = _draw(config, global_it * config.batch_size + b,
                                                     pool)
                if config.regime == "pretrain-natural":
                    sentence = natural_sentence(config.data_seed * 100_003 + index, context,
                                                config.shots, config.resolution,
                                                config.video_frames)
                    prompt = None
                else:
                    if pool is not None:
                        sentence = pool.get(kind, context, index)
                    else:
                        sentence = training_sentence(kind, index, context, config)
                    prompt = model.prompt(kind, mode)
                grid = tokenize(sentence, p)
                noisy = noising(grid, t, rng)
                z = torch.as_tensor(noisy.z_t, dtype=model.dtype)
                out = model(z, grid.coords, grid.target_mask, t, prompt)
                value = loss(out, noisy.epsilon, grid.tokens[grid.target_mask], grid.target_mask)
                if not torch.isfinite(value):
                    record = dict(iteration=global_it, epoch=epoch, task=kind.name,
                                  context=context.value, t=t, loss=float(value))
                    raise NumericalError(f"non-finite loss at iteration {global_it}", record)
                (value / config.batch_size).backward()
                total += float(value.detach())
                records.append((kind, context))
            optimizer.step()
            kind, context = records[-1]
            result.losses.append(dict(iteration=global_it, epoch=epoch, task=kind.name,
                                      context=context.value, loss=total / config.batch_size))
            if log_every and global_it % log_every == 0:
                logger.info("iter %d epoch %d loss %.5f", global_it, epoch,
                            total / config.batch_size)
        result.epoch = epoch + 1
        result.iteration = (epoch + 1) * config.iters_per_epoch
        if on_epoch_end is not None:
            on_epoch_end(result)
    model.eval()
    return result
