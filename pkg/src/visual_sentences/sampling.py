"""Euler integration of the learned flow with the context held clean."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import TokenGrid, detokenize, tokenize
from .dit import SentenceDiT
from .sentence import VisualSentence, modality_pattern
from .worlds import Clip

__all__ = [
    "SampleConfig",
    "SampleResult",
    "sample",
    "step_trace",
    "SamplingError",
    "placeholder_target",
]


class SamplingError(RuntimeError):
    pass


@dataclass
class SampleConfig:
    steps: int = 50
    seed: int = 0
    trace: bool = False
    text_mode: str | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class SampleResult:
    clip: Clip
    grid: TokenGrid
    latent: np.ndarray  # final target rows before clamping
    trace: list[np.ndarray] = field(default_factory=list)
    context_checks: list[bool] = field(default_factory=list)


def placeholder_target(context, context_type, shots: int = 4, direction="understanding",
                       kind=None) -> VisualSentence:
    """Sentence made of ``context`` clips plus an all-zero target.

    The target's modality comes from the context row; its frame count is read
    off the context clips, so the target is never padded or truncated.
    """
    context = tuple(context)
    pattern = modality_pattern(context_type, shots)
    if len(context) != shots - 1:
        raise SamplingError(f"{shots}-shot sentence needs {shots - 1} context clips")
    want = pattern[-1]
    frames = [c.num_frames for c in context if c.modality is want]
    if want.value == "image":
        n = 1
    elif frames:
        n = frames[-1]
    else:
        raise SamplingError("context holds no video clip to size a video target")
    h, w = context[0].resolution
    blank = Clip(np.zeros((n, h, w, 3)), want)
    roles = ("example-in", "example-out") * (shots // 2 - 1) + ("query-in", "target")
    return VisualSentence(context + (blank,), roles, context_type, shots, direction, kind)


def sample(sentence: VisualSentence, model: SentenceDiT, cfg: SampleConfig | None = None,
           kind=None, velocity_fn=None) -> SampleResult:
    """Generate the final clip of ``sentence`` from noise.

    ``sentence`` carries its context clips plus any placeholder target of the
    right shape (its pixels are ignored). ``velocity_fn(z, grid, t)`` may
    replace the model for testing.
    """
    cfg = cfg or SampleConfig()
    kind = kind if kind is not None else sentence.kind
    grid = tokenize(sentence, model.config.patch_size if model is not None else 8)
    expected = modality_pattern(sentence.context_type, sentence.shots)
    for pos, (clip, want) in enumerate(zip(sentence.clips, expected)):
        if clip.modality is not want:
            raise SamplingError(f"clip {pos} is {clip.modality.value}, context wants {want.value}")
    mask = grid.target_mask
    clean = grid.tokens
    rng = np.random.default_rng(cfg.seed)
    z = clean.copy()
    z[mask] = rng.standard_normal((int(mask.sum()), grid.token_dim))
    result = SampleResult(None, grid, None)
    if cfg.trace:
        result.trace.append(z[mask].copy())
    prompt = model.prompt(kind, cfg.text_mode) if model is not None else None
    dt = 1.0 / cfg.steps
    with torch.no_grad():
        for i in range(cfg.steps):
            t = 1.0 - i * dt
            z[~mask] = clean[~mask]
            result.context_checks.append(bool(np.array_equal(z[~mask], clean[~mask])))
            if velocity_fn is not None:
                v = np.asarray(velocity_fn(z, grid, t))
            else:
                out = model(torch.as_tensor(z, dtype=model.dtype), grid.coords, mask, t, prompt)
                v = out.numpy().astype(np.float64)
            z[mask] = z[mask] - dt * v[mask]
            if not np.all(np.isfinite(z[mask])):
                raise SamplingError(f"non-finite latent at step {i}")
            if cfg.trace:
                result.trace.append(z[mask].copy())
    z[~mask] = clean[~mask]
    final = grid.with_tokens(z)
    result.grid = final
    result.latent = z[mask].copy()
    result.clip = detokenize(final, target_only=True)
    return result


def step_trace(result: SampleResult) -> list[np.ndarray]:
    if not result.trace:
        raise ValueError("sampling ran without tracing; pass SampleConfig(trace=True)")
    return result.trace
