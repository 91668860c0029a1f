"""Reshape-only patch codec between visual sentences and flat token grids."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .sentence import VisualSentence
from .worlds import Clip

__all__ = ["TokenGrid", "CorruptGridError", "tokenize", "detokenize"]


class CorruptGridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """Tokens (N, 3*p*p) with (t, h, w) coordinates and a target mask.

    ``clip_ranges[i]`` is the half-open token range of clip ``i``;
    ``clip_frames[i]`` its frame count. ``sentence`` is kept so that
    ``detokenize`` can rebuild roles and context metadata.
    """

    tokens: np.ndarray
    coords: np.ndarray
    target_mask: np.ndarray
    clip_ranges: tuple[tuple[int, int], ...]
    clip_frames: tuple[int, ...]
    patch_size: int
    resolution: tuple[int, int]
    sentence: VisualSentence | None = None
    cumulative_time: bool = True

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[1]

    @property
    def tokens_per_frame(self) -> int:
        h, w = self.resolution
        return (h // self.patch_size) * (w // self.patch_size)

    def with_tokens(self, tokens: np.ndarray) -> "TokenGrid":
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.shape != self.tokens.shape:
            raise ValueError(f"token shape {tokens.shape} != {self.tokens.shape}")
        return replace(self, tokens=tokens)


def _patchify(frames: np.ndarray, p: int) -> np.ndarray:
    f, h, w, c = frames.shape
    x = frames.reshape(f, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(f * (h // p) * (w // p), p * p * c)


def _unpatchify(tokens: np.ndarray, frames: int, resolution, p: int) -> np.ndarray:
    h, w = resolution
    x = tokens.reshape(frames, h // p, w // p, p, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(frames, h, w, 3)


def tokenize(sentence: VisualSentence, patch_size: int = 8,
             cumulative_time: bool = True) -> TokenGrid:
    """Flatten every clip into row-major p x p x 3 patches, clips concatenated in time.

    With ``cumulative_time=False`` each clip's time index restarts at 0.
    """
    h, w = sentence.resolution
    p = int(patch_size)
    if p < 1 or h % p or w % p:
        raise ValueError(f"resolution {h}x{w} is not divisible by patch size {p}")
    hp, wp = h // p, w // p
    blocks, coords, ranges, frames = [], [], [], []
    t0, start = 0, 0
    for clip in sentence.clips:
        f = clip.num_frames
        blocks.append(_patchify(clip.frames, p))
        tt, hh, ww = np.meshgrid(np.arange(f), np.arange(hp), np.arange(wp), indexing="ij")
        coords.append(np.stack([tt.ravel() + t0, hh.ravel(), ww.ravel()], axis=1))
        n = f * hp * wp
        ranges.append((start, start + n))
        frames.append(f)
        start += n
        if cumulative_time:
            t0 += f
    tokens = np.concatenate(blocks, axis=0)
    mask = np.zeros(tokens.shape[0], dtype=bool)
    mask[ranges[-1][0]:ranges[-1][1]] = True
    return TokenGrid(tokens, np.concatenate(coords).astype(np.int64), mask, tuple(ranges),
                     tuple(frames), p, (h, w), sentence, cumulative_time)


def _check(grid: TokenGrid) -> None:
    n = grid.num_tokens
    if grid.coords.shape != (n, 3) or grid.target_mask.shape != (n,):
        raise CorruptGridError("coords/mask do not match the token count")
    hp, wp = grid.resolution[0] // grid.patch_size, grid.resolution[1] // grid.patch_size
    t0 = 0
    for (lo, hi), f in zip(grid.clip_ranges, grid.clip_frames):
        if hi - lo != f * hp * wp:
            raise CorruptGridError(f"clip range {lo}:{hi} does not hold {f} frames")
        tt, hh, ww = np.meshgrid(np.arange(f), np.arange(hp), np.arange(wp), indexing="ij")
        want = np.stack([tt.ravel() + t0, hh.ravel(), ww.ravel()], axis=1)
        if not np.array_equal(grid.coords[lo:hi], want):
            raise CorruptGridError(f"coordinate gap or disorder in tokens {lo}:{hi}")
        if grid.cumulative_time:
            t0 += f
    if grid.clip_ranges[-1][1] != n:
        raise CorruptGridError("clip ranges do not cover all tokens")


def detokenize(grid: TokenGrid, target_only: bool = False):
    """Inverse of ``tokenize``.

    Returns the target ``Clip`` (clamped to [0, 1]) when ``target_only``, else a
    ``VisualSentence`` with every clip clamped.
    """
    _check(grid)
    p = grid.patch_size
    clips = []
    pairs = list(zip(grid.clip_ranges, grid.clip_frames))
    if target_only:
        pairs = pairs[-1:]
    for (lo, hi), f in pairs:
        frames = np.clip(_unpatchify(grid.tokens[lo:hi], f, grid.resolution, p), 0.0, 1.0)
        clips.append(Clip.from_frames(frames))
    if target_only:
        return clips[0]
    s = grid.sentence
    if s is None:
        raise CorruptGridError("grid carries no sentence metadata; use target_only")
    return VisualSentence(tuple(clips), s.roles, s.context_type, s.shots, s.direction, s.kind)
