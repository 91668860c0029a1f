"""Visual sentences: ordered, role-tagged clips laid out along time."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .worlds import (
    Clip,
    Direction,
    Modality,
    TaskKind,
    TaskSample,
    make_pair,
    make_task_sample,
    DEFAULT_RESOLUTION,
    DEFAULT_VIDEO_FRAMES,
    draw_pan,
)

__all__ = [
    "ContextType",
    "Role",
    "VisualSentence",
    "ModalityMismatchError",
    "compose",
    "reverse",
    "total_frames",
    "split_by_role",
    "modality_pattern",
    "build_sentence",
    "SHOT_COUNTS",
    "default_roles",
]

SHOT_COUNTS = (4, 6, 8)


class ContextType(str, enum.Enum):
    I = "I"
    II = "II"
    III = "III"
    IV = "IV"

    @property
    def row(self) -> tuple[Modality, Modality, Modality, Modality]:
        return _ROWS[self]


_V, _I = Modality.VIDEO, Modality.IMAGE
_ROWS = {
    ContextType.I: (_V, _V, _V, _V),
    ContextType.II: (_I, _I, _I, _I),
    ContextType.III: (_I, _I, _V, _V),
    ContextType.IV: (_I, _V, _I, _V),
}


class Role(str, enum.Enum):
    EXAMPLE_IN = "example-in"
    EXAMPLE_OUT = "example-out"
    QUERY_IN = "query-in"
    TARGET = "target"


class ModalityMismatchError(ValueError):
    pass


def modality_pattern(context: ContextType, shots: int = 4) -> tuple[Modality, ...]:
    """Per-clip modalities; pairs after the first repeat the row's query pair."""
    if shots not in SHOT_COUNTS:
        raise ValueError(f"shots must be one of {SHOT_COUNTS}, got {shots}")
    row = ContextType(context).row
    return row[:2] + row[2:] * (shots // 2 - 1)


def default_roles(n: int) -> tuple[Role, ...]:
    roles = []
    for i in range(n - 1):
        if i < n - 2:
            roles.append(Role.EXAMPLE_IN if i % 2 == 0 else Role.EXAMPLE_OUT)
        else:
            roles.append(Role.QUERY_IN)
    roles.append(Role.TARGET)
    return tuple(roles)


@dataclass(frozen=True, eq=False)
class VisualSentence:
    clips: tuple[Clip, ...]
    roles: tuple[Role, ...]
    context_type: ContextType
    shots: int
    direction: Direction
    kind: TaskKind | None = None

    def __post_init__(self):
        object.__setattr__(self, "clips", tuple(self.clips))
        object.__setattr__(self, "roles", tuple(Role(r) for r in self.roles))
        object.__setattr__(self, "context_type", ContextType(self.context_type))
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.shots not in SHOT_COUNTS or len(self.clips) != self.shots:
            raise ValueError(f"{len(self.clips)} clips do not form a {self.shots}-shot sentence")
        if len(self.roles) != len(self.clips):
            raise ValueError("one role per clip")
        targets = [i for i, r in enumerate(self.roles) if r is Role.TARGET]
        if targets != [len(self.clips) - 1]:
            raise ValueError("exactly one target, in final position")
        _check_modalities(self.clips, modality_pattern(self.context_type, self.shots))
        res = {c.resolution for c in self.clips}
        if len(res) != 1:
            raise ValueError(f"all clips must share one resolution, got {sorted(res)}")

    @property
    def target(self) -> Clip:
        return self.clips[-1]

    @property
    def context(self) -> tuple[Clip, ...]:
        return self.clips[:-1]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.clips[0].resolution

    def with_target(self, clip: Clip) -> "VisualSentence":
        return VisualSentence(self.clips[:-1] + (clip,), self.roles, self.context_type,
                              self.shots, self.direction, self.kind)

    def __eq__(self, other):
        if not isinstance(other, VisualSentence):
            return NotImplemented
        return (
            self.roles == other.roles
            and self.context_type is other.context_type
            and self.shots == other.shots
            and self.direction is other.direction
            and len(self.clips) == len(other.clips)
            and all(a == b for a, b in zip(self.clips, other.clips))
        )

    __hash__ = None


def _check_modalities(clips: Sequence[Clip], expected: Sequence[Modality]) -> None:
    for pos, (clip, want) in enumerate(zip(clips, expected)):
        if clip.modality is not want:
            raise ModalityMismatchError(
                f"clip {pos} is {clip.modality.value}, context expects {want.value}"
            )


def compose(samples: Sequence[TaskSample], context, shots: int = 4) -> VisualSentence:
    """Lay out ``shots // 2`` (input, output) pairs taken in order from ``samples``.

    Each sample contributes its (a, a') and (b, b') pairs; the final pair's
    output becomes the target.
    """
    context = ContextType(context)
    pattern = modality_pattern(context, shots)
    pairs = []
    for s in samples:
        pairs.extend([(s.a, s.a_prime), (s.b, s.b_prime)])
    need = shots // 2
    if len(pairs) < need:
        raise ValueError(f"{shots} shots need {need} pairs, got {len(pairs)}")
    clips = tuple(c for pair in pairs[:need] for c in pair)
    _check_modalities(clips, pattern)
    directions = {s.kind.direction for s in samples}
    if len(directions) != 1:
        raise ValueError("samples mix understanding and generation directions")
    return VisualSentence(clips, default_roles(shots), context, shots, directions.pop(),
                          samples[0].kind)


def split_by_role(sentence: VisualSentence) -> dict[Role, list[Clip]]:
    out: dict[Role, list[Clip]] = {r: [] for r in Role}
    for role, clip in zip(sentence.roles, sentence.clips):
        out[role].append(clip)
    return out


def reverse(sentence: VisualSentence) -> VisualSentence:
    """Swap each (input, output) pair, toggling the direction flag."""
    if sentence.shots != 4:
        raise ValueError("reversal is defined for 4-shot sentences only")
    a, a_prime, b, b_prime = sentence.clips
    flipped = (
        Direction.GENERATION
        if sentence.direction is Direction.UNDERSTANDING
        else Direction.UNDERSTANDING
    )
    row = tuple(c.modality for c in (a_prime, a, b_prime, b))
    context = next(c for c in ContextType if c.row == row)
    kind = None
    if sentence.kind is not None and sentence.kind.task.value != "camera_move":
        kind = TaskKind(sentence.kind.task, flipped)
    return VisualSentence((a_prime, a, b_prime, b), default_roles(4), context, 4, flipped, kind)


def total_frames(sentence: VisualSentence) -> int:
    return sum(c.num_frames for c in sentence.clips)


def build_sentence(kind, seed: int, context, shots: int = 4,
                   resolution=DEFAULT_RESOLUTION,
                   video_frames: int = DEFAULT_VIDEO_FRAMES) -> VisualSentence:
    """Generate a full sentence for ``kind`` from one seed.

    Pairs beyond the first two come from the same task (and, for camera moves,
    the same pan) but fresh scenes.
    """
    if not isinstance(kind, TaskKind):
        kind = TaskKind.of(kind)
    context = ContextType(context)
    pattern = modality_pattern(context, shots)
    sample = make_task_sample(kind, seed, pattern[:4], resolution, video_frames)
    if shots == 4:
        return compose([sample], context, 4)
    rng = np.random.default_rng([int(seed), 0xE17A])
    pan = _sample_pan(sample)
    clips = list(sample.clips)
    for i in range(4, shots, 2):
        x, y = make_pair(kind, rng, pattern[i:i + 2], resolution, video_frames, pan)
        clips.extend([x, y])
    return VisualSentence(tuple(clips), default_roles(shots), context, shots, kind.direction, kind)


def _sample_pan(sample: TaskSample):
    if sample.kind.task.value != "camera_move":
        return None
    return draw_pan(np.random.default_rng([int(sample.seed), 0x5EED]))
