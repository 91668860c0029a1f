"""Procedural scenes, annotators and edits for the six toy tasks.

Everything here is a pure function of ``(kind, seed, plan)``; no global
random state is touched.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Modality",
    "Clip",
    "SceneObject",
    "Scene",
    "Task",
    "Direction",
    "TaskKind",
    "TaskSample",
    "SceneError",
    "UnsupportedContextError",
    "SEG_PALETTE",
    "OBJECT_COLORS",
    "STYLE_MATRIX",
    "render_scene",
    "random_scene",
    "object_id_map",
    "annotate",
    "apply_camera_move",
    "make_task_sample",
    "make_pair",
]

DEFAULT_RESOLUTION = (32, 32)
DEFAULT_VIDEO_FRAMES = 5

# class-id -> RGB; row 0 is background
SEG_PALETTE = np.array(
    [
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
    ]
)

# natural object colors, indexed by class-id - 1
OBJECT_COLORS = np.array(
    [
        [0.85, 0.35, 0.25],
        [0.30, 0.70, 0.35],
        [0.25, 0.40, 0.85],
        [0.90, 0.80, 0.30],
        [0.70, 0.35, 0.75],
        [0.35, 0.80, 0.80],
    ]
)

BACKGROUND_COLORS = np.array(
    [
        [0.10, 0.10, 0.12],
        [0.20, 0.18, 0.15],
        [0.12, 0.16, 0.22],
        [0.28, 0.28, 0.28],
    ]
)

# palette remap standing in for a painterly style; applied as rgb @ STYLE_MATRIX.T
STYLE_MATRIX = np.array(
    [
        [0.20, 0.50, 0.45],
        [0.55, 0.25, 0.35],
        [0.40, 0.60, 0.10],
    ]
)

SHAPES = ("circle", "rectangle", "triangle")


class Modality(str, enum.Enum):
    IMAGE = "image"
    VIDEO = "video"

    @property
    def short(self) -> str:
        return "I" if self is Modality.IMAGE else "V"


class SceneError(ValueError):
    pass


class UnsupportedContextError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Clip:
    """A stack of ``F`` RGB frames with values in [0, 1], shape (F, H, W, 3)."""

    frames: np.ndarray
    modality: Modality

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"frames must be (F, H, W, 3), got {frames.shape}")
        if frames.shape[0] < 1:
            raise ValueError("a clip needs at least one frame")
        modality = Modality(self.modality)
        if (modality is Modality.IMAGE) != (frames.shape[0] == 1):
            raise ValueError(
                f"{modality.value} clip cannot have {frames.shape[0]} frames"
            )
        if not np.all(np.isfinite(frames)) or frames.min() < 0.0 or frames.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "modality", modality)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def __eq__(self, other):
        if not isinstance(other, Clip):
            return NotImplemented
        return self.modality is other.modality and np.array_equal(
            self.frames, other.frames
        )

    __hash__ = None

    @classmethod
    def from_frames(cls, frames) -> "Clip":
        frames = np.asarray(frames, dtype=np.float64)
        modality = Modality.IMAGE if frames.shape[0] == 1 else Modality.VIDEO
        return cls(frames, modality)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    center: tuple[float, float]
    size: float
    z: float
    class_id: int
    color: tuple[float, float, float]
    velocity: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    background: tuple[float, float, float] = (0.1, 0.1, 0.12)
    # per-frame (dx, dy) in normalized units; missing frames are treated as 0
    camera_offset: tuple[tuple[float, float], ...] = field(default=())

    def __post_init__(self):
        if len(self.objects) > 4:
            raise SceneError("a scene holds at most 4 objects")
        ids = [o.class_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise SceneError("class ids must be unique within a scene")
        zs = [o.z for o in self.objects]
        if len(set(zs)) != len(zs) or any(z <= 0 for z in zs):
            raise SceneError("depth planes must be positive and distinct")
        for o in self.objects:
            if o.shape not in SHAPES:
                raise SceneError(f"unknown shape {o.shape!r}")

    def offset(self, t: int) -> tuple[float, float]:
        if t < len(self.camera_offset):
            return self.camera_offset[t]
        return (0.0, 0.0)


class Task(str, enum.Enum):
    SCRIBBLE_MAP = "scribble_map"
    VANGOGH_STYLE = "vangogh_style"
    CAMERA_MOVE = "camera_move"
    DEPTH_MAP = "depth_map"
    SEMANTIC_SEG = "semantic_seg"
    SALIENT_TRACK = "salient_track"


class Direction(str, enum.Enum):
    UNDERSTANDING = "understanding"
    GENERATION = "generation"


@dataclass(frozen=True)
class TaskKind:
    task: Task
    direction: Direction = Direction.UNDERSTANDING

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.task is Task.CAMERA_MOVE and self.direction is not Direction.GENERATION:
            raise ValueError("camera_move only exists in the generation direction")

    @classmethod
    def of(cls, task, direction=None) -> "TaskKind":
        task = Task(task)
        if direction is None:
            direction = (
                Direction.GENERATION if task is Task.CAMERA_MOVE else Direction.UNDERSTANDING
            )
        return cls(task, Direction(direction))

    @property
    def name(self) -> str:
        return f"{self.task.value}:{self.direction.value}"


@dataclass(frozen=True, eq=False)
class TaskSample:
    a: Clip
    a_prime: Clip
    b: Clip
    b_prime: Clip
    kind: TaskKind
    seed: int

    @property
    def clips(self) -> tuple[Clip, Clip, Clip, Clip]:
        return (self.a, self.a_prime, self.b, self.b_prime)

    @property
    def plan(self) -> tuple[Modality, ...]:
        return tuple(c.modality for c in self.clips)

    def __eq__(self, other):
        if not isinstance(other, TaskSample):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.seed == other.seed
            and all(x == y for x, y in zip(self.clips, other.clips))
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# rasterization


def _pixel_grid(resolution):
    h, w = resolution
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    return np.meshgrid(xs, ys)  # (H, W) each


def _shape_mask(obj: SceneObject, cx: float, cy: float, xx, yy) -> np.ndarray:
    r = obj.size / 2.0
    dx, dy = xx - cx, yy - cy
    if obj.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if obj.shape == "rectangle":
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.7 * r)
    # upward isosceles triangle inscribed in the [-r, r] box
    inside_y = (dy >= -r) & (dy <= r)
    half_width = r * (dy + r) / (2 * r)
    return inside_y & (np.abs(dx) <= half_width)


def _extent(obj: SceneObject) -> tuple[float, float]:
    r = obj.size / 2.0
    if obj.shape == "rectangle":
        return r, 0.7 * r
    return r, r


def _positions(scene: Scene, frames: int) -> list[list[tuple[float, float]]]:
    out = []
    for t in range(frames):
        ox, oy = scene.offset(t)
        out.append(
            [
                (o.center[0] + t * o.velocity[0] + ox, o.center[1] + t * o.velocity[1] + oy)
                for o in scene.objects
            ]
        )
    return out


def _check_inside(scene: Scene, frames: int) -> None:
    for t, pos in enumerate(_positions(scene, frames)):
        for i, (obj, (cx, cy)) in enumerate(zip(scene.objects, pos)):
            ex, ey = _extent(obj)
            if cx - ex < 0 or cx + ex > 1 or cy - ey < 0 or cy + ey > 1:
                raise SceneError(
                    f"object {i} ({obj.shape}, class {obj.class_id}) leaves the frame at t={t}"
                )


def object_id_map(scene: Scene, frames: int, resolution=DEFAULT_RESOLUTION) -> np.ndarray:
    """Visible object index per pixel, shape (F, H, W); -1 marks background."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    if resolution[0] < 16 or resolution[1] < 16:
        raise ValueError("resolution must be at least 16x16")
    _check_inside(scene, frames)
    xx, yy = _pixel_grid(resolution)
    ids = np.full((frames, *resolution), -1, dtype=np.int64)
    # far to near so nearer planes overwrite
    order = sorted(range(len(scene.objects)), key=lambda i: -scene.objects[i].z)
    for t, pos in enumerate(_positions(scene, frames)):
        for i in order:
            mask = _shape_mask(scene.objects[i], *pos[i], xx, yy)
            ids[t][mask] = i
    return ids


def render_scene(scene: Scene, frames: int = 1, resolution=DEFAULT_RESOLUTION) -> Clip:
    ids = object_id_map(scene, frames, resolution)
    colors = np.vstack([np.array([o.color for o in scene.objects]).reshape(-1, 3),
                        np.asarray(scene.background, dtype=np.float64)[None]])
    # index -1 picks the background row appended last
    return Clip.from_frames(colors[ids])


def random_scene(rng: np.random.Generator, frames: int = DEFAULT_VIDEO_FRAMES,
                 max_objects: int = 4) -> Scene:
    """Draw 1-4 objects whose trajectories stay inside the frame for ``frames`` steps."""
    n = int(rng.integers(1, max_objects + 1))
    class_ids = rng.choice(len(OBJECT_COLORS), size=n, replace=False) + 1
    zs = rng.choice(np.arange(1, 9), size=n, replace=False).astype(float)
    objects = []
    for cid, z in zip(class_ids, zs):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        size = float(rng.uniform(0.25, 0.5))
        probe = SceneObject(shape, (0.5, 0.5), size, z, int(cid), (0, 0, 0))
        ex, ey = _extent(probe)
        span = max(frames - 1, 1)
        speed = 0.04 if frames > 1 else 0.0
        vx, vy = (float(v) for v in rng.uniform(-speed, speed, size=2))
        # centre range that keeps the whole trajectory inside [0, 1]
        lo_x, hi_x = ex - min(0, vx * span), 1 - ex - max(0, vx * span)
        lo_y, hi_y = ey - min(0, vy * span), 1 - ey - max(0, vy * span)
        if lo_x > hi_x or lo_y > hi_y:
            vx = vy = 0.0
            lo_x, hi_x, lo_y, hi_y = ex, 1 - ex, ey, 1 - ey
        cx = float(rng.uniform(lo_x, hi_x))
        cy = float(rng.uniform(lo_y, hi_y))
        objects.append(
            SceneObject(shape, (cx, cy), size, z, int(cid),
                        tuple(OBJECT_COLORS[cid - 1]), (vx, vy))
        )
    bg = BACKGROUND_COLORS[int(rng.integers(len(BACKGROUND_COLORS)))]
    return Scene(tuple(objects), tuple(bg))


# ---------------------------------------------------------------------------
# annotators and edits


def _as_rgb(gray: np.ndarray) -> np.ndarray:
    return np.repeat(gray[..., None], 3, axis=-1)


def _scribble(ids: np.ndarray, scene: Scene) -> np.ndarray:
    # a pixel is on the boundary when a 4-neighbour shows something farther away
    z = np.array([o.z for o in scene.objects] + [np.inf])
    depth = z[ids]  # background (-1) maps to inf
    edge = np.zeros(ids.shape, dtype=bool)
    for axis, shift in ((1, 1), (1, -1), (2, 1), (2, -1)):
        neighbour = np.roll(depth, shift, axis=axis)
        valid = np.ones_like(edge)
        index = [slice(None)] * 3
        index[axis] = 0 if shift == 1 else -1
        valid[tuple(index)] = False
        edge |= valid & (ids >= 0) & (neighbour > depth)
    return edge.astype(np.float64)


def _depth(ids: np.ndarray, scene: Scene) -> np.ndarray:
    if not scene.objects:
        return np.zeros(ids.shape)
    z = np.array([o.z for o in scene.objects])
    inv = np.append(z.min() / z, 0.0)
    return inv[ids]


def _salient(ids: np.ndarray) -> np.ndarray:
    out = np.zeros(ids.shape)
    for t in range(ids.shape[0]):
        labels, counts = np.unique(ids[t][ids[t] >= 0], return_counts=True)
        if labels.size:
            out[t] = ids[t] == labels[np.argmax(counts)]
    return out


def annotate(src: Clip, scene: Scene, kind) -> Clip:
    """Ground-truth annotation (or style edit) of ``src``, which must be a render of ``scene``."""
    task = kind.task if isinstance(kind, TaskKind) else Task(kind)
    if task is Task.CAMERA_MOVE:
        raise ValueError("camera_move is an edit; use apply_camera_move")
    if task is Task.VANGOGH_STYLE:
        return Clip(np.clip(src.frames @ STYLE_MATRIX.T, 0.0, 1.0), src.modality)
    ids = object_id_map(scene, src.num_frames, src.resolution)
    if task is Task.SCRIBBLE_MAP:
        out = _as_rgb(_scribble(ids, scene))
    elif task is Task.DEPTH_MAP:
        out = _as_rgb(_depth(ids, scene))
    elif task is Task.SEMANTIC_SEG:
        lut = np.vstack([SEG_PALETTE[[o.class_id for o in scene.objects]].reshape(-1, 3),
                         SEG_PALETTE[0]])
        out = lut[ids]
    else:
        out = _as_rgb(_salient(ids))
    return Clip(out, src.modality)


def apply_camera_move(src: Clip, pan, background=None) -> Clip:
    """Translate frame ``t`` by ``t * pan`` whole pixels, filling uncovered pixels.

    ``pan`` is ``(dx, dy)`` in pixels per frame. ``background`` defaults to the
    colour of the first frame's top-left pixel.
    """
    if src.modality is not Modality.VIDEO:
        raise ValueError("camera moves need a video clip")
    dx, dy = (int(round(v)) for v in pan)
    f, h, w, _ = src.frames.shape
    if abs(dx) * (f - 1) >= w or abs(dy) * (f - 1) >= h:
        raise ValueError(f"pan {pan} moves the frame out of view within {f} frames")
    fill = np.asarray(src.frames[0, 0, 0] if background is None else background, dtype=np.float64)
    out = np.empty_like(src.frames)
    for t in range(f):
        sx, sy = t * dx, t * dy
        frame = np.broadcast_to(fill, (h, w, 3)).copy()
        dst_y = slice(max(sy, 0), h + min(sy, 0))
        dst_x = slice(max(sx, 0), w + min(sx, 0))
        src_y = slice(max(-sy, 0), h + min(-sy, 0))
        src_x = slice(max(-sx, 0), w + min(-sx, 0))
        frame[dst_y, dst_x] = src.frames[t, src_y, src_x]
        out[t] = frame
    return Clip(out, Modality.VIDEO)


# ---------------------------------------------------------------------------
# task samples


def _plan(plan) -> tuple[Modality, ...]:
    out = []
    for m in plan:
        if isinstance(m, Modality):
            out.append(m)
        elif m in ("I", "V"):
            out.append(Modality.IMAGE if m == "I" else Modality.VIDEO)
        else:
            out.append(Modality(m))
    return tuple(out)


def _frames_for(m: Modality, video_frames: int) -> int:
    return 1 if m is Modality.IMAGE else video_frames


def draw_pan(rng: np.random.Generator) -> tuple[int, int]:
    choices = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)]
    return choices[int(rng.integers(len(choices)))]


def make_pair(kind: TaskKind, rng: np.random.Generator, modalities,
              resolution=DEFAULT_RESOLUTION, video_frames: int = DEFAULT_VIDEO_FRAMES,
              pan=None) -> tuple[Clip, Clip]:
    """One (input, output) pair in the sentence order implied by ``kind.direction``."""
    m_in, m_out = _plan(modalities)
    if kind.task is Task.CAMERA_MOVE:
        if m_out is not Modality.VIDEO:
            raise UnsupportedContextError("camera_move needs a video output clip")
        scene = random_scene(rng, video_frames)
        source = render_scene(scene, video_frames, resolution)
        moved = apply_camera_move(source, pan if pan is not None else draw_pan(rng),
                                  background=scene.background)
        if m_in is Modality.IMAGE:
            return Clip(source.frames[:1], Modality.IMAGE), moved
        return source, moved

    if m_in is not m_out:
        raise UnsupportedContextError(
            f"{kind.task.value} keeps modality; cannot map {m_in.value} to {m_out.value}"
        )
    frames = _frames_for(m_in, video_frames)
    scene = random_scene(rng, frames)
    natural = render_scene(scene, frames, resolution)
    annotation = annotate(natural, scene, kind)
    if kind.direction is Direction.GENERATION:
        return annotation, natural
    return natural, annotation


CAMERA_PLANS = {("V", "V", "V", "V"), ("I", "V", "I", "V")}


def make_task_sample(kind, seed: int, modality_plan=("I", "I", "I", "I"),
                     resolution=DEFAULT_RESOLUTION,
                     video_frames: int = DEFAULT_VIDEO_FRAMES) -> TaskSample:
    """Build ``[A, A', B, B']`` with both pairs produced by the same annotator or edit.

    In the generation direction every pair is swapped, so ``a`` holds the
    annotation and ``a_prime`` the natural clip.
    """
    if not isinstance(kind, TaskKind):
        kind = TaskKind.of(kind)
    plan = _plan(modality_plan)
    if len(plan) != 4:
        raise ValueError("a modality plan lists exactly four clips")
    short = tuple(m.short for m in plan)
    if kind.task is Task.CAMERA_MOVE:
        if short not in CAMERA_PLANS:
            raise UnsupportedContextError(
                f"camera_move needs temporal clips (contexts I or IV), got plan {''.join(short)}"
            )
    elif short[0] != short[1] or short[2] != short[3]:
        raise UnsupportedContextError(
            f"{kind.task.value} cannot use plan {''.join(short)}: pairs must share a modality"
        )
    rng = np.random.default_rng([int(seed), 0x5EED])
    pan = draw_pan(rng) if kind.task is Task.CAMERA_MOVE else None
    # independent streams for the example and the query scene
    ex_rng, q_rng = (np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(2))
    a, a_prime = make_pair(kind, ex_rng, plan[:2], resolution, video_frames, pan)
    b, b_prime = make_pair(kind, q_rng, plan[2:], resolution, video_frames, pan)
    return TaskSample(a, a_prime, b, b_prime, kind, int(seed))


def query_scene(kind, seed: int, modality_plan, video_frames: int = DEFAULT_VIDEO_FRAMES) -> Scene:
    """Scene behind ``b`` of ``make_task_sample(kind, seed, plan)`` (for ground-truth checks)."""
    if not isinstance(kind, TaskKind):
        kind = TaskKind.of(kind)
    plan = _plan(modality_plan)
    rng = np.random.default_rng([int(seed), 0x5EED])
    if kind.task is Task.CAMERA_MOVE:
        draw_pan(rng)
    _, q_rng = (np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(2))
    frames = video_frames if (kind.task is Task.CAMERA_MOVE or plan[2] is Modality.VIDEO) else 1
    return random_scene(q_rng, frames)


def modality_counts(clips: Sequence[Clip]) -> str:
    return "".join(c.modality.short for c in clips)
