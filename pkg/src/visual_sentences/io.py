"""Lossless frame files, JSON manifests and PNG galleries."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .checkpoint import atomic_write_bytes
from .sentence import VisualSentence
from .worlds import Clip, Modality, TaskKind, TaskSample

__all__ = [
    "to_uint8",
    "write_clip",
    "read_clip",
    "write_sample",
    "read_sample",
    "write_json",
    "sentence_manifest",
    "write_gallery",
    "gallery_image",
]

CLIP_NAMES = ("a", "a_prime", "b", "b_prime")


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_clip(clip: Clip, directory, stem: str) -> list[str]:
    """One 8-bit RGB PNG per frame; returns the file names written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for t, frame in enumerate(to_uint8(clip.frames)):
        name = f"{stem}_{t:03d}.png"
        # fixed encoder settings keep bytes identical across runs
        Image.fromarray(frame, mode="RGB").save(directory / name, format="PNG", optimize=False,
                                                compress_level=6)
        names.append(name)
    return names


def read_clip(directory, names: Sequence[str], modality) -> Clip:
    frames = [np.asarray(Image.open(Path(directory) / n).convert("RGB"), dtype=np.float64) / 255.0
              for n in names]
    return Clip(np.stack(frames), Modality(modality))


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def write_sample(sample: TaskSample, directory, context: str | None = None) -> dict:
    """Write the four clips of ``sample`` plus ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    files = {}
    for name, clip in zip(CLIP_NAMES, sample.clips):
        files[name] = write_clip(clip, directory, name)
    manifest = {
        "kind": sample.kind.task.value,
        "direction": sample.kind.direction.value,
        "seed": sample.seed,
        "context": context,
        "plan": [c.modality.value for c in sample.clips],
        "clips": files,
    }
    write_json(directory / "manifest.json", manifest)
    return manifest


def read_sample(directory) -> TaskSample:
    directory = Path(directory)
    m = json.loads((directory / "manifest.json").read_text())
    clips = [read_clip(directory, m["clips"][n], mod) for n, mod in zip(CLIP_NAMES, m["plan"])]
    return TaskSample(*clips, kind=TaskKind(m["kind"], m["direction"]), seed=int(m["seed"]))


def sentence_manifest(sentence: VisualSentence, clip_refs: Sequence) -> dict:
    return {
        "clips": [
            {"ref": ref, "role": role.value, "modality": clip.modality.value,
             "frames": clip.num_frames}
            for ref, role, clip in zip(clip_refs, sentence.roles, sentence.clips)
        ],
        "context_type": sentence.context_type.value,
        "shots": sentence.shots,
        "direction": sentence.direction.value,
        "kind": None if sentence.kind is None else sentence.kind.name,
    }


def gallery_image(clips: Sequence[Clip], pad: int = 2) -> np.ndarray:
    """Clips side by side, each clip's frames stacked top to bottom."""
    h, w = clips[0].resolution
    rows = max(c.num_frames for c in clips)
    canvas = np.full((rows * (h + pad) + pad, len(clips) * (w + pad) + pad, 3), 128, np.uint8)
    for j, clip in enumerate(clips):
        for t, frame in enumerate(to_uint8(clip.frames)):
            y, x = pad + t * (h + pad), pad + j * (w + pad)
            canvas[y:y + h, x:x + w] = frame
    return canvas


def write_gallery(path, clips: Sequence[Clip]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(gallery_image(clips), mode="RGB").save(path, format="PNG", optimize=False)
