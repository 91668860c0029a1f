"""Versioned single-file tensor container for models, adapters and optimizer state.

Layout (all integers little-endian)::

    magic      4 bytes   b"VSCK"
    version    u32
    meta_len   u64, then meta_len bytes of UTF-8 JSON
    count      u32
    count x tensor record:
        name_len u32, name bytes (UTF-8)
        dtype    u8   (see DTYPE_CODES)
        rank     u8
        dims     rank x u64
        data     prod(dims) * itemsize bytes, C order, little-endian

Writes go to a temporary file in the target directory and are renamed into
place, so a reader never sees a half-written checkpoint.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "DTYPE_CODES",
    "CheckpointError",
    "write_container",
    "read_container",
    "save_checkpoint",
    "load_checkpoint",
    "save_lora",
    "load_lora",
    "file_sha256",
    "atomic_write_bytes",
]

MAGIC = b"VSCK"
FORMAT_VERSION = 1

DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("<i4"),
    4: np.dtype("u1"),
    5: np.dtype("<u8"),
}
_CODE_OF = {np.dtype(v).newbyteorder("="): k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    a = np.ascontiguousarray(x)
    if a.dtype == np.bool_:
        a = a.astype(np.uint8)
    return a


def write_container(path, meta: dict, tensors: dict) -> None:
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        a = _as_array(tensors[name])
        code = _CODE_OF.get(a.dtype.newbyteorder("="))
        if code is None:
            raise CheckpointError(f"unsupported dtype {a.dtype} for {name}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.astype(DTYPE_CODES[code], copy=False).tobytes(order="C"))
    atomic_write_bytes(path, buf.getvalue())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    try:
        return _parse(data, path)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path} is truncated or corrupt: {exc}") from exc


def _parse(data: bytes, path) -> tuple[dict, dict[str, np.ndarray]]:
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<Q", data, 8)
    off = 16
    meta = json.loads(data[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        code, rank = struct.unpack_from("<BB", data, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        dtype = DTYPE_CODES[code]
        n = int(np.prod(dims)) * dtype.itemsize
        tensors[name] = np.frombuffer(data, dtype=dtype, count=n // dtype.itemsize,
                                      offset=off).reshape(dims).copy()
        off += n
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes in {path}")
    return meta, tensors


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# model checkpoints


def _optimizer_tensors(model, optimizer) -> tuple[dict, dict]:
    names = {id(p): n for n, p in model.named_parameters()}
    tensors, steps = {}, {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            tensors[f"optim.{name}.exp_avg"] = st["exp_avg"]
            tensors[f"optim.{name}.exp_avg_sq"] = st["exp_avg_sq"]
            steps[name] = float(st["step"])
    return tensors, steps


def save_checkpoint(path, model, optimizer=None, counters: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write base weights, adapters (if any), optimizer moments and counters."""
    from .lora import LoRALinear

    tensors = {}
    lora = {}
    for name, module in model.named_modules():
        if isinstance(module, LoRALinear):
            lora[f"{name}.down"] = module.down
            lora[f"{name}.up"] = module.up
    for name, value in model.state_dict().items():
        if name.endswith(".down") or name.endswith(".up"):
            continue
        tensors[f"base.{name.replace('.base.', '.')}"] = value
    for name, value in lora.items():
        tensors[f"lora.{name}"] = value
    meta = {
        "model_config": model.config.to_dict(),
        "lora_config": None,
        "counters": counters or {},
        "optimizer": None,
        "extra": extra or {},
    }
    cfg = getattr(model, "lora_config", None)
    if cfg is not None:
        meta["lora_config"] = {"rank": cfg.rank, "alpha": cfg.alpha,
                               "targets": list(cfg.targets), "seed": cfg.seed}
    if optimizer is not None:
        opt_tensors, steps = _optimizer_tensors(model, optimizer)
        tensors.update(opt_tensors)
        group = optimizer.param_groups[0]
        meta["optimizer"] = {"lr": group["lr"], "betas": list(group["betas"]),
                             "eps": group["eps"], "steps": steps}
    write_container(path, meta, tensors)


def load_checkpoint(path, with_optimizer: bool = False):
    """Rebuild the model (adapted if the checkpoint holds adapters).

    Returns ``(model, meta)`` or ``(model, optimizer, meta)``.
    """
    from .dit import ModelConfig, SentenceDiT
    from .lora import LoRAConfig, inject, load_lora_state

    meta, tensors = read_container(path)
    config = ModelConfig(**meta["model_config"])
    model = SentenceDiT(config)
    base = {k[5:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("base.")}
    model.load_state_dict(base, strict=True)
    if meta.get("lora_config"):
        model, _ = inject(model, LoRAConfig(**meta["lora_config"]), copy_model=False)
        load_lora_state(model, {k[5:]: torch.from_numpy(v)
                                for k, v in tensors.items() if k.startswith("lora.")})
    model.eval()
    if not with_optimizer:
        return model, meta
    optimizer = None
    if meta.get("optimizer"):
        o = meta["optimizer"]
        params = [p for p in model.parameters() if p.requires_grad]
        optimizer = torch.optim.Adam(params, lr=o["lr"], betas=tuple(o["betas"]), eps=o["eps"])
        for name, p in model.named_parameters():
            if name in o["steps"]:
                optimizer.state[p] = {
                    "step": torch.tensor(o["steps"][name]),
                    "exp_avg": torch.from_numpy(tensors[f"optim.{name}.exp_avg"]),
                    "exp_avg_sq": torch.from_numpy(tensors[f"optim.{name}.exp_avg_sq"]),
                }
    return model, optimizer, meta


def save_lora(path, model) -> None:
    """Adapters only, so one base checkpoint can serve many tasks."""
    from .lora import lora_state

    state = lora_state(model)
    meta = {"lora_config": {"rank": state.config.rank, "alpha": state.config.alpha,
                            "targets": list(state.config.targets), "seed": state.config.seed},
            "model_config": model.config.to_dict()}
    write_container(path, meta, state.tensors())


def load_lora(path, base_model):
    """Attach adapters from ``path`` to a copy of ``base_model``."""
    from .lora import LoRAConfig, inject, load_lora_state

    meta, tensors = read_container(path)
    model, _ = inject(base_model, LoRAConfig(**meta["lora_config"]))
    load_lora_state(model, {k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model
