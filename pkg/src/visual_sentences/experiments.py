"""Run orchestration: configs, training runs, evaluation, manifests, recipes."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .checkpoint import file_sha256, load_checkpoint, save_checkpoint, save_lora
from .dit import ModelConfig, SentenceDiT
from .io import write_clip, write_gallery, write_json, write_sample, sentence_manifest
from .lora import LoRAConfig, inject
from .sampling import SampleConfig, sample
from .sentence import ContextType, build_sentence, modality_pattern, reverse
from .training import (
    NumericalError,
    TrainConfig,
    applicable_contexts,
    make_optimizer,
    run_training,
)
from .worlds import (
    SEG_PALETTE,
    Direction,
    Task,
    TaskKind,
    UnsupportedContextError,
    make_task_sample,
)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

HELDOUT_OFFSET = 50_000
BINARY_PALETTE = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
SEED_STRIDE = 100_003

__all__ = [
    "ConfigError",
    "DataError",
    "RunConfig",
    "RunManifest",
    "load_run_config",
    "config_hash",
    "gen_data",
    "train",
    "evaluate",
    "evaluate_model",
    "sample_to_dir",
    "heldout_seed",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_DATA",
    "EXIT_NUMERIC",
]


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)
_TOP_KEYS = _TRAIN_KEYS | {"model", "lora", "base_checkpoint", "pretrain", "out", "resume"}


@dataclass
class RunConfig:
    train: TrainConfig
    model: ModelConfig
    lora: LoRAConfig
    base_checkpoint: str | None = None
    pretrain: dict | None = None
    out: str = "runs/default"
    resume: str | None = None

    def to_dict(self) -> dict:
        return {
            **self.train.to_dict(),
            "model": self.model.to_dict(),
            "lora": {"rank": self.lora.rank, "alpha": self.lora.alpha,
                     "targets": list(self.lora.targets), "seed": self.lora.seed},
            "base_checkpoint": self.base_checkpoint,
            "pretrain": self.pretrain,
            "out": self.out,
        }


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def load_run_config(source, overrides: dict | None = None, env=None) -> RunConfig:
    """Parse a JSON config (path or dict) into a ``RunConfig``.

    ``VS_SEED`` and ``VS_OUTPUT_ROOT`` in ``env`` override the seed and the
    output root; nothing else is read from the environment.
    """
    env = os.environ if env is None else env
    if isinstance(source, (str, Path)):
        try:
            raw = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
    else:
        raw = dict(source or {})
    raw.update(overrides or {})
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "lr" not in raw:
        logger.info("config has no lr; using default 1e-4")
    if "VS_SEED" in env:
        raw["seed"] = int(env["VS_SEED"])
    train_kw = {k: v for k, v in raw.items() if k in _TRAIN_KEYS}
    model_kw = dict(raw.get("model") or {})
    lora_kw = dict(raw.get("lora") or {})
    model_kw.setdefault("seed", train_kw.get("seed", 0))
    lora_kw.setdefault("seed", train_kw.get("seed", 0))
    try:
        train_cfg = TrainConfig(**train_kw)
        model_cfg = ModelConfig(**model_kw)
        lora_cfg = LoRAConfig(**lora_kw)
        for kind in train_cfg.kinds:
            if train_cfg.regime == "per-task-per-context" and \
                    ContextType(train_cfg.context) not in applicable_contexts(kind):
                raise UnsupportedContextError(
                    f"{kind.task.value} does not support context {train_cfg.context}")
    except UnsupportedContextError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = raw.get("out", "runs/default")
    if "VS_OUTPUT_ROOT" in env and not Path(out).is_absolute():
        out = str(Path(env["VS_OUTPUT_ROOT"]) / out)
    return RunConfig(train_cfg, model_cfg, lora_cfg, raw.get("base_checkpoint"),
                     raw.get("pretrain"), out, raw.get("resume"))


# ---------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    seeds: dict
    regime: str
    coverage: list
    checkpoints: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add_artifact(self, bucket: str, name: str, path) -> None:
        getattr(self, bucket)[name] = {"path": str(path), "sha256": file_sha256(path)}

    def verify(self, root=None) -> None:
        for bucket in (self.checkpoints, self.reports):
            for name, item in bucket.items():
                path = Path(item["path"])
                if root is not None and not path.is_absolute():
                    path = Path(root) / path
                if not path.exists():
                    raise DataError(f"manifest artifact {name} missing: {path}")
                if file_sha256(path) != item["sha256"]:
                    raise DataError(f"manifest artifact {name} changed: {path}")

    def to_dict(self) -> dict:
        return dict(run_id=self.run_id, config_hash=self.config_hash, seeds=self.seeds,
                    regime=self.regime, coverage=self.coverage, checkpoints=self.checkpoints,
                    reports=self.reports, timings=self.timings, config=self.config)

    def close(self, path) -> None:
        self.verify()
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# data


def heldout_seed(split_seed: int, i: int) -> int:
    return split_seed * SEED_STRIDE + HELDOUT_OFFSET + i


def gen_data(task, context, count: int, seed: int, out, direction=None) -> Path:
    """Write ``count`` task samples (seeds ``seed*100003 + i``) under ``out``."""
    kind = TaskKind.of(task, direction)
    plan = modality_pattern(context, 4)
    out = Path(out)
    entries = []
    for i in range(count):
        sample_seed = seed * SEED_STRIDE + i
        s = make_task_sample(kind, sample_seed, plan)
        name = f"sample_{i:04d}"
        write_sample(s, out / name, ContextType(context).value)
        entries.append({"dir": name, "seed": sample_seed})
    write_json(out / "manifest.json", {
        "kind": kind.task.value, "direction": kind.direction.value,
        "context": ContextType(context).value, "seed": seed, "count": count,
        "plan": [m.value for m in plan], "samples": entries,
    })
    return out


# ---------------------------------------------------------------------------
# training


def _loss_csv(path, losses) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "epoch", "task", "context", "loss"])
    for r in losses:
        w.writerow([r["iteration"], r["epoch"], r["task"], r["context"], repr(r["loss"])])
    from .checkpoint import atomic_write_bytes
    atomic_write_bytes(path, buf.getvalue().encode())


def _pool_from_dir(data_dir, shots: int):
    from .io import read_sample
    from .sentence import compose
    from .training import SentencePool

    root = Path(data_dir)
    try:
        m = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"no dataset manifest in {root}: {exc}") from exc
    sentences = [compose([read_sample(root / e["dir"])], m["context"], 4) for e in m["samples"]]
    return SentencePool(sentences)


def build_base(cfg: RunConfig, out: Path, timings: dict) -> SentenceDiT:
    if cfg.base_checkpoint:
        model, _ = load_checkpoint(cfg.base_checkpoint)
        return model
    if cfg.pretrain:
        from .estimator import pretrain_base

        cache = out / "base.vsck"
        if cache.exists():
            model, _ = load_checkpoint(cache)
            return model
        t0 = time.perf_counter()
        model = pretrain_base(cfg.model, int(cfg.pretrain.get("iterations", 12_000)),
                              float(cfg.pretrain.get("lr", 3e-4)), cfg.model.seed,
                              cfg.train.video_frames)
        timings["pretrain_s"] = time.perf_counter() - t0
        save_checkpoint(cache, model)
        return model
    return SentenceDiT(cfg.model)


def train(cfg: RunConfig, data_dir=None) -> RunManifest:
    """Run one training job and write checkpoints, adapters, loss curve and manifest."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    d = cfg.to_dict()
    # where a run is written does not change what it computes
    h = config_hash({k: v for k, v in d.items() if k != "out"})
    manifest = RunManifest(
        run_id=h[:12], config_hash=h,
        seeds={"train": cfg.train.seed, "data": cfg.train.data_seed, "model": cfg.model.seed,
               "lora": cfg.lora.seed},
        regime=cfg.train.regime,
        coverage=[{"task": k.name,
                   "contexts": [c.value for c in applicable_contexts(k)]
                   if cfg.train.regime != "per-task-per-context" else [cfg.train.context]}
                  for k in cfg.train.kinds],
        config=d,
    )
    pool = _pool_from_dir(data_dir, cfg.train.shots) if data_dir else None
    t0 = time.perf_counter()
    optimizer = None
    start_epoch = 0
    prior_losses: list = []
    if cfg.resume:
        model, optimizer, meta = load_checkpoint(cfg.resume, with_optimizer=True)
        start_epoch = int(meta["counters"]["epoch"])
        prior_losses = list(meta["extra"].get("losses", []))
    elif cfg.train.regime == "pretrain-natural":
        model = SentenceDiT(cfg.model)
    else:
        base = build_base(cfg, out, timings)
        model, _ = inject(base, cfg.lora)
    optimizer = optimizer or make_optimizer(model, cfg.train)

    def on_epoch_end(result):
        path = out / f"epoch_{result.epoch:03d}.vsck"
        save_checkpoint(path, result.model, result.optimizer,
                        counters={"epoch": result.epoch, "iteration": result.iteration},
                        extra={"losses": prior_losses + result.losses, "config_hash": h})
        manifest.add_artifact("checkpoints", f"epoch_{result.epoch:03d}", path)

    try:
        result = run_training(model, cfg.train, optimizer, start_epoch, on_epoch_end, pool)
    except NumericalError as exc:
        write_json(out / "failure.json", exc.record)
        raise
    timings["train_s"] = time.perf_counter() - t0
    losses = prior_losses + result.losses
    _loss_csv(out / "losses.csv", losses)
    manifest.add_artifact("reports", "losses", out / "losses.csv")
    final = out / "final.vsck"
    save_checkpoint(final, result.model, result.optimizer,
                    counters={"epoch": result.epoch, "iteration": result.iteration},
                    extra={"losses": losses, "config_hash": h})
    manifest.add_artifact("checkpoints", "final", final)
    if cfg.train.regime != "pretrain-natural":
        save_lora(out / "adapter.vsck", result.model)
        manifest.add_artifact("checkpoints", "adapter", out / "adapter.vsck")
    manifest.timings = timings
    manifest.close(out / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# evaluation


def task_metrics(kind: TaskKind, pred, truth, source=None) -> dict[str, float]:
    """Metric bundle for one generated clip."""
    values = {"rmse": M.rmse(pred, truth)}
    if kind.direction is Direction.GENERATION:
        if kind.task is Task.VANGOGH_STYLE:
            values["style_tv"] = M.style_proxy(pred, truth)
        return values
    task = kind.task
    if task is Task.SCRIBBLE_MAP:
        gt = (truth.frames.mean(axis=-1) > 0.5).astype(float)
        values["ods"], values["ois"], values["ap"] = M.edge_metrics(
            list(pred.frames.mean(axis=-1)), list(gt))
    elif task is Task.DEPTH_MAP:
        values.update(M.depth_metrics(pred.frames.mean(axis=-1), truth.frames.mean(axis=-1)))
    elif task is Task.SEMANTIC_SEG:
        values["miou"], values["pacc"] = M.segmentation_metrics(pred.frames, truth.frames,
                                                                SEG_PALETTE)
    elif task is Task.SALIENT_TRACK:
        values["miou"], values["pacc"] = M.segmentation_metrics(pred.frames, truth.frames,
                                                                BINARY_PALETTE)
    return values


def _mean_values(rows: list[dict]) -> dict[str, float]:
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def evaluate_model(model, task, context, shots=(4,), split_seed: int = 0, count: int = 10,
                   reversed_: bool = False, steps: int = 50, gallery_dir=None,
                   direction=None, timings: dict | None = None) -> list[M.MetricReport]:
    """Sample ``count`` held-out sentences per shot setting and score them.

    With ``reversed_`` every understanding sentence is flipped so the model
    must synthesise the natural clip from its annotation.
    """
    kind = TaskKind.of(task, direction)
    rows = {n: [] for n in shots}
    seconds = {n: [] for n in shots}
    if timings is not None:
        # untimed run so one-off allocation costs don't land on the first shot setting
        s = build_sentence(kind, heldout_seed(split_seed, 0), context, shots[0])
        sample(s, model, SampleConfig(steps=steps), kind=s.kind)
    # shot settings interleave per sentence, so drifting machine speed hits them alike
    for i in range(count):
        seed = heldout_seed(split_seed, i)
        for n_shots in shots:
            s = build_sentence(kind, seed, context, n_shots)
            if reversed_:
                s = reverse(s)
            t0 = time.perf_counter()
            res = sample(s, model, SampleConfig(steps=steps, seed=seed), kind=s.kind)
            seconds[n_shots].append(time.perf_counter() - t0)
            if res.clip.num_frames != s.target.num_frames:
                raise DataError("generated clip frame count differs from the target row")
            rows[n_shots].append(task_metrics(s.kind, res.clip, s.target))
            if gallery_dir is not None:
                write_gallery(Path(gallery_dir) / f"shots{n_shots}_{i:03d}.png",
                              [*s.context, res.clip, s.target])
    reports = []
    for n_shots in shots:
        reports.append(M.MetricReport(
            task=s.kind.name, context=ContextType(context).value, shots=n_shots,
            values=_mean_values(rows[n_shots]),
            meta={"count": count, "split_seed": split_seed, "reversed": reversed_,
                  "steps": steps, "per_sentence_rmse": [r["rmse"] for r in rows[n_shots]]},
        ))
        if timings is not None:
            # interleaving pairs the settings in time, so plain means compare fairly
            timings[f"shots{n_shots}"] = float(np.mean(seconds[n_shots]))
    return reports


def evaluate(checkpoint, task, context, shots=(4,), split_seed: int = 0, count: int = 10,
             reversed_: bool = False, steps: int = 50, out=None, direction=None):
    model, _ = load_checkpoint(checkpoint)
    timings: dict = {}
    gallery = None if out is None else Path(out) / "gallery"
    reports = evaluate_model(model, task, context, shots, split_seed, count, reversed_, steps,
                             gallery, direction, timings)
    if out is not None:
        out = Path(out)
        write_json(out / "report.json", [r.to_dict() for r in reports])
        (out / "report.txt").write_text(M.format_table(reports) + "\n")
        write_json(out / "timings.json", timings)
    return reports, timings


def sample_to_dir(checkpoint, task, context, seed: int, out, shots: int = 4, steps: int = 50,
                  direction=None, trace_strip: bool = False) -> dict:
    """Generate the target of one seeded sentence and write frames plus a manifest."""
    model, _ = load_checkpoint(checkpoint)
    kind = TaskKind.of(task, direction)
    s = build_sentence(kind, seed, context, shots)
    res = sample(s, model, SampleConfig(steps=steps, seed=seed, trace=trace_strip), kind=kind)
    out = Path(out)
    refs = []
    for i, clip in enumerate(s.context):
        refs.append(write_clip(clip, out, f"clip{i}"))
    refs.append(write_clip(res.clip, out, "generated"))
    manifest = sentence_manifest(s.with_target(res.clip), refs)
    manifest["seed"] = seed
    write_json(out / "manifest.json", manifest)
    if trace_strip:
        from .codec import detokenize

        grid = res.grid
        frames = []
        for z in res.trace[:: max(1, len(res.trace) // 10)]:
            tokens = grid.tokens.copy()
            tokens[grid.target_mask] = z
            frames.append(detokenize(grid.with_tokens(tokens), target_only=True))
        write_gallery(out / "trace.png", frames)
    return manifest
