"""Experiment recipes behind ``visual-sentences repro``.

Each recipe trains the adapters it needs on top of one shared base checkpoint,
evaluates them on held-out sentences and writes, under ``out/<recipe>/``:

- ``report.json``: every metric row (deterministic for fixed seeds)
- ``table.txt``: the same rows as an aligned table
- ``timings.json``: wall-clock numbers, kept apart because they never repeat exactly
- one run directory per trained adapter, plus galleries
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

from . import experiments as E
from .checkpoint import load_checkpoint, save_checkpoint
from .dit import ModelConfig
from .estimator import pretrain_base
from .io import write_json
from .metrics import MetricReport, format_table
from .worlds import Task

logger = logging.getLogger(__name__)

__all__ = ["Scale", "SCALES", "RECIPES", "run", "base_model"]


@dataclass(frozen=True)
class Scale:
    model: dict
    pretrain_iters: int
    pretrain_lr: float
    lr: float
    iters_per_epoch: int
    epochs: int
    num_samples: int
    eval_count: int
    steps: int
    rank: int = 16


SCALES = {
    # seconds: plumbing check only, numbers are meaningless
    "smoke": Scale(model={"dim": 32, "heads": 2, "layers": 2}, pretrain_iters=40,
                   pretrain_lr=1e-3, lr=1e-3, iters_per_epoch=4, epochs=1, num_samples=4,
                   eval_count=30, steps=8, rank=2),
    # pilot-calibrated: about ten minutes per adapter on one CPU core, lr 3e-3 diverges
    "desk": Scale(model={}, pretrain_iters=12_000, pretrain_lr=3e-4, lr=1e-3,
                  iters_per_epoch=1000, epochs=8, num_samples=20, eval_count=10, steps=50),
}

# context used when a recipe trains one adapter per task
SEPARATE_CONTEXT = {t: ("IV" if t is Task.CAMERA_MOVE else "II") for t in Task}


def base_model(out: Path, scale: Scale, seed: int, base_checkpoint=None) -> Path:
    """Path of the frozen base checkpoint, pre-training (and caching) it if needed."""
    if base_checkpoint:
        return Path(base_checkpoint)
    path = Path(out) / "base.vsck"
    if path.exists():
        return path
    t0 = time.perf_counter()
    model = pretrain_base(ModelConfig(**{**scale.model, "seed": seed}), scale.pretrain_iters,
                          scale.pretrain_lr, seed)
    save_checkpoint(path, model, extra={"pretrain_iters": scale.pretrain_iters})
    write_json(Path(out) / "base_timings.json", {"pretrain_s": time.perf_counter() - t0})
    return path


def _fit(run_dir: Path, base: Path, scale: Scale, seed: int, **train):
    cfg = {"iters_per_epoch": scale.iters_per_epoch, "epochs": scale.epochs,
           "num_samples": scale.num_samples, "lr": scale.lr, "seed": seed, "data_seed": seed,
           "model": scale.model, "lora": {"rank": scale.rank}, "base_checkpoint": str(base),
           "out": str(run_dir), **train}
    final = run_dir / "final.vsck"
    if not final.exists():
        E.train(E.load_run_config(cfg, env={}))
    model, _ = load_checkpoint(final)
    return model


def _eval(model, task, context, scale: Scale, seed: int, gallery=None, timings=None, **kw):
    return E.evaluate_model(model, task, context, split_seed=seed, count=scale.eval_count,
                            steps=scale.steps, gallery_dir=gallery, timings=timings, **kw)


def _tag(reports, **fields):
    for r in reports:
        r.meta.update(fields)
    return reports


def fig4_separate(out, base, scale, seed):
    """One adapter per task, each in its own context; galleries for every task."""
    reports = []
    for task in Task:
        ctx = SEPARATE_CONTEXT[task]
        model = _fit(out / task.value, base, scale, seed, tasks=[task.value], context=ctx)
        reports += _tag(_eval(model, task, ctx, scale, seed, out / task.value / "gallery"),
                        setting="separate")
    return reports, ["rmse", "ods", "ap", "miou", "pacc", "abs_rel", "delta1"], {}


def fig5_reversal(out, base, scale, seed):
    """Depth forward (natural to depth) against the same sentences reversed."""
    fwd = _fit(out / "forward", base, scale, seed, tasks=["depth_map"], context="II")
    rev = _fit(out / "reversed", base, scale, seed, tasks=["depth_map"], context="II",
               direction="generation")
    reports = _tag(_eval(fwd, "depth_map", "II", scale, seed, out / "forward" / "gallery"),
                   setting="forward")
    reports += _tag(_eval(rev, "depth_map", "II", scale, seed, out / "reversed" / "gallery",
                          reversed_=True), setting="reversed")
    ratio = reports[1].values["rmse"] / reports[0].values["rmse"]
    return reports, ["rmse"], {"rmse_ratio_reversed_over_forward": ratio}


def fig6_mixed(out, base, scale, seed):
    """Mixed-context adapter for depth (rows I-III) and camera moves (rows I, IV)."""
    model = _fit(out / "mixed", base, scale, seed, regime="co-train-all",
                 tasks=["depth_map", "camera_move"])
    reports = []
    for task, ctx in (("depth_map", "I"), ("depth_map", "II"), ("depth_map", "III"),
                      ("camera_move", "IV")):
        reports += _tag(_eval(model, task, ctx, scale, seed, out / "mixed" / f"gallery_{ctx}"),
                        setting="mixed")
    return reports, ["rmse", "abs_rel", "delta1"], {}


def tab2_training_strategies(out, base, scale, seed):
    """Separate adapters against one adapter co-trained on all tasks and contexts."""
    co = _fit(out / "co-train", base, scale, seed, regime="co-train-all",
              tasks=[t.value for t in Task],
              epochs=scale.epochs * 2)
    reports = []
    for task in Task:
        ctx = SEPARATE_CONTEXT[task]
        sep = _fit(out / "separate" / task.value, base, scale, seed, tasks=[task.value],
                   context=ctx)
        reports += _tag(_eval(sep, task, ctx, scale, seed), setting="separate")
        reports += _tag(_eval(co, task, ctx, scale, seed), setting="co-train")
    return reports, ["rmse", "ods", "ap", "miou", "pacc", "abs_rel", "delta1", "style_tv"], {}


def tab3_shots(out, base, scale, seed):
    """Fine-tuning shots x test shots for depth and style in context II."""
    reports, timings = [], {}
    for task in ("depth_map", "vangogh_style"):
        for ft in (4, 6, 8):
            model = _fit(out / f"{task}_ft{ft}", base, scale, seed, tasks=[task], context="II",
                         shots=ft)
            t: dict = {}
            reps = _eval(model, task, "II", scale, seed, timings=t, shots=(4, 6, 8))
            _tag(reps, ft_shots=ft)
            for r in reps:
                timings[_timing_key(r)] = t[f"shots{r.shots}"]
            reports += reps
    return reports, ["rmse", "abs_rel", "delta1"], timings


RECIPES = {
    "fig4-separate": fig4_separate,
    "fig5-reversal": fig5_reversal,
    "fig6-mixed": fig6_mixed,
    "tab2-training-strategies": tab2_training_strategies,
    "tab3-shots": tab3_shots,
}


def _timing_key(r: MetricReport) -> str:
    return f"{r.task.split(':')[0]}/ft{r.meta['ft_shots']}/test{r.shots}"


def _table(reports: list[MetricReport], columns, timings: dict) -> str:
    columns = [c for c in columns if any(c in r.values for r in reports)]
    if reports and "ft_shots" in reports[0].meta:
        extra = {"ft_shots": [str(r.meta["ft_shots"]) for r in reports],
                 "sec/sentence": [f"{timings[_timing_key(r)]:.3f}" for r in reports]}
    else:
        extra = {"setting": [str(r.meta.get("setting", "")) for r in reports]}
    return format_table(reports, columns, extra)


def run(recipe: str, out, seed: int = 0, scale: str = "desk", base_checkpoint=None) -> str:
    """Run ``recipe`` and return its table as text."""
    if recipe not in RECIPES:
        raise E.ConfigError(f"unknown recipe {recipe!r}; choose from {sorted(RECIPES)}")
    if scale not in SCALES:
        raise E.ConfigError(f"unknown scale {scale!r}")
    sc = SCALES[scale]
    out = Path(out)
    base = base_model(out, sc, seed, base_checkpoint)
    rdir = out / recipe
    rdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    reports, columns, extra = RECIPES[recipe](rdir, base, sc, seed)
    timings = extra if recipe == "tab3-shots" else {}
    summary = {} if recipe == "tab3-shots" else extra
    table = _table(reports, columns, timings)
    if summary:
        table += "\n" + "\n".join(f"{k}: {v:.4f}" for k, v in summary.items())
    write_json(rdir / "report.json", {"recipe": recipe, "seed": seed, "scale": scale,
                                      "rows": [r.to_dict() for r in reports],
                                      "summary": summary})
    (rdir / "table.txt").write_text(table + "\n")
    write_json(rdir / "timings.json", {**timings, "total_s": time.perf_counter() - t0})
    logger.info("recipe %s done: %s", recipe, json.dumps(summary))
    return table
