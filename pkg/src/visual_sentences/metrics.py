"""Dense-prediction metrics for generated clips.

All functions are pure and work on numpy arrays; clips are accepted wherever
an array is, via their ``frames``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .worlds import Clip

__all__ = [
    "MetricReport",
    "rmse",
    "edge_metrics",
    "edge_counts",
    "segmentation_metrics",
    "segmentation_metrics_from_labels",
    "nearest_palette_labels",
    "depth_metrics",
    "normal_metrics",
    "style_proxy",
    "EDGE_THRESHOLDS",
    "DEPTH_EPS",
    "format_table",
]

EDGE_THRESHOLDS = np.arange(1, 100) / 100.0
DEPTH_EPS = 1e-3


def _arr(x) -> np.ndarray:
    return np.asarray(x.frames if isinstance(x, Clip) else x, dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def rmse(pred, gt) -> float:
    """Root mean squared error in 0-255 pixel units."""
    p, g = _arr(pred), _arr(gt)
    _same_shape(p, g)
    return float(np.sqrt(np.mean((255.0 * p - 255.0 * g) ** 2)))


# ---------------------------------------------------------------------------
# edges

_RADIUS_OFFSETS = ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1))


def _match_count(pred: np.ndarray, gt: np.ndarray) -> int:
    """Size of a maximum one-to-one matching between edge pixels within radius 1."""
    p_idx = np.argwhere(pred)
    g_idx = np.argwhere(gt)
    if len(p_idx) == 0 or len(g_idx) == 0:
        return 0
    g_lookup = -np.ones(gt.shape, dtype=np.int64)
    g_lookup[tuple(g_idx.T)] = np.arange(len(g_idx))
    rows, cols = [], []
    h, w = gt.shape
    for i, (y, x) in enumerate(p_idx):
        for dy, dx in _RADIUS_OFFSETS:
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w and g_lookup[yy, xx] >= 0:
                rows.append(i)
                cols.append(g_lookup[yy, xx])
    if not rows:
        return 0
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(p_idx), len(g_idx)))
    match = maximum_bipartite_matching(graph, perm_type="column")
    return int(np.sum(match >= 0))


def _prf(matched: int, n_pred: int, n_gt: int) -> tuple[float, float, float]:
    # an empty set has nothing wrong in it: P=1 without predictions, R=1 without ground truth
    p = matched / n_pred if n_pred else 1.0
    r = matched / n_gt if n_gt else 1.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def edge_counts(pred_prob: np.ndarray, gt: np.ndarray, thresholds=EDGE_THRESHOLDS) -> np.ndarray:
    """Per-threshold (matched, n_pred, n_gt) counts for one 2-D edge map."""
    pred_prob = np.asarray(pred_prob, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    _same_shape(pred_prob, gt.astype(np.float64))
    n_gt = int(gt.sum())
    out = np.zeros((len(thresholds), 3), dtype=np.int64)
    for k, th in enumerate(thresholds):
        binary = pred_prob >= th
        out[k] = (_match_count(binary, gt), int(binary.sum()), n_gt)
    return out


def _to_edge_maps(x) -> list[np.ndarray]:
    a = _arr(x)
    if a.ndim == 4:  # (F, H, W, 3) clip -> frames, channel mean
        return [f.mean(axis=-1) for f in a]
    if a.ndim == 3 and a.shape[-1] == 3:
        return [a.mean(axis=-1)]
    if a.ndim == 2:
        return [a]
    return list(a)


def edge_metrics(pred_prob, gt_binary, thresholds=EDGE_THRESHOLDS) -> tuple[float, float, float]:
    """(ODS, OIS, AP) for one edge map or a collection of them.

    Inputs may be single 2-D maps, stacks (n, H, W), lists of maps, or clips
    (each frame is one image, channels averaged).
    """
    if isinstance(pred_prob, (list, tuple)):
        preds = [m for p in pred_prob for m in _to_edge_maps(p)]
        gts = [m for g in gt_binary for m in _to_edge_maps(g)]
    else:
        preds, gts = _to_edge_maps(pred_prob), _to_edge_maps(gt_binary)
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth counts differ")
    for g in gts:
        if not np.all((g == 0) | (g == 1)):
            raise ValueError("ground-truth edges must be binary")
    counts = np.stack([edge_counts(p, g, thresholds) for p, g in zip(preds, gts)])

    per_image_best = [max(_prf(*row)[2] for row in c) for c in counts]
    total = counts.sum(axis=0)
    curve = np.array([_prf(*row) for row in total])  # (T, 3): P, R, F
    ods = float(curve[:, 2].max())
    ois = float(np.mean(per_image_best))
    order = np.lexsort((-curve[:, 0], curve[:, 1]))
    recall = curve[order, 1]
    precision = curve[order, 0]
    # anchor the curve at zero recall with the precision of the lowest-recall point
    recall = np.concatenate([[0.0], recall])
    precision = np.concatenate([[precision[0]], precision])
    ap = float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))
    return ods, ois, ap


# ---------------------------------------------------------------------------
# segmentation


def nearest_palette_labels(colors, palette) -> np.ndarray:
    c = _arr(colors)
    pal = np.asarray(palette, dtype=np.float64)
    d = ((c[..., None, :] - pal) ** 2).sum(axis=-1)
    return np.argmin(d, axis=-1)


def segmentation_metrics_from_labels(pred, gt) -> tuple[float, float]:
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    _same_shape(pred, gt)
    classes = np.union1d(np.unique(pred), np.unique(gt))
    ious = []
    for c in classes:
        p, g = pred == c, gt == c
        ious.append(np.sum(p & g) / np.sum(p | g))
    return float(np.mean(ious)), float(np.mean(pred == gt))


def segmentation_metrics(pred_colors, gt_colors, palette) -> tuple[float, float]:
    """(mIoU, pAcc) after snapping both maps to their nearest palette colour."""
    return segmentation_metrics_from_labels(
        nearest_palette_labels(pred_colors, palette), nearest_palette_labels(gt_colors, palette)
    )


# ---------------------------------------------------------------------------
# depth and normals


def depth_metrics(pred, gt, eps: float = DEPTH_EPS) -> dict[str, float]:
    p = np.clip(_arr(pred), eps, 1.0).ravel()
    g = np.clip(_arr(gt), eps, 1.0).ravel()
    _same_shape(p, g)
    ratio = np.maximum(p / g, g / p)
    e = np.log(p) - np.log(g)
    return {
        "delta1": float(np.mean(ratio < 1.25)),
        "delta2": float(np.mean(ratio < 1.25 ** 2)),
        "delta3": float(np.mean(ratio < 1.25 ** 3)),
        "abs_rel": float(np.mean(np.abs(p - g) / g)),
        "sq_rel": float(np.mean((p - g) ** 2 / g)),
        "rmse_log": float(np.sqrt(np.mean(e ** 2))),
        # centred form of mean(e^2) - mean(e)^2; exact zero for a constant offset
        "silog": float(100.0 * np.sqrt(np.mean((e - e.mean()) ** 2))),
    }


def normal_metrics(pred, gt) -> dict[str, float]:
    """Angular error statistics between two (..., 3) vector maps, in degrees.

    Pixels where either vector has zero norm are dropped; ``excluded`` counts them.
    """
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    _same_shape(p, g)
    pn = np.linalg.norm(p, axis=1)
    gn = np.linalg.norm(g, axis=1)
    keep = (pn > 0) & (gn > 0)
    if not keep.any():
        raise ValueError("no valid normals to compare")
    cos = np.sum(p[keep] * g[keep], axis=1) / (pn[keep] * gn[keep])
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return {
        "mean": float(np.mean(ang)),
        "median": float(np.median(ang)),
        "within_5": float(np.mean(ang < 5.0)),
        "within_11_25": float(np.mean(ang < 11.25)),
        "within_30": float(np.mean(ang < 30.0)),
        "excluded": int(np.sum(~keep)),
    }


def _histograms(x: np.ndarray, bins: int) -> np.ndarray:
    flat = x.reshape(-1, 3)
    idx = np.minimum((flat * bins).astype(np.int64), bins - 1)
    return np.stack([np.bincount(idx[:, c], minlength=bins) / len(idx) for c in range(3)])


def style_proxy(pred, ref_style, bins: int = 8) -> float:
    """Mean per-channel total-variation distance between colour histograms."""
    p, r = _arr(pred), _arr(ref_style)
    if p.shape[-1] != r.shape[-1]:
        raise ValueError("channel counts differ")
    hp, hr = _histograms(p, bins), _histograms(r, bins)
    return float(np.mean(0.5 * np.abs(hp - hr).sum(axis=1)))


# ---------------------------------------------------------------------------
# reports


_UNITS = {
    "rmse": "0-255",
    "mean": "deg",
    "median": "deg",
}
_BOUNDED = {"ods", "ois", "ap", "miou", "pacc", "delta1", "delta2", "delta3",
            "within_5", "within_11_25", "within_30", "style_tv"}


@dataclass
class MetricReport:
    task: str
    context: str
    shots: int = 4
    values: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.values.items():
            if not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite: {v}")
            if k in _BOUNDED and not 0.0 <= v <= 1.0:
                raise ValueError(f"metric {k}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "context": self.context,
            "shots": self.shots,
            "values": dict(self.values),
            "units": {k: _UNITS.get(k, "") for k in self.values},
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["task"], d["context"], d.get("shots", 4), dict(d["values"]), d.get("meta", {}))


def format_table(reports: list[MetricReport], columns: list[str] | None = None,
                 extra: dict[str, list] | None = None) -> str:
    """Aligned plain-text table, one row per report."""
    if columns is None:
        columns = []
        for r in reports:
            columns.extend(k for k in r.values if k not in columns)
    header = ["task", "context", "shots", *columns, *(extra or {})]
    rows = []
    for i, r in enumerate(reports):
        row = [r.task, r.context, str(r.shots)]
        row += [f"{r.values[c]:.4f}" if c in r.values else "-" for c in columns]
        row += [str(v[i]) for v in (extra or {}).values()]
        rows.append(row)
    widths = [max(len(h), *(len(r[j]) for r in rows)) for j, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines)
