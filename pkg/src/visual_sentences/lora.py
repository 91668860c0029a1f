"""Low-rank adapters on the attention projections of a ``SentenceDiT``."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

__all__ = [
    "LoRAConfig",
    "LoRALinear",
    "LoRAState",
    "ALL_TARGETS",
    "inject",
    "merge",
    "lora_state",
    "load_lora_state",
    "trainable_parameters",
    "AlreadyMergedError",
]

ALL_TARGETS = tuple(
    f"{attn}.{proj}" for attn in ("self_attn", "cross_attn") for proj in "qkvo"
)


class AlreadyMergedError(RuntimeError):
    pass


@dataclass
class LoRAConfig:
    rank: int = 16
    alpha: float | None = None  # defaults to rank, i.e. unit scaling
    targets: tuple[str, ...] = ALL_TARGETS
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        self.targets = tuple(self.targets)
        if not self.targets:
            raise ValueError("at least one target projection is required")
        if self.alpha is None:
            self.alpha = float(self.rank)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LoRALinear(nn.Module):
    """``base(x) + scaling * (x @ down) @ up`` with ``base`` frozen and ``up`` zero at init."""

    def __init__(self, base: nn.Linear, rank: int, scaling: float, generator=None):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        dtype = base.weight.dtype
        self.rank = rank
        self.scaling = scaling
        self.down = nn.Parameter(
            torch.randn(base.in_features, rank, generator=generator).to(dtype)
            / math.sqrt(base.in_features)
        )
        self.up = nn.Parameter(torch.zeros(rank, base.out_features, dtype=dtype))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    @property
    def weight(self) -> torch.Tensor:
        return self.base.weight

    def delta(self) -> torch.Tensor:
        # (out, in) like nn.Linear.weight
        return self.scaling * (self.down @ self.up).T

    def forward(self, x):
        return self.base(x) + self.scaling * ((x @ self.down) @ self.up)


@dataclass
class LoRAState:
    """Adapter factors keyed by dotted module path, plus the config that made them."""

    config: LoRAConfig
    factors: dict[str, tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)

    @property
    def num_parameters(self) -> int:
        return sum(d.numel() + u.numel() for d, u in self.factors.values())

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, (down, up) in self.factors.items():
            out[f"{name}.down"] = down
            out[f"{name}.up"] = up
        return out


def _target_names(model: nn.Module, config: LoRAConfig) -> list[str]:
    names = []
    for i in range(len(model.blocks)):
        for target in config.targets:
            names.append(f"blocks.{i}.{target}")
    return names


def _resolve(model: nn.Module, path: str):
    parent_path, _, leaf = path.rpartition(".")
    try:
        parent = model.get_submodule(parent_path)
        module = getattr(parent, leaf)
    except AttributeError as exc:
        raise KeyError(f"model has no projection {path!r}") from exc
    return parent, leaf, module


def inject(model: nn.Module, config: LoRAConfig | None = None, copy_model: bool = True):
    """Wrap the configured projections in ``LoRALinear`` and freeze everything else.

    Returns ``(adapted_model, state)``; the original model is left untouched
    unless ``copy_model`` is False.
    """
    config = config or LoRAConfig()
    if getattr(model, "_lora_merged", False):
        raise AlreadyMergedError("model already has merged adapters")
    adapted = copy.deepcopy(model) if copy_model else model
    for p in adapted.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(config.seed)
    state = LoRAState(config)
    for name in _target_names(adapted, config):
        parent, leaf, module = _resolve(adapted, name)
        if isinstance(module, LoRALinear):
            raise ValueError(f"{name} already carries an adapter")
        if not isinstance(module, nn.Linear):
            raise KeyError(f"{name} is not a linear projection")
        wrapped = LoRALinear(module, config.rank, config.scaling, gen)
        setattr(parent, leaf, wrapped)
        state.factors[name] = (wrapped.down, wrapped.up)
    adapted.lora_config = config
    return adapted, state


def lora_state(model: nn.Module) -> LoRAState:
    config = getattr(model, "lora_config", None)
    if config is None:
        raise ValueError("model has no adapters")
    state = LoRAState(config)
    for name, module in model.named_modules():
        if isinstance(module, LoRALinear):
            state.factors[name] = (module.down, module.up)
    return state


def load_lora_state(model: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    """Copy ``{name.down, name.up}`` tensors into an adapted model in place."""
    for name, module in model.named_modules():
        if isinstance(module, LoRALinear):
            with torch.no_grad():
                module.down.copy_(tensors[f"{name}.down"])
                module.up.copy_(tensors[f"{name}.up"])


def merge(model: nn.Module, state: LoRAState | None = None) -> nn.Module:
    """Fold every adapter into its base weight and return a plain model (a copy)."""
    if getattr(model, "_lora_merged", False):
        raise AlreadyMergedError("adapters are already merged into this model")
    wrapped = [(n, m) for n, m in model.named_modules() if isinstance(m, LoRALinear)]
    if not wrapped:
        raise ValueError("model has no adapters to merge")
    merged = copy.deepcopy(model)
    for name, _ in wrapped:
        parent, leaf, module = _resolve(merged, name)
        base = module.base
        with torch.no_grad():
            base.weight.add_(module.delta())
        setattr(parent, leaf, base)
    merged._lora_merged = True
    if hasattr(merged, "lora_config"):
        del merged.lora_config
    return merged


def trainable_parameters(model: nn.Module) -> list[tuple[str, nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]
