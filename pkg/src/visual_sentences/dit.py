"""A small diffusion transformer over visual-sentence tokens.

Every block runs self-attention over *all* tokens of the sentence (context and
target together), optional cross-attention to a prompt sequence, and an MLP.
The diffusion time enters through adaptive layer-norm scale/shift/gate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import TokenGrid
from .worlds import Direction, Task, TaskKind

__all__ = [
    "ModelConfig",
    "TEXT_MODES",
    "PROMPT_KINDS",
    "SentenceDiT",
    "Attention",
    "positional_encoding",
    "timestep_embedding",
    "PositionError",
    "T_FLOOR",
    "rotary_tables",
]

TEXT_MODES = ("detailed", "rough", "null")

# one detailed prompt per task/direction pair; camera moves only run one way
PROMPT_KINDS = tuple(
    TaskKind(task, d).name
    for task in Task
    for d in Direction
    if not (task is Task.CAMERA_MOVE and d is Direction.UNDERSTANDING)
)


# smallest t used when turning a clean-token estimate into a velocity
T_FLOOR = 0.05


class PositionError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 128
    heads: int = 4
    layers: int = 6
    patch_size: int = 8
    max_positions: tuple[int, int, int] = (64, 4, 4)
    text_mode: str = "detailed"
    prompt_len: int = 4
    mlp_ratio: int = 4
    rope: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.max_positions = tuple(int(v) for v in self.max_positions)
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.rope and (self.dim // self.heads) % 2:
            raise ValueError("rotary attention needs an even head width")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.text_mode not in TEXT_MODES:
            raise ValueError(f"text_mode must be one of {TEXT_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def token_dim(self) -> int:
        return 3 * self.patch_size ** 2

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["max_positions"] = list(self.max_positions)
        return d


def _sinusoid(pos: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    angles = pos.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def positional_encoding(coords, dim: int, max_positions=None) -> torch.Tensor:
    """Factorized sinusoidal encoding of (t, h, w) integer coordinates, width ``dim``.

    The lowest frequency is 1 rad per step, so distinct integer coordinates map
    to distinct vectors.
    """
    coords = torch.as_tensor(np.asarray(coords), dtype=torch.int64)
    if max_positions is not None:
        limit = torch.tensor(max_positions)
        if (coords < 0).any() or (coords >= limit).any():
            bad = coords[((coords < 0) | (coords >= limit)).any(dim=1)][0].tolist()
            raise PositionError(f"coordinate {bad} outside range {tuple(max_positions)}")
    part = (dim // 3) // 2 * 2
    enc = [_sinusoid(coords[:, i], part) for i in range(3)]
    out = torch.cat(enc, dim=-1)
    if out.shape[-1] < dim:
        out = F.pad(out, (0, dim - out.shape[-1]))
    return out


def rotary_tables(coords, head_dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Cos/sin tables (N, head_dim / 2) for 3D rotary attention over (t, h, w).

    The rotation pairs are split between the three axes (time takes the
    remainder), so attention scores depend on coordinate *offsets*: "look at
    the same spot in another clip" is one pattern wherever the spot is.
    """
    coords = torch.as_tensor(np.asarray(coords), dtype=torch.float64)
    pairs = head_dim // 2
    spatial = pairs // 3
    angles = []
    for axis, n in enumerate((pairs - 2 * spatial, spatial, spatial)):
        if n:
            freqs = torch.exp(-math.log(100.0) * torch.arange(n, dtype=torch.float64) / n)
            angles.append(coords[:, axis, None] * freqs)
    angles = torch.cat(angles, dim=-1)
    return torch.cos(angles), torch.sin(angles)


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def timestep_embedding(t: torch.Tensor, dim: int = 256) -> torch.Tensor:
    return _sinusoid(t * 1000.0, dim)


class Attention(nn.Module):
    """Multi-head attention with separate q/k/v/o projections (LoRA targets)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, context=None, mask=None, rope=None):
        context = x if context is None else context
        b, n, d = x.shape
        m = context.shape[1]
        h = self.heads
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k = self.k(context).view(b, m, h, d // h).transpose(1, 2)
        v = self.v(context).view(b, m, h, d // h).transpose(1, 2)
        if rope is not None:
            q, k = _rotate(q, *rope), _rotate(k, *rope)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(b, n, d))


def _modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.cross_attn = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(approximate="tanh"),
            nn.Linear(mlp_ratio * dim, dim),
        )
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x, c, prompt=None, mask=None, rope=None):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(c).chunk(6, dim=-1)
        x = x + gate1[:, None] * self.self_attn(_modulate(self.norm1(x), shift1, scale1),
                                                mask=mask, rope=rope)
        if prompt is not None and prompt.shape[1] > 0:
            x = x + self.cross_attn(self.norm2(x), context=prompt)
        x = x + gate2[:, None] * self.mlp(_modulate(self.norm3(x), shift2, scale2))
        return x


class SentenceDiT(nn.Module):
    """Velocity predictor for the target tokens of a visual sentence.

    The prompt tables stand in for a frozen text encoder: ``detailed`` holds one
    sequence per task kind, ``rough`` a single task-agnostic sequence, and
    ``null`` is empty (cross-attention skipped).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.dim
        gen = torch.Generator().manual_seed(config.seed)
        self.embed = nn.Linear(config.token_dim, d)
        self.role_embed = nn.Parameter(torch.zeros(2, d))
        self.time_mlp = nn.Sequential(nn.Linear(256, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(
            Block(d, config.heads, config.mlp_ratio) for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.out = nn.Linear(d, config.token_dim)
        self.register_buffer(
            "prompt_detailed", torch.randn(len(PROMPT_KINDS), config.prompt_len, d, generator=gen)
        )
        self.register_buffer("prompt_rough", torch.randn(1, config.prompt_len, d, generator=gen))
        self._init_weights(gen)
        self.to(config.torch_dtype)

    def _init_weights(self, gen: torch.Generator) -> None:
        for name, p in self.named_parameters():
            if p.ndim >= 2:
                fan_in = p.shape[1]
                with torch.no_grad():
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(fan_in))
            else:
                with torch.no_grad():
                    p.zero_()
        with torch.no_grad():
            self.role_embed.copy_(0.02 * torch.randn(self.role_embed.shape, generator=gen))
            # every block starts as the identity and the head predicts zero velocity
            for module in [*(b.ada[1] for b in self.blocks), self.final_ada[1], self.out]:
                module.weight.zero_()
                module.bias.zero_()

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.weight.dtype

    def prompt(self, kind=None, mode: str | None = None, batch: int = 1):
        """Prompt sequence for ``kind`` under ``mode``; ``None`` for the null prompt."""
        mode = self.config.text_mode if mode is None else mode
        if mode not in TEXT_MODES:
            raise ValueError(f"unknown text mode {mode!r}")
        if mode == "null":
            return None
        if mode == "rough":
            seq = self.prompt_rough[0]
        else:
            if kind is None:
                raise ValueError("detailed prompts need a task kind")
            if isinstance(kind, TaskKind):
                name = kind.name
            else:
                name = kind if kind in PROMPT_KINDS else TaskKind.of(kind).name
            seq = self.prompt_detailed[PROMPT_KINDS.index(name)]
        return seq.unsqueeze(0).expand(batch, -1, -1)

    def forward(self, tokens, coords, target_mask, t, prompt=None, attn_mask=None):
        """Predict velocity for every token.

        ``tokens`` is (B, N, D) or (N, D); ``t`` a scalar or (B,) tensor.
        ``attn_mask`` is an optional boolean (N, N) matrix of allowed interactions.
        """
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        b, n, dtok = tokens.shape
        if dtok != self.config.token_dim:
            raise ValueError(f"token dim {dtok} != model input dim {self.config.token_dim}")
        dt = self.dtype
        t = torch.as_tensor(t, dtype=dt).reshape(-1).expand(b)
        pos = positional_encoding(coords, self.config.dim, self.config.max_positions).to(dt)
        target_mask = torch.as_tensor(np.asarray(target_mask), dtype=torch.long)
        x = self.embed(tokens) + pos + self.role_embed[target_mask]
        c = self.time_mlp(timestep_embedding(t).to(dt))
        mask = None if attn_mask is None else torch.as_tensor(attn_mask, dtype=torch.bool)
        if prompt is not None and prompt.shape[0] != b:
            prompt = prompt.expand(b, -1, -1)
        rope = None
        if self.config.rope:
            rope = tuple(a.to(dt) for a in rotary_tables(coords, self.config.dim // self.config.heads))
        for block in self.blocks:
            x = block(x, c, prompt, mask, rope)
        shift, scale = self.final_ada(c).chunk(2, dim=-1)
        clean = self.out(_modulate(self.final_norm(x), shift, scale))
        # the head estimates clean tokens; the noise reaches the velocity through z itself,
        # so it never has to squeeze through the D_m-wide stream
        out = (tokens - clean) / t.clamp(min=T_FLOOR)[:, None, None]
        return out[0] if squeeze else out

    @torch.no_grad()
    def velocity(self, grid: TokenGrid, t: float, kind=None, mode=None) -> np.ndarray:
        """Numpy convenience wrapper around ``forward`` for a single grid."""
        tokens = torch.as_tensor(grid.tokens, dtype=self.dtype)
        out = self.forward(tokens, grid.coords, grid.target_mask, t, self.prompt(kind, mode))
        return out.numpy().astype(np.float64)


def context_target_block_mask(target_mask) -> np.ndarray:
    """Attention mask that cuts every context<->target interaction."""
    m = np.asarray(target_mask, dtype=bool)
    return m[:, None] == m[None, :]
