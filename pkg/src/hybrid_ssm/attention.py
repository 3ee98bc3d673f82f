"""Weight-tied transformer block with per-site low-rank adapters and rotary embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
from torch import nn

from .errors import CapacityError, ConfigError, ContractError, DimensionError
from .numerics import rmsnorm, silu, softmax_lastdim

ATTN_TARGETS = ("q", "k", "v", "o")
MLP_TARGETS = ("up", "gate", "down")
LORA_TARGETS = ATTN_TARGETS + MLP_TARGETS


@dataclass
class RotaryConfig:
    d_emb: int = 32
    base: float = 10000.0
    s: float = 1.0
    enabled: bool = True
    divisor_override: float | None = None

    def validate(self) -> None:
        if self.d_emb < 2 or self.d_emb % 2:
            raise ConfigError("rotary.d_emb", f"must be even and >= 2, got {self.d_emb}")
        if self.s < 1:
            raise ConfigError("rotary.s", f"scaling factor must be >= 1, got {self.s}")
        if self.base <= 1:
            raise ConfigError("rotary.base", f"must be > 1, got {self.base}")


def rotary_angles(cfg: RotaryConfig) -> torch.Tensor:
    """theta_d = base ** (-2d / d_emb) for d in [0, d_emb/2), in f64."""
    cfg.validate()
    d = torch.arange(cfg.d_emb // 2, dtype=torch.float64)
    return cfg.base ** (-2.0 * d / cfg.d_emb)


def ntk_divisor(s: float, d_emb: int) -> float:
    return float(s) ** (d_emb / (d_emb - 1))


def ntk_rescale(theta: torch.Tensor, s: float, d_emb: int, divisor: float | None = None) -> torch.Tensor:
    """Divide every angle by ``s ** (d_emb / (d_emb - 1))`` (or by an explicit ``divisor``)."""
    if s < 1:
        raise ConfigError("rotary.s", f"scaling factor must be >= 1, got {s}")
    if d_emb < 2:
        raise ConfigError("rotary.d_emb", f"must be >= 2, got {d_emb}")
    return theta / (divisor if divisor is not None else ntk_divisor(s, d_emb))


def effective_angles(cfg: RotaryConfig) -> torch.Tensor | None:
    if not cfg.enabled:
        return None
    return ntk_rescale(rotary_angles(cfg), cfg.s, cfg.d_emb, cfg.divisor_override)


def apply_rotary(x: torch.Tensor, positions: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Rotate channel pairs ``(i, i + d/2)`` of ``x [..., L, H, d]`` by ``position * theta_i``."""
    half = x.shape[-1] // 2
    if theta.shape[-1] != half:
        raise DimensionError(f"apply_rotary: {theta.shape[-1]} angles for head dim {x.shape[-1]}")
    if bool((positions < 0).any()):
        raise ContractError("apply_rotary: positions must be non-negative")
    ang = positions.to(torch.float64)[:, None] * theta.to(torch.float64)[None, :]
    cos = torch.cos(ang).to(x.dtype)[:, None, :]
    sin = torch.sin(ang).to(x.dtype)[:, None, :]
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class LoraAdapter(nn.Module):
    """Low-rank delta ``(alpha / r) * B @ A`` for one linear map. ``B`` starts at zero."""

    def __init__(self, target: str, d_in: int, d_out: int, r: int = 16, alpha: float = 32.0):
        super().__init__()
        if target not in LORA_TARGETS:
            raise ConfigError("lora.target", f"unknown target {target!r}")
        if r < 1:
            raise ConfigError("lora.r", f"rank must be >= 1, got {r}")
        self.target = target
        self.d_in, self.d_out, self.r, self.alpha = d_in, d_out, r, alpha
        self.A = nn.Parameter(torch.randn(r, d_in) * (0.02 if d_in > 1 else 1.0))
        self.B = nn.Parameter(torch.zeros(d_out, r))

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * (self.B @ self.A)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ((x @ self.A.t()) @ self.B.t()) * self.scaling


def lora_apply(weight: torch.Tensor, adapter: nn.Module, x: torch.Tensor, role: str | None = None) -> torch.Tensor:
    """``x @ W.T`` plus the adapter's low-rank delta; ``W`` itself is never modified."""
    if role is not None and adapter.target != role:
        raise ContractError(f"adapter targets {adapter.target!r}, applied to {role!r}")
    if weight.shape != (adapter.d_out, adapter.d_in) or x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"lora_apply: W {tuple(weight.shape)}, adapter {adapter.d_out}x{adapter.d_in}, x {tuple(x.shape)}"
        )
    return x @ weight.t() + adapter(x)


class KvCache:
    """Pre-allocated key/value store for one attention invocation site.

    ``nbytes`` counts the cached entries only; ``reserved_bytes`` is the
    capacity-sized allocation.
    """

    def __init__(self, batch: int, capacity: int, n_heads: int, d_head: int, dtype=torch.float32, device=None):
        if capacity < 0:
            raise ContractError("KvCache capacity must be >= 0")
        self.capacity = capacity
        self.length = 0
        self.k = torch.empty(batch, capacity, n_heads, d_head, dtype=dtype, device=device)
        self.v = torch.empty(batch, capacity, n_heads, d_head, dtype=dtype, device=device)

    def append(self, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        L = k.shape[1]
        end = self.length + L
        if end > self.capacity:
            raise CapacityError(f"KV cache capacity {self.capacity} exceeded (need {end})")
        self.k[:, self.length : end] = k
        self.v[:, self.length : end] = v
        self.length = end
        return self.k[:, :end], self.v[:, :end]

    @property
    def nbytes(self) -> int:
        live = self.k[:, : self.length]
        return 2 * live.numel() * live.element_size()

    @property
    def reserved_bytes(self) -> int:
        return 2 * self.k.numel() * self.k.element_size()


def causal_attention(q, k, v, q_pos, k_pos):
    """Multi-head attention where query ``i`` may attend to key ``j`` iff ``k_pos[j] <= q_pos[i]``.

    ``q [B, L, H, d]``, ``k, v [B, S, H, d]``. Returns ``(out [B, L, H, d], weights [B, H, L, S])``.
    """
    scores = torch.einsum("blhd,bshd->bhls", q, k) / math.sqrt(q.shape[-1])
    future = k_pos[None, :] > q_pos[:, None]
    scores = scores.masked_fill(future, float("-inf"))
    weights = softmax_lastdim(scores)
    return torch.einsum("bhls,bshd->blhd", weights, v), weights


class SharedBlock(nn.Module):
    """Pre-norm attention + gated MLP. One instance is reused at several depths."""

    def __init__(self, d_model: int, n_heads: int, mlp_expansion: int = 4, norm_eps: float = 1e-6):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError("attn_heads", f"d_model={d_model} not divisible by {n_heads} heads")
        self.d_model, self.n_heads = d_model, n_heads
        self.d_head = d_model // n_heads
        self.norm_eps = norm_eps
        d_ff = mlp_expansion * d_model
        self.q = nn.Linear(d_model, d_model, bias=False)
        self.k = nn.Linear(d_model, d_model, bias=False)
        self.v = nn.Linear(d_model, d_model, bias=False)
        self.o = nn.Linear(d_model, d_model, bias=False)
        self.up = nn.Linear(d_model, d_ff, bias=False)
        self.gate = nn.Linear(d_model, d_ff, bias=False)
        self.down = nn.Linear(d_ff, d_model, bias=False)
        self.attn_norm = nn.Parameter(torch.ones(d_model))
        self.mlp_norm = nn.Parameter(torch.ones(d_model))
        for lin in (self.q, self.k, self.v, self.up, self.gate):
            nn.init.normal_(lin.weight, std=d_model**-0.5)
        nn.init.normal_(self.o.weight, std=d_model**-0.5 / 2)
        nn.init.normal_(self.down.weight, std=d_ff**-0.5 / 2)

    def dims(self, target: str) -> tuple[int, int]:
        """``(d_in, d_out)`` of the linear named ``target``."""
        lin = getattr(self, target)
        return lin.in_features, lin.out_features

    def _proj(self, name: str, x: torch.Tensor, adapters: Mapping[str, Sequence[nn.Module]]) -> torch.Tensor:
        y = getattr(self, name)(x)
        for ad in adapters.get(name, ()):
            y = y + ad(x)
        return y

    def forward(
        self,
        x: torch.Tensor,
        adapters: Mapping[str, Sequence[nn.Module]] | None = None,
        theta: torch.Tensor | None = None,
        positions: torch.Tensor | None = None,
        cache: KvCache | None = None,
    ) -> torch.Tensor:
        adapters = adapters or {}
        Bsz, L, _ = x.shape
        start = cache.length if cache is not None else 0
        if positions is None:
            positions = torch.arange(start, start + L)
        elif cache is not None and (positions.numel() != L or int(positions[0]) != start or
                                    bool((positions != torch.arange(start, start + L)).any())):
            raise ContractError(f"positions must continue the cache (expected start {start})")

        h = rmsnorm(x, self.attn_norm, self.norm_eps)
        q = self._proj("q", h, adapters).view(Bsz, L, self.n_heads, self.d_head)
        k = self._proj("k", h, adapters).view(Bsz, L, self.n_heads, self.d_head)
        v = self._proj("v", h, adapters).view(Bsz, L, self.n_heads, self.d_head)
        if theta is not None:
            q = apply_rotary(q, positions, theta)
            k = apply_rotary(k, positions, theta)
        if cache is not None:
            k, v = cache.append(k, v)
            k_pos = torch.arange(cache.length)
        else:
            k_pos = positions
        att, _ = causal_attention(q, k, v, positions, k_pos)
        x = x + self._proj("o", att.reshape(Bsz, L, self.d_model), adapters)

        h = rmsnorm(x, self.mlp_norm, self.norm_eps)
        mid = silu(self._proj("gate", h, adapters)) * self._proj("up", h, adapters)
        return x + self._proj("down", mid, adapters)


def shared_block_forward(x, block, loras, rotary: RotaryConfig, cache=None, positions=None):
    """Functional entry point: run ``block`` at one invocation site with that site's adapters."""
    theta = effective_angles(rotary)
    adapters = {}
    for ad in (loras.values() if isinstance(loras, Mapping) else loras):
        adapters.setdefault(ad.target, []).append(ad)
    return block(x, adapters, theta=theta, positions=positions, cache=cache)
