"""Hybrid backbone: Mamba2 blocks with shared attention blocks invoked between them.

Layout for ``n_mamba_layers=12, attn_every=6, n_shared_blocks=2``::

    embed -> M M M M M M [site 0: block A] M M M M M M [site 1: block B] -> norm -> head

At each site the shared block reads ``concat(residual, initial_embedding)``
through a per-site down-projection, and its output goes back into the residual
stream through a per-site output projection. Sites also own their LoRA
adapters; the shared blocks own nothing site-specific.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import torch
from torch import nn

from .attention import (
    ATTN_TARGETS,
    LORA_TARGETS,
    KvCache,
    LoraAdapter,
    RotaryConfig,
    SharedBlock,
    effective_angles,
)
from .errors import ConfigError, ContractError, InputError
from .numerics import dtype_name, resolve_dtype, rmsnorm
from .ssm import Mamba2Block, SsmState

BYTE_VOCAB = 256
N_SPECIALS = 4


@dataclass
class SsmConfig:
    expand: int = 2
    n_heads: int = 4
    d_state: int = 64
    conv_width: int = 4
    chunk_len: int = 64


@dataclass
class ModelConfig:
    vocab_size: int = BYTE_VOCAB + N_SPECIALS
    d_model: int = 128
    n_mamba_layers: int = 12
    attn_every: int = 6
    n_shared_blocks: int = 2
    attn_heads: int = 4
    rotary: RotaryConfig = field(default_factory=RotaryConfig)
    lora_targets: tuple[str, ...] = ("up", "down")
    lora_rank: int = 16
    lora_alpha: float = 32.0
    ssm: SsmConfig = field(default_factory=SsmConfig)
    mlp_expansion: int = 4
    max_seq_len: int = 4096
    dtype: str = "f32"
    norm_eps: float = 1e-6

    @property
    def n_sites(self) -> int:
        return self.n_mamba_layers // self.attn_every

    @property
    def d_inner(self) -> int:
        return self.ssm.expand * self.d_model

    @property
    def ssm_d_head(self) -> int:
        return self.d_inner // self.ssm.n_heads

    @property
    def attn_d_head(self) -> int:
        return self.d_model // self.attn_heads

    def validate(self) -> "ModelConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(self.vocab_size >= 1, "vocab_size", "must be >= 1")
        need(self.d_model >= 1, "d_model", "must be >= 1")
        need(self.n_mamba_layers >= 0, "n_mamba_layers", "must be >= 0")
        need(self.attn_every >= 1, "attn_every", "must be >= 1")
        need(self.n_shared_blocks in (1, 2), "n_shared_blocks", f"must be 1 or 2, got {self.n_shared_blocks}")
        need(self.attn_heads >= 1 and self.d_model % self.attn_heads == 0, "attn_heads",
             f"must divide d_model={self.d_model}")
        need(self.ssm.expand >= 1, "ssm.expand", "must be >= 1")
        need(self.ssm.n_heads >= 1 and self.d_inner % self.ssm.n_heads == 0, "ssm.n_heads",
             f"must divide d_inner={self.d_inner}")
        need(self.ssm.d_state >= 1, "ssm.d_state", "must be >= 1")
        need(self.ssm.conv_width >= 1, "ssm.conv_width", "must be >= 1")
        need(self.ssm.chunk_len >= 1, "ssm.chunk_len", "must be >= 1")
        need(self.mlp_expansion >= 1, "mlp_expansion", "must be >= 1")
        need(self.max_seq_len >= 1, "max_seq_len", "must be >= 1")
        need(self.lora_rank >= 1, "lora_rank", "must be >= 1")
        bad = [t for t in self.lora_targets if t not in LORA_TARGETS]
        need(not bad, "lora_targets", f"unknown targets {bad}")
        need(self.rotary.d_emb == self.attn_d_head, "rotary.d_emb",
             f"must equal the attention head dim {self.attn_d_head}")
        self.rotary.validate()
        resolve_dtype(self.dtype)
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config field")
        rotary = RotaryConfig(**d.pop("rotary", {}))
        ssm = SsmConfig(**d.pop("ssm", {}))
        if "lora_targets" in d:
            d["lora_targets"] = tuple(d["lora_targets"])
        return cls(rotary=rotary, ssm=ssm, **d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


PRESETS = ("tiny-1p2b-style", "tiny-2p7b-style", "tiny-7b-style")


def preset(name: str, **overrides) -> ModelConfig:
    """Desk-scale configs carrying the structural flags of each production variant."""
    if name == "tiny-1p2b-style":
        cfg = ModelConfig(n_shared_blocks=1, lora_targets=ATTN_TARGETS + ("up", "down"))
    elif name == "tiny-2p7b-style":
        cfg = ModelConfig(n_shared_blocks=2, rotary=RotaryConfig(enabled=False), lora_targets=("up", "down"))
    elif name == "tiny-7b-style":
        cfg = ModelConfig(n_shared_blocks=2, lora_targets=("up", "down"))
    else:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {PRESETS}")
    return shrink(cfg, **overrides) if overrides else cfg


def shrink(cfg: ModelConfig, **overrides) -> ModelConfig:
    """Copy of ``cfg`` with top-level fields replaced; ``ssm`` and ``rotary`` accept dicts.

    The rotary embedding dimension follows the attention head dim automatically.
    """
    cfg = copy.deepcopy(cfg)
    for key, val in overrides.items():
        if key in ("ssm", "rotary") and isinstance(val, dict):
            sub = getattr(cfg, key)
            for k, v in val.items():
                if not hasattr(sub, k):
                    raise ConfigError(f"{key}.{k}", "unknown field")
                setattr(sub, k, v)
        elif hasattr(cfg, key) and not isinstance(getattr(type(cfg), key, None), property):
            setattr(cfg, key, tuple(val) if key == "lora_targets" else val)
        else:
            raise ConfigError(key, "unknown model config field")
    if "rotary" not in overrides or "d_emb" not in overrides.get("rotary", {}):
        if cfg.attn_heads and cfg.d_model % cfg.attn_heads == 0:
            cfg.rotary.d_emb = cfg.attn_d_head
    return cfg


@dataclass
class InferenceCaches:
    """Everything a generation stream carries between steps."""

    ssm_states: list[SsmState]
    kv: list[KvCache]
    position: int = 0

    @property
    def ssm_bytes(self) -> int:
        return sum(s.nbytes for s in self.ssm_states)

    @property
    def kv_bytes(self) -> int:
        return sum(c.nbytes for c in self.kv)

    @property
    def total_bytes(self) -> int:
        return self.ssm_bytes + self.kv_bytes


class MambaLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm = nn.Parameter(torch.ones(cfg.d_model))
        self.norm_eps = cfg.norm_eps
        self.mixer = Mamba2Block(
            cfg.d_model,
            n_heads=cfg.ssm.n_heads,
            d_head=cfg.ssm_d_head,
            d_state=cfg.ssm.d_state,
            conv_width=cfg.ssm.conv_width,
            chunk_len=cfg.ssm.chunk_len,
            norm_eps=cfg.norm_eps,
        )

    def forward(self, x, state=None, mode="parallel"):
        y, new_state = self.mixer(rmsnorm(x, self.norm, self.norm_eps), state, mode)
        return x + y, new_state


class Site(nn.Module):
    """One invocation of a shared block: private projections and adapters, borrowed block."""

    def __init__(self, cfg: ModelConfig, index: int, block_id: int, block: SharedBlock):
        super().__init__()
        self.index = index
        self.block_id = block_id
        self.in_proj = nn.Linear(2 * cfg.d_model, cfg.d_model, bias=False)
        self.out_proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        nn.init.normal_(self.in_proj.weight, std=(2 * cfg.d_model) ** -0.5)
        nn.init.normal_(self.out_proj.weight, std=cfg.d_model**-0.5 / 2)
        self.loras = nn.ModuleDict()
        for t in cfg.lora_targets:
            d_in, d_out = block.dims(t)
            self.loras[t] = LoraAdapter(t, d_in, d_out, cfg.lora_rank, cfg.lora_alpha)
        # adapters added after pretraining (e.g. for QLoRA finetuning)
        self.task_loras = nn.ModuleDict()

    def adapter_map(self) -> dict[str, list[nn.Module]]:
        out: dict[str, list[nn.Module]] = {}
        for group in (self.loras, self.task_loras):
            for target, ad in group.items():
                out.setdefault(target, []).append(ad)
        return out


def _check_tokens(tokens: torch.Tensor, vocab_size: int) -> torch.Tensor:
    tokens = torch.as_tensor(tokens)
    if tokens.dtype not in (torch.int64, torch.int32, torch.int16, torch.uint8):
        raise InputError(f"token ids must be integers, got {tokens.dtype}")
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= vocab_size):
        raise InputError(f"token ids must lie in [0, {vocab_size})")
    return tokens.long()


class HybridLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        d = cfg.d_model
        self.embed = nn.Embedding(cfg.vocab_size, d)
        nn.init.normal_(self.embed.weight, std=1.0)
        self.layers = nn.ModuleList(MambaLayer(cfg) for _ in range(cfg.n_mamba_layers))
        self.shared_blocks = nn.ModuleList(
            SharedBlock(d, cfg.attn_heads, cfg.mlp_expansion, cfg.norm_eps) for _ in range(cfg.n_shared_blocks)
        )
        self.sites = nn.ModuleList(
            Site(cfg, j, j % cfg.n_shared_blocks, self.shared_blocks[j % cfg.n_shared_blocks])
            for j in range(cfg.n_sites)
        )
        self.site_after = {(j + 1) * cfg.attn_every - 1: j for j in range(cfg.n_sites)}
        self.final_norm = nn.Parameter(torch.ones(d))
        self.lm_head = nn.Linear(d, cfg.vocab_size, bias=False)
        nn.init.normal_(self.lm_head.weight, std=d**-0.5)
        self._theta = effective_angles(cfg.rotary)

    @property
    def dtype(self) -> torch.dtype:
        return self.final_norm.dtype

    def set_rotary(self, s: float | None = None, divisor: float | None = None, enabled: bool | None = None):
        """Rebuild the rotary angle table, e.g. to apply NTK rescaling at evaluation time."""
        rot = self.config.rotary
        if s is not None:
            rot.s = s
        rot.divisor_override = divisor
        if enabled is not None:
            rot.enabled = enabled
        rot.validate()
        self._theta = effective_angles(rot)

    def new_caches(self, batch: int = 1, capacity: int | None = None) -> InferenceCaches:
        cap = self.config.max_seq_len if capacity is None else capacity
        cfg = self.config
        return InferenceCaches(
            ssm_states=[layer.mixer.init_state(batch, self.dtype) for layer in self.layers],
            kv=[KvCache(batch, cap, cfg.attn_heads, cfg.attn_d_head, self.dtype) for _ in range(cfg.n_sites)],
        )

    def forward(self, tokens, mode: str = "parallel", caches: InferenceCaches | None = None) -> torch.Tensor:
        """Logits for every position. ``tokens`` is ``[L]`` or ``[batch, L]``."""
        tokens = _check_tokens(tokens, self.config.vocab_size)
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens[None]
        L = tokens.shape[1]
        if mode == "recurrent" and (caches is None or L != 1):
            raise ContractError("recurrent mode requires caches and exactly one token")
        if mode not in ("parallel", "recurrent"):
            raise ContractError(f"unknown mode {mode!r}")

        start = caches.position if caches is not None else 0
        positions = torch.arange(start, start + L)
        x = self.embed(tokens)
        emb0 = x
        for i, layer in enumerate(self.layers):
            state = caches.ssm_states[i] if caches is not None else None
            x, new_state = layer(x, state, mode)
            if caches is not None:
                caches.ssm_states[i] = new_state
            j = self.site_after.get(i)
            if j is not None:
                site = self.sites[j]
                block = self.shared_blocks[site.block_id]
                h = site.in_proj(torch.cat([x, emb0], dim=-1))
                kv = caches.kv[j] if caches is not None else None
                h = block(h, site.adapter_map(), theta=self._theta, positions=positions, cache=kv)
                x = x + site.out_proj(h)
        if caches is not None:
            caches.position += L
        logits = self.lm_head(rmsnorm(x, self.final_norm, self.config.norm_eps))
        return logits[0] if squeeze else logits


class PureTransformerLM(nn.Module):
    """Layer-matched attention-only baseline: every Mamba2 block becomes an attention+MLP layer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        d = cfg.d_model
        self.n_layers = cfg.n_mamba_layers + cfg.n_sites
        self.embed = nn.Embedding(cfg.vocab_size, d)
        nn.init.normal_(self.embed.weight, std=1.0)
        self.blocks = nn.ModuleList(
            SharedBlock(d, cfg.attn_heads, cfg.mlp_expansion, cfg.norm_eps) for _ in range(self.n_layers)
        )
        self.final_norm = nn.Parameter(torch.ones(d))
        self.lm_head = nn.Linear(d, cfg.vocab_size, bias=False)
        nn.init.normal_(self.lm_head.weight, std=d**-0.5)
        self._theta = effective_angles(cfg.rotary)

    @property
    def dtype(self) -> torch.dtype:
        return self.final_norm.dtype

    def new_caches(self, batch: int = 1, capacity: int | None = None) -> InferenceCaches:
        cap = self.config.max_seq_len if capacity is None else capacity
        cfg = self.config
        return InferenceCaches(
            ssm_states=[],
            kv=[KvCache(batch, cap, cfg.attn_heads, cfg.attn_d_head, self.dtype) for _ in range(self.n_layers)],
        )

    def forward(self, tokens, mode: str = "parallel", caches: InferenceCaches | None = None) -> torch.Tensor:
        tokens = _check_tokens(tokens, self.config.vocab_size)
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens[None]
        L = tokens.shape[1]
        if mode == "recurrent" and (caches is None or L != 1):
            raise ContractError("recurrent mode requires caches and exactly one token")
        start = caches.position if caches is not None else 0
        positions = torch.arange(start, start + L)
        x = self.embed(tokens)
        for i, block in enumerate(self.blocks):
            x = block(x, None, theta=self._theta, positions=positions,
                      cache=caches.kv[i] if caches is not None else None)
        if caches is not None:
            caches.position += L
        logits = self.lm_head(rmsnorm(x, self.final_norm, self.config.norm_eps))
        return logits[0] if squeeze else logits


def _seeded_build(cls, config: ModelConfig, seed: int):
    config = copy.deepcopy(config).validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = cls(config)
    return model.to(resolve_dtype(config.dtype))


def build_model(config: ModelConfig, seed: int = 0) -> HybridLM:
    """Deterministically initialize a hybrid model from ``seed``."""
    return _seeded_build(HybridLM, config, seed)


def build_pure_baseline(config: ModelConfig, seed: int = 0) -> PureTransformerLM:
    return _seeded_build(PureTransformerLM, config, seed)


def analytic_cache_bytes(config: ModelConfig, ctx_len: int, dtype_bytes: int) -> dict:
    """Closed-form inference-cache sizes for ``config`` after ``ctx_len`` tokens.

    ``ratio`` compares against a layer-matched pure transformer
    (``n_mamba_layers + n_sites`` attention layers). ``ratio_convention``
    counts only the backbone depth (``n_mamba_layers`` attention layers),
    which is ``attn_every`` whenever the layout divides evenly.
    """
    if ctx_len < 0:
        raise ContractError("ctx_len must be >= 0")
    per_token = config.attn_heads * config.attn_d_head * 2 * dtype_bytes
    kv = config.n_sites * ctx_len * per_token
    ssm_state = config.n_mamba_layers * (
        config.ssm.n_heads * config.ssm_d_head * config.ssm.d_state
        + (config.ssm.conv_width - 1) * (config.d_inner + 2 * config.ssm.d_state)
    ) * dtype_bytes
    pure_layers = config.n_mamba_layers + config.n_sites
    pure = pure_layers * ctx_len * per_token
    pure_conv = config.n_mamba_layers * ctx_len * per_token

    def _ratio(num, den):
        if den:
            return num / den
        return float("nan") if num == 0 else float("inf")

    return {
        "kv_bytes": kv,
        "ssm_state_bytes": ssm_state,
        "total": kv + ssm_state,
        "pure_transformer_kv_bytes": pure,
        "ratio": _ratio(pure, kv),
        "pure_convention_kv_bytes": pure_conv,
        "ratio_convention": _ratio(pure_conv, kv) if kv else _ratio(config.n_mamba_layers, config.n_sites),
        "per_token_kv_bytes_hybrid": config.n_sites * per_token,
        "per_token_kv_bytes_pure": pure_layers * per_token,
    }


def model_dtype_name(model: nn.Module) -> str:
    return dtype_name(model.dtype)
