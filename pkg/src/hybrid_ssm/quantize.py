"""4-bit block quantization with an SSM-aware precision policy, plus QLoRA-style finetuning.

Weights are split into blocks of ``block_size`` elements. Each block stores one
f16 scale ``absmax / 7`` and integer codes in ``[-7, 7]`` (``-8`` is never
used, so the grid is symmetric), packed two per byte as ``code + 8``, low
nibble first. Dequantization is ``code * scale``; the round-trip error of any
element is at most half a step, ``scale / 2``.
"""

from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .attention import LoraAdapter
from .errors import ContractError, InvariantViolation, PolicyError

SCHEME = "symmetric-int4"
QMAX = 7


@dataclass
class QuantizedTensor:
    codes: torch.Tensor  # uint8, ceil(numel / 2) bytes
    scales: torch.Tensor  # float16, one per block
    shape: tuple[int, ...]
    block_size: int
    scheme: str = SCHEME

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.codes.numel() * self.codes.element_size() + self.scales.numel() * self.scales.element_size()

    def int_codes(self) -> torch.Tensor:
        lo = (self.codes & 0x0F).to(torch.int16)
        hi = (self.codes >> 4).to(torch.int16)
        return (torch.stack([lo, hi], dim=1).reshape(-1)[: self.numel] - 8).to(torch.int8)

    def dequantize(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        n, bs = self.numel, self.block_size
        codes = self.int_codes().to(torch.float64)
        codes = F.pad(codes, (0, self.scales.numel() * bs - n)).view(-1, bs)
        out = codes * self.scales.to(torch.float64)[:, None]
        return out.reshape(-1)[:n].reshape(self.shape).to(dtype)


def quantize_tensor(W: torch.Tensor, block_size: int = 64) -> QuantizedTensor:
    if block_size < 1:
        raise ContractError("block_size must be >= 1")
    flat = W.detach().reshape(-1).to(torch.float64)
    n = flat.numel()
    nblocks = -(-n // block_size)
    blocks = F.pad(flat, (0, nblocks * block_size - n)).view(nblocks, block_size)
    absmax = blocks.abs().amax(dim=1)
    scales = (absmax / QMAX).to(torch.float16)
    if not bool(torch.isfinite(scales).all()):
        raise ContractError("quantize_tensor: block absmax overflows the f16 scale range")
    s = scales.to(torch.float64)[:, None]
    safe = torch.where(s > 0, s, torch.ones_like(s))
    codes = torch.where(s > 0, torch.round(blocks / safe).clamp(-QMAX, QMAX), torch.zeros_like(blocks))
    codes = codes.reshape(-1)[:n].to(torch.int16) + 8
    if n % 2:
        codes = torch.cat([codes, codes.new_full((1,), 8)])
    packed = (codes[0::2] | (codes[1::2] << 4)).to(torch.uint8)
    return QuantizedTensor(packed, scales, tuple(W.shape), block_size)


def dequantize(q: QuantizedTensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return q.dequantize(dtype)


class QuantLinear(nn.Module):
    """Frozen 4-bit linear map, dequantized on use."""

    def __init__(self, in_features: int, out_features: int, block_size: int, bias: torch.Tensor | None = None,
                 scheme: str = SCHEME):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.block_size, self.scheme = block_size, scheme
        n = in_features * out_features
        self.register_buffer("codes", torch.zeros(-(-n // 2), dtype=torch.uint8))
        self.register_buffer("scales", torch.zeros(-(-n // block_size), dtype=torch.float16))
        self.bias = nn.Parameter(bias.detach().clone(), requires_grad=False) if bias is not None else None
        self._cache: tuple[torch.dtype, torch.Tensor] | None = None

    @classmethod
    def from_linear(cls, lin: nn.Linear, block_size: int) -> "QuantLinear":
        q = quantize_tensor(lin.weight, block_size)
        mod = cls(lin.in_features, lin.out_features, block_size, lin.bias)
        mod.codes.copy_(q.codes)
        mod.scales.copy_(q.scales)
        return mod

    @property
    def qtensor(self) -> QuantizedTensor:
        return QuantizedTensor(self.codes, self.scales, (self.out_features, self.in_features), self.block_size,
                               self.scheme)

    def weight_dequantized(self, dtype: torch.dtype) -> torch.Tensor:
        # codes are frozen, so the dequantized matrix can be memoized per dtype
        if self._cache is None or self._cache[0] != dtype:
            self._cache = (dtype, self.qtensor.dequantize(dtype))
        return self._cache[1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight_dequantized(x.dtype), self.bias)

    def _load_from_state_dict(self, *args, **kwargs):
        self._cache = None
        super()._load_from_state_dict(*args, **kwargs)

    def extra_repr(self) -> str:
        return f"in={self.in_features}, out={self.out_features}, block_size={self.block_size}, {self.scheme}"


class QuantLoraAdapter(nn.Module):
    """LoRA adapter whose ``A`` and ``B`` factors are stored as 4-bit codes."""

    def __init__(self, target: str, d_in: int, d_out: int, r: int, alpha: float, block_size: int):
        super().__init__()
        self.target, self.d_in, self.d_out, self.r, self.alpha = target, d_in, d_out, r, alpha
        self.block_size = block_size
        for name, n in (("A", r * d_in), ("B", d_out * r)):
            self.register_buffer(f"{name}_codes", torch.zeros(-(-n // 2), dtype=torch.uint8))
            self.register_buffer(f"{name}_scales", torch.zeros(-(-n // block_size), dtype=torch.float16))

    @classmethod
    def from_adapter(cls, ad: LoraAdapter, block_size: int) -> "QuantLoraAdapter":
        mod = cls(ad.target, ad.d_in, ad.d_out, ad.r, ad.alpha, block_size)
        for name in ("A", "B"):
            q = quantize_tensor(getattr(ad, name), block_size)
            getattr(mod, f"{name}_codes").copy_(q.codes)
            getattr(mod, f"{name}_scales").copy_(q.scales)
        return mod

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def factor(self, name: str, dtype=torch.float32) -> torch.Tensor:
        shape = (self.r, self.d_in) if name == "A" else (self.d_out, self.r)
        q = QuantizedTensor(getattr(self, f"{name}_codes"), getattr(self, f"{name}_scales"), shape, self.block_size)
        return q.dequantize(dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        A, B = self.factor("A", x.dtype), self.factor("B", x.dtype)
        return ((x @ A.t()) @ B.t()) * self.scaling


# ---------------------------------------------------------------- roles

STATE_ROLES = frozenset({"state.ssm", "state.conv", "state.kv"})

_ROLE_RULES = [
    (r"^embed\.weight$", "embedding"),
    (r"^lm_head\.", "unembedding"),
    (r"\.(loras|task_loras)\.", "lora"),
    (r"\.mixer\.in_proj\.", "ssm.in_proj"),
    (r"\.mixer\.out_proj\.", "ssm.out_proj"),
    (r"\.mixer\.dt_proj\.", "ssm.dt_proj"),
    (r"\.mixer\.A_log$", "ssm.A_log"),
    (r"\.mixer\.D$", "ssm.D"),
    (r"\.mixer\.conv_(weight|bias)$", "ssm.conv"),
    (r"(norm|norm_weight|attn_norm|mlp_norm)$", "norm"),
    (r"^sites\.\d+\.in_proj\.", "site.in_proj"),
    (r"^sites\.\d+\.out_proj\.", "site.out_proj"),
    (r"\.(q|k|v|o)\.(weight|codes|scales|bias)$", "attn.{0}"),
    (r"\.(up|gate|down)\.(weight|codes|scales|bias)$", "mlp.{0}"),
]


def role_of(name: str) -> str:
    """Role of a parameter or buffer by its qualified name inside a hybrid model."""
    for pattern, role in _ROLE_RULES:
        m = re.search(pattern, name)
        if m:
            return role.format(*m.groups()) if "{0}" in role else role
    raise PolicyError(f"parameter {name!r} has no known role")


def tensor_roles(model: nn.Module) -> dict[str, str]:
    names = [n for n, _ in model.named_parameters()] + [n for n, _ in model.named_buffers()]
    return {n: role_of(n) for n in names}


@dataclass
class PrecisionPolicy:
    quantize: frozenset = field(default_factory=lambda: frozenset({
        "ssm.in_proj", "ssm.out_proj", "site.in_proj", "site.out_proj",
        "attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.gate", "mlp.down",
    }))
    keep_high_precision: frozenset = field(default_factory=lambda: frozenset({
        "embedding", "unembedding", "ssm.A_log", "ssm.dt_proj", "ssm.conv", "ssm.D", "norm", "lora",
    }) | STATE_ROLES)

    def validate(self, roles: Iterable[str] = ()) -> None:
        overlap = set(self.quantize) & set(self.keep_high_precision)
        if overlap:
            raise PolicyError(f"roles in both sets: {sorted(overlap)}")
        if set(self.quantize) & STATE_ROLES:
            raise PolicyError("runtime states can never be quantized")
        if not STATE_ROLES <= set(self.keep_high_precision):
            raise PolicyError("runtime states must be listed as high precision")
        missing = set(roles) - set(self.quantize) - set(self.keep_high_precision)
        if missing:
            raise PolicyError(f"roles not covered by policy: {sorted(missing)}")


def _replace_module(root: nn.Module, qualname: str, new: nn.Module) -> None:
    parent_name, _, attr = qualname.rpartition(".")
    parent = root.get_submodule(parent_name) if parent_name else root
    setattr(parent, attr, new)


def quantize_model(model: nn.Module, policy: PrecisionPolicy | None = None, block_size: int = 64) -> nn.Module:
    """Copy of ``model`` with every linear in a quantized role replaced by a :class:`QuantLinear`."""
    policy = policy or PrecisionPolicy()
    policy.validate(tensor_roles(model).values())
    qmodel = copy.deepcopy(model)
    targets = [
        name for name, mod in qmodel.named_modules()
        if isinstance(mod, nn.Linear) and role_of(f"{name}.weight") in policy.quantize
    ]
    for name in targets:
        _replace_module(qmodel, name, QuantLinear.from_linear(qmodel.get_submodule(name), block_size))
    qmodel.quantization = {"block_size": block_size, "scheme": SCHEME, "modules": targets}
    return qmodel


def role_audit(model: nn.Module) -> dict[str, str]:
    """``{role: "int4" | dtype-name}``; a role mixing precisions is an invariant violation."""
    out: dict[str, str] = {}
    for name, t in list(model.named_parameters()) + list(model.named_buffers()):
        role = role_of(name)
        kind = "int4" if name.endswith(("codes", "scales")) else str(t.dtype).replace("torch.", "")
        if role in out and out[role] != kind and "int4" in (kind, out[role]):
            raise InvariantViolation(f"role {role} mixes quantized and unquantized tensors")
        out[role] = kind
    return out


def footprint(model: nn.Module) -> dict:
    """Exact storage bytes of every parameter and buffer, grouped by role."""
    by_role: dict[str, int] = {}
    for name, t in list(model.named_parameters()) + list(model.named_buffers()):
        role = role_of(name)
        by_role[role] = by_role.get(role, 0) + t.numel() * t.element_size()
    return {"bytes_by_role": by_role, "total": sum(by_role.values())}


# ---------------------------------------------------------------- adapters

def quantize_adapters(adapters: Iterable[nn.Module], block_size: int = 64) -> list[QuantLoraAdapter]:
    return [QuantLoraAdapter.from_adapter(ad, block_size) for ad in adapters]


def quantize_model_adapters(model: nn.Module, block_size: int = 64) -> nn.Module:
    """In-place: swap every float adapter on every site for its 4-bit counterpart."""
    for site in model.sites:
        for group in (site.loras, site.task_loras):
            for key in list(group.keys()):
                if isinstance(group[key], LoraAdapter):
                    group[key] = QuantLoraAdapter.from_adapter(group[key], block_size)
    return model


def _frozen_snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    snap = {}
    for name, t in list(model.named_parameters()) + list(model.named_buffers()):
        if ".task_loras." not in name:
            snap[name] = t.detach().clone()
    return snap


@dataclass
class QloraResult:
    adapters: list[LoraAdapter]
    losses: list[float]


def qlora_finetune(
    qmodel: nn.Module,
    lora_targets: Sequence[str],
    dataset: Sequence[torch.Tensor] | torch.Tensor,
    steps: int,
    lr: float = 1e-2,
    r: int = 16,
    alpha: float = 32.0,
    seed: int = 0,
) -> QloraResult:
    """Attach fresh adapters for ``lora_targets`` at every site and train only them.

    ``dataset`` holds token batches ``[batch, T + 1]`` used in rotation for
    next-token prediction. Everything except the new adapters is frozen; a
    mutation of any frozen tensor raises :class:`InvariantViolation`.
    """
    batches = [dataset] if isinstance(dataset, torch.Tensor) else list(dataset)
    if not batches:
        raise ContractError("qlora_finetune: empty dataset")
    for p in qmodel.parameters():
        p.requires_grad_(False)
    adapters = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for site in qmodel.sites:
            block = qmodel.shared_blocks[site.block_id]
            for t in lora_targets:
                if t in site.task_loras:
                    raise ContractError(f"site {site.index} already has a task adapter for {t!r}")
                d_in, d_out = block.dims(t)
                ad = LoraAdapter(t, d_in, d_out, r, alpha).to(qmodel.dtype)
                site.task_loras[t] = ad
                adapters.append(ad)
    snapshot = _frozen_snapshot(qmodel)

    params = [p for ad in adapters for p in ad.parameters()]
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.0)
    losses = []
    for step in range(steps):
        batch = batches[step % len(batches)]
        logits = qmodel(batch[:, :-1])
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())

    for name, t in list(qmodel.named_parameters()) + list(qmodel.named_buffers()):
        if name in snapshot and not torch.equal(snapshot[name], t.detach()):
            raise InvariantViolation(f"frozen tensor {name} changed during adapter training")
    return QloraResult(adapters, losses)


@torch.no_grad()
def next_token_kl(model: nn.Module, qmodel: nn.Module, prompts: Sequence[torch.Tensor]) -> list[float]:
    """KL(full || quantized) of the next-token distribution after each prompt."""
    out = []
    for p in prompts:
        lp = torch.log_softmax(model(p)[-1].double(), -1)
        lq = torch.log_softmax(qmodel(p)[-1].double(), -1)
        out.append(float((lp.exp() * (lp - lq)).sum()))
    return out
