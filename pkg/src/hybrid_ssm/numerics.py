"""Dense tensor primitives and a finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects and reverse-mode differentiation is
torch autograd. This module only adds the shape contracts the rest of the
package relies on, the handful of primitives the model is written in terms of,
and :func:`grad_check`, which compares autograd against central differences.
"""

from __future__ import annotations

from typing import Callable

import torch

from .errors import ContractError, DimensionError

DTYPES = {
    "f64": torch.float64,
    "f32": torch.float32,
    # stored in half precision, computed in f32; used for quantization scales only
    "f16": torch.float16,
}


def resolve_dtype(dtype: str | torch.dtype) -> torch.dtype:
    if isinstance(dtype, torch.dtype):
        return dtype
    try:
        return DTYPES[dtype]
    except KeyError:
        raise ContractError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}") from None


def dtype_name(dtype: torch.dtype) -> str:
    for name, dt in DTYPES.items():
        if dt == dtype:
            return name
    raise ContractError(f"unsupported dtype {dtype}")


def f16_compute(t: torch.Tensor) -> torch.Tensor:
    """Upcast an f16-stored tensor for arithmetic."""
    return t.to(torch.float32) if t.dtype == torch.float16 else t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul: inner dims disagree, {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def rmsnorm(x: torch.Tensor, weight: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(f"rmsnorm: last dim {x.shape[-1]} != weight dim {weight.shape[-1]}")
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * weight


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    # log(1 + e^x) without overflow for large x
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-x.abs()))


def exp(x: torch.Tensor) -> torch.Tensor:
    return torch.exp(x)


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    shifted = x - x.amax(-1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(-1, keepdim=True)


def causal_conv1d(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    initial: torch.Tensor | None = None,
) -> torch.Tensor:
    """Depthwise causal convolution along the sequence axis.

    ``x`` is ``[..., L, d]`` and ``kernel`` is ``[w, d]``; output position ``t``
    sees ``x[t-w+1 .. t]`` with ``kernel[-1]`` applied to ``x[t]``. The left
    context is ``w-1`` zeros unless ``initial`` (``[..., w-1, d]``, the tail of
    a previous segment) is given.
    """
    w, d = kernel.shape
    if w < 1:
        raise ContractError("causal_conv1d: kernel width must be >= 1")
    if x.shape[-1] != d:
        raise DimensionError(f"causal_conv1d: channels {x.shape[-1]} != kernel channels {d}")
    L = x.shape[-2]
    if initial is None:
        initial = x.new_zeros(*x.shape[:-2], w - 1, d)
    elif initial.shape[-2:] != (w - 1, d):
        raise DimensionError(f"causal_conv1d: initial tail must be [..., {w - 1}, {d}]")
    padded = torch.cat([initial.expand(*x.shape[:-2], w - 1, d), x], dim=-2)
    out = padded[..., 0:L, :] * kernel[0]
    for j in range(1, w):
        out = out + padded[..., j : j + L, :] * kernel[j]
    if bias is not None:
        out = out + bias
    return out


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    theta: torch.Tensor,
    h: float = 1e-6,
    atol: float = 1e-9,
) -> float:
    """Max relative error between autograd and central differences of ``f`` at ``theta``.

    The per-element error is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, atol)``, so
    elements whose true gradient is (numerically) zero are judged absolutely.
    """
    theta = theta.detach().clone().requires_grad_(True)
    out = f(theta)
    if not isinstance(out, torch.Tensor) or out.numel() != 1:
        raise ContractError("grad_check: f must return a scalar tensor")
    (g_ad,) = torch.autograd.grad(out, theta, allow_unused=True)
    if g_ad is None:
        g_ad = torch.zeros_like(theta)
    g_ad = g_ad.detach().reshape(-1)

    base = theta.detach().clone().reshape(-1)
    g_fd = torch.empty_like(base)
    with torch.no_grad():
        for i in range(base.numel()):
            orig = base[i].item()
            base[i] = orig + h
            fp = f(base.view_as(theta)).item()
            base[i] = orig - h
            fm = f(base.view_as(theta)).item()
            base[i] = orig
            g_fd[i] = (fp - fm) / (2 * h)

    denom = torch.maximum(torch.maximum(g_ad.abs(), g_fd.abs()), torch.full_like(g_ad, atol))
    return float(((g_ad - g_fd).abs() / denom).max()) if base.numel() else 0.0
