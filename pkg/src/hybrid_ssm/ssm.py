"""Mamba2-style selective state-space block.

Two execution paths compute the same function:

* ``parallel``: causal convolution over the whole segment followed by the
  chunked (matmul form) SSD scan. Used for training and prompt prefill.
* ``recurrent``: one token at a time against a fixed-size :class:`SsmState`.
  Used for autoregressive decoding.

The decay is a scalar per head (``A = -exp(A_log)``), discretized with a
zero-order hold on ``A`` and an Euler step on ``B``::

    h_t = exp(dt_t * A) * h_{t-1} + dt_t * outer(x_t, B_t)
    y_t = h_t @ C_t + D * x_t
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ContractError
from .numerics import causal_conv1d, rmsnorm, silu, softplus


@dataclass
class SsmState:
    """Recurrent state of one Mamba2 block; its size never depends on sequence length."""

    h: torch.Tensor  # [batch, n_heads, d_head, d_state]
    conv_tail: torch.Tensor  # [batch, conv_width - 1, conv_channels]

    @property
    def nbytes(self) -> int:
        return sum(t.element_size() * t.numel() for t in (self.h, self.conv_tail))

    def clone(self) -> "SsmState":
        return SsmState(self.h.clone(), self.conv_tail.clone())


def _check_dt(dt: torch.Tensor) -> None:
    if bool((dt <= 0).any()):
        raise ContractError("ssd scan: dt must be strictly positive")


def ssd_scan_sequential(x, dt, A, B, C, h0=None, D=None):
    """Reference recurrence, one step per position.

    Shapes: ``x [..., L, H, P]``, ``dt [..., L, H]``, ``A [H]``,
    ``B, C [..., L, H, N]`` (the head axis may be 1 to share across heads),
    ``h0 [..., H, P, N]``, ``D [H]``. Returns ``(y [..., L, H, P], hT)``.
    """
    _check_dt(dt)
    L, H, P = x.shape[-3:]
    N = B.shape[-1]
    h = h0 if h0 is not None else x.new_zeros(*x.shape[:-3], H, P, N)
    ys = []
    for t in range(L):
        decay = torch.exp(dt[..., t, :] * A)[..., None, None]
        inject = (dt[..., t, :, None] * x[..., t, :, :])[..., None] * B[..., t, :, None, :]
        h = decay * h + inject
        ys.append((h * C[..., t, :, None, :]).sum(-1))
    y = torch.stack(ys, dim=-3) if ys else x.new_zeros(x.shape)
    if D is not None:
        y = y + D[:, None] * x
    return y, h


def _segsum(a: torch.Tensor) -> torch.Tensor:
    """``out[..., i, j] = sum(a[..., j+1 : i+1])`` for ``j <= i``, ``-inf`` above the diagonal."""
    T = a.shape[-1]
    rep = a[..., :, None].expand(*a.shape, T)
    strict = torch.tril(torch.ones(T, T, dtype=torch.bool, device=a.device), diagonal=-1)
    out = torch.cumsum(rep.masked_fill(~strict, 0), dim=-2)
    lower = torch.tril(torch.ones(T, T, dtype=torch.bool, device=a.device))
    return out.masked_fill(~lower, float("-inf"))


def ssd_scan_chunked(x, dt, A, B, C, h0=None, D=None, chunk_len: int = 64):
    """Chunked SSD scan: quadratic (attention-like) form inside each chunk,
    linear state passing between chunks. Same contract as :func:`ssd_scan_sequential`."""
    if chunk_len < 1:
        raise ContractError("ssd_scan_chunked: chunk_len must be >= 1")
    _check_dt(dt)
    L, H, P = x.shape[-3:]
    N = B.shape[-1]
    batch = x.shape[:-3]
    h = h0 if h0 is not None else x.new_zeros(*batch, H, P, N)
    if L == 0:
        return x.new_zeros(x.shape), h

    T = min(chunk_len, L)
    nc = -(-L // T)
    pad = nc * T - L
    B = B.expand(*batch, L, H, N)
    C = C.expand(*batch, L, H, N)
    xdt = x * dt[..., None]
    a = dt * A
    if pad:
        # zero decay-exponent and zero input: padded steps leave the state untouched
        xdt = nn.functional.pad(xdt, (0, 0, 0, 0, 0, pad))
        a = nn.functional.pad(a, (0, 0, 0, pad))
        B = nn.functional.pad(B, (0, 0, 0, 0, 0, pad))
        C = nn.functional.pad(C, (0, 0, 0, 0, 0, pad))

    xdt = xdt.reshape(*batch, nc, T, H, P)
    Bc = B.reshape(*batch, nc, T, H, N)
    Cc = C.reshape(*batch, nc, T, H, N)
    a = a.reshape(*batch, nc, T, H).transpose(-1, -2)  # [..., nc, H, T]

    decay = torch.exp(_segsum(a))  # [..., nc, H, T(l), T(s)]
    scores = torch.einsum("...lhn,...shn->...hls", Cc, Bc) * decay
    y = torch.einsum("...hls,...shp->...lhp", scores, xdt)

    # state contributed by each chunk alone, then carried across chunks
    to_end = decay[..., -1, :]  # [..., nc, H, T]
    chunk_states = torch.einsum("...hs,...shn,...shp->...hpn", to_end, Bc, xdt)
    chunk_decay = torch.exp(a.sum(-1))  # [..., nc, H]
    starts = []
    for c in range(nc):
        starts.append(h)
        h = chunk_decay[..., c, :, None, None] * h + chunk_states[..., c, :, :, :]
    h_start = torch.stack(starts, dim=-4)  # [..., nc, H, P, N]

    from_start = torch.exp(torch.cumsum(a, dim=-1))  # [..., nc, H, T]
    y = y + torch.einsum("...lhn,...hpn,...hl->...lhp", Cc, h_start, from_start)

    y = y.reshape(*batch, nc * T, H, P)[..., :L, :, :]
    if D is not None:
        y = y + D[:, None] * x
    return y, h


class Mamba2Block(nn.Module):
    """in-proj -> causal conv + silu -> SSD scan -> silu(z) gate -> norm -> out-proj."""

    def __init__(
        self,
        d_model: int,
        n_heads: int = 4,
        d_head: int = 64,
        d_state: int = 64,
        conv_width: int = 4,
        chunk_len: int = 64,
        norm_eps: float = 1e-6,
    ):
        super().__init__()
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_head
        self.d_inner = n_heads * d_head
        self.d_state = d_state
        self.conv_width = conv_width
        self.conv_channels = self.d_inner + 2 * d_state
        self.chunk_len = chunk_len
        self.norm_eps = norm_eps

        self.in_proj = nn.Linear(d_model, self.d_inner + self.conv_channels, bias=False)
        self.dt_proj = nn.Linear(d_model, n_heads, bias=True)
        self.conv_weight = nn.Parameter(torch.empty(conv_width, self.conv_channels))
        self.conv_bias = nn.Parameter(torch.zeros(self.conv_channels))
        self.A_log = nn.Parameter(torch.empty(n_heads))
        self.D = nn.Parameter(torch.ones(n_heads))
        self.norm_weight = nn.Parameter(torch.ones(self.d_inner))
        self.out_proj = nn.Linear(self.d_inner, d_model, bias=False)
        self.reset_parameters()

    def reset_parameters(self, dt_min: float = 1e-3, dt_max: float = 1e-1) -> None:
        nn.init.normal_(self.in_proj.weight, std=self.d_model**-0.5)
        nn.init.normal_(self.out_proj.weight, std=self.d_inner**-0.5)
        nn.init.normal_(self.dt_proj.weight, std=0.02 * self.d_model**-0.5)
        bound = self.conv_width**-0.5
        nn.init.uniform_(self.conv_weight, -bound, bound)
        nn.init.zeros_(self.conv_bias)
        with torch.no_grad():
            # log-uniform initial dt; bias is the inverse softplus of it
            u = torch.rand(self.n_heads, dtype=torch.float64)
            dt0 = torch.exp(u * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
            self.dt_proj.bias.copy_(dt0 + torch.log(-torch.expm1(-dt0)))
            self.A_log.copy_(torch.log(torch.empty(self.n_heads).uniform_(1.0, 16.0)))
        nn.init.ones_(self.D)
        nn.init.ones_(self.norm_weight)

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def init_state(self, batch: int = 1, dtype: torch.dtype | None = None) -> SsmState:
        dtype = dtype or self.A_log.dtype
        device = self.A_log.device
        return SsmState(
            h=torch.zeros(batch, self.n_heads, self.d_head, self.d_state, dtype=dtype, device=device),
            conv_tail=torch.zeros(batch, self.conv_width - 1, self.conv_channels, dtype=dtype, device=device),
        )

    def state_bytes(self, dtype_bytes: int) -> int:
        return (
            self.n_heads * self.d_head * self.d_state + (self.conv_width - 1) * self.conv_channels
        ) * dtype_bytes

    def forward(
        self,
        u: torch.Tensor,
        state: SsmState | None = None,
        mode: str = "parallel",
    ) -> tuple[torch.Tensor, SsmState]:
        """``u`` is ``[batch, L, d_model]``. Returns the block output and the state after ``u``."""
        Bsz, L, _ = u.shape
        if mode == "recurrent":
            if state is None:
                raise ContractError("recurrent mode requires an SsmState")
            if L != 1:
                raise ContractError(f"recurrent mode consumes one token at a time, got L={L}")
        elif mode != "parallel":
            raise ContractError(f"unknown mode {mode!r}")

        zxbc = self.in_proj(u)
        z, xbc = zxbc.split([self.d_inner, self.conv_channels], dim=-1)
        dt = softplus(self.dt_proj(u))  # [B, L, H]

        tail = state.conv_tail if state is not None else None
        conv_out = silu(causal_conv1d(xbc, self.conv_weight, self.conv_bias, initial=tail))
        if tail is None:
            tail = xbc.new_zeros(Bsz, self.conv_width - 1, self.conv_channels)
        new_tail = torch.cat([tail, xbc], dim=1)[:, xbc.shape[1] :, :]

        x, Bm, Cm = conv_out.split([self.d_inner, self.d_state, self.d_state], dim=-1)
        x = x.reshape(Bsz, L, self.n_heads, self.d_head)
        Bm = Bm.unsqueeze(-2)  # one B/C group shared by all heads
        Cm = Cm.unsqueeze(-2)
        h0 = state.h if state is not None else None
        if mode == "recurrent":
            y, h = ssd_scan_sequential(x, dt, self.A, Bm, Cm, h0=h0, D=self.D)
        else:
            y, h = ssd_scan_chunked(x, dt, self.A, Bm, Cm, h0=h0, D=self.D, chunk_len=self.chunk_len)

        y = y.reshape(Bsz, L, self.d_inner)
        y = rmsnorm(y * silu(z), self.norm_weight, self.norm_eps)
        return self.out_proj(y), SsmState(h=h, conv_tail=new_tail)
