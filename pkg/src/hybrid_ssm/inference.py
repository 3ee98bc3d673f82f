"""Generation engine: parallel prefill, constant-state recurrent decode, sampling."""

from __future__ import annotations

import time
from typing import Callable

import torch
from torch import nn

from .errors import CapacityError, ContractError, InputError
from .model import InferenceCaches

__all__ = ["InferenceCaches", "prefill", "decode_step", "generate", "parse_sampler"]


def _as_prompt(tokens) -> torch.Tensor:
    t = torch.as_tensor(tokens, dtype=torch.long)
    if t.dim() != 1:
        raise InputError("prompt must be a 1-D sequence of token ids")
    return t


@torch.no_grad()
def prefill(model: nn.Module, prompt_tokens, capacity: int | None = None) -> tuple[InferenceCaches, torch.Tensor]:
    """Run the prompt in parallel mode, leaving every cache at the final position."""
    prompt = _as_prompt(prompt_tokens)
    if prompt.numel() == 0:
        raise InputError("prompt must be non-empty")
    cap = model.config.max_seq_len if capacity is None else capacity
    if prompt.numel() > cap:
        raise CapacityError(f"prompt of {prompt.numel()} tokens exceeds cache capacity {cap}")
    caches = model.new_caches(1, cap)
    logits = model(prompt[None], "parallel", caches)
    return caches, logits[0, -1]


@torch.no_grad()
def decode_step(model: nn.Module, token: int, caches: InferenceCaches) -> torch.Tensor:
    """Advance every cache by one token and return that position's logits."""
    if caches is None:
        raise ContractError("decode_step requires initialized caches")
    if caches.kv and caches.position >= caches.kv[0].capacity:
        raise CapacityError(f"cache capacity {caches.kv[0].capacity} reached")
    x = torch.tensor([[int(token)]], dtype=torch.long)
    return model(x, "recurrent", caches)[0, -1]


def parse_sampler(spec: str) -> Callable[[torch.Tensor, torch.Generator], int]:
    """``"greedy"``, ``"temperature:<tau>"`` or ``"top_k:<k>[:<tau>]"``."""
    kind, _, arg = spec.partition(":")
    if kind == "greedy":
        return lambda logits, gen: int(torch.argmax(logits))
    if kind == "temperature":
        tau = float(arg)
        if tau <= 0:
            raise ContractError("temperature must be > 0")

        def sample(logits, gen):
            probs = torch.softmax(logits.double() / tau, -1)
            return int(torch.multinomial(probs, 1, generator=gen))

        return sample
    if kind == "top_k":
        k_str, _, tau_str = arg.partition(":")
        k, tau = int(k_str), float(tau_str or 1.0)
        if k < 1 or tau <= 0:
            raise ContractError("top_k needs k >= 1 and tau > 0")

        def sample(logits, gen):
            vals, idx = torch.topk(logits.double(), min(k, logits.numel()))
            probs = torch.softmax(vals / tau, -1)
            return int(idx[torch.multinomial(probs, 1, generator=gen)])

        return sample
    raise ContractError(f"unknown sampler {spec!r}")


def generate(
    model: nn.Module,
    prompt,
    n_tokens: int,
    sampler: str = "greedy",
    seed: int = 0,
    capacity: int | None = None,
    timings: list[float] | None = None,
) -> list[int]:
    """Prefill ``prompt`` then sample ``n_tokens`` continuation tokens.

    When ``timings`` is a list, the prefill latency and each decode step's wall
    time are appended to it; the generated tokens do not depend on it.
    """
    if n_tokens < 0:
        raise ContractError("n_tokens must be >= 0")
    if n_tokens == 0:
        return []
    pick = parse_sampler(sampler)
    gen = torch.Generator().manual_seed(seed)
    prompt = _as_prompt(prompt)
    cap = capacity if capacity is not None else max(model.config.max_seq_len, prompt.numel() + n_tokens)
    t0 = time.perf_counter()
    caches, logits = prefill(model, prompt, cap)
    if timings is not None:
        timings.append(time.perf_counter() - t0)
    out = [pick(logits, gen)]
    for _ in range(n_tokens - 1):
        t0 = time.perf_counter()
        logits = decode_step(model, out[-1], caches)
        if timings is not None:
            timings.append(time.perf_counter() - t0)
        out.append(pick(logits, gen))
    return out
