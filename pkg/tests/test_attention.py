import math

import pytest
import torch

from hybrid_ssm.attention import (KvCache, LoraAdapter, RotaryConfig, SharedBlock, apply_rotary, causal_attention,
                                  effective_angles, lora_apply, ntk_divisor, ntk_rescale, rotary_angles,
                                  shared_block_forward)
from hybrid_ssm.errors import CapacityError, ConfigError, ContractError, DimensionError

f64 = torch.float64


def test_rotary_angles_formula():
    cfg = RotaryConfig(d_emb=16, base=10000.0)
    theta = rotary_angles(cfg)
    for d in range(8):
        assert theta[d].item() == pytest.approx(10000.0 ** (-2 * d / 16), rel=1e-15)


def test_ntk_rescale_scalar_oracle_and_identity():
    theta = rotary_angles(RotaryConfig(d_emb=64))
    out = ntk_rescale(theta, 16.0, 64)
    div = 16.0 ** (64 / 63)
    for i in range(theta.numel()):
        assert abs(out[i].item() - theta[i].item() / div) <= 1e-12 * max(1.0, theta[i].item())
    assert torch.equal(ntk_rescale(theta, 1.0, 64), theta)
    assert ntk_divisor(2.0, 4) == pytest.approx(2 ** (4 / 3))
    assert torch.equal(ntk_rescale(theta, 16.0, 64, divisor=4.0), theta / 4.0)
    with pytest.raises(ConfigError):
        ntk_rescale(theta, 0.5, 64)


def test_effective_angles_disabled_and_validation():
    assert effective_angles(RotaryConfig(enabled=False)) is None
    with pytest.raises(ConfigError):
        RotaryConfig(d_emb=7).validate()


def test_rotary_preserves_norm_and_is_relative():
    g = torch.Generator().manual_seed(0)
    theta = rotary_angles(RotaryConfig(d_emb=8))
    q = torch.randn(1, 1, 1, 8, generator=g, dtype=f64)
    k = torch.randn(1, 1, 1, 8, generator=g, dtype=f64)

    def score(m, n):
        qm = apply_rotary(q, torch.tensor([m]), theta)
        kn = apply_rotary(k, torch.tensor([n]), theta)
        return (qm * kn).sum().item()

    assert score(7, 3) == pytest.approx(score(104, 100), abs=1e-12)
    rq = apply_rotary(q, torch.tensor([13]), theta)
    assert rq.norm().item() == pytest.approx(q.norm().item(), abs=1e-13)
    assert torch.allclose(apply_rotary(q, torch.tensor([0]), theta), q)
    with pytest.raises(DimensionError):
        apply_rotary(q, torch.tensor([0]), theta[:2])


def test_fresh_lora_is_exact_noop_and_delta_formula():
    torch.manual_seed(0)
    W = torch.randn(5, 4, dtype=f64)
    ad = LoraAdapter("up", 4, 5, r=2, alpha=8).double()
    x = torch.randn(3, 4, dtype=f64)
    assert torch.equal(lora_apply(W, ad, x), x @ W.t())
    with torch.no_grad():
        ad.B.normal_()
    assert ad.scaling == 4.0
    assert torch.allclose(ad.delta_weight(), 4.0 * ad.B @ ad.A)
    assert torch.allclose(lora_apply(W, ad, x), x @ (W + ad.delta_weight()).t(), atol=1e-12)


def test_lora_errors():
    ad = LoraAdapter("up", 4, 5, r=2)
    with pytest.raises(ContractError):
        lora_apply(torch.zeros(5, 4), ad, torch.zeros(1, 4), role="down")
    with pytest.raises(DimensionError):
        lora_apply(torch.zeros(4, 4), ad, torch.zeros(1, 4))
    with pytest.raises(ConfigError):
        LoraAdapter("nope", 4, 5)
    with pytest.raises(ConfigError):
        LoraAdapter("up", 4, 5, r=0)


def test_kv_cache_accounting_and_capacity():
    c = KvCache(1, 5, 2, 4, f64)
    assert c.nbytes == 0
    assert c.reserved_bytes == 2 * 5 * 2 * 4 * 8
    c.append(torch.zeros(1, 3, 2, 4, dtype=f64), torch.zeros(1, 3, 2, 4, dtype=f64))
    assert c.nbytes == 2 * 3 * 2 * 4 * 8
    with pytest.raises(CapacityError):
        c.append(torch.zeros(1, 3, 2, 4, dtype=f64), torch.zeros(1, 3, 2, 4, dtype=f64))
    assert c.length == 3


def test_causal_attention_matches_loop():
    g = torch.Generator().manual_seed(1)
    q = torch.randn(1, 4, 1, 3, generator=g, dtype=f64)
    k = torch.randn(1, 4, 1, 3, generator=g, dtype=f64)
    v = torch.randn(1, 4, 1, 3, generator=g, dtype=f64)
    pos = torch.arange(4)
    out, w = causal_attention(q, k, v, pos, pos)
    for i in range(4):
        s = [float((q[0, i, 0] * k[0, j, 0]).sum()) / math.sqrt(3) for j in range(i + 1)]
        m = max(s)
        e = [math.exp(x - m) for x in s]
        z = sum(e)
        ref = sum(e[j] / z * v[0, j, 0] for j in range(i + 1))
        assert torch.allclose(out[0, i, 0], ref, atol=1e-12)
    assert w[0, 0, 0, 1:].abs().max() == 0


def test_shared_block_cached_decode_equals_parallel():
    torch.manual_seed(2)
    blk = SharedBlock(8, 2).double()
    theta = rotary_angles(RotaryConfig(d_emb=4))
    x = torch.randn(1, 9, 8, dtype=f64)
    full = blk(x, theta=theta)
    cache = KvCache(1, 9, 2, 4, f64)
    parts = [blk(x[:, :5], theta=theta, cache=cache)]
    for t in range(5, 9):
        parts.append(blk(x[:, t:t + 1], theta=theta, cache=cache))
    assert torch.allclose(torch.cat(parts, 1), full, atol=1e-12)


def test_shared_block_rejects_bad_positions():
    blk = SharedBlock(8, 2)
    cache = KvCache(1, 4, 2, 4)
    with pytest.raises(ContractError):
        blk(torch.randn(1, 1, 8), positions=torch.tensor([3]), cache=cache)


def test_shared_block_forward_applies_site_loras():
    torch.manual_seed(3)
    blk = SharedBlock(8, 2).double()
    ad = LoraAdapter("down", 32, 8, r=2).double()
    x = torch.randn(1, 3, 8, dtype=f64)
    rot = RotaryConfig(d_emb=4)
    base = shared_block_forward(x, blk, {}, rot)
    assert torch.equal(shared_block_forward(x, blk, {"down": ad}, rot), base)
    with torch.no_grad():
        ad.B.fill_(0.1)
    assert not torch.allclose(shared_block_forward(x, blk, [ad], rot), base)
