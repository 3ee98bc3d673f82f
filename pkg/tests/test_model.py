import copy

import pytest
import torch

from hybrid_ssm.errors import ConfigError, ContractError, InputError
from hybrid_ssm.model import (PRESETS, ModelConfig, analytic_cache_bytes, build_model, build_pure_baseline,
                              preset, shrink)

from conftest import small_config


def param_count_oracle(cfg):
    d, V, N = cfg.d_model, cfg.vocab_size, cfg.ssm.d_state
    di, H, w = cfg.d_inner, cfg.ssm.n_heads, cfg.ssm.conv_width
    ch = di + 2 * N
    mamba = d + d * (di + ch) + d * H + H + w * ch + ch + H + H + di + di * d
    ff = cfg.mlp_expansion * d
    block = 4 * d * d + 3 * d * ff + 2 * d
    dims = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "up": (d, ff), "gate": (d, ff), "down": (ff, d)}
    lora = sum(cfg.lora_rank * (dims[t][0] + dims[t][1]) for t in cfg.lora_targets)
    site = 2 * d * d + d * d + lora
    return 2 * V * d + d + cfg.n_mamba_layers * mamba + cfg.n_shared_blocks * block + cfg.n_sites * site


@pytest.mark.parametrize("name", PRESETS)
def test_parameter_count_matches_oracle(name):
    cfg = small_config(name)
    model = build_model(cfg)
    assert sum(p.numel() for p in model.parameters()) == param_count_oracle(cfg)


def test_default_preset_parameter_count():
    cfg = preset("tiny-7b-style")
    assert sum(p.numel() for p in build_model(cfg).parameters()) == param_count_oracle(cfg)


def test_preset_structure():
    one = preset("tiny-1p2b-style")
    two = preset("tiny-2p7b-style")
    seven = preset("tiny-7b-style")
    assert one.n_shared_blocks == 1 and {"q", "k", "v", "o"} <= set(one.lora_targets)
    assert two.n_shared_blocks == 2 and not two.rotary.enabled
    assert seven.n_shared_blocks == 2 and seven.rotary.enabled
    assert seven.n_mamba_layers // seven.n_sites == 6
    with pytest.raises(ConfigError):
        preset("huge")


def test_sites_alternate_shared_blocks_and_tie_weights():
    model = build_model(small_config(n_mamba_layers=8, attn_every=2))
    assert [s.block_id for s in model.sites] == [0, 1, 0, 1]
    assert sorted(model.site_after) == [1, 3, 5, 7]
    names = [n for n, _ in model.named_parameters() if ".q.weight" in n]
    assert len(names) == 2  # two shared blocks, stored once each


def test_config_validation_names_field():
    with pytest.raises(ConfigError) as e:
        small_config(attn_heads=5).validate()
    assert e.value.field == "attn_heads"
    with pytest.raises(ConfigError) as e:
        shrink(preset("tiny-7b-style"), n_shared_blocks=3).validate()
    assert e.value.field == "n_shared_blocks"
    with pytest.raises(ConfigError) as e:
        shrink(preset("tiny-7b-style"), lora_targets=["zz"]).validate()
    assert e.value.field == "lora_targets"
    with pytest.raises(ConfigError):
        shrink(preset("tiny-7b-style"), bogus=1)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_config_roundtrip_and_hash():
    cfg = small_config()
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.config_hash() == cfg.config_hash()
    assert shrink(cfg, d_model=64).config_hash() != cfg.config_hash()


def test_build_is_seed_deterministic():
    a = build_model(small_config(), seed=5)
    b = build_model(small_config(), seed=5)
    c = build_model(small_config(), seed=6)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    assert not torch.equal(a.embed.weight, c.embed.weight)


def test_forward_shapes_and_token_validation(small_cfg):
    model = build_model(small_cfg)
    assert model(torch.tensor([1, 2, 3])).shape == (3, small_cfg.vocab_size)
    assert model(torch.zeros(2, 4, dtype=torch.long)).shape == (2, 4, small_cfg.vocab_size)
    with pytest.raises(InputError):
        model(torch.tensor([small_cfg.vocab_size]))
    with pytest.raises(InputError):
        model(torch.tensor([0.5]))
    with pytest.raises(ContractError):
        model(torch.tensor([[1, 2]]), "recurrent", model.new_caches())


def test_model_is_causal(small_cfg64):
    model = build_model(small_cfg64)
    a = torch.randint(0, 256, (20,))
    b = a.clone()
    b[12:] = (b[12:] + 1) % 256
    with torch.no_grad():
        assert torch.equal(model(a)[:12], model(b)[:12])


def test_fresh_adapters_do_not_change_outputs(small_cfg64):
    model = build_model(small_cfg64)
    stripped = copy.deepcopy(model)
    for site in stripped.sites:
        site.loras.clear()
    x = torch.randint(0, 256, (1, 15))
    with torch.no_grad():
        assert torch.equal(model(x), stripped(x))


def untied_copy(model):
    ref = copy.deepcopy(model)
    ref.shared_blocks = torch.nn.ModuleList(copy.deepcopy(model.shared_blocks[s.block_id]) for s in model.sites)
    for j, site in enumerate(ref.sites):
        site.block_id = j
    return ref


def test_shared_block_gradient_is_sum_over_sites(small_cfg64):
    model = build_model(shrink(small_cfg64, n_mamba_layers=8, attn_every=2))
    with torch.no_grad():
        for site in model.sites:
            for ad in site.loras.values():
                ad.B.normal_(std=0.1)
    ref = untied_copy(model)
    x = torch.randint(0, 256, (2, 12))
    model(x).pow(2).mean().backward()
    ref(x).pow(2).mean().backward()
    for b, block in enumerate(model.shared_blocks):
        users = [j for j, s in enumerate(model.sites) if s.block_id == b]
        assert len(users) == 2
        for name, p in block.named_parameters():
            summed = sum(dict(ref.shared_blocks[j].named_parameters())[name].grad for j in users)
            assert torch.allclose(p.grad, summed, atol=1e-10, rtol=1e-5), name
    for s_tied, s_ref in zip(model.sites, ref.sites):
        for (n, p), (_, q) in zip(s_tied.named_parameters(), s_ref.named_parameters()):
            assert torch.allclose(p.grad, q.grad, atol=1e-10, rtol=1e-5), n


def test_pure_baseline_layer_count(small_cfg):
    pure = build_pure_baseline(small_cfg)
    assert len(pure.blocks) == small_cfg.n_mamba_layers + small_cfg.n_sites


def test_analytic_cache_bytes_closed_form():
    cfg = preset("tiny-7b-style")
    out = analytic_cache_bytes(cfg, 1000, 4)
    per_tok = 2 * cfg.d_model * 4
    assert out["kv_bytes"] == 2 * 1000 * per_tok
    assert out["pure_transformer_kv_bytes"] == 14 * 1000 * per_tok
    assert out["ratio"] == 7.0
    assert out["ratio_convention"] == 6.0
    with pytest.raises(ContractError):
        analytic_cache_bytes(cfg, -1, 4)


def test_measured_caches_match_analytic(small_cfg):
    model = build_model(small_cfg)
    caches = model.new_caches(1, 64)
    with torch.no_grad():
        model(torch.randint(0, 256, (1, 37)), "parallel", caches)
    ref = analytic_cache_bytes(small_cfg, 37, 4)
    assert caches.kv_bytes == ref["kv_bytes"]
    assert caches.ssm_bytes == ref["ssm_state_bytes"]


def test_set_rotary_rebuilds_angles(small_cfg):
    model = build_model(small_cfg)
    base = model._theta.clone()
    model.set_rotary(s=4.0)
    assert torch.allclose(model._theta, base / 4.0 ** (16 / 15))
    model.set_rotary(s=1.0)
    assert torch.equal(model._theta, base)
