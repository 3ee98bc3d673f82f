"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that the terminal summary prints as
``[PASS]``/``[FAIL]`` with the measured numbers. Runtimes are recorded too.
"""

import copy
import math
import time

import pytest
import torch
from torch.func import functional_call

from hybrid_ssm.attention import ntk_rescale, rotary_angles, RotaryConfig
from hybrid_ssm.bench import decode_cost_profile
from hybrid_ssm.inference import decode_step, prefill
from hybrid_ssm.model import (PRESETS, analytic_cache_bytes, build_model, build_pure_baseline, preset, shrink)
from hybrid_ssm.numerics import (causal_conv1d, exp, grad_check, matmul, rmsnorm, silu, softmax_lastdim,
                                 softplus)
from hybrid_ssm.passkey import (EchoStub, RandomStub, curriculum_data, passkey_eval, recall_pretrain)
from hybrid_ssm.quantize import (PrecisionPolicy, qlora_finetune, quantize_model, quantize_tensor, role_audit)
from hybrid_ssm.ssm import ssd_scan_chunked, ssd_scan_sequential
from hybrid_ssm.training import (AdamConfig, AnnealSchedule, CurriculumConfig, MixerConfig, OptimizerState,
                                 Phase1Schedule, ReplayMixer, ScheduleConfig, TrainingPlan, curriculum_len,
                                 lr_at, run_training, train_step)

from conftest import small_config
from test_model import untied_copy
from test_ssm import random_scan_inputs, scalar_oracle
from test_training import _data, _plan

f64 = torch.float64


@pytest.fixture
def verdict(record_property):
    t0 = time.perf_counter()

    def record(number, title, ok, detail, budget_s):
        took = time.perf_counter() - t0
        ok = bool(ok) and took < budget_s
        line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail} ({took:.1f}s / {budget_s:g}s)"
        print(line)
        record_property("acceptance", line)
        assert ok, line

    return record


def _mini(name, dtype, **kw):
    base = dict(d_model=16, n_mamba_layers=4, attn_every=2, attn_heads=2, lora_rank=4,
                ssm={"n_heads": 2, "d_state": 4, "chunk_len": 8}, max_seq_len=256, dtype=dtype)
    base.update(kw)
    return preset(name, **base)


def _decode_deviation(model, tokens):
    with torch.no_grad():
        full = model(tokens)
    split = max(1, len(tokens) // 3)
    caches, last = prefill(model, tokens[:split], len(tokens))
    worst = (last - full[split - 1]).abs().max().item()
    for i in range(split, len(tokens)):
        out = decode_step(model, int(tokens[i]), caches)
        worst = max(worst, (out - full[i]).abs().max().item())
    return worst


def test_01_mode_equivalence(verdict):
    worst = {"f32": 0.0, "f64": 0.0}
    lengths = []
    for name in PRESETS:
        for dtype in ("f32", "f64"):
            cfg = _mini(name, dtype)
            for seed in range(50):
                model = build_model(cfg, seed).eval()
                g = torch.Generator().manual_seed(seed)
                with torch.no_grad():
                    for site in model.sites:
                        for ad in site.loras.values():
                            ad.B.normal_(0, 0.1, generator=g)
                L = 256 if seed < 2 else int(torch.randint(2, 49, (1,), generator=g))
                lengths.append(L)
                tokens = torch.randint(0, 256, (L,), generator=g)
                worst[dtype] = max(worst[dtype], _decode_deviation(model, tokens))
    ok = worst["f32"] < 1e-4 and worst["f64"] < 1e-9
    verdict(1, "parallel == prefill+decode", ok,
            f"{len(lengths)} runs, max L {max(lengths)}, f32 {worst['f32']:.2e} < 1e-4, "
            f"f64 {worst['f64']:.2e} < 1e-9", 120)


def test_02_scan_oracle_equivalence(verdict):
    worst = 0.0
    for L in (1, 2, 5, 16, 33, 64, 128):
        x, dt, A, B, C, D = random_scan_inputs(L, H=2, P=2, N=3, shared=L % 2 == 0, seed=L)
        ref = scalar_oracle(x, dt, A, B, C, D)
        seq, h_seq = ssd_scan_sequential(x, dt, A, B, C, D=D)
        worst = max(worst, (seq - ref).abs().max().item())
        for T in sorted({1, 2, 4, 16, L}):
            y, h = ssd_scan_chunked(x, dt, A, B, C, D=D, chunk_len=T)
            worst = max(worst, (y - ref).abs().max().item(), (h - h_seq).abs().max().item())
    verdict(2, "chunked == sequential == scalar oracle", worst < 1e-10, f"max dev {worst:.2e} < 1e-10", 30)


_PRIMITIVES = {
    "matmul": lambda t: matmul(t.view(3, 4), torch.linspace(-1, 1, 8, dtype=f64).view(4, 2)).pow(2).sum(),
    "rmsnorm": lambda t: (rmsnorm(t.view(3, 4), torch.linspace(0.5, 2, 4, dtype=f64))
                          * torch.arange(12, dtype=f64).view(3, 4)).sum(),
    "silu": lambda t: (silu(t) * torch.arange(12, dtype=f64)).sum(),
    "softplus": lambda t: (softplus(t) * torch.arange(12, dtype=f64)).sum(),
    "exp": lambda t: (exp(t) * torch.arange(12, dtype=f64)).sum(),
    "softmax": lambda t: (softmax_lastdim(t.view(3, 4)) * torch.arange(12, dtype=f64).view(3, 4)).sum(),
    "causal_conv": lambda t: (causal_conv1d(t.view(1, 6, 2), torch.tensor([[0.3, -0.2], [0.5, 0.1], [1.0, 0.7]],
                                                                           dtype=f64)) ** 2).sum(),
    "ssd_scan": lambda t: ssd_scan_chunked(
        t.view(6, 2, 1), torch.full((6, 2), 0.3, dtype=f64), torch.tensor([-1.0, -0.5], dtype=f64),
        torch.linspace(-1, 1, 12, dtype=f64).view(6, 1, 2), torch.linspace(1, -0.5, 12, dtype=f64).view(6, 1, 2),
        chunk_len=4)[0].pow(2).sum(),
}


def test_03_gradient_suite(verdict):
    theta = torch.randn(12, generator=torch.Generator().manual_seed(3), dtype=f64)
    prim = {name: grad_check(fn, theta) for name, fn in _PRIMITIVES.items()}

    model = build_model(_mini("tiny-1p2b-style", "f64", d_model=8, n_mamba_layers=2, attn_every=1,
                              lora_rank=2, max_seq_len=16), 0)
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for site in model.sites:
            for ad in site.loras.values():
                ad.B.normal_(0, 0.2, generator=g)
    names = [n for n, _ in model.named_parameters() if n not in ("embed.weight", "lm_head.weight")]
    params = dict(model.named_parameters())
    shapes = [params[n].shape for n in names]
    flat = torch.cat([params[n].detach().reshape(-1) for n in names])
    tokens = torch.randint(0, 256, (1, 7), generator=torch.Generator().manual_seed(0))

    def loss(vec):
        chunks, i = {}, 0
        for n, s in zip(names, shapes):
            k = math.prod(s)
            chunks[n] = vec[i:i + k].view(s)
            i += k
        logits = functional_call(model, chunks, (tokens[:, :-1],))
        return torch.nn.functional.cross_entropy(logits[0], tokens[0, 1:])

    # a larger step keeps roundoff below 1e-4 relative on the smallest (~1e-7) gradients
    e2e = grad_check(loss, flat, h=1e-4, atol=1e-7)
    worst_prim = max(prim.values())
    ok = worst_prim < 1e-5 and e2e < 1e-4
    verdict(3, "finite-difference gradients", ok,
            f"{len(prim)} primitives max {worst_prim:.1e} < 1e-5, model loss over {flat.numel()} params "
            f"{e2e:.1e} < 1e-4", 120)


def test_04_kv_cache_ratio(verdict):
    cfg = preset("tiny-7b-style")
    ratios = {analytic_cache_bytes(cfg, n, 4)["ratio_convention"] for n in (1, 512, 4096)}
    mismatches = []
    small = small_config("tiny-7b-style", n_mamba_layers=6, attn_every=3)
    model, pure = build_model(small), build_pure_baseline(small)
    for n in (1, 17, 64, 200):
        ref = analytic_cache_bytes(small, n, 4)
        tokens = torch.randint(0, 256, (1, n))
        hc, pc = model.new_caches(1, 256), pure.new_caches(1, 256)
        with torch.no_grad():
            model(tokens, "parallel", hc)
            pure(tokens, "parallel", pc)
        got = (hc.kv_bytes, hc.ssm_bytes, pc.kv_bytes)
        want = (ref["kv_bytes"], ref["ssm_state_bytes"], ref["pure_transformer_kv_bytes"])
        if got != want:
            mismatches.append((n, got, want))
    ok = ratios == {6.0} and not mismatches
    verdict(4, "KV cache ratio and measured bytes", ok,
            f"ratio_convention {sorted(ratios)} == 6.000, measured==analytic at 4 lengths "
            f"(mismatches: {mismatches or 'none'})", 10)


def test_05_constant_ssm_state(verdict):
    cfg = _mini("tiny-7b-style", "f32", d_model=8, n_mamba_layers=1, attn_every=2, max_seq_len=8)
    model = build_model(cfg).eval()
    assert model.config.n_sites == 0
    with torch.inference_mode():
        caches, _ = prefill(model, torch.tensor([1]), 8)
        at_1 = caches.ssm_bytes
        tok = 1
        while caches.position < 100_000:
            tok = int(decode_step(model, tok, caches).argmax())
        at_end = caches.ssm_bytes
    ok = at_1 == at_end and caches.position == 100_000
    verdict(5, "fixed-size SSM state", ok, f"{at_1} B at position 1, {at_end} B at position {caches.position}", 60)


def test_06_ntk_rescale(verdict):
    theta = rotary_angles(RotaryConfig(d_emb=64)).to(f64)
    out = ntk_rescale(theta, 16, 64)
    div = 16.0 ** (64.0 / 63.0)
    worst = max(abs(float(out[i]) - float(theta[i]) / div) for i in range(theta.numel()))
    same = ntk_rescale(theta, 1, 64)
    identity = torch.equal(same, theta) and same.dtype == theta.dtype
    verdict(6, "NTK rotary rescale", worst < 1e-12 and identity,
            f"s=16 max dev {worst:.1e} < 1e-12, s=1 bitwise identity {identity}", 1)


def test_07_schedule_endpoints(verdict):
    cfg = ScheduleConfig(Phase1Schedule(3e-3, 3e-4, 100, 1000), AnnealSchedule(50, 400))
    p = cfg.phase1
    got = [lr_at(p.warmup_steps, cfg), lr_at(p.total_steps, cfg),
           lr_at(p.total_steps + 50, cfg), lr_at(p.total_steps + 400, cfg)]
    want = [3e-3, 3e-4, (3e-3 + 3e-4) / 2, 3e-3 / 100]
    verdict(7, "schedule endpoints", got == want and cfg.anneal_peak == want[2],
            f"lr_max, lr_min, re-warm peak, lr_final = {got}", 1)


def test_08_replay_mixing(verdict):
    def draws(seed):
        mixer = ReplayMixer(range(1000), range(1000), MixerConfig(0.6, seed=seed, anneal_epochs=None))
        return [next(mixer).provenance for _ in range(10_000)]

    a, b = draws(7), draws(7)
    frac = a.count("phase1") / len(a)
    verdict(8, "replay mixing", 0.59 <= frac <= 0.61 and a == b,
            f"phase-1 fraction {frac:.4f} in [0.59, 0.61], deterministic {a == b}", 5)


def test_09_curriculum(verdict):
    lit = CurriculumConfig(4096, 65536, 100)
    got = [curriculum_len(s, lit) for s in (0, 100, 200, 300, 400)]
    desk = CurriculumConfig(64, 512, 60)
    closed = all(curriculum_len(s, desk) == min(64 * 2 ** (s // 60), 512) for s in range(1000))
    ok = got == [4096, 8192, 16384, 32768, 65536] and closed and desk.steps_to_target == 180
    verdict(9, "context curriculum", ok, f"literal {got}, desk closed form {closed}", 1)


def test_10_quantization_policy(verdict):
    cfg = small_config()
    q = quantize_model(build_model(cfg, 0))
    audit = role_audit(q)
    high = ("ssm.A_log", "ssm.dt_proj", "ssm.conv", "embedding", "unembedding", "norm")
    policy = PrecisionPolicy()
    low_roles = [r for r in audit if r in policy.quantize]
    audit_ok = all(audit[r] == "float32" for r in high) and low_roles and all(audit[r] == "int4" for r in low_roles)
    caches = q.new_caches(1, 16)
    with torch.no_grad():
        q(torch.randint(0, 256, (1, 5)), "parallel", caches)
    states_ok = all(s.h.dtype == torch.float32 and s.conv_tail.dtype == torch.float32 for s in caches.ssm_states)
    states_ok = states_ok and all(kv.k.dtype == torch.float32 for kv in caches.kv)

    g = torch.Generator().manual_seed(0)
    W = torch.randn(10_000, 64, generator=g, dtype=f64) * torch.rand(10_000, 1, generator=g, dtype=f64) * 4
    qt = quantize_tensor(W, 64)
    ratio = ((qt.dequantize(f64) - W).abs() / (qt.scales.to(f64)[:, None] / 2).clamp_min(1e-300)).max().item()

    frozen = {n: b.clone() for n, b in q.named_buffers()}
    batch = torch.randint(0, 256, (2, 33), generator=torch.Generator().manual_seed(1))
    res = qlora_finetune(q, ["up", "down"], batch, 200, lr=1e-2)
    codes_ok = all(torch.equal(frozen[n], b) for n, b in q.named_buffers())
    below = next((i for i, l in enumerate(res.losses) if l < 0.5 * res.losses[0]), None)
    ok = audit_ok and states_ok and ratio <= 1 + 1e-12 and codes_ok and below is not None
    verdict(10, "quantization policy and QLoRA", ok,
            f"audit ok {bool(audit_ok)}, states f32 {states_ok}, worst error/half-step {ratio:.4f}, "
            f"codes identical {codes_ok}, loss {res.losses[0]:.2f} -> <50% at step {below}", 180)


def test_11_lora_noop_and_tying(verdict):
    cfg = small_config(dtype="f64", n_mamba_layers=8, attn_every=2)
    model = build_model(cfg)
    stripped = copy.deepcopy(model)
    for site in stripped.sites:
        site.loras.clear()
    x = torch.randint(0, 256, (2, 12))
    with torch.no_grad():
        noop = torch.equal(model(x), stripped(x))
        for site in model.sites:
            for ad in site.loras.values():
                ad.B.normal_(std=0.1)
    ref = untied_copy(model)
    model(x).pow(2).mean().backward()
    ref(x).pow(2).mean().backward()
    worst = 0.0
    for b, block in enumerate(model.shared_blocks):
        users = [j for j, s in enumerate(model.sites) if s.block_id == b]
        for name, p in block.named_parameters():
            summed = sum(dict(ref.shared_blocks[j].named_parameters())[name].grad for j in users)
            worst = max(worst, ((p.grad - summed).abs() / summed.abs().clamp_min(1e-12)).max().item())
    verdict(11, "LoRA no-op and tied gradients", noop and worst < 1e-5,
            f"fresh adapters bitwise no-op {noop}, max rel grad dev {worst:.1e} < 1e-5", 60)


def test_12_trainer_smoke(verdict, tmp_path):
    model = build_model(preset("tiny-7b-style"), 0)
    batch = torch.randint(0, 256, (2, 65), generator=torch.Generator().manual_seed(0))
    opt = OptimizerState(model, AdamConfig(weight_decay=0.0))
    losses = []
    while len(losses) < 300 and (not losses or losses[-1] >= 0.1):
        losses.append(train_step(model, batch, opt, 3e-3))

    cfg = small_config(dtype="f64")
    full = run_training(build_model(cfg), _plan(), _data(), tmp_path / "a")
    run_training(build_model(cfg), _plan(), _data(), tmp_path / "b", stop_after=5)
    resumed = run_training(build_model(cfg), _plan(), _data(), tmp_path / "b", resume=True)
    bitwise = [m["loss"] for m in resumed.metrics] == [m["loss"] for m in full.metrics]
    ok = losses[-1] < 0.1 and bitwise
    verdict(12, "trainer smoke", ok,
            f"overfit {losses[0]:.2f} (ln V = {math.log(260):.2f}) -> {losses[-1]:.3f} in {len(losses)} steps, "
            f"resume bitwise {bitwise}", 180)


def test_13_passkey(verdict):
    lens, depths = [64, 128, 256, 512], [0, 25, 50, 75, 100]
    echo = passkey_eval(EchoStub(), lens, depths, 10).mean_accuracy(lens)
    rand = passkey_eval(RandomStub(0), lens, depths, 10).mean_accuracy(lens)

    cfg = preset("tiny-7b-style", d_model=64, n_mamba_layers=4, attn_every=2, attn_heads=4,
                 ssm={"n_heads": 2, "d_state": 16, "chunk_len": 64}, max_seq_len=4096)
    model = build_model(cfg, 0)
    recall_pretrain(model, 600)
    curr = CurriculumConfig(64, 512, 60)
    steps = curr.steps_to_target + 120
    plan = TrainingPlan(schedule=ScheduleConfig(Phase1Schedule(2e-3, 2e-4, 0, steps)), curriculum=curr,
                        optim=AdamConfig(weight_decay=0.0), steps=steps)
    run_training(model, plan, curriculum_data(steps, 8, 0))
    model.eval()

    in_window = passkey_eval(model, lens, depths, 8).mean_accuracy(lens)
    outside = passkey_eval(model, [1024, 2048], depths, 8).mean_accuracy([1024, 2048])
    rescaled = passkey_eval(model, [1024, 2048], depths, 8, s_override=16).mean_accuracy([1024, 2048])
    ok = echo == 1.0 and rand == 0.0 and in_window >= 0.9 and outside < in_window and rescaled >= outside
    verdict(13, "passkey retrieval", ok,
            f"echo {echo:.2f}, random {rand:.2f}, in-window {in_window:.3f} >= 0.9, out-of-window {outside:.3f}, "
            f"rescaled {rescaled:.3f}", 900)


def test_14_decode_cost_shape(verdict):
    cfg = preset("tiny-7b-style")
    ssm_only = build_model(shrink(cfg, attn_every=cfg.n_mamba_layers + 1), 0).eval()
    pure = build_pure_baseline(cfg, 0).eval()
    assert ssm_only.config.n_sites == 0
    flat = decode_cost_profile(ssm_only, 4096, 16)
    grow = decode_cost_profile(pure, 4096, 16)
    ok = flat.relative_drift < 0.05 and grow.slope > 0 and grow.p_value < 0.05
    verdict(14, "decode cost vs position", ok,
            f"SSM-only drift {flat.relative_drift:.4f} < 0.05 (p {flat.p_value:.2f}), "
            f"pure slope {grow.slope:.2e} s/pos > 0 (p {grow.p_value:.1e})", 600)
