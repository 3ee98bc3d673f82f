"""Benchmark harness: time-to-first-token, decode throughput and cache memory
versus context length, hybrid model against a layer-matched pure transformer.

Wall-clock columns depend on the host; the analytic memory columns are exact
and are cross-checked against the bytes actually held by the caches.
"""

from __future__ import annotations

import json
import os
import platform
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import stats

from .attention import SharedBlock
from .checkpoint import atomic_write_bytes
from .inference import decode_step, prefill
from .model import analytic_cache_bytes, model_dtype_name
from .ssm import Mamba2Block

TABLE_COLUMNS = ("context_len", "ttft_s", "tps", "kv_bytes_hybrid", "kv_bytes_pure", "ratio")


def environment() -> dict:
    return {
        "python": sys.version.split()[0],
        "torch": torch.__version__,
        "threads": torch.get_num_threads(),
        "cpu_count": os.cpu_count(),
        "host": platform.platform(),
        "processor": platform.processor() or platform.machine(),
    }


@dataclass
class BenchReport:
    rows: list[dict]
    environment: dict
    block_microbench: dict | None = None
    warnings: list[str] = field(default_factory=list)

    def to_jsonl(self, path) -> None:
        lines = [json.dumps({"type": "environment", **self.environment})]
        lines += [json.dumps({"type": "row", **r}) for r in self.rows]
        if self.block_microbench:
            lines.append(json.dumps({"type": "block_microbench", **self.block_microbench}))
        lines += [json.dumps({"type": "warning", "message": w}) for w in self.warnings]
        atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())

    def table(self) -> str:
        out = ["\t".join(TABLE_COLUMNS)]
        for r in self.rows:
            out.append("\t".join(str(r[c]) for c in TABLE_COLUMNS))
        return "\n".join(out) + "\n"


def _timed_run(model, prompt, gen_len, capacity):
    t0 = time.perf_counter()
    caches, logits = prefill(model, prompt, capacity)
    ttft = time.perf_counter() - t0
    kv_after_prefill = caches.kv_bytes
    ssm_bytes = caches.ssm_bytes
    tok = int(torch.argmax(logits))
    t0 = time.perf_counter()
    for _ in range(gen_len):
        tok = int(torch.argmax(decode_step(model, tok, caches)))
    elapsed = time.perf_counter() - t0
    tps = gen_len / elapsed if gen_len and elapsed > 0 else float("nan")
    return ttft, tps, kv_after_prefill, ssm_bytes, caches.total_bytes


def bench(model, pure_baseline, prompt_lens, gen_len: int = 16, repeats: int = 3, seed: int = 0,
          microbench_ctx: int | None = None) -> BenchReport:
    cfg = model.config
    dtype_bytes = model.dtype.itemsize
    env = {**environment(), "dtype": model_dtype_name(model), "repeats": repeats, "gen_len": gen_len,
           "hybrid_params": sum(p.numel() for p in model.parameters()),
           "pure_params": sum(p.numel() for p in pure_baseline.parameters())}
    gen = torch.Generator().manual_seed(seed)
    rows, warnings = [], []
    for L in prompt_lens:
        prompt = torch.randint(0, cfg.vocab_size, (L,), generator=gen)
        cap = L + gen_len + 1
        runs_h = [_timed_run(model, prompt, gen_len, cap) for _ in range(repeats)]
        runs_p = [_timed_run(pure_baseline, prompt, gen_len, cap) for _ in range(repeats)]
        analytic = analytic_cache_bytes(cfg, L, dtype_bytes)
        ttfts = [r[0] for r in runs_h]
        med = statistics.median(ttfts)
        if repeats > 1 and med > 0 and (max(ttfts) - min(ttfts)) / med > 0.5:
            warnings.append(f"context {L}: TTFT spread exceeds 50% of the median")
        rows.append({
            "context_len": L,
            "ttft_s": med,
            "tps": statistics.median(r[1] for r in runs_h),
            "ttft_s_pure": statistics.median(r[0] for r in runs_p),
            "tps_pure": statistics.median(r[1] for r in runs_p),
            "kv_bytes_hybrid": analytic["kv_bytes"],
            "kv_bytes_pure": analytic["pure_transformer_kv_bytes"],
            "ratio": analytic["ratio"],
            "ratio_convention": analytic["ratio_convention"],
            "ssm_state_bytes": analytic["ssm_state_bytes"],
            "measured_kv_bytes_hybrid": runs_h[0][2],
            "measured_kv_bytes_pure": runs_p[0][2],
            "measured_ssm_state_bytes": runs_h[0][3],
            "peak_cache_bytes_hybrid": max(r[4] for r in runs_h),
            "peak_cache_bytes_pure": max(r[4] for r in runs_p),
        })
    micro = block_microbench(cfg, microbench_ctx) if microbench_ctx else None
    return BenchReport(rows, env, micro, warnings)


@torch.no_grad()
def block_microbench(cfg, ctx_len: int = 4096, repeats: int = 3, seed: int = 0) -> dict:
    """Prefill throughput of one Mamba2 block versus one attention+MLP block at ``ctx_len``.

    Reported only; no threshold is applied.
    """
    torch.manual_seed(seed)
    mamba = Mamba2Block(cfg.d_model, cfg.ssm.n_heads, cfg.ssm_d_head, cfg.ssm.d_state, cfg.ssm.conv_width,
                        cfg.ssm.chunk_len)
    attn = SharedBlock(cfg.d_model, cfg.attn_heads, cfg.mlp_expansion)
    x = torch.randn(1, ctx_len, cfg.d_model)

    def best(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    t_m = best(lambda: mamba(x))
    t_a = best(lambda: attn(x))
    return {"ctx_len": ctx_len, "mamba2_tokens_per_s": ctx_len / t_m, "attention_tokens_per_s": ctx_len / t_a,
            "throughput_ratio": t_a / t_m}


@dataclass
class DecodeProfile:
    positions: list[int]
    step_seconds: list[float]
    bin_centers: list[float]
    bin_medians: list[float]
    slope: float  # seconds per position, fitted on bin medians
    intercept: float
    p_value: float
    mean_step: float
    relative_drift: float  # |slope| * span / mean step time

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("positions")
        d.pop("step_seconds")
        return d


@torch.no_grad()
def decode_cost_profile(model, n_positions: int = 4096, n_streams: int = 16, seed: int = 0) -> DecodeProfile:
    """Per-step decode time as a function of cache position, up to ``n_positions``.

    ``n_streams`` generation streams are prefilled to staggered offsets
    (stream ``j`` starts at ``j * n_positions / n_streams``) and then stepped
    round-robin, so every position bin is sampled at the same wall-clock
    moments. Each step time is divided by its round's mean, which removes
    host-wide speed drift; the slope is fitted on per-stream (= per-bin)
    medians rescaled to seconds.
    """
    span = n_positions // n_streams
    if span < 1:
        raise ValueError("n_positions must be >= n_streams")
    gen = torch.Generator().manual_seed(seed)
    tokens = torch.randint(0, model.config.vocab_size, (n_positions + 1,), generator=gen)
    streams = []
    for j in range(n_streams):
        start = max(1, j * span)
        caches, _ = prefill(model, tokens[:start], start + span + 1)
        streams.append(caches)
    for _ in range(4):  # warm-up, not recorded
        decode_step(model, 0, prefill(model, tokens[:1], 8)[0])

    raw = np.empty((span, n_streams))
    for r in range(span):
        for j, caches in enumerate(streams):
            tok = int(tokens[caches.position])
            t0 = time.perf_counter()
            decode_step(model, tok, caches)
            raw[r, j] = time.perf_counter() - t0
    positions = [max(1, j * span) + r for r in range(span) for j in range(n_streams)]
    mean_step = float(raw.mean())
    rel = raw / raw.mean(axis=1, keepdims=True)
    centers = [max(1, j * span) + (span - 1) / 2 for j in range(n_streams)]
    medians = list(np.median(rel, axis=0) * mean_step)
    fit = stats.linregress(centers, medians)
    width = centers[-1] - centers[0]
    return DecodeProfile(positions, list(raw.reshape(-1)), centers, [float(m) for m in medians],
                         float(fit.slope), float(fit.intercept), float(fit.pvalue), mean_step,
                         abs(float(fit.slope)) * width / mean_step)


def write_bench_outputs(report: BenchReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.to_jsonl(out / "bench.jsonl")
    atomic_write_bytes(out / "bench_table.tsv", report.table().encode())
    return out / "bench.jsonl", out / "bench_table.tsv"
