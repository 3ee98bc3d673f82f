"""Command-line entry point: ``hybrid-ssm <command> [--config run.yaml] [flags]``.

Every command writes into ``--out`` (a directory) and leaves a
``resolved_config.yaml`` there with all defaults expanded, so a run can be
repeated from that file alone. Flags given on the command line override
values from ``--config``.

Exit codes: 0 success, 1 config or contract error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
import yaml

from . import tokenizer
from .checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .errors import ConfigError, HybridSSMError
from .model import PRESETS, build_model, build_pure_baseline, preset, shrink

log = logging.getLogger("hybrid_ssm")

MODEL_FLAGS = {"preset": "tiny-7b-style", "model": None, "model_overrides": None, "seed": 0}

DEFAULTS: dict[str, dict] = {
    "build": {**MODEL_FLAGS},
    "train": {**MODEL_FLAGS, "data": None, "anneal_data": None, "plan": None, "batch_size": 4, "seq_len": 256,
              "checkpoint_every": None, "resume": False},
    "extend-context": {**MODEL_FLAGS, "task": "passkey", "data": None, "start_len": 64, "target_len": 512,
                       "double_every": 100, "steps": None, "batch_size": 8, "lr": 1e-3, "checkpoint_every": None,
                       "recall_steps": 0},
    "generate": {**MODEL_FLAGS, "prompt": "", "n_tokens": 64, "sampler": "greedy"},
    "bench": {**MODEL_FLAGS, "lens": [128, 512, 1024], "gen_len": 16, "repeats": 3, "microbench_ctx": None,
              "decode_profile": False, "profile_positions": 4096},
    "quantize": {**MODEL_FLAGS, "block_size": 64},
    "qlora": {**MODEL_FLAGS, "data": None, "steps": 200, "lr": 1e-2, "rank": 16, "alpha": 32.0,
              "targets": ["up", "down"], "seq_len": 64, "batch_size": 4},
    "passkey": {**MODEL_FLAGS, "stub": None, "lens": [64, 128, 256], "depths": [0, 50, 100], "samples": 10,
                "s_override": None, "digits": 6},
}


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybrid-ssm", description="Hybrid Mamba2 / shared-attention language model tools")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", type=Path, help="YAML file with flag values")
        c.add_argument("--out", type=Path, required=True, help="output directory")
        c.add_argument("--preset", choices=PRESETS)
        c.add_argument("--model", type=Path, help="checkpoint to start from instead of a preset")
        c.add_argument("--seed", type=int)
        return c

    command("build", "initialize a model and write its checkpoint")

    c = command("train", "two-phase training on byte-tokenized text files")
    c.add_argument("--data", type=Path, help="phase-1 text file")
    c.add_argument("--anneal-data", type=Path, help="anneal-phase text file")
    c.add_argument("--plan", type=Path, help="YAML training plan")
    c.add_argument("--batch-size", type=int)
    c.add_argument("--seq-len", type=int)
    c.add_argument("--checkpoint-every", type=int, help="save a resumable checkpoint every N steps")
    c.add_argument("--resume", action="store_true", default=None)

    c = command("extend-context", "curriculum finetune with doubling sequence length")
    c.add_argument("--task", choices=("passkey", "text"))
    c.add_argument("--data", type=Path, help="text file when --task text")
    c.add_argument("--start-len", type=int)
    c.add_argument("--target-len", type=int)
    c.add_argument("--double-every", type=int)
    c.add_argument("--steps", type=int)
    c.add_argument("--batch-size", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--checkpoint-every", type=int)
    c.add_argument("--recall-steps", type=int, help="digit-recall warm-up steps before the passkey curriculum")

    c = command("generate", "sample a continuation of a prompt")
    c.add_argument("--prompt")
    c.add_argument("--n-tokens", type=int)
    c.add_argument("--sampler", help="greedy | temperature:T | top_k:K[:T]")

    c = command("bench", "TTFT / throughput / cache-memory table against a pure transformer")
    c.add_argument("--lens", type=_int_list)
    c.add_argument("--gen-len", type=int)
    c.add_argument("--repeats", type=int)
    c.add_argument("--microbench-ctx", type=int)
    c.add_argument("--decode-profile", action="store_true", default=None)
    c.add_argument("--profile-positions", type=int)

    c = command("quantize", "4-bit blockwise quantization of the linear layers")
    c.add_argument("--block-size", type=int)

    c = command("qlora", "train LoRA adapters on a quantized model")
    c.add_argument("--data", type=Path)
    c.add_argument("--steps", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--rank", type=int)
    c.add_argument("--alpha", type=float)
    c.add_argument("--seq-len", type=int)
    c.add_argument("--batch-size", type=int)

    c = command("passkey", "passkey retrieval accuracy over a (len, depth) grid")
    c.add_argument("--stub", choices=("echo", "random"), help="harness self-test instead of a model")
    c.add_argument("--lens", type=_int_list)
    c.add_argument("--depths", type=_int_list)
    c.add_argument("--samples", type=int)
    c.add_argument("--s-override", type=float)
    c.add_argument("--digits", type=int)
    return p


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config is not None:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError("config", f"cannot read {args.config}: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config", "top level must be a mapping")
        for key, val in loaded.items():
            k = key.replace("-", "_")
            if k not in cfg:
                raise ConfigError(key, f"unknown option for '{command}'")
            cfg[k] = val
    for key, val in vars(args).items():
        if key in cfg and val is not None:
            cfg[key] = str(val) if isinstance(val, Path) else val
    return cfg


# ---------------------------------------------------------------- helpers

def _load_model(cfg: dict):
    if cfg["model"]:
        model, _, _ = load_checkpoint(cfg["model"])
        return model
    mc = preset(cfg["preset"])
    if cfg["model_overrides"]:
        if not isinstance(cfg["model_overrides"], dict):
            raise ConfigError("model_overrides", "must be a mapping of model config fields")
        mc = shrink(mc, **cfg["model_overrides"])
    return build_model(mc.validate(), cfg["seed"])


def _text_batches(path, seq_len: int, batch_size: int, field: str) -> list[torch.Tensor]:
    if not path:
        raise ConfigError(field, "a data file is required")
    ids = tokenizer.encode(Path(path).read_text(encoding="utf-8"))
    rows = [ids[i:i + seq_len + 1] for i in range(0, len(ids) - seq_len, seq_len)]
    if len(rows) < batch_size:
        raise ConfigError(field, f"{path} holds fewer than {batch_size} sequences of {seq_len + 1} tokens")
    t = torch.tensor(rows[: len(rows) // batch_size * batch_size], dtype=torch.long)
    return list(t.view(-1, batch_size, seq_len + 1))


def _write_table(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


# ---------------------------------------------------------------- commands

def cmd_build(cfg, out):
    model = _load_model(cfg)
    save_checkpoint(out / "model.ckpt", model)
    n = sum(p.numel() for p in model.parameters())
    print(f"built {n} parameters -> {out / 'model.ckpt'}")


def cmd_train(cfg, out):
    from .training import TrainingData, TrainingPlan, run_training

    plan_dict = {}
    if cfg["plan"]:
        plan_dict = yaml.safe_load(Path(cfg["plan"]).read_text()) or {}
    if cfg["checkpoint_every"] is not None:
        plan_dict["checkpoint_every"] = cfg["checkpoint_every"]
    plan = TrainingPlan.from_dict({**plan_dict, "seed": cfg["seed"]})
    model = _load_model(cfg)
    torch.manual_seed(plan.seed)
    phase1 = _text_batches(cfg["data"], cfg["seq_len"], cfg["batch_size"], "data")
    anneal = _text_batches(cfg["anneal_data"], cfg["seq_len"], cfg["batch_size"], "anneal_data") \
        if cfg["anneal_data"] else []
    cfg["plan_resolved"] = plan.to_dict()
    res = run_training(model, plan, TrainingData(phase1, anneal), out, resume=bool(cfg["resume"]))
    save_checkpoint(out / "model.ckpt", model)
    if res.metrics:
        print(f"trained {len(res.metrics)} steps, final loss {res.metrics[-1]['loss']:.4f}")


def cmd_extend_context(cfg, out):
    from .training import (AdamConfig, CurriculumConfig, Phase1Schedule, ScheduleConfig, TrainingPlan,
                           run_training)

    cur = CurriculumConfig(cfg["start_len"], cfg["target_len"], cfg["double_every"]).validate()
    steps = cfg["steps"] if cfg["steps"] is not None else cur.steps_to_target + cfg["double_every"]
    plan = TrainingPlan(schedule=ScheduleConfig(Phase1Schedule(cfg["lr"], cfg["lr"] / 10, 0, steps)),
                        curriculum=cur, optim=AdamConfig(weight_decay=0.0), steps=steps,
                        checkpoint_every=cfg["checkpoint_every"], seed=cfg["seed"])
    model = _load_model(cfg)
    if model.config.max_seq_len < cfg["target_len"]:
        raise ConfigError("target_len", f"exceeds model max_seq_len {model.config.max_seq_len}")
    if cfg["task"] == "passkey":
        from .passkey import curriculum_data, recall_pretrain
        if cfg["recall_steps"]:
            losses = recall_pretrain(model, cfg["recall_steps"], seed=cfg["seed"])
            print(f"recall warm-up: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
        data = curriculum_data(steps, cfg["batch_size"], cfg["seed"])
    else:
        from .training import TrainingData
        data = TrainingData(_text_batches(cfg["data"], cfg["target_len"], cfg["batch_size"], "data"))
    res = run_training(model, plan, data, out)
    save_checkpoint(out / "model.ckpt", model)
    print(f"curriculum finetune: {len(res.metrics)} steps, lengths "
          f"{sorted({m['seq_len'] for m in res.metrics})}, final loss {res.metrics[-1]['loss']:.4f}")


def cmd_generate(cfg, out):
    from .inference import generate

    model = _load_model(cfg)
    prompt = tokenizer.encode(cfg["prompt"]) or [tokenizer.BOS]
    ids = generate(model, prompt, cfg["n_tokens"], cfg["sampler"], seed=cfg["seed"],
                   capacity=len(prompt) + cfg["n_tokens"])
    atomic_write_bytes(out / "generated.txt", tokenizer.decode(ids).encode())
    atomic_write_bytes(out / "generated_ids.json", json.dumps(ids).encode())
    print(tokenizer.decode(ids))


def cmd_bench(cfg, out):
    from .bench import bench, decode_cost_profile, write_bench_outputs

    model = _load_model(cfg).eval()
    pure = build_pure_baseline(model.config, cfg["seed"]).eval()
    if max(cfg["lens"]) + cfg["gen_len"] + 1 > model.config.max_seq_len:
        raise ConfigError("lens", f"longest context plus gen_len exceeds max_seq_len {model.config.max_seq_len}")
    report = bench(model, pure, cfg["lens"], cfg["gen_len"], cfg["repeats"], cfg["seed"], cfg["microbench_ctx"])
    write_bench_outputs(report, out)
    if cfg["decode_profile"]:
        profiles = {
            "ssm_only": decode_cost_profile(build_model(shrink(model.config, attn_every=model.config.n_mamba_layers + 1),
                                                        cfg["seed"]).eval(), cfg["profile_positions"]),
            "pure_transformer": decode_cost_profile(pure, cfg["profile_positions"]),
        }
        atomic_write_bytes(out / "decode_profile.json",
                           json.dumps({k: v.to_dict() for k, v in profiles.items()}, indent=2).encode())
    print(report.table(), end="")
    for w in report.warnings:
        print("warning:", w, file=sys.stderr)


def cmd_quantize(cfg, out):
    from .quantize import footprint, quantize_model, role_audit

    model = _load_model(cfg)
    before = footprint(model)
    q = quantize_model(model, block_size=cfg["block_size"])
    save_checkpoint(out / "model.ckpt", q)
    after = footprint(q)
    report = {"role_audit": role_audit(q), "bytes_before": before["total"], "bytes_after": after["total"],
              "bytes_by_role": after["bytes_by_role"]}
    atomic_write_bytes(out / "quantization.json", json.dumps(report, indent=2).encode())
    print(f"{before['total']} -> {after['total']} bytes")


def cmd_qlora(cfg, out):
    from .quantize import qlora_finetune, quantize_model

    model = _load_model(cfg)
    if getattr(model, "quantization", None) is None:
        model = quantize_model(model)
    data = _text_batches(cfg["data"], cfg["seq_len"], cfg["batch_size"], "data")
    res = qlora_finetune(model, cfg["targets"], torch.cat(data), cfg["steps"], cfg["lr"], cfg["rank"],
                         cfg["alpha"], cfg["seed"])
    lines = "".join(json.dumps({"step": i, "loss": l}) + "\n" for i, l in enumerate(res.losses))
    atomic_write_bytes(out / "metrics.jsonl", lines.encode())
    save_checkpoint(out / "model.ckpt", model)
    print(f"qlora: loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}")


def cmd_passkey(cfg, out):
    from .passkey import EchoStub, RandomStub, passkey_eval

    if cfg["stub"] == "echo":
        model, max_len = EchoStub(), None
    elif cfg["stub"] == "random":
        model, max_len = RandomStub(cfg["seed"]), None
    elif cfg["stub"] is None:
        model = _load_model(cfg).eval()
        max_len = model.config.max_seq_len
    else:
        raise ConfigError("stub", "must be 'echo' or 'random'")
    res = passkey_eval(model, cfg["lens"], cfg["depths"], cfg["samples"], cfg["s_override"], cfg["seed"],
                       cfg["digits"], max_len)
    _write_table(out / "passkey_accuracy.tsv", res.table())
    print(res.table(), end="")


COMMANDS = {
    "build": cmd_build, "train": cmd_train, "extend-context": cmd_extend_context, "generate": cmd_generate,
    "bench": cmd_bench, "quantize": cmd_quantize, "qlora": cmd_qlora, "passkey": cmd_passkey,
}


def run(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(cfg["seed"])
        COMMANDS[args.command](cfg, out)
        atomic_write_bytes(out / "resolved_config.yaml",
                           yaml.safe_dump({"command": args.command, **cfg}, sort_keys=True).encode())
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (HybridSSMError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
