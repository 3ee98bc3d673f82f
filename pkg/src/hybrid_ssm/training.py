"""Two-phase pretraining protocol: cosine phase 1, re-warmed cosine anneal with
replay of phase-1 data, AdamW with global-norm clipping, and a doubling
context-length curriculum for long-context finetuning."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, NonFiniteLossError, ResumeError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- schedules

@dataclass
class Phase1Schedule:
    lr_max: float = 3e-3
    lr_min: float = 3e-4
    warmup_steps: int = 0
    total_steps: int = 1000
    warmup_start: float = 0.0


@dataclass
class AnnealSchedule:
    rewarm_steps: int = 0
    total_steps: int = 0
    lr_final: float | None = None  # default: phase-1 lr_max / 100
    rewarm_target: Union[str, float] = "midpoint"


@dataclass
class ScheduleConfig:
    phase1: Phase1Schedule = field(default_factory=Phase1Schedule)
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)

    def validate(self) -> "ScheduleConfig":
        p, a = self.phase1, self.anneal
        if p.total_steps < 0 or not 0 <= p.warmup_steps <= p.total_steps:
            raise ConfigError("schedule.phase1.warmup_steps", "need 0 <= warmup_steps <= total_steps")
        if not 0 <= a.rewarm_steps <= a.total_steps:
            raise ConfigError("schedule.anneal.rewarm_steps", "need 0 <= rewarm_steps <= total_steps")
        if p.lr_min > p.lr_max:
            raise ConfigError("schedule.phase1.lr_min", "must not exceed lr_max")
        if not (a.rewarm_target == "midpoint" or isinstance(a.rewarm_target, (int, float))):
            raise ConfigError("schedule.anneal.rewarm_target", "must be 'midpoint' or a number")
        return self

    @property
    def anneal_peak(self) -> float:
        if self.anneal.rewarm_target == "midpoint":
            return (self.phase1.lr_max + self.phase1.lr_min) / 2
        return float(self.anneal.rewarm_target)

    @property
    def lr_final(self) -> float:
        if self.anneal.total_steps == 0:
            return self.phase1.lr_min
        return self.anneal.lr_final if self.anneal.lr_final is not None else self.phase1.lr_max / 100

    @property
    def total_steps(self) -> int:
        return self.phase1.total_steps + self.anneal.total_steps


def _cosine(start: float, end: float, t: int, T: int) -> float:
    # weights written so both endpoints are attained exactly
    if T == 0:
        return end
    w = 0.5 * (1.0 + math.cos(math.pi * t / T))
    return w * start + (1.0 - w) * end


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Learning rate at ``step``; piecewise warmup / cosine / re-warm / cosine, clamped after the end."""
    if step < 0:
        raise ContractError("step must be >= 0")
    p, a = cfg.phase1, cfg.anneal
    if step < p.warmup_steps:
        return p.warmup_start + (p.lr_max - p.warmup_start) * step / p.warmup_steps
    if step <= p.total_steps:
        return _cosine(p.lr_max, p.lr_min, step - p.warmup_steps, p.total_steps - p.warmup_steps)
    t = step - p.total_steps
    if a.total_steps == 0:
        return cfg.lr_final
    if t <= a.rewarm_steps:
        return _cosine(cfg.anneal_peak, p.lr_min, a.rewarm_steps - t, a.rewarm_steps)
    if t <= a.total_steps:
        return _cosine(cfg.anneal_peak, cfg.lr_final, t - a.rewarm_steps, a.total_steps - a.rewarm_steps)
    return cfg.lr_final


@dataclass
class CurriculumConfig:
    start_len: int = 4096
    target_len: int = 65536
    double_every: int = 100

    def validate(self) -> "CurriculumConfig":
        if self.start_len < 1 or self.target_len < self.start_len:
            raise ConfigError("curriculum.target_len", "need 1 <= start_len <= target_len")
        if self.double_every < 1:
            raise ConfigError("curriculum.double_every", "must be >= 1")
        return self

    @property
    def steps_to_target(self) -> int:
        return math.ceil(math.log2(self.target_len / self.start_len)) * self.double_every


def curriculum_len(step: int, cfg: CurriculumConfig) -> int:
    doublings = step // cfg.double_every
    if doublings >= 64 or cfg.start_len << doublings >= cfg.target_len:
        return cfg.target_len
    return cfg.start_len << doublings


# ---------------------------------------------------------------- replay mixing

@dataclass
class MixerConfig:
    replay_fraction: float = 0.6
    seed: int = 0
    anneal_epochs: int | None = 2

    def validate(self) -> "MixerConfig":
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise ConfigError("mixer.replay_fraction", f"must lie in [0, 1], got {self.replay_fraction}")
        if self.anneal_epochs is not None and self.anneal_epochs < 1:
            raise ConfigError("mixer.anneal_epochs", "must be >= 1 or null")
        return self


@dataclass
class Batch:
    tokens: torch.Tensor
    provenance: str  # "phase1" | "anneal"
    epoch: int
    index: int
    loss_mask: torch.Tensor | None = None


class _Cursor:
    def __init__(self, items: Sequence, name: str):
        if not len(items):
            raise ContractError(f"{name} stream is empty")
        self.items, self.name = items, name
        self.index = 0
        self.epoch = 0

    def take(self) -> tuple[object, int, int]:
        if self.index == len(self.items):
            self.index = 0
            self.epoch += 1
            log.info("%s stream wrapped, starting epoch %d", self.name, self.epoch)
        item = self.items[self.index]
        out = (item, self.epoch, self.index)
        self.index += 1
        return out

    def exhausted(self, epochs: int) -> bool:
        return self.epoch >= epochs or (self.epoch == epochs - 1 and self.index == len(self.items))


def _as_batch(item, provenance, epoch, index) -> Batch:
    if isinstance(item, tuple):
        return Batch(item[0], provenance, epoch, index, item[1])
    return Batch(item, provenance, epoch, index)


class ReplayMixer:
    """Seeded stream interleaving phase-1 and anneal batches.

    Each draw comes from phase 1 with probability ``replay_fraction``. Both
    sources cycle; iteration stops once the anneal source has been consumed
    ``anneal_epochs`` times. :meth:`next_phase1` serves the pure phase-1
    portion of training from the same cursor, so replay continues where
    phase 1 left off.
    """

    def __init__(self, phase1: Sequence, anneal: Sequence, cfg: MixerConfig):
        self.cfg = cfg.validate()
        self.phase1 = _Cursor(phase1, "phase1")
        self.anneal = _Cursor(anneal, "anneal") if len(anneal) else None
        self.rng = np.random.default_rng(cfg.seed)

    def __iter__(self) -> Iterator[Batch]:
        return self

    def next_phase1(self) -> Batch:
        item, epoch, index = self.phase1.take()
        return _as_batch(item, "phase1", epoch, index)

    def __next__(self) -> Batch:
        if self.anneal is None:
            return self.next_phase1()
        if self.cfg.anneal_epochs is not None and self.anneal.exhausted(self.cfg.anneal_epochs):
            raise StopIteration
        if self.rng.random() < self.cfg.replay_fraction:
            return self.next_phase1()
        item, epoch, index = self.anneal.take()
        return _as_batch(item, "anneal", epoch, index)

    def state_dict(self) -> dict:
        st = {"rng": self.rng.bit_generator.state, "phase1": [self.phase1.index, self.phase1.epoch]}
        if self.anneal is not None:
            st["anneal"] = [self.anneal.index, self.anneal.epoch]
        return st

    def load_state_dict(self, st: dict) -> None:
        self.rng.bit_generator.state = st["rng"]
        self.phase1.index, self.phase1.epoch = st["phase1"]
        if self.anneal is not None:
            self.anneal.index, self.anneal.epoch = st["anneal"]


def replay_mix(phase1_stream: Sequence, anneal_stream: Sequence, cfg: MixerConfig) -> ReplayMixer:
    return ReplayMixer(phase1_stream, anneal_stream, cfg)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0


class OptimizerState:
    """AdamW over the model's unique parameters (tied tensors appear once).

    Matrices get decoupled weight decay; vectors (norms, biases, decay
    parameters) do not.
    """

    def __init__(self, model: nn.Module, cfg: AdamConfig | None = None):
        self.cfg = cfg or AdamConfig()
        self.names = [n for n, p in model.named_parameters() if p.requires_grad]
        params = dict(model.named_parameters())
        decay = [params[n] for n in self.names if params[n].dim() >= 2]
        no_decay = [params[n] for n in self.names if params[n].dim() < 2]
        self.params = [params[n] for n in self.names]
        self.opt = torch.optim.AdamW(
            [{"params": decay, "weight_decay": self.cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
            lr=0.0, betas=(self.cfg.beta1, self.cfg.beta2), eps=self.cfg.eps, foreach=False,
        )
        self.last_grad_norm: float | None = None

    @property
    def step_count(self) -> int:
        st = self.opt.state.get(self.params[0], {}) if self.params else {}
        return int(st["step"]) if "step" in st else 0

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, p in zip(self.names, self.params):
            st = self.opt.state.get(p)
            if st:
                out[f"{name}/exp_avg"] = st["exp_avg"]
                out[f"{name}/exp_avg_sq"] = st["exp_avg_sq"]
                out[f"{name}/step"] = torch.as_tensor(st["step"], dtype=torch.float64).reshape(1)
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        for name, p in zip(self.names, self.params):
            if f"{name}/exp_avg" in tensors:
                self.opt.state[p] = {
                    "step": tensors[f"{name}/step"].reshape(()).to(torch.float32).clone(),
                    "exp_avg": tensors[f"{name}/exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"{name}/exp_avg_sq"].clone(),
                }


def lm_loss(model: nn.Module, tokens: torch.Tensor, loss_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean next-token cross-entropy over ``tokens [B, T+1]``, optionally restricted by ``loss_mask``."""
    logits = model(tokens[:, :-1])
    per_tok = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1), reduction="none")
    if loss_mask is None:
        return per_tok.mean()
    m = loss_mask[:, 1:].reshape(-1).to(per_tok.dtype)
    return (per_tok * m).sum() / m.sum().clamp(min=1)


def train_step(model: nn.Module, batch, opt: OptimizerState, lr: float,
               loss_mask: torch.Tensor | None = None) -> float:
    """One AdamW update on next-token loss. Gradients are left in ``.grad`` for inspection."""
    if lr < 0:
        raise ContractError("lr must be >= 0")
    if isinstance(batch, Batch):
        batch, loss_mask = batch.tokens, batch.loss_mask if loss_mask is None else loss_mask
    if batch.dim() == 1:
        batch = batch[None]
    loss = lm_loss(model, batch, loss_mask)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss {loss.item()} at optimizer step {opt.step_count} (lr={lr}, batch shape "
            f"{tuple(batch.shape)}, max |param| {max(p.detach().abs().max().item() for p in opt.params):.3e})"
        )
    opt.opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.last_grad_norm = float(nn.utils.clip_grad_norm_(opt.params, opt.cfg.clip_norm))
    for group in opt.opt.param_groups:
        group["lr"] = lr
    opt.opt.step()
    return loss.item()


# ---------------------------------------------------------------- training loop

@dataclass
class TrainingPlan:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    mixer: MixerConfig = field(default_factory=MixerConfig)
    curriculum: CurriculumConfig | None = None
    optim: AdamConfig = field(default_factory=AdamConfig)
    steps: int | None = None  # default: both schedule phases
    seq_len: int | None = None  # crop length when no curriculum is set
    checkpoint_every: int | None = None
    seed: int = 0

    @property
    def total_steps(self) -> int:
        return self.steps if self.steps is not None else self.schedule.total_steps

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingPlan":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown training plan field")
        try:
            sched = d.pop("schedule", {}) or {}
            schedule = ScheduleConfig(Phase1Schedule(**sched.get("phase1", {})),
                                      AnnealSchedule(**sched.get("anneal", {})))
            mixer = MixerConfig(**(d.pop("mixer", {}) or {}))
            cur = d.pop("curriculum", None)
            curriculum = CurriculumConfig(**cur) if cur else None
            optim = AdamConfig(**(d.pop("optim", {}) or {}))
        except TypeError as e:
            raise ConfigError("plan", str(e)) from None
        return cls(schedule=schedule, mixer=mixer, curriculum=curriculum, optim=optim, **d).validate()

    def validate(self) -> "TrainingPlan":
        self.schedule.validate()
        self.mixer.validate()
        if self.curriculum is not None:
            self.curriculum.validate()
        if self.total_steps < 0:
            raise ConfigError("steps", "must be >= 0")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every", "must be >= 1")
        return self

    def fingerprint(self, model_config) -> str:
        blob = json.dumps({"plan": self.to_dict(), "model": model_config.to_dict()}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainingData:
    """Pre-tokenized batches ``[B, T+1]`` (optionally ``(tokens, loss_mask)`` pairs).

    ``materialize(batch, seq_len)`` turns a drawn batch into
    ``(tokens, loss_mask)`` at the current sequence length. The default crops;
    generated data (e.g. passkey samples, whose query sits at the end) can
    instead build items at the requested length from a stored seed.
    """

    phase1: Sequence
    anneal: Sequence = ()
    materialize: Callable[[Batch, int | None], tuple] | None = None


@dataclass
class TrainingResult:
    metrics: list[dict]
    checkpoints: list[Path]


def _seq_len(plan: TrainingPlan, step: int) -> int | None:
    if plan.curriculum is not None:
        return curriculum_len(step, plan.curriculum)
    return plan.seq_len


def _crop(t: torch.Tensor | None, seq_len: int | None):
    if t is None or seq_len is None:
        return t
    return t[..., : seq_len + 1]


def run_training(model: nn.Module, plan: TrainingPlan, data: TrainingData, out_dir=None,
                 resume: bool = False, stop_after: int | None = None) -> TrainingResult:
    """Train ``model`` in place according to ``plan``.

    Writes ``metrics.jsonl`` and ``ckpt_<step>.bin`` files into ``out_dir``
    when given. With ``resume=True`` the newest checkpoint in ``out_dir`` is
    loaded and training continues bit-identically; a checkpoint written under
    a different plan or model config is refused. ``stop_after`` ends the run
    early after that many total steps (used to simulate interruption).
    """
    plan.validate()
    out = Path(out_dir) if out_dir is not None else None
    fingerprint = plan.fingerprint(model.config)
    mixer = ReplayMixer(data.phase1, data.anneal, plan.mixer)
    opt = OptimizerState(model, plan.optim)
    metrics: list[dict] = []
    checkpoints: list[Path] = []
    start = 0

    if resume:
        if out is None:
            raise ResumeError("resume requires out_dir")
        ckpts = sorted(out.glob("ckpt_*.bin"))
        if not ckpts:
            raise ResumeError(f"no checkpoint to resume from in {out}")
        saved, extra, aux = load_checkpoint(ckpts[-1])
        if extra.get("fingerprint") != fingerprint:
            raise ResumeError(
                f"checkpoint {ckpts[-1].name} was written under plan/config {extra.get('fingerprint')}, "
                f"current is {fingerprint}"
            )
        model.load_state_dict(saved.state_dict())
        opt.load_state_tensors(aux)
        mixer.load_state_dict(extra["mixer"])
        start = extra["step"]
        if (out / "metrics.jsonl").exists():
            lines = (out / "metrics.jsonl").read_text().splitlines()
            metrics = [json.loads(x) for x in lines if json.loads(x)["step"] < start]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("".join(json.dumps(m) + "\n" for m in metrics))

    end = plan.total_steps if stop_after is None else min(plan.total_steps, stop_after)
    model.train()
    for step in range(start, end):
        if step < plan.schedule.phase1.total_steps or not len(data.anneal):
            batch = mixer.next_phase1()
        else:
            try:
                batch = next(mixer)
            except StopIteration:
                log.info("anneal data exhausted after %d epochs at step %d", plan.mixer.anneal_epochs, step)
                break
        seq_len = _seq_len(plan, step)
        lr = lr_at(step, plan.schedule)
        if data.materialize is not None:
            tokens, mask = data.materialize(batch, seq_len)
        else:
            tokens, mask = _crop(batch.tokens, seq_len), _crop(batch.loss_mask, seq_len)
        loss = train_step(model, tokens, opt, lr, mask)
        rec = {"step": step, "loss": loss, "lr": lr, "seq_len": int(tokens.shape[-1] - 1),
               "provenance": batch.provenance, "epoch": batch.epoch}
        metrics.append(rec)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as f:
                f.write(json.dumps(rec) + "\n")
            done = step + 1
            if plan.checkpoint_every and (done % plan.checkpoint_every == 0 or done == end):
                path = out / f"ckpt_{done:08d}.bin"
                save_checkpoint(path, model,
                                extra={"step": done, "fingerprint": fingerprint, "mixer": mixer.state_dict()},
                                aux=opt.state_tensors())
                checkpoints.append(path)
    model.eval()
    return TrainingResult(metrics, checkpoints)
