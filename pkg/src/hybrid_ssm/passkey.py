"""Passkey retrieval ("needle in a haystack") sample construction and evaluation.

A sample is ``total_len`` tokens of templated filler text with the needle
sentence ``"The pass key is <key>. "`` embedded at a given depth, followed by
the query ``"What is the pass key? The pass key is "``. The model must
continue the query with the key digits; scoring is exact match on the digits.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field

import torch

from . import tokenizer
from .errors import InputError

NEEDLE = "The pass key is {key}. "
QUERY = "What is the pass key? The pass key is "

_SUBJECTS = ["The grass", "The sky", "The sea", "The sun", "The stone", "The river", "The field", "The cloud",
             "The hill", "The road", "The leaf", "The wall"]
_VERBS = ["is", "looks", "seems", "was", "stays"]
_ADJECTIVES = ["green", "blue", "yellow", "quiet", "wide", "bright", "cold", "warm", "old", "calm", "grey", "tall"]
_CLOSERS = ["Here we go.", "There and back again.", "On and on it goes.", "Nothing more to say."]


def filler_text(n_bytes: int, seed: int) -> str:
    """Exactly ``n_bytes`` of seeded pseudo-natural sentences (no digits)."""
    rng = random.Random(seed)
    parts, size = [], 0
    while size < n_bytes:
        if rng.random() < 0.15:
            s = rng.choice(_CLOSERS) + " "
        else:
            s = f"{rng.choice(_SUBJECTS)} {rng.choice(_VERBS)} {rng.choice(_ADJECTIVES)}. "
        parts.append(s)
        size += len(s)
    return "".join(parts)[:n_bytes]


@dataclass
class PasskeySpec:
    total_len: int  # haystack tokens (filler + needle), the "token limit"
    depth_percent: float
    key: str
    filler_seed: int = 0


@dataclass
class PasskeySample:
    tokens: torch.Tensor  # haystack followed by the query
    answer: str
    needle_span: tuple[int, int]  # [start, end) of the needle sentence

    @property
    def answer_tokens(self) -> torch.Tensor:
        return tokenizer.encode_tensor(self.answer)


def needle_start(total_len: int, needle_len: int, depth_percent: float) -> int:
    free = total_len - needle_len
    return min(max(int(round(depth_percent / 100.0 * free)), 0), free)


def passkey_make(spec: PasskeySpec) -> PasskeySample:
    if not spec.key.isdigit():
        raise InputError("passkey must be a digit string")
    if not 0 <= spec.depth_percent <= 100:
        raise InputError("depth_percent must lie in [0, 100]")
    needle = tokenizer.encode(NEEDLE.format(key=spec.key))
    query = tokenizer.encode(QUERY)
    if spec.total_len < len(needle) + len(query):
        raise InputError(
            f"total_len={spec.total_len} too small for needle ({len(needle)}) + query ({len(query)})"
        )
    start = needle_start(spec.total_len, len(needle), spec.depth_percent)
    filler = tokenizer.encode(filler_text(spec.total_len - len(needle), spec.filler_seed))
    ids = filler[:start] + needle + filler[start:] + query
    return PasskeySample(torch.tensor(ids, dtype=torch.long), spec.key, (start, start + len(needle)))


def random_key(rng: random.Random, digits: int = 6) -> str:
    return "".join(rng.choice("0123456789") for _ in range(digits))


def training_batch(total_len: int, batch_size: int, seed: int, digits: int = 6) -> tuple[torch.Tensor, torch.Tensor]:
    """``(tokens [B, T+1], loss_mask)`` of passkey samples with the answer appended.

    The mask selects the answer digits only; depths are uniform in [0, 100].
    """
    rng = random.Random(seed)
    rows, masks = [], []
    for _ in range(batch_size):
        spec = PasskeySpec(total_len, rng.uniform(0, 100), random_key(rng, digits), rng.randrange(1 << 30))
        s = passkey_make(spec)
        seq = torch.cat([s.tokens, s.answer_tokens])
        mask = torch.zeros_like(seq, dtype=torch.bool)
        mask[-digits:] = True
        rows.append(seq)
        masks.append(mask)
    return torch.stack(rows), torch.stack(masks)


def recall_batch(total_len: int, batch_size: int, seed: int, n_digits: int = 16) -> tuple[torch.Tensor, torch.Tensor]:
    """Dense digit-recall pretraining data: ``[B, total_len]`` rows and loss masks.

    Each row hides a random digit string at a random offset in filler text and
    repeats it after a separator; every repeated digit is a target. This
    teaches content-addressed copying far faster than the sparse passkey
    answer alone.
    """
    rng = random.Random(seed)
    body = total_len - 2 * n_digits - 1
    if body < 0:
        raise InputError(f"total_len={total_len} too small for {n_digits} recall digits")
    rows, masks = [], []
    for _ in range(batch_size):
        digits = [rng.choice(b"0123456789") for _ in range(n_digits)]
        at = rng.randint(0, body)
        fill = tokenizer.encode(filler_text(body, rng.randrange(1 << 30)))
        rows.append(fill[:at] + digits + fill[at:] + [tokenizer.SEP] + digits)
        masks.append([False] * (total_len - n_digits) + [True] * n_digits)
    return torch.tensor(rows, dtype=torch.long), torch.tensor(masks)


def recall_pretrain(model, steps: int, total_len: int = 64, batch_size: int = 16, lr: float = 3e-3,
                    seed: int = 0) -> list[float]:
    """Train ``model`` in place on :func:`recall_batch` data; returns the loss trace."""
    from .training import AdamConfig, OptimizerState, train_step

    opt = OptimizerState(model, AdamConfig(weight_decay=0.0))
    model.train()
    losses = []
    for step in range(steps):
        tokens, mask = recall_batch(total_len, batch_size, seed * 1_000_003 + step)
        losses.append(train_step(model, tokens, opt, lr, mask))
    model.eval()
    return losses


def curriculum_data(n_batches: int, batch_size: int, seed: int = 0):
    """:class:`TrainingData` whose items are batch seeds materialized at the curriculum length."""
    from .training import TrainingData

    def materialize(batch, seq_len):
        return training_batch(seq_len, batch_size, seed * 1_000_003 + int(batch.tokens))

    return TrainingData(list(range(n_batches)), materialize=materialize)


class EchoStub:
    """Harness self-test: reads the key straight out of the prompt."""

    def answer(self, prompt: torch.Tensor, n_tokens: int) -> list[int]:
        m = re.search(r"The pass key is (\d+)\.", tokenizer.decode(prompt))
        return tokenizer.encode(m.group(1)[:n_tokens]) if m else []


class RandomStub:
    """Harness self-test: emits uniformly random byte tokens."""

    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)

    def answer(self, prompt: torch.Tensor, n_tokens: int) -> list[int]:
        return [self.rng.randrange(256) for _ in range(n_tokens)]


@dataclass
class PasskeyResult:
    rows: list[dict] = field(default_factory=list)  # {len, depth, accuracy, n}; accuracy None if skipped

    def accuracy(self, length: int, depth: float) -> float | None:
        for r in self.rows:
            if r["len"] == length and r["depth"] == depth:
                return r["accuracy"]
        raise KeyError((length, depth))

    def mean_accuracy(self, lengths) -> float:
        vals = [r["accuracy"] for r in self.rows if r["len"] in set(lengths) and r["accuracy"] is not None]
        return sum(vals) / len(vals) if vals else float("nan")

    def table(self) -> str:
        lines = ["len\tdepth\taccuracy"]
        for r in self.rows:
            acc = "skipped" if r["accuracy"] is None else f"{r['accuracy']:.4f}"
            lines.append(f"{r['len']}\t{r['depth']:g}\t{acc}")
        return "\n".join(lines) + "\n"


def _answerer(model):
    if hasattr(model, "answer"):
        return model.answer, None
    from .inference import generate

    def run(prompt, n_tokens):
        return generate(model, prompt, n_tokens, "greedy", capacity=prompt.numel() + n_tokens)

    return run, getattr(model.config, "max_seq_len", None)


def passkey_eval(model, lens, depths, samples_per_cell: int = 10, s_override: float | None = None,
                 seed: int = 0, digits: int = 6, max_len: int | None = None) -> PasskeyResult:
    """Accuracy for every ``(len, depth)`` cell of the grid.

    ``s_override`` rebuilds the model's rotary angles with that NTK scaling
    factor for the duration of the evaluation. Cells longer than ``max_len``
    are reported as skipped.
    """
    answer, _ = _answerer(model)
    restore = None
    if s_override is not None and hasattr(model, "set_rotary"):
        rot = model.config.rotary
        restore = (rot.s, rot.divisor_override)
        model.set_rotary(s=s_override)
    result = PasskeyResult()
    try:
        for L in lens:
            for d in depths:
                if max_len is not None and L > max_len:
                    result.rows.append({"len": L, "depth": d, "accuracy": None, "n": 0})
                    continue
                rng = random.Random(f"{seed}/{L}/{d}")
                hits = 0
                for _ in range(samples_per_cell):
                    spec = PasskeySpec(L, d, random_key(rng, digits), rng.randrange(1 << 30))
                    s = passkey_make(spec)
                    out = answer(s.tokens, digits)
                    hits += tokenizer.decode(out) == s.answer
                result.rows.append({"len": L, "depth": d, "accuracy": hits / samples_per_cell,
                                    "n": samples_per_cell})
    finally:
        if restore is not None:
            model.set_rotary(s=restore[0], divisor=restore[1])
    return result
