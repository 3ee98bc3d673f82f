"""scikit-learn style wrappers around the language model and the quantizer.

``HybridLMEstimator`` trains on text (or token-id rows) with ``fit`` and
answers next-token queries with ``predict`` / ``predict_proba``;
``Int4Quantizer`` is a transformer mapping a float model to its 4-bit form.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tokenizer
from .errors import InputError
from .model import build_model, preset, shrink


def check_token_rows(X, vocab_size: int = tokenizer.VOCAB_SIZE, min_len: int = 1) -> list[torch.Tensor]:
    """Normalize ``X`` into a list of 1-D long tensors of token ids.

    Accepts strings (byte-tokenized), token-id sequences or a 2-D integer array.
    """
    if isinstance(X, (str, bytes)):
        raise InputError("X must be a collection of sequences, not a single string")
    rows = []
    for i, item in enumerate(X):
        if isinstance(item, str):
            t = tokenizer.encode_tensor(item)
        else:
            arr = np.asarray(item)
            if arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer):
                raise InputError(f"row {i}: expected a 1-D integer sequence")
            t = torch.as_tensor(arr, dtype=torch.long)
        if t.numel() < min_len:
            raise InputError(f"row {i}: needs at least {min_len} tokens")
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= vocab_size):
            raise InputError(f"row {i}: token ids must lie in [0, {vocab_size})")
        rows.append(t)
    if not rows:
        raise InputError("X is empty")
    return rows


def _windows(rows: list[torch.Tensor], seq_len: int) -> torch.Tensor:
    out = []
    for r in rows:
        for i in range(0, max(r.numel() - seq_len, 1), seq_len):
            w = r[i:i + seq_len + 1]
            if w.numel() == seq_len + 1:
                out.append(w)
    if not out:
        raise InputError(f"no sequence is longer than seq_len={seq_len}")
    return torch.stack(out)


class HybridLMEstimator(BaseEstimator):
    def __init__(self, preset_name: str = "tiny-7b-style", model_overrides: dict | None = None, seq_len: int = 64,
                 batch_size: int = 4, steps: int = 100, lr: float = 3e-3, weight_decay: float = 0.1,
                 seed: int = 0):
        self.preset_name = preset_name
        self.model_overrides = model_overrides
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed

    def _config(self):
        cfg = preset(self.preset_name)
        return shrink(cfg, **self.model_overrides).validate() if self.model_overrides else cfg.validate()

    def fit(self, X, y=None):
        from .training import AdamConfig, OptimizerState, train_step

        windows = _windows(check_token_rows(X, min_len=2), self.seq_len)
        self.model_ = build_model(self._config(), self.seed)
        opt = OptimizerState(self.model_, AdamConfig(weight_decay=self.weight_decay))
        gen = torch.Generator().manual_seed(self.seed)
        self.loss_curve_ = []
        self.model_.train()
        for _ in range(self.steps):
            idx = torch.randint(0, windows.shape[0], (self.batch_size,), generator=gen)
            self.loss_curve_.append(train_step(self.model_, windows[idx], opt, self.lr))
        self.model_.eval()
        self.n_features_in_ = self.seq_len
        return self

    @torch.no_grad()
    def _last_logits(self, X) -> torch.Tensor:
        check_is_fitted(self, "model_")
        rows = check_token_rows(X, self.model_.config.vocab_size)
        return torch.stack([self.model_(r[None])[0, -1] for r in rows])

    def predict_proba(self, X) -> np.ndarray:
        """Next-token distribution after each row, ``[n_rows, vocab]``."""
        return torch.softmax(self._last_logits(X).double(), -1).numpy()

    def predict(self, X) -> np.ndarray:
        """Greedy next token after each row."""
        return self._last_logits(X).argmax(-1).numpy()

    @torch.no_grad()
    def score(self, X, y=None) -> float:
        """Negative mean next-token cross-entropy (higher is better)."""
        from .training import lm_loss

        check_is_fitted(self, "model_")
        rows = check_token_rows(X, self.model_.config.vocab_size, min_len=2)
        losses = [lm_loss(self.model_, r[None]).item() for r in rows]
        return -float(np.mean(losses))

    def generate(self, prompt: str | Sequence[int], n_tokens: int, sampler: str = "greedy", seed: int = 0) -> str:
        from .inference import generate

        check_is_fitted(self, "model_")
        ids = check_token_rows([prompt], self.model_.config.vocab_size)[0]
        return tokenizer.decode(generate(self.model_, ids, n_tokens, sampler, seed))


class Int4Quantizer(TransformerMixin, BaseEstimator):
    """Maps a float model to a copy whose linear layers hold 4-bit blockwise codes."""

    def __init__(self, block_size: int = 64):
        self.block_size = block_size

    def fit(self, X=None, y=None):
        from .quantize import PrecisionPolicy

        self.policy_ = PrecisionPolicy()
        return self

    def transform(self, X):
        from .quantize import quantize_model

        check_is_fitted(self, "policy_")
        return quantize_model(X, self.policy_, self.block_size)
