"""Byte-level tokenizer: ids 0-255 are raw UTF-8 bytes, 256+ are specials."""

from __future__ import annotations

import torch

BOS, EOS, PAD, SEP = 256, 257, 258, 259
VOCAB_SIZE = 260


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(ids) -> str:
    if isinstance(ids, torch.Tensor):
        ids = ids.tolist()
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


def encode_tensor(text: str) -> torch.Tensor:
    return torch.tensor(encode(text), dtype=torch.long)
