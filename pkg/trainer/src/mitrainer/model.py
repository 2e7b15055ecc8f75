"""Tiny causal language model with optional low-rank adapters.

The model predicts each byte from the preceding byte through a two-layer MLP
over the embedding — small enough for CPU finite-difference checks, causal by
construction. Adapters add a scaled low-rank delta to every linear layer while
the base weights stay frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

# Byte-level vocabulary plus control tokens.
BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 64
    alpha: int = 64

    def __post_init__(self):
        if self.rank < 1 or self.alpha < 1:
            raise ValueError("rank and alpha must be >= 1")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LowRankLinear(nn.Module):
    """A frozen linear layer plus a trainable low-rank delta.

    Output is ``x W^T + b + scale * (x A^T) B^T``; ``B`` starts at zero so the
    wrapped module is initially equivalent to the base layer.
    """

    def __init__(self, base: nn.Linear, config: AdapterConfig):
        super().__init__()
        self.base = base
        for param in self.base.parameters():
            param.requires_grad_(False)
        self.scale = config.scale
        self.adapter_a = nn.Parameter(
            torch.randn(config.rank, base.in_features) / math.sqrt(base.in_features)
        )
        self.adapter_b = nn.Parameter(torch.zeros(base.out_features, config.rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        delta = (x @ self.adapter_a.t()) @ self.adapter_b.t()
        return self.base(x) + self.scale * delta


class TinyLM(nn.Module):
    """Bigram MLP language model: logits at position t predict token t+1."""

    def __init__(self, hidden: int = 64, vocab_size: int = VOCAB_SIZE):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, hidden)
        self.fc = nn.Linear(hidden, hidden)
        self.head = nn.Linear(hidden, vocab_size)

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(self.fc(self.embed(input_ids)))
        return self.head(h)


def add_adapters(model: TinyLM, config: AdapterConfig) -> TinyLM:
    """Freeze the base model and wrap every linear layer with an adapter."""
    for param in model.parameters():
        param.requires_grad_(False)
    model.fc = LowRankLinear(model.fc, config)
    model.head = LowRankLinear(model.head, config)
    return model


def trainable_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def total_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
