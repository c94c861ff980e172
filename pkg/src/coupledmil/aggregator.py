"""Instance aggregation a(x): gated attention and mean/max pooling.

Every aggregator returns a bag embedding in the instance hidden space.
Gated attention follows the usual tanh/sigmoid gating::

    a_k = softmax_k( w . (tanh(V1 h_k) * sigmoid(V2 h_k)) )
    H   = sum_k a_k h_k

No bias terms; the parameters are exactly ``V1``, ``V2`` and ``w``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn

from .checkpoint import read_archive, save_module

DTYPE = torch.float64
AGGREGATOR_KINDS = ("attention", "mean", "max")


@dataclass(frozen=True)
class AttentionResult:
    weights: torch.Tensor  # (K,)
    bag_embedding: torch.Tensor  # (D_hidden,)


@dataclass(frozen=True)
class AggregatorArch:
    kind: str
    hidden_dim: int
    attn_dim: int = 32

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ValueError(
                f"unknown aggregator {self.kind!r}; valid kinds: {', '.join(AGGREGATOR_KINDS)}"
            )


class GatedAttention(nn.Module):
    def __init__(self, hidden_dim: int, attn_dim: int = 32):
        super().__init__()
        self.arch = AggregatorArch("attention", hidden_dim, attn_dim)
        bound = 1.0 / math.sqrt(hidden_dim)
        self.V1 = nn.Parameter(torch.empty(attn_dim, hidden_dim, dtype=DTYPE).uniform_(-bound, bound))
        self.V2 = nn.Parameter(torch.empty(attn_dim, hidden_dim, dtype=DTYPE).uniform_(-bound, bound))
        bound = 1.0 / math.sqrt(attn_dim)
        self.omega = nn.Parameter(torch.empty(attn_dim, dtype=DTYPE).uniform_(-bound, bound))

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        if h.ndim != 2 or h.shape[1] != self.V1.shape[1]:
            raise ValueError(
                f"embeddings must be (K, {self.V1.shape[1]}), got {tuple(h.shape)}"
            )
        if h.shape[0] < 1:
            raise ValueError("cannot aggregate an empty bag")
        gate = torch.tanh(h @ self.V1.T) * torch.sigmoid(h @ self.V2.T)
        return gate @ self.omega

    def attend(self, h: torch.Tensor) -> AttentionResult:
        weights = torch.softmax(self.logits(h), dim=0)  # max-subtracted internally
        return AttentionResult(weights, weights @ h)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.attend(h).bag_embedding


class Pooling(nn.Module):
    """Parameter-free element-wise mean or max over the instance axis."""

    def __init__(self, kind: str, hidden_dim: int):
        super().__init__()
        if kind not in ("mean", "max"):
            raise ValueError(f"pooling kind must be 'mean' or 'max', got {kind!r}")
        self.arch = AggregatorArch(kind, hidden_dim)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return aggregate_pool(self.arch.kind, h)


def build_aggregator(kind: str, hidden_dim: int, attn_dim: int = 32, seed: Optional[int] = None) -> nn.Module:
    arch = AggregatorArch(kind, hidden_dim, attn_dim)
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        if arch.kind == "attention":
            return GatedAttention(hidden_dim, attn_dim)
        return Pooling(kind, hidden_dim)


def attention_scores(params: GatedAttention, embeddings: torch.Tensor) -> torch.Tensor:
    return params.attend(embeddings).weights


def aggregate_attention(params: GatedAttention, embeddings: torch.Tensor) -> AttentionResult:
    return params.attend(embeddings)


def aggregate_pool(kind: str, embeddings: torch.Tensor) -> torch.Tensor:
    if embeddings.ndim != 2 or embeddings.shape[0] < 1:
        raise ValueError(f"embeddings must be a non-empty (K, D) matrix, got {tuple(embeddings.shape)}")
    if kind == "mean":
        return embeddings.mean(dim=0)
    if kind == "max":
        return embeddings.max(dim=0).values
    raise ValueError(f"pooling kind must be 'mean' or 'max', got {kind!r}")


def save_aggregator(module: nn.Module, path):
    save_module(module, path, "aggregator", asdict(module.arch))


def load_aggregator(path) -> nn.Module:
    header, tensors = read_archive(path)
    if header["kind"] != "aggregator":
        raise ValueError(f"{path} holds a {header['kind']!r} checkpoint, not an aggregator")
    module = build_aggregator(**header["arch"])
    module.load_state_dict(tensors)
    return module
