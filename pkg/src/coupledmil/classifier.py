"""Classification heads f(x) and f'(x) over the hidden space.

The forward pass keeps every layer's post-activation output because the
weight-similarity loss compares the two heads layer by layer.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import List, Optional

import torch
from torch import nn

from .checkpoint import read_archive, save_module

DTYPE = torch.float64


@dataclass
class ClassifierOutput:
    probs: torch.Tensor
    logits: torch.Tensor
    layer_outputs: List[torch.Tensor]  # final entry is ``probs``


class BagClassifier(nn.Module):
    """MLP ``widths[0] -> ... -> widths[-1]`` with tanh between layers and softmax on top."""

    def __init__(self, widths):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or widths[-1] < 2:
            raise ValueError(f"widths must have >= 2 entries ending in C >= 2, got {widths}")
        self.widths = widths
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:])
        )

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def forward(self, x: torch.Tensor) -> ClassifierOutput:
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"embedding width {x.shape[-1]} != classifier input {self.widths[0]}")
        outputs = []
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
            outputs.append(x)
        logits = self.layers[-1](x)
        probs = torch.softmax(logits, dim=-1)
        outputs.append(probs)
        return ClassifierOutput(probs=probs, logits=logits, layer_outputs=outputs)


def build_classifier(widths, seed: Optional[int] = None) -> BagClassifier:
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        return BagClassifier(widths)


def classify(params: BagClassifier, embedding: torch.Tensor) -> ClassifierOutput:
    return params(embedding)


def init_instance_classifier(bag_classifier: BagClassifier) -> BagClassifier:
    """f' starts as an exact, independent copy of f."""
    return copy.deepcopy(bag_classifier)


def save_classifier(module: BagClassifier, path):
    save_module(module, path, "classifier", {"widths": list(module.widths)})


def load_classifier(path) -> BagClassifier:
    header, tensors = read_archive(path)
    if header["kind"] != "classifier":
        raise ValueError(f"{path} holds a {header['kind']!r} checkpoint, not a classifier")
    module = BagClassifier(header["arch"]["widths"])
    module.load_state_dict(tensors)
    return module
