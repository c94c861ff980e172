"""Instance embedder g(x): a small convolutional stem plus a linear projection.

Vector datasets (Gaussian bags) bypass the stem; only the projection is
applied and trained.  Everything runs in float64.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from .bagdata import Bag, Instance
from .checkpoint import read_archive, save_module

DTYPE = torch.float64


@dataclass(frozen=True)
class EmbedderArch:
    """Architecture descriptor.

    ``input_shape`` is (C, H, W) for image patches or (dim,) for vectors.
    With an empty ``conv_channels`` the stem is skipped and ``feat_dim`` is the
    input vector length.
    """

    input_shape: tuple
    conv_channels: tuple = (16, 32, 128)
    hidden_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if len(self.input_shape) == 1 and self.conv_channels:
            raise ValueError("vector inputs cannot use a convolutional stem")
        if len(self.input_shape) not in (1, 3):
            raise ValueError(f"input_shape must be (dim,) or (C, H, W), got {self.input_shape}")

    @property
    def uses_stem(self) -> bool:
        return bool(self.conv_channels)

    @property
    def feat_dim(self) -> int:
        return self.conv_channels[-1] if self.uses_stem else self.input_shape[0]

    @classmethod
    def desk(cls, input_shape) -> "EmbedderArch":
        if len(tuple(input_shape)) == 1:
            return cls(input_shape, conv_channels=(), hidden_dim=64)
        return cls(input_shape, conv_channels=(16, 32, 128), hidden_dim=64)

    @classmethod
    def paper(cls, input_shape) -> "EmbedderArch":
        # 1024-d features projected to a 512-d hidden space
        return cls(input_shape, conv_channels=(256, 512, 1024), hidden_dim=512)


class InstanceEmbedder(nn.Module):
    def __init__(self, arch: EmbedderArch):
        super().__init__()
        self.arch = arch
        layers = []
        if arch.uses_stem:
            in_ch = arch.input_shape[0]
            for i, out_ch in enumerate(arch.conv_channels):
                stride = 1 if i == 0 else 2
                layers += [nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, dtype=DTYPE), nn.GELU()]
                in_ch = out_ch
            layers.append(nn.AdaptiveAvgPool2d(1))
            layers.append(nn.Flatten())
        self.stem = nn.Sequential(*layers)
        self.projection = nn.Linear(arch.feat_dim, arch.hidden_dim, dtype=DTYPE)

    @property
    def hidden_dim(self) -> int:
        return self.arch.hidden_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x`` is a batch (N, *input_shape); returns (N, hidden_dim)."""
        if tuple(x.shape[1:]) != self.arch.input_shape:
            raise ValueError(
                f"patch shape {tuple(x.shape[1:])} does not match embedder input {self.arch.input_shape}"
            )
        return self.projection(self.stem(x))

    def reset_projection_to_identity(self):
        """Identity projection; only valid when feat_dim == hidden_dim."""
        if self.arch.feat_dim != self.arch.hidden_dim:
            raise ValueError("identity projection needs feat_dim == hidden_dim")
        with torch.no_grad():
            self.projection.weight.copy_(torch.eye(self.arch.hidden_dim, dtype=DTYPE))
            self.projection.bias.zero_()


def build_embedder(arch: EmbedderArch, seed: Optional[int] = None) -> InstanceEmbedder:
    if seed is None:
        return InstanceEmbedder(arch)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return InstanceEmbedder(arch)


def _as_tensor(patches) -> torch.Tensor:
    if isinstance(patches, torch.Tensor):
        return patches.to(DTYPE)
    arrays = [p.pixels if isinstance(p, Instance) else np.asarray(p) for p in patches]
    return torch.from_numpy(np.stack(arrays)).to(DTYPE)


def embed_instance(params: InstanceEmbedder, patch: Union[Instance, np.ndarray]) -> torch.Tensor:
    """Embed one patch; returns a vector of length ``hidden_dim``."""
    return params(_as_tensor([patch]))[0]


def embed_batch(params: InstanceEmbedder, patches) -> torch.Tensor:
    return params(_as_tensor(patches))


def embed_bag(params: InstanceEmbedder, bag: Bag) -> torch.Tensor:
    """Row k is the embedding of instance k of ``bag``."""
    if len(bag.instances) == 0:
        raise ValueError("cannot embed an empty bag")
    return embed_batch(params, bag.instances)


def clone_embedder(params: InstanceEmbedder) -> InstanceEmbedder:
    return copy.deepcopy(params)


@dataclass(frozen=True)
class AugmentSpec:
    """Label-preserving perturbations applied to the student's input.

    Flips and 90 degree rotations each fire with probability 1/2 (rotation
    picks k in 0..3).  Brightness adds a uniform offset in [-b, b].  Image
    outputs are clamped to [0, 1]; vector instances only receive the noise.
    """

    hflip: bool = True
    vflip: bool = True
    rot90: bool = True
    brightness: float = 0.1
    noise_sigma: float = 0.02

    @classmethod
    def disabled(cls) -> "AugmentSpec":
        return cls(hflip=False, vflip=False, rot90=False, brightness=0.0, noise_sigma=0.0)

    @property
    def is_identity(self) -> bool:
        return not (self.hflip or self.vflip or self.rot90 or self.brightness or self.noise_sigma)


def flip_patch(patch: Instance, axis: str) -> Instance:
    """Mirror an image patch horizontally (``"h"``) or vertically (``"v"``)."""
    np_axis = {"h": 2, "v": 1}[axis]
    return Instance(np.flip(patch.pixels, axis=np_axis), patch.true_class, patch.name)


def augment(spec: AugmentSpec, patch: Instance, draw: np.random.Generator) -> Instance:
    if spec.is_identity:
        return patch
    x = np.array(patch.pixels)
    if patch.is_image:
        if spec.hflip and draw.random() < 0.5:
            x = np.flip(x, axis=2)
        if spec.vflip and draw.random() < 0.5:
            x = np.flip(x, axis=1)
        if spec.rot90 and x.shape[1] == x.shape[2]:
            x = np.rot90(x, k=int(draw.integers(4)), axes=(1, 2))
        if spec.brightness:
            x = x + draw.uniform(-spec.brightness, spec.brightness)
    if spec.noise_sigma:
        x = x + draw.normal(0.0, spec.noise_sigma, size=x.shape)
    if patch.is_image:
        x = np.clip(x, 0.0, 1.0)
    return Instance(x, patch.true_class, patch.name)


def save_embedder(params: InstanceEmbedder, path):
    save_module(params, path, "embedder", asdict(params.arch))


def load_embedder(path) -> InstanceEmbedder:
    header, tensors = read_archive(path)
    if header["kind"] != "embedder":
        raise ValueError(f"{path} holds a {header['kind']!r} checkpoint, not an embedder")
    module = InstanceEmbedder(EmbedderArch(**header["arch"]))
    module.load_state_dict(tensors)
    return module
