"""The two branches of the dual network and the downstream classifier.

The online branch is a 2-D CNN over coherency patches: two conv blocks
(kernel 3, paddings 2 and 1, each followed by batchnorm and 2x2 max
pooling), a linear map to the representation width ``m``, then a two-layer
projection head to the embedding width ``d`` with an L2-normalized output.
For the default 15x15x9 patch the spatial trace is 15 -> 17 -> 8 -> 8 -> 4.

The target branch is a 1-D CNN over the filtered feature vector: two conv
blocks (kernel 3, padding 2, batchnorm, 2-pooling) and a single linear
embedding to ``d``, L2-normalized.

The fine-tuning classifier reuses the online representation encoder and
adds one linear class-score head.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, l2_normalize
from .nn import LayerSpec, Linear, Module, Sequential, build_network

__all__ = [
    "OnlineNetwork",
    "TargetNetwork",
    "PatchClassifier",
    "online_encoder_specs",
    "target_encoder_specs",
    "build_online_network",
    "build_target_network",
    "conv_output_len",
]


def conv_output_len(length: int, kernel: int = 3, padding: int = 2) -> int:
    return length + 2 * padding - kernel + 1


def online_encoder_specs(patch_size: int = 15, in_channels: int = 9,
                         widths: tuple[int, int] = (32, 64), m: int = 128,
                         relu: bool = True):
    c1, c2 = widths
    s1 = conv_output_len(patch_size, padding=2) // 2
    s2 = conv_output_len(s1, padding=1) // 2
    act = [LayerSpec("relu", {})] if relu else []
    return [
        LayerSpec("conv2d", dict(in_channels=in_channels, out_channels=c1,
                                 kernel_size=3, padding=2)),
        LayerSpec("batchnorm", dict(num_channels=c1)),
        *act,
        LayerSpec("maxpool", {}),
        LayerSpec("conv2d", dict(in_channels=c1, out_channels=c2,
                                 kernel_size=3, padding=1)),
        LayerSpec("batchnorm", dict(num_channels=c2)),
        *act,
        LayerSpec("maxpool", {}),
        LayerSpec("linear", dict(in_features=c2 * s2 * s2, out_features=m)),
    ]


def target_encoder_specs(input_len: int, widths: tuple[int, int] = (16, 32),
                         d: int = 64, relu: bool = True):
    t1, t2 = widths
    l1 = conv_output_len(input_len, padding=2) // 2
    l2 = conv_output_len(l1, padding=2) // 2
    act = [LayerSpec("relu", {})] if relu else []
    return [
        LayerSpec("conv1d", dict(in_channels=1, out_channels=t1,
                                 kernel_size=3, padding=2)),
        LayerSpec("batchnorm", dict(num_channels=t1)),
        *act,
        LayerSpec("maxpool", {}),
        LayerSpec("conv1d", dict(in_channels=t1, out_channels=t2,
                                 kernel_size=3, padding=2)),
        LayerSpec("batchnorm", dict(num_channels=t2)),
        *act,
        LayerSpec("maxpool", {}),
        LayerSpec("linear", dict(in_features=t2 * l2, out_features=d)),
    ]


class OnlineNetwork(Module):
    """2-D representation encoder plus projection head, unit-norm output."""

    def __init__(self, encoder: Sequential, projector: Sequential,
                 patch_size: int, m: int, d: int):
        super().__init__()
        self.encoder = encoder
        self.projector = projector
        self.patch_size = patch_size
        self.m = m
        self.d = d

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def forward(self, x: Tensor) -> Tensor:
        return l2_normalize(self.projector(self.encoder(x)), axis=-1)


class TargetNetwork(Module):
    """1-D encoder with one linear embedding, unit-norm output."""

    def __init__(self, net: Sequential, input_len: int, d: int):
        super().__init__()
        self.net = net
        self.input_len = input_len
        self.d = d

    def forward(self, x: Tensor) -> Tensor:
        return l2_normalize(self.net(x), axis=-1)


class PatchClassifier(Module):
    """Online encoder plus a linear class-score head."""

    def __init__(self, encoder: Sequential, head: Linear, classes: np.ndarray,
                 patch_size: int, m: int):
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.classes = np.asarray(classes)
        self.patch_size = patch_size
        self.m = m

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.encoder(x))

    def logits_frozen(self, x: Tensor) -> Tensor:
        """Head scores with the encoder treated as a fixed feature map."""
        return self.head(self.encoder(x).detach())


def build_online_network(rng: np.random.Generator, patch_size: int = 15,
                         widths: tuple[int, int] = (32, 64), m: int = 128,
                         d: int = 64, dtype=np.float32,
                         relu: bool = True) -> OnlineNetwork:
    encoder = build_network(online_encoder_specs(patch_size, 9, widths, m, relu),
                            (9, patch_size, patch_size), rng, dtype)
    projector = build_network(
        [
            LayerSpec("linear", dict(in_features=m, out_features=d)),
            LayerSpec("relu", {}),
            LayerSpec("linear", dict(in_features=d, out_features=d)),
        ],
        (m,),
        rng,
        dtype,
    )
    return OnlineNetwork(encoder, projector, patch_size, m, d)


def build_target_network(rng: np.random.Generator, input_len: int,
                         widths: tuple[int, int] = (16, 32), d: int = 64,
                         dtype=np.float32, relu: bool = True) -> TargetNetwork:
    net = build_network(target_encoder_specs(input_len, widths, d, relu),
                        (1, input_len), rng, dtype)
    return TargetNetwork(net, input_len, d)
