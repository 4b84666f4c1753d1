"""Layer blocks: batch-norm parameter groups, shared-weight cell bodies,
and the stem/head layers around them.

Cell bodies keep input and output channel counts equal so they can be
applied repeatedly; the two supported kinds are the pre-activation
residual block (2 convs, 2 BN slots) and conv-BN-ReLU (1 conv, 1 slot).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autodiff import Parameter

CELL_BN_SLOTS = {"preact_resblock": 2, "conv_bn_relu": 1}


def he_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int,
            dtype, is_shared: bool = False) -> Parameter:
    """3x3/1x1 conv weight from N(0, 2/fan_in)."""
    std = math.sqrt(2.0 / (in_ch * k * k))
    w = rng.normal(0.0, std, size=(out_ch, in_ch, k, k))
    return Parameter(w.astype(dtype), is_shared=is_shared)


def he_linear(rng: np.random.Generator, out_features: int, in_features: int,
              dtype) -> Parameter:
    std = math.sqrt(2.0 / in_features)
    w = rng.normal(0.0, std, size=(out_features, in_features))
    return Parameter(w.astype(dtype))


@dataclass
class BnGroup:
    """One batch-normalization parameter set for C channels.

    ``use_count`` is a diagnostics counter bumped on every application;
    it is not serialized.
    """

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    use_count: int = 0

    @property
    def channels(self) -> int:
        return self.gamma.size

    @staticmethod
    def create(channels: int, dtype=np.float32, eps: float = 1e-5,
               momentum: float = 0.1) -> "BnGroup":
        return BnGroup(
            gamma=Parameter(np.ones(channels, dtype=dtype)),
            beta=Parameter(np.zeros(channels, dtype=dtype)),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    def copy(self) -> "BnGroup":
        """Value copy with fresh parameters (nothing aliased)."""
        g = BnGroup(
            gamma=Parameter(self.gamma.data.copy()),
            beta=Parameter(self.beta.data.copy()),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            eps=self.eps,
            momentum=self.momentum,
        )
        return g


@dataclass
class CellBody:
    """Shared convolutional weights applied once per unroll step."""

    kind: str
    convs: list[Parameter]
    channels: int

    @property
    def bn_slots(self) -> int:
        return CELL_BN_SLOTS[self.kind]

    @staticmethod
    def create(kind: str, channels: int, rng: np.random.Generator,
               dtype) -> "CellBody":
        if kind not in CELL_BN_SLOTS:
            raise ValueError(f"unknown cell kind '{kind}'")
        n_convs = 2 if kind == "preact_resblock" else 1
        convs = [he_conv(rng, channels, channels, 3, dtype, is_shared=True)
                 for _ in range(n_convs)]
        return CellBody(kind=kind, convs=convs, channels=channels)

    def copy_untied(self) -> "CellBody":
        """Independent value copy; copies are not marked shared."""
        convs = [Parameter(w.data.copy()) for w in self.convs]
        return CellBody(kind=self.kind, convs=convs, channels=self.channels)


def run_cell_body(body: CellBody, x, bn_groups, training: bool,
                  update_stats: bool = True):
    """One traversal of the cell body.

    ``bn_groups`` supplies exactly ``body.bn_slots`` groups; ``None`` runs
    the normalization-free variant (each BN slot becomes the identity).
    """
    if bn_groups is not None and len(bn_groups) != body.bn_slots:
        raise ValueError(
            f"cell body '{body.kind}' needs {body.bn_slots} BN groups, "
            f"got {len(bn_groups)}")

    def bn(h, slot):
        if bn_groups is None:
            return h
        return F.batchnorm2d(h, bn_groups[slot], training, update_stats)

    if body.kind == "preact_resblock":
        h = F.relu(bn(x, 0))
        h = F.conv2d(h, body.convs[0], stride=1, padding=1)
        h = F.relu(bn(h, 1))
        h = F.conv2d(h, body.convs[1], stride=1, padding=1)
        return F.add(x, h)
    h = F.conv2d(x, body.convs[0], stride=1, padding=1)
    return F.relu(bn(h, 0))


class Stem:
    """Single 3x3 convolution lifting image channels to the cell width."""

    recurrent = False

    def __init__(self, in_channels: int, out_channels: int,
                 rng: np.random.Generator, dtype):
        self.weight = he_conv(rng, out_channels, in_channels, 3, dtype)
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))

    def apply(self, x, step, training, update_stats):
        return F.conv2d(x, self.weight, self.bias, stride=1, padding=1)

    def named_parameters(self, prefix):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias

    def named_bn_groups(self, prefix):
        return iter(())


class ClassifierHead:
    """BN + ReLU + global average pool + linear classifier.

    In cost-adjustable networks the BN group is banked per unified step
    (the head input's statistics depend on how far the upstream cell was
    unrolled); otherwise a single group is used. ``use_bn=False`` drops
    the normalization for BN-free networks.
    """

    recurrent = False

    def __init__(self, channels: int, num_classes: int,
                 rng: np.random.Generator, dtype, use_bn: bool = True,
                 per_step: bool = False, max_step: int = 1,
                 eps: float = 1e-5, momentum: float = 0.1):
        self.use_bn = use_bn
        self.per_step = per_step and use_bn
        n_groups = max_step if self.per_step else 1
        self.bn_groups = ([BnGroup.create(channels, dtype, eps, momentum)
                           for _ in range(n_groups)] if use_bn else [])
        self.weight = he_linear(rng, num_classes, channels, dtype)
        self.bias = Parameter(np.zeros(num_classes, dtype=dtype))

    def apply(self, x, step, training, update_stats):
        h = x
        if self.use_bn:
            group = self.bn_groups[step - 1 if self.per_step else 0]
            h = F.batchnorm2d(h, group, training, update_stats)
        h = F.relu(h)
        h = F.global_avgpool(h)
        return F.linear(h, self.weight, self.bias)

    def named_parameters(self, prefix):
        for name, g in self.named_bn_groups(prefix):
            yield f"{name}.gamma", g.gamma
            yield f"{name}.beta", g.beta
        yield f"{prefix}.linear.weight", self.weight
        yield f"{prefix}.linear.bias", self.bias

    def named_bn_groups(self, prefix):
        if not self.use_bn:
            return
        if self.per_step:
            for s, g in enumerate(self.bn_groups, start=1):
                yield f"{prefix}.bn.s{s}", g
        else:
            yield f"{prefix}.bn", self.bn_groups[0]


class DenoiseHead:
    """3x3 convolution mapping cell width back to image channels."""

    recurrent = False

    def __init__(self, channels: int, image_channels: int,
                 rng: np.random.Generator, dtype):
        self.weight = he_conv(rng, image_channels, channels, 3, dtype)
        self.bias = Parameter(np.zeros(image_channels, dtype=dtype))

    def apply(self, x, step, training, update_stats):
        return F.conv2d(x, self.weight, self.bias, stride=1, padding=1)

    def named_parameters(self, prefix):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias

    def named_bn_groups(self, prefix):
        return iter(())
