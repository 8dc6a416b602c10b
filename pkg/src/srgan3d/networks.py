"""3D SRGAN-style generator and discriminator."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .upsampling import Upsample, UpsampleSpec, _uniform_, n_blocks

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # running = momentum * running + (1 - momentum) * batch
INIT_GAIN = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
# residual branches start damped and the output layer starts near zero so the
# untrained generator is close to a smooth upsampler of its input features
RES_GAMMA = 0.1
TAIL_GAIN = 0.01


@dataclass(frozen=True)
class GeneratorConfig:
    n_res_blocks: int = 6
    base_filters: int = 32
    kernel: int = 3
    scale: int = 2
    upsample_method: str = "resize_conv"
    leaky_slope: float = LEAKY_SLOPE
    batch_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_res_blocks < 0 or self.base_filters < 1:
            raise ValueError("n_res_blocks must be >= 0 and base_filters >= 1")
        if not 0 < self.leaky_slope < 1:
            raise ValueError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        n_blocks(self.scale)
        self.upsample_spec  # validates method

    @property
    def upsample_spec(self) -> UpsampleSpec:
        # sub-pixel variants use 8x filters so the shuffle returns base_filters channels
        f = self.base_filters if self.upsample_method == "resize_conv" else 8 * self.base_filters
        return UpsampleSpec(self.upsample_method, 2, self.kernel, f)


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_shape: tuple[int, int, int] = (16, 16, 16)
    conv_filters: tuple[int, ...] = (32, 32, 64, 64, 128, 128, 256, 256)
    strides: tuple[int, ...] = (1, 2, 1, 2, 1, 2, 1, 2)
    kernel: int = 3
    dense_hidden: int = 1024
    leaky_slope: float = LEAKY_SLOPE
    batch_norm: bool = True
    seed: int = 1

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "conv_filters", tuple(self.conv_filters))
        object.__setattr__(self, "strides", tuple(self.strides))
        validate_discriminator_config(self)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        shape = self.input_shape
        for s in self.strides:
            shape = tuple(-(-n // s) for n in shape)
        return shape


def validate_discriminator_config(cfg: DiscriminatorConfig) -> None:
    """Resolution halves (stride 2) exactly where the next layer doubles its filters."""
    f, s = cfg.conv_filters, cfg.strides
    if len(f) != len(s) or not f:
        raise ValueError("conv_filters and strides must be nonempty and of equal length")
    if any(x not in (1, 2) for x in s):
        raise ValueError(f"strides must be 1 or 2, got {s}")
    for i in range(len(f) - 1):
        if f[i + 1] not in (f[i], 2 * f[i]):
            raise ValueError(f"layer {i + 1}: filters may only stay or double ({f[i]} -> {f[i + 1]})")
        if (s[i] == 2) != (f[i + 1] == 2 * f[i]):
            raise ValueError(f"layer {i}: stride 2 must be followed by a doubling of filters and vice versa")
    if cfg.dense_hidden < 1:
        raise ValueError("dense_hidden must be >= 1")


def _conv(cin, cout, k, stride, gen, gain=INIT_GAIN):
    conv = nn.Conv3d(cin, cout, k, stride=stride, padding=k // 2)
    _uniform_(conv.weight, cin * k**3, gen, gain)
    nn.init.zeros_(conv.bias)
    return conv


def _bn(c, enabled):
    if not enabled:
        return nn.Identity()
    return nn.BatchNorm3d(c, eps=BN_EPS, momentum=1.0 - BN_MOMENTUM)


class ResidualBlock(nn.Module):
    def __init__(self, f, k, slope, bn, gen):
        super().__init__()
        self.conv1 = _conv(f, f, k, 1, gen)
        self.bn1 = _bn(f, bn)
        self.act = nn.LeakyReLU(slope)
        self.conv2 = _conv(f, f, k, 1, gen)
        self.bn2 = _bn(f, bn)
        if bn:
            nn.init.constant_(self.bn2.weight, RES_GAMMA)

    def forward(self, x):
        y = self.act(self.bn1(self.conv1(x)))
        return x + self.bn2(self.conv2(y))


class Generator(nn.Module):
    """conv -> residual blocks (+ global skip) -> x2 blocks -> 1-channel conv."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        f, k = cfg.base_filters, cfg.kernel
        self.head = _conv(1, f, k, 1, gen)
        self.act = nn.LeakyReLU(cfg.leaky_slope)
        self.res = nn.ModuleList(
            ResidualBlock(f, k, cfg.leaky_slope, cfg.batch_norm, gen) for _ in range(cfg.n_res_blocks)
        )
        self.up = nn.ModuleList(
            Upsample(f, cfg.upsample_spec, gen, INIT_GAIN) for _ in range(n_blocks(cfg.scale))
        )
        self.tail = _conv(f, 1, k, 1, gen, gain=TAIL_GAIN)

    def forward(self, x):
        h = self.act(self.head(x))
        y = h
        for block in self.res:
            y = block(y)
        y = y + h
        for block in self.up:
            y = self.act(block(y))
        y = self.tail(y)
        if not self.training:
            y = y.clamp(0.0, 1.0)
        return y


class Discriminator(nn.Module):
    """Strided conv stack, two dense layers, sigmoid probability."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        layers = []
        cin = 1
        for i, (f, s) in enumerate(zip(cfg.conv_filters, cfg.strides)):
            layers.append(_conv(cin, f, cfg.kernel, s, gen))
            # no normalization on the input layer
            layers.append(_bn(f, cfg.batch_norm and i > 0))
            layers.append(nn.LeakyReLU(cfg.leaky_slope))
            cin = f
        self.features = nn.Sequential(*layers)
        n_feat = cin * int(np.prod(cfg.feature_shape))
        self.dense1 = nn.Linear(n_feat, cfg.dense_hidden)
        self.act = nn.LeakyReLU(cfg.leaky_slope)
        self.dense2 = nn.Linear(cfg.dense_hidden, 1)
        for lin, gain in ((self.dense1, INIT_GAIN), (self.dense2, 1.0)):
            _uniform_(lin.weight, lin.in_features, gen, gain)
            nn.init.zeros_(lin.bias)

    def logits(self, x):
        if tuple(x.shape[2:]) != self.cfg.input_shape:
            raise ValueError(f"discriminator built for {self.cfg.input_shape}, got {tuple(x.shape[2:])}")
        h = self.features(x).flatten(1)
        return self.dense2(self.act(self.dense1(h))).squeeze(1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def network_params(net: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Named parameters and batch-norm statistics of a network."""
    return OrderedDict((k, v.detach().clone()) for k, v in net.state_dict().items())


def load_network_params(net: nn.Module, params) -> None:
    expected = net.state_dict()
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise ValueError(f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, t in params.items():
        if tuple(expected[name].shape) != tuple(np.shape(t)):
            raise ValueError(f"{name}: expected shape {tuple(expected[name].shape)}, got {tuple(np.shape(t))}")
    net.load_state_dict({k: torch.as_tensor(np.asarray(v)).to(expected[k].dtype) for k, v in params.items()})


def _to_batch(v, dtype) -> torch.Tensor:
    a = np.asarray(v)
    if a.ndim == 3:
        a = a[..., None]
    return torch.as_tensor(np.ascontiguousarray(a.transpose(3, 0, 1, 2)[None]), dtype=dtype)


def _from_batch(t: torch.Tensor) -> np.ndarray:
    return t[0].detach().cpu().numpy().transpose(1, 2, 3, 0)


def generator_forward(lr, net: Generator, mode: str = "eval") -> np.ndarray:
    """Super-resolve a single ``(H, W, D, 1)`` volume."""
    a = np.asarray(lr)
    if a.ndim == 4 and a.shape[3] != 1:
        raise ValueError(f"generator takes single-channel volumes, got {a.shape[3]} channels")
    net.train(mode == "train")
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        return _from_batch(net(_to_batch(a, dtype)))


def discriminator_forward(v, net: Discriminator, mode: str = "eval") -> float:
    net.train(mode == "train")
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        return float(net(_to_batch(v, dtype))[0])
