"""RevGAN assembly: domain encoders/decoders around a shared reversible core.

``G = Dec_Y . C . Enc_X`` maps domain X to Y and ``F = Dec_X . C^-1 . Enc_Y``
maps back; both directions share the core's parameters.  Two least-squares
PatchGAN critics judge the X and Y domains.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import (AvgPool3d, Conv3d, Identity, InstanceNorm3d, LeakyReLU, Module, Sequential,
                 Tanh, UpsampleNearest)
from .revcore import MEMORY_MODES, RevSequence, rev_forward, rev_inverse

TASKS = ("domain-adaptation", "super-resolution")
ARCHS = ("revgan", "identity")


@dataclass
class ModelConfig:
    task: str = "domain-adaptation"
    depth: int = 2
    image_channels: int = 1
    base_channels: int = 32
    core_channels: int = 64
    disc_channels: tuple = (32, 64, 128)
    sr_factors: tuple = (4, 2, 2)
    arch: str = "revgan"
    dtype: str = "float32"

    def __post_init__(self):
        self.disc_channels = tuple(int(c) for c in self.disc_channels)
        self.sr_factors = tuple(int(f) for f in self.sr_factors)
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if len(self.sr_factors) != 3 or min(self.sr_factors) < 1:
            raise ConfigError(f"sr_factors must be three positive integers: {self.sr_factors}")
        if self.arch == "revgan" and self.depth and self.core_channels % 2:
            raise ConfigError(f"core_channels must be even, got {self.core_channels}")
        if self.arch == "identity":
            if self.task != "domain-adaptation":
                raise ConfigError("identity architecture only supports domain-adaptation")
            if self.depth and self.image_channels % 2:
                raise ConfigError("identity architecture with a core needs even image channels")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["disc_channels"] = list(self.disc_channels)
        d["sr_factors"] = list(self.sr_factors)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def y_scale(self):
        """Extent ratio of domain Y to domain X."""
        return self.sr_factors if self.task == "super-resolution" else (1, 1, 1)


class Encoder(Module):
    """[block-mean pool] -> conv k7 -> IN -> leaky_relu -> conv k3 stride 2.

    Convs that feed an affine instance norm carry no bias: the norm removes
    any per-channel shift, so such a bias would only receive rounding noise.
    """

    def __init__(self, in_ch, base, out_ch, *, rng, pool=None, dtype=np.float32):
        self.pool = AvgPool3d(pool) if pool and pool != (1, 1, 1) else None
        self.body = Sequential(
            Conv3d(in_ch, base, 7, padding=3, rng=rng, bias=False, dtype=dtype),
            InstanceNorm3d(base, dtype=dtype),
            LeakyReLU(0.2),
            Conv3d(base, out_ch, 3, stride=2, padding=1, rng=rng, dtype=dtype),
        )
        stride = 2
        self.total_stride = tuple(stride * f for f in (pool or (1, 1, 1)))

    def forward(self, x):
        check_extent(x.shape, self.total_stride)
        if self.pool is not None:
            x = self.pool(x)
        return self.body(x)


class Decoder(Module):
    """conv k3 -> IN -> leaky_relu -> nearest up-sample -> conv k7 -> tanh.

    The first conv reads the core output directly, so in reversible mode the
    core's retained output and this conv's saved input are the same buffer.
    """

    def __init__(self, in_ch, base, out_ch, *, rng, upsample, dtype=np.float32):
        self.body = Sequential(
            Conv3d(in_ch, base, 3, padding=1, rng=rng, bias=False, dtype=dtype),
            InstanceNorm3d(base, dtype=dtype),
            LeakyReLU(0.2),
            UpsampleNearest(upsample),
            Conv3d(base, out_ch, 7, padding=3, rng=rng, dtype=dtype),
            Tanh(),
        )

    def forward(self, x):
        return self.body(x)


def check_extent(shape, stride):
    for ax, n, s in zip("DHW", shape[2:], stride):
        if n % s:
            raise ShapeError(f"extent {n} along {ax} is not divisible by the encoder "
                             f"stride {s}")


class Discriminator(Module):
    """3-D PatchGAN: three k4/stride-2 convs then a k4/stride-1 score conv."""

    def __init__(self, in_ch, channels=(32, 64, 128), *, rng, dtype=np.float32):
        c1, c2, c3 = channels
        self.body = Sequential(
            Conv3d(in_ch, c1, 4, stride=2, padding=1, rng=rng, dtype=dtype),
            LeakyReLU(0.2),
            Conv3d(c1, c2, 4, stride=2, padding=1, rng=rng, bias=False, dtype=dtype),
            InstanceNorm3d(c2, dtype=dtype),
            LeakyReLU(0.2),
            Conv3d(c2, c3, 4, stride=2, padding=1, rng=rng, bias=False, dtype=dtype),
            InstanceNorm3d(c3, dtype=dtype),
            LeakyReLU(0.2),
            Conv3d(c3, 1, 4, stride=1, padding=1, rng=rng, dtype=dtype),
        )

    @staticmethod
    def score_extent(n):
        for _ in range(3):
            n = (n + 2 - 4) // 2 + 1
        return n + 2 - 4 + 1

    def forward(self, x):
        for ax, n in zip("DHW", x.shape[2:]):
            if self.score_extent(n) < 1:
                raise ShapeError(f"discriminator input extent {n} along {ax} is below the "
                                 f"minimum of 16 voxels")
        return self.body(x)


class RevGANModel(Module):
    def __init__(self, config: ModelConfig | None = None, *, rng, memory="reversible"):
        self.config = config = config or ModelConfig()
        if memory not in MEMORY_MODES:
            raise ConfigError(f"memory mode must be one of {MEMORY_MODES}, got {memory!r}")
        self.memory = memory
        dt = config.np_dtype
        ic = config.image_channels
        if config.arch == "identity":
            self.enc_x = Identity()
            self.enc_y = Identity()
            self.dec_x = Identity()
            self.dec_y = Identity()
            self.core = RevSequence(ic, config.depth, rng=rng, dtype=dt)
        else:
            base, core_ch = config.base_channels, config.core_channels
            y_pool = config.y_scale
            self.enc_x = Encoder(ic, base, core_ch, rng=rng, dtype=dt)
            self.enc_y = Encoder(ic, base, core_ch, rng=rng, pool=y_pool, dtype=dt)
            self.core = RevSequence(core_ch, config.depth, rng=rng, dtype=dt)
            self.dec_x = Decoder(core_ch, base, ic, rng=rng, upsample=(2, 2, 2), dtype=dt)
            self.dec_y = Decoder(core_ch, base, ic, rng=rng,
                                 upsample=tuple(2 * f for f in y_pool), dtype=dt)
        self.d_x = Discriminator(ic, config.disc_channels, rng=rng, dtype=dt)
        self.d_y = Discriminator(ic, config.disc_channels, rng=rng, dtype=dt)

    # -- translation maps -------------------------------------------------

    def translate_xy(self, x):
        """G: X -> Y."""
        return self.dec_y(rev_forward(self.enc_x(x), self.core, self.memory))

    def translate_yx(self, y):
        """F: Y -> X."""
        return self.dec_x(rev_inverse(self.enc_y(y), self.core, self.memory))

    def cycle_xyx(self, x):
        return self.translate_yx(self.translate_xy(x))

    def cycle_yxy(self, y):
        return self.translate_xy(self.translate_yx(y))

    def discriminate(self, d, img):
        return d(img)

    # -- parameter groups -------------------------------------------------

    def generator_xy_parameters(self):
        return self.enc_x.parameters() + self.core.parameters() + self.dec_y.parameters()

    def generator_yx_parameters(self):
        return self.enc_y.parameters() + self.core.parameters() + self.dec_x.parameters()

    def generator_parameters(self):
        return (self.enc_x.parameters() + self.enc_y.parameters() + self.core.parameters()
                + self.dec_x.parameters() + self.dec_y.parameters())

    def discriminator_parameters(self):
        return self.d_x.parameters() + self.d_y.parameters()

    def shared_parameters(self):
        """Parameters used by both G and F (exactly the core's)."""
        ids = {id(p) for p in self.generator_yx_parameters()}
        return [p for p in self.generator_xy_parameters() if id(p) in ids]
