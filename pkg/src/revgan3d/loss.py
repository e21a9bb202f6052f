"""Least-squares GAN, L1 and cycle losses plus the paired/unpaired objectives."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, ShapeError
from .tensor import Tensor, abs_, mean, square

DEFAULT_LAMBDA = {"paired": 100.0, "unpaired": 10.0}


@dataclass(frozen=True)
class LossWeights:
    lam: float = 100.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")

    @classmethod
    def for_mode(cls, mode):
        return cls(DEFAULT_LAMBDA[mode])


def _nonempty(t, what):
    if t.size == 0:
        raise ShapeError(f"{what} score map is empty")


def gan_loss_generator(score_map: Tensor) -> Tensor:
    """mean((score - 1)^2): the generator wants its fakes scored as real."""
    _nonempty(score_map, "generator")
    return mean(square(score_map - 1.0))


def gan_loss_discriminator(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """0.5 * [mean((real - 1)^2) + mean(fake^2)]."""
    _nonempty(real_scores, "real")
    _nonempty(fake_scores, "fake")
    return 0.5 * (mean(square(real_scores - 1.0)) + mean(square(fake_scores)))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shapes {pred.shape} and {target.shape} differ")
    return mean(abs_(pred - target))


def cycle_loss(x: Tensor, x_cycled: Tensor, y: Tensor, y_cycled: Tensor) -> Tensor:
    return l1_loss(x_cycled, x) + l1_loss(y_cycled, y)


def paired_total(gan_g_x, gan_g_y, l1_f, l1_g, w: LossWeights):
    """gan_g_x + gan_g_y + lambda * (l1_f + l1_g); works on tensors or floats."""
    return gan_g_x + gan_g_y + (l1_f + l1_g) * w.lam


def unpaired_total(gan_g_x, gan_g_y, cyc, w: LossWeights):
    return gan_g_x + gan_g_y + cyc * w.lam
