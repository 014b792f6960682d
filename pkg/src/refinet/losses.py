"""Boundary-equilibrium losses with the reconstruction-weighted generator objective."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

from . import backend as B
from .backend import Tensor


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.5
    lambda_k: float = 0.001
    lambda_r: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma!r}")
        if not self.lambda_k > 0.0:
            raise ValueError(f"lambda_k must be positive, got {self.lambda_k!r}")
        if not 0.0 <= self.lambda_r <= 1.0:
            raise ValueError(f"lambda_r must be in [0, 1], got {self.lambda_r!r}")


@dataclass(frozen=True)
class LossReport:
    step: int
    L_gan_x: float
    L_gan_gz: float
    L_rcn: float
    L_D: float
    L_G: float
    k_t: float
    M: float

    CSV_HEADER = ("step", "L_gan_x", "L_gan_gz", "L_rcn", "L_D", "L_G", "k_t", "M")

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, f.name)) for f in fields(self))

    def csv_row(self) -> list[str]:
        # repr round-trips floats exactly, so logs compare bitwise
        return [str(self.step)] + [repr(float(getattr(self, k))) for k in self.CSV_HEADER[1:]]

    def to_dict(self) -> dict:
        return asdict(self)


def loss_gan(v: Tensor, d_out: Tensor) -> Tensor:
    """Autoencoder L1 error of the discriminator on ``v``."""
    return B.l1_mean(v, d_out)


def reconstruction_loss(v_hr: Tensor, g_out: Tensor) -> Tensor:
    return B.l1_mean(v_hr, g_out)


def discriminator_loss(L_gan_x, L_gan_gz, k_t: float):
    return L_gan_x - k_t * L_gan_gz


def generator_loss(L_gan_gz, L_rcn, lambda_r: float):
    if not 0.0 <= lambda_r <= 1.0:
        raise ValueError(f"lambda_r must be in [0, 1], got {lambda_r!r}")
    return (1.0 - lambda_r) * L_gan_gz + lambda_r * L_rcn


def update_k(k_t: float, weights: LossWeights, L_gan_x: float, L_gan_gz: float) -> float:
    """Proportional equilibrium update, clamped to [0, 1]."""
    k = k_t + weights.lambda_k * (weights.gamma * float(L_gan_x) - float(L_gan_gz))
    return min(max(k, 0.0), 1.0)


def convergence_measure(L_gan_x: float, L_gan_gz: float, gamma: float) -> float:
    """Monitoring scalar only; drives no control flow."""
    return float(L_gan_x) + abs(gamma * float(L_gan_x) - float(L_gan_gz))
