"""Exploration noise: Ornstein-Uhlenbeck action noise and actor parameter noise."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import ParamSet
from .errors import UsageError


@dataclass
class OuProcess:
    """``x <- x + theta (mu - x) dt + sigma sqrt(dt) N(0, I)``."""

    dim: int
    theta: float = 0.15
    sigma: float = 0.2
    mu: float = 0.0
    dt: float = 1.0 / 50.0
    x: np.ndarray = None

    def __post_init__(self):
        if self.x is None:
            self.reset()

    def reset(self):
        self.x = np.full(self.dim, float(self.mu))
        return self.x

    def stationary_variance(self):
        """Variance of the discrete AR(1) recursion ``sigma^2 dt / (1 - (1 - theta dt)^2)``."""
        rho = 1.0 - self.theta * self.dt
        return self.sigma ** 2 * self.dt / (1.0 - rho ** 2)


def ou_step(p: OuProcess, rng):
    p.x = p.x + p.theta * (p.mu - p.x) * p.dt + p.sigma * np.sqrt(p.dt) * rng.standard_normal(p.dim)
    return p.x


@dataclass
class ParamNoiseStash:
    sigma_p: float = 0.05
    active: bool = False
    clean: ParamSet | None = field(default=None, repr=False)


def apply_param_noise(params: ParamSet, sigma_p, rng, stash: ParamNoiseStash):
    """Stash a clean copy, then add i.i.d. ``N(0, sigma_p^2)`` to every entry in place."""
    if stash.active:
        raise UsageError("parameter noise already applied")
    stash.clean = params.copy()
    stash.sigma_p = sigma_p
    stash.active = True
    for v in params.values():
        if sigma_p > 0:
            v += sigma_p * rng.standard_normal(v.shape)
    return params


def remove_param_noise(params: ParamSet, stash: ParamNoiseStash):
    """Restore the stashed clean values bit-exactly."""
    if not stash.active:
        raise UsageError("parameter noise is not active")
    params.assign(stash.clean)
    stash.clean = None
    stash.active = False
    return params


def noisy_action(a, noise):
    return np.clip(a + noise, -1.0, 1.0)
