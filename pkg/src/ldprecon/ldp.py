"""Victim-side gradient protection: global-norm clipping and Gaussian noise."""

from dataclasses import dataclass, field

import numpy as np

from ldprecon._validation import check_positive
from ldprecon.exceptions import DomainError


def noise_sigma(c_const, C, m, epsilon):
    """Gaussian scale ``2 c C / (m epsilon)``."""
    for name, v in (("c", c_const), ("C", C), ("m", m), ("epsilon", epsilon)):
        check_positive(v, name)
    return 2.0 * c_const * C / (m * epsilon)


@dataclass(frozen=True)
class LdpConfig:
    """Local privacy parameters of one user.

    ``delta`` is recorded but does not enter the noise scale.
    ``dynamic_clipping`` is reserved and must stay off.
    """

    epsilon: float = 10.0
    delta: float = 0.01
    C: float = 10.0
    c_const: float = 1.0
    m: int = 1000
    dynamic_clipping: bool = False
    sigma: float = field(init=False)

    def __post_init__(self):
        if self.m < 1:
            raise DomainError(f"m must be >= 1, got {self.m}")
        if self.dynamic_clipping:
            raise NotImplementedError("dynamic clipping is not implemented")
        object.__setattr__(self, "sigma", noise_sigma(self.c_const, self.C, self.m, self.epsilon))


def clip(bundle, C):
    """Scale every entry by 1 / max(1, ||bundle|| / C); returns ``(bundle', delta)``."""
    check_positive(C, "C")
    delta = max(1.0, bundle.norm() / C)
    out = bundle.map(lambda g: g / delta)
    out.delta = bundle.delta * delta
    return out, delta


def perturb(bundle, sigma, rng):
    """Add i.i.d. N(0, sigma^2) to every entry."""
    if sigma < 0:
        raise DomainError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        out = bundle.copy()
    else:
        out = bundle.map(lambda g: g + rng.normal(sigma, size=g.shape))
    out.sigma = float(np.hypot(bundle.sigma, sigma))
    return out


def protect(bundle, cfg, rng, sigma=None):
    """Clip to ``cfg.C`` then perturb with ``cfg.sigma`` (or an override)."""
    clipped, _ = clip(bundle, cfg.C)
    return perturb(clipped, cfg.sigma if sigma is None else sigma, rng)
