"""Numeric substrate: seeded randomness, Laplace quantiles, half-normal
scale estimation and per-channel image statistics.

Arrays are plain float64 numpy arrays in row-major order.
"""

import math
from dataclasses import dataclass

import numpy as np

from ldprecon._validation import as_float_array, check_image
from ldprecon.exceptions import DomainError, InsufficientSamplesError


class SeededRng:
    """Deterministic random stream backed by numpy's PCG64 bit generator.

    The same seed yields the same stream on every run.  A ``SeededRng`` is
    owned by one caller at a time; use :meth:`spawn` to hand independent
    streams to workers.
    """

    algorithm = "PCG64"

    def __init__(self, seed=0):
        seed = int(seed)
        if seed < 0 or seed >= 2**64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._seq = np.random.SeedSequence(seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def __repr__(self):
        return f"SeededRng(seed={self.seed})"

    def spawn(self, n):
        """Return ``n`` child streams, independent of this one and of each other."""
        children = self._seq.spawn(n)
        out = []
        for child in children:
            rng = SeededRng.__new__(SeededRng)
            rng.seed = self.seed
            rng._seq = child
            rng.generator = np.random.Generator(np.random.PCG64(child))
            out.append(rng)
        return out

    def normal(self, scale=1.0, size=None):
        return self.generator.normal(0.0, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)


@dataclass(frozen=True)
class LaplaceParams:
    """Location ``mu`` and scale ``s`` of a Laplace distribution.

    The defaults are the separation-layer values used for non-CIFAR data
    (mu = s = 3e-3).  The bias-layer proofs assume mu = 0; both settings
    are accepted.
    """

    mu: float = 3e-3
    s: float = 3e-3

    def __post_init__(self):
        if not (np.isfinite(self.s) and self.s > 0):
            raise DomainError(f"Laplace scale must be positive, got {self.s}")
        if not np.isfinite(self.mu):
            raise DomainError("Laplace location must be finite")


def laplace_quantile(p, params=LaplaceParams()):
    """Inverse CDF of Laplace(mu, s): ``mu - s*sgn(p-0.5)*ln(1-2|p-0.5|)``."""
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(~(p_arr > 0.0) | ~(p_arr < 1.0)):
        raise DomainError("laplace_quantile requires 0 < p < 1")
    d = p_arr - 0.5
    q = params.mu - params.s * np.sign(d) * np.log1p(-2.0 * np.abs(d))
    if q.ndim == 0:
        return float(q)
    return q


def laplace_cdf(x, params=LaplaceParams()):
    x = np.asarray(x, dtype=np.float64)
    z = (x - params.mu) / params.s
    return np.where(z < 0, 0.5 * np.exp(np.minimum(z, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(z, 0.0)))


def _check_negatives(negatives):
    arr = np.asarray(negatives, dtype=np.float64).ravel()
    if arr.size == 0:
        raise InsufficientSamplesError("half-normal estimate needs at least one sample")
    if np.any(arr > 0):
        raise DomainError("half-normal estimate takes non-positive samples only")
    return arr


def half_normal_sigma(negatives):
    """Scale of the Gaussian whose negative half produced ``negatives``.

    Uses the half-normal mean, E[-|N(0, sigma^2)|] = -sigma*sqrt(2/pi).
    """
    arr = _check_negatives(negatives)
    return float(-arr.mean() * math.sqrt(math.pi) / math.sqrt(2.0))


def half_normal_sigma_from_variance(negatives):
    """Variance-based cross-check: Var = sigma^2 (1 - 2/pi)."""
    arr = _check_negatives(negatives)
    return float(math.sqrt(arr.var() * math.pi / (math.pi - 2.0)))


def total_variation(image):
    """Anisotropic TV per channel of a C x H x W image (no wrap-around)."""
    img = np.asarray(image, dtype=np.float64)
    tv = np.abs(np.diff(img, axis=-1)).sum(axis=(-2, -1))
    tv = tv + np.abs(np.diff(img, axis=-2)).sum(axis=(-2, -1))
    return tv


def channel_stats(image):
    """Per-channel ``(mean, population variance, total variation)``.

    Returns an array of shape ``(C, 3)``.
    """
    img = check_image(image)
    mean = img.mean(axis=(1, 2))
    var = img.var(axis=(1, 2))
    return np.stack([mean, var, total_variation(img)], axis=1)


def batch_channel_stats(images):
    """``channel_stats`` for every sample of a B x C x H x W batch -> (B, C, 3)."""
    imgs = as_float_array(images, ndim=4, name="images")
    mean = imgs.mean(axis=(2, 3))
    var = imgs.var(axis=(2, 3))
    return np.stack([mean, var, total_variation(imgs)], axis=2)


def flatten_concat(tensors):
    """Concatenate the row-major flattening of several arrays."""
    if isinstance(tensors, np.ndarray):
        return tensors.ravel()
    parts = [np.asarray(t, dtype=np.float64).ravel() for t in tensors]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def l2_norm(tensors):
    """Euclidean norm of all entries of one array or a sequence of arrays."""
    if isinstance(tensors, np.ndarray):
        return float(np.sqrt(np.sum(np.square(tensors, dtype=np.float64))))
    total = 0.0
    for t in tensors:
        total += float(np.sum(np.square(np.asarray(t, dtype=np.float64))))
    return math.sqrt(total)
