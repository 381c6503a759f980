"""Server-side reconstruction from one round of clipped, perturbed gradients.

Pipeline: noise-scale estimation from planted zero gradients, bias
averaging, raw per-unit division, metric-layer decoding, alignment by
reverse unit, metric-matching refinement, and confidence-interval noise
filtering.
"""

import csv
import io
import math
import time
import warnings
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ldprecon import core
from ldprecon.exceptions import DomainError, InsufficientSamplesError
from ldprecon.metrics import overlapped_flags, quality_report
from ldprecon.model import (
    BIAS,
    METRIC_B,
    METRIC_W,
    WEIGHT,
    GradientBundle,
    GradientView,
    split_metric_matrix,
)
from ldprecon.optimize import ObjectiveWeights, descend


def as_view(gradients):
    """Attacker-facing view; victim bookkeeping is dropped here."""
    if isinstance(gradients, GradientBundle):
        return gradients.attacker_view()
    if isinstance(gradients, GradientView):
        return gradients
    if isinstance(gradients, Mapping):
        return GradientView(gradients)
    raise TypeError(f"expected gradients mapping, got {type(gradients).__name__}")


# --- step 1 ------------------------------------------------------------------


def estimate_sigma(gradients, zero_positions, min_negatives=1000, return_variance=False):
    """Noise scale from the weight-layer entries fed by all-zero channels."""
    view = as_view(gradients)
    vals = view[WEIGHT].ravel()[np.asarray(zero_positions)]
    if not np.any(vals):
        return (0.0, 0.0) if return_variance else 0.0
    neg = vals[vals < 0]
    if neg.size == 0:
        raise DomainError("zero positions hold no negative values; not symmetric noise")
    if neg.size < min_negatives:
        raise InsufficientSamplesError(
            f"{neg.size} negative noise samples, need at least {min_negatives}")
    sigma = core.half_normal_sigma(neg)
    if return_variance:
        return sigma, core.half_normal_sigma_from_variance(neg)
    return sigma


# --- step 2 ------------------------------------------------------------------


def reconstruct_bias(bias_grads):
    """Average the D_b repeated copies of each unit's bias gradient."""
    g = np.asarray(bias_grads, dtype=np.float64)
    if g.ndim == 1:
        g = g[None]
    first = g[0]
    # exact for identical copies
    return first + (g - first).mean(axis=0)


# --- step 3 ------------------------------------------------------------------


def raw_reconstruct(weight_grads, bias_hat, image_shape=None, floor=1e-12):
    """Candidate image of every unit: weight row / averaged bias gradient.

    Only the real-channel half of each row is used.  Units with
    ``|bias_hat| < floor`` yield zero images flagged invalid.
    Returns ``(candidates, valid)``.
    """
    w = np.asarray(weight_grads, dtype=np.float64)
    b = np.asarray(bias_hat, dtype=np.float64)
    if w.shape[0] != b.shape[0]:
        raise ValueError(f"{w.shape[0]} weight rows vs {b.shape[0]} bias entries")
    n = w.shape[1] // 2 if image_shape is None else int(np.prod(image_shape))
    valid = np.abs(b) >= floor
    out = np.zeros((w.shape[0], n))
    out[valid] = w[valid, :n] / b[valid, None]
    if image_shape is not None:
        out = out.reshape((w.shape[0],) + tuple(image_shape))
    return out, valid


def primary_attack(weight_grads, bias_grads):
    """Division attack on a plain fully connected layer (one unit)."""
    w = np.asarray(weight_grads, dtype=np.float64)
    b = np.asarray(bias_grads, dtype=np.float64)
    if w.ndim == 2:
        w = w[0]
    return w / float(np.ravel(b)[0])


# --- step 4 ------------------------------------------------------------------


@dataclass
class RecoveredMetrics:
    stats: np.ndarray
    reverse: np.ndarray
    present: np.ndarray
    flat: np.ndarray
    clamped: np.ndarray
    scaled: np.ndarray


def reconstruct_metrics(metric_w, metric_b, structure, sigma_hat=0.0):
    """Recover the flattened metric matrix from the metric layer.

    The D_b repeated input copies are averaged first; each output unit r
    then carries ``grad_b[r] * m``, and m is estimated by least squares
    across units (exact without noise).  Reverse indices are decoded as
    ``round(entry * K)``; entries below ``0.5 / K`` mark padding.
    """
    w = np.asarray(metric_w, dtype=np.float64)
    b = np.asarray(metric_b, dtype=np.float64)
    n_m = b.shape[0]
    length = structure.metric_len
    w_avg = w.reshape(n_m, structure.D_b, length).mean(axis=1)
    denom = float(b @ b) - n_m * sigma_hat**2
    denom = max(denom, float(b @ b) * 1e-3, 1e-300)
    flat = (b @ w_avg) / denom / structure.metric_scale()
    stats, idx = split_metric_matrix(flat, structure.batch_size, structure.channels)
    scaled = idx * structure.K
    present = scaled >= 0.5
    reverse = np.rint(scaled).astype(np.int64)
    clamped = present & ((reverse < 1) | (reverse > structure.K))
    if clamped.any():
        warnings.warn(f"{int(clamped.sum())} reverse indices decoded outside [1, K]; clamped",
                      RuntimeWarning, stacklevel=2)
    reverse = np.clip(reverse, 1, structure.K)
    return RecoveredMetrics(stats[present], reverse[present], present, flat, clamped[present],
                            scaled[present])


def snap_reverse_indices(reverse_hat, bias_hat, threshold, window=8, mean_cost=None):
    """Move decoded units onto active units within ``window``.

    A unit is active when its averaged bias gradient exceeds ``threshold``
    in magnitude.  Decoded (possibly fractional) indices are matched
    one-to-one to active units by minimum total cost, the squared unit
    distance plus the optional ``mean_cost`` matrix (samples x K) that
    scores how well each unit's candidate fits the sample's decoded
    metrics.  Indices left over (shared units) go to the cheapest active
    unit, and indices with no active unit nearby fall back to rounding.
    Returns ``(snapped, moved)``.
    """
    pos = np.asarray(reverse_hat, dtype=np.float64)
    rounded = np.rint(pos).astype(np.int64)
    active = np.flatnonzero(np.abs(np.asarray(bias_hat)) > threshold) + 1
    out = rounded.copy()
    if active.size == 0 or pos.size == 0:
        return out, np.zeros(len(out), dtype=bool)
    dist = np.abs(pos[:, None] - active[None, :])
    far = dist > window
    cost = dist**2
    if mean_cost is not None:
        cost = cost + np.asarray(mean_cost)[:, active - 1]
    rows, cols = linear_sum_assignment(np.where(far, 1e12 + cost, cost))
    done = np.zeros(len(out), dtype=bool)
    for r, c in zip(rows, cols):
        if not far[r, c]:
            out[r] = active[c]
            done[r] = True
    for i in np.flatnonzero(~done):
        j = int(np.argmin(np.where(far[i], np.inf, cost[i])))
        if not far[i, j]:
            out[i] = active[j]
    return out, out != rounded


def candidate_mean_cost(raw_images, bias_hat, sigma_hat, target_stats, rel_tol=0.02):
    """Squared, noise-normalized mismatch between every unit's candidate
    channel means and each sample's decoded means (samples x K)."""
    raw = np.asarray(raw_images, dtype=np.float64)
    k, c = raw.shape[:2]
    n = raw[0, 0].size
    cand = raw.reshape(k, c, -1).mean(axis=2)
    target = np.asarray(target_stats)[..., 0]
    with np.errstate(divide="ignore"):
        noise = sigma_hat / (np.abs(np.asarray(bias_hat)) * math.sqrt(n))
    var = noise[None, :, None] ** 2 + (rel_tol * target[:, None, :]) ** 2 + 1e-12
    return ((cand[None] - target[:, None, :]) ** 2 / var).sum(axis=2)


def rescale_metrics(stats, raw_index, snapped):
    """Correct the common scale error of decoded metrics using the snapped
    indices as known values."""
    raw = np.asarray(raw_index, dtype=np.float64)
    den = float(raw @ raw)
    if den <= 0:
        return stats, 1.0
    factor = float(raw @ np.asarray(snapped, dtype=np.float64)) / den
    return stats * factor, factor


# --- steps 5-6 ----------------------------------------------------------------


@dataclass
class Alignment:
    """Valid candidates in ascending unit order, paired with sample metrics."""

    units: np.ndarray
    images: np.ndarray
    metrics: np.ndarray
    members: list
    overlapped: np.ndarray
    sample_pair: np.ndarray
    n_candidates: int

    @property
    def discarded(self):
        return self.n_candidates - len(self.units)


def align_and_filter(raw_images, metrics_hat, reverse_hat):
    """Keep the candidates at the decoded reverse units; pair each with the
    metrics of the sample(s) routed there.

    A unit shared by several samples yields one pair flagged overlapped,
    carrying the first sample's metrics.
    """
    reverse_hat = np.asarray(reverse_hat, dtype=np.int64)
    units = np.unique(reverse_hat)
    members = [np.flatnonzero(reverse_hat == u) for u in units]
    pair_of_unit = {int(u): i for i, u in enumerate(units)}
    sample_pair = np.array([pair_of_unit[int(u)] for u in reverse_hat], dtype=np.int64)
    al = Alignment(
        units=units,
        images=np.asarray(raw_images)[units - 1].copy(),
        metrics=np.stack([metrics_hat[m[0]] for m in members]) if len(units) else
        np.zeros((0,) + np.asarray(metrics_hat).shape[1:]),
        members=members,
        overlapped=np.array([len(m) > 1 for m in members], dtype=bool),
        sample_pair=sample_pair,
        n_candidates=len(raw_images),
    )
    return al


# --- step 8 ------------------------------------------------------------------


def noise_filter(images, sigma_hat, bias_hat, z=2.576, return_flags=False):
    """Zero pixels whose rescaled magnitude lies inside the noise interval.

    A pixel of the image from unit i0 is set to 0 iff
    ``|pixel| * |bias_hat[i0]| <= z * sigma_hat * sqrt(2)``; ``bias_hat``
    holds one value per image.
    """
    if z <= 0:
        raise DomainError("confidence multiplier z must be positive")
    x = np.array(images, dtype=np.float64, copy=True)
    scale = np.abs(np.asarray(bias_hat, dtype=np.float64)).reshape((-1,) + (1,) * (x.ndim - 1))
    if sigma_hat > 0:
        x[np.abs(x) * scale <= z * sigma_hat * math.sqrt(2.0)] = 0.0
    if return_flags:
        flat = x.reshape(x.shape[0], -1)
        return x, ~np.any(flat != 0, axis=1)
    return x


def quantize(images, levels=255):
    x = np.clip(images, 0.0, 1.0)
    if not levels:
        return x
    return np.floor(x * levels + 0.5) / levels


def random_guess(rng, shape):
    """Baseline reconstruction: i.i.d. uniform pixels."""
    return rng.uniform(0.0, 1.0, size=shape)


# --- pipeline -----------------------------------------------------------------


@dataclass
class AttackResult:
    sigma_hat: float
    sigma_hat_var: float
    bias_hat: np.ndarray
    raw_images: np.ndarray
    valid_units: np.ndarray
    reverse_hat: np.ndarray
    metrics_hat: np.ndarray
    final_images: np.ndarray
    overlapped: np.ndarray
    degenerate: np.ndarray
    aligned_images: np.ndarray = None
    optimized_images: np.ndarray = None
    quality: object = None
    errors: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    CSV_COLUMNS = ("sample", "reverse_unit", "overlapped", "degenerate", "sigma_hat",
                   "mse", "psnr", "ssim")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for i in range(len(self.reverse_hat)):
            q = ("", "", "")
            if self.quality is not None:
                q = tuple(f"{v:.10g}" for v in (self.quality.mse[i], self.quality.psnr[i],
                                                 self.quality.ssim[i]))
            w.writerow([i, int(self.reverse_hat[i]), int(self.overlapped[i]),
                        int(self.degenerate[i]), f"{self.sigma_hat:.10g}", *q])
        return buf.getvalue()


@dataclass(frozen=True)
class AttackConfig:
    z: float = 2.576
    weights: ObjectiveWeights = ObjectiveWeights()
    min_negatives: int = 1000
    division_floor: float = 1e-12
    optimize: bool = True
    denoise: bool = True
    pixel_levels: int = 255
    snap_window: int = 8
    snap_sigmas: float = 5.0


class SampleReconstructor(BaseEstimator, TransformerMixin, auto_wrap_output_keys=None):
    """Estimator wrapper around the reconstruction pipeline.

    ``fit(X)`` takes the victim's uploaded gradients (a mapping of
    parameter name to array) and recovers the noise scale, bias gradients,
    raw candidates, metrics and reverse units.  ``transform(X)`` returns
    the refined, filtered reconstructions in the victim's sample order.
    """

    def __init__(self, structure=None, z=2.576, w_mu=1e6, w_sigma=2e4, w_tv=1e-6, lr=1e-6,
                 rounds=1000, min_negatives=1000, division_floor=1e-12, optimize=True,
                 denoise=True, pixel_levels=255, snap_window=8,
                 snap_sigmas=5.0):
        self.structure = structure
        self.z = z
        self.w_mu = w_mu
        self.w_sigma = w_sigma
        self.w_tv = w_tv
        self.lr = lr
        self.rounds = rounds
        self.min_negatives = min_negatives
        self.division_floor = division_floor
        self.optimize = optimize
        self.denoise = denoise
        self.pixel_levels = pixel_levels
        self.snap_window = snap_window
        self.snap_sigmas = snap_sigmas

    @classmethod
    def from_config(cls, structure, cfg):
        w = cfg.weights
        return cls(structure=structure, z=cfg.z, w_mu=w.w_mu, w_sigma=w.w_sigma, w_tv=w.w_tv,
                   lr=w.lr, rounds=w.rounds, min_negatives=cfg.min_negatives,
                   division_floor=cfg.division_floor, optimize=cfg.optimize,
                   denoise=cfg.denoise, pixel_levels=cfg.pixel_levels,
                   snap_window=cfg.snap_window, snap_sigmas=cfg.snap_sigmas)

    def _check_structure(self):
        st = self.structure
        if st is None:
            raise ValueError("SampleReconstructor needs the inference structure")
        if st.batch_size > st.K:
            raise ValueError(f"batch size {st.batch_size} exceeds K={st.K}: units cannot "
                             "separate every sample")
        return st

    def fit(self, X, y=None):
        st = self._check_structure()
        view = as_view(X)
        self.errors_ = []
        self.timings_ = {}
        self.metric_rescale_ = 1.0
        t0 = time.perf_counter()
        try:
            self.sigma_hat_, self.sigma_hat_var_ = estimate_sigma(
                view, st.zero_positions(), self.min_negatives, return_variance=True)
        except (DomainError, InsufficientSamplesError) as exc:
            self.errors_.append(f"sigma estimation: {exc}")
            self.sigma_hat_, self.sigma_hat_var_ = 0.0, 0.0
        t1 = time.perf_counter()
        self.bias_hat_ = reconstruct_bias(view[BIAS])
        self.raw_images_, self.valid_units_ = raw_reconstruct(
            view[WEIGHT], self.bias_hat_, st.image_shape, self.division_floor)
        t2 = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            rec = reconstruct_metrics(view[METRIC_W], view[METRIC_B], st, self.sigma_hat_)
        self.errors_.extend(str(w.message) for w in caught)
        self.metrics_hat_ = rec.stats
        self.reverse_hat_ = rec.reverse
        if self.snap_window > 0:
            noise = self.snap_sigmas * self.sigma_hat_ / math.sqrt(st.D_b)
            with np.errstate(invalid="ignore"):
                mc = candidate_mean_cost(self.raw_images_, self.bias_hat_, self.sigma_hat_,
                                         rec.stats)
            mc = np.nan_to_num(mc, nan=1e12, posinf=1e12)
            self.reverse_hat_, moved = snap_reverse_indices(
                rec.scaled, self.bias_hat_, max(noise, self.division_floor), self.snap_window,
                mean_cost=mc)
            if moved.any():
                self.metrics_hat_, self.metric_rescale_ = rescale_metrics(
                    rec.stats, rec.scaled, self.reverse_hat_)
        self.metric_flat_ = rec.flat
        t3 = time.perf_counter()
        self.alignment_ = align_and_filter(self.raw_images_, self.metrics_hat_, self.reverse_hat_)
        for p, unit in enumerate(self.alignment_.units):
            if not self.valid_units_[unit - 1]:
                self.errors_.append(f"unit {unit}: bias gradient below division floor")
        self.overlapped_ = overlapped_flags(self.reverse_hat_)
        self.timings_.update(sigma=t1 - t0, raw=t2 - t1, metrics=t3 - t2,
                             align=time.perf_counter() - t3)
        self.n_features_in_ = sum(int(np.prod(v.shape)) for v in view.values())
        return self

    def _refine(self):
        al = self.alignment_
        x = al.images
        if self.denoise and self.optimize and self.rounds > 0 and len(x):
            w = ObjectiveWeights(self.w_mu, self.w_sigma, self.w_tv, self.lr, self.rounds)
            x = descend(x, al.metrics, w)
        optimized = x
        degenerate = np.zeros(len(x), dtype=bool)
        if self.denoise and len(x):
            x, degenerate = noise_filter(x, self.sigma_hat_, self.bias_hat_[al.units - 1],
                                         self.z, return_flags=True)
            degenerate &= self.sigma_hat_ > 0
        return optimized, x, degenerate

    def transform(self, X=None):
        if X is not None:
            self.fit(X)
        check_is_fitted(self, "alignment_")
        t0 = time.perf_counter()
        optimized, filtered, degenerate = self._refine()
        al = self.alignment_
        self.optimized_images_ = optimized[al.sample_pair]
        self.degenerate_ = degenerate[al.sample_pair]
        for i in np.flatnonzero(self.degenerate_):
            self.errors_.append(f"sample {i}: every pixel inside the noise interval")
        self.final_images_ = quantize(filtered[al.sample_pair], self.pixel_levels)
        self.timings_["refine"] = time.perf_counter() - t0
        return self.final_images_

    def result(self, reference=None):
        """Bundle fitted state into an :class:`AttackResult`."""
        check_is_fitted(self, "final_images_")
        quality = None
        if reference is not None:
            quality = quality_report(self.final_images_, reference)
        return AttackResult(
            sigma_hat=self.sigma_hat_,
            sigma_hat_var=self.sigma_hat_var_,
            bias_hat=self.bias_hat_,
            raw_images=self.raw_images_,
            valid_units=self.valid_units_,
            reverse_hat=self.reverse_hat_,
            metrics_hat=self.metrics_hat_,
            final_images=self.final_images_,
            overlapped=self.overlapped_,
            degenerate=self.degenerate_,
            aligned_images=self.alignment_.images[self.alignment_.sample_pair],
            optimized_images=self.optimized_images_,
            quality=quality,
            errors=list(self.errors_),
            timings=dict(self.timings_),
        )


def run_attack(gradients, structure, cfg=AttackConfig(), reference=None):
    """Run the full pipeline on one protected upload.

    ``reference`` (masked ground truth, victim order) only feeds the
    quality report.
    """
    est = SampleReconstructor.from_config(structure, cfg)
    est.fit(gradients)
    est.transform(None)
    if reference is not None and len(reference) != len(est.final_images_):
        ref = np.asarray(reference)
        quality_ref = ref[: len(est.final_images_)] if len(ref) > len(est.final_images_) else None
        res = est.result(quality_ref)
        res.errors.append(f"decoded {len(est.final_images_)} samples, expected {len(ref)}")
        return res
    return est.result(reference)
