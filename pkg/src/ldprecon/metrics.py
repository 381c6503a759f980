"""Reconstruction quality and attack-effect measurements."""

import csv
import io
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ldprecon._validation import check_same_shape
from ldprecon.exceptions import ShapeError

PSNR_CAP = 100.0
SSIM_WINDOW = 8
DIFF_BIN_EDGES = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
DIFF_BIN_LABELS = ("(-inf,1e-6)", "[1e-6,1e-5)", "[1e-5,1e-4)", "[1e-4,1e-3)",
                   "[1e-3,1e-2)", "[1e-2,inf)")


def mse(a, b):
    a, b = check_same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """PSNR in dB for peak value 1, capped at 100 dB when MSE < 1e-10."""
    err = mse(a, b)
    if err < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / err))


def _ssim_channel(a, b, c1, c2):
    wa = sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over all 8x8 windows (stride 1) and channels.

    Accepts H x W or C x H x W images.
    """
    a, b = check_same_shape(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ShapeError("SSIM needs images of at least 8x8")
    if np.array_equal(a, b):
        return 1.0
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    maps = [_ssim_channel(a[c], b[c], c1, c2) for c in range(a.shape[0])]
    return float(np.mean(maps))


@dataclass
class QualityReport:
    """Per-sample MSE/PSNR/SSIM plus batch means.

    ``psnr_of_mean_mse`` is PSNR of the batch-mean MSE; ``mean_psnr`` is the
    mean of per-sample PSNRs.  SSIM is clamped to [0, 1].
    """

    mse: np.ndarray
    psnr: np.ndarray
    ssim: np.ndarray

    @property
    def mean_mse(self):
        return float(np.mean(self.mse))

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr))

    @property
    def psnr_of_mean_mse(self):
        m = self.mean_mse
        return PSNR_CAP if m < 1e-10 else float(10 * np.log10(1.0 / m))

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim))

    CSV_COLUMNS = ("sample", "mse", "psnr", "ssim")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for i, row in enumerate(zip(self.mse, self.psnr, self.ssim)):
            w.writerow([i, *(f"{v:.10g}" for v in row)])
        return buf.getvalue()


def quality_report(reconstructed, reference):
    """Compare two B x C x H x W batches sample by sample."""
    rec, ref = check_same_shape(reconstructed, reference)
    if rec.ndim == 3:
        rec, ref = rec[None], ref[None]
    m = np.array([mse(r, t) for r, t in zip(rec, ref)])
    p = np.array([psnr(r, t) for r, t in zip(rec, ref)])
    s = np.array([min(1.0, max(0.0, ssim(r, t))) for r, t in zip(rec, ref)])
    return QualityReport(m, p, s)


def separation_ratio(results):
    """Fraction of samples, over one or more attack results, whose reverse
    unit is not shared with another sample."""
    if not isinstance(results, (list, tuple)):
        results = [results]
    if not results:
        raise ValueError("separation_ratio needs at least one trial")
    total = 0
    separated = 0
    for r in results:
        overlapped = np.asarray(r.overlapped if hasattr(r, "overlapped") else r, dtype=bool)
        total += overlapped.size
        separated += int((~overlapped).sum())
    return separated / total if total else 0.0


def overlapped_flags(reverse_indices):
    """True for every sample whose reverse index is shared."""
    idx = np.asarray(reverse_indices)
    _, inverse, counts = np.unique(idx, return_inverse=True, return_counts=True)
    return counts[inverse] > 1


def gradient_diff_proportions(with_attack, without, relative=True):
    """Histogram of per-entry differences between two aggregated
    target-model gradients over six decade bins.

    Differences are ``|a - b| / |b|`` (``relative=True``) or ``|a - b|``.
    Returns proportions summing to 1.
    """
    if set(with_attack) != set(without):
        raise ShapeError("gradient layouts differ")
    keys = sorted(with_attack)
    a_parts, b_parts = [], []
    for k in keys:
        a = np.asarray(with_attack[k], dtype=np.float64)
        b = np.asarray(without[k], dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeError(f"{k}: {a.shape} vs {b.shape}")
        a_parts.append(a.ravel())
        b_parts.append(b.ravel())
    a = np.concatenate(a_parts)
    b = np.concatenate(b_parts)
    diff = np.abs(a - b)
    if relative:
        scale = np.abs(b)
        with np.errstate(divide="ignore", invalid="ignore"):
            diff = np.where(diff == 0, 0.0, diff / scale)
        diff[~np.isfinite(diff)] = np.inf
    bins = np.searchsorted(np.asarray(DIFF_BIN_EDGES), diff, side="right")
    counts = np.bincount(bins, minlength=len(DIFF_BIN_LABELS))
    return counts / counts.sum()
