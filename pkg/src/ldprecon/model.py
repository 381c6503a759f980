"""The malicious global model.

Masked samples pass a 1x1 six-channel convolution (identity + zero
channels), then a bias-free weight layer whose rows are all equal.  A
parallel bias layer, fed ones, supplies ``D_b`` identical copies of each
unit's bias.  Only the minimal positive activation ``y_min`` survives.  A
metric layer imprints per-sample channel statistics and reverse indices.
All three outputs are added, scaled by ``tau``, to the input of a small
target classifier.  Gradients are computed in closed form.
"""

import io
import struct
import warnings
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from ldprecon import core
from ldprecon.core import LaplaceParams
from ldprecon.exceptions import ParseError, ShapeError

CONV = "conv.weight"
WEIGHT = "weight_layer.weight"
BIAS = "bias_layer.weight"
METRIC_W = "metric_layer.weight"
METRIC_B = "metric_layer.bias"
TARGET_PREFIX = "target."
STRUCTURE_KEYS = (CONV, WEIGHT, BIAS, METRIC_W, METRIC_B)


@dataclass(frozen=True)
class InferenceStructure:
    """Fixed hyperparameters of the malicious prefix.

    ``metric_factors`` scale the (mean, variance, TV) entries of the metric
    matrix before they enter the metric layer; ``index_factor`` scales the
    reverse-index entries, and ``metric_gain`` scales both uniformly.
    ``batch_size`` fixes the metric-layer input
    length; smaller batches are zero-padded.
    """

    image_shape: tuple
    K: int = 256
    w0: float = 1e-3
    D_b: int = 100
    laplace: LaplaceParams = LaplaceParams()
    N_m: int = 16
    batch_size: int = 8
    metric_factors: tuple = (1.0, 10.0, 1e-3)
    index_factor: float = 1.0
    tau: float = 100.0
    metric_gain: float = 0.3

    @property
    def channels(self):
        return self.image_shape[0]

    @property
    def n_pixels(self):
        c, h, w = self.image_shape
        return c * h * w

    @property
    def D_in(self):
        return 2 * self.n_pixels

    @property
    def metric_len(self):
        return self.batch_size * (3 * self.channels + 1)

    @property
    def n_stats(self):
        return self.batch_size * 3 * self.channels

    def quantile_levels(self):
        """p_k = k/K for k < K, and K/(K+1) for the last unit."""
        k = np.arange(1, self.K + 1, dtype=np.float64)
        p = k / self.K
        p[-1] = self.K / (self.K + 1.0)
        return p

    def bias_values(self):
        """Per-row bias-layer weights b_{1,k} = -F^{-1}(p_k), strictly decreasing."""
        return -core.laplace_quantile(self.quantile_levels(), self.laplace)

    def metric_scale(self):
        """Elementwise factor applied to the flattened metric matrix."""
        per_stat = np.tile(np.asarray(self.metric_factors, dtype=np.float64),
                           self.batch_size * self.channels)
        idx = np.full(self.batch_size, float(self.index_factor))
        return self.metric_gain * np.concatenate([per_stat, idx])

    def zero_positions(self):
        """Flat indices into the weight-layer gradient fed by zero channels."""
        n = self.n_pixels
        cols = np.arange(n, 2 * n)
        return (np.arange(self.K)[:, None] * self.D_in + cols[None, :]).ravel()


def build_structure(image_shape, K=256, D_b=100, w0=1e-3, laplace=None, N_m=16,
                    batch_size=8, metric_factors=(1.0, 10.0, 1e-3), index_factor=1.0,
                    tau=100.0, metric_gain=0.3):
    if K < 2 or D_b < 1 or N_m < 1 or batch_size < 1:
        raise ValueError(f"invalid structure sizes K={K} D_b={D_b} N_m={N_m}")
    if len(image_shape) != 3:
        raise ShapeError("image_shape must be (C, H, W)")
    structure = InferenceStructure(
        image_shape=tuple(int(v) for v in image_shape),
        K=int(K),
        w0=float(w0),
        D_b=int(D_b),
        laplace=LaplaceParams() if laplace is None else laplace,
        N_m=int(N_m),
        batch_size=int(batch_size),
        metric_factors=tuple(float(f) for f in metric_factors),
        index_factor=float(index_factor),
        tau=float(tau),
        metric_gain=float(metric_gain),
    )
    b = structure.bias_values()
    assert np.all(np.diff(b) < 0), "bias construction is not strictly decreasing"
    return structure


@dataclass(frozen=True)
class TargetModel:
    """One-hidden-layer tanh classifier with softmax cross-entropy loss."""

    n_in: int
    hidden: int = 32
    n_classes: int = 4

    def init_params(self, rng):
        g = rng.generator
        return {
            "target.fc1.weight": g.normal(0.0, 1.0 / np.sqrt(self.n_in), (self.hidden, self.n_in)),
            "target.fc1.bias": np.zeros(self.hidden),
            "target.fc2.weight": g.normal(0.0, 1.0 / np.sqrt(self.hidden), (self.n_classes, self.hidden)),
            "target.fc2.bias": np.zeros(self.n_classes),
        }

    def forward(self, params, t):
        h = np.tanh(t @ params["target.fc1.weight"].T + params["target.fc1.bias"])
        logits = h @ params["target.fc2.weight"].T + params["target.fc2.bias"]
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return h, p

    def predict_proba(self, params, t):
        return self.forward(params, t)[1]

    def predict(self, params, t):
        return self.predict_proba(params, t).argmax(axis=1)

    def loss_and_grads(self, params, t, labels):
        """Mean cross-entropy, parameter gradients and input gradient dL/dt."""
        b = t.shape[0]
        h, p = self.forward(params, t)
        loss = -np.mean(np.log(np.maximum(p[np.arange(b), labels], 1e-300)))
        dlogits = p.copy()
        dlogits[np.arange(b), labels] -= 1.0
        dlogits /= b
        dh = dlogits @ params["target.fc2.weight"]
        dpre = dh * (1.0 - h * h)
        grads = {
            "target.fc1.weight": dpre.T @ t,
            "target.fc1.bias": dpre.sum(axis=0),
            "target.fc2.weight": dlogits.T @ h,
            "target.fc2.bias": dlogits.sum(axis=0),
        }
        dt = dpre @ params["target.fc1.weight"]
        return float(loss), grads, dt


def init_params(structure, target, rng):
    """Server-side initial parameters of the whole global model."""
    c = structure.channels
    conv = np.zeros((2 * c, c))
    conv[:c] = np.eye(c)
    params = {
        CONV: conv,
        WEIGHT: np.full((structure.K, structure.D_in), structure.w0),
        BIAS: np.tile(structure.bias_values(), (structure.D_b, 1)),
        METRIC_W: np.zeros((structure.N_m, structure.D_b * structure.metric_len)),
        METRIC_B: np.zeros(structure.N_m),
    }
    params.update(target.init_params(rng))
    return params


# --- reverse indices ---------------------------------------------------------


def activations(structure, masked_sample, params=None):
    """Separation activations w_k . conv(x) + sum_j b_{j,k} for one sample."""
    x = np.asarray(masked_sample, dtype=np.float64)
    if params is None:
        return structure.w0 * x.sum() + structure.D_b * structure.bias_values()
    z = conv_forward(params[CONV], x[None])[0]
    return params[WEIGHT] @ z + params[BIAS].sum(axis=0)


def reverse_index_scan(acts):
    """1-based index of the last positive activation of a decreasing sequence.

    Returns ``(i0, degenerate)``; with no positive activation ``i0`` is 1 and
    the sample is flagged.
    """
    acts = np.asarray(acts)
    if acts[0] <= 0:
        return 1, True
    for k in range(len(acts) - 1):
        if acts[k + 1] <= 0:
            return k + 1, False
    return len(acts), False


def reverse_index_bisect(acts):
    acts = np.asarray(acts)
    n_pos = int(np.searchsorted(-acts, 0.0, side="left"))
    if n_pos == 0:
        return 1, True
    return n_pos, False


def reverse_index(structure, masked_sample, params=None):
    """Reverse unit (1-based) of a masked sample and a degeneracy flag."""
    return reverse_index_scan(activations(structure, masked_sample, params))


def _min_positive(acts):
    """Per-row 0-based index of the smallest positive entry (0 if none)."""
    pos = acts > 0
    masked = np.where(pos, acts, np.inf)
    idx = masked.argmin(axis=1)
    degenerate = ~pos.any(axis=1)
    idx[degenerate] = 0
    return idx, degenerate


# --- metric matrix -----------------------------------------------------------


def metric_matrix(masked_images, reverse_indices, K, batch_size=None):
    """Flattened metric matrix: a (B, C, 3) block of (mean, variance, TV),
    row-major, followed by one ``i0 / K`` entry per sample.

    With ``batch_size`` larger than B the trailing rows are zero.
    """
    imgs = np.asarray(masked_images, dtype=np.float64)
    b, c = imgs.shape[:2]
    batch_size = b if batch_size is None else batch_size
    if b > batch_size:
        raise ShapeError(f"batch of {b} exceeds metric capacity {batch_size}")
    stats = np.zeros((batch_size, c, 3))
    stats[:b] = core.batch_channel_stats(imgs)
    idx = np.zeros(batch_size)
    idx[:b] = np.asarray(reverse_indices, dtype=np.float64) / K
    return np.concatenate([stats.ravel(), idx])


def split_metric_matrix(flat, batch_size, channels):
    """Inverse of :func:`metric_matrix` layout: ``(stats (B,C,3), index entries (B,))``."""
    n = batch_size * channels * 3
    return flat[:n].reshape(batch_size, channels, 3), flat[n : n + batch_size]


# --- gradient containers -----------------------------------------------------


class GradientView(Mapping):
    """Read-only, attacker-facing view of uploaded gradient values."""

    def __init__(self, grads):
        self._grads = {}
        for k, v in grads.items():
            arr = np.array(v, dtype=np.float64, copy=True)
            arr.setflags(write=False)
            self._grads[k] = arr

    def __getitem__(self, key):
        return self._grads[key]

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)

    def __repr__(self):
        return f"GradientView({list(self._grads)})"


@dataclass
class ForwardTrace:
    """Victim-side record of one forward pass (ground truth for evaluation)."""

    reverse_indices: np.ndarray
    degenerate: np.ndarray
    y_min: np.ndarray
    metric_matrix: np.ndarray
    masked_images: np.ndarray
    upstream: np.ndarray
    warnings: list = field(default_factory=list)


@dataclass
class GradientBundle:
    """Per-parameter gradients plus hidden victim-side bookkeeping.

    ``delta`` (clip factor) and ``sigma`` (noise scale) never leave the
    victim; :meth:`attacker_view` exposes gradient values only.
    """

    grads: dict
    delta: float = field(default=1.0, repr=False)
    sigma: float = field(default=0.0, repr=False)
    trace: ForwardTrace | None = field(default=None, repr=False)

    def __getitem__(self, key):
        return self.grads[key]

    def keys(self):
        return self.grads.keys()

    def norm(self):
        return core.l2_norm(list(self.grads.values()))

    def flat(self):
        return core.flatten_concat(list(self.grads.values()))

    def map(self, fn):
        return GradientBundle({k: fn(v) for k, v in self.grads.items()},
                              self.delta, self.sigma, self.trace)

    def copy(self):
        return self.map(np.copy)

    def attacker_view(self):
        return GradientView(self.grads)

    def target_grads(self):
        return {k: v for k, v in self.grads.items() if k.startswith(TARGET_PREFIX)}


# --- forward / backward ------------------------------------------------------


def conv_forward(conv_w, images):
    """1x1 convolution without bias: (B,C,H,W) -> (B, 2C*H*W)."""
    b = images.shape[0]
    z = np.einsum("oc,bchw->bohw", conv_w, images)
    return z.reshape(b, -1)


def _tile_index(n, n_m):
    return np.arange(n) % n_m


def forward_backward(structure, target, params, images, labels, masks=None, tau=None):
    """Loss and closed-form gradients of the global model on one batch.

    ``images`` are the original samples (the target model's input); the
    separation branch sees ``images * masks``.  ``tau`` overrides the
    structure's output coefficient (non-target users run with a tiny one).
    """
    x = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 4 or x.shape[1:] != tuple(structure.image_shape):
        raise ShapeError(f"images {x.shape} do not match structure {structure.image_shape}")
    b = x.shape[0]
    if b > structure.batch_size:
        raise ShapeError(f"batch {b} exceeds structure batch_size {structure.batch_size}")
    tau = structure.tau if tau is None else float(tau)
    xm = x if masks is None else x * np.asarray(masks, dtype=np.float64)
    n = structure.n_pixels

    z = conv_forward(params[CONV], xm)
    acts = z @ params[WEIGHT].T + params[BIAS].sum(axis=0)
    i0, degenerate = _min_positive(acts)
    y_min = acts[np.arange(b), i0]
    notes = []
    for i in np.flatnonzero(degenerate):
        notes.append(f"sample {i}: no positive separation activation, routed to unit 1")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)

    m = metric_matrix(xm, i0 + 1, structure.K, structure.batch_size)
    m_rep = np.tile(m * structure.metric_scale(), structure.D_b)
    o = params[METRIC_W] @ m_rep + params[METRIC_B]
    tile = _tile_index(n, structure.N_m)
    t = x.reshape(b, n) + tau * y_min[:, None] + tau * o[tile][None, :]

    loss, grads, dt = target.loss_and_grads(params, t, labels)

    g = tau * dt.sum(axis=1)
    d_o = tau * np.bincount(tile, weights=dt.sum(axis=0), minlength=structure.N_m)

    d_w = np.zeros_like(params[WEIGHT])
    np.add.at(d_w, i0, g[:, None] * z)
    col = np.bincount(i0, weights=g, minlength=structure.K)
    d_b = np.broadcast_to(col, params[BIAS].shape).copy()
    dz = (g[:, None] * params[WEIGHT][i0]).reshape(b, 2 * structure.channels, -1)
    d_conv = np.einsum("bop,bcp->oc", dz, xm.reshape(b, structure.channels, -1))

    out = {
        CONV: d_conv,
        WEIGHT: d_w,
        BIAS: d_b,
        METRIC_W: np.outer(d_o, m_rep),
        METRIC_B: d_o,
    }
    out.update(grads)
    trace = ForwardTrace(
        reverse_indices=i0 + 1,
        degenerate=degenerate,
        y_min=y_min,
        metric_matrix=m,
        masked_images=xm,
        upstream=g,
        warnings=notes,
    )
    return loss, GradientBundle(out, trace=trace)


def separation_backward(structure, masked_images, upstream, params=None):
    """Weight- and bias-layer gradients for a given upstream dL/dy_min.

    Isolates the separation layer from the rest of the network.
    """
    xm = np.asarray(masked_images, dtype=np.float64)
    if params is None:
        c = structure.channels
        conv = np.zeros((2 * c, c))
        conv[:c] = np.eye(c)
        w = np.full((structure.K, structure.D_in), structure.w0)
        bias = np.tile(structure.bias_values(), (structure.D_b, 1))
    else:
        conv, w, bias = params[CONV], params[WEIGHT], params[BIAS]
    z = conv_forward(conv, xm)
    i0, _ = _min_positive(z @ w.T + bias.sum(axis=0))
    d_w = np.zeros_like(w)
    np.add.at(d_w, i0, np.asarray(upstream)[:, None] * z)
    col = np.bincount(i0, weights=upstream, minlength=structure.K)
    return d_w, np.broadcast_to(col, bias.shape).copy(), i0 + 1


# --- parameter container -----------------------------------------------------

_MAGIC = b"LDPG"
_VERSION = 1


def dump_params(params):
    """Serialize named float64 arrays.

    Layout (little-endian): ``b"LDPG"``, u16 version, u32 count; then per
    array: u16 name length, UTF-8 name, u8 ndim, ndim x u64 dims; then every
    array's data as row-major float64, in header order.
    """
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<HI", _VERSION, len(params)))
    arrays = []
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        arrays.append(arr)
    for arr in arrays:
        buf.write(arr.tobytes())
    return buf.getvalue()


def load_params(data):
    view = memoryview(data)
    if bytes(view[:4]) != _MAGIC:
        raise ParseError("not a parameter container")
    try:
        version, count = struct.unpack_from("<HI", view, 4)
        if version != _VERSION:
            raise ParseError(f"unsupported container version {version}")
        pos = 10
        header = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + name_len]).decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", view, pos)
            pos += 8 * ndim
            header.append((name, shape))
    except struct.error as exc:
        raise ParseError("truncated container header") from exc
    out = {}
    for name, shape in header:
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + size > len(view):
            raise ParseError(f"truncated data for {name!r}")
        out[name] = np.frombuffer(view[pos : pos + size], dtype="<f8").reshape(shape).copy()
        pos += size
    return out
