"""Synthetic victim data, subject masks and PPM/PGM image I/O."""

import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ldprecon._validation import check_images
from ldprecon.exceptions import MaskingError, ParseError, ShapeError

NUM_CLASSES = 4
BACKGROUND_MAX = 0.3
SUBJECT_MIN = 0.45


@dataclass(frozen=True)
class ImageBatch:
    """B x C x H x W images in [0, 1] with labels and optional B x 1 x H x W masks."""

    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray | None = None

    def __post_init__(self):
        images = check_images(self.images)
        if images.min() < 0.0 or images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if labels.shape[0] != images.shape[0]:
            raise ShapeError(f"{labels.shape[0]} labels for {images.shape[0]} images")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        if self.masks is not None:
            object.__setattr__(self, "masks", _check_masks(self.masks, images.shape))

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return self.images.shape

    def subset(self, idx):
        idx = np.asarray(idx)
        masks = None if self.masks is None else self.masks[idx]
        return ImageBatch(self.images[idx], self.labels[idx], masks)


def _check_masks(masks, image_shape):
    m = np.asarray(masks, dtype=np.float64)
    if m.ndim == 3:
        m = m[:, None]
    b, _, h, w = image_shape
    if m.shape != (b, 1, h, w):
        raise ShapeError(f"mask shape {m.shape} does not match images {image_shape}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("mask entries must be 0 or 1")
    return np.ascontiguousarray(m)


@dataclass(frozen=True)
class SubjectSpec:
    """Geometry of the generated subjects.

    ``radius`` fixes the disk radius (pixels) and ``jitter`` the maximum
    center offset as a fraction of the side; ``shapes`` restricts the
    drawn shapes.  Unset fields are drawn at random per sample.
    """

    shapes: tuple = ("disk", "rect")
    radius: float | None = None
    size_range: tuple = (1 / 8, 1 / 3)
    jitter: float = 0.15


def _smooth_background(rng, c, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    bg = np.zeros((c, h, w))
    for ch in range(c):
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            bg[ch] += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        bg[ch] += 0.5 * rng.normal(1.0, size=(h, w))
    bg -= bg.min(axis=(1, 2), keepdims=True)
    bg /= bg.max(axis=(1, 2), keepdims=True) + 1e-12
    level = rng.uniform(0.4, 1.0)
    return BACKGROUND_MAX * level * bg


def gen_synthetic_batch(rng, B, C, H, W, subject_spec=SubjectSpec()):
    """Textured backgrounds with one bright geometric subject each.

    Labels encode ``2 * shape + intensity_class`` (disk=0, rect=1; dim=0,
    bright=1) and are balanced across the four classes.  Returned masks are
    the exact subject supports.
    """
    if B < 1 or C not in (1, 3) or H < 8 or W < 8:
        raise ShapeError(f"invalid batch geometry B={B} C={C} H={H} W={W}")
    shapes = tuple(subject_spec.shapes)
    allowed = [k for k in range(NUM_CLASSES) if ("disk", "rect")[k // 2] in shapes]
    labels = np.array([allowed[i % len(allowed)] for i in range(B)])
    labels = labels[rng.permutation(B)]

    images = np.empty((B, C, H, W))
    masks = np.zeros((B, 1, H, W))
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    side = min(H, W)
    for i in range(B):
        shape = ("disk", "rect")[labels[i] // 2]
        bright = labels[i] % 2
        cy = H / 2 + rng.uniform(-1, 1) * subject_spec.jitter * H
        cx = W / 2 + rng.uniform(-1, 1) * subject_spec.jitter * W
        lo, hi = subject_spec.size_range
        if shape == "disk":
            r = subject_spec.radius
            if r is None:
                r = rng.uniform(lo, hi) * side
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            hh, hw = rng.uniform(lo, hi, size=2) * side
            mask = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        if not mask.any():
            mask[int(H // 2), int(W // 2)] = True

        level = rng.uniform(0.78, 0.95) if bright else rng.uniform(0.5, 0.7)
        color = np.clip(level + rng.uniform(-0.05, 0.05, size=C), SUBJECT_MIN + 0.02, 0.97)
        texture = 0.03 * rng.uniform(-1, 1, size=(C, H, W))
        subject = np.clip(color[:, None, None] + texture, SUBJECT_MIN, 1.0)
        img = _smooth_background(rng, C, H, W)
        img = np.where(mask[None], subject, img)
        images[i] = np.floor(img * 255.0 + 0.5) / 255.0
        masks[i, 0] = mask
    return ImageBatch(images, labels, masks)


class MaskProvider(BaseEstimator, TransformerMixin):
    """Produces a B x 1 x H x W {0,1} mask batch for an :class:`ImageBatch`."""

    strategy = "base"

    def fit(self, batch=None, y=None):
        return self

    def transform(self, batch):
        raise NotImplementedError

    def _finish(self, batch, masks):
        b, _, h, w = batch.images.shape
        masks = np.asarray(masks, dtype=np.float64)
        for i in range(b):
            if masks.shape[1:] != (1, h, w) or masks.shape[0] != b:
                raise MaskingError(min(i, masks.shape[0] - 1), f"mask shape {masks.shape[1:]}")
            if not np.all((masks[i] == 0) | (masks[i] == 1)):
                raise MaskingError(i, "mask is not binary")
        return masks


class OracleMask(MaskProvider):
    """Ground-truth subject masks recorded by the generator."""

    strategy = "oracle"

    def transform(self, batch):
        if batch.masks is None:
            raise MaskingError(0, "batch carries no ground-truth masks")
        return self._finish(batch, batch.masks.copy())


class LuminanceThresholdMask(MaskProvider):
    """Keep pixels whose channel-mean luminance exceeds ``threshold``."""

    strategy = "luminance-threshold"

    def __init__(self, threshold=0.4):
        self.threshold = threshold

    def transform(self, batch):
        lum = batch.images.mean(axis=1, keepdims=True)
        masks = (lum > self.threshold).astype(np.float64)
        for i in range(len(batch)):
            if not masks[i].any():
                raise MaskingError(i, f"no pixel above luminance {self.threshold}")
        return self._finish(batch, masks)


class ExternalFileMask(MaskProvider):
    """Masks read from P5 files, one per sample, with values in {0, 255}."""

    strategy = "external-file"

    def __init__(self, paths=()):
        self.paths = paths

    def transform(self, batch):
        b, _, h, w = batch.images.shape
        if len(self.paths) < b:
            raise MaskingError(len(self.paths), "no mask file for this sample")
        out = np.zeros((b, 1, h, w))
        for i in range(b):
            try:
                m = read_mask(Path(self.paths[i]).read_bytes())
            except (OSError, ParseError) as exc:
                raise MaskingError(i, str(exc)) from exc
            if m.shape != (1, h, w):
                raise MaskingError(i, f"mask file shape {m.shape} != {(1, h, w)}")
            out[i] = m
        return self._finish(batch, out)


MASK_PROVIDERS = {
    "oracle": OracleMask,
    "luminance-threshold": LuminanceThresholdMask,
    "external-file": ExternalFileMask,
}


def make_mask_provider(strategy, **params):
    try:
        return MASK_PROVIDERS[strategy](**params)
    except KeyError:
        raise ValueError(f"unknown mask strategy {strategy!r}") from None


def extract_subject(batch, provider=None):
    """Zero every pixel outside the subject mask; attach the masks used."""
    provider = OracleMask() if provider is None else provider
    masks = provider.fit(batch).transform(batch)
    masked = np.where(masks == 1.0, batch.images, 0.0)
    return replace(batch, images=masked, masks=masks)


# --- PPM / PGM -------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _quantize(image):
    img = np.asarray(image, dtype=np.float64)
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("pixels must lie in [0, 1] to be written")
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def write_ppm(image):
    """Encode a C x H x W image (C=3 -> P6, C=1 -> P5), maxval 255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ShapeError(f"expected 1xHxW or 3xHxW, got {img.shape}")
    c, h, w = img.shape
    magic = b"P6" if c == 3 else b"P5"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + np.transpose(_quantize(img), (1, 2, 0)).tobytes()


def read_ppm(data):
    """Decode binary P5/P6 bytes into a C x H x W float image in [0, 1]."""
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise ParseError("truncated header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, width, height, maxval = tokens
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}")
    try:
        w, h, maxv = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise ParseError("non-integer header field") from exc
    if w < 1 or h < 1 or not 0 < maxv < 256:
        raise ParseError(f"bad header values {w}x{h} maxval {maxv}")
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise ParseError("missing whitespace after maxval")
    pos += 1
    c = 3 if magic == b"P6" else 1
    n = w * h * c
    payload = data[pos : pos + n]
    if len(payload) < n:
        raise ParseError(f"payload truncated: {len(payload)} of {n} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c)
    return np.transpose(arr, (2, 0, 1)).astype(np.float64) / maxv


def read_mask(data):
    """Decode a P5 mask with values in {0, 255} into a 1 x H x W {0,1} array."""
    m = read_ppm(data)
    if m.shape[0] != 1:
        raise ParseError("mask files must be P5")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ParseError("mask values must be 0 or 255")
    return m


def save_ppm(path, image):
    Path(path).write_bytes(write_ppm(image))


def load_ppm(path):
    return read_ppm(Path(path).read_bytes())
