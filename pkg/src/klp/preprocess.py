"""Radiograph preprocessing: spacing normalisation, bit-depth reduction,
intensity normalisation, patch geometry and training-time augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import sparse

REFERENCE_SPACING = 0.2  # mm per pixel
PATCH_SIZE = 700  # px at reference spacing, i.e. 140 mm
MODEL_INPUT = 256


@dataclass
class Raster:
    """A 2-D grayscale image with isotropic pixel spacing in mm."""

    samples: np.ndarray
    spacing: float = REFERENCE_SPACING

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise ValueError(f"raster samples must be 2-D, got shape {self.samples.shape}")
        if not self.spacing > 0:
            raise ValueError(f"pixel spacing must be positive, got {self.spacing}")

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
        np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0),
    )


def resample_matrix(n_in: int, n_out: int) -> sparse.csr_matrix:
    """1-D bicubic resampling operator of shape (n_out, n_in).

    Pixel centres are aligned, borders are clamped, and each row is
    normalised to sum to one. When shrinking, the kernel is stretched by the
    reduction factor so that every input sample contributes.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"cannot resample {n_in} samples to {n_out}")
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    reach = int(math.ceil(2 * support)) + 1
    base = np.floor(centers).astype(np.int64)
    offsets = np.arange(-reach + 1, reach + 1)
    taps = base[:, None] + offsets[None, :]
    w = cubic_kernel((taps - centers[:, None]) / support)
    w /= w.sum(axis=1, keepdims=True)
    cols = np.clip(taps, 0, n_in - 1)
    rows = np.repeat(np.arange(n_out), taps.shape[1])
    m = sparse.coo_matrix((w.ravel(), (rows, cols.ravel())), shape=(n_out, n_in))
    m.sum_duplicates()
    return m.tocsr()


def resize(samples: np.ndarray, height: int, width: int) -> np.ndarray:
    """Separable bicubic resize of a 2-D array."""
    samples = np.asarray(samples, dtype=np.float64)
    h, w = samples.shape
    out = samples
    if h != height:
        out = resample_matrix(h, height) @ out
    if w != width:
        out = (resample_matrix(w, width) @ out.T).T
    return np.ascontiguousarray(out, dtype=np.float64)


def resample_to_reference(img: Raster, reference: float = REFERENCE_SPACING) -> Raster:
    """Resample to ``reference`` mm/px; output size is round(size * spacing / reference)."""
    h = int(round(img.height * img.spacing / reference))
    w = int(round(img.width * img.spacing / reference))
    if h < 1 or w < 1:
        raise ValueError(f"resampling {img.width}x{img.height} at {img.spacing} mm/px gives an empty image")
    if (h, w) == img.samples.shape:
        return Raster(img.samples.astype(np.float64, copy=True), reference)
    return Raster(resize(img.samples, h, w), reference)


def to_8bit(img: Raster) -> Raster:
    """Per-image min-max rescale to 0..255, rounding half up. Constant images map to 0."""
    x = np.asarray(img.samples, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return Raster(np.zeros(x.shape, dtype=np.uint8), img.spacing)
    y = np.floor((x - lo) * (255.0 / (hi - lo)) + 0.5)
    return Raster(np.clip(y, 0, 255).astype(np.uint8), img.spacing)


def normalize(img: Raster) -> Raster:
    """Divide by the image maximum, then subtract the population std of the result."""
    x = np.asarray(img.samples, dtype=np.float64)
    peak = x.max()
    if not peak > 0:
        raise ValueError("cannot normalise an image whose maximum is not positive")
    y = x / peak
    return Raster(y - y.std(), img.spacing)


def preprocess(img: Raster) -> Raster:
    """Full chain in fixed order: resample, 8-bit conversion, normalisation."""
    return normalize(to_8bit(resample_to_reference(img)))


def crop_patch(img: Raster, center: Tuple[float, float], size: int = PATCH_SIZE) -> Raster:
    """Square crop of side ``size`` centred at ``center`` = (x, y); out-of-bounds area is zero."""
    cx, cy = center
    if not (0 <= cx < img.width and 0 <= cy < img.height):
        raise ValueError(f"crop centre ({cx:.1f}, {cy:.1f}) outside {img.width}x{img.height} image")
    x0 = int(math.floor(cx + 0.5)) - size // 2
    y0 = int(math.floor(cy + 0.5)) - size // 2
    out = np.zeros((size, size), dtype=np.float64)
    sy0, sy1 = max(y0, 0), min(y0 + size, img.height)
    sx0, sx1 = max(x0, 0), min(x0 + size, img.width)
    out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = img.samples[sy0:sy1, sx0:sx1]
    return Raster(out, img.spacing)


def resize_patch(img: Raster, size: int = MODEL_INPUT) -> Raster:
    if img.height != img.width:
        raise ValueError(f"patch must be square, got {img.width}x{img.height}")
    return Raster(resize(img.samples, size, size), img.spacing * img.width / size)


@dataclass(frozen=True)
class AugmentSpec:
    flip_prob: float = 0.5
    rotation_deg: float = 10.0
    translation: float = 0.05
    scale: Tuple[float, float] = (0.9, 1.1)
    shear_deg: float = 5.0
    seed: int = 0

    def __post_init__(self):
        vals = (self.flip_prob, self.rotation_deg, self.translation, *self.scale, self.shear_deg)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("augmentation ranges must be finite")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip probability must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(0.0, 0.0, 0.0, (1.0, 1.0), 0.0)


def sample_affine(spec: AugmentSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a forward 2x3 affine (output coords from input coords) about the patch centre."""
    ang = math.radians(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    sh = math.radians(rng.uniform(-spec.shear_deg, spec.shear_deg))
    sc = rng.uniform(*spec.scale)
    tx, ty = rng.uniform(-spec.translation, spec.translation, size=2) * size
    c, s = math.cos(ang), math.sin(ang)
    a = sc * np.array([[c, -s], [s, c]]) @ np.array([[1.0, math.tan(sh)], [0.0, 1.0]])
    mid = (size - 1) / 2.0
    t = np.array([mid + tx, mid + ty]) - a @ np.array([mid, mid])
    return np.hstack([a, t[:, None]])


def flip_affine(size: int) -> np.ndarray:
    return np.array([[-1.0, 0.0, size - 1.0], [0.0, 1.0, 0.0]])


def compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    o = np.vstack([outer, [0, 0, 1]])
    i = np.vstack([inner, [0, 0, 1]])
    return (o @ i)[:2]


def warp_affine(samples: np.ndarray, forward: np.ndarray) -> np.ndarray:
    """Resample ``samples`` under the forward affine map with bicubic taps and zero fill."""
    h, w = samples.shape
    full = np.vstack([forward, [0, 0, 1]])
    inv = np.linalg.inv(full)[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]
    sy = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]
    # snap coordinates that are integral up to round-off so pure flips are exact
    rx, ry = np.round(sx), np.round(sy)
    sx = np.where(np.abs(sx - rx) < 1e-9, rx, sx)
    sy = np.where(np.abs(sy - ry) < 1e-9, ry, sy)
    x0, y0 = np.floor(sx).astype(np.int64), np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    padded = np.pad(np.asarray(samples, dtype=np.float64), 2)
    out = np.zeros((h, w))
    for dy in range(-1, 3):
        wy = cubic_kernel(fy - dy)
        yi = np.clip(y0 + dy + 2, 0, h + 3)
        for dx in range(-1, 3):
            wx = cubic_kernel(fx - dx)
            xi = np.clip(x0 + dx + 2, 0, w + 3)
            out += wy * wx * padded[yi, xi]
    inside = (sx > -1) & (sx < w) & (sy > -1) & (sy < h)
    return np.where(inside, out, 0.0)


def augment(pa: np.ndarray, lat: np.ndarray, spec: AugmentSpec,
            rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Random affine augmentation of a PA/LAT patch pair.

    One flip decision is shared by both views; rotation, translation, scale
    and shear are drawn independently per view.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    flip = rng.random() < spec.flip_prob
    out = []
    for patch in (pa, lat):
        if patch is None:
            out.append(None)
            continue
        size = patch.shape[0]
        fwd = sample_affine(spec, size, rng)
        if flip:
            fwd = compose(fwd, flip_affine(size))
        out.append(warp_affine(patch, fwd))
    return out[0], out[1]
