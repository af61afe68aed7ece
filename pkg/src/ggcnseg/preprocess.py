"""Data preparation: band normalisation, coregistration, truncated signed
distance labels, patch extraction and a synthetic scene generator.

Images are float arrays laid out ``H x W x C`` (or ``H x W`` for a single
band); masks are ``H x W`` arrays of 0/1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DimensionError, GenerationError, NoSignalError

LUMA = (0.299, 0.587, 0.114)


def normalize_bands(img: np.ndarray) -> np.ndarray:
    """Per-band min-max scaling to [0, 1]; a constant band becomes all zeros."""
    a = np.asarray(img, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[..., None]
    lo = a.min(axis=(0, 1), keepdims=True)
    span = a.max(axis=(0, 1), keepdims=True) - lo
    out = np.where(span > 0, (a - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out[..., 0] if squeeze else out


def to_grayscale(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise DimensionError(f"grayscale conversion needs an H x W x 3 image, got {a.shape}")
    return a @ np.array(LUMA)


def _gaussian_kernels(sigma: float):
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    d = x * g
    # unit response to a unit-slope ramp under correlation
    d /= (x * d).sum()
    return g, d


def gaussian_gradient_magnitude(gray: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """|grad| of the Gaussian-smoothed image using derivative-of-Gaussian kernels.

    Kernel radius is ceil(3 sigma); borders use half-sample reflection.
    """
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    a = np.asarray(gray, dtype=np.float64)
    g, d = _gaussian_kernels(sigma)
    gx = ndimage.correlate1d(ndimage.correlate1d(a, g, axis=0, mode="reflect"), d, axis=1, mode="reflect")
    gy = ndimage.correlate1d(ndimage.correlate1d(a, d, axis=0, mode="reflect"), g, axis=1, mode="reflect")
    return np.sqrt(gx * gx + gy * gy)


@dataclass(frozen=True)
class ShiftEstimate:
    dy: int
    dx: int
    peak_score: float


def mask_edges(mask: np.ndarray) -> np.ndarray:
    """Building pixels with a background 4-neighbour or on the image border."""
    m = np.asarray(mask).astype(bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def coregister(gradmag: np.ndarray, mask: np.ndarray, max_shift: int, use_edges: bool = True) -> ShiftEstimate:
    """Integer offset that best aligns ``mask`` with the image gradient.

    The score of offset (dy, dx) is the mean of ``gradmag[y, x] * ref[y-dy, x-dx]``
    over the overlapping window, where ``ref`` is the mask boundary
    (``use_edges``) or the filled mask. Applying the returned offset to the
    mask with :func:`apply_shift` aligns it to the image. Ties prefer the
    smaller ``|dy| + |dx|``, then the lexicographically smaller offset.
    """
    G = np.asarray(gradmag, dtype=np.float64)
    M = np.asarray(mask)
    if G.shape != M.shape:
        raise DimensionError(f"gradient {G.shape} and mask {M.shape} differ in size")
    if max_shift < 0:
        raise ConfigurationError("max_shift must be non-negative")
    if not M.any():
        raise NoSignalError("mask contains no building pixels")
    if not np.any(G > 0):
        raise NoSignalError("gradient magnitude is zero everywhere")
    ref = mask_edges(M).astype(np.float64) if use_edges else (M != 0).astype(np.float64)
    H, W = G.shape
    best = None
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            y0, y1 = max(0, dy), min(H, H + dy)
            x0, x1 = max(0, dx), min(W, W + dx)
            if y1 <= y0 or x1 <= x0:
                continue
            area = (y1 - y0) * (x1 - x0)
            score = float((G[y0:y1, x0:x1] * ref[y0 - dy:y1 - dy, x0 - dx:x1 - dx]).sum()) / area
            key = (-score, abs(dy) + abs(dx), dy, dx)
            if best is None or key < best:
                best = key
    return ShiftEstimate(best[2], best[3], -best[0])


def apply_shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[y, x] = mask[y - dy, x - dx]``, zero where the source falls outside."""
    m = np.asarray(mask)
    out = np.zeros_like(m)
    H, W = m.shape
    y0, y1 = max(0, dy), min(H, H + dy)
    x0, x1 = max(0, dx), min(W, W + dx)
    if y1 > y0 and x1 > x0:
        out[y0:y1, x0:x1] = m[y0 - dy:y1 - dy, x0 - dx:x1 - dx]
    return out


# ---------------------------------------------------------------------------
# Truncated signed distance map


def _edt_1d(f: np.ndarray) -> np.ndarray:
    """Lower envelope of parabolas: min_q (p - q)^2 + f[q] for every p."""
    n = len(f)
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    # skip leading infinite samples, they contribute no parabola
    finite = np.flatnonzero(np.isfinite(f))
    if len(finite) == 0:
        d.fill(np.inf)
        return d
    v[0] = finite[0]
    z[0], z[1] = -np.inf, np.inf
    for q in finite[1:]:
        while True:
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        k += 1
        v[k] = q
        z[k] = -np.inf if k == 0 else s
        z[k + 1] = np.inf
    k = 0
    for p in range(n):
        while z[k + 1] < p:
            k += 1
        d[p] = (p - v[k]) ** 2 + f[v[k]]
    return d


def squared_edt(targets: np.ndarray) -> np.ndarray:
    """Squared euclidean distance from each pixel to the nearest ``True`` pixel.

    Exact two-pass separable transform; inf when there are no targets.
    """
    t = np.asarray(targets, dtype=bool)
    f = np.where(t, 0.0, np.inf)
    cols = np.stack([_edt_1d(f[:, j]) for j in range(f.shape[1])], axis=1)
    return np.stack([_edt_1d(cols[i, :]) for i in range(f.shape[0])], axis=0)


def signed_distance(mask: np.ndarray) -> np.ndarray:
    """Rounded signed distance: positive inside buildings, 0 on their boundary pixels."""
    m = np.asarray(mask).astype(bool)
    boundary = mask_edges(m)
    inside = np.rint(np.sqrt(squared_edt(boundary)))
    outside = np.rint(np.sqrt(squared_edt(m)))
    return np.where(m, inside, -outside)


def tsdm(mask: np.ndarray, T_d: int = 5) -> np.ndarray:
    """Truncated signed distance classes in ``0 .. 2*T_d``; class ``T_d`` marks boundaries."""
    if T_d < 1:
        raise ConfigurationError(f"truncation threshold must be >= 1, got {T_d}")
    d = np.clip(signed_distance(mask), -T_d, T_d)
    return (d + T_d).astype(np.int64)


def binary_from_tsdm(labels: np.ndarray, T_d: int = 5) -> np.ndarray:
    return (np.asarray(labels) >= T_d).astype(np.uint8)


# ---------------------------------------------------------------------------
# Patches


def patch_anchors(size: int, patch: int, overlap: int) -> list:
    """Start offsets along one axis; the last patch is pinned to the far edge."""
    if patch > size:
        raise ConfigurationError(f"patch {patch} larger than image dimension {size}")
    if not 0 <= overlap < patch:
        raise ConfigurationError(f"overlap must lie in [0, {patch}), got {overlap}")
    stride = patch - overlap
    anchors = list(range(0, size - patch + 1, stride))
    if anchors[-1] != size - patch:
        anchors.append(size - patch)
    return anchors


def extract_patches(img: np.ndarray, labels: np.ndarray, patch: int = 64, overlap: int = 19) -> list:
    """(image patch, label patch) pairs in row-major anchor order."""
    H, W = labels.shape[:2]
    if img.shape[:2] != (H, W):
        raise DimensionError(f"image {img.shape[:2]} and labels {(H, W)} differ in size")
    out = []
    for y in patch_anchors(H, patch, overlap):
        for x in patch_anchors(W, patch, overlap):
            out.append((img[y:y + patch, x:x + patch], labels[y:y + patch, x:x + patch]))
    return out


# ---------------------------------------------------------------------------
# Synthetic scenes


def synth_scene(seed: int, h: int, w: int, n_buildings: int, shift=(0, 0), noise: float = 0.05,
                min_size: int = 4, max_size: int | None = None, margin: int | None = None,
                max_tries: int = 1000):
    """Random rectangles on a textured background.

    Returns ``(image, mask_true, mask_shifted)`` where ``mask_shifted`` is the
    true mask displaced by ``-shift``; coregistering it against the image
    therefore recovers ``shift``. Buildings keep a one-pixel gap from each
    other and stay ``margin`` pixels (default ``max|shift| + 1``) from the border.
    """
    rng = np.random.default_rng(seed)
    dy, dx = int(shift[0]), int(shift[1])
    if margin is None:
        margin = max(abs(dy), abs(dx)) + 1
    if max_size is None:
        max_size = max(min_size, min(h, w) // 3)
    if n_buildings and (h - 2 * margin < min_size or w - 2 * margin < min_size):
        raise GenerationError(f"{h}x{w} scene too small for buildings with margin {margin}")
    mask = np.zeros((h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    rects = []
    tries = 0
    while len(rects) < n_buildings:
        tries += 1
        if tries > max_tries:
            raise GenerationError(f"could not place {n_buildings} buildings in {max_tries} attempts")
        bh = int(rng.integers(min_size, max_size + 1))
        bw = int(rng.integers(min_size, max_size + 1))
        if bh > h - 2 * margin or bw > w - 2 * margin:
            continue
        y = int(rng.integers(margin, h - margin - bh + 1))
        x = int(rng.integers(margin, w - margin - bw + 1))
        if occupied[max(0, y - 1):y + bh + 1, max(0, x - 1):x + bw + 1].any():
            continue
        occupied[y:y + bh, x:x + bw] = True
        mask[y:y + bh, x:x + bw] = 1
        rects.append((y, x, bh, bw))
    bg = rng.uniform(0.1, 0.3, size=3)
    img = np.broadcast_to(bg, (h, w, 3)).copy()
    for y, x, bh, bw in rects:
        img[y:y + bh, x:x + bw] = rng.uniform(0.55, 0.95, size=3)
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img, mask, apply_shift(mask, -dy, -dx)
