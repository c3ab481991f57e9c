"""Image-side features: the spectral-histogram edgeness field and vertical
line support regions.

Images are ``(H, W, 3)`` RGB arrays with values in ``[0, 255]``; rows are
``v`` (downward) and columns are ``u``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import ImageTooSmall, LengthMismatch, WindowOutOfBounds

N_BANDS = 5


@dataclass(frozen=True)
class SpectralHistogramConfig:
    window: int = 17
    bins_per_band: int = 11
    log_sigmas: tuple = (0.5, 1.0)
    rgb_weight: float = 0.5
    border_margin: int | None = None  # defaults to the window size

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.bins_per_band < 2:
            raise ValueError("need at least 2 bins")
        if len(self.log_sigmas) != 2 or any(s <= 0 for s in self.log_sigmas):
            raise ValueError("need two positive LoG sigmas")
        if not 0 < self.rgb_weight <= 1:
            raise ValueError("rgb_weight must be in (0, 1]")
        object.__setattr__(self, "log_sigmas", tuple(float(s) for s in self.log_sigmas))

    @property
    def half(self) -> int:
        return (self.window - 1) // 2

    @property
    def margin(self) -> int:
        return self.window if self.border_margin is None else int(self.border_margin)

    @property
    def band_weights(self) -> np.ndarray:
        return np.array([self.rgb_weight] * 3 + [1.0, 1.0])


def to_gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        return img
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


@lru_cache(maxsize=None)
def log_kernel(sigma: float) -> np.ndarray:
    """Sampled Laplacian of Gaussian, radius ``ceil(4 sigma)``, zero-sum."""
    r = int(math.ceil(4 * sigma))
    y, x = np.mgrid[-r : r + 1, -r : r + 1].astype(float)
    r2 = (x**2 + y**2) / (2 * sigma**2)
    k = (r2 - 1.0) / (math.pi * sigma**4) * np.exp(-r2)
    k -= k.mean()
    k.setflags(write=False)
    return k


def log_response(gray, sigma: float) -> np.ndarray:
    return ndimage.convolve(np.asarray(gray, dtype=float), log_kernel(sigma), mode="reflect")


@lru_cache(maxsize=None)
def log_range(sigma: float) -> float:
    """Peak absolute response to a 0 -> 255 step edge; LoG values are clamped to +-this."""
    r = int(math.ceil(4 * sigma))
    step = np.zeros((2 * r + 1, 4 * r + 4))
    step[:, 2 * r + 2 :] = 255.0
    return float(np.abs(log_response(step, sigma)).max())


def bin_bands(image, cfg: SpectralHistogramConfig = SpectralHistogramConfig()) -> np.ndarray:
    """Per-pixel bin labels for the five bands (R, G, B, LoG_s1, LoG_s2).

    Returns a ``(5, H, W)`` uint8 stack.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) RGB image")
    nb = cfg.bins_per_band
    out = np.empty((N_BANDS,) + img.shape[:2], np.uint8)
    rgb = np.clip(img, 0.0, 255.0)
    out[:3] = np.minimum(np.floor(rgb * (nb / 256.0)), nb - 1).astype(np.uint8).transpose(2, 0, 1)
    gray = to_gray(img)
    for k, sigma in enumerate(cfg.log_sigmas):
        r = log_range(sigma)
        resp = np.clip(log_response(gray, sigma), -r, r)
        out[3 + k] = np.minimum(np.floor((resp + r) / (2 * r) * nb), nb - 1).astype(np.uint8)
    return out


def spectral_histogram(labels, x: int, y: int, cfg: SpectralHistogramConfig = SpectralHistogramConfig()) -> np.ndarray:
    """Weighted, per-band normalized histogram of the window centered at column ``x``, row ``y``."""
    labels = np.asarray(labels)
    _, H, W = labels.shape
    h = cfg.half
    if x - h < 0 or y - h < 0 or x + h >= W or y + h >= H:
        raise WindowOutOfBounds(f"window at ({x}, {y}) leaves the image")
    nb = cfg.bins_per_band
    win = labels[:, y - h : y + h + 1, x - h : x + h + 1].reshape(labels.shape[0], -1)
    hist = np.stack([np.bincount(band, minlength=nb) for band in win]).astype(float)
    hist /= cfg.window * cfg.window
    hist *= cfg.band_weights[:, None]
    return hist.reshape(-1)


class IntegralHistogram:
    """Summed-area tables, one per (band, bin), giving O(bins) window counts."""

    def __init__(self, labels, n_bins: int):
        labels = np.asarray(labels)
        if labels.ndim == 2:
            labels = labels[None]
        self.n_bands, self.height, self.width = labels.shape
        self.n_bins = int(n_bins)
        table = np.zeros((self.n_bands, self.n_bins, self.height + 1, self.width + 1), np.int32)
        for b in range(self.n_bands):
            for k in range(self.n_bins):
                ind = (labels[b] == k).astype(np.int32)
                np.cumsum(ind, axis=0, out=table[b, k, 1:, 1:])
                np.cumsum(table[b, k, 1:, 1:], axis=1, out=table[b, k, 1:, 1:])
        self.table = table

    def query(self, row0: int, col0: int, row1: int, col1: int) -> np.ndarray:
        """Counts over rows ``row0:row1`` and columns ``col0:col1`` (ends exclusive), shape ``(bands, bins)``."""
        if not (0 <= row0 <= row1 <= self.height and 0 <= col0 <= col1 <= self.width):
            raise WindowOutOfBounds("query window leaves the image")
        t = self.table
        return (
            t[:, :, row1, col1].astype(np.int64)
            - t[:, :, row0, col1]
            - t[:, :, row1, col0]
            + t[:, :, row0, col0]
        )

    def box_counts(self, half: int) -> np.ndarray:
        """Counts of every fully-inside ``(2*half+1)^2`` window, indexed by window center.

        Shape ``(bands, bins, H - 2*half, W - 2*half)``; entry ``[..., i, j]``
        belongs to the window centered at row ``i + half``, column ``j + half``.
        """
        w = 2 * half + 1
        t = self.table
        return t[:, :, w:, w:] - t[:, :, :-w, w:] - t[:, :, w:, :-w] + t[:, :, :-w, :-w]


def chi_square(hist_a, hist_b) -> float:
    a = np.asarray(hist_a, dtype=float)
    b = np.asarray(hist_b, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"histogram shapes differ: {a.shape} vs {b.shape}")
    s = a + b
    nz = s > 0
    return float(np.sum((a[nz] - b[nz]) ** 2 / s[nz]))


def _chi_terms(a, b):
    """Per-pixel chi-square summed over bins for integer count stacks ``(bins, H, W)``."""
    # int16 holds the counts and their sum/difference, but not the squared difference
    d = (a - b).astype(np.float32)
    den = np.maximum(a + b, 1).astype(np.float32)  # a + b == 0 implies d == 0
    num = d * d
    return (num / den).sum(axis=0, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class EdgenessField:
    scores: np.ndarray
    cfg: SpectralHistogramConfig

    @property
    def shape(self):
        return self.scores.shape


def edgeness_field(image, cfg: SpectralHistogramConfig = SpectralHistogramConfig()) -> EdgenessField:
    """Sum of chi-square distances between windows offset by +-h horizontally and vertically."""
    img = np.asarray(image)
    H, W = img.shape[:2]
    if H < 4 * cfg.window or W < 4 * cfg.window:
        raise ImageTooSmall(f"image {W}x{H} smaller than 4 windows")
    labels = bin_bands(img, cfg)
    h = cfg.half
    area = float(cfg.window * cfg.window)
    # scores are computed for centers h*2 .. size-1-2h; indexes below are into the
    # box-count grid whose origin is the pixel (h, h)
    rows = slice(h, H - 3 * h)
    cols = slice(h, W - 3 * h)
    score = np.zeros((H - 4 * h, W - 4 * h))
    for band in range(N_BANDS):
        # bins absent from the whole image contribute nothing; drop them
        present = np.bincount(labels[band].ravel(), minlength=cfg.bins_per_band) > 0
        if present.sum() < 2:
            continue
        lut = (np.cumsum(present) - 1).astype(np.uint8)
        ih = IntegralHistogram(lut[labels[band]], int(present.sum()))
        f = ih.box_counts(h)[0].astype(np.int16)
        right = f[:, rows, 2 * h :]
        left = f[:, rows, : W - 4 * h]
        below = f[:, 2 * h :, cols]
        above = f[:, : H - 4 * h, cols]
        # chi-square is homogeneous of degree 1, so scale counts to frequencies afterwards
        score += (_chi_terms(right, left) + _chi_terms(below, above)) * (cfg.band_weights[band] / area)
    out = np.zeros((H, W))
    out[2 * h : H - 2 * h, 2 * h : W - 2 * h] = score
    m = cfg.margin
    if m > 0:
        out[:m] = 0.0
        out[-m:] = 0.0
        out[:, :m] = 0.0
        out[:, -m:] = 0.0
    out.setflags(write=False)
    return EdgenessField(out, cfg)


def edgeness_naive(image, x: int, y: int, cfg: SpectralHistogramConfig = SpectralHistogramConfig()) -> float:
    """Direct evaluation at one pixel from explicit window histograms."""
    labels = bin_bands(image, cfg)
    h = cfg.half
    return chi_square(spectral_histogram(labels, x + h, y, cfg), spectral_histogram(labels, x - h, y, cfg)) + chi_square(
        spectral_histogram(labels, x, y + h, cfg), spectral_histogram(labels, x, y - h, cfg)
    )


@dataclass(frozen=True, eq=False)
class LineSupportRegion:
    rows: np.ndarray
    cols: np.ndarray
    bbox: tuple  # (row0, col0, row1, col1), ends exclusive
    center: tuple  # (u, v) in continuous pixel coordinates

    @property
    def vertical_extent(self) -> int:
        return self.bbox[2] - self.bbox[0]

    @property
    def horizontal_extent(self) -> int:
        return self.bbox[3] - self.bbox[1]


def line_support_regions(
    image, angle_tol: float = 22.5, min_v: int = 50, max_h: int = 20
) -> list[LineSupportRegion]:
    """Connected groups of pixels whose gradient is within ``angle_tol`` of horizontal.

    Such pixels sit on near-vertical edges. Gradients are central differences;
    border pixels and pixels with a vanishing gradient are skipped.
    """
    gray = to_gray(image)
    H, W = gray.shape
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[1:-1, 1:-1] = 0.5 * (gray[1:-1, 2:] - gray[1:-1, :-2])
    gy[1:-1, 1:-1] = 0.5 * (gray[2:, 1:-1] - gray[:-2, 1:-1])
    mag = np.hypot(gx, gy)
    ok = (mag >= 1e-6) & (np.abs(gy) <= math.tan(math.radians(angle_tol)) * np.abs(gx))
    lab, n = ndimage.label(ok, structure=np.ones((3, 3), int))
    if n == 0:
        return []
    out = []
    order = np.argsort(lab, axis=None, kind="stable")
    flat = lab.reshape(-1)[order]
    bounds = np.searchsorted(flat, np.arange(1, n + 2))
    for k, sl in enumerate(ndimage.find_objects(lab)):
        if sl is None:
            continue
        r0, r1 = sl[0].start, sl[0].stop
        c0, c1 = sl[1].start, sl[1].stop
        if r1 - r0 < min_v or c1 - c0 > max_h:
            continue
        idx = order[bounds[k] : bounds[k + 1]]
        rows, cols = np.divmod(idx, W)
        center = (float(cols.mean()) + 0.5, float(rows.mean()) + 0.5)
        out.append(LineSupportRegion(rows, cols, (r0, c0, r1, c1), center))
    return out


def region_centers(regions) -> np.ndarray:
    if not regions:
        return np.zeros((0, 2))
    return np.array([r.center for r in regions], dtype=float)


def center_density(regions, query, sigma_px: float = 10.0, cutoff: float = 3.0) -> float:
    """Largest Gaussian kernel value any region center puts at ``query``."""
    c = regions if isinstance(regions, np.ndarray) else region_centers(regions)
    if len(c) == 0:
        return 0.0
    d2 = np.sum((c - np.asarray(query, dtype=float)) ** 2, axis=1)
    d2 = d2[d2 <= (cutoff * sigma_px) ** 2]
    if len(d2) == 0:
        return 0.0
    return float(np.exp(-d2.min() / (2 * sigma_px**2)))


def segment_density(centers, p0, p1, sigma_px: float = 10.0, cutoff: float = 3.0) -> np.ndarray:
    """Largest kernel value reached anywhere along each segment ``p0[i] -> p1[i]``.

    ``centers`` is an ``(M, 2)`` array of region centers; ``p0``/``p1`` are
    ``(N, 2)``. Returns ``(N,)``.
    """
    p0 = np.asarray(p0, dtype=float).reshape(-1, 2)
    p1 = np.asarray(p1, dtype=float).reshape(-1, 2)
    c = np.asarray(centers, dtype=float).reshape(-1, 2)
    if len(c) == 0 or len(p0) == 0:
        return np.zeros(len(p0))
    d = p1 - p0
    L2 = np.sum(d * d, axis=1)
    rel = c[None, :, :] - p0[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(L2[:, None] > 0, np.sum(rel * d[:, None, :], axis=2) / L2[:, None], 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = p0[:, None, :] + t[..., None] * d[:, None, :]
    d2 = np.sum((closest - c[None]) ** 2, axis=2).min(axis=1)
    return np.where(d2 <= (cutoff * sigma_px) ** 2, np.exp(-d2 / (2 * sigma_px**2)), 0.0)


def edgeness_debug_image(field: EdgenessField) -> np.ndarray:
    """16-bit image of ``score * 1e4``, saturating."""
    return np.clip(np.round(field.scores * 1e4), 0, 65535).astype(np.uint16)


def regions_overlay(image, regions, color=(255, 0, 0)) -> np.ndarray:
    """Copy of ``image`` with region pixels painted and centers marked."""
    out = np.array(image, dtype=np.uint8, copy=True)
    if out.ndim == 2:
        out = np.repeat(out[..., None], 3, axis=2)
    H, W = out.shape[:2]
    for r in regions:
        out[r.rows, r.cols] = color
        cu, cv = int(r.center[0]), int(r.center[1])
        out[max(cv - 2, 0) : cv + 3, max(cu - 2, 0) : cu + 3] = (255, 255, 0)
    return out
