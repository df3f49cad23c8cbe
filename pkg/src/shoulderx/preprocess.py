"""Radiograph preprocessing: content crop, CLAHE, resize, ImageNet
normalisation, plus rotation augmentation.

Images are numpy ``uint8`` arrays shaped (H, W) for gray or (H, W, 3) for
RGB. Normalised tensors are float64 arrays shaped (320, 320, 3).
"""
from __future__ import annotations

import hashlib
import io
import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from PIL import Image

from shoulderx._io import atomic_write_bytes

log = logging.getLogger(__name__)

OUTPUT_SIZE = (320, 320)
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])  # ITU-R BT.601
MAX_ROTATION_DEG = 10.0


class DegenerateHistogram(ValueError):
    pass


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def as_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {img.dtype}")
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise ValueError(f"expected (H, W) or (H, W, 1|3) image, got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("empty image")
    return img


def to_grayscale(img) -> np.ndarray:
    img = as_image(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"to_grayscale needs a 3-channel image, got shape {img.shape}")
    g = img.astype(np.float64) @ LUMA_WEIGHTS
    return np.clip(_round_half_up(g), 0, 255).astype(np.uint8)


def _gray_plane(img) -> np.ndarray:
    img = as_image(img)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[:, :, 0]
    return to_grayscale(img)


def histogram(gray) -> np.ndarray:
    return np.bincount(np.asarray(gray, dtype=np.uint8).ravel(), minlength=256)


def otsu_threshold(hist) -> int:
    """Otsu threshold for a 256-bin count histogram.

    Pixels <= t form one class and > t the other. Returns the smallest t
    minimising the within-class variance; the comparison is done in exact
    rational arithmetic so ties are genuine ties.
    """
    h = [int(c) for c in np.asarray(hist).ravel()]
    if len(h) != 256:
        raise ValueError("histogram must have 256 bins")
    if any(c < 0 for c in h):
        raise ValueError("histogram counts must be non-negative")
    occupied = [v for v, c in enumerate(h) if c]
    if len(occupied) < 2:
        raise DegenerateHistogram("degenerate histogram: fewer than two occupied levels")
    total_n = sum(h)
    total_s = sum(v * c for v, c in enumerate(h))
    # within-class variance * N = sum(x^2) - s0^2/n0 - s1^2/n1, so maximise s0^2/n0 + s1^2/n1
    best_t, best = None, None
    n0 = s0 = 0
    for t in range(occupied[0], occupied[-1]):
        n0 += h[t]
        s0 += t * h[t]
        if h[t] == 0 and best_t is not None:
            continue  # same split as t - 1
        n1, s1 = total_n - n0, total_s - s0
        score = Fraction(s0 * s0, n0) + Fraction(s1 * s1, n1)
        if best is None or score > best:
            best_t, best = t, score
    return best_t


def binarize(gray, t_low: int, t_high: int = 255) -> np.ndarray:
    """Foreground mask of pixels with t_low < value <= t_high."""
    if not 0 <= t_low <= t_high <= 255:
        raise ValueError(f"need 0 <= t_low <= t_high <= 255, got {t_low}, {t_high}")
    g = np.asarray(gray)
    return (g > t_low) & (g <= t_high)


def foreground_bbox(mask) -> tuple[int, int, int, int]:
    """Inclusive (r0, c0, r1, c1) around the foreground; the full image if empty."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        log.info("empty foreground mask; keeping the full image")
        return 0, 0, mask.shape[0] - 1, mask.shape[1] - 1
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def content_bbox(img, margin: int = 2) -> tuple[int, int, int, int]:
    """Otsu-thresholded content box grown by ``margin`` and clamped to the image."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    gray = _gray_plane(img)
    h, w = gray.shape
    try:
        t = otsu_threshold(histogram(gray))
    except DegenerateHistogram:
        log.info("single-level image; keeping the full image")
        return 0, 0, h - 1, w - 1
    r0, c0, r1, c1 = foreground_bbox(binarize(gray, t, 255))
    return max(r0 - margin, 0), max(c0 - margin, 0), min(r1 + margin, h - 1), min(c1 + margin, w - 1)


def crop_to_content(img, margin: int = 2) -> np.ndarray:
    img = as_image(img)
    r0, c0, r1, c1 = content_bbox(img, margin)
    return img[r0:r1 + 1, c0:c1 + 1].copy()


# -- CLAHE -----------------------------------------------------------------

@dataclass(frozen=True)
class ClaheParams:
    tile_rows: int = 8
    tile_cols: int = 8
    clip_limit: float = 2.0  # multiple of the uniform bin height; math.inf disables clipping

    def __post_init__(self):
        if self.tile_rows <= 0 or self.tile_cols <= 0:
            raise ValueError("tile grid must be positive")
        if not self.clip_limit > 0:
            raise ValueError("clip_limit must be positive")

    def fitted_to(self, shape) -> "ClaheParams":
        """Same parameters with the grid shrunk to fit a small image."""
        rows, cols = min(self.tile_rows, shape[0]), min(self.tile_cols, shape[1])
        if (rows, cols) != (self.tile_rows, self.tile_cols):
            log.info("CLAHE grid %dx%d reduced to %dx%d for %s image",
                     self.tile_rows, self.tile_cols, rows, cols, shape)
        return ClaheParams(rows, cols, self.clip_limit)


def clahe_tile_luts(gray, params: ClaheParams) -> np.ndarray:
    """Per-tile equalisation maps, shape (tile_rows, tile_cols, 256), float.

    The image is mirror-padded (edge row/column repeated) at the
    bottom/right to a multiple of the grid.
    Each tile histogram is clipped at ``clip_limit * tile_pixels / 256`` and
    the clipped mass spread evenly over all 256 bins.
    """
    gray = np.asarray(gray, dtype=np.uint8)
    rows, cols = params.tile_rows, params.tile_cols
    h, w = gray.shape
    th, tw = -(-h // rows), -(-w // cols)
    padded = np.pad(gray, ((0, th * rows - h), (0, tw * cols - w)), mode="symmetric")
    tiles = padded.reshape(rows, th, cols, tw).transpose(0, 2, 1, 3).reshape(rows * cols, th * tw)
    offsets = (np.arange(rows * cols) * 256)[:, None]
    hist = np.bincount((tiles.astype(np.int64) + offsets).ravel(), minlength=rows * cols * 256)
    hist = hist.reshape(rows * cols, 256).astype(np.float64)
    npix = th * tw
    if math.isfinite(params.clip_limit):
        limit = params.clip_limit * npix / 256.0
        excess = np.maximum(hist - limit, 0.0).sum(axis=1, keepdims=True)
        hist = np.minimum(hist, limit) + excess / 256.0
    cdf = np.cumsum(hist, axis=1)
    return (cdf * 255.0 / npix).reshape(rows, cols, 256)


def _interp_axis(n: int, tiles: int):
    """Neighbouring tile indices and weight of the second one, per pixel."""
    size = -(-n // tiles)
    pos = (np.arange(n) + 0.5) / size - 0.5
    lo = np.floor(pos).astype(np.int64)
    wt = pos - lo
    i0 = np.clip(lo, 0, tiles - 1)
    i1 = np.clip(lo + 1, 0, tiles - 1)
    wt = np.where(i0 == i1, 0.0, wt)
    return i0, i1, wt


def clahe(gray, params: ClaheParams = ClaheParams()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation of a gray image.

    Pixel values are mapped through the four surrounding tile maps and
    blended bilinearly by distance to the tile centres; pixels outside the
    outermost centres use two (edges) or one (corners) map.
    """
    gray = as_image(gray)
    if gray.ndim != 2:
        raise ValueError("clahe expects a single-channel image")
    h, w = gray.shape
    if h < params.tile_rows or w < params.tile_cols:
        raise ValueError(f"image {h}x{w} is smaller than the {params.tile_rows}x{params.tile_cols} tile grid")
    lut = clahe_tile_luts(gray, params)
    r0, r1, wy = _interp_axis(h, params.tile_rows)
    c0, c1, wx = _interp_axis(w, params.tile_cols)
    R0, R1, C0, C1 = r0[:, None], r1[:, None], c0[None, :], c1[None, :]
    WY, WX = wy[:, None], wx[None, :]
    top = (1.0 - WX) * lut[R0, C0, gray] + WX * lut[R0, C1, gray]
    bot = (1.0 - WX) * lut[R1, C0, gray] + WX * lut[R1, C1, gray]
    out = (1.0 - WY) * top + WY * bot
    return np.clip(_round_half_up(out), 0, 255).astype(np.uint8)


# -- geometry --------------------------------------------------------------

def _bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Sample float image at (sy, sx) grids; coordinates must lie in bounds."""
    h, w = img.shape[:2]
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.where(y1 == y0, 0.0, sy - y0)
    wx = np.where(x1 == x0, 0.0, sx - x0)
    if img.ndim == 3:
        wy, wx = wy[..., None], wx[..., None]
    top = (1.0 - wx) * img[y0, x0] + wx * img[y0, x1]
    bot = (1.0 - wx) * img[y1, x0] + wx * img[y1, x1]
    return (1.0 - wy) * top + wy * bot


def resize_bilinear(img, out_h: int = OUTPUT_SIZE[0], out_w: int = OUTPUT_SIZE[1]) -> np.ndarray:
    """Bilinear resize with half-pixel-centre alignment (edge-clamped)."""
    img = as_image(img)
    if out_h <= 0 or out_w <= 0:
        raise ValueError("target size must be positive")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    out = _bilinear_sample(img.astype(np.float64), sy[:, None], sx[None, :])
    return np.clip(_round_half_up(out), 0, 255).astype(np.uint8)


def rotate(img, angle_deg: float) -> np.ndarray:
    """Rotate about the image centre; samples from outside the frame are 0."""
    img = as_image(img)
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(angle_deg)
    cos, sin = math.cos(th), math.sin(th)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source location
    sy = cos * dy - sin * dx + cy
    sx = sin * dy + cos * dx + cx
    inside = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
    vals = _bilinear_sample(img.astype(np.float64), np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1))
    mask = inside[..., None] if img.ndim == 3 else inside
    vals = np.where(mask, vals, 0.0)
    return np.clip(_round_half_up(vals), 0, 255).astype(np.uint8)


def sample_rotation_angle(rng: np.random.Generator, max_deg: float = MAX_ROTATION_DEG) -> float:
    return float(rng.uniform(-max_deg, max_deg))


def augmentation_seed(global_seed: int, sample_id: str) -> np.random.SeedSequence:
    """Per-image seed derived from the run seed and the sample id."""
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    return np.random.SeedSequence([int(global_seed) & (2 ** 64 - 1), int.from_bytes(digest[:8], "little")])


def rotate_augment(img, rng_seed, max_deg: float = MAX_ROTATION_DEG,
                   angle: float | None = None) -> np.ndarray:
    """Rotate by an angle drawn uniformly from [-max_deg, max_deg].

    ``rng_seed`` is anything ``np.random.default_rng`` accepts; ``angle``
    overrides the draw.
    """
    if angle is None:
        angle = sample_rotation_angle(np.random.default_rng(rng_seed), max_deg)
    return rotate(img, angle)


# -- normalisation ---------------------------------------------------------

def normalize_imagenet(img) -> np.ndarray:
    img = as_image(img)
    if img.shape != (*OUTPUT_SIZE, 3):
        raise ValueError(f"expected {(*OUTPUT_SIZE, 3)} image, got {img.shape}")
    return (img.astype(np.float64) / 255.0 - IMAGENET_MEAN) / IMAGENET_STD


def denormalize_imagenet(tensor) -> np.ndarray:
    """Inverse of :func:`normalize_imagenet` in 0..255 units, unrounded."""
    return (np.asarray(tensor, dtype=np.float64) * IMAGENET_STD + IMAGENET_MEAN) * 255.0


# -- pipeline --------------------------------------------------------------

def preprocess_image(raw, params: ClaheParams = ClaheParams(), margin: int = 2,
                     size: tuple[int, int] = OUTPUT_SIZE) -> np.ndarray:
    """Crop to content, CLAHE the gray plane, replicate to 3 channels, resize.

    Returns the 8-bit image that :func:`preprocess_pipeline` normalises.
    """
    raw = as_image(raw)
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    elif raw.shape[2] == 1:
        raw = np.repeat(raw, 3, axis=2)
    cropped = crop_to_content(raw, margin)
    gray = to_grayscale(cropped)
    eq = clahe(gray, params.fitted_to(gray.shape))
    rgb = np.repeat(eq[:, :, None], 3, axis=2)
    return resize_bilinear(rgb, *size)


def preprocess_pipeline(raw, params: ClaheParams = ClaheParams(), margin: int = 2) -> np.ndarray:
    return normalize_imagenet(preprocess_image(raw, params, margin))


# -- png I/O ---------------------------------------------------------------

def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def encode_png(img) -> bytes:
    img = as_image(img)
    buf = io.BytesIO()
    Image.fromarray(img.squeeze() if img.ndim == 3 and img.shape[2] == 1 else img).save(buf, format="PNG")
    return buf.getvalue()


def save_png(img, path) -> None:
    atomic_write_bytes(path, encode_png(img))
