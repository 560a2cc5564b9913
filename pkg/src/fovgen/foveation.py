"""Gaze geometry: fixation -> patch mapping, fixation masks, peripheral blur.

Conventions (used by every module downstream):
  * image coordinates are (x right, y down), origin at the top-left pixel;
  * a patch is the half-open square [col*p, (col+1)*p) x [row*p, (row+1)*p),
    so boundary fixations resolve by floor;
  * all operations are pure functions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fovgen.errors import CapacityError, DomainError, EmptyInputError, GeometryError


@dataclass
class ImageBuffer:
    """H x W x 3 pixels in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise GeometryError(f"expected HxWx3 pixels, got shape {px.shape}")
        if not np.isfinite(px).all():
            raise DomainError("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise DomainError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Fixation:
    x: float
    y: float
    onset_ms: float = 0.0
    duration_ms: float = 0.0


@dataclass
class FixationSequence:
    points: list[Fixation]
    source: str = "random"  # human | random | click-proxy

    def __post_init__(self):
        if not self.points:
            raise EmptyInputError("fixation sequence must contain at least one point")
        onsets = [p.onset_ms for p in self.points]
        if any(b <= a for a, b in zip(onsets, onsets[1:])):
            raise DomainError("fixation onsets must be strictly increasing")

    def __len__(self) -> int:
        return len(self.points)

    def to_json(self) -> list[dict]:
        return [
            {"x": p.x, "y": p.y, "onset_ms": p.onset_ms, "duration_ms": p.duration_ms}
            for p in self.points
        ]

    @classmethod
    def from_json(cls, items: list[dict], source: str = "human") -> "FixationSequence":
        pts = [
            Fixation(float(d["x"]), float(d["y"]), float(d["onset_ms"]), float(d["duration_ms"]))
            for d in items
        ]
        return cls(pts, source=source)


@dataclass
class FixationMask:
    bits: np.ndarray  # G x G bool
    retained_count: int = field(default=-1)

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if b.ndim != 2 or b.shape[0] != b.shape[1]:
            raise GeometryError(f"mask must be square, got {b.shape}")
        self.bits = b
        n = int(b.sum())
        if self.retained_count == -1:
            self.retained_count = n
        elif self.retained_count != n:
            raise DomainError("retained_count does not match set bits")

    @property
    def grid_size(self) -> int:
        return self.bits.shape[0]


def pad_to_square(img: ImageBuffer) -> ImageBuffer:
    """Zero-pad to S x S (S = max side), content anchored top-left."""
    h, w = img.height, img.width
    s = max(h, w)
    if h == w:
        return ImageBuffer(img.pixels.copy())
    out = np.zeros((s, s, 3), dtype=img.pixels.dtype)
    out[:h, :w] = img.pixels
    return ImageBuffer(out)


def _resize_weights(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix for 1-D triangle-filter resampling.

    Filter support scales with the downsampling factor (PIL-style), so heavy
    downsampling averages instead of point-sampling; upsampling reduces to
    classic bilinear interpolation.
    """
    w = np.zeros((n_out, n_in), dtype=dtype)
    support = max(1.0, n_in / n_out)
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        j0 = max(0, int(np.ceil(src - support)))
        j1 = min(n_in - 1, int(np.floor(src + support)))
        j = np.arange(j0, j1 + 1)
        tw = np.maximum(0.0, 1.0 - np.abs(j - src) / support)
        w[i, j0 : j1 + 1] = tw / tw.sum()
    return w


def resize_image(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable triangle-filter resize of an (H, W, C) array."""
    h, w = pixels.shape[:2]
    a = _resize_weights(h, out_h)
    b = _resize_weights(w, out_w)
    tmp = np.tensordot(a, pixels.astype(np.float64), axes=(1, 0))  # (out_h, W, C)
    out = np.tensordot(b, tmp, axes=(1, 1))  # (out_w, out_h, C)
    return out.transpose(1, 0, 2)


def blur_resample(img: ImageBuffer, scale: float) -> ImageBuffer:
    """Peripheral degradation: downsample to round(scale*S), upsample back."""
    if not (0.0 < scale <= 1.0):
        raise DomainError(f"blur scale must be in (0, 1], got {scale}")
    if img.height != img.width:
        raise GeometryError("blur_resample expects a square image")
    s = img.height
    if scale == 1.0:
        return ImageBuffer(img.pixels.copy())
    m = int(round(scale * s))
    if m < 1:
        raise DomainError(f"scale {scale} collapses a {s}px image below 1px")
    small = resize_image(img.pixels, m, m)
    big = resize_image(small, s, s)
    return ImageBuffer(np.clip(big, 0.0, 1.0).astype(img.pixels.dtype))


def fixation_to_patch_index(x: float, y: float, image_size: int, patch_size: int) -> tuple[int, int]:
    """Pixel coordinate -> (row, col) of the containing patch."""
    if image_size % patch_size:
        raise GeometryError(f"patch size {patch_size} does not divide image size {image_size}")
    if not (0 <= x < image_size and 0 <= y < image_size):
        raise DomainError(f"fixation ({x}, {y}) outside [0, {image_size})")
    return int(y // patch_size), int(x // patch_size)


def build_fixation_mask(fixes: FixationSequence, image_size: int, patch_size: int) -> FixationMask:
    """Binary G x G mask with a bit per patch containing >= 1 fixation."""
    g = image_size // patch_size
    if image_size % patch_size:
        raise GeometryError(f"patch size {patch_size} does not divide image size {image_size}")
    bits = np.zeros((g, g), dtype=bool)
    for p in fixes.points:
        r, c = fixation_to_patch_index(p.x, p.y, image_size, patch_size)
        bits[r, c] = True
    return FixationMask(bits)


def patch_center(row: int, col: int, patch_size: int) -> tuple[float, float]:
    """(x, y) pixel coordinate of a patch center."""
    return col * patch_size + patch_size / 2.0, row * patch_size + patch_size / 2.0


def sample_random_fixations(
    n: int, image_size: int, seed, patch_size: int = 14
) -> FixationSequence:
    """n fixations at the centers of n distinct uniformly-drawn patches."""
    g = image_size // patch_size
    if image_size % patch_size:
        raise GeometryError(f"patch size {patch_size} does not divide image size {image_size}")
    if n < 1:
        raise DomainError("need at least one fixation")
    if n > g * g:
        raise CapacityError(f"cannot place {n} distinct fixations on a {g}x{g} grid")
    rng = np.random.default_rng(seed)
    flat = rng.choice(g * g, size=n, replace=False)
    pts = []
    for i, f in enumerate(flat):
        r, c = divmod(int(f), g)
        x, y = patch_center(r, c, patch_size)
        pts.append(Fixation(x, y, onset_ms=100.0 + 250.0 * i, duration_ms=200.0))
    return FixationSequence(pts, source="random")
