"""Per-patch feature tokens.

The toy encoder is training-free and strictly local: flatten each patch,
project through a fixed seeded random matrix, L2-normalize, add a fixed
sinusoidal positional code, renormalize.  Externally computed embeddings can
replace it via PTGR files.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fovgen import fileio
from fovgen.errors import ConfigError, GeometryError
from fovgen.foveation import FixationMask, ImageBuffer

POS_SCALE = 0.5  # relative weight of the positional code vs. patch content


@dataclass
class EncoderConfig:
    patch_size: int = 14
    dim: int = 768
    seed: int = 0
    mode: str = "random-projection"  # or "learned"

    def __post_init__(self):
        if self.dim < 8:
            raise ConfigError("encoder dim must be >= 8")
        if self.mode not in ("random-projection", "learned"):
            raise ConfigError(f"unknown encoder mode {self.mode!r}")


@dataclass
class PatchTokenGrid:
    tokens: np.ndarray  # (G, G, D)
    provenance: str = "toy-encoder"

    def __post_init__(self):
        t = np.asarray(self.tokens)
        if t.ndim != 3 or t.shape[0] != t.shape[1]:
            raise GeometryError(f"token grid must be (G, G, D), got {t.shape}")
        self.tokens = t

    @property
    def grid_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]


def positional_code(grid_size: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal code, one unit-norm row per patch, scaled by
    POS_SCALE.  Half the dims encode the row index, half the column."""
    half = dim // 2
    quarter = max(half // 2, 1)
    freqs = np.exp(-math.log(100.0) * np.arange(quarter) / quarter)
    r = np.arange(grid_size)[:, None] * freqs[None, :]
    c = np.arange(grid_size)[:, None] * freqs[None, :]
    row_code = np.concatenate([np.sin(r), np.cos(r)], axis=1)  # (G, 2*quarter)
    col_code = np.concatenate([np.sin(c), np.cos(c)], axis=1)
    code = np.zeros((grid_size, grid_size, dim), dtype=np.float64)
    code[:, :, : row_code.shape[1]] = row_code[:, None, :]
    code[:, :, half : half + col_code.shape[1]] = col_code[None, :, :]
    norms = np.linalg.norm(code, axis=2, keepdims=True)
    return (POS_SCALE * code / norms).astype(np.float32)


def _l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unit-normalize rows; exact zero rows stay zero."""
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


class ToyPatchEncoder:
    """Deterministic patch tokenizer.  Immutable after construction, so one
    instance can be shared across worker threads."""

    def __init__(self, cfg: EncoderConfig, projection: np.ndarray | None = None):
        self.cfg = cfg
        d_patch = cfg.patch_size * cfg.patch_size * 3
        if cfg.mode == "learned":
            if projection is None:
                raise ConfigError("learned mode requires an explicit projection matrix")
            if projection.shape != (d_patch, cfg.dim):
                raise GeometryError(
                    f"projection must be ({d_patch}, {cfg.dim}), got {projection.shape}"
                )
            self.projection = projection.astype(np.float32)
        else:
            rng = np.random.default_rng(cfg.seed)
            self.projection = (
                rng.standard_normal((d_patch, cfg.dim)) / math.sqrt(d_patch)
            ).astype(np.float32)
        self._pos_cache: dict[int, np.ndarray] = {}

    def _pos(self, g: int) -> np.ndarray:
        if g not in self._pos_cache:
            self._pos_cache[g] = positional_code(g, self.cfg.dim)
        return self._pos_cache[g]

    def encode_batch(self, images: np.ndarray) -> np.ndarray:
        """(N, S, S, 3) images -> (N, G, G, D) tokens."""
        n, h, w = images.shape[:3]
        p = self.cfg.patch_size
        if h != w or h % p:
            raise GeometryError(f"need square images with side divisible by {p}, got {h}x{w}")
        g = h // p
        patches = images.reshape(n, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5)
        flat = patches.reshape(n, g, g, p * p * 3).astype(np.float32)
        feats = _l2_normalize(flat @ self.projection)
        tokens = _l2_normalize(feats + self._pos(g)[None])
        return tokens

    def encode(self, img: ImageBuffer) -> PatchTokenGrid:
        tokens = self.encode_batch(img.pixels[None])[0]
        return PatchTokenGrid(tokens, provenance="toy-encoder")

    def pooled_embedding(self, img: ImageBuffer) -> np.ndarray:
        """Mean patch token; the whole-image embedding used by FID sweeps and
        the simulated observer."""
        return self.encode(img).tokens.mean(axis=(0, 1))

    def pooled_batch(self, images: np.ndarray) -> np.ndarray:
        return self.encode_batch(images).mean(axis=(1, 2))


def encode_patches(img: ImageBuffer, cfg: EncoderConfig) -> PatchTokenGrid:
    """One-shot convenience wrapper around ToyPatchEncoder."""
    return ToyPatchEncoder(cfg).encode(img)


def apply_mask(grid: PatchTokenGrid, mask: FixationMask) -> PatchTokenGrid:
    """Keep tokens where the mask bit is set, zero vectors elsewhere."""
    if mask.bits.shape[0] != grid.grid_size:
        raise GeometryError(
            f"mask grid {mask.bits.shape[0]} != token grid {grid.grid_size}"
        )
    kept = np.where(mask.bits[:, :, None], grid.tokens, 0.0)
    return PatchTokenGrid(kept.astype(grid.tokens.dtype), provenance=grid.provenance)


def load_embeddings(path) -> PatchTokenGrid:
    """Ingest an externally computed PTGR token grid."""
    tokens, meta = fileio.load_ptgr(path)
    return PatchTokenGrid(tokens, provenance=meta.get("provenance", "file"))


def save_embeddings(path, grid: PatchTokenGrid, extra: dict | None = None):
    fileio.save_ptgr(path, grid.tokens, provenance=grid.provenance, extra=extra)
