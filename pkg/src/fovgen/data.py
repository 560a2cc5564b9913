"""Synthetic scene corpus for desk-scale training and experiments.

Each scene has global structure a blurred periphery can convey (two-tone sky/
ground split at a random horizon) plus local objects (discs, boxes, triangles)
whose identity and color only sharp foveal patches pin down.  Scenes are
generated deterministically from (seed, index), so a "dataset" is just a
seed and a count.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fovgen import fileio
from fovgen.foveation import ImageBuffer

_PALETTE = np.array(
    [
        [0.85, 0.25, 0.20],
        [0.95, 0.65, 0.15],
        [0.90, 0.85, 0.25],
        [0.30, 0.70, 0.30],
        [0.20, 0.55, 0.85],
        [0.45, 0.30, 0.75],
        [0.90, 0.45, 0.65],
        [0.55, 0.35, 0.20],
        [0.95, 0.95, 0.90],
        [0.15, 0.15, 0.20],
    ]
)


def _object_mask(kind: int, yy, xx, cy, cx, r):
    if kind == 0:  # disc
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 1:  # box
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * 0.8)
    # triangle (apex up)
    return (yy <= cy + r) & (yy >= cy - r) & (np.abs(xx - cx) <= (yy - (cy - r)) * 0.6)


def render_scene(seed: int, index: int, side: int = 64) -> np.ndarray:
    """(side, side, 3) float image in [0, 1]."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)

    sky, ground = rng.choice(len(_PALETTE), size=2, replace=False)
    top = _PALETTE[sky] * rng.uniform(0.7, 1.0)
    bottom = _PALETTE[ground] * rng.uniform(0.5, 0.95)
    horizon = rng.uniform(0.3, 0.7) * side
    sharp = rng.uniform(0.08, 0.25) * side
    blend = 1.0 / (1.0 + np.exp(-(yy - horizon) / sharp))
    img = top[None, None, :] * (1 - blend[:, :, None]) + bottom[None, None, :] * blend[:, :, None]

    # vertical shading keeps the gradient direction unambiguous
    shade = 1.0 - 0.25 * (yy / side)[:, :, None]
    img *= shade

    for _ in range(rng.integers(2, 5)):
        kind = int(rng.integers(0, 3))
        color = _PALETTE[rng.integers(0, len(_PALETTE))] * rng.uniform(0.6, 1.0)
        cy = rng.uniform(0.15, 0.85) * side
        cx = rng.uniform(0.15, 0.85) * side
        r = rng.uniform(0.08, 0.22) * side
        mask = _object_mask(kind, yy, xx, cy, cx, r)
        img[mask] = color

    return np.clip(img, 0.0, 1.0)


@dataclass
class SceneDataset:
    n: int
    side: int = 64
    seed: int = 1234

    def image(self, index: int) -> np.ndarray:
        if not (0 <= index < self.n):
            raise IndexError(index)
        return render_scene(self.seed, index, self.side)

    def buffer(self, index: int) -> ImageBuffer:
        return ImageBuffer(self.image(index))

    def batch(self, indices) -> np.ndarray:
        return np.stack([self.image(int(i)) for i in indices])

    def stimulus_id(self, index: int) -> str:
        return f"scene-{self.seed}-{index:05d}"

    def index_of(self, stimulus_id: str) -> int:
        return int(stimulus_id.rsplit("-", 1)[1])

    def export_pngs(self, out_dir, indices=None) -> list[str]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        indices = range(self.n) if indices is None else indices
        paths = []
        for i in indices:
            p = out_dir / f"{self.stimulus_id(int(i))}.png"
            fileio.save_png(p, self.image(int(i)))
            paths.append(str(p))
        return paths
