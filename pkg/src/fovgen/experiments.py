"""Desk-scale experiment drivers: quality sweeps along the conditioning axes,
and the simulated same/different study feeding the analysis pipeline."""
from __future__ import annotations

import csv
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from fovgen import metrics
from fovgen.analysis import JudgmentTable
from fovgen.data import SceneDataset
from fovgen.diffusion import GenerativeModel, SamplerConfig, ddim_sample, noise_for_seed
from fovgen.errors import ConfigError
from fovgen.foveation import build_fixation_mask, sample_random_fixations
from fovgen.metrics import PairFeatureExtractor, build_reports

SWEEP_AXES = ("peripheral-scale", "blur-level", "foveal-tokens")
PERIPHERAL_SCALE_VALUES = (0.0, 0.175, 0.35, 0.525, 0.7)
BLUR_LEVEL_VALUES = (0.0625, 0.125, 0.25, 0.5, 1.0)
FOVEAL_TOKEN_VALUES = (1, 2, 3, 5, 10)


def run_parallel(fn, items, workers: int = 1):
    """Order-preserving parallel map for trial generation.

    BLAS pools are pinned to one thread for the whole region so results are
    bit-identical for any worker count.
    """
    items = list(items)
    with threadpool_limits(limits=1):
        if workers <= 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))


def trial_seed(base_seed: int, *parts) -> int:
    """Stable per-trial seed (crc32 of reprs, so it survives process restarts)."""
    h = np.random.SeedSequence([int(base_seed)] + [zlib.crc32(repr(p).encode()) for p in parts])
    return int(h.generate_state(1)[0])


def _generate_batch(model, images, masks, blur, condition, sc: SamplerConfig, seeds):
    conds = model.conditions_for(images, masks, blur, condition, sc.lambda_foveal, sc.lambda_peripheral)
    side = model.cfg.denoiser.side
    noise = np.concatenate([noise_for_seed(s, (1, 3, side, side)) for s in seeds])
    return ddim_sample(model, conds, sc, noise)


def _random_masks(model, count_per_image, side, seeds):
    patch = model.cfg.encoder.patch_size
    g = model.cfg.grid_size
    masks = np.zeros((len(seeds), g, g), dtype=bool)
    for i, s in enumerate(seeds):
        seq = sample_random_fixations(int(count_per_image[i]), side, s, patch_size=patch)
        masks[i] = build_fixation_mask(seq, side, patch).bits
    return masks


def _center_masks(model, n):
    g = model.cfg.grid_size
    m = np.zeros((n, g, g), dtype=bool)
    m[:, g // 2, g // 2] = True
    return m


@dataclass
class SweepRow:
    axis: str
    value: float
    fid: float
    mean_embed_distance: float
    n_images: int


def sweep_axis(
    model: GenerativeModel,
    dataset: SceneDataset,
    axis: str,
    values=None,
    n_images: int = 96,
    eval_offset: int = 0,
    reference_size: int = 256,
    sc: SamplerConfig | None = None,
    seed: int = 0,
    batch: int = 32,
) -> list[SweepRow]:
    """Generation-quality curve along one conditioning axis.

    peripheral-scale: vary the peripheral stream scale at fixed 0.25x blur
    with a single central fixation; blur-level: vary peripheral blur with the
    foveal stream nulled; foveal-tokens: vary random-fixation count with the
    peripheral stream nulled.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}")
    sc = sc or SamplerConfig(steps=15)
    if values is None:
        values = {
            "peripheral-scale": PERIPHERAL_SCALE_VALUES,
            "blur-level": BLUR_LEVEL_VALUES,
            "foveal-tokens": FOVEAL_TOKEN_VALUES,
        }[axis]
    side = model.cfg.denoiser.side
    idx = [eval_offset + i for i in range(n_images)]
    images = dataset.batch(idx)
    ref_idx = [eval_offset + n_images + i for i in range(reference_size)]
    ref_feats = model.encoder.pooled_batch(dataset.batch(ref_idx))
    src_embeds = model.encoder.pooled_batch(images)

    rows = []
    for v in values:
        gen_images = []
        for lo in range(0, n_images, batch):
            chunk = slice(lo, min(lo + batch, n_images))
            imgs = images[chunk]
            seeds = [trial_seed(seed, axis, float(v), i) for i in idx[chunk]]
            if axis == "peripheral-scale":
                sc_v = SamplerConfig(**{**sc.__dict__, "lambda_peripheral": float(v)})
                masks = _center_masks(model, imgs.shape[0])
                out = _generate_batch(model, imgs, masks, 0.25, "full", sc_v, seeds)
            elif axis == "blur-level":
                out = _generate_batch(model, imgs, None, float(v), "peripheral-only", sc, seeds)
            else:  # foveal-tokens
                masks = _random_masks(model, [int(v)] * imgs.shape[0], side, seeds)
                out = _generate_batch(model, imgs, masks, 0.25, "foveal-only", sc, seeds)
            gen_images.append(out)
        gen = np.concatenate(gen_images)
        gen_feats = model.encoder.pooled_batch(gen)
        fid_v = metrics.fid(ref_feats, gen_feats)
        dists = [metrics.embed_distance(src_embeds[i], gen_feats[i]) for i in range(n_images)]
        rows.append(SweepRow(axis, float(v), fid_v, float(np.mean(dists)), n_images))
    return rows


def write_sweep_csv(path, rows: list[SweepRow]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["axis", "value", "fid", "mean_embed_distance", "n_images"])
        for r in rows:
            w.writerow([r.axis, r.value, r.fid, r.mean_embed_distance, r.n_images])


def read_sweep_csv(path) -> list[SweepRow]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            out.append(
                SweepRow(row["axis"], float(row["value"]), float(row["fid"]),
                         float(row["mean_embed_distance"]), int(row["n_images"]))
            )
    return out


# ---------------------------------------------------------------------------
# simulated behavioral study


@dataclass
class ObserverConfig:
    tau: float | None = None      # None -> quantile of pooled generated distances
    tau_quantile: float = 0.6
    noise_sigma: float = 0.05
    rt_base_ms: float = 650.0
    rt_jitter_ms: float = 120.0


def simulate_study(
    model: GenerativeModel,
    dataset: SceneDataset,
    trials_per_condition: int = 520,
    conditions=("original", "full", "peripheral-only", "foveal-only"),
    blur_scale: float = 0.25,
    fixation_counts=(1, 2, 3, 5, 10),
    observer: ObserverConfig | None = None,
    sc: SamplerConfig | None = None,
    seed: int = 0,
    eval_offset: int = 0,
    n_stimuli: int = 64,
    batch: int = 32,
    build_feature_reports: bool = True,
    report_workers: int = 2,
):
    """Generate trials end-to-end and judge them with the simulated observer.

    Returns (JudgmentTable, feature reports, per-trial distances dict).
    """
    observer = observer or ObserverConfig()
    sc = sc or SamplerConfig(steps=10)
    side = model.cfg.denoiser.side

    trials = []  # (condition, trial_index, stim_index, fix_count, gen_seed)
    for cond in conditions:
        for i in range(trials_per_condition):
            stim = eval_offset + (i % n_stimuli)
            count = fixation_counts[i % len(fixation_counts)]
            gseed = trial_seed(seed, cond, i)
            trials.append((cond, i, stim, count, gseed))

    # generate per condition in batches
    gen_by_key = {}
    for cond in conditions:
        cond_trials = [t for t in trials if t[0] == cond]
        for lo in range(0, len(cond_trials), batch):
            chunk = cond_trials[lo : lo + batch]
            imgs = dataset.batch([t[2] for t in chunk])
            if cond == "original":
                out = imgs
            else:
                seeds = [t[4] for t in chunk]
                if cond in ("full", "foveal-only"):
                    masks = _random_masks(model, [t[3] for t in chunk], side, seeds)
                else:
                    masks = None
                out = _generate_batch(model, imgs, masks, blur_scale, cond, sc, seeds)
            for t, g in zip(chunk, out):
                gen_by_key[(t[0], t[1])] = g

    # distances and observer responses
    dist = {}
    for cond, i, stim, _, _ in trials:
        orig = dataset.image(stim)
        gen = gen_by_key[(cond, i)]
        e_o = model.encoder.pooled_batch(orig[None])[0]
        e_g = model.encoder.pooled_batch(gen[None])[0]
        dist[(cond, i)] = metrics.embed_distance(e_o, e_g)

    if observer.tau is None:
        pooled = [d for (c, _), d in dist.items() if c != "original"]
        tau = float(np.quantile(pooled, observer.tau_quantile)) if pooled else 0.5
    else:
        tau = observer.tau

    table = JudgmentTable()
    for cond, i, stim, count, gseed in trials:
        rng = np.random.default_rng(trial_seed(seed, "observer", cond, i))
        d = dist[(cond, i)]
        resp = "same" if d + observer.noise_sigma * rng.standard_normal() < tau else "different"
        rt = observer.rt_base_ms + observer.rt_jitter_ms * abs(rng.standard_normal())
        pair_id = f"{cond}/{dataset.stimulus_id(stim)}/t{i:04d}"
        table.add(pair_id, cond, resp, rt)

    reports = []
    if build_feature_reports:
        extractor = PairFeatureExtractor(model.encoder)
        jobs = [
            {
                "pair_id": f"{cond}/{dataset.stimulus_id(stim)}/t{i:04d}",
                "orig": dataset.image(stim),
                "gen": gen_by_key[(cond, i)],
            }
            for cond, i, stim, _, _ in trials
        ]
        reports = build_reports(jobs, extractor, workers=report_workers)

    meta = {"tau": tau, "distances": {f"{c}/{i}": d for (c, i), d in dist.items()}}
    return table, reports, meta
