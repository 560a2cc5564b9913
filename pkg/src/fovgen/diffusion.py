"""Noise schedule, training loop, and deterministic DDIM sampling for the
pixel-space model, plus the container bundling denoiser + resamplers +
condition bank + encoder into one checkpointable unit."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from fovgen import fileio, nn
from fovgen.conditioning import (
    ConditionBank,
    ConditioningSet,
    DualResampler,
    ResamplerConfig,
    condition_dropout,
)
from fovgen.encoder import EncoderConfig, ToyPatchEncoder
from fovgen.errors import ConfigError, DomainError, NumericError
from fovgen.foveation import (
    FixationSequence,
    ImageBuffer,
    blur_resample,
    build_fixation_mask,
    resize_image,
    sample_random_fixations,
)
from fovgen.unet import DenoiserConfig, UNetDenoiser

CONDITIONS = ("full", "foveal-only", "peripheral-only", "unconditional")


@dataclass
class NoiseSchedule:
    """Linear-beta schedule with fixed variance."""

    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if not (0.0 < self.beta_start < self.beta_end < 1.0):
            raise ConfigError("betas must satisfy 0 < start < end < 1")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.timesteps, dtype=np.float64)
        self.alphas_cumprod = np.cumprod(1.0 - self.betas)

    def check_t(self, t):
        t = np.asarray(t)
        if (t < 0).any() or (t >= self.timesteps).any():
            raise DomainError(f"timestep out of range [0, {self.timesteps})")
        return t


def forward_noise(x0, t, noise, sched: NoiseSchedule):
    """q-sample: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    t = sched.check_t(t)
    ab = sched.alphas_cumprod[t].reshape(-1, *([1] * (x0.ndim - 1)))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise).astype(x0.dtype)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    fixation_counts: tuple = (1, 2, 3, 5, 10)
    blur_scales: tuple = (0.0625, 0.125, 0.25, 0.5, 1.0)
    p_drop_foveal: float = 0.05
    p_drop_peripheral: float = 0.10
    seed: int = 0
    log_every: int = 50


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 1.0   # w; eps = eps_uncond + w (eps_cond - eps_uncond)
    cfg_pp: bool = False          # re-inject eps_uncond in the DDIM update
    lambda_foveal: float = 1.2
    lambda_peripheral: float = 0.7
    clip_x0: bool = True
    seed: int = 0

    def validate(self, sched: NoiseSchedule):
        if self.steps > sched.timesteps:
            raise ConfigError(f"sampler steps {self.steps} > schedule T {sched.timesteps}")
        if self.guidance_scale < 0:
            raise DomainError("guidance scale must be >= 0")


@dataclass
class ModelConfig:
    denoiser: DenoiserConfig = dataclasses.field(default_factory=DenoiserConfig)
    resampler: ResamplerConfig = dataclasses.field(default_factory=ResamplerConfig)
    encoder: EncoderConfig = dataclasses.field(
        default_factory=lambda: EncoderConfig(patch_size=4, dim=64, seed=0)
    )
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.denoiser.side % self.encoder.patch_size:
            raise ConfigError("encoder patch size must divide the image side")
        if self.resampler.in_dim != self.encoder.dim:
            raise ConfigError("resampler in_dim must equal encoder dim")
        if self.resampler.out_dim != self.denoiser.d_cond:
            raise ConfigError("resampler out_dim must equal denoiser d_cond")

    @property
    def grid_size(self) -> int:
        return self.denoiser.side // self.encoder.patch_size

    def to_dict(self) -> dict:
        return {
            "denoiser": dataclasses.asdict(self.denoiser),
            "resampler": dataclasses.asdict(self.resampler),
            "encoder": dataclasses.asdict(self.encoder),
            "timesteps": self.timesteps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            denoiser=DenoiserConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["denoiser"].items()}),
            resampler=ResamplerConfig(**d["resampler"]),
            encoder=EncoderConfig(**d["encoder"]),
            timesteps=d["timesteps"],
            beta_start=d["beta_start"],
            beta_end=d["beta_end"],
        )


class GenerativeModel:
    """Immutable-weight container used by the sampler, trainer, and service."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32, init_seed: int = 0):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(init_seed)
        self.unet = UNetDenoiser(cfg.denoiser, dtype=dtype)
        self.resamplers = DualResampler(cfg.resampler, rng, dtype=dtype)
        self.bank = ConditionBank(cfg.resampler.out_dim, cfg.resampler.num_latents, rng, dtype=dtype)
        self.encoder = ToyPatchEncoder(cfg.encoder)
        self.schedule = NoiseSchedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)

    # -- parameter plumbing ---------------------------------------------------

    def modules(self):
        return {"denoiser": self.unet, "resampler": self.resamplers, "conditions": self.bank}

    def params(self):
        for m in self.modules().values():
            yield from m.params()

    def zero_grad(self):
        for m in self.modules().values():
            m.zero_grad()

    def n_params(self):
        return sum(m.n_params() for m in self.modules().values())

    def save(self, path, extra_meta: dict | None = None):
        arrays = {}
        for prefix, mod in self.modules().items():
            for name, arr in mod.state_dict().items():
                arrays[f"{prefix}/{name}"] = arr
        meta = {"model_config": self.cfg.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        fileio.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path, dtype=np.float32):
        arrays, meta = fileio.load_checkpoint(path)
        model = cls(ModelConfig.from_dict(meta["model_config"]), dtype=dtype)
        for prefix, mod in model.modules().items():
            state = {
                name[len(prefix) + 1 :]: arr
                for name, arr in arrays.items()
                if name.startswith(prefix + "/")
            }
            mod.load_state_dict(state)
        return model, meta

    # -- conditioning ---------------------------------------------------------

    def _blur_batch(self, images: np.ndarray, scales) -> np.ndarray:
        out = np.empty_like(images)
        for i, s in enumerate(np.broadcast_to(scales, (images.shape[0],))):
            out[i] = blur_resample(ImageBuffer(images[i]), float(s)).pixels
        return out

    def conditions_for(
        self,
        images: np.ndarray,
        masks: np.ndarray | None,
        blur_scale,
        condition: str = "full",
        lam_f: float = 1.0,
        lam_p: float = 1.0,
    ) -> ConditioningSet:
        """Build inference conditions for a batch of [0,1] HWC images.

        ``masks`` is a (B, G, G) boolean fixation mask (ignored for
        peripheral-only / unconditional).
        """
        if condition not in CONDITIONS:
            raise ConfigError(f"unknown condition {condition!r}")
        b = images.shape[0]
        if condition == "unconditional":
            return self.bank.nulled_set(b, lam_f, lam_p)
        use_fov = condition in ("full", "foveal-only")
        use_per = condition in ("full", "peripheral-only")
        if use_fov:
            grids = self.encoder.encode_batch(images)
            grids = grids * masks[:, :, :, None].astype(grids.dtype)
            e_fov = self.resamplers.resample_batch(grids, "foveal")
        else:
            e_fov = self.bank.null_stream("foveal", b)
        if use_per:
            blurred = self._blur_batch(images, blur_scale)
            pgrids = self.encoder.encode_batch(blurred)
            e_per = self.resamplers.resample_batch(pgrids, "peripheral")
        else:
            e_per = self.bank.null_stream("peripheral", b)
        conds = self.bank.build(e_fov, e_per, lam_f, lam_p)
        conds.foveal_active = np.full(b, use_fov)
        conds.peripheral_active = np.full(b, use_per)
        return conds

    # -- feature taps (used by the multi-level similarity analysis) -----------

    def denoiser_features(self, images: np.ndarray, t_feat: int = 100) -> dict[str, np.ndarray]:
        """Early/mid/late activation maps for [0,1] HWC images, extracted from
        a single conditioning-free denoiser pass at a fixed timestep."""
        b = images.shape[0]
        x = (np.transpose(images, (0, 3, 1, 2)).astype(self.dtype)) * 2.0 - 1.0
        conds = self.bank.nulled_set(b)
        t = np.full(b, t_feat)
        taps: dict[str, np.ndarray] = {}
        temb_act = self.unet._temb(t)
        h = self.unet.conv_in.forward(x)
        skips = []
        for kind, name in self.unet.down_plan:
            if kind == "push":
                skips.append(h)
                continue
            mod = self.unet._children[name]
            if kind == "res":
                h = mod.forward(h, temb_act)
            elif kind == "cattn":
                h = mod.forward(h, conds)
            else:
                h = mod.forward(h)
            if kind == "down" and "early" not in taps:
                taps["early"] = h
        taps.setdefault("early", h)
        h = self.unet.mid1.forward(h, temb_act)
        h = self.unet.mid_sa.forward(h)
        h = self.unet.mid_ca.forward(h, conds)
        h = self.unet.mid2.forward(h, temb_act)
        taps["mid"] = h
        for kind, name in self.unet.up_plan:
            mod = self.unet._children[name]
            if kind == "res":
                h = mod.forward(np.concatenate([h, skips.pop()], axis=1), temb_act)
            elif kind == "cattn":
                h = mod.forward(h, conds)
            else:
                h = mod.forward(h)
        taps["late"] = h
        return taps


# ---------------------------------------------------------------------------
# training


class Trainer:
    def __init__(self, model: GenerativeModel, cfg: TrainConfig, emergency_path=None):
        self.model = model
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = nn.AdamW(
            model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay
        )
        self.emergency_path = emergency_path
        self.step_count = 0

    def draw_conditions(self, b: int):
        """Per-sample fixation counts, masks, and blur scales for a batch;
        counts and scales come only from the configured training sets."""
        cfg = self.cfg
        side = self.model.cfg.denoiser.side
        patch = self.model.cfg.encoder.patch_size
        g = self.model.cfg.grid_size
        counts = self.rng.choice(np.asarray(cfg.fixation_counts), size=b)
        masks = np.zeros((b, g, g), dtype=bool)
        for i, n in enumerate(counts):
            seq = sample_random_fixations(int(n), side, self.rng, patch_size=patch)
            masks[i] = build_fixation_mask(seq, side, patch).bits
        scales = self.rng.choice(np.asarray(cfg.blur_scales), size=b)
        return counts, masks, scales

    def training_step(self, images: np.ndarray) -> float:
        """One optimizer update on a batch of [0,1] HWC images; returns MSE."""
        m = self.model
        cfg = self.cfg
        b = images.shape[0]

        counts, masks, scales = self.draw_conditions(b)

        grids = m.encoder.encode_batch(images)
        fov_grids = grids * masks[:, :, :, None].astype(grids.dtype)
        per_grids = m.encoder.encode_batch(m._blur_batch(images, scales))

        rf_cache, rp_cache = {}, {}
        e_fov = m.resamplers.resample_batch(fov_grids, "foveal", cache=rf_cache)
        e_per = m.resamplers.resample_batch(per_grids, "peripheral", cache=rp_cache)
        conds = m.bank.build(e_fov, e_per)
        conds = condition_dropout(conds, cfg.p_drop_foveal, cfg.p_drop_peripheral, self.rng, m.bank)

        x0 = np.transpose(images, (0, 3, 1, 2)).astype(m.dtype) * 2.0 - 1.0
        t = self.rng.integers(0, m.schedule.timesteps, size=b)
        noise = self.rng.standard_normal(x0.shape).astype(m.dtype)
        x_t = forward_noise(x0, t, noise, m.schedule)

        ucache = {}
        eps_hat = m.unet.forward(x_t, t, conds, cache=ucache)
        loss = float(np.mean((eps_hat - noise) ** 2))
        if not math.isfinite(loss):
            if self.emergency_path:
                m.save(self.emergency_path, {"aborted_at_step": self.step_count})
            raise NumericError(f"non-finite loss at step {self.step_count}")

        dy = (2.0 / eps_hat.size) * (eps_hat - noise)
        _, dconds = m.unet.backward(dy.astype(m.dtype), ucache)

        m.bank.text_tokens.add_grad(dconds["text"].sum(axis=0))
        for stream, dcache, de in (
            ("foveal", rf_cache, dconds["foveal"]),
            ("peripheral", rp_cache, dconds["peripheral"]),
        ):
            active = getattr(conds, f"{stream}_active")
            null_p = getattr(m.bank, f"null_{stream}")
            if (~active).any():
                null_p.add_grad(de[~active].sum(axis=0))
            de_live = de * active[:, None, None]
            m.resamplers.backward_batch(de_live.astype(m.dtype), stream, dcache)

        self.opt.step()
        m.zero_grad()
        self.step_count += 1
        return loss


# ---------------------------------------------------------------------------
# sampling


def ddim_timesteps(sched: NoiseSchedule, steps: int) -> np.ndarray:
    return np.unique(np.linspace(0, sched.timesteps - 1, steps).round().astype(int))[::-1]


def ddim_sample(
    model: GenerativeModel,
    conds: ConditioningSet,
    sc: SamplerConfig,
    noise: np.ndarray,
) -> np.ndarray:
    """Deterministic (eta=0) reverse trajectory from the given starting noise.

    noise (B, 3, S, S); returns [0,1] HWC images (B, S, S, 3).
    """
    sched = model.schedule
    sc.validate(sched)
    w = sc.guidance_scale
    need_uncond = sc.cfg_pp or w != 1.0
    null_conds = (
        model.bank.nulled_set(noise.shape[0], conds.lambda_foveal, conds.lambda_peripheral)
        if need_uncond
        else None
    )
    ts = ddim_timesteps(sched, sc.steps)
    x = noise.astype(model.dtype)
    b = x.shape[0]
    ab = sched.alphas_cumprod
    for i, t in enumerate(ts):
        tb = np.full(b, t)
        eps_c = model.unet.forward(x, tb, conds)
        if need_uncond:
            eps_u = model.unet.forward(x, tb, null_conds)
            eps = eps_u + w * (eps_c - eps_u)
        else:
            eps_u = None
            eps = eps_c
        sqrt_ab = math.sqrt(ab[t])
        sqrt_1mab = math.sqrt(1.0 - ab[t])
        x0_hat = (x - sqrt_1mab * eps) / sqrt_ab
        if sc.clip_x0:
            x0_hat = np.clip(x0_hat, -1.0, 1.0)
        if i + 1 == len(ts):
            x = x0_hat
        else:
            tp = ts[i + 1]
            # CFG++ re-injects the unconditional prediction as the noise term
            eps_inject = eps_u if (sc.cfg_pp and eps_u is not None) else eps
            x = math.sqrt(ab[tp]) * x0_hat + math.sqrt(1.0 - ab[tp]) * eps_inject
    imgs = np.clip((x + 1.0) / 2.0, 0.0, 1.0)
    return np.transpose(imgs, (0, 2, 3, 1)).astype(np.float64)


def ddim_invert(
    model: GenerativeModel, images: np.ndarray, conds: ConditioningSet, sc: SamplerConfig
) -> np.ndarray:
    """Deterministic forward encoding of [0,1] HWC images to x_T."""
    sched = model.schedule
    sc.validate(sched)
    ts = ddim_timesteps(sched, sc.steps)[::-1]  # ascending
    x = (np.transpose(images, (0, 3, 1, 2)).astype(model.dtype)) * 2.0 - 1.0
    b = x.shape[0]
    ab = sched.alphas_cumprod
    prev = [0] + list(ts[:-1])
    for t_prev, t in zip(prev, ts):
        tb = np.full(b, t_prev) if t_prev > 0 else np.zeros(b, dtype=int)
        eps = model.unet.forward(x, tb, conds)
        x0_hat = (x - math.sqrt(1.0 - ab[t_prev]) * eps) / math.sqrt(ab[t_prev])
        x = math.sqrt(ab[t]) * x0_hat + math.sqrt(1.0 - ab[t]) * eps
    return x


def noise_for_seed(seed, shape) -> np.ndarray:
    """Per-trial starting noise; depends only on the seed, never on batching."""
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def generate_from_trial(
    model: GenerativeModel,
    img: ImageBuffer,
    fixes: FixationSequence | None,
    blur_scale: float,
    condition: str = "full",
    sc: SamplerConfig | None = None,
    seed: int | None = None,
) -> ImageBuffer:
    """End-to-end single-trial generation (batch of one, bit-reproducible)."""
    sc = sc or SamplerConfig()
    side = model.cfg.denoiser.side
    pixels = img.pixels
    if pixels.shape[0] != side or pixels.shape[1] != side:
        pixels = np.clip(resize_image(pixels, side, side), 0.0, 1.0)
    masks = None
    if condition in ("full", "foveal-only"):
        if fixes is None:
            raise ConfigError(f"condition {condition!r} requires fixations")
        masks = build_fixation_mask(fixes, side, model.cfg.encoder.patch_size).bits[None]
    conds = model.conditions_for(
        pixels[None], masks, blur_scale, condition, sc.lambda_foveal, sc.lambda_peripheral
    )
    noise = noise_for_seed(sc.seed if seed is None else seed, (1, 3, side, side))
    out = ddim_sample(model, conds, sc, noise)
    return ImageBuffer(out[0])
