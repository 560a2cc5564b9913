"""Dual-stream conditioning: perceiver resamplers that compress patch-token
grids into 32 tokens, per-stream key/value projections, additive dual
cross-attention with per-stream scaling, and condition dropout.

Resampler attention has no positional encoding and masks exact-zero input
tokens out of the key set, which makes the output invariant both to input
permutation and to how many zero (masked-out) tokens the grid carries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fovgen import nn
from fovgen.encoder import PatchTokenGrid
from fovgen.errors import ConfigError, DomainError, GeometryError, NumericError

STREAMS = ("text", "foveal", "peripheral")
N_TEXT_TOKENS = 4


@dataclass
class ResamplerConfig:
    num_latents: int = 32
    layers: int = 8
    dim: int = 128          # internal width d
    heads: int = 4
    in_dim: int = 64        # encoder token dim
    out_dim: int = 64       # denoiser cross-attention dim
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError("internal dim must split evenly across heads")

    @property
    def key_dim(self) -> int:
        return self.dim // self.heads


# ---------------------------------------------------------------------------
# perceiver attention (queries from latents; keys/values from concat(x, latents))


def _perceiver_forward(x, latents, w_q, w_kv, heads, key_mask=None, cache=None):
    d = latents.shape[-1]
    dk = d // heads
    q = nn.split_heads(latents @ w_q, heads)
    ctx = np.concatenate([x, latents], axis=-2)
    kv = ctx @ w_kv
    k = nn.split_heads(kv[..., :d], heads)
    v = nn.split_heads(kv[..., d:], heads)
    mask = None
    if key_mask is not None:
        ones = np.ones(latents.shape[:-1], dtype=bool)
        mask = np.concatenate([key_mask, ones], axis=-1)[..., None, :]  # add head axis
    acache = {} if cache is not None else None
    y = nn.attention_forward(q, k, v, 1.0 / math.sqrt(dk), key_mask=mask, cache=acache)
    out = nn.merge_heads(y)
    if cache is not None:
        cache.update(x=x, latents=latents, attn=acache, heads=heads, n_x=x.shape[-2])
    return out


def perceiver_attention(x, latents, w_q, w_kv, heads=1, key_mask=None):
    """Functional form: x (..., N, d), latents (..., m, d) -> (..., m, d).

    N = 0 degenerates to latents-only keys.  ``key_mask`` (..., N) marks which
    input tokens participate as keys; latent keys always do.
    """
    x = np.asarray(x)
    latents = np.asarray(latents)
    if x.shape[-1] != latents.shape[-1]:
        raise GeometryError(f"token dims differ: {x.shape[-1]} vs {latents.shape[-1]}")
    if w_q.shape[0] != latents.shape[-1] or w_kv.shape[1] != 2 * latents.shape[-1]:
        raise GeometryError("projection shapes inconsistent with token dim")
    return _perceiver_forward(x, latents, w_q, w_kv, heads, key_mask=key_mask)


class PerceiverAttention(nn.Module):
    def __init__(self, dim, heads, rng, dtype=np.float32):
        super().__init__()
        std = math.sqrt(1.0 / dim)
        self.w_q = self.new_param("w_q", (rng.standard_normal((dim, dim)) * std).astype(dtype))
        self.w_kv = self.new_param("w_kv", (rng.standard_normal((dim, 2 * dim)) * std).astype(dtype))
        self.heads = heads
        self.dim = dim

    def forward(self, x, latents, cache=None, key_mask=None):
        return _perceiver_forward(
            x, latents, self.w_q.data, self.w_kv.data, self.heads, key_mask=key_mask, cache=cache
        )

    def backward(self, dy, cache):
        x, latents = cache["x"], cache["latents"]
        d = latents.shape[-1]
        n_x = cache["n_x"]
        dq_h, dk_h, dv_h = nn.attention_backward(nn.split_heads(dy, self.heads), cache["attn"])
        dq = nn.merge_heads(dq_h)
        dkv = np.concatenate([nn.merge_heads(dk_h), nn.merge_heads(dv_h)], axis=-1)
        ctx = np.concatenate([x, latents], axis=-2)
        ctx2 = ctx.reshape(-1, d)
        dkv2 = dkv.reshape(-1, 2 * d)
        self.w_kv.add_grad(ctx2.T @ dkv2)
        dctx = (dkv2 @ self.w_kv.data.T).reshape(ctx.shape)
        lat2 = latents.reshape(-1, d)
        dq2 = dq.reshape(-1, d)
        self.w_q.add_grad(lat2.T @ dq2)
        dlat = (dq2 @ self.w_q.data.T).reshape(latents.shape)
        dx = dctx[..., :n_x, :]
        dlat = dlat + dctx[..., n_x:, :]
        return dx, dlat


class ResamplerLayer(nn.Module):
    def __init__(self, dim, heads, rng, dtype=np.float32):
        super().__init__()
        self.ln_x = self.add_child("ln_x", nn.LayerNorm(dim, dtype=dtype))
        self.ln_l = self.add_child("ln_l", nn.LayerNorm(dim, dtype=dtype))
        self.attn = self.add_child("attn", PerceiverAttention(dim, heads, rng, dtype=dtype))
        self.out = self.add_child("out", nn.Linear(dim, dim, rng, dtype=dtype))
        self.ff = self.add_child("ff", nn.FeedForward(dim, rng, dtype=dtype))

    def forward(self, x_normed, latents, cache=None, key_mask=None):
        ln_l = self.ln_l.forward(latents, nn.subcache(cache, "ln_l"))
        a = self.attn.forward(x_normed, ln_l, nn.subcache(cache, "attn"), key_mask=key_mask)
        latents = latents + self.out.forward(a, nn.subcache(cache, "out"))
        latents = latents + self.ff.forward(latents, nn.subcache(cache, "ff"))
        return latents

    def backward(self, dlat, cache):
        d_ff_in = self.ff.backward(dlat, cache["ff"])
        dlat = dlat + d_ff_in
        da = self.out.backward(dlat, cache["out"])
        dx, dln_l = self.attn.backward(da, cache["attn"])
        dlat = dlat + self.ln_l.backward(dln_l, cache["ln_l"])
        return dx, dlat


class PerceiverResampler(nn.Module):
    """Compresses a (possibly masked) token grid into cfg.num_latents tokens."""

    def __init__(self, cfg: ResamplerConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.latents = self.new_param(
            "latents", (rng.standard_normal((cfg.num_latents, d)) * d**-0.5).astype(dtype)
        )
        self.in_proj = self.add_child("in_proj", nn.Linear(cfg.in_dim, d, rng, dtype=dtype))
        self.ln_x = self.add_child("ln_x", nn.LayerNorm(d, dtype=dtype))
        self.layers = [
            self.add_child(f"layer{i}", ResamplerLayer(d, cfg.heads, rng, dtype=dtype))
            for i in range(cfg.layers)
        ]
        self.ln_out = self.add_child("ln_out", nn.LayerNorm(d, dtype=dtype))
        self.out_proj = self.add_child("out_proj", nn.Linear(d, cfg.out_dim, rng, dtype=dtype))

    def forward(self, tokens, cache=None, key_mask=None):
        """tokens (B, N, in_dim) -> (B, m, out_dim)."""
        b = tokens.shape[0]
        x = self.in_proj.forward(tokens, nn.subcache(cache, "in_proj"))
        x = self.ln_x.forward(x, nn.subcache(cache, "ln_x"))
        lat = np.broadcast_to(self.latents.data, (b,) + self.latents.data.shape)
        for i, layer in enumerate(self.layers):
            lat = layer.forward(x, lat, nn.subcache(cache, f"layer{i}"), key_mask=key_mask)
        out = self.ln_out.forward(lat, nn.subcache(cache, "ln_out"))
        return self.out_proj.forward(out, nn.subcache(cache, "out_proj"))

    def backward(self, dy, cache):
        d = self.out_proj.backward(dy, cache["out_proj"])
        dlat = self.ln_out.backward(d, cache["ln_out"])
        dx_total = None
        for i in reversed(range(len(self.layers))):
            dx, dlat = self.layers[i].backward(dlat, cache[f"layer{i}"])
            dx_total = dx if dx_total is None else dx_total + dx
        self.latents.add_grad(dlat.sum(axis=0))
        dx_total = self.ln_x.backward(dx_total, cache["ln_x"])
        return self.in_proj.backward(dx_total, cache["in_proj"])


def grid_key_mask(tokens: np.ndarray) -> np.ndarray:
    """True for tokens that are not exactly the zero vector (masked patches
    are exact zeros by the encoder contract)."""
    return (tokens != 0.0).any(axis=-1)


class DualResampler(nn.Module):
    """Separate resampler weights for the foveal and peripheral streams."""

    def __init__(self, cfg: ResamplerConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.foveal = self.add_child("foveal", PerceiverResampler(cfg, rng, dtype=dtype))
        self.peripheral = self.add_child("peripheral", PerceiverResampler(cfg, rng, dtype=dtype))

    def resample_batch(self, grids: np.ndarray, which: str, cache=None) -> np.ndarray:
        """(B, G, G, D) -> (B, m, out_dim)."""
        if which not in ("foveal", "peripheral"):
            raise ConfigError(f"unknown stream {which!r}")
        b, g, _, d = grids.shape
        tokens = grids.reshape(b, g * g, d)
        mask = grid_key_mask(tokens)
        net = self.foveal if which == "foveal" else self.peripheral
        return net.forward(tokens, cache=cache, key_mask=mask)

    def backward_batch(self, dy, which: str, cache):
        net = self.foveal if which == "foveal" else self.peripheral
        return net.backward(dy, cache)


def resample(grid: PatchTokenGrid, which: str, resamplers: DualResampler) -> np.ndarray:
    """Single-grid convenience wrapper -> (num_latents, out_dim) tokens."""
    out = resamplers.resample_batch(grid.tokens[None].astype(np.float32), which)
    return out[0]


# ---------------------------------------------------------------------------
# conditioning set, projections, dual cross-attention


@dataclass
class ConditioningSet:
    """Batched condition streams.  Dropped streams hold the learned null
    tokens (never omitted), with ``*_active`` recording what was dropped."""

    e_text: np.ndarray       # (B, n_text, d)
    e_foveal: np.ndarray     # (B, m, d)
    e_peripheral: np.ndarray # (B, m, d)
    lambda_foveal: float = 1.0
    lambda_peripheral: float = 1.0
    foveal_active: np.ndarray = field(default=None)
    peripheral_active: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.lambda_foveal < 0 or self.lambda_peripheral < 0:
            raise DomainError("stream scales must be >= 0")
        b = self.e_text.shape[0]
        if self.e_foveal.shape[0] != b or self.e_peripheral.shape[0] != b:
            raise GeometryError("condition streams disagree on batch size")
        if self.foveal_active is None:
            self.foveal_active = np.ones(b, dtype=bool)
        if self.peripheral_active is None:
            self.peripheral_active = np.ones(b, dtype=bool)

    @property
    def batch(self) -> int:
        return self.e_text.shape[0]

    def stream(self, name: str) -> np.ndarray:
        return getattr(self, f"e_{name}")

    def scale(self, name: str) -> float:
        if name == "text":
            return 1.0
        return self.lambda_foveal if name == "foveal" else self.lambda_peripheral


class ConditionBank(nn.Module):
    """Learned constant text tokens (empty-prompt stand-in) plus zero-
    initialized learned null tokens, one set per stream."""

    def __init__(self, d_cond, num_latents, rng, n_text=N_TEXT_TOKENS, dtype=np.float32):
        super().__init__()
        self.d_cond, self.n_text, self.m = d_cond, n_text, num_latents
        self.text_tokens = self.new_param(
            "text_tokens", (rng.standard_normal((n_text, d_cond)) * d_cond**-0.5).astype(dtype)
        )
        self.null_text = self.new_param("null_text", np.zeros((n_text, d_cond), dtype=dtype))
        self.null_foveal = self.new_param("null_foveal", np.zeros((num_latents, d_cond), dtype=dtype))
        self.null_peripheral = self.new_param(
            "null_peripheral", np.zeros((num_latents, d_cond), dtype=dtype)
        )

    def build(self, e_fov, e_per, lam_f=1.0, lam_p=1.0) -> ConditioningSet:
        b = e_fov.shape[0]
        text = np.broadcast_to(self.text_tokens.data, (b, self.n_text, self.d_cond))
        return ConditioningSet(text, e_fov, e_per, lam_f, lam_p)

    def null_stream(self, name: str, batch: int) -> np.ndarray:
        p = getattr(self, f"null_{name}")
        return np.broadcast_to(p.data, (batch,) + p.data.shape)

    def nulled_set(self, batch: int, lam_f=1.0, lam_p=1.0) -> ConditioningSet:
        """All three streams replaced by their null tokens (the guidance
        unconditional branch)."""
        return ConditioningSet(
            self.null_stream("text", batch),
            self.null_stream("foveal", batch),
            self.null_stream("peripheral", batch),
            lam_f,
            lam_p,
            foveal_active=np.zeros(batch, dtype=bool),
            peripheral_active=np.zeros(batch, dtype=bool),
        )


def condition_dropout(
    conds: ConditioningSet, p_fov: float, p_per: float, rng, bank: ConditionBank
) -> ConditioningSet:
    """Independently replace each image stream by its learned null tokens."""
    if not (0.0 <= p_fov <= 1.0 and 0.0 <= p_per <= 1.0):
        raise DomainError("dropout probabilities must be in [0, 1]")
    b = conds.batch
    drop_f = rng.random(b) < p_fov
    drop_p = rng.random(b) < p_per
    e_fov = np.where(drop_f[:, None, None], bank.null_stream("foveal", b), conds.e_foveal)
    e_per = np.where(drop_p[:, None, None], bank.null_stream("peripheral", b), conds.e_peripheral)
    return ConditioningSet(
        conds.e_text,
        e_fov.astype(conds.e_foveal.dtype),
        e_per.astype(conds.e_peripheral.dtype),
        conds.lambda_foveal,
        conds.lambda_peripheral,
        foveal_active=conds.foveal_active & ~drop_f,
        peripheral_active=conds.peripheral_active & ~drop_p,
    )


class ProjectionBank(nn.Module):
    """One query projection plus per-stream key/value projections for a
    single cross-attention site (Eq. pattern: K_c = e_c W_K^c, V_c = e_c W_V^c).
    Projections are bias-free to match the pure-matrix formulation."""

    def __init__(self, c_feat, d_cond, d_inner, rng, d_value=None, dtype=np.float32):
        super().__init__()
        d_value = d_inner if d_value is None else d_value
        std_q = math.sqrt(1.0 / c_feat)
        std_kv = math.sqrt(1.0 / d_cond)
        self.w_q = self.new_param("w_q", (rng.standard_normal((c_feat, d_inner)) * std_q).astype(dtype))
        for s in STREAMS:
            self.new_param(f"w_k_{s}", (rng.standard_normal((d_cond, d_inner)) * std_kv).astype(dtype))
            self.new_param(f"w_v_{s}", (rng.standard_normal((d_cond, d_value)) * std_kv).astype(dtype))
        self.d_inner, self.d_value = d_inner, d_value

    def project_kv(self, e_c: np.ndarray, stream: str):
        if stream not in STREAMS:
            raise ConfigError(f"unknown conditioning stream {stream!r}")
        wk = self._params[f"w_k_{stream}"].data
        wv = self._params[f"w_v_{stream}"].data
        return e_c @ wk, e_c @ wv


def project_kv(e_c: np.ndarray, bank: ProjectionBank, stream: str):
    return bank.project_kv(e_c, stream)


def dual_cross_attention(
    feats: np.ndarray, conds: ConditioningSet, bank: ProjectionBank, heads: int = 1
) -> np.ndarray:
    """Additive three-stream cross-attention.

    feats (..., hw, c); output text-attention + lam_f * foveal-attention +
    lam_p * peripheral-attention, each stream with its own K/V projections.
    Requires the bank's value dim to equal c so the sum lives in feature space.
    """
    if bank.d_value != feats.shape[-1]:
        raise GeometryError("bank value dim must match feature channels")
    q_full = feats @ bank.w_q.data
    dk = bank.d_inner // heads
    q = nn.split_heads(q_full, heads)
    out = None
    for stream in STREAMS:
        e_c = conds.stream(stream)
        k, v = bank.project_kv(e_c, stream)
        scores_scale = 1.0 / math.sqrt(dk)
        kh, vh = nn.split_heads(k, heads), nn.split_heads(v, heads)
        s = (q @ np.swapaxes(kh, -1, -2)) * scores_scale
        if np.isnan(s).any():
            raise NumericError(
                f"NaN in {stream} cross-attention scores "
                f"(|q|max={np.abs(q).max():.3g}, |k|max={np.abs(kh).max():.3g})"
            )
        y = nn.merge_heads(nn.softmax(s) @ vh)
        y = y * conds.scale(stream)
        out = y if out is None else out + y
    return out
