"""Pixel-space UNet denoiser: ResNet blocks with timestep injection, spatial
self-attention, and dual (text + foveal + peripheral) cross-attention at the
configured resolutions.  Forward/backward are explicit; forward-only calls
are reentrant with immutable weights."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fovgen import nn
from fovgen.conditioning import STREAMS, ConditioningSet, ProjectionBank
from fovgen.errors import ConfigError, GeometryError, NumericError


@dataclass
class DenoiserConfig:
    side: int = 64
    base: int = 32
    ch_mults: tuple = (1, 2, 3)
    res_blocks: int = 1
    attn_sides: tuple = (16,)
    heads: int = 4
    d_cond: int = 64
    groups: int = 8
    seed: int = 0

    def __post_init__(self):
        self.ch_mults = tuple(self.ch_mults)
        self.attn_sides = tuple(self.attn_sides)
        downs = len(self.ch_mults) - 1
        if self.side % (2**downs):
            raise ConfigError(f"side {self.side} not divisible by 2^{downs}")
        for m in self.ch_mults:
            if (self.base * m) % self.groups or (self.base * m) % self.heads:
                raise ConfigError("channel counts must divide by groups and heads")

    @property
    def temb_dim(self) -> int:
        return self.base * 4


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, temb_dim, groups, rng, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.gn1 = self.add_child("gn1", nn.GroupNorm(groups, c_in, dtype=dtype))
        self.conv1 = self.add_child("conv1", nn.Conv2d(c_in, c_out, 3, rng, dtype=dtype))
        self.temb = self.add_child("temb", nn.Linear(temb_dim, c_out, rng, dtype=dtype))
        self.gn2 = self.add_child("gn2", nn.GroupNorm(groups, c_out, dtype=dtype))
        self.conv2 = self.add_child("conv2", nn.Conv2d(c_out, c_out, 3, rng, init="zero", dtype=dtype))
        self.skip = (
            self.add_child("skip", nn.Conv2d(c_in, c_out, 1, rng, pad=0, dtype=dtype))
            if c_in != c_out
            else None
        )

    def forward(self, x, temb_act, cache=None):
        h = self.gn1.forward(x, nn.subcache(cache, "gn1"))
        h_act, s1 = nn.silu_cached(h)
        if cache is not None:
            cache["pre1"], cache["s1"] = h, s1
        h = self.conv1.forward(h_act, nn.subcache(cache, "conv1"))
        h = h + self.temb.forward(temb_act, nn.subcache(cache, "temb"))[:, :, None, None]
        h2 = self.gn2.forward(h, nn.subcache(cache, "gn2"))
        h2_act, s2 = nn.silu_cached(h2)
        if cache is not None:
            cache["pre2"], cache["s2"] = h2, s2
        h2 = self.conv2.forward(h2_act, nn.subcache(cache, "conv2"))
        sk = x if self.skip is None else self.skip.forward(x, nn.subcache(cache, "skip"))
        return h2 + sk

    def backward(self, dy, cache):
        dh2 = self.conv2.backward(dy, cache["conv2"])
        dh = self.gn2.backward(dh2 * nn.silu_grad(cache["pre2"], cache["s2"]), cache["gn2"])
        dtemb = self.temb.backward(dh.sum(axis=(2, 3)), cache["temb"])
        dh1 = self.conv1.backward(dh, cache["conv1"])
        dx = self.gn1.backward(dh1 * nn.silu_grad(cache["pre1"], cache["s1"]), cache["gn1"])
        if self.skip is None:
            dx = dx + dy
        else:
            dx = dx + self.skip.backward(dy, cache["skip"])
        return dx, dtemb


class SelfAttnBlock(nn.Module):
    def __init__(self, c, heads, groups, rng, dtype=np.float32):
        super().__init__()
        self.c, self.heads = c, heads
        self.gn = self.add_child("gn", nn.GroupNorm(groups, c, dtype=dtype))
        self.qkv = self.add_child("qkv", nn.Linear(c, 3 * c, rng, bias=False, dtype=dtype))
        self.out = self.add_child("out", nn.Linear(c, c, rng, init="zero", dtype=dtype))

    def forward(self, x, cache=None):
        b, c, h, w = x.shape
        t = self.gn.forward(x, nn.subcache(cache, "gn"))
        tokens = t.reshape(b, c, h * w).transpose(0, 2, 1)
        qkv = self.qkv.forward(tokens, nn.subcache(cache, "qkv"))
        q, k, v = (nn.split_heads(a, self.heads) for a in np.split(qkv, 3, axis=-1))
        acache = {} if cache is not None else None
        y = nn.attention_forward(q, k, v, 1.0 / math.sqrt(c // self.heads), cache=acache)
        y = self.out.forward(nn.merge_heads(y), nn.subcache(cache, "out"))
        if cache is not None:
            cache["attn"], cache["shape"] = acache, x.shape
        return x + y.transpose(0, 2, 1).reshape(b, c, h, w)

    def backward(self, dy, cache):
        b, c, h, w = cache["shape"]
        dtok = dy.reshape(b, c, h * w).transpose(0, 2, 1)
        dmerged = self.out.backward(dtok, cache["out"])
        dq, dk, dv = nn.attention_backward(nn.split_heads(dmerged, self.heads), cache["attn"])
        dqkv = np.concatenate([nn.merge_heads(a) for a in (dq, dk, dv)], axis=-1)
        dt = self.qkv.backward(dqkv, cache["qkv"])
        dx = self.gn.backward(np.ascontiguousarray(dt.transpose(0, 2, 1)).reshape(b, c, h, w), cache["gn"])
        return dx + dy


class DualCrossAttnBlock(nn.Module):
    """Residual block computing text/foveal/peripheral cross-attention per
    head and summing the three streams with their scales."""

    def __init__(self, c, d_cond, heads, groups, rng, dtype=np.float32):
        super().__init__()
        self.c, self.heads = c, heads
        self.gn = self.add_child("gn", nn.GroupNorm(groups, c, dtype=dtype))
        self.bank = self.add_child("bank", ProjectionBank(c, d_cond, c, rng, d_value=c, dtype=dtype))
        self.out = self.add_child("out", nn.Linear(c, c, rng, init="zero", dtype=dtype))

    def forward(self, x, conds: ConditioningSet, cache=None):
        b, c, h, w = x.shape
        t = self.gn.forward(x, nn.subcache(cache, "gn"))
        tokens = t.reshape(b, c, h * w).transpose(0, 2, 1)
        q_full = tokens @ self.bank.w_q.data
        if np.isnan(q_full).any():
            raise NumericError("NaN in cross-attention query projection")
        q = nn.split_heads(q_full, self.heads)
        scale = 1.0 / math.sqrt(c // self.heads)
        y = None
        for s in STREAMS:
            e_c = conds.stream(s)
            k, v = self.bank.project_kv(e_c, s)
            acache = {} if cache is not None else None
            ys = nn.attention_forward(
                q, nn.split_heads(k, self.heads), nn.split_heads(v, self.heads), scale, cache=acache
            )
            ys = nn.merge_heads(ys) * conds.scale(s)
            y = ys if y is None else y + ys
            if cache is not None:
                cache[f"attn_{s}"] = acache
                cache[f"e_{s}"] = e_c
        y = self.out.forward(y, nn.subcache(cache, "out"))
        if cache is not None:
            cache["tokens"], cache["shape"], cache["conds"] = tokens, x.shape, conds
        return x + y.transpose(0, 2, 1).reshape(b, c, h, w)

    def backward(self, dy, cache):
        b, c, h, w = cache["shape"]
        conds = cache["conds"]
        tokens = cache["tokens"]
        dtok_out = dy.reshape(b, c, h * w).transpose(0, 2, 1)
        dsum = self.out.backward(dtok_out, cache["out"])
        dq_total = None
        dconds = {}
        for s in STREAMS:
            dys = nn.split_heads(dsum * conds.scale(s), self.heads)
            dq_h, dk_h, dv_h = nn.attention_backward(dys, cache[f"attn_{s}"])
            dq = nn.merge_heads(dq_h)
            dq_total = dq if dq_total is None else dq_total + dq
            dk, dv = nn.merge_heads(dk_h), nn.merge_heads(dv_h)
            e_c = cache[f"e_{s}"]
            e2 = e_c.reshape(-1, e_c.shape[-1])
            wk = self.bank._params[f"w_k_{s}"]
            wv = self.bank._params[f"w_v_{s}"]
            wk.add_grad(e2.T @ dk.reshape(-1, dk.shape[-1]))
            wv.add_grad(e2.T @ dv.reshape(-1, dv.shape[-1]))
            dconds[s] = dk @ wk.data.T + dv @ wv.data.T
        t2 = tokens.reshape(-1, c)
        dq2 = dq_total.reshape(-1, self.bank.d_inner)
        self.bank.w_q.add_grad(t2.T @ dq2)
        dtok = (dq2 @ self.bank.w_q.data.T).reshape(tokens.shape)
        dx = self.gn.backward(np.ascontiguousarray(dtok.transpose(0, 2, 1)).reshape(b, c, h, w), cache["gn"])
        return dx + dy, dconds


class Downsample(nn.Module):
    def __init__(self, c, rng, dtype=np.float32):
        super().__init__()
        self.conv = self.add_child("conv", nn.Conv2d(c, c, 3, rng, stride=2, dtype=dtype))

    def forward(self, x, cache=None):
        return self.conv.forward(x, nn.subcache(cache, "conv"))

    def backward(self, dy, cache):
        return self.conv.backward(dy, cache["conv"])


class Upsample(nn.Module):
    def __init__(self, c, rng, dtype=np.float32):
        super().__init__()
        self.conv = self.add_child("conv", nn.Conv2d(c, c, 3, rng, dtype=dtype))

    def forward(self, x, cache=None):
        return self.conv.forward(nn.upsample_nearest2(x), nn.subcache(cache, "conv"))

    def backward(self, dy, cache):
        return nn.upsample_nearest2_backward(self.conv.backward(dy, cache["conv"]))


class UNetDenoiser(nn.Module):
    """Noise predictor eps(x_t, t, conds).

    The down/up paths are driven by a flat plan of (kind, name) steps; "push"
    and "pop" steps make the skip bookkeeping explicit and exactly mirrored
    in backward.
    """

    def __init__(self, cfg: DenoiserConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        td = cfg.temb_dim
        self.t_fc1 = self.add_child("t_fc1", nn.Linear(cfg.base, td, rng, dtype=dtype))
        self.t_fc2 = self.add_child("t_fc2", nn.Linear(td, td, rng, dtype=dtype))
        self.conv_in = self.add_child("conv_in", nn.Conv2d(3, cfg.base, 3, rng, dtype=dtype))

        chans = [cfg.base * m for m in cfg.ch_mults]
        sides = [cfg.side // (2**i) for i in range(len(chans))]

        def attn_pair(prefix, ch):
            names = []
            sa = f"{prefix}_sa"
            self.add_child(sa, SelfAttnBlock(ch, cfg.heads, cfg.groups, rng, dtype=dtype))
            names.append(("sattn", sa))
            ca = f"{prefix}_ca"
            self.add_child(ca, DualCrossAttnBlock(ch, cfg.d_cond, cfg.heads, cfg.groups, rng, dtype=dtype))
            names.append(("cattn", ca))
            return names

        self.down_plan = [("push", None)]  # conv_in output is the first skip
        skip_chans = [cfg.base]
        ch = cfg.base
        idx = 0
        for lvl, (c_lvl, side) in enumerate(zip(chans, sides)):
            for _ in range(cfg.res_blocks):
                name = f"down{idx}"
                self.add_child(name, ResBlock(ch, c_lvl, td, cfg.groups, rng, dtype=dtype))
                self.down_plan.append(("res", name))
                ch = c_lvl
                if side in cfg.attn_sides:
                    self.down_plan.extend(attn_pair(name, ch))
                self.down_plan.append(("push", None))
                skip_chans.append(ch)
                idx += 1
            if lvl < len(chans) - 1:
                name = f"downsample{lvl}"
                self.add_child(name, Downsample(ch, rng, dtype=dtype))
                self.down_plan.append(("down", name))
                self.down_plan.append(("push", None))
                skip_chans.append(ch)

        self.mid1 = self.add_child("mid1", ResBlock(ch, ch, td, cfg.groups, rng, dtype=dtype))
        self.mid_sa = self.add_child("mid_sa", SelfAttnBlock(ch, cfg.heads, cfg.groups, rng, dtype=dtype))
        self.mid_ca = self.add_child(
            "mid_ca", DualCrossAttnBlock(ch, cfg.d_cond, cfg.heads, cfg.groups, rng, dtype=dtype)
        )
        self.mid2 = self.add_child("mid2", ResBlock(ch, ch, td, cfg.groups, rng, dtype=dtype))

        self.up_plan = []
        idx = 0
        for lvl in reversed(range(len(chans))):
            c_lvl, side = chans[lvl], sides[lvl]
            for _ in range(cfg.res_blocks + 1):
                name = f"up{idx}"
                self.add_child(
                    name, ResBlock(ch + skip_chans.pop(), c_lvl, td, cfg.groups, rng, dtype=dtype)
                )
                self.up_plan.append(("res", name))
                ch = c_lvl
                if side in cfg.attn_sides:
                    self.up_plan.extend(attn_pair(name, ch))
                idx += 1
            if lvl > 0:
                name = f"upsample{lvl}"
                self.add_child(name, Upsample(ch, rng, dtype=dtype))
                self.up_plan.append(("up", name))
        assert not skip_chans

        self.gn_out = self.add_child("gn_out", nn.GroupNorm(cfg.groups, ch, dtype=dtype))
        self.conv_out = self.add_child("conv_out", nn.Conv2d(ch, 3, 3, rng, init="zero", dtype=dtype))
        self.dtype = dtype

    # -- forward ------------------------------------------------------------

    def _temb(self, t, cache=None):
        sin = nn.timestep_embedding(t, self.cfg.base).astype(self.dtype)
        h = self.t_fc1.forward(sin, nn.subcache(cache, "t_fc1"))
        if cache is not None:
            cache["pre"] = h
        h = self.t_fc2.forward(nn.silu(h), nn.subcache(cache, "t_fc2"))
        if cache is not None:
            cache["mlp_out"] = h
        return nn.silu(h)

    def forward(self, x, t, conds: ConditioningSet, cache=None):
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != x.shape[3]:
            raise GeometryError(f"denoiser expects (N, 3, S, S), got {x.shape}")
        temb_act = self._temb(np.atleast_1d(t), nn.subcache(cache, "temb"))
        h = self.conv_in.forward(x.astype(self.dtype), nn.subcache(cache, "conv_in"))
        skips = []
        for kind, name in self.down_plan:
            if kind == "push":
                skips.append(h)
                continue
            mod = self._children[name]
            if kind == "res":
                h = mod.forward(h, temb_act, nn.subcache(cache, name))
            elif kind == "sattn":
                h = mod.forward(h, nn.subcache(cache, name))
            elif kind == "cattn":
                h = mod.forward(h, conds, nn.subcache(cache, name))
            else:  # down
                h = mod.forward(h, nn.subcache(cache, name))
        h = self.mid1.forward(h, temb_act, nn.subcache(cache, "mid1"))
        h = self.mid_sa.forward(h, nn.subcache(cache, "mid_sa"))
        h = self.mid_ca.forward(h, conds, nn.subcache(cache, "mid_ca"))
        h = self.mid2.forward(h, temb_act, nn.subcache(cache, "mid2"))
        for kind, name in self.up_plan:
            mod = self._children[name]
            if kind == "res":
                sub = nn.subcache(cache, name)
                if sub is not None:
                    sub["c_hpart"] = h.shape[1]
                h = mod.forward(np.concatenate([h, skips.pop()], axis=1), temb_act, sub)
            elif kind == "sattn":
                h = mod.forward(h, nn.subcache(cache, name))
            elif kind == "cattn":
                h = mod.forward(h, conds, nn.subcache(cache, name))
            else:  # up
                h = mod.forward(h, nn.subcache(cache, name))
        assert not skips
        h = self.gn_out.forward(h, nn.subcache(cache, "gn_out"))
        h_act, s_out = nn.silu_cached(h)
        if cache is not None:
            cache["pre_out"], cache["s_out"] = h, s_out
        return self.conv_out.forward(h_act, nn.subcache(cache, "conv_out"))

    # -- backward -----------------------------------------------------------

    def backward(self, dy, cache):
        """Accumulates parameter grads; returns (dx, dconds) where dconds maps
        stream name -> (B, n_c, d_cond) gradient on the conditioning tokens."""
        dtemb_act = None
        dconds = {s: None for s in STREAMS}

        def add_temb(dt):
            nonlocal dtemb_act
            dtemb_act = dt if dtemb_act is None else dtemb_act + dt

        def add_conds(dc):
            for s in STREAMS:
                dconds[s] = dc[s] if dconds[s] is None else dconds[s] + dc[s]

        dh = self.conv_out.backward(dy, cache["conv_out"])
        dh = self.gn_out.backward(dh * nn.silu_grad(cache["pre_out"], cache["s_out"]), cache["gn_out"])

        # reversed up path: collect skip grads in forward-pop order (deepest
        # skip was popped first, so reversed traversal emits dskips for
        # pushes p0, p1, ... in order)
        dskips = []
        for kind, name in reversed(self.up_plan):
            mod = self._children[name]
            if kind == "res":
                dcat, dt = mod.backward(dh, cache[name])
                add_temb(dt)
                c_hpart = cache[name]["c_hpart"]
                dh = dcat[:, :c_hpart]
                dskips.append(np.ascontiguousarray(dcat[:, c_hpart:]))
            elif kind == "sattn":
                dh = mod.backward(dh, cache[name])
            elif kind == "cattn":
                dh, dc = mod.backward(dh, cache[name])
                add_conds(dc)
            else:
                dh = mod.backward(dh, cache[name])

        dh2, dt = self.mid2.backward(dh, cache["mid2"])
        add_temb(dt)
        dh2, dc = self.mid_ca.backward(dh2, cache["mid_ca"])
        add_conds(dc)
        dh2 = self.mid_sa.backward(dh2, cache["mid_sa"])
        dh, dt = self.mid1.backward(dh2, cache["mid1"])
        add_temb(dt)

        # reversed down path: each push marker joins its skip gradient
        for kind, name in reversed(self.down_plan):
            if kind == "push":
                dh = dh + dskips.pop()
                continue
            mod = self._children[name]
            if kind == "res":
                dh, dt = mod.backward(dh, cache[name])
                add_temb(dt)
            elif kind == "sattn":
                dh = mod.backward(dh, cache[name])
            elif kind == "cattn":
                dh, dc = mod.backward(dh, cache[name])
                add_conds(dc)
            else:
                dh = mod.backward(dh, cache[name])
        assert not dskips
        dx = self.conv_in.backward(dh, cache["conv_in"])

        tc = cache["temb"]
        dmlp = dtemb_act * nn.silu_grad(tc["mlp_out"])
        dpre = self.t_fc2.backward(dmlp, tc["t_fc2"])
        self.t_fc1.backward(dpre * nn.silu_grad(tc["pre"]), tc["t_fc1"])
        return dx, dconds
