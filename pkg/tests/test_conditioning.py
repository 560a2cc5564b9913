import math

import numpy as np
import pytest

from fovgen import nn
from fovgen.conditioning import (
    ConditionBank,
    ConditioningSet,
    DualResampler,
    ProjectionBank,
    ResamplerConfig,
    condition_dropout,
    dual_cross_attention,
    grid_key_mask,
    perceiver_attention,
    project_kv,
    resample,
)
from fovgen.encoder import PatchTokenGrid
from fovgen.errors import ConfigError, GeometryError, NumericError


# --- independent oracles (naive loops, no shared code with the implementation)


def softmax_rows_oracle(s):
    out = np.zeros_like(s)
    for i in range(s.shape[0]):
        e = np.exp(s[i] - s[i].max())
        out[i] = e / e.sum()
    return out


def perceiver_oracle(x, latents, w_q, w_kv, heads=1):
    d = latents.shape[1]
    dk = d // heads
    q = latents @ w_q
    ctx = np.concatenate([x, latents], axis=0)
    kv = ctx @ w_kv
    k, v = kv[:, :d], kv[:, d:]
    outs = []
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dk)
        outs.append(softmax_rows_oracle(s) @ v[:, sl])
    return np.concatenate(outs, axis=1)


def dual_attention_oracle(feats, conds, bank, heads=1):
    c = feats.shape[-1]
    d_inner = bank.d_inner
    dk = d_inner // heads
    q = feats @ bank.w_q.data
    total = np.zeros_like(feats)
    for stream, lam in (("text", 1.0), ("foveal", conds.lambda_foveal), ("peripheral", conds.lambda_peripheral)):
        e = conds.stream(stream)[0]
        k = e @ bank._params[f"w_k_{stream}"].data
        v = e @ bank._params[f"w_v_{stream}"].data
        for h in range(heads):
            sq = slice(h * dk, (h + 1) * dk)
            sv = slice(h * (c // heads), (h + 1) * (c // heads))
            s = q[0][:, sq] @ k[:, sq].T / math.sqrt(dk)
            total[0][:, sv] += lam * (softmax_rows_oracle(s) @ v[:, sv])
    return total


# --- perceiver attention


class TestPerceiverAttention:
    def test_empty_input_single_latent(self, rng):
        d = 4
        latents = rng.standard_normal((1, d))
        w_q = rng.standard_normal((d, d))
        w_kv = rng.standard_normal((d, 2 * d))
        out = perceiver_attention(np.zeros((0, d)), latents, w_q, w_kv)
        # softmax over the single latent key is 1 -> output is its value row
        v = (latents @ w_kv)[:, d:]
        assert np.allclose(out, v, atol=1e-12)

    def test_matches_oracle_hand_sized(self, rng):
        d = 2
        x = rng.standard_normal((2, d))
        latents = rng.standard_normal((1, d))
        w_q = rng.standard_normal((d, d))
        w_kv = rng.standard_normal((d, 2 * d))
        got = perceiver_attention(x, latents, w_q, w_kv)
        want = perceiver_oracle(x, latents, w_q, w_kv)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_matches_oracle_random_instances(self, heads):
        rng = np.random.default_rng(42)
        for _ in range(25):
            n, m, d = int(rng.integers(0, 6)), int(rng.integers(1, 5)), 8
            x = rng.standard_normal((n, d))
            latents = rng.standard_normal((m, d))
            w_q = rng.standard_normal((d, d))
            w_kv = rng.standard_normal((d, 2 * d))
            got = perceiver_attention(x, latents, w_q, w_kv, heads=heads)
            want = perceiver_oracle(x, latents, w_q, w_kv, heads=heads)
            assert np.allclose(got, want, rtol=1e-10, atol=1e-10)

    def test_permutation_invariance(self, rng):
        d = 8
        x = rng.standard_normal((5, d))
        latents = rng.standard_normal((3, d))
        w_q = rng.standard_normal((d, d))
        w_kv = rng.standard_normal((d, 2 * d))
        base = perceiver_attention(x, latents, w_q, w_kv, heads=2)
        perm = perceiver_attention(x[[3, 1, 4, 0, 2]], latents, w_q, w_kv, heads=2)
        assert np.allclose(base, perm, atol=1e-12)

    def test_convex_combination_of_values(self, rng):
        d = 4
        x = rng.standard_normal((6, d))
        latents = rng.standard_normal((2, d))
        w_kv = rng.standard_normal((d, 2 * d))
        w_q = rng.standard_normal((d, d))
        out = perceiver_attention(x, latents, w_q, w_kv)
        v = (np.concatenate([x, latents]) @ w_kv)[:, d:]
        lo, hi = v.min(axis=0) - 1e-9, v.max(axis=0) + 1e-9
        assert ((out >= lo) & (out <= hi)).all()

    def test_dimension_mismatch(self, rng):
        with pytest.raises(GeometryError):
            perceiver_attention(
                rng.standard_normal((3, 4)),
                rng.standard_normal((2, 6)),
                rng.standard_normal((6, 6)),
                rng.standard_normal((6, 12)),
            )


# --- resampler


def make_resamplers(dtype=np.float32, layers=1):
    cfg = ResamplerConfig(num_latents=32, layers=layers, dim=16, heads=2, in_dim=8, out_dim=12)
    return DualResampler(cfg, np.random.default_rng(5), dtype=dtype), cfg


class TestResampler:
    def test_single_token_grid_yields_32_tokens(self, rng):
        res, cfg = make_resamplers()
        tokens = np.zeros((6, 6, 8), np.float32)
        tokens[2, 3] = rng.standard_normal(8)
        out = resample(PatchTokenGrid(tokens), "foveal", res)
        assert out.shape == (32, 12)

    def test_all_zero_grid_depends_only_on_latents(self):
        res, _ = make_resamplers()
        a = resample(PatchTokenGrid(np.zeros((6, 6, 8), np.float32)), "peripheral", res)
        b = resample(PatchTokenGrid(np.zeros((3, 3, 8), np.float32)), "peripheral", res)
        assert np.allclose(a, b, atol=1e-6)

    def test_token_permutation_invariance(self, rng):
        res, _ = make_resamplers(dtype=np.float64)
        flat = rng.standard_normal((16, 8))
        perm = flat[rng.permutation(16)]
        a = res.foveal.forward(flat[None], key_mask=grid_key_mask(flat)[None])
        b = res.foveal.forward(perm[None], key_mask=grid_key_mask(perm)[None])
        assert np.allclose(a, b, atol=1e-10)

    def test_zero_token_count_invariance(self, rng):
        # appending masked-out (exact zero) tokens must not change the output
        res, _ = make_resamplers(dtype=np.float64)
        flat = rng.standard_normal((5, 8))
        padded = np.concatenate([flat, np.zeros((11, 8))])
        a = res.foveal.forward(flat[None], key_mask=grid_key_mask(flat)[None])
        b = res.foveal.forward(padded[None], key_mask=grid_key_mask(padded)[None])
        assert np.allclose(a, b, atol=1e-10)

    def test_streams_have_independent_weights(self, rng):
        res, _ = make_resamplers()
        tokens = rng.standard_normal((4, 4, 8)).astype(np.float32)
        a = resample(PatchTokenGrid(tokens), "foveal", res)
        b = resample(PatchTokenGrid(tokens), "peripheral", res)
        assert not np.allclose(a, b)

    def test_unknown_stream(self, rng):
        res, _ = make_resamplers()
        with pytest.raises(ConfigError):
            res.resample_batch(rng.standard_normal((1, 4, 4, 8)).astype(np.float32), "nasal")


# --- projections and dual cross-attention


def make_bank(c=6, d_cond=5, heads=1, dtype=np.float64, seed=3):
    return ProjectionBank(c, d_cond, c, np.random.default_rng(seed), d_value=c, dtype=dtype)


def make_conds(rng, b=1, n=3, d_cond=5, lam_f=1.2, lam_p=0.7):
    return ConditioningSet(
        rng.standard_normal((b, 4, d_cond)),
        rng.standard_normal((b, n, d_cond)),
        rng.standard_normal((b, n, d_cond)),
        lam_f,
        lam_p,
    )


class TestProjectKV:
    def test_identity(self):
        bank = make_bank(c=4, d_cond=4)
        bank._params["w_k_text"].data = np.eye(4)
        bank._params["w_v_text"].data = np.eye(4)
        e = np.eye(4)
        k, v = project_kv(e, bank, "text")
        assert np.array_equal(k, np.eye(4)) and np.array_equal(v, np.eye(4))

    def test_zero_embeddings(self, rng):
        bank = make_bank()
        k, v = project_kv(np.zeros((3, 5)), bank, "foveal")
        assert not k.any() and not v.any()

    def test_matches_matmul_oracle(self, rng):
        bank = make_bank()
        e = rng.standard_normal((3, 5))
        k, v = project_kv(e, bank, "peripheral")
        assert np.allclose(k, e @ bank._params["w_k_peripheral"].data, atol=1e-6)
        assert np.allclose(v, e @ bank._params["w_v_peripheral"].data, atol=1e-6)

    def test_unknown_stream(self, rng):
        with pytest.raises(ConfigError):
            project_kv(rng.standard_normal((3, 5)), make_bank(), "audio")


class TestDualCrossAttention:
    def test_lambda_zero_reduces_to_text_only(self, rng):
        bank = make_bank()
        conds = make_conds(rng, lam_f=0.0, lam_p=0.0)
        feats = rng.standard_normal((1, 7, 6))
        out = dual_cross_attention(feats, conds, bank)
        k, v = project_kv(conds.e_text[0], bank, "text")
        q = feats[0] @ bank.w_q.data
        want = softmax_rows_oracle(q @ k.T / math.sqrt(6)) @ v
        assert np.allclose(out[0], want, atol=1e-10)

    def test_identical_streams_sum_to_three_text_outputs(self, rng):
        bank = make_bank()
        for s in ("foveal", "peripheral"):
            bank._params[f"w_k_{s}"].data = bank._params["w_k_text"].data.copy()
            bank._params[f"w_v_{s}"].data = bank._params["w_v_text"].data.copy()
        e = rng.standard_normal((1, 4, 5))
        conds = ConditioningSet(e, e.copy(), e.copy(), 1.0, 1.0)
        feats = rng.standard_normal((1, 7, 6))
        full = dual_cross_attention(feats, conds, bank)
        only_text = dual_cross_attention(
            feats, ConditioningSet(e, e.copy(), e.copy(), 0.0, 0.0), bank
        )
        assert np.allclose(full, 3.0 * only_text, atol=1e-9)

    def test_matches_oracle_tiny_instance(self, rng):
        bank = make_bank(c=2, d_cond=2)
        conds = ConditioningSet(
            rng.standard_normal((1, 2, 2)),
            rng.standard_normal((1, 2, 2)),
            rng.standard_normal((1, 2, 2)),
            1.2,
            0.7,
        )
        feats = rng.standard_normal((1, 2, 2))
        got = dual_cross_attention(feats, conds, bank)
        want = dual_attention_oracle(feats, conds, bank)
        assert np.allclose(got, want, rtol=1e-10, atol=1e-10)

    @pytest.mark.parametrize("heads", [1, 2])
    def test_matches_oracle_random_instances(self, heads):
        rng = np.random.default_rng(9)
        for _ in range(25):
            hw, n, c, d_cond = int(rng.integers(1, 6)), int(rng.integers(1, 5)), 4, 5
            bank = make_bank(c=c, d_cond=d_cond, seed=int(rng.integers(10000)))
            conds = make_conds(rng, n=n, d_cond=d_cond,
                               lam_f=float(rng.uniform(0, 2)), lam_p=float(rng.uniform(0, 2)))
            feats = rng.standard_normal((1, hw, c))
            got = dual_cross_attention(feats, conds, bank, heads=heads)
            want = dual_attention_oracle(feats, conds, bank, heads=heads)
            assert np.allclose(got, want, rtol=1e-9, atol=1e-10)

    def test_lambda_linearity_exact(self, rng):
        bank = make_bank()
        feats = rng.standard_normal((1, 5, 6))
        e_t = rng.standard_normal((1, 4, 5))
        e_f = rng.standard_normal((1, 3, 5))
        e_p = rng.standard_normal((1, 3, 5))

        def out(lf):
            return dual_cross_attention(feats, ConditioningSet(e_t, e_f, e_p, lf, 0.3), bank)

        base = out(0.0)
        d1 = out(1.0) - base
        d2 = out(2.0) - base
        assert np.allclose(d2, 2.0 * d1, rtol=1e-9, atol=1e-12)

    def test_nan_scores_raise_numeric_error(self, rng):
        bank = make_bank()
        conds = make_conds(rng)
        feats = rng.standard_normal((1, 4, 6))
        feats[0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            dual_cross_attention(feats, conds, bank)

    def test_softmax_rows_sum_to_one(self, rng):
        s = rng.standard_normal((4, 7, 9))
        p = nn.softmax(s)
        assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)


# --- condition dropout


def make_bank_and_conds(rng, b=8):
    bank = ConditionBank(6, 5, np.random.default_rng(0), dtype=np.float64)
    e_f = rng.standard_normal((b, 5, 6))
    e_p = rng.standard_normal((b, 5, 6))
    return bank, bank.build(e_f, e_p)


class TestConditionDropout:
    def test_p_zero_unchanged(self, rng):
        bank, conds = make_bank_and_conds(rng)
        out = condition_dropout(conds, 0.0, 0.0, rng, bank)
        assert np.array_equal(out.e_foveal, conds.e_foveal)
        assert out.foveal_active.all() and out.peripheral_active.all()

    def test_p_one_nulls_both(self, rng):
        bank, conds = make_bank_and_conds(rng)
        out = condition_dropout(conds, 1.0, 1.0, rng, bank)
        assert not out.e_foveal.any() and not out.e_peripheral.any()  # nulls start at zero
        assert not out.foveal_active.any() and not out.peripheral_active.any()

    def test_deterministic_under_seed(self, rng):
        bank, conds = make_bank_and_conds(rng, b=32)
        a = condition_dropout(conds, 0.4, 0.4, np.random.default_rng(3), bank)
        b = condition_dropout(conds, 0.4, 0.4, np.random.default_rng(3), bank)
        assert np.array_equal(a.foveal_active, b.foveal_active)
        assert np.array_equal(a.e_peripheral, b.e_peripheral)

    def test_drop_rate_within_binomial_ci(self):
        # 95% CI for p=0.05 at n=1e5 draws: [0.0457, 0.0543]
        rng = np.random.default_rng(123)
        bank = ConditionBank(4, 3, np.random.default_rng(0))
        n = 100_000
        conds = bank.build(np.ones((n, 3, 4), np.float32), np.ones((n, 3, 4), np.float32))
        out = condition_dropout(conds, 0.05, 0.10, rng, bank)
        frac = 1.0 - out.foveal_active.mean()
        assert 0.0457 <= frac <= 0.0543

    def test_invalid_probability(self, rng):
        bank, conds = make_bank_and_conds(rng)
        with pytest.raises(Exception):
            condition_dropout(conds, -0.1, 0.5, rng, bank)


# --- gradients through resampler + dual attention


def test_one_layer_resampler_and_dual_attention_gradcheck(rng):
    cfg = ResamplerConfig(num_latents=3, layers=1, dim=8, heads=2, in_dim=6, out_dim=4, seed=0)
    res = DualResampler(cfg, np.random.default_rng(1), dtype=np.float64)
    tokens = rng.standard_normal((2, 5, 6))
    tokens[0, 2] = 0.0  # one masked token exercises the key mask path
    mask = grid_key_mask(tokens)
    target = rng.standard_normal((2, 3, 4))

    def loss_fn(no_grad=False):
        cache = None if no_grad else {}
        out = res.foveal.forward(tokens, cache=cache, key_mask=mask)
        loss = ((out - target) ** 2).mean()
        if not no_grad:
            res.foveal.backward(2 * (out - target) / out.size, cache)
        return loss

    err = nn.finite_difference_check(res, loss_fn, np.random.default_rng(2), n_coords=4, eps=1e-6)
    assert err < 1e-6
