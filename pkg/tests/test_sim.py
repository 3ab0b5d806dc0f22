import math

import numpy as np
import pytest

from sq.errors import InvalidProfileError, InvalidShapeError, ShapeMismatchError
from sq.reparam import AdaLNParams
from sq.sim import (
    LAYER_KINDS,
    DiTBlockParams,
    SalienceProfile,
    as_profiles,
    challenge_report,
    designated_channels,
    forward_block,
    forward_stack,
    gen_calibration,
    init_block,
    init_stack,
    input_stream,
    layer_name,
)

D, HEADS, RATIO = 16, 4, 2


def reference_forward(p, z, c):
    """Step-by-step scalar reimplementation of the block forward."""
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    n, d = z.shape

    def regress(w_g, w_b, b_g, b_b):
        gamma = np.array([sum(c[k] * w_g[k][j] for k in range(d)) + b_g[j] for j in range(d)])
        beta = np.array([sum(c[k] * w_b[k][j] for k in range(d)) + b_b[j] for j in range(d)])
        return gamma, beta

    def cond_norm(x, ad):
        gamma, beta = regress(ad.w_gamma.astype(np.float64), ad.w_beta.astype(np.float64),
                              ad.b_gamma.astype(np.float64), ad.b_beta.astype(np.float64))
        out = np.zeros_like(x)
        for i in range(n):
            row = x[i]
            mu = row.mean()
            var = ((row - mu) ** 2).mean()
            normed = (row - mu) / math.sqrt(var + 1e-6)
            out[i] = normed * (1.0 + gamma) + beta
        return out

    def linear(x, w, b):
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        rows, cols = x.shape[0], w.shape[1]
        out = np.zeros((rows, cols))
        for i in range(rows):
            for j in range(cols):
                out[i, j] = sum(x[i, k] * w[k, j] for k in range(w.shape[0])) + b[j]
        return out

    def attention(qkv, heads):
        dd = qkv.shape[1] // 3
        q, k, v = qkv[:, :dd], qkv[:, dd:2 * dd], qkv[:, 2 * dd:]
        dh = dd // heads
        out = np.zeros((n, dd))
        for h in range(heads):
            qs = q[:, h * dh:(h + 1) * dh]
            ks = k[:, h * dh:(h + 1) * dh]
            vs = v[:, h * dh:(h + 1) * dh]
            for i in range(n):
                scores = np.array(
                    [sum(qs[i, a] * ks[j, a] for a in range(dh)) / math.sqrt(dh) for j in range(n)]
                )
                scores -= scores.max()
                weights = np.exp(scores)
                weights /= weights.sum()
                for a in range(dh):
                    out[i, h * dh + a] = sum(weights[j] * vs[j, a] for j in range(n))
        return out

    x1 = cond_norm(z, p.adaln1)
    attn = attention(linear(x1, p.w_qkv, p.b_qkv), p.heads)
    z_mid = z + linear(attn, p.w_proj, p.b_proj)
    x2 = cond_norm(z_mid, p.adaln2)
    pre = linear(x2, p.w_fc1, p.b_fc1)
    hidden = np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))(pre)
    return z_mid + linear(hidden, p.w_fc2, p.b_fc2)


class TestInitBlock:
    def test_same_seed_is_bit_identical(self):
        a = init_block(D, HEADS, RATIO, 123)
        b = init_block(D, HEADS, RATIO, 123)
        np.testing.assert_array_equal(a.w_qkv, b.w_qkv)
        np.testing.assert_array_equal(a.adaln2.w_beta, b.adaln2.w_beta)
        c = init_block(D, HEADS, RATIO, 124)
        assert not np.array_equal(a.w_qkv, c.w_qkv)

    def test_plain_init_has_no_salient_rows(self):
        # max |N(0, s)| over 100 seeds x rows x columns stays below 6 sigma
        # (extreme-value bound for ~1.2e6 draws)
        worst = 0.0
        for seed in range(100):
            blk = init_block(64, 4, 4, seed)
            for w, fan_in in ((blk.w_qkv, 64), (blk.w_proj, 64), (blk.w_fc1, 64)):
                sigma = 1.0 / np.sqrt(fan_in)
                worst = max(worst, float(np.abs(w).max() / sigma))
        assert worst < 6.0

    def test_salient_row_dominates_median(self):
        profile = SalienceProfile((7,), (50.0,))
        blk = init_block(64, 4, 4, 0, profile)
        sal = np.abs(blk.w_qkv).max(axis=1)
        assert sal[7] >= 10 * np.median(np.delete(sal, 7))

    def test_shape_validation(self):
        with pytest.raises(InvalidShapeError):
            init_block(10, 3, 2, 0)  # heads do not divide channels
        with pytest.raises(InvalidShapeError):
            init_stack(0, D, HEADS, RATIO, 0)

    def test_profile_channel_out_of_range(self):
        with pytest.raises(InvalidProfileError):
            init_block(8, 2, 2, 0, SalienceProfile((8,), (10.0,)))


class TestForwardBlock:
    def test_matches_reference_small(self):
        rng = np.random.default_rng(5)
        p = init_block(4, 1, 2, 7)
        z = rng.normal(size=(2, 4)).astype(np.float32)
        c = rng.normal(size=4).astype(np.float32)
        out, _ = forward_block(p, z, c)
        ref = reference_forward(p, z, c)
        np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-6)

    def test_matches_reference_multihead(self):
        rng = np.random.default_rng(6)
        p = init_block(D, HEADS, RATIO, 8)
        z = rng.normal(size=(5, D)).astype(np.float32)
        c = rng.normal(size=D).astype(np.float32)
        out, _ = forward_block(p, z, c)
        np.testing.assert_allclose(out, reference_forward(p, z, c), rtol=1e-4, atol=1e-5)

    def test_residual_identity_under_zeroed_scales(self):
        d = 8
        zero_adaln = AdaLNParams(
            w_gamma=np.zeros((d, d), np.float32),
            w_beta=np.zeros((d, d), np.float32),
            b_gamma=np.full(d, -1.0, np.float32),  # scale term 1 + gamma = 0
            b_beta=np.zeros(d, np.float32),
        )
        p = DiTBlockParams(
            adaln1=zero_adaln, adaln2=zero_adaln,
            w_qkv=np.ones((d, 3 * d), np.float32), b_qkv=np.zeros(3 * d, np.float32),
            w_proj=np.ones((d, d), np.float32), b_proj=np.zeros(d, np.float32),
            w_fc1=np.ones((d, 2 * d), np.float32), b_fc1=np.zeros(2 * d, np.float32),
            w_fc2=np.ones((2 * d, d), np.float32), b_fc2=np.zeros(d, np.float32),
            heads=2, mlp_ratio=2,
        )
        z = np.random.default_rng(9).normal(size=(4, d)).astype(np.float32)
        out, _ = forward_block(p, z, np.zeros(d, np.float32))
        np.testing.assert_array_equal(out, z)

    def test_token_permutation_equivariance(self):
        rng = np.random.default_rng(10)
        p = init_block(D, HEADS, RATIO, 11)
        z = rng.normal(size=(6, D)).astype(np.float32)
        c = rng.normal(size=D).astype(np.float32)
        perm = rng.permutation(6)
        out, _ = forward_block(p, z, c)
        out_perm, _ = forward_block(p, z[perm], c)
        np.testing.assert_allclose(out_perm, out[perm], rtol=1e-5, atol=1e-6)

    def test_taps_expose_linear_inputs(self):
        rng = np.random.default_rng(12)
        p = init_block(D, HEADS, RATIO, 13)
        z = rng.normal(size=(3, D)).astype(np.float32)
        c = rng.normal(size=D).astype(np.float32)
        _, taps = forward_block(p, z, c)
        assert set(taps) == set(LAYER_KINDS)
        assert taps["qkv"].shape == (3, D)
        assert taps["proj"].shape == (3, D)
        assert taps["fc1"].shape == (3, D)
        assert taps["fc2"].shape == (3, RATIO * D)

    def test_stack_chains_blocks(self):
        rng = np.random.default_rng(14)
        blocks = init_stack(2, D, HEADS, RATIO, 15)
        z = rng.normal(size=(3, D)).astype(np.float32)
        c = rng.normal(size=D).astype(np.float32)
        out, taps = forward_stack(blocks, z, c)
        mid, _ = forward_block(blocks[0], z, c)
        ref, _ = forward_block(blocks[1], mid, c)
        np.testing.assert_array_equal(out, ref)
        assert "block0.qkv" in taps and "block1.fc2" in taps
        assert layer_name(0, "qkv", 2) == "block0.qkv"
        assert layer_name(0, "qkv", 1) == "qkv"


DRIFT = (2.0, 2.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 2.0, 2.0)
ACT_PROFILE = SalienceProfile((3, 11), (30.0, 40.0), DRIFT)


class TestProfiles:
    def test_scalar_scale_broadcasts(self):
        p = SalienceProfile((1, 2, 3), 5.0)
        assert p.magnitude_scale == (5.0, 5.0, 5.0)

    def test_rejects_duplicates_and_bad_values(self):
        with pytest.raises(InvalidProfileError):
            SalienceProfile((1, 1), (2.0, 2.0))
        with pytest.raises(InvalidProfileError):
            SalienceProfile((1,), (0.0,))
        with pytest.raises(InvalidProfileError):
            SalienceProfile((1,), (1.0,), (1.0, -1.0))

    def test_drift_schedule_default_is_flat(self):
        np.testing.assert_array_equal(SalienceProfile((0,), (1.0,)).drift_schedule(4), np.ones(4))

    def test_drift_length_checked(self):
        with pytest.raises(InvalidProfileError):
            ACT_PROFILE.drift_schedule(7)

    def test_restrict_slices_drift(self):
        p = ACT_PROFILE.restrict([0, 2, 4])
        assert p.temporal_drift == (2.0, 0.5, 0.5)

    def test_profiles_must_not_overlap(self):
        with pytest.raises(InvalidProfileError):
            as_profiles([SalienceProfile((1,), (2.0,)), SalienceProfile((1,), (3.0,))])
        assert designated_channels(
            [SalienceProfile((4, 2), (2.0, 2.0)), SalienceProfile((3,), (2.0,))]
        ) == (2, 3, 4)


class TestGenCalibration:
    def test_deterministic_per_seed(self):
        blk = init_block(D, HEADS, RATIO, 0)
        a = gen_calibration(blk, 3, 2, ACT_PROFILE.restrict([0, 1, 2]), 42, n_tokens=4)
        b = gen_calibration(blk, 3, 2, ACT_PROFILE.restrict([0, 1, 2]), 42, n_tokens=4)
        for name in a:
            for ba, bb in zip(a[name].per_t, b[name].per_t):
                for ma, mb in zip(ba, bb):
                    np.testing.assert_array_equal(ma, mb)

    def test_flat_drift_keeps_salience_stable(self):
        profile = SalienceProfile((3, 11), (30.0, 40.0), None)
        blk = init_block(D, HEADS, RATIO, 1)
        taps = gen_calibration(blk, 8, 8, profile, 2, n_tokens=8)
        sal = taps["qkv"].salience_per_timestep()[:, [3, 11]]
        cov = sal.std(axis=0) / sal.mean(axis=0)
        assert np.all(cov < 0.3)

    def test_drift_doubling_doubles_salience(self):
        profile = SalienceProfile((3, 11), (30.0, 40.0), (1.0, 2.0))
        blk = init_block(D, HEADS, RATIO, 3)
        taps = gen_calibration(blk, 2, 16, profile, 4, n_tokens=8)
        sal = taps["qkv"].salience_per_timestep()[:, [3, 11]]
        ratio = sal[1] / sal[0]
        assert np.all(ratio > 1.4) and np.all(ratio < 2.6)

    def test_single_draw_degenerates_to_one_batch(self):
        blk = init_block(D, HEADS, RATIO, 5)
        profile = SalienceProfile((3,), (30.0,), None)
        taps = gen_calibration(blk, 1, 1, profile, 6, n_tokens=4)
        acts = taps["fc1"]
        assert acts.num_timesteps == 1 and len(acts.per_t[0]) == 1

    def test_custom_timestep_labels(self):
        blk = init_block(D, HEADS, RATIO, 7)
        profile = SalienceProfile((3,), (30.0,), (1.0, 1.5))
        taps = gen_calibration(blk, 2, 1, profile, 8, n_tokens=4, timesteps=[10, 20])
        assert taps["qkv"].timesteps == (10, 20)

    def test_input_stream_order_is_timestep_major(self):
        profile = SalienceProfile((0,), (30.0,), (1.0, 2.0, 3.0))
        seen = [t for t, _, _ in input_stream(profile, 3, 2, 0, 4, D)]
        assert seen == [0, 0, 1, 1, 2, 2]

    def test_rejects_empty_schedule(self):
        blk = init_block(D, HEADS, RATIO, 9)
        with pytest.raises(InvalidProfileError):
            gen_calibration(blk, 0, 1, ACT_PROFILE, 0)


class TestChallengeReport:
    def test_zero_salience_reports_neutral_correlation(self):
        batch = [[np.zeros((4, 8), dtype=np.float32)]]
        from sq.temporal import TimestepActivations

        acts = TimestepActivations(per_t=batch, timesteps=[0])
        rep = challenge_report(acts, np.zeros((8, 8)), 4)
        assert rep.act_rank_corr == 0.0
        assert rep.weight_rank_corr == 0.0

    def test_salient_channels_incur_larger_error(self):
        wp = SalienceProfile((5, 21, 38), (20.0, 30.0, 45.0))
        ap = SalienceProfile(
            (3, 11, 19, 29, 37, 47, 53, 58),
            (25.0, 29.0, 33.0, 38.0, 43.0, 48.0, 54.0, 60.0),
            DRIFT,
        )
        blk = init_block(64, 4, 4, 0, wp)
        taps = gen_calibration(blk, 10, 8, ap, 1, n_tokens=16)
        rep = challenge_report(taps["qkv"], blk.w_qkv, 4)
        assert rep.act_rank_corr > 0.5
        # the injected weight rows are clipped hardest
        spikes = rep.weight_channel_mse[[5, 21, 38]]
        assert np.all(spikes > 1.8 * np.median(rep.weight_channel_mse))

    def test_drift_ratio_tracks_schedule_swing(self):
        ap = SalienceProfile((3, 11), (30.0, 40.0), DRIFT)
        blk = init_block(64, 4, 4, 2, SalienceProfile((5,), (40.0,)))
        taps = gen_calibration(blk, 10, 8, ap, 3, n_tokens=16)
        rep = challenge_report(taps["qkv"], blk.w_qkv, 4)
        assert np.all(rep.drift_ratio[[3, 11]] >= 3.0)
        assert rep.per_timestep_quantiles.shape == (10, 5)
