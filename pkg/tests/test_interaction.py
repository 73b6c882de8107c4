from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from interplay.correspondence import BevToImgMap, ImgToBevMap
from interplay.errors import ConfigError
from interplay.interaction import (
    AttentionParams,
    EncoderConfig,
    EncoderLayerParams,
    attend_projected,
    encoder_forward,
    gathered_attention,
    iml,
    integrate,
    local_attention,
    mmri_image_to_lidar,
    mmri_lidar_to_image,
    ordered_project,
    softmax_weights,
)
from interplay.nn import FFN, Linear
from interplay.oracles import naive_iml, naive_mmri_image_to_lidar, naive_mmri_lidar_to_image
from interplay.pipeline import PipelineConfig, build_params, prepare
from interplay.geometry import BevGrid
from interplay.rng import SplitMix64


def random_params(seed: int, c: int, d: int) -> AttentionParams:
    return AttentionParams.init(SplitMix64(seed), c, d)


def dense_attention(x, nb, p: AttentionParams) -> np.ndarray:
    """Matrix-form attention used as an independent reference."""
    q = x @ p.wq
    k = nb @ p.wk
    v = nb @ p.wv
    logits = k @ q / math.sqrt(p.d)
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return (w @ v) @ p.wo


def relu_identity_ffn(c: int) -> FFN:
    """FFN on a 2C input returning its first C entries via relu(x) - relu(-x)."""
    eye, zero = np.eye(c), np.zeros((c, c))
    fc1 = Linear(np.block([[eye, -eye], [zero, zero]]), np.zeros(2 * c))
    fc2 = Linear(np.vstack([eye, -eye]), np.zeros(c))
    return FFN(fc1, fc2)


class TestLocalAttention:
    def test_singleton_identity(self):
        n = np.array([0.3, -1.2, 2.0])
        assert np.array_equal(local_attention(np.array([5.0, 1.0, -2.0]), n[None], AttentionParams.identity(3)), n)

    def test_identical_keys_give_mean_value(self):
        rng = np.random.default_rng(1)
        p = random_params(1, 4, 3)
        p.wk[:] = 0.0
        nb = rng.normal(size=(3, 4))
        expected = (nb @ p.wv).mean(axis=0) @ p.wo
        assert np.allclose(local_attention(rng.normal(size=4), nb, p), expected, atol=1e-12)

    def test_scalar_softmax_oracle(self):
        rng = np.random.default_rng(2)
        p = random_params(2, 2, 2)
        x, nb = rng.normal(size=2), rng.normal(size=(3, 2))
        q = [sum(x[c] * p.wq[c, e] for c in range(2)) for e in range(2)]
        keys = [[sum(n[c] * p.wk[c, e] for c in range(2)) for e in range(2)] for n in nb]
        vals = [[sum(n[c] * p.wv[c, e] for c in range(2)) for e in range(2)] for n in nb]
        logits = [(q[0] * k[0] + q[1] * k[1]) / math.sqrt(2) for k in keys]
        z = sum(math.exp(s) for s in logits)
        w = [math.exp(s) / z for s in logits]
        mix = [sum(w[i] * vals[i][e] for i in range(3)) for e in range(2)]
        expected = [sum(mix[e] * p.wo[e, c] for e in range(2)) for c in range(2)]
        assert np.max(np.abs(local_attention(x, nb, p) - expected)) < 1e-12

    def test_empty_neighbors_zero(self):
        p = random_params(3, 4, 2)
        assert np.array_equal(local_attention(np.ones(4), np.zeros((0, 4)), p), np.zeros(4))

    def test_shape_mismatch(self):
        p = random_params(3, 4, 2)
        with pytest.raises(ConfigError):
            local_attention(np.ones(3), np.ones((2, 4)), p)
        with pytest.raises(ConfigError):
            local_attention(np.ones(4), np.ones((2, 3)), p)

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 12))
    def test_dense_oracle(self, seed, n):
        rng = np.random.default_rng(seed)
        p = random_params(seed, 5, 3)
        x, nb = rng.normal(size=5), rng.normal(size=(n, 5))
        assert np.allclose(local_attention(x, nb, p), dense_attention(x, nb, p), atol=1e-12, rtol=0)

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 12))
    def test_permutation_invariance(self, seed, n):
        rng = np.random.default_rng(seed)
        p = random_params(seed, 4, 4)
        x, nb = rng.normal(size=4), rng.normal(size=(n, 4))
        perm = rng.permutation(n)
        assert np.max(np.abs(local_attention(x, nb, p) - local_attention(x, nb[perm], p))) <= 1e-12

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.floats(-50, 50))
    def test_weights_normalized_and_shift_invariant(self, seed, n, shift):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(1, n)) * 3
        mask = np.ones((1, n), dtype=bool)
        w = softmax_weights(logits, mask)
        assert abs(w.sum() - 1.0) < 1e-9
        assert np.max(np.abs(softmax_weights(logits + shift, mask) - w)) < 1e-9

    def test_key_shift_leaves_output(self):
        # shifting every key by the same vector adds q . delta to every logit
        rng = np.random.default_rng(4)
        q, k, v = rng.normal(size=(1, 3)), rng.normal(size=(1, 5, 3)), rng.normal(size=(1, 5, 3))
        wo = rng.normal(size=(3, 3))
        mask = np.ones((1, 5), dtype=bool)
        a = attend_projected(q, k, v, mask, wo)
        b = attend_projected(q, k + rng.normal(size=3), v, mask, wo)
        assert np.max(np.abs(a - b)) < 1e-9

    def test_masked_slots_ignored(self):
        logits = np.array([[1.0, 2.0, 99.0]])
        w = softmax_weights(logits, np.array([[True, True, False]]))
        assert w[0, 2] == 0.0 and abs(w.sum() - 1) < 1e-15
        assert np.array_equal(softmax_weights(logits, np.zeros((1, 3), bool)), np.zeros((1, 3)))

    def test_gathered_equals_loop_bitwise(self):
        rng = np.random.default_rng(5)
        p = random_params(5, 6, 4)
        queries, sources = rng.normal(size=(300, 6)), rng.normal(size=(80, 6))
        counts = rng.integers(0, 9, size=300)
        index = np.full((300, 8), -1)
        for t, c in enumerate(counts):
            index[t, :c] = rng.choice(80, size=c, replace=False)
        out = gathered_attention(queries, sources, index, p)
        for t in range(300):
            assert np.array_equal(out[t], local_attention(queries[t], sources[index[t, : counts[t]]], p))

    def test_ordered_project(self):
        rng = np.random.default_rng(6)
        x, w = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
        assert np.allclose(ordered_project(x, w), x @ w, atol=1e-13)


def toy_prepared():
    cfg = PipelineConfig(grid=BevGrid(-8.0, 8.0, -8.0, 8.0, 0.5))
    params = build_params(cfg)
    return cfg, params, prepare(cfg, params)


@pytest.fixture(scope="module")
def toy():
    return toy_prepared()


class TestMmri:
    def test_image_to_lidar_zero(self, toy):
        cfg, params, prep = toy
        zeros = [np.zeros_like(h) for h in prep.h_c0]
        out = mmri_image_to_lidar(zeros, np.zeros_like(prep.h_p0), prep.img_to_bev, params.encoder[0].c2p)
        assert not out.any()

    def test_lidar_to_image_zero(self, toy):
        cfg, params, prep = toy
        out = mmri_lidar_to_image(np.zeros_like(prep.h_p0), prep.h_c0, prep.bev_to_img, params.encoder[0].p2c)
        assert not any(o.any() for o in out)

    def test_no_points_gives_zero(self, toy):
        cfg, params, prep = toy
        H, W = prep.grid.shape
        empty = BevToImgMap((H, W), prep.bev_to_img.view_shapes, np.zeros(H * W + 1, np.int64), np.zeros((0, 3), np.int64))
        out = mmri_lidar_to_image(prep.h_p0, prep.h_c0, empty, params.encoder[0].p2c)
        assert not any(o.any() for o in out)

    def test_single_correspondent_permutes(self):
        # pixel (i, j) sees only cell (1 - i, 1 - j)
        targets = np.full((2, 2, 1), -1)
        for i in range(2):
            for j in range(2):
                targets[i, j, 0] = (1 - i) * 2 + (1 - j)
        m = ImgToBevMap(0, (2, 2), (targets,))
        h_c = np.arange(12.0).reshape(2, 2, 3)
        out = mmri_image_to_lidar([h_c], np.ones((2, 2, 3)), m, AttentionParams.identity(3))
        assert np.array_equal(out, h_c[::-1, ::-1])

    def test_image_to_lidar_loop_oracle(self, toy):
        cfg, params, prep = toy
        assert prep.grid.shape == (16, 16)
        p = params.encoder[0].c2p
        fast = mmri_image_to_lidar(prep.h_c0, prep.h_p0, prep.img_to_bev, p)
        assert np.array_equal(fast, naive_mmri_image_to_lidar(prep.h_c0, prep.h_p0, prep.img_to_bev, p))
        assert fast.any()

    def test_lidar_to_image_loop_oracle(self, toy):
        cfg, params, prep = toy
        p = params.encoder[0].p2c
        fast = mmri_lidar_to_image(prep.h_p0, prep.h_c0, prep.bev_to_img, p)
        slow = naive_mmri_lidar_to_image(prep.h_p0, prep.h_c0, prep.bev_to_img, p)
        assert all(np.array_equal(a, b) for a, b in zip(fast, slow))
        assert any(a.any() for a in fast)

    def test_shape_mismatch(self, toy):
        cfg, params, prep = toy
        with pytest.raises(ConfigError):
            mmri_image_to_lidar(prep.h_c0, prep.h_p0[:-1], prep.img_to_bev, params.encoder[0].c2p)


class TestIml:
    def test_k1_is_value_projection(self):
        rng = np.random.default_rng(7)
        p = random_params(7, 4, 3)
        h = rng.normal(size=(5, 6, 4))
        expected = ordered_project(ordered_project(h.reshape(-1, 4), p.wv), p.wo).reshape(5, 6, 4)
        assert np.array_equal(iml(h, p, 1), expected)

    def test_k1_identity(self):
        h = np.random.default_rng(8).normal(size=(4, 4, 3))
        assert np.array_equal(iml(h, AttentionParams.identity(3), 1), h)

    def test_constant_map(self):
        p = random_params(9, 4, 4)
        h = np.tile(np.array([0.5, -1.0, 2.0, 0.25]), (6, 7, 1))
        out = iml(h, p, 3)
        assert np.allclose(out, out[0, 0], atol=1e-12, rtol=0)

    def test_window_oracle(self):
        rng = np.random.default_rng(10)
        p = random_params(10, 4, 4)
        h = rng.normal(size=(8, 8, 4))
        out = iml(h, p, 3)
        for i in range(8):
            for j in range(8):
                nb = h[max(i - 1, 0) : i + 2, max(j - 1, 0) : j + 2].reshape(-1, 4)
                assert np.allclose(out[i, j], dense_attention(h[i, j], nb, p), atol=1e-12, rtol=0)
        assert np.array_equal(out, naive_iml(h, p, 3))

    @pytest.mark.parametrize("k", [0, 2, -1])
    def test_even_window_rejected(self, k):
        with pytest.raises(ConfigError):
            iml(np.zeros((3, 3, 2)), AttentionParams.identity(2), k)


class TestIntegrate:
    def test_recovers_intra(self):
        rng = np.random.default_rng(11)
        h, intra, cross = (rng.normal(size=(4, 5, 3)) for _ in range(3))
        ffn = relu_identity_ffn(3)
        assert np.array_equal(integrate(h, intra, cross, ffn, ffn), intra)

    def test_zero_inputs(self):
        c = 3
        zero_ffn = FFN(Linear(np.random.default_rng(0).normal(size=(2 * c, 8)), np.zeros(8)),
                       Linear(np.random.default_rng(1).normal(size=(8, c)), np.zeros(c)))
        z = np.zeros((4, 4, c))
        assert not integrate(z, z, z, zero_ffn, zero_ffn).any()

    def test_dense_oracle(self):
        rng = np.random.default_rng(12)
        r = SplitMix64(12)
        inner, outer = FFN.init(r, 4, 6, 2), FFN.init(r, 4, 6, 2)
        h, intra, cross = (rng.normal(size=(4, 4, 2)) for _ in range(3))
        out = integrate(h, intra, cross, inner, outer)
        for i in range(4):
            for j in range(4):
                x = np.concatenate([intra[i, j], cross[i, j]])
                m = np.maximum(x @ inner.fc1.weight + inner.fc1.bias, 0) @ inner.fc2.weight + inner.fc2.bias
                y = np.concatenate([m, h[i, j]])
                ref = np.maximum(y @ outer.fc1.weight + outer.fc1.bias, 0) @ outer.fc2.weight + outer.fc2.bias
                assert np.max(np.abs(out[i, j] - ref)) < 1e-12

    def test_shape_mismatch(self):
        ffn = relu_identity_ffn(2)
        with pytest.raises(ConfigError):
            integrate(np.zeros((2, 2, 2)), np.zeros((2, 3, 2)), np.zeros((2, 2, 2)), ffn, ffn)


class TestEncoder:
    def test_zero_layers_identity(self, toy):
        cfg, params, prep = toy
        zero = EncoderConfig(num_layers=0)
        h_p, h_c = encoder_forward(prep.h_p0, prep.h_c0, prep.img_to_bev, prep.bev_to_img, zero, [])
        assert h_p is prep.h_p0 and all(a is b for a, b in zip(h_c, prep.h_c0))

    def test_two_layers_shapes_finite(self, toy):
        cfg, params, prep = toy
        assert len(prep.traces) == 2
        assert prep.h_p.shape == prep.h_p0.shape
        assert [h.shape for h in prep.h_c] == [h.shape for h in prep.h_c0]
        assert np.isfinite(prep.h_p).all() and all(np.isfinite(h).all() for h in prep.h_c)

    def test_one_layer_manual_composition(self, toy):
        cfg, params, prep = toy
        one = EncoderConfig(num_layers=1)
        p = params.encoder[0]
        h_p, h_c = encoder_forward(prep.h_p0, prep.h_c0, prep.img_to_bev, prep.bev_to_img, one, params.encoder)
        p_cross = mmri_image_to_lidar(prep.h_c0, prep.h_p0, prep.img_to_bev, p.c2p)
        c_cross = mmri_lidar_to_image(prep.h_p0, prep.h_c0, prep.bev_to_img, p.p2c)
        p_intra = iml(prep.h_p0, p.p2p, one.k_iml)
        c_intra = [iml(h, p.c2c, one.k_iml) for h in prep.h_c0]
        ref_p = p.norm_p(integrate(prep.h_p0, p_intra, p_cross, p.inner_p, p.outer_p))
        ref_c = [p.norm_c(integrate(h, ci, cc, p.inner_c, p.outer_c)) for h, ci, cc in zip(prep.h_c0, c_intra, c_cross)]
        assert np.array_equal(h_p, ref_p)
        assert all(np.array_equal(a, b) for a, b in zip(h_c, ref_c))

    def test_missing_layers_rejected(self, toy):
        cfg, params, prep = toy
        with pytest.raises(ConfigError):
            encoder_forward(prep.h_p0, prep.h_c0, prep.img_to_bev, prep.bev_to_img, EncoderConfig(num_layers=3), params.encoder)

    def test_layer_params_shapes(self):
        layer = EncoderLayerParams.init(SplitMix64(0), EncoderConfig())
        assert layer.c2p.wq.shape == (16, 16) and layer.inner_p.fc1.weight.shape == (32, 32)
        assert layer.outer_c.fc2.weight.shape == (32, 16)

    @pytest.mark.parametrize("kwargs", [dict(k_iml=2), dict(k_corr=-1), dict(channels=0)])
    def test_config_validation(self, kwargs):
        with pytest.raises(ConfigError):
            EncoderConfig(**kwargs).validate()
