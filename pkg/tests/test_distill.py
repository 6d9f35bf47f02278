import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slidr.augment import AugmentConfig
from slidr.correspondence import PairList
from slidr.distill import (
    DivergenceError, LossConfig, OptimizerConfig, PooledPairs, SceneView, TrainScene, contrastive_loss,
    contrastive_loss_and_grad, cosine_lr, forward_backward, naive_contrastive_loss, pixel_anchors,
    pixel_mode_loss, pool_superpixel, pool_superpoint, pretrain, sgd_step, superpixel_anchors,
)
from slidr.gradcheck import check_gradients, random_view
from slidr.model import PARAM_NAMES, ModelDims, init_params
from slidr.superpixels import SuperpixelPartition


def unit_rows(rng, k, d):
    x = rng.normal(size=(k, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestPooling:
    def test_identical_rows(self):
        v = np.array([0.6, 0.0, 0.8])
        ids, pooled = pool_superpoint(np.tile(v, (5, 1)), {3: np.arange(5)})
        np.testing.assert_array_equal(ids, [3])
        np.testing.assert_allclose(pooled[0], v, atol=1e-15)

    def test_two_members_exact(self):
        a, b = np.array([0.25, 0.5, 1.0]), np.array([0.75, -0.5, 0.0])
        _, pooled = pool_superpoint(np.stack([a, b]), {0: np.array([0, 1])})
        np.testing.assert_array_equal(pooled[0], (a + b) / 2)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_replication_invariant(self, seed):
        rng = np.random.default_rng(seed)
        feats = rng.normal(size=(6, 4))
        groups = {0: np.array([0, 2, 5]), 2: np.array([1, 3])}
        twice = np.concatenate([feats, feats])
        groups2 = {s: np.concatenate([idx, idx + 6]) for s, idx in groups.items()}
        _, a = pool_superpoint(feats, groups)
        _, b = pool_superpoint(twice, groups2)
        np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-15)

    def test_empty_group_rejected(self):
        with pytest.raises(ValueError):
            pool_superpoint(np.zeros((2, 2)), {0: np.array([], int)})

    def test_whole_image_superpixel(self):
        emb = np.random.default_rng(0).normal(size=(4, 6, 3))
        _, pooled = pool_superpixel(emb, SuperpixelPartition(np.zeros((4, 6), int)), [0])
        np.testing.assert_allclose(pooled[0], emb.reshape(-1, 3).mean(0), atol=1e-14)

    def test_empty_keep(self):
        ids, pooled = pool_superpixel(np.zeros((2, 2, 3)), SuperpixelPartition(np.zeros((2, 2), int)), [])
        assert len(ids) == 0 and pooled.shape == (0, 3)

    def test_two_superpixels_match_accumulation(self):
        rng = np.random.default_rng(1)
        emb = rng.normal(size=(4, 4, 2))
        labels = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [0, 1, 1, 1], [0, 0, 0, 1]])
        ids, pooled = pool_superpixel(emb, SuperpixelPartition(labels), [1, 0])
        sums, counts = np.zeros((2, 2)), np.zeros(2)
        for y in range(4):
            for x in range(4):
                sums[labels[y, x]] += emb[y, x]
                counts[labels[y, x]] += 1
        np.testing.assert_array_equal(ids, [0, 1])
        np.testing.assert_allclose(pooled, sums / counts[:, None], atol=1e-15)


class TestLoss:
    def test_single_anchor_is_zero(self):
        rng = np.random.default_rng(0)
        f, g = unit_rows(rng, 1, 5), unit_rows(rng, 1, 5)
        assert contrastive_loss((f, g)) == 0.0
        _, df, dg = contrastive_loss_and_grad(f, g, 0.07)
        assert np.all(df == 0) and np.all(dg == 0)

    @pytest.mark.parametrize("K", [1, 2, 7, 64])
    def test_uniform_similarity(self, K):
        v = unit_rows(np.random.default_rng(K), 1, 8)
        f = g = np.tile(v, (K, 1))
        assert abs(contrastive_loss((f, g), LossConfig(temperature=0.07)) - K * math.log(K)) <= 1e-9

    def test_k3_matches_naive(self):
        rng = np.random.default_rng(3)
        f, g = unit_rows(rng, 3, 6), unit_rows(rng, 3, 6)
        want = naive_contrastive_loss(f, g, 0.07)
        assert abs(contrastive_loss((f, g)) - want) <= 1e-10 * abs(want)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 64), st.integers(2, 16), st.floats(0.05, 2.0), st.integers(0, 2 ** 31))
    def test_matches_naive_random(self, K, F, tau, seed):
        rng = np.random.default_rng(seed)
        # pooled vectors are averages of unit vectors, so norms may fall below one
        f = unit_rows(rng, K, F) * rng.uniform(0.3, 1.0, (K, 1))
        g = unit_rows(rng, K, F) * rng.uniform(0.3, 1.0, (K, 1))
        got = contrastive_loss(PooledPairs(f, g), LossConfig(temperature=tau))
        want = naive_contrastive_loss(f, g, tau)
        assert got >= 0
        assert abs(got - want) <= 1e-10 * max(abs(want), 1e-300) or abs(got - want) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        f, g = unit_rows(rng, 4, 3) * 0.9, unit_rows(rng, 4, 3) * 0.9
        _, df, dg = contrastive_loss_and_grad(f, g, 0.5)
        h = 1e-6
        for arr, grad in ((f, df), (g, dg)):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                arr[idx] += h
                up = contrastive_loss_and_grad(f, g, 0.5, need_grad=False)[0]
                arr[idx] -= 2 * h
                down = contrastive_loss_and_grad(f, g, 0.5, need_grad=False)[0]
                arr[idx] += h
                num[idx] = (up - down) / (2 * h)
            np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-8)

    def test_rejects_long_vectors_and_mismatch(self):
        with pytest.raises(ValueError):
            contrastive_loss((np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]])))
        with pytest.raises(ValueError):
            contrastive_loss((np.zeros((2, 3)), np.zeros((3, 3))))

    def test_invalid_temperature(self):
        with pytest.raises(ValueError, match="temperature"):
            LossConfig(temperature=-1.0)


class TestGradients:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_all_parameters_match_finite_differences(self, seed):
        res = check_gradients(seed, ModelDims(D=6, E=10, F=4))
        assert set(res.errors) == set(PARAM_NAMES)
        assert res.passed(1e-4), res.errors

    def test_frozen_backbone_has_no_gradient(self):
        rng = np.random.default_rng(0)
        dims = ModelDims(D=6, E=10, F=4)
        views = [random_view(rng, dims)]
        _, grads = forward_backward(init_params(dims, 0), views, superpixel_anchors(views), LossConfig())
        assert set(grads) == set(PARAM_NAMES)

    def test_single_anchor_zero_gradients(self):
        rng = np.random.default_rng(4)
        dims = ModelDims(D=4, E=8, F=3)
        view = random_view(rng, dims, cameras=1, segments=1)
        loss, grads = forward_backward(init_params(dims, 1), [view], superpixel_anchors([view]), LossConfig())
        assert loss == 0.0
        for g in grads.values():
            assert np.all(g == 0)


class TestAnchors:
    def test_only_non_empty_superpoints(self):
        dims = ModelDims(D=4, E=8, F=3)
        rng = np.random.default_rng(0)
        view = random_view(rng, dims, cameras=1, segments=4)
        # keep only pairs that fall in the first stripe
        part = view.partitions[0]
        lab = part.labels.ravel()
        t = view.pairs.triples
        t = t[lab[t[:, 2] - 1] == 0]
        view = SceneView(view.descriptors, view.feature_maps, view.partitions, PairList(t))
        anchors = superpixel_anchors([view])
        assert anchors.size == 1 and anchors.provenance == [(0, 0, 0)]

    def test_pixel_sampling_clamps(self):
        rng = np.random.default_rng(1)
        view = random_view(rng, ModelDims(D=4, E=8, F=3))
        a = pixel_anchors([view], 10 ** 6, rng)
        assert a.size == len(view.pairs)
        b = pixel_anchors([view], 5, rng)
        assert b.size == 5

    def test_pixel_mode_matches_shared_oracle(self):
        rng = np.random.default_rng(2)
        pe = unit_rows(rng, 5, 4)
        maps = [unit_rows(rng, 12, 4).reshape(3, 4, 4)]
        pairs = PairList(np.stack([np.arange(5), np.zeros(5, int), np.array([1, 4, 7, 9, 12])], 1))
        got = pixel_mode_loss(pe, maps, pairs, LossConfig())
        g = maps[0].reshape(-1, 4)[pairs.pixels - 1]
        assert got == contrastive_loss((pe, g))
        one = PairList([[0, 0, 3]])
        assert pixel_mode_loss(pe, maps, one, LossConfig()) == 0.0
        cfg = LossConfig(pixel_samples=1)
        assert pixel_mode_loss(pe, maps, pairs, cfg, np.random.default_rng(0)) == 0.0


class TestOptimizer:
    def test_zero_gradient_no_change(self):
        cfg = OptimizerConfig(weight_decay=0.0)
        p = {"w": np.array([1.0, -2.0])}
        out, _ = sgd_step(p, {"w": np.zeros(2)}, {"w": np.zeros(2)}, cfg, 0.5)
        np.testing.assert_array_equal(out["w"], p["w"])

    def test_two_step_scalar_trace(self):
        cfg = OptimizerConfig(momentum=0.9, dampening=0.1, weight_decay=0.0)
        p, v = sgd_step({"p": np.array(1.0)}, {"p": np.array(1.0)}, None, cfg, 0.5)
        assert abs(v["p"] - 1.0) <= 1e-12 and abs(p["p"] - 0.5) <= 1e-12
        p, v = sgd_step(p, {"p": np.array(1.0)}, v, cfg, 0.5)
        assert abs(v["p"] - 1.8) <= 1e-12 and abs(p["p"] - (-0.4)) <= 1e-12

    def test_weight_decay_added_before_momentum(self):
        cfg = OptimizerConfig(weight_decay=1e-4)
        p, v = sgd_step({"p": np.array(2.0)}, {"p": np.array(0.5)}, None, cfg, 1.0)
        assert v["p"] == 0.5 + 1e-4 * 2.0
        assert p["p"] == 2.0 - (0.5 + 1e-4 * 2.0)

    def test_reference_defaults(self):
        cfg = OptimizerConfig()
        assert (cfg.lr0, cfg.momentum, cfg.weight_decay, cfg.epochs) == (0.5, 0.9, 1e-4, 50)

    def test_non_finite_gradient(self):
        with pytest.raises(DivergenceError):
            sgd_step({"p": np.array(1.0)}, {"p": np.array(np.nan)}, None, OptimizerConfig(), 0.1)

    def test_cosine_schedule(self):
        assert cosine_lr(0, 50, 0.5) == 0.5
        assert cosine_lr(50, 50, 0.5) == 0.0
        assert cosine_lr(25, 50, 0.5) == 0.25
        with pytest.raises(ValueError):
            cosine_lr(51, 50, 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.floats(0.01, 10.0))
    def test_cosine_monotone_and_bounded(self, frac, lr0):
        t = frac * 40
        a, b = cosine_lr(t, 40, lr0), cosine_lr(min(t + 0.5, 40), 40, lr0)
        assert 0 <= b <= a <= lr0


@pytest.fixture(scope="module")
def small_scenes():
    from slidr.scenegen import SceneSpec, generate_scene
    from slidr.superpixels import slic
    out = []
    for s in range(2):
        scene = generate_scene(SceneSpec(), seed=s)
        parts = [slic(img, 40, iters=3) for img in scene.images]
        out.append(TrainScene(scene.cloud, scene.images, parts, scene.pairs))
    return out


SMALL_AUG = AugmentConfig(out_width=96, out_height=56, min_pairs=256, image_min_pairs=128)


class TestPretrain:
    def test_zero_epochs_returns_init(self, small_scenes):
        dims = ModelDims(D=8, E=16, F=4)
        res = pretrain(small_scenes, dims, opt=OptimizerConfig(epochs=0), aug=SMALL_AUG, seed=3)
        init = init_params(dims, 3)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(res.params, name), getattr(init, name))
        assert res.history == []

    def test_deterministic(self, small_scenes):
        dims = ModelDims(D=8, E=16, F=4)
        opt = OptimizerConfig(epochs=2, batch_size=2)
        a = pretrain(small_scenes, dims, opt=opt, aug=SMALL_AUG, seed=5)
        b = pretrain(small_scenes, dims, opt=opt, aug=SMALL_AUG, seed=5)
        for name in PARAM_NAMES:
            assert getattr(a.params, name).tobytes() == getattr(b.params, name).tobytes()
        assert a.history == b.history
        assert len(a.history) == 2 and a.history[0]["lr"] == 0.5

    def test_pixel_mode_runs(self, small_scenes):
        dims = ModelDims(D=8, E=16, F=4)
        res = pretrain(small_scenes, dims, LossConfig(mode="pixel", pixel_samples=256),
                       OptimizerConfig(epochs=1, batch_size=2), SMALL_AUG, seed=0)
        assert res.history[0]["pair_count"] == 256
        assert np.isfinite(res.history[0]["mean_loss"])

    def test_requires_scenes(self):
        with pytest.raises(ValueError):
            pretrain([])
