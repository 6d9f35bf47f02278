import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slidr.augment import (
    AugmentationError, AugmentConfig, ImageTransform, PointTransform, apply_point_transform,
    augment_image, augment_point_cloud, record_to_json, rotate_flip, transform_image,
    transform_pairs, transform_partition, transform_pixels,
)
from slidr.correspondence import PairList
from slidr.geometry import PointCloud
from slidr.superpixels import Image, SuperpixelPartition, slic


def cloud_with_pairs(n, rng, spread=10.0):
    pts = rng.uniform(-spread, spread, size=(n, 3))
    pairs = PairList(np.stack([np.arange(n), np.zeros(n, int), np.arange(n) + 1], 1))
    return PointCloud(pts, labels=rng.integers(0, 3, n)), pairs


def image_case(W, H, seed, n_pairs):
    rng = np.random.default_rng(seed)
    img = Image(rng.uniform(size=(H, W, 3)))
    pix = rng.choice(W * H, size=n_pairs, replace=False) + 1
    pairs = PairList(np.stack([np.arange(n_pairs), np.zeros(n_pairs, int), pix], 1))
    return img, pairs


class TestPointCloud:
    def test_identity_transform(self):
        rng = np.random.default_rng(0)
        cloud, pairs = cloud_with_pairs(50, rng)
        rec = PointTransform(0.0, False, False, [100.0, 100.0, 100.0], [0.1, 0.1, 0.1])
        out, out_pairs, kept = apply_point_transform(cloud, pairs, rec)
        np.testing.assert_array_equal(out.points, cloud.points)
        np.testing.assert_array_equal(out_pairs.triples, pairs.triples)
        np.testing.assert_array_equal(kept, np.arange(50))

    def test_quarter_turn(self):
        out = rotate_flip(np.array([[1.0, 0.0, 0.0]]), np.pi / 2, False, False)
        np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-12)

    def test_flips(self):
        out = rotate_flip(np.array([[1.0, 2.0, 3.0]]), 0.0, True, True)
        np.testing.assert_array_equal(out, [[-1.0, -2.0, 3.0]])

    def test_cuboid_redrawn_until_constraint_holds(self):
        # 1500 paired points in a tight cluster, 500 spread out: any cuboid centred in the
        # cluster removes all 1500, so the draw must be repeated
        rng = np.random.default_rng(1)
        pts = np.concatenate([rng.uniform(-0.005, 0.005, (1500, 3)), rng.uniform(-50, 50, (500, 3))])
        pairs = PairList(np.stack([np.arange(2000), np.zeros(2000, int), np.arange(2000) + 1], 1))
        cfg = AugmentConfig(min_pairs=1024)
        attempts = []
        for seed in range(20):
            res = augment_point_cloud(PointCloud(pts), pairs, cfg, np.random.default_rng(seed))
            assert len(res.pairs) >= 1024
            attempts.append(res.record.attempts)
        assert max(attempts) > 1

    def test_exhausted_attempts_raise(self):
        rng = np.random.default_rng(2)
        cloud, pairs = cloud_with_pairs(100, rng)
        cfg = AugmentConfig(min_pairs=101, max_resample_attempts=3)
        with pytest.raises(AugmentationError, match="cannot satisfy pair constraint"):
            augment_point_cloud(cloud, pairs, cfg, rng)

    def test_rejects_bad_pairs(self):
        cloud = PointCloud(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            augment_point_cloud(cloud, PairList([[5, 0, 1]]), AugmentConfig(min_pairs=1), np.random.default_rng(0))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_invariants_and_replay(self, seed):
        rng = np.random.default_rng(seed)
        cloud, pairs = cloud_with_pairs(400, rng)
        cfg = AugmentConfig(min_pairs=300)
        res = augment_point_cloud(cloud, pairs, cfg, np.random.default_rng(seed))
        assert len(res.pairs) >= 300
        src = cloud.points[res.kept]
        np.testing.assert_array_equal(res.cloud.points[:, 2], src[:, 2])
        np.testing.assert_allclose(np.hypot(*res.cloud.points[:, :2].T), np.hypot(*src[:, :2].T), rtol=0, atol=1e-12)
        np.testing.assert_array_equal(res.cloud.labels, cloud.labels[res.kept])
        # point i was paired with pixel i + 1, so every surviving pair must still say so
        np.testing.assert_array_equal(res.pairs.pixels, res.kept[res.pairs.points] + 1)
        replay, replay_pairs, _ = apply_point_transform(cloud, pairs, res.record)
        assert replay.points.tobytes() == res.cloud.points.tobytes()
        np.testing.assert_array_equal(replay_pairs.triples, res.pairs.triples)
        # cuboid side at most the configured fraction of each axis range
        moved = rotate_flip(cloud.points, res.record.theta, res.record.flip_x, res.record.flip_y)
        extent = moved.max(0) - moved.min(0)
        assert np.all(2 * np.asarray(res.record.cuboid_half) <= cfg.cuboid_max_frac * extent + 1e-12)


class TestImage:
    def test_identity(self):
        img, pairs = image_case(16, 12, 0, 40)
        part = slic(img, q=6)
        rec = ImageTransform.identity(16, 12)
        np.testing.assert_allclose(transform_image(img, rec).rgb, img.rgb, atol=1e-15)
        np.testing.assert_array_equal(transform_partition(part, rec).labels, part.labels)
        np.testing.assert_array_equal(transform_pairs(pairs, rec).triples, pairs.triples)

    def test_flip_reflects_columns(self):
        W, H = 16, 12
        rec = ImageTransform(0, 0, W, H, True, W, H, W, H)
        cols, rows = np.meshgrid(np.arange(W), np.arange(H))
        inside, new = transform_pixels(rows.ravel() * W + cols.ravel() + 1, rec)
        assert inside.all()
        np.testing.assert_array_equal((new - 1) % W, W - 1 - cols.ravel())
        np.testing.assert_array_equal((new - 1) // W, rows.ravel())
        img, _ = image_case(W, H, 3, 1)
        np.testing.assert_allclose(transform_image(img, rec).rgb, img.rgb[:, ::-1], atol=1e-15)

    def test_left_half_crop_coordinate_map(self):
        rec = ImageTransform(0, 0, 208, 224, False, 416, 224, 416, 224)
        inside, new = transform_pixels(np.array([50 * 416 + 100 + 1]), rec)
        assert inside[0]
        col, row = (new[0] - 1) % 416, (new[0] - 1) // 416
        # affine map of pixel centres: (x + 0.5) * 416 / 208 - 0.5
        oracle = (100 + 0.5) * 416 / 208 - 0.5
        assert abs(col - oracle) <= 1 and abs(col - 200) <= 1
        assert row == 50

    def test_pairs_outside_crop_dropped(self):
        rec = ImageTransform(4, 2, 8, 6, False, 16, 12, 8, 4)
        pix = np.array([2 * 16 + 4 + 1, 2 * 16 + 3 + 1, 8 * 16 + 11 + 1, 7 * 16 + 11 + 1])
        inside, _ = transform_pixels(pix, rec)
        np.testing.assert_array_equal(inside, [True, False, False, True])

    def test_exhausted_attempts_raise(self):
        img, pairs = image_case(64, 48, 1, 40)
        cfg = AugmentConfig(image_min_pairs=41, out_width=32, out_height=16, max_resample_attempts=5)
        with pytest.raises(AugmentationError):
            augment_image(img, SuperpixelPartition(np.zeros((48, 64), int)), pairs, cfg, np.random.default_rng(0))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_constraints(self, seed):
        img, pairs = image_case(64, 48, seed % 1000, 600)
        part = slic(img, q=20, iters=2)
        cfg = AugmentConfig(image_min_pairs=200, out_width=32, out_height=16)
        try:
            res = augment_image(img, part, pairs, cfg, np.random.default_rng(seed))
        except AugmentationError:
            return
        rec = res.record
        assert len(res.pairs) >= max(200, 0.75 * len(pairs))
        assert rec.w * rec.h >= 0.3 * 64 * 48
        assert 14 / 9 <= rec.w / rec.h <= 17 / 9
        assert (res.image.width, res.image.height) == (32, 16)
        p = res.partition
        assert p.labels.shape == (16, 32) and np.array_equal(np.unique(p.labels), np.arange(p.count))
        assert res.pairs.pixels.max() <= 32 * 16

    def test_record_json(self):
        doc = record_to_json(PointTransform(0.5, True, False, [1, 2, 3], [0.1, 0.2, 0.3]),
                             ImageTransform(1, 2, 3, 4, True, 8, 8, 4, 4))
        assert json.loads(json.dumps(doc)) == {
            "theta": 0.5, "flip_x": True, "flip_y": False,
            "cuboid": {"center": [1, 2, 3], "half_sides": [0.1, 0.2, 0.3]},
            "crop": {"x": 1, "y": 2, "w": 3, "h": 4, "flipped": True},
        }


class TestConfig:
    def test_reference_defaults(self):
        cfg = AugmentConfig()
        assert cfg.cuboid_max_frac == 0.10 and cfg.min_pairs == 1024
        assert cfg.crop_min_area_frac == 0.30 and cfg.crop_aspect_range == (14 / 9, 17 / 9)
        assert (cfg.out_width, cfg.out_height) == (416, 224)
        assert cfg.image_min_pairs == 1024 and cfg.image_min_frac == 0.75

    def test_invalid(self):
        with pytest.raises(ValueError):
            AugmentConfig(flip_x_prob=1.5)
        with pytest.raises(ValueError):
            AugmentConfig(crop_aspect_range=(2.0, 1.0))
        with pytest.raises(ValueError):
            AugmentConfig(cuboid_max_frac=0.0)
