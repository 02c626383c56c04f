"""Supervision-pixel sampling and two-stage patch masking."""

import numpy as np
import pytest

from mv4d.masking import (
    PixelMask,
    SupervisionSet,
    apply_mask,
    build_mask,
    downsample_mask,
    load_masks,
    save_masks,
    select_supervision_pixels,
)
from mv4d.scene import default_rig, default_scene, default_trajectory, render_clip


def make_clip(**kw):
    args = dict(window=2, height=48, width=64, lidar_per_view=128, seed=11)
    args.update(kw)
    return render_clip(default_scene(), default_rig(args["width"], args["height"]),
                       default_trajectory(args["window"]), **args)


def supervision_at(uv_rows_cols):
    uv = np.asarray(uv_rows_cols, dtype=np.int64)
    n = len(uv)
    return SupervisionSet(
        uv=uv, colors=np.zeros((n, 3)), depths=np.ones(n), frame=0, view=0
    )


class TestSelectSupervision:
    def test_threshold_filters_candidates(self):
        clip = make_clip()
        tau = 10.0
        with pytest.warns(UserWarning, match="candidates below tau"):
            s = select_supervision_pixels(clip, 0, 0, tau, 1000, seed=0)
        assert np.all(s.depths < tau)
        # candidates above tau never appear
        raw = clip.lidar_depth[0][0]
        assert len(s) == int((raw < tau).sum())

    def test_exact_count_without_replacement(self):
        clip = make_clip()
        s = select_supervision_pixels(clip, 0, 0, 12.0, 16, seed=1)
        assert len(s) == 16
        assert len({(int(u), int(v)) for u, v in s.uv}) == 16

    def test_same_seed_same_set(self):
        clip = make_clip()
        a = select_supervision_pixels(clip, 0, 0, 12.0, 16, seed=7)
        b = select_supervision_pixels(clip, 0, 0, 12.0, 16, seed=7)
        np.testing.assert_array_equal(a.uv, b.uv)
        np.testing.assert_array_equal(a.depths, b.depths)

    def test_colors_come_from_the_image(self):
        clip = make_clip()
        s = select_supervision_pixels(clip, 0, 1, 12.0, 8, seed=2)
        img = clip.images[0, 1]
        for (u, v), c in zip(s.uv, s.colors):
            np.testing.assert_allclose(c, img[int(v), int(u)], atol=1e-7)

    def test_empty_candidates_error(self):
        clip = make_clip()
        with pytest.raises(ValueError, match="tau"):
            select_supervision_pixels(clip, 0, 0, 0.01, 4, seed=0)

    def test_short_candidate_pool_warns_and_returns_all(self):
        clip = make_clip(lidar_per_view=8)
        with pytest.warns(UserWarning):
            s = select_supervision_pixels(clip, 0, 0, 12.0, 10_000, seed=0)
        assert len(s) == int((clip.lidar_depth[0][0] < 12.0).sum())


class TestBuildMask:
    def test_zero_ratio_no_supervision_all_visible(self):
        m = build_mask(None, 48, 64, 4, 8, 0.0, seed=0)
        assert not m.mask.any()

    def test_stage_two_cell_count_arithmetic(self):
        # 10 supervision pixels at spread-out cell centres knock out
        # exactly 10 of the 48 cells; stage 2 masks round(0.3*38) = 11 more
        rows = [4, 4, 4, 4, 4, 28, 28, 28, 28, 28]
        cols = [4, 12, 20, 28, 36, 4, 12, 20, 28, 36]
        sup = supervision_at(list(zip(cols, rows)))
        m = build_mask(sup, 48, 64, 4, 8, 0.3, seed=3)
        # reconstruct the cell bookkeeping: a cell is stage-1 touched if any
        # supervision patch overlaps it
        stage1 = np.zeros((48, 64), dtype=bool)
        for u, v in sup.uv:
            stage1[v - 2 : v + 2, u - 2 : u + 2] = True
        touched = sum(
            stage1[r : r + 8, c : c + 8].any()
            for r in range(0, 48, 8)
            for c in range(0, 64, 8)
        )
        assert touched == 10
        masked_cells = sum(
            m.mask[r : r + 8, c : c + 8].all() and not stage1[r : r + 8, c : c + 8].any()
            for r in range(0, 48, 8)
            for c in range(0, 64, 8)
        )
        assert masked_cells == round(0.3 * 38)

    def test_supervision_pixels_always_masked(self):
        rng = np.random.default_rng(4)
        uv = np.stack([rng.integers(0, 64, 20), rng.integers(0, 48, 20)], axis=1)
        m = build_mask(supervision_at(uv), 48, 64, 4, 8, 0.3, seed=5)
        for u, v in uv:
            assert m.mask[v, u]

    def test_border_supervision_pixels_still_masked(self):
        uv = [(0, 0), (63, 47), (0, 47), (63, 0)]
        m = build_mask(supervision_at(uv), 48, 64, 4, 8, 0.0, seed=0)
        for u, v in uv:
            assert m.mask[v, u]

    def test_ratio_out_of_range(self):
        with pytest.raises(ValueError):
            build_mask(None, 48, 64, 4, 8, 1.5, seed=0)

    def test_deterministic_under_seed(self):
        sup = supervision_at([(10, 10), (40, 30)])
        a = build_mask(sup, 48, 64, 4, 8, 0.3, seed=9)
        b = build_mask(sup, 48, 64, 4, 8, 0.3, seed=9)
        np.testing.assert_array_equal(a.mask, b.mask)


class TestApplyMask:
    def test_all_visible_identity(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        m = PixelMask(np.zeros((8, 8), dtype=bool), 4, 8, 0.0)
        out, vis = apply_mask(img, m)
        np.testing.assert_array_equal(out, img)
        np.testing.assert_array_equal(vis, 1.0)

    def test_all_masked_zeroes(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        m = PixelMask(np.ones((8, 8), dtype=bool), 4, 8, 1.0)
        out, vis = apply_mask(img, m)
        np.testing.assert_array_equal(out, 0.0)
        np.testing.assert_array_equal(vis, 0.0)

    def test_idempotent(self):
        img = np.random.default_rng(1).random((8, 6, 3))
        mask = np.zeros((8, 6), dtype=bool)
        mask[:4, :3] = True
        m = PixelMask(mask, 4, 8, 0.5)
        once, _ = apply_mask(img, m)
        twice, _ = apply_mask(once, m)
        np.testing.assert_array_equal(once, twice)

    def test_shape_mismatch(self):
        m = PixelMask(np.zeros((8, 8), dtype=bool), 4, 8, 0.0)
        with pytest.raises(ValueError):
            apply_mask(np.zeros((4, 4, 3)), m)


class TestDownsampleMask:
    def test_stride_one_identity(self):
        m = np.random.default_rng(0).random((6, 8)) > 0.5
        np.testing.assert_array_equal(downsample_mask(m, 1), m)

    def test_any_visible_pixel_makes_cell_visible(self):
        m = np.ones((2, 2), dtype=bool)
        m[1, 1] = False  # one visible pixel
        out = downsample_mask(m, 2)
        assert out.shape == (1, 1)
        assert not out[0, 0]

    def test_fully_hidden_block_stays_hidden(self):
        m = np.ones((4, 4), dtype=bool)
        assert downsample_mask(m, 2).all()

    def test_ragged_border_uses_partial_block(self):
        m = np.ones((5, 5), dtype=bool)
        m[4, 4] = False
        out = downsample_mask(m, 2)
        assert out.shape == (3, 3)
        assert not out[2, 2]
        assert out[:2, :2].all()


def test_masks_roundtrip_through_blob(tmp_path):
    masks = {
        (0, 0): build_mask(supervision_at([(5, 5)]), 24, 32, 4, 8, 0.3, seed=1),
        (1, 1): build_mask(supervision_at([(20, 10)]), 24, 32, 4, 8, 0.3, seed=2),
    }
    save_masks(tmp_path / "m.blob", masks)
    back = load_masks(tmp_path / "m.blob")
    assert set(back) == set(masks)
    for key, m in masks.items():
        np.testing.assert_array_equal(back[key].mask, m.mask)
        assert back[key].s_ray == m.s_ray
        assert back[key].ratio == m.ratio
