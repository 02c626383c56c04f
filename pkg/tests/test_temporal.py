"""Height/channel reshapes, deformable attention, and frame reconstruction."""

import numpy as np
import pytest

from mv4d import autodiff as ad
from mv4d.autodiff import Tape, Tensor
from mv4d.encoder import VoxelGrid, VoxelSpec
from mv4d.geometry import EgoPose, RigidTransform
from mv4d.gradcheck import spot_gradcheck
from mv4d.temporal import (
    STRATEGIES,
    BevGrid,
    DeformAttnParams,
    QueryGrid,
    channel_to_height,
    choose_drop_index,
    deform_attn,
    height_to_channel,
    init_temporal,
    metric_to_grid,
    reconstruct_dropped,
    reference_grid,
)

SPEC4 = VoxelSpec(nx=4, ny=4, nz=2)


def voxel(features, timestamp=0, requires_grad=False):
    return VoxelGrid(features=Tensor(features, requires_grad=requires_grad), spec=SPEC4, timestamp=timestamp)


def constant_bev(value_vector, timestamp=0):
    c = len(value_vector)
    data = np.tile(np.asarray(value_vector, dtype=np.float64)[:, None, None], (1, 4, 4))
    return BevGrid(features=Tensor(data), spec=SPEC4, timestamp=timestamp)


def identity_attn(cq, nh, kd, n_slots):
    def zeros(*shape):
        return Tensor(np.zeros(shape))

    return DeformAttnParams(
        value_weight=Tensor(np.eye(cq)),
        value_bias=zeros(cq),
        offset_weight=zeros(cq, nh * n_slots * kd * 2),
        offset_bias=zeros(nh * n_slots * kd * 2),
        attn_weight=zeros(cq, nh * n_slots * kd),
        attn_bias=zeros(nh * n_slots * kd),
        output_weight=Tensor(np.eye(cq)),
        output_bias=zeros(cq),
        n_heads=nh,
        n_points=kd,
        n_slots=n_slots,
    )


def center_refs():
    return metric_to_grid(SPEC4, reference_grid(SPEC4))


def static_poses(n):
    return tuple(EgoPose.identity(t) for t in range(n))


class TestHeightChannel:
    def test_layout(self):
        v = voxel(np.arange(2 * 3 * 4 * 5, dtype=np.float64).reshape(2, 3, 4, 5), 0)
        v = VoxelGrid(features=v.features, spec=SPEC4, timestamp=0)
        b = height_to_channel(v)
        assert b.features.shape == (6, 4, 5)
        # (c=1, z=2) lands at channel 1*3+2 = 5
        np.testing.assert_array_equal(b.features.data[5], v.features.data[1, 2])

    def test_roundtrip_exact(self):
        data = np.random.default_rng(0).standard_normal((2, 2, 4, 4))
        v = voxel(data)
        back = channel_to_height(height_to_channel(v), z_cells=2)
        assert back.features.data.tobytes() == data.tobytes()

    def test_indivisible_channels_rejected(self):
        b = BevGrid(features=Tensor(np.zeros((5, 4, 4))), spec=SPEC4, timestamp=0)
        with pytest.raises(ValueError, match="divisible"):
            channel_to_height(b, z_cells=2)


class TestDeformAttn:
    def test_constant_sources_pass_through(self):
        # identity value/output projections, zero offsets: softmax weights
        # sum to 1, so any constant field passes through unchanged
        value = [0.3, -0.7, 2.0, 1.1]
        params = identity_attn(cq=4, nh=2, kd=3, n_slots=2)
        params.attn_bias.data[:] = np.random.default_rng(1).standard_normal(params.attn_bias.size)
        query = QueryGrid(features=Tensor(np.random.default_rng(2).standard_normal((4, 4, 4))), branch="short")
        sources = [constant_bev(value), constant_bev(value)]
        refs = [center_refs(), center_refs()]
        out = deform_attn(query, refs, sources, params)
        expected = np.tile(np.asarray(value)[:, None, None], (1, 4, 4))
        np.testing.assert_allclose(out.features.data, expected, atol=1e-12)

    def test_uniform_weights_average_two_sources(self):
        params = identity_attn(cq=2, nh=1, kd=4, n_slots=2)
        query = QueryGrid(features=Tensor(np.zeros((2, 4, 4))), branch="short")
        out = deform_attn(
            query,
            [center_refs(), center_refs()],
            [constant_bev([1.0, 3.0]), constant_bev([2.0, -1.0])],
            params,
        )
        expected = np.tile(np.array([1.5, 1.0])[:, None, None], (1, 4, 4))
        np.testing.assert_allclose(out.features.data, expected, atol=1e-12)

    def test_out_of_bounds_samples_contribute_zero(self):
        params = identity_attn(cq=2, nh=1, kd=2, n_slots=1)
        query = QueryGrid(features=Tensor(np.zeros((2, 4, 4))), branch="short")
        far_refs = np.full((16, 2), -10.0)
        src = constant_bev([5.0, 7.0])
        out = deform_attn(query, [far_refs], [src], params)
        np.testing.assert_array_equal(out.features.data, 0.0)

    def test_out_of_bounds_zero_gradient_to_source(self):
        params = identity_attn(cq=2, nh=1, kd=2, n_slots=1)
        query = QueryGrid(features=Tensor(np.zeros((2, 4, 4))), branch="short")
        src_feat = Tensor(np.random.default_rng(3).standard_normal((2, 4, 4)), requires_grad=True)
        src = BevGrid(features=src_feat, spec=SPEC4, timestamp=0)
        with Tape() as tape:
            out = deform_attn(query, [np.full((16, 2), -10.0)], [src], params)
            loss = ad.reduce_sum(out.features)
        np.testing.assert_array_equal(tape.grad(tape.gradients(loss), src_feat), 0.0)

    def test_single_present_slot_renormalizes(self):
        # one of two parameter slots absent: weights renormalize over the rest
        params = identity_attn(cq=2, nh=1, kd=3, n_slots=2)
        params.attn_bias.data[:] = [4.0, -1.0, 0.5, 2.0, 2.0, 2.0]
        query = QueryGrid(features=Tensor(np.zeros((2, 4, 4))), branch="short")
        out = deform_attn(query, [center_refs()], [constant_bev([2.5, -0.5])], params, slots=[1])
        expected = np.tile(np.array([2.5, -0.5])[:, None, None], (1, 4, 4))
        np.testing.assert_allclose(out.features.data, expected, atol=1e-12)

    def test_gradcheck_small_grid(self):
        rng = np.random.default_rng(4)
        params = DeformAttnParams(
            value_weight=Tensor(rng.standard_normal((2, 2)) * 0.5, requires_grad=True),
            value_bias=Tensor(np.zeros(2), requires_grad=True),
            offset_weight=Tensor(rng.standard_normal((2, 8)) * 0.1, requires_grad=True),
            offset_bias=Tensor(rng.uniform(-0.4, 0.4, 8), requires_grad=True),
            attn_weight=Tensor(rng.standard_normal((2, 4)) * 0.3, requires_grad=True),
            attn_bias=Tensor(np.zeros(4), requires_grad=True),
            output_weight=Tensor(rng.standard_normal((2, 2)) * 0.5, requires_grad=True),
            output_bias=Tensor(np.zeros(2), requires_grad=True),
            n_heads=1,
            n_points=2,
            n_slots=2,
        )
        query = QueryGrid(features=Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True), branch="short")
        src_a = BevGrid(Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True), SPEC4, 0)
        src_b = BevGrid(Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True), SPEC4, 1)
        probe = Tensor(rng.standard_normal((2, 4, 4)))
        refs = [center_refs() + 0.21, center_refs() - 0.17]

        def fn():
            with Tape() as tape:
                out = deform_attn(query, refs, [src_a, src_b], params)
                loss = ad.reduce_sum(ad.mul(out.features, probe))
            return loss, tape

        tensors = [query.features, src_a.features, src_b.features] + list(
            params.parameters("x").values()
        )
        assert spot_gradcheck(fn, tensors, samples=4, eps=1e-6, seed=1) < 1e-3


class TestReconstructDropped:
    def grids(self, n, seed=0, requires_grad=False):
        rng = np.random.default_rng(seed)
        return [voxel(rng.standard_normal((2, 2, 4, 4)), t, requires_grad) for t in range(n)]

    def test_strategy_none_bypasses(self):
        grids = self.grids(3)
        params = init_temporal(np.random.default_rng(0), "none", 3, SPEC4, 4)
        out = reconstruct_dropped(grids, 1, static_poses(3), params)
        assert out is grids[1]

    def test_warp_cat_identity_perceptron_reproduces_constant(self):
        from mv4d.temporal import TemporalParams

        cp = 4
        grids = [voxel(np.full((2, 2, 4, 4), 0.7), t) for t in range(3)]
        w1 = np.vstack([np.eye(cp) / 2.0, np.eye(cp) / 2.0])
        params = TemporalParams(
            strategy="warp-cat",
            window=3,
            fuse_w1=Tensor(w1),
            fuse_b1=Tensor(np.zeros(cp)),
            fuse_w2=Tensor(np.eye(cp)),
            fuse_b2=Tensor(np.zeros(cp)),
        )
        out = reconstruct_dropped(grids, 1, static_poses(3), params)
        np.testing.assert_allclose(out.features.data, 0.7, atol=1e-12)

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_output_shape_contract(self, strategy):
        grids = self.grids(3, seed=5)
        params = init_temporal(np.random.default_rng(1), strategy, 3, SPEC4, 4)
        for m in (0, 1, 2):
            out = reconstruct_dropped(grids, m, static_poses(3), params)
            assert out.features.shape == (2, 2, 4, 4)

    def test_drop_index_out_of_range(self):
        grids = self.grids(2)
        params = init_temporal(np.random.default_rng(0), "short", 2, SPEC4, 4)
        with pytest.raises(ValueError, match="range"):
            reconstruct_dropped(grids, 2, static_poses(2), params)

    def test_window_too_small_for_strategy(self):
        with pytest.raises(ValueError, match="window"):
            init_temporal(np.random.default_rng(0), "both", 1, SPEC4, 4)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError, match="strategy"):
            init_temporal(np.random.default_rng(0), "fancy", 3, SPEC4, 4)

    def test_end_to_end_both_gradcheck(self):
        grids = self.grids(2, seed=9, requires_grad=True)
        params = init_temporal(np.random.default_rng(2), "both", 2, SPEC4, 4)
        probe = Tensor(np.random.default_rng(3).standard_normal((2, 2, 4, 4)))
        poses = static_poses(2)

        def fn():
            with Tape() as tape:
                out = reconstruct_dropped(grids, 0, poses, params)
                loss = ad.reduce_sum(ad.mul(out.features, probe))
            return loss, tape

        tensors = [g.features for g in grids] + list(params.parameters().values())
        assert spot_gradcheck(fn, tensors, samples=3, eps=1e-6, seed=2) < 1e-3


class TestChooseDropIndex:
    def test_range_and_determinism(self):
        seen = {choose_drop_index(5, np.random.default_rng(s)) for s in range(50)}
        assert seen == {0, 1, 2, 3, 4}
        a = choose_drop_index(5, np.random.default_rng(3))
        b = choose_drop_index(5, np.random.default_rng(3))
        assert a == b

    def test_degenerate_window(self):
        assert choose_drop_index(1, np.random.default_rng(0)) == 0

    def test_invalid_window(self):
        with pytest.raises(ValueError):
            choose_drop_index(0, np.random.default_rng(0))
