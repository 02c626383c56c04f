"""Analytic SDF scenes, sphere tracing, and clip generation."""

import numpy as np
import pytest

from mv4d.geometry import EgoPose, Ray, RigidTransform, rotation_about_z
from mv4d.scene import (
    AnalyticScene,
    GroundPlane,
    Sphere,
    default_rig,
    default_scene,
    default_trajectory,
    load_clip,
    render_clip,
    render_view,
    save_clip,
    scene_sdf,
    trace_ray,
    trace_rays,
)


def sphere_scene(center=(0.0, 0.0, 5.0), radius=1.0):
    return AnalyticScene((Sphere(center=center, radius=radius, albedo=(1.0, 0.0, 0.0)),))


class TestSceneSdf:
    def test_sphere_center_is_minus_radius(self):
        assert scene_sdf(sphere_scene(), np.array([0.0, 0.0, 5.0])) == -1.0

    def test_sphere_outside_distance(self):
        assert scene_sdf(sphere_scene(), np.array([0.0, 0.0, 3.0])) == pytest.approx(1.0)

    def test_plane_distance(self):
        scene = AnalyticScene((GroundPlane(height=0.0, albedo=(0.5, 0.5, 0.5)),))
        assert scene_sdf(scene, np.array([7.0, -2.0, 3.0])) == pytest.approx(3.0)

    def test_min_over_primitives(self):
        scene = AnalyticScene(
            (
                GroundPlane(height=0.0, albedo=(0.5, 0.5, 0.5)),
                Sphere(center=(0.0, 0.0, 5.0), radius=1.0, albedo=(1.0, 0.0, 0.0)),
            )
        )
        # next to the sphere the sphere term wins, far away the plane does
        assert scene_sdf(scene, np.array([0.0, 0.0, 4.5])) == pytest.approx(-0.5)
        assert scene_sdf(scene, np.array([50.0, 0.0, 2.0])) == pytest.approx(2.0)

    def test_moving_sphere_translates(self):
        scene = AnalyticScene(
            (Sphere(center=(0.0, 0.0, 5.0), radius=1.0, albedo=(1, 0, 0), velocity=(1.0, 0, 0)),)
        )
        assert scene_sdf(scene, np.array([2.0, 0.0, 5.0]), time=2.0) == pytest.approx(-1.0)

    def test_gradient_is_unit_near_surfaces(self):
        scene = default_scene()
        rng = np.random.default_rng(0)
        origins = np.tile(np.array([0.0, 0.0, 1.0]), (64, 1))
        dirs = rng.standard_normal((64, 3))
        dirs[:, 0] = np.abs(dirs[:, 0]) + 0.5
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        depth, hit, _ = trace_rays(scene, origins, dirs, far=12.0)
        pts = origins[hit] + depth[hit, None] * dirs[hit]
        eps = 1e-5
        grad = np.stack(
            [
                (scene_sdf(scene, pts + eps * np.eye(3)[i]) - scene_sdf(scene, pts - eps * np.eye(3)[i]))
                / (2 * eps)
                for i in range(3)
            ],
            axis=-1,
        )
        np.testing.assert_allclose(np.linalg.norm(grad, axis=-1), 1.0, atol=1e-2)


class TestTraceRay:
    def test_head_on_sphere_depth(self):
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), (0, 0))
        depth, albedo = trace_ray(sphere_scene(), ray)
        assert depth == pytest.approx(4.0, abs=1e-4)
        np.testing.assert_allclose(albedo, [1.0, 0.0, 0.0])

    def test_miss_returns_none(self):
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, -1.0]), (0, 0))
        assert trace_ray(sphere_scene(), ray) is None

    def test_tangent_ray_depth(self):
        # ray at the tangent height of a unit sphere centred 5 ahead
        ray = Ray(np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]), (0, 0))
        hit = trace_ray(sphere_scene(), ray, far=20.0)
        if hit is not None:
            depth, _ = hit
            assert depth == pytest.approx(5.0, abs=1e-3)

    def test_retrace_matches_stored_depths(self):
        clip = render_clip(
            default_scene(),
            default_rig(64, 48),
            default_trajectory(3),
            window=3,
            height=48,
            width=64,
            lidar_per_view=64,
            seed=5,
        )
        scene = default_scene()
        for t in range(clip.num_frames):
            pose = clip.poses[t]
            for v in range(clip.num_views):
                cam = clip.cameras[v]
                world_from_cam = pose.world_from_ego.compose(cam.cam_from_ego.inverse())
                uv = clip.lidar_uv[t][v]
                stored = clip.lidar_depth[t][v]
                dirs_cam = np.stack(
                    [
                        (uv[:, 0] + 0.5 - cam.cx) / cam.fx,
                        (uv[:, 1] + 0.5 - cam.cy) / cam.fy,
                        np.ones(len(uv)),
                    ],
                    axis=-1,
                )
                dirs_cam /= np.linalg.norm(dirs_cam, axis=-1, keepdims=True)
                dirs = dirs_cam @ world_from_cam.rotation.T
                origins = np.broadcast_to(world_from_cam.translation, dirs.shape)
                depth, hit, _ = trace_rays(scene, origins, dirs, time=float(t), far=clip.far)
                assert hit.all()
                np.testing.assert_allclose(depth, stored, atol=1e-4)


class TestRenderClip:
    def test_static_scene_frames_identical(self):
        scene = AnalyticScene(
            (
                GroundPlane(height=-0.5, albedo=(0.4, 0.4, 0.4)),
                Sphere(center=(6.0, 0.0, 0.5), radius=1.0, albedo=(1.0, 0.0, 0.0)),
            )
        )
        rig = default_rig(32, 24)
        static = tuple(EgoPose(RigidTransform.identity(), t) for t in range(3))
        clip = render_clip(scene, rig, static, 3, 24, 32, 32, seed=1)
        for t in (1, 2):
            np.testing.assert_array_equal(clip.images[t], clip.images[0])

    def test_approach_decreases_depth_half_meter_per_frame(self):
        scene = AnalyticScene((Sphere(center=(8.0, 0.0, 1.1), radius=1.0, albedo=(1, 0, 0)),))
        cam = default_rig(32, 24)[0]
        # forward-looking camera straight at the sphere, no yaw offset
        from mv4d.geometry import Camera, look_rotation

        rot = look_rotation(np.array([1.0, 0.0, 0.0]))
        # principal point on the (12,16) pixel centre so that ray is exactly axial
        cam = Camera(
            fx=28.0, fy=28.0, cx=16.5, cy=12.5,
            cam_from_ego=RigidTransform(rot, -rot @ np.array([0.0, 0.0, 1.1])),
            width=32, height=24,
        )
        depths = []
        for t in range(3):
            pose = EgoPose(RigidTransform(np.eye(3), np.array([0.5 * t, 0.0, 0.0])), t)
            _, depth, hit = render_view(scene, cam, pose)
            assert hit[12, 16]
            depths.append(depth[12, 16])
        np.testing.assert_allclose(np.diff(depths), -0.5, atol=1e-4)

    def test_same_seed_same_bytes(self, tmp_path):
        kwargs = dict(window=2, height=24, width=32, lidar_per_view=32, seed=9)
        rig = default_rig(32, 24)
        a = render_clip(default_scene(), rig, default_trajectory(2), **kwargs)
        b = render_clip(default_scene(), rig, default_trajectory(2), **kwargs)
        save_clip(a, tmp_path / "a")
        save_clip(b, tmp_path / "b")
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_save_load_roundtrip(self, tmp_path):
        clip = render_clip(
            default_scene(), default_rig(32, 24), default_trajectory(2),
            window=2, height=24, width=32, lidar_per_view=16, seed=3,
        )
        save_clip(clip, tmp_path / "c")
        back = load_clip(tmp_path / "c")
        np.testing.assert_array_equal(back.images, clip.images)
        assert back.seed == clip.seed and back.far == clip.far
        for t in range(clip.num_frames):
            np.testing.assert_allclose(
                back.poses[t].world_from_ego.rotation, clip.poses[t].world_from_ego.rotation
            )
            for v in range(clip.num_views):
                np.testing.assert_array_equal(back.lidar_uv[t][v], clip.lidar_uv[t][v])
                np.testing.assert_allclose(back.lidar_depth[t][v], clip.lidar_depth[t][v])

    def test_rigid_invariance_of_rendering(self):
        # moving scene and camera by the same transform leaves pixels unchanged
        scene_a = AnalyticScene((Sphere(center=(5.0, 1.0, 0.5), radius=1.0, albedo=(1, 0, 0)),))
        shift = np.array([2.0, -3.0, 0.0])
        scene_b = AnalyticScene((Sphere(center=(7.0, -2.0, 0.5), radius=1.0, albedo=(1, 0, 0)),))
        cam = default_rig(32, 24)[0]
        pose_a = EgoPose.identity(0)
        pose_b = EgoPose(RigidTransform(np.eye(3), shift), 0)
        rgb_a, depth_a, hit_a = render_view(scene_a, cam, pose_a)
        rgb_b, depth_b, hit_b = render_view(scene_b, cam, pose_b)
        np.testing.assert_array_equal(hit_a, hit_b)
        np.testing.assert_allclose(depth_a[hit_a], depth_b[hit_b], atol=1e-6)
        np.testing.assert_allclose(rgb_a, rgb_b, atol=1e-6)


def test_zero_hit_view_warns():
    empty_above = AnalyticScene((GroundPlane(height=-100.0, albedo=(0.5, 0.5, 0.5)),))
    rig = default_rig(16, 12)
    with pytest.warns(UserWarning, match="hit"):
        render_clip(empty_above, rig, default_trajectory(2), 2, 12, 16, 8, seed=0, far=5.0)
