"""Procedural multi-view clips from analytic signed distance fields.

Scenes are unions of moving primitives (sphere, box, ground plane), each
with a flat RGB albedo and a constant linear velocity.  Ground truth is
produced by sphere tracing the exact scene SDF, so every stored depth can
be re-derived independently.  One frame interval is one second, so
velocities are meters per frame.

Pixel (i, j) of an image is the ray through continuous image coordinates
(i + 0.5, j + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blobio import read_blob, write_blob
from .geometry import Camera, EgoPose, RigidTransform, look_rotation, rotation_about_z

TRACE_EPS = 1e-6
TRACE_MAX_STEPS = 512


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple
    velocity: tuple = (0.0, 0.0, 0.0)

    def sdf(self, p, time):
        c = np.asarray(self.center) + np.asarray(self.velocity) * time
        return np.linalg.norm(p - c, axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    albedo: tuple
    velocity: tuple = (0.0, 0.0, 0.0)

    def sdf(self, p, time):
        c = np.asarray(self.center) + np.asarray(self.velocity) * time
        q = np.abs(p - c) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class GroundPlane:
    height: float
    albedo: tuple
    velocity: tuple = (0.0, 0.0, 0.0)

    def sdf(self, p, time):
        h = self.height + self.velocity[2] * time
        return p[..., 2] - h


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")


def scene_sdf(scene, points, time=0.0):
    """Signed distance of the nearest primitive at (...,3) points."""
    p = np.asarray(points, dtype=np.float64)
    dists = np.stack([prim.sdf(p, time) for prim in scene.primitives], axis=-1)
    return np.min(dists, axis=-1)


def scene_sdf_with_albedo(scene, points, time=0.0):
    p = np.asarray(points, dtype=np.float64)
    dists = np.stack([prim.sdf(p, time) for prim in scene.primitives], axis=-1)
    nearest = np.argmin(dists, axis=-1)
    albedos = np.array([prim.albedo for prim in scene.primitives])
    return np.min(dists, axis=-1), albedos[nearest]


def trace_rays(scene, origins, directions, time=0.0, far=12.0):
    """Sphere-trace a batch of rays.

    Exact primitive SDFs are 1-Lipschitz, so stepping by the distance
    value cannot overshoot.  Returns (depth, hit, albedo); missed rays
    have depth = far and zero albedo.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = o.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(TRACE_MAX_STEPS):
        if not active.any():
            break
        p = o[active] + t[active, None] * d[active]
        dist = scene_sdf(scene, p, time)
        idx = np.flatnonzero(active)
        converged = dist < TRACE_EPS
        hit[idx[converged]] = True
        t[idx] += np.maximum(dist, 0.0)
        escaped = t[idx] > far
        active[idx[converged | escaped]] = False
    depth = np.where(hit, t, far)
    albedo = np.zeros((n, 3))
    if hit.any():
        p_hit = o[hit] + depth[hit, None] * d[hit]
        _, albedo[hit] = scene_sdf_with_albedo(scene, p_hit, time)
    return depth, hit, albedo


def trace_ray(scene, ray, time=0.0, far=12.0):
    """Single-ray wrapper: (depth, albedo) on hit, None on miss."""
    depth, hit, albedo = trace_rays(scene, ray.origin[None], ray.direction[None], time, far)
    if not hit[0]:
        return None
    return float(depth[0]), albedo[0]


def render_view(scene, camera, ego_pose, time=0.0, far=12.0):
    """Trace every pixel center; returns (rgb, depth, hit) images."""
    h, w = camera.height, camera.width
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    dirs_cam = np.stack(
        [(us - camera.cx) / camera.fx, (vs - camera.cy) / camera.fy, np.ones_like(us)],
        axis=-1,
    ).reshape(-1, 3)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=-1, keepdims=True)
    world_from_cam = ego_pose.world_from_ego.compose(camera.cam_from_ego.inverse())
    dirs = dirs_cam @ world_from_cam.rotation.T
    origins = np.broadcast_to(world_from_cam.translation, dirs.shape)
    depth, hit, albedo = trace_rays(scene, origins, dirs, time, far)
    return albedo.reshape(h, w, 3), depth.reshape(h, w), hit.reshape(h, w)


@dataclass(frozen=True)
class MultiViewClip:
    """T timestamps x V views with sparse depth ground truth.

    images: (T, V, H, W, 3) float32 in [0, 1]
    lidar_uv / lidar_depth: per (t, v), integer pixel indices (L, 2) as
    (column, row) and traced depths (L,)
    """

    images: np.ndarray
    lidar_uv: tuple
    lidar_depth: tuple
    poses: tuple
    cameras: tuple
    seed: int
    far: float

    @property
    def num_frames(self):
        return self.images.shape[0]

    @property
    def num_views(self):
        return self.images.shape[1]


def render_clip(scene, cameras, ego_trajectory, window, height, width, lidar_per_view, seed, far=12.0):
    """Render window frames from the trajectory and subsample hit pixels
    as emulated range-sensor returns."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if len(ego_trajectory) < window:
        raise ValueError(f"trajectory has {len(ego_trajectory)} poses, need {window}")
    cams = []
    for cam in cameras:
        if cam.height != height or cam.width != width:
            cam = Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.cam_from_ego, width, height)
        cams.append(cam)
    rng = np.random.default_rng(seed)
    n_views = len(cams)
    images = np.zeros((window, n_views, height, width, 3), dtype=np.float32)
    lidar_uv = []
    lidar_depth = []
    for t in range(window):
        pose = ego_trajectory[t]
        row_uv, row_depth = [], []
        for v, cam in enumerate(cams):
            rgb, depth, hit = render_view(scene, cam, pose, time=float(t), far=far)
            images[t, v] = rgb.astype(np.float32)
            hit_idx = np.flatnonzero(hit.ravel())
            if hit_idx.size == 0:
                import warnings

                warnings.warn(f"frame {t} view {v}: no hit pixels for range samples")
                row_uv.append(np.zeros((0, 2), dtype=np.int64))
                row_depth.append(np.zeros(0))
                continue
            take = min(lidar_per_view, hit_idx.size)
            chosen = rng.choice(hit_idx, size=take, replace=False)
            chosen.sort()
            jj, ii = np.divmod(chosen, width)
            row_uv.append(np.stack([ii, jj], axis=1).astype(np.int64))
            row_depth.append(depth.ravel()[chosen])
        lidar_uv.append(tuple(row_uv))
        lidar_depth.append(tuple(row_depth))
    return MultiViewClip(
        images=images,
        lidar_uv=tuple(lidar_uv),
        lidar_depth=tuple(lidar_depth),
        poses=tuple(ego_trajectory[:window]),
        cameras=tuple(cams),
        seed=seed,
        far=far,
    )


def default_scene():
    """Sphere, box, and ground plane inside the default voxel extent,
    with one moving object so temporal alignment matters."""
    return AnalyticScene(
        primitives=(
            GroundPlane(height=-0.5, albedo=(0.45, 0.42, 0.38)),
            Sphere(center=(6.0, 1.2, 0.4), radius=1.0, albedo=(0.85, 0.2, 0.15), velocity=(-0.2, 0.05, 0.0)),
            Box(center=(5.0, -2.0, 0.2), half_extents=(0.8, 0.8, 0.7), albedo=(0.15, 0.3, 0.8)),
        )
    )


def default_rig(width=64, height=48):
    """Two forward cameras, yawed apart so their frusta overlap ahead."""
    cams = []
    for side in (+1.0, -1.0):
        center = np.array([0.8, 0.35 * side, 1.1])
        forward = rotation_about_z(0.45 * side) @ np.array([1.0, 0.0, 0.0])
        rot = look_rotation(forward)
        cam_from_ego = RigidTransform(rot, -rot @ center)
        cams.append(
            Camera(
                fx=0.875 * width,
                fy=0.875 * width,
                cx=width / 2.0,
                cy=height / 2.0,
                cam_from_ego=cam_from_ego,
                width=width,
                height=height,
            )
        )
    return tuple(cams)


def default_trajectory(frames, speed=0.5, yaw_rate=0.04):
    """Forward motion with a gentle turn, one pose per frame."""
    poses = []
    position = np.zeros(3)
    for t in range(frames):
        yaw = yaw_rate * t
        poses.append(EgoPose(RigidTransform(rotation_about_z(yaw), position.copy()), timestamp=t))
        position = position + rotation_about_z(yaw) @ np.array([speed, 0.0, 0.0])
    return tuple(poses)


def save_clip(clip, directory):
    import os

    os.makedirs(directory, exist_ok=True)
    manifest = [
        ("frames", clip.num_frames),
        ("views", clip.num_views),
        ("height", clip.images.shape[2]),
        ("width", clip.images.shape[3]),
        ("seed", clip.seed),
        ("far", repr(clip.far)),
    ]
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        for key, value in manifest:
            f.write(f"{key}={value}\n")
    rig = {}
    for v, cam in enumerate(clip.cameras):
        rig[f"cam{v}_intrinsics"] = np.array([cam.fx, cam.fy, cam.cx, cam.cy])
        rig[f"cam{v}_rotation"] = cam.cam_from_ego.rotation
        rig[f"cam{v}_translation"] = cam.cam_from_ego.translation
    write_blob(os.path.join(directory, "cameras.blob"), rig)
    for t in range(clip.num_frames):
        entry = {
            "pose_rotation": clip.poses[t].world_from_ego.rotation,
            "pose_translation": clip.poses[t].world_from_ego.translation,
        }
        for v in range(clip.num_views):
            entry[f"image_{v}"] = clip.images[t, v]
            entry[f"lidar_uv_{v}"] = clip.lidar_uv[t][v]
            entry[f"lidar_depth_{v}"] = clip.lidar_depth[t][v]
        write_blob(os.path.join(directory, f"frame_{t:03d}.blob"), entry)


def load_clip(directory):
    import os

    manifest = {}
    with open(os.path.join(directory, "manifest.txt")) as f:
        for line in f:
            line = line.strip()
            if line:
                key, _, value = line.partition("=")
                manifest[key] = value
    frames = int(manifest["frames"])
    views = int(manifest["views"])
    height = int(manifest["height"])
    width = int(manifest["width"])
    rig = read_blob(os.path.join(directory, "cameras.blob"))
    cameras = []
    for v in range(views):
        fx, fy, cx, cy = rig[f"cam{v}_intrinsics"]
        cameras.append(
            Camera(
                fx=float(fx),
                fy=float(fy),
                cx=float(cx),
                cy=float(cy),
                cam_from_ego=RigidTransform(rig[f"cam{v}_rotation"], rig[f"cam{v}_translation"]),
                width=width,
                height=height,
            )
        )
    images = np.zeros((frames, views, height, width, 3), dtype=np.float32)
    lidar_uv, lidar_depth, poses = [], [], []
    for t in range(frames):
        entry = read_blob(os.path.join(directory, f"frame_{t:03d}.blob"))
        poses.append(EgoPose(RigidTransform(entry["pose_rotation"], entry["pose_translation"]), timestamp=t))
        row_uv, row_depth = [], []
        for v in range(views):
            images[t, v] = entry[f"image_{v}"]
            row_uv.append(entry[f"lidar_uv_{v}"])
            row_depth.append(entry[f"lidar_depth_{v}"])
        lidar_uv.append(tuple(row_uv))
        lidar_depth.append(tuple(row_depth))
    return MultiViewClip(
        images=images,
        lidar_uv=tuple(lidar_uv),
        lidar_depth=tuple(lidar_depth),
        poses=tuple(poses),
        cameras=tuple(cameras),
        seed=int(manifest["seed"]),
        far=float(manifest["far"]),
    )
