"""Camera and ego-motion mathematics.

Conventions (fixed here, asserted in tests):

* right-handed everywhere
* camera frame: +z forward (viewing direction), +x right, +y down;
  pixel u = fx*x/z + cx, v = fy*y/z + cy
* ego frame: +x forward, +y left, +z up
* ``Camera.cam_from_ego`` maps ego -> camera, ``EgoPose.world_from_ego``
  maps ego -> world

All functions are pure over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class RigidTransform:
    """y = rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r @ r.T, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation has determinant -1 (reflection)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        """Transform (...,3) points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other):
        """self o other: first `other`, then `self`."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def rotation_about_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def look_rotation(forward, up=(0.0, 0.0, 1.0)):
    """Camera-from-ego rotation for a camera looking along `forward`.

    Rows are the camera axes (right, down, forward) expressed in the ego
    frame, so R @ x_ego gives camera coordinates.
    """
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    u = np.asarray(up, dtype=np.float64)
    right = np.cross(f, u)
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise ValueError("forward direction parallel to up")
    right /= n
    down = np.cross(f, right)
    return np.stack([right, down, f])


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels, extrinsics camera<-ego."""

    fx: float
    fy: float
    cx: float
    cy: float
    cam_from_ego: RigidTransform
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def backproject(self, u, v):
        """Unit direction in the camera frame through pixel (u, v)."""
        d = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        return d / np.linalg.norm(d)

    def center_in_ego(self):
        return self.cam_from_ego.inverse().translation


@dataclass(frozen=True)
class EgoPose:
    """world<-ego rigid transform at one timestamp."""

    world_from_ego: RigidTransform
    timestamp: int = 0

    @classmethod
    def identity(cls, timestamp=0):
        return cls(RigidTransform.identity(), timestamp)


@dataclass(frozen=True)
class Ray:
    """World-frame ray with optional sample depths (filled by sampling)."""

    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple
    t: np.ndarray | None = None

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        if self.t is not None:
            t = np.asarray(self.t, dtype=np.float64)
            if t.size < 2 or np.any(np.diff(t) <= 0):
                raise ValueError("sample depths must be strictly increasing with K >= 2")
            object.__setattr__(self, "t", t)

    def at(self, t):
        return self.origin + np.multiply.outer(np.asarray(t), self.direction)


def generate_ray(camera, pixel, ego_pose):
    """World-frame ray through a pixel of a posed camera."""
    u, v = pixel
    if not (0 <= u <= camera.width and 0 <= v <= camera.height):
        raise ValueError(f"pixel {pixel} outside image {camera.width}x{camera.height}")
    ego_from_cam = camera.cam_from_ego.inverse()
    world_from_cam = ego_pose.world_from_ego.compose(ego_from_cam)
    origin = world_from_cam.translation
    direction = world_from_cam.rotation @ camera.backproject(u, v)
    return Ray(origin, direction, (u, v))


def sample_along_ray(ray, near, far, count, jitter=False, rng=None):
    """Stratified depths in [near, far]: bin midpoints, or one uniform draw
    per bin when jittering.  Returns (ray with t set, positions (K,3))."""
    if not 0 < near < far:
        raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
    if count < 2:
        raise ValueError(f"need at least 2 samples, got {count}")
    edges = np.linspace(near, far, count + 1)
    if jitter:
        if rng is None:
            rng = np.random.default_rng()
        offsets = rng.uniform(0.0, 1.0, count)
    else:
        offsets = np.full(count, 0.5)
    t = edges[:-1] + offsets * (edges[1:] - edges[:-1])
    sampled = replace(ray, t=t)
    return sampled, sampled.at(t)


def project_point(camera, ego_pose, world_point):
    """Pinhole projection; returns (u, v, depth, in_front)."""
    cam_from_world = camera.cam_from_ego.compose(ego_pose.world_from_ego.inverse())
    p = cam_from_world.apply(np.asarray(world_point, dtype=np.float64))
    z = p[2]
    if z <= 0:
        return 0.0, 0.0, z, False
    u = camera.fx * p[0] / z + camera.cx
    v = camera.fy * p[1] / z + camera.cy
    return float(u), float(v), float(z), True


def project_points(camera, ego_pose, world_points):
    """Vectorized projection of (N,3) points -> (u, v, depth, in_front)."""
    cam_from_world = camera.cam_from_ego.compose(ego_pose.world_from_ego.inverse())
    p = cam_from_world.apply(np.asarray(world_points, dtype=np.float64))
    z = p[:, 2]
    in_front = z > 0
    zs = np.where(in_front, z, 1.0)
    u = camera.fx * p[:, 0] / zs + camera.cx
    v = camera.fy * p[:, 1] / zs + camera.cy
    return u, v, z, in_front


def unproject_pixels(camera, uv, depths):
    """Pixels (N,2) at camera-frame z-depths (N,) -> ego-frame points (N,3)."""
    uv = np.asarray(uv, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    x = (uv[:, 0] - camera.cx) / camera.fx * d
    y = (uv[:, 1] - camera.cy) / camera.fy * d
    p_cam = np.stack([x, y, d], axis=1)
    return camera.cam_from_ego.inverse().apply(p_cam)


def warp_reference_points(points_xy, pose_a, pose_b):
    """Re-express BEV-plane points of frame a in frame b coordinates.

    (...,2) metric (x, y) coordinates; the transform is restricted to the
    BEV plane by embedding at z=0 and dropping z afterwards.
    """
    p = np.asarray(points_xy, dtype=np.float64)
    p3 = np.concatenate([p, np.zeros(p.shape[:-1] + (1,))], axis=-1)
    b_from_a = pose_b.world_from_ego.inverse().compose(pose_a.world_from_ego)
    return b_from_a.apply(p3)[..., :2]


def bev_cell_centers(x_min, x_max, y_min, y_max, nx, ny):
    """(ny, nx, 2) metric centers of a BEV grid; x varies along axis 1."""
    dx = (x_max - x_min) / nx
    dy = (y_max - y_min) / ny
    xs = x_min + (np.arange(nx) + 0.5) * dx
    ys = y_min + (np.arange(ny) + 0.5) * dy
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)
