"""Depth-based 2.5D animation: scene lift, camera motion, reprojection.

Geometry is float64 throughout.  Pixel (u, v) at depth z unprojects through
the pinhole to ((u-cx)z/f, (v-cy)z/f, z); the principal point defaults to
the image center on the integer grid, so identity round trips are exact.
Rotation composition is intrinsic Z-Y-X: R = Rz(gamma) @ Ry(beta) @ Rx(alpha)
(golden-tested; the angle names carry no other convention here).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DependencyError, EmptyFrameError, ShapeError

MAX_SCENES = 4
DEFAULT_FPS = 24
SCENE_SECONDS = 4.0

Z_NEAR_DEFAULT = 1.0
Z_FAR_DEFAULT = 10.0


@dataclass
class Intrinsics:
    focal: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.focal <= 0:
            raise ConfigError(f"focal length must be > 0, got {self.focal}")

    @staticmethod
    def for_image(height: int, width: int, focal: Optional[float] = None) -> "Intrinsics":
        # default focal = image width (~53 degree horizontal field of view)
        return Intrinsics(focal=float(focal if focal is not None else width),
                          cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)


@dataclass
class DepthMap:
    values: np.ndarray
    z_near: float = Z_NEAR_DEFAULT
    z_far: float = Z_FAR_DEFAULT

    def __post_init__(self):
        if self.z_near <= 0 or self.z_near >= self.z_far:
            raise ConfigError(
                f"require 0 < z_near < z_far, got z_near={self.z_near}, z_far={self.z_far}"
            )
        v = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(v).all():
            raise ConfigError("depth map contains non-finite values")
        if v.min() < self.z_near or v.max() > self.z_far:
            raise ConfigError("depth values outside [z_near, z_far]")
        self.values = v


@dataclass
class CameraPose:
    position: tuple = (0.0, 0.0, 0.0)
    angles: tuple = (0.0, 0.0, 0.0)  # (alpha, beta, gamma)

    def rotation(self) -> np.ndarray:
        a, b, g = self.angles
        ca, sa = math.cos(a), math.sin(a)
        cb, sb = math.cos(b), math.sin(b)
        cg, sg = math.cos(g), math.sin(g)
        rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]], dtype=np.float64)
        ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]], dtype=np.float64)
        rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]], dtype=np.float64)
        return rz @ ry @ rx

    def is_identity(self, tol: float = 0.0) -> bool:
        return all(abs(v) <= tol for v in self.position) and all(
            abs(v) <= tol for v in self.angles
        )


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    colors: np.ndarray  # (N, 3) float32


CHANNELS = ("x", "y", "z", "alpha", "beta", "gamma")


@dataclass
class CameraTrajectory:
    """Per-scene piecewise-linear keyframes for the six pose channels.

    Each scene maps channel name to [(t, value)] with t in [0, 1]; missing
    channels stay 0.  The pose at the very start must be the identity.
    """

    scenes: list
    fps: int = DEFAULT_FPS
    scene_seconds: float = SCENE_SECONDS

    def __post_init__(self):
        if not self.scenes:
            raise ConfigError("trajectory needs at least one scene")
        if len(self.scenes) > MAX_SCENES:
            raise ConfigError(f"at most {MAX_SCENES} scenes supported, got {len(self.scenes)}")
        for scene in self.scenes:
            for name, keys in scene.items():
                if name not in CHANNELS:
                    raise ConfigError(f"unknown trajectory channel {name!r}")
                ts = [t for t, _ in keys]
                if any(not 0.0 <= t <= 1.0 for t in ts) or sorted(ts) != ts:
                    raise ConfigError(f"channel {name!r} keyframes must be sorted in [0,1]")
        if not self.pose_at(0.0).is_identity():
            raise ConfigError("trajectory must start at the identity pose")

    @property
    def frames_per_scene(self) -> int:
        return max(1, int(round(self.fps * self.scene_seconds)))

    @property
    def frame_count(self) -> int:
        return self.frames_per_scene * len(self.scenes)

    def _channel(self, scene: dict, name: str, t: float) -> float:
        keys = scene.get(name)
        if not keys:
            return 0.0
        ts = np.array([k[0] for k in keys], dtype=np.float64)
        vs = np.array([k[1] for k in keys], dtype=np.float64)
        return float(np.interp(t, ts, vs))

    def pose_at(self, progress: float) -> CameraPose:
        """Pose at global progress in [0, 1] across all scenes."""
        n = len(self.scenes)
        idx = min(int(progress * n), n - 1)
        local_t = progress * n - idx
        scene = self.scenes[idx]
        vals = {name: self._channel(scene, name, local_t) for name in CHANNELS}
        return CameraPose(position=(vals["x"], vals["y"], vals["z"]),
                          angles=(vals["alpha"], vals["beta"], vals["gamma"]))

    def pose_at_frame(self, k: int) -> CameraPose:
        n = self.frame_count
        return self.pose_at(k / max(n - 1, 1))

    @staticmethod
    def linear(fps: int = DEFAULT_FPS, scene_seconds: float = SCENE_SECONDS,
               **end_values) -> "CameraTrajectory":
        """Single scene ramping each named channel from 0 to its end value."""
        scene = {name: [(0.0, 0.0), (1.0, float(v))] for name, v in end_values.items()}
        return CameraTrajectory([scene], fps=fps, scene_seconds=scene_seconds)


# -- depth estimation ---------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDepthEstimator:
    """Analytic depth fields for tests plus a luminance fallback mode."""

    kind: str = "luma"  # constant | ramp_x | ramp_y | luma | two_plane
    z_near: float = Z_NEAR_DEFAULT
    z_far: float = Z_FAR_DEFAULT
    constant: float = Z_NEAR_DEFAULT
    split_column: int = 0
    near_value: float = Z_NEAR_DEFAULT
    far_value: float = Z_FAR_DEFAULT

    def estimate(self, image: np.ndarray) -> DepthMap:
        h, w = image.shape[:2]
        if self.kind == "constant":
            vals = np.full((h, w), self.constant, dtype=np.float64)
        elif self.kind == "ramp_x":
            ramp = np.linspace(self.z_near, self.z_far, w, dtype=np.float64)
            vals = np.broadcast_to(ramp, (h, w)).copy()
        elif self.kind == "ramp_y":
            ramp = np.linspace(self.z_near, self.z_far, h, dtype=np.float64)
            vals = np.broadcast_to(ramp[:, None], (h, w)).copy()
        elif self.kind == "two_plane":
            vals = np.full((h, w), self.far_value, dtype=np.float64)
            vals[:, : self.split_column] = self.near_value
        elif self.kind == "luma":
            luma = image.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
            vals = self.z_near + (1.0 - luma) * (self.z_far - self.z_near)
        else:
            raise ConfigError(f"unknown synthetic depth kind {self.kind!r}")
        vals = np.clip(vals, self.z_near, self.z_far)
        return DepthMap(vals, self.z_near, self.z_far)


@dataclass(frozen=True)
class ExternalDepthEstimator:
    endpoint: Optional[str] = None
    z_near: float = Z_NEAR_DEFAULT
    z_far: float = Z_FAR_DEFAULT

    def estimate(self, image: np.ndarray) -> DepthMap:
        if not self.endpoint:
            raise DependencyError(
                "external depth estimator has no endpoint configured; "
                "fall back to SyntheticDepthEstimator(kind='luma') or set an endpoint"
            )
        import requests

        try:
            resp = requests.post(self.endpoint, json={"pixels": image.ravel().tolist(),
                                                      "shape": list(image.shape)}, timeout=10.0)
            resp.raise_for_status()
            payload = resp.json()
            vals = np.asarray(payload["data"], dtype=np.float64).reshape(payload["shape"])
        except Exception as exc:  # noqa: BLE001
            raise DependencyError(f"depth estimator at {self.endpoint} failed: {exc}") from exc
        return DepthMap(np.clip(vals, self.z_near, self.z_far), self.z_near, self.z_far)


def estimate_depth(image: np.ndarray, estimator) -> DepthMap:
    return estimator.estimate(image)


# -- geometry -----------------------------------------------------------------


def unproject(image: np.ndarray, depth: DepthMap, intrinsics: Intrinsics) -> PointCloud:
    """Lift every pixel to a colored 3-D point through the pinhole inverse."""
    h, w = image.shape[:2]
    if depth.values.shape != (h, w):
        raise ShapeError(f"depth shape {depth.values.shape} != image shape {(h, w)}")
    z = depth.values
    if z.min() <= 0:
        raise ConfigError("unproject requires strictly positive depth")
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    x = (u - intrinsics.cx) * z / intrinsics.focal
    y = (v - intrinsics.cy) * z / intrinsics.focal
    points = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    colors = image.reshape(-1, image.shape[2]).astype(np.float32)
    return PointCloud(points, colors)


def apply_rigid(points: np.ndarray, rotation: np.ndarray, translation: np.ndarray,
                scene_center: np.ndarray) -> np.ndarray:
    """p' = R (p - c) + c + t."""
    c = np.asarray(scene_center, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64)
    return (points - c) @ rotation.T + c + t


def apply_pose(cloud: PointCloud, pose: CameraPose, scene_center) -> PointCloud:
    """Rotate around axes through the scene center, then translate."""
    if pose.is_identity():
        return PointCloud(cloud.points.copy(), cloud.colors.copy())
    moved = apply_rigid(cloud.points, pose.rotation(), np.asarray(pose.position, np.float64),
                        scene_center)
    return PointCloud(moved, cloud.colors)


def project_coordinates(points: np.ndarray, intrinsics: Intrinsics):
    """Continuous pixel coordinates (u, v) and depth for each point."""
    z = points[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.focal * points[:, 0] / z + intrinsics.cx
        v = intrinsics.focal * points[:, 1] / z + intrinsics.cy
    return u, v, z


def project(cloud: PointCloud, intrinsics: Intrinsics, resolution: tuple):
    """Z-buffered nearest-point splat; returns (frame, hole_mask)."""
    h, w = resolution
    u, v, z = project_coordinates(cloud.points, intrinsics)
    visible = z > 0
    if not visible.any():
        raise EmptyFrameError("all points are behind the camera")
    ui = np.round(u[visible]).astype(np.int64)
    vi = np.round(v[visible]).astype(np.int64)
    zi = z[visible]
    ci = cloud.colors[visible]
    inside = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    if not inside.any():
        raise EmptyFrameError("no point projects inside the frame")
    ui, vi, zi, ci = ui[inside], vi[inside], zi[inside], ci[inside]

    # write far-to-near so the nearest point wins each pixel
    order = np.argsort(-zi, kind="stable")
    frame = np.zeros((h, w, cloud.colors.shape[1]), dtype=np.float32)
    frame[vi[order], ui[order]] = ci[order]
    hole_mask = np.ones((h, w), dtype=bool)
    hole_mask[vi, ui] = False
    return frame, hole_mask


def fill_holes(frame: np.ndarray, hole_mask: np.ndarray) -> np.ndarray:
    """Copy each hole pixel from its nearest rendered pixel."""
    if not hole_mask.any():
        return frame
    if hole_mask.all():
        return frame
    _, (iy, ix) = ndimage.distance_transform_edt(hole_mask, return_indices=True)
    return frame[iy, ix]


# -- animation driver -----------------------------------------------------------


@dataclass
class AnimationResult:
    frames: list
    poses: list
    fps: int


RefinerFn = Callable[[np.ndarray, float, int], np.ndarray]
"""(frame, strength, seed) -> refined frame."""


def animate(
    image: np.ndarray,
    trajectory: CameraTrajectory,
    i2i_strength: float,
    refiner: Optional[RefinerFn] = None,
    seed: int = 0,
    estimator=None,
    intrinsics: Optional[Intrinsics] = None,
    scene_center=None,
    frame_count: Optional[int] = None,
) -> AnimationResult:
    """Frame-by-frame warp of the running image by the pose delta, with an
    image-to-image touch-up after every transform when strength > 0."""
    if not 0.0 <= i2i_strength <= 1.0:
        raise ConfigError(f"i2i_strength must be in [0,1], got {i2i_strength}")
    if i2i_strength > 0 and refiner is None:
        raise DependencyError("i2i_strength > 0 requires a refiner model")
    estimator = estimator or SyntheticDepthEstimator(kind="luma")
    h, w = image.shape[:2]
    K = intrinsics or Intrinsics.for_image(h, w)
    n = frame_count or trajectory.frame_count

    frames = [image.copy()]
    poses = [trajectory.pose_at(0.0)]
    cur = image
    prev = poses[0]
    for k in range(1, n):
        pose = trajectory.pose_at(k / max(n - 1, 1))
        r_prev, u_prev = prev.rotation(), np.asarray(prev.position, np.float64)
        r_k, u_k = pose.rotation(), np.asarray(pose.position, np.float64)
        r_delta = r_k @ r_prev.T
        u_delta = u_k - r_delta @ u_prev

        if np.allclose(r_delta, np.eye(3)) and np.allclose(u_delta, 0.0):
            frame = cur.copy()
        else:
            depth = estimate_depth(cur, estimator)
            cloud = unproject(cur, depth, K)
            center = (cloud.points.mean(axis=0) if scene_center is None
                      else np.asarray(scene_center, np.float64))
            moved = apply_rigid(cloud.points, r_delta, u_delta, center)
            frame, holes = project(PointCloud(moved, cloud.colors), K, (h, w))
            frame = fill_holes(frame, holes)
        if i2i_strength > 0:
            frame = refiner(frame, i2i_strength, seed + k)
        frames.append(frame)
        poses.append(pose)
        cur = frame
        prev = pose
    return AnimationResult(frames=frames, poses=poses, fps=trajectory.fps)


def save_animation(result: AnimationResult, out_dir: Path) -> Path:
    """Numbered PNG frames plus a manifest with fps and per-frame poses."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(result.frames):
        arr = np.clip(frame * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(out_dir / f"frame_{i:05d}.png")
    manifest = {
        "fps": result.fps,
        "frame_count": len(result.frames),
        "poses": [{"position": list(p.position), "angles": list(p.angles)}
                  for p in result.poses],
    }
    path = out_dir / "animation.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
