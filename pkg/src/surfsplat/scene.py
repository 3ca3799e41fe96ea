"""Scene data model: Gaussian primitives, cameras, and the derivations
(covariance, shortest-axis normal, SH color) every other module consumes.

A :class:`Scene` stores primitives struct-of-arrays style; :class:`GaussianPrimitive`
is a per-splat value view used at API boundaries and in tests.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io_utils

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

SH_COEFFS_FULL = 16  # degree 3
CONTAINER_MAGIC = b"GLSC"
CONTAINER_VERSION = 1


class InvalidParameterError(ValueError):
    """Raised when a geometric quantity violates its domain invariants."""


@dataclass
class GaussianPrimitive:
    center: np.ndarray      # (3,)
    scale: np.ndarray       # (3,) positive
    rotation: np.ndarray    # (4,) unit quaternion, (w, x, y, z)
    opacity: float          # in [0, 1]
    sh_coeffs: np.ndarray   # (16, 3), degree 0..3
    feature: np.ndarray     # (D_f,)

    def validate(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise InvalidParameterError("scale components must be positive")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise InvalidParameterError("rotation quaternion must be unit norm")
        if not 0.0 <= self.opacity <= 1.0:
            raise InvalidParameterError("opacity must lie in [0, 1]")


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # (4, 4) rigid transform
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise InvalidParameterError("require 0 < near < far")

    @property
    def position(self):
        """Camera center in world coordinates."""
        R = self.world_to_camera[:3, :3]
        t = self.world_to_camera[:3, 3]
        return -R.T @ t

    def ray_dirs(self):
        """Unit viewing directions through pixel centers, camera frame (H, W, 3)."""
        xs = (np.arange(self.width) - self.cx) / self.fx
        ys = (np.arange(self.height) - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        dirs = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
        return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


class Scene:
    """Ordered collection of Gaussian primitives with a shared feature dim.

    Arrays: centers (N,3), scales (N,3), rotations (N,4) unit (w,x,y,z),
    opacities (N,), sh (N,16,3), features (N,D_f). Immutable during rendering;
    the trainer replaces arrays wholesale between steps.
    """

    def __init__(self, centers, scales, rotations, opacities, sh, features,
                 background_color=(0.0, 0.0, 0.0)):
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        if n == 0:
            raise InvalidParameterError("scene must contain at least one primitive")
        self.scales = np.asarray(scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        self.opacities = np.asarray(opacities, dtype=np.float64).reshape(n)
        self.sh = np.asarray(sh, dtype=np.float64).reshape(n, SH_COEFFS_FULL, 3)
        self.features = np.asarray(features, dtype=np.float64).reshape(n, -1)
        self.background_color = np.asarray(background_color, dtype=np.float64)

    def __len__(self):
        return len(self.centers)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def primitive(self, i) -> GaussianPrimitive:
        return GaussianPrimitive(
            center=self.centers[i], scale=self.scales[i],
            rotation=self.rotations[i], opacity=float(self.opacities[i]),
            sh_coeffs=self.sh[i], feature=self.features[i])

    # -- serialization -----------------------------------------------------

    def save(self, path):
        """Versioned binary container: magic, version, count, feature_dim,
        then per-primitive little-endian f32 fields in declared order."""
        n, df = len(self), self.feature_dim
        rec = np.zeros((n, 3 + 3 + 4 + 1 + SH_COEFFS_FULL * 3 + df), dtype="<f4")
        rec[:, 0:3] = self.centers
        rec[:, 3:6] = self.scales
        rec[:, 6:10] = self.rotations
        rec[:, 10] = self.opacities
        rec[:, 11:11 + 48] = self.sh.reshape(n, 48)
        rec[:, 59:] = self.features
        header = CONTAINER_MAGIC + struct.pack("<III", CONTAINER_VERSION, n, df)
        Path(path).write_bytes(header + rec.tobytes())

    @classmethod
    def load(cls, path) -> "Scene":
        data = Path(path).read_bytes()
        if data[:4] != CONTAINER_MAGIC:
            raise InvalidParameterError(f"{path}: bad magic")
        version, n, df = struct.unpack("<III", data[4:16])
        if version != CONTAINER_VERSION:
            raise InvalidParameterError(f"{path}: unsupported version {version}")
        width = 59 + df
        rec = np.frombuffer(data, dtype="<f4", offset=16).reshape(n, width)
        return cls(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10],
                   rec[:, 11:59].reshape(n, SH_COEFFS_FULL, 3), rec[:, 59:])

    def export_splat_ply(self, path, feature_sidecar=None):
        """Standard splat PLY for third-party viewers (log scales, logit
        opacity); semantic features go to a sidecar raw file."""
        n = len(self)
        props = (["x", "y", "z", "opacity"]
                 + [f"scale_{i}" for i in range(3)]
                 + [f"rot_{i}" for i in range(4)]
                 + [f"f_dc_{i}" for i in range(3)]
                 + [f"f_rest_{i}" for i in range(45)])
        lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
        lines += [f"property float {p}" for p in props]
        lines += ["end_header"]
        eps = 1e-7
        op = np.clip(self.opacities, eps, 1 - eps)
        cols = np.concatenate([
            self.centers,
            np.log(op / (1 - op))[:, None],
            np.log(self.scales),
            self.rotations,
            self.sh[:, 0, :],
            self.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, 45),
        ], axis=1).astype("<f4")
        header = ("\n".join(lines) + "\n").encode("ascii")
        Path(path).write_bytes(header + cols.tobytes())
        if feature_sidecar is not None:
            Path(feature_sidecar).write_bytes(
                np.ascontiguousarray(self.features, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# derivations


def quat_to_rotmat(q):
    """Rotation matrix from unit quaternion(s) (w, x, y, z); shape (...,4) -> (...,3,3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance_from_scale_rotation(scale, rotation):
    """R diag(s^2) R^T; symmetric positive definite for valid inputs."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise InvalidParameterError("scale components must be positive")
    R = quat_to_rotmat(rotation)
    return R @ np.diag(scale ** 2) @ R.T


def gaussian_normal(primitive: GaussianPrimitive, camera_position):
    """Shortest-axis direction, sign-flipped toward the camera.

    Ties in the minimum scale break toward the lowest axis index so rendering
    is deterministic across runs.
    """
    axis = int(np.argmin(primitive.scale))  # argmin takes the first on ties
    R = quat_to_rotmat(primitive.rotation)
    n = R[:, axis]
    to_cam = np.asarray(camera_position, dtype=np.float64) - primitive.center
    if np.dot(n, to_cam) < 0:
        n = -n
    return n / np.linalg.norm(n)


def eval_sh_basis(view_dir):
    """Real SH basis values up to degree 3 for unit direction(s) (..., 3) -> (..., 16)."""
    d = np.asarray(view_dir, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    b = np.empty(d.shape[:-1] + (16,))
    b[..., 0] = SH_C0
    b[..., 1] = -SH_C1 * y
    b[..., 2] = SH_C1 * z
    b[..., 3] = -SH_C1 * x
    b[..., 4] = SH_C2[0] * xy
    b[..., 5] = SH_C2[1] * yz
    b[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
    b[..., 7] = SH_C2[3] * xz
    b[..., 8] = SH_C2[4] * (xx - yy)
    b[..., 9] = SH_C3[0] * y * (3 * xx - yy)
    b[..., 10] = SH_C3[1] * xy * z
    b[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    b[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    b[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    b[..., 14] = SH_C3[5] * z * (xx - yy)
    b[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return b


def sh_to_color(sh_coeffs, view_direction):
    """3DGS convention: SH evaluation + 0.5 offset, clamped to [0, 1].

    sh_coeffs (..., K, 3) with K <= 16; view_direction unit (..., 3).
    """
    sh = np.asarray(sh_coeffs, dtype=np.float64)
    k = sh.shape[-2]
    basis = eval_sh_basis(view_direction)[..., :k]
    color = np.einsum("...k,...kc->...c", basis, sh) + 0.5
    return np.clip(color, 0.0, 1.0)


def rgb_to_sh_dc(rgb):
    """Band-0 coefficient reproducing the given base color."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0
