"""Projective TSDF fusion of rendered depth maps and marching-cubes mesh
extraction, with optional semantic-label baking into vertex attributes.

Distances in the grid are truncated and normalized to [-1, 1]; the zero
level set is the surface. Depths are z-depths matching the rasterizer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates
from skimage import measure

from .geometry import ALPHA_FLOOR
from .scene import Camera, Scene


@dataclass
class TriangleMesh:
    vertices: np.ndarray            # (V, 3)
    faces: np.ndarray               # (F, 3)
    colors: np.ndarray | None = None   # (V, 3) in [0, 1]
    labels: np.ndarray | None = None   # (V,) int

    def __post_init__(self):
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")


class TsdfVolume:
    def __init__(self, origin, voxel_size, dims, truncation=None, class_count=0):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        self.truncation = truncation if truncation is not None else 4 * voxel_size
        self.tsdf = np.ones(self.dims, dtype=np.float64)
        self.weight = np.zeros(self.dims, dtype=np.float64)
        self.color = np.zeros(self.dims + (3,), dtype=np.float64)
        self.class_count = class_count
        if class_count > 0:
            self.label_votes = np.zeros(self.dims + (class_count,), dtype=np.float64)
        else:
            self.label_votes = None

    @classmethod
    def for_bounds(cls, bbox_min, bbox_max, resolution=256, inflate=0.05,
                   class_count=0):
        """Grid covering the bounding box inflated by ``inflate``, with voxel
        size = diagonal / resolution."""
        bbox_min = np.asarray(bbox_min, dtype=np.float64)
        bbox_max = np.asarray(bbox_max, dtype=np.float64)
        center = (bbox_min + bbox_max) / 2
        half = (bbox_max - bbox_min) / 2 * (1 + inflate)
        bbox_min, bbox_max = center - half, center + half
        diag = np.linalg.norm(bbox_max - bbox_min)
        voxel = diag / resolution
        dims = np.maximum(np.ceil((bbox_max - bbox_min) / voxel).astype(int) + 1, 2)
        return cls(bbox_min, voxel, dims, class_count=class_count)

    def voxel_centers_camera(self, camera: Camera):
        """World voxel-center coordinates transformed into the camera frame."""
        ii, jj, kk = np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij")
        pts = (np.stack([ii, jj, kk], axis=-1) * self.voxel_size + self.origin)
        R = camera.world_to_camera[:3, :3]
        t = camera.world_to_camera[:3, 3]
        return pts @ R.T + t

    @property
    def labels(self):
        """Per-voxel majority class id (0 where unvoted)."""
        if self.label_votes is None:
            return np.zeros(self.dims, dtype=np.int64)
        return np.argmax(self.label_votes, axis=-1)


def tsdf_integrate(volume: TsdfVolume, depth, color, camera: Camera,
                   label=None, alpha=None):
    """Standard projective update: sdf = depth(projected px) - voxel z,
    truncated, weighted running average; labels accumulate majority votes.

    Pixels with alpha below the floor or depth outside (near, far) are
    skipped.
    """
    depth = np.asarray(depth, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    h, w = depth.shape

    p_cam = volume.voxel_centers_camera(camera)
    z = p_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.round(camera.fx * p_cam[..., 0] / z + camera.cx).astype(np.int64)
        v = np.round(camera.fy * p_cam[..., 1] / z + camera.cy).astype(np.int64)
    in_frustum = (z > camera.near) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    if not in_frustum.any():
        warnings.warn("TSDF volume does not intersect the camera frustum")
        return volume
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    d = depth[vc, uc]
    valid = in_frustum & (d > 0) & (d <= camera.far)
    if alpha is not None:
        valid &= np.asarray(alpha)[vc, uc] >= ALPHA_FLOOR

    sdf = d - z
    valid &= sdf > -volume.truncation
    tsdf_obs = np.clip(sdf / volume.truncation, -1.0, 1.0)

    w_old = volume.weight
    w_new = w_old + valid
    safe = np.maximum(w_new, 1e-12)
    volume.tsdf = np.where(
        valid, (w_old * volume.tsdf + tsdf_obs) / safe, volume.tsdf)
    obs_color = color[vc, uc]
    volume.color = np.where(
        valid[..., None],
        (w_old[..., None] * volume.color + obs_color) / safe[..., None],
        volume.color)
    volume.weight = w_new
    if label is not None and volume.label_votes is not None:
        lbl = np.asarray(label)[vc, uc]
        lbl = np.where(valid, lbl, 0)
        near_surface = valid & (np.abs(sdf) < volume.truncation)
        for cid in np.unique(lbl[near_surface]):
            volume.label_votes[..., cid] += near_surface & (lbl == cid)
    return volume


def marching_cubes(volume: TsdfVolume) -> TriangleMesh:
    """Zero level set of the TSDF, skipping unobserved voxels; vertex colors
    trilinearly interpolated, labels from the nearest voxel."""
    if not (volume.weight > 0).any():
        raise ValueError("volume has no observations")
    mask = volume.weight > 0
    tmin, tmax = volume.tsdf[mask].min(), volume.tsdf[mask].max()
    if tmin >= 0 or tmax <= 0:
        return TriangleMesh(vertices=np.zeros((0, 3)),
                            faces=np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(
        volume.tsdf, level=0.0, mask=mask)
    # drop degenerate triangles
    tri = verts[faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=-1)
    faces = faces[areas > 1e-12]

    coords = verts.T
    colors = np.stack([
        map_coordinates(volume.color[..., c], coords, order=1)
        for c in range(3)], axis=-1)
    labels = None
    if volume.label_votes is not None:
        labels = map_coordinates(volume.labels.astype(np.float64), coords,
                                 order=0).astype(np.int64)
    world = verts * volume.voxel_size + volume.origin
    return TriangleMesh(vertices=world, faces=faces.astype(np.int64),
                        colors=np.clip(colors, 0, 1), labels=labels)


DEFAULT_PALETTE = np.array([
    [0.6, 0.6, 0.6], [0.85, 0.3, 0.25], [0.25, 0.55, 0.85], [0.3, 0.75, 0.35],
    [0.9, 0.75, 0.2], [0.65, 0.35, 0.75], [0.2, 0.75, 0.75], [0.9, 0.5, 0.65],
])


def extract_scene_mesh(scene: Scene, cameras, use_unbiased=True, semantic=False,
                       head=None, resolution=256, inflate=0.05,
                       bounds=None) -> TriangleMesh:
    """Render every training view, fuse depths into a TSDF, extract the mesh.

    With ``semantic`` a classifier head maps rendered features to class ids,
    which replace the color input of the fusion; vertices get palette colors
    and a label attribute.
    """
    import torch

    from . import rasterizer

    if semantic and head is None:
        raise ValueError("semantic extraction needs a classifier head")
    if bounds is None:
        bounds = (scene.centers.min(axis=0), scene.centers.max(axis=0))
    class_count = head.class_count if head is not None else 0
    volume = TsdfVolume.for_bounds(bounds[0], bounds[1], resolution=resolution,
                                   inflate=inflate,
                                   class_count=class_count if semantic else 0)
    for cam in cameras:
        out = rasterizer.render(scene, cam, dtype=torch.float32)
        depth = out.unbiased_depth if use_unbiased else out.depth
        label = None
        color = out.color
        if semantic:
            feats = torch.as_tensor(out.feature, dtype=torch.float64)
            logits = head.logits(feats.reshape(-1, feats.shape[-1]))
            label = logits.argmax(dim=-1).numpy().reshape(depth.shape)
            color = DEFAULT_PALETTE[label % len(DEFAULT_PALETTE)]
        tsdf_integrate(volume, depth, color, cam, label=label, alpha=out.alpha)
    return marching_cubes(volume)
