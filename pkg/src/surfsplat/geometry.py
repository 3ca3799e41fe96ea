"""Depth-derived normals, per-pixel ray frames, and the normal-error case
analysis that yields the three refinement masks and the refined target depth.

Depths are z-depths (distance along the camera axis); a pixel (u, v) with
depth d unprojects to d * ((u-cx)/fx, (v-cy)/fy, 1) in the camera frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .scene import Camera

ALPHA_FLOOR = 0.05
PARALLEL_EPS = 1e-6


@dataclass
class PixelFrame:
    ray: np.ndarray             # unit viewing direction v
    tangent: np.ndarray         # unit y, in the ray/normal plane, orthogonal to ray
    cos_theta_prime: float      # n . (-y), equals sin(theta)


@dataclass
class RefinementMasks:
    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray
    cos_alpha: np.ndarray


def normal_from_depth_t(depth: torch.Tensor, camera: Camera):
    """Differentiable four-neighbor cross-product normal from a z-depth map.

    Returns (normals (H, W, 3), valid (H, W) bool). Border pixels and pixels
    whose neighborhood contains non-positive depth are undefined.
    """
    dtype = depth.dtype
    h, w = depth.shape
    us = torch.arange(w, dtype=dtype)
    vs = torch.arange(h, dtype=dtype)
    gu, gv = torch.meshgrid(us, vs, indexing="xy")
    dirs = torch.stack([(gu - camera.cx) / camera.fx,
                        (gv - camera.cy) / camera.fy,
                        torch.ones_like(gu)], dim=-1)
    pts = depth[..., None] * dirs

    # P0 left, P1 right, P2 down, P3 up; cross gives a camera-facing normal
    # for a fronto-parallel plane: (0, 0, -1).
    dx = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy = pts[:-2, 1:-1] - pts[2:, 1:-1]
    cross = torch.cross(dx, dy, dim=-1)
    norm = torch.linalg.norm(cross, dim=-1, keepdim=True)
    inner = cross / torch.clamp(norm, min=1e-12)

    normals = torch.zeros(h, w, 3, dtype=dtype)
    normals[1:-1, 1:-1] = inner
    with torch.no_grad():
        pos = depth > 0
        ok = (pos[1:-1, 2:] & pos[1:-1, :-2] & pos[:-2, 1:-1] & pos[2:, 1:-1]
              & pos[1:-1, 1:-1] & (norm.squeeze(-1) > 1e-12))
        valid = torch.zeros(h, w, dtype=torch.bool)
        valid[1:-1, 1:-1] = ok
    return normals, valid


def normal_from_depth(depth, camera: Camera):
    n, v = normal_from_depth_t(torch.as_tensor(np.asarray(depth, dtype=np.float64)),
                               camera)
    return n.numpy(), v.numpy()


def _tangent_fields(normals, rays):
    """Vectorized frame construction: tangent y and cos(theta') per pixel.

    y is sign-chosen so n.(-y) = sin(theta) >= 0; where n is parallel to the
    ray, y falls back to a fixed vector orthogonal to the ray and
    cos(theta') = 0.
    """
    n = np.asarray(normals, dtype=np.float64)
    v = np.asarray(rays, dtype=np.float64)
    m = np.einsum("...c,...c->...", n, -v)            # cos(theta)
    perp = n + m[..., None] * v                       # n - (n.(-v))(-v)
    plen = np.linalg.norm(perp, axis=-1)
    sin_theta = np.where(plen > PARALLEL_EPS, plen, 0.0)

    # fallback tangent orthogonal to the ray for the degenerate case
    ref = np.zeros_like(v)
    ref[..., 0] = 1.0
    alt = np.zeros_like(v)
    alt[..., 1] = 1.0
    use_alt = np.abs(v[..., 0]) > 0.9
    ref = np.where(use_alt[..., None], alt, ref)
    fallback = np.cross(v, ref)
    fallback /= np.linalg.norm(fallback, axis=-1, keepdims=True)

    degenerate = plen <= PARALLEL_EPS
    y = np.where(degenerate[..., None], fallback,
                 -perp / np.maximum(plen, PARALLEL_EPS)[..., None])
    cos_theta_prime = np.where(degenerate, 0.0, sin_theta)
    return y, cos_theta_prime


def pixel_frame(rendered_normal, ray) -> PixelFrame:
    n = np.asarray(rendered_normal, dtype=np.float64)
    v = np.asarray(ray, dtype=np.float64)
    y, ctp = _tangent_fields(n[None], v[None])
    return PixelFrame(ray=v, tangent=y[0], cos_theta_prime=float(ctp[0]))


def refinement_masks(rendered_normal_field, prior_normal_field, ray_field,
                     valid=None) -> RefinementMasks:
    """Classify each defined pixel into the three normal-error conditions.

    m1: cos(alpha) > cos(theta') > 0; m2: cos(alpha) < 0; m3: the rest
    (equality boundaries land in m3). Pixels outside ``valid`` belong to no
    mask.
    """
    y, ctp = _tangent_fields(rendered_normal_field, ray_field)
    cos_alpha = np.einsum("...c,...c->...",
                          np.asarray(prior_normal_field, dtype=np.float64), -y)
    if valid is None:
        valid = np.ones(cos_alpha.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    m1 = valid & (cos_alpha > ctp) & (ctp > 0)
    m2 = valid & (cos_alpha < 0)
    m3 = valid & ~m1 & ~m2
    return RefinementMasks(m1=m1, m2=m2, m3=m3, cos_alpha=cos_alpha)


def refined_depth(depth, unbiased_depth, alpha, masks: RefinementMasks):
    """Target depth: M1 (A D_p + D - A D) + M2 D + M3 D_p; pixels outside all
    masks carry D_p unchanged."""
    d = np.asarray(depth, dtype=np.float64)
    dp = np.asarray(unbiased_depth, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64)
    out = dp.copy()
    out[masks.m1] = (a * dp + d - a * d)[masks.m1]
    out[masks.m2] = d[masks.m2]
    out[masks.m3] = dp[masks.m3]
    return out


def export_mask_labels(masks: RefinementMasks):
    """0/1/2/3 label image (none/m1/m2/m3) for PNG debugging dumps."""
    labels = np.zeros(masks.m1.shape, dtype=np.uint8)
    labels[masks.m1] = 1
    labels[masks.m2] = 2
    labels[masks.m3] = 3
    return labels
