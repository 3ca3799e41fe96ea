"""Mesh-quality and image-quality metrics.

Mesh metrics follow the usual sampled-point protocol: area-weighted surface
samples with face normals, symmetric nearest-neighbor distances via a KD
tree, and an F-score at threshold tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d
from scipy.spatial import cKDTree


@dataclass
class MeshMetrics:
    accuracy: float
    completion: float
    chamfer_l1: float
    normal_consistency: float
    f_score: float

    def as_dict(self):
        return {"accuracy": self.accuracy, "completion": self.completion,
                "chamfer_l1": self.chamfer_l1,
                "normal_consistency": self.normal_consistency,
                "f_score": self.f_score}


def sample_mesh(vertices, faces, count, seed=0):
    """Area-weighted uniform surface samples with per-face normals."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        raise ValueError("mesh has no faces")
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=-1)
    keep = areas > 1e-14
    tri, cross, areas = tri[keep], cross[keep], areas[keep]
    normals = cross / (2 * areas[:, None])

    rng = np.random.default_rng(seed)
    pick = rng.choice(len(tri), size=count, p=areas / areas.sum())
    r1, r2 = rng.uniform(size=(2, count))
    su = np.sqrt(r1)
    bary = np.stack([1 - su, su * (1 - r2), su * r2], axis=-1)
    pts = np.einsum("nk,nkc->nc", bary, tri[pick])
    return pts, normals[pick]


def mesh_metrics(pred_mesh, gt_mesh, sample_count=10000, tau=0.05,
                 seed=0) -> MeshMetrics:
    """Accuracy/completion/Chamfer-L1/normal consistency/F-score between two
    (vertices, faces) meshes."""
    pv, pf = pred_mesh
    gv, gf = gt_mesh
    if len(pv) == 0 or len(gv) == 0:
        raise ValueError("cannot evaluate an empty mesh")
    ppts, pnrm = sample_mesh(pv, pf, sample_count, seed=seed)
    # same seed for both meshes so swapping pred/gt swaps the metrics exactly
    gpts, gnrm = sample_mesh(gv, gf, sample_count, seed=seed)

    gt_tree = cKDTree(gpts)
    pr_tree = cKDTree(ppts)
    d_p2g, i_p2g = gt_tree.query(ppts)
    d_g2p, i_g2p = pr_tree.query(gpts)

    accuracy = float(d_p2g.mean())
    completion = float(d_g2p.mean())
    nc_fwd = np.abs(np.einsum("nc,nc->n", pnrm, gnrm[i_p2g])).mean()
    nc_bwd = np.abs(np.einsum("nc,nc->n", gnrm, pnrm[i_g2p])).mean()
    precision = (d_p2g < tau).mean()
    recall = (d_g2p < tau).mean()
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MeshMetrics(
        accuracy=accuracy, completion=completion,
        chamfer_l1=(accuracy + completion) / 2,
        normal_consistency=float((nc_fwd + nc_bwd) / 2), f_score=float(f))


# ---------------------------------------------------------------------------
# image metrics


PSNR_CAP = 100.0


def psnr(pred, gt):
    """10 log10(1 / MSE) for images in [0, 1], capped at 100 dB."""
    mse = float(np.mean((np.asarray(pred, dtype=np.float64)
                         - np.asarray(gt, dtype=np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def _gaussian_kernel(size=11, sigma=1.5):
    xs = np.arange(size) - size // 2
    g = np.exp(-(xs ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(pred, gt, window_size=11, sigma=1.5):
    """Mean SSIM, 11x11 Gaussian window sigma 1.5, C1=0.01^2, C2=0.03^2,
    zero padding at the border."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    k = _gaussian_kernel(window_size, sigma)

    def blur(img):
        out = convolve1d(img, k, axis=0, mode="constant")
        return convolve1d(out, k, axis=1, mode="constant")

    mu1, mu2 = blur(a), blur(b)
    s1 = blur(a * a) - mu1 ** 2
    s2 = blur(b * b) - mu2 ** 2
    s12 = blur(a * b) - mu1 * mu2
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 ** 2 + mu2 ** 2 + c1) * (s1 + s2 + c2)
    return float((num / den).mean())
