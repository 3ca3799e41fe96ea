"""Open-vocabulary object selection: score per-splat semantic features
against a query embedding, render the selected sub-scene, and evaluate
mIoU/mBIoU against ground-truth masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion

from .scene import Scene

DEFAULT_THRESHOLD = 0.6
DEFAULT_BOUNDARY_WIDTH = 3
MASK_ALPHA = 0.35
VISIBILITY_RATIO = 0.7


@dataclass
class QueryEmbedding:
    name: str
    vector: np.ndarray


@dataclass
class SelectionResult:
    indices: np.ndarray        # selected primitive indices
    scores: np.ndarray         # per-primitive similarity, full scene
    masks: list                # per-camera HxW bool masks
    empty: bool = False


def score_gaussians(scene: Scene, query: QueryEmbedding):
    """Cosine similarity between each primitive's feature and the query;
    zero-norm features score 0."""
    vec = np.asarray(query.vector, dtype=np.float64)
    if vec.shape[0] != scene.feature_dim:
        raise ValueError(
            f"query dim {vec.shape[0]} != scene feature dim {scene.feature_dim}")
    qn = np.linalg.norm(vec)
    if qn == 0:
        return np.zeros(len(scene))
    feats = scene.features
    norms = np.linalg.norm(feats, axis=1)
    safe = np.maximum(norms, 1e-300)
    scores = feats @ vec / (safe * qn)
    return np.where(norms > 0, scores, 0.0)


def select_subscene(scene: Scene, query: QueryEmbedding, threshold):
    scores = score_gaussians(scene, query)
    idx = np.nonzero(scores >= threshold)[0]
    if len(idx) == 0:
        return idx, scores, None
    sub = Scene(scene.centers[idx], scene.scales[idx], scene.rotations[idx],
                scene.opacities[idx], scene.sh[idx], scene.features[idx],
                background_color=scene.background_color)
    return idx, scores, sub


def select_and_render(scene: Scene, query: QueryEmbedding, threshold,
                      cameras) -> SelectionResult:
    """Render the above-threshold sub-scene and mask the pixels where it is
    both substantially opaque (alpha > MASK_ALPHA) and visible, i.e. carries
    most of the full scene's opacity at that pixel. The visibility test drops
    regions where the selected object sits behind other geometry."""
    import torch

    from . import rasterizer

    if not -1.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [-1, 1]")
    if not isinstance(cameras, (list, tuple)):
        cameras = [cameras]
    idx, scores, sub = select_subscene(scene, query, threshold)
    if sub is None:
        masks = [np.zeros((c.height, c.width), dtype=bool) for c in cameras]
        return SelectionResult(indices=idx, scores=scores, masks=masks,
                               empty=True)
    masks = []
    for cam in cameras:
        alpha = np.asarray(rasterizer.render(sub, cam, dtype=torch.float32).alpha)
        full = np.asarray(rasterizer.render(scene, cam, dtype=torch.float32).alpha)
        masks.append((alpha > MASK_ALPHA) & (alpha >= VISIBILITY_RATIO * full))
    return SelectionResult(indices=idx, scores=scores, masks=masks)


# ---------------------------------------------------------------------------
# mask metrics


def _iou(a, b):
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _boundary_band(mask, width):
    """Pixels of the mask within ``width`` of its boundary."""
    if not mask.any():
        return mask
    interior = binary_erosion(mask, border_value=0)
    boundary = mask & ~interior
    return binary_dilation(boundary, iterations=width) & mask


def miou_mbiou(pred_masks, gt_masks, boundary_width=DEFAULT_BOUNDARY_WIDTH):
    """Mean IoU and mean boundary IoU over matched mask lists.

    Boundary IoU restricts each mask to the band within ``boundary_width``
    pixels of its own boundary before intersecting.
    """
    if len(pred_masks) != len(gt_masks):
        raise ValueError("mask lists differ in length")
    ious, bious = [], []
    for p, g in zip(pred_masks, gt_masks):
        p = np.asarray(p, dtype=bool)
        g = np.asarray(g, dtype=bool)
        if p.shape != g.shape:
            raise ValueError("mask shapes differ")
        ious.append(_iou(p, g))
        bious.append(_iou(_boundary_band(p, boundary_width),
                          _boundary_band(g, boundary_width)))
    return float(np.mean(ious)), float(np.mean(bious))
