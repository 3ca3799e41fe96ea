"""The six training objectives and their weighted total.

All functions are torch-differentiable through their rendered-channel inputs
and accept numpy arrays as well. Image-space sums are normalized to means
over their supported pixel sets so the default weights stay
resolution-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F_nn

from .geometry import ALPHA_FLOOR

DEPTH_GATE_COS = 0.9


class TrainingDivergenceError(RuntimeError):
    """A loss term became NaN during optimization."""


@dataclass
class LossWeights:
    alpha_n: float = 0.07
    alpha_m: float = 0.3
    alpha_clip: float = 1.0
    alpha_d: float = 0.01
    alpha_s: float = 0.5
    lambda_dssim: float = 0.2


@dataclass
class LossReport:
    l_c: float = 0.0
    l_n: float = 0.0
    l_m: float = 0.0
    l_clip: float = 0.0
    l_s: float = 0.0
    l_d: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return {"l_c": self.l_c, "l_n": self.l_n, "l_m": self.l_m,
                "l_clip": self.l_clip, "l_s": self.l_s, "l_d": self.l_d,
                "total": self.total}


class ClassifierHead:
    """Single linear layer lifting D_f-dim rendered features to S class logits."""

    def __init__(self, feature_dim, class_count, seed=0):
        g = torch.Generator().manual_seed(seed)
        self.weight = (torch.randn(class_count, feature_dim, generator=g,
                                   dtype=torch.float64) / math.sqrt(feature_dim))
        self.bias = torch.zeros(class_count, dtype=torch.float64)
        self.weight.requires_grad_(True)
        self.bias.requires_grad_(True)

    @property
    def class_count(self):
        return self.weight.shape[0]

    def logits(self, features):
        return features @ self.weight.T + self.bias

    def parameters(self):
        return [self.weight, self.bias]

    def state_arrays(self):
        return {"weight": self.weight.detach().numpy(),
                "bias": self.bias.detach().numpy()}

    @classmethod
    def from_arrays(cls, weight, bias):
        head = cls(weight.shape[1], weight.shape[0])
        with torch.no_grad():
            head.weight.copy_(torch.as_tensor(weight, dtype=torch.float64))
            head.bias.copy_(torch.as_tensor(bias, dtype=torch.float64))
        return head


def _t(x, dtype=torch.float64):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# SSIM (11x11 Gaussian window, standard constants)


def _gaussian_window(size, sigma, dtype):
    xs = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(xs ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] @ g[None, :])


def ssim(img1, img2, window_size=11, sigma=1.5):
    """Mean SSIM over an HxW or HxWxC image pair in [0, 1]."""
    a, b = _t(img1), _t(img2)
    if a.dim() == 2:
        a, b = a[..., None], b[..., None]
    a = a.permute(2, 0, 1)[:, None]    # (C, 1, H, W)
    b = b.permute(2, 0, 1)[:, None]
    c = a.shape[0]
    win = _gaussian_window(window_size, sigma, a.dtype)[None, None]
    pad = window_size // 2

    mu1 = F_nn.conv2d(a, win, padding=pad)
    mu2 = F_nn.conv2d(b, win, padding=pad)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = F_nn.conv2d(a * a, win, padding=pad) - mu1_sq
    s2 = F_nn.conv2d(b * b, win, padding=pad) - mu2_sq
    s12 = F_nn.conv2d(a * b, win, padding=pad) - mu12
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    ssim_map = ((2 * mu12 + c1) * (2 * s12 + c2)) / ((mu1_sq + mu2_sq + c1) * (s1 + s2 + c2))
    return ssim_map.mean()


# ---------------------------------------------------------------------------
# individual objectives


def photometric_loss(rendered, target, lambda_dssim=0.2):
    """(1 - lambda) L1 + lambda (1 - SSIM), the vanilla 3DGS photometric term."""
    c, t = _t(rendered), _t(target)
    l1 = torch.abs(c - t).mean()
    if lambda_dssim == 0.0:
        return l1
    return (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - ssim(c, t))


def normal_prior_loss(depth_normal, prior_normal, alpha, valid=None):
    """Mean over valid pixels of A (1 - N_d . N_hat)."""
    nd, nh, a = _t(depth_normal), _t(prior_normal), _t(alpha)
    dot = (nd * nh).sum(-1)
    term = a * (1.0 - dot)
    if valid is None:
        return term.mean()
    v = _t(valid).bool()
    if not v.any():
        return term.sum() * 0.0
    return term[v].mean()


def mask_ce_loss(rendered_features, head: ClassifierHead, instance_mask):
    """Cross-entropy of softmax(head(F)) against instance ids; id 0 ignored."""
    f = _t(rendered_features)
    ids = torch.as_tensor(np.asarray(instance_mask), dtype=torch.long)
    if int(ids.max()) >= head.class_count:
        raise ValueError(
            f"instance id {int(ids.max())} out of range for {head.class_count} classes")
    labeled = ids > 0
    if not labeled.any():
        return f.sum() * 0.0
    logits = head.logits(f[labeled])
    return F_nn.cross_entropy(logits, ids[labeled])


def clip_feature_loss(rendered_features, prior_features):
    """Mean absolute difference between rendered and prior feature maps."""
    return torch.abs(_t(rendered_features) - _t(prior_features)).mean()


def smoothness_loss(depth_normal, prior_features, big_object_mask, valid=None):
    """Edge-aware normal smoothing over the top-k object mask.

    Per pixel: |dx N_d| exp(-||dx F_hat||_1) + |dy N_d| exp(-||dy F_hat||_1),
    forward differences, L1 over channels; averaged over mask pixels. The
    last column/row carry no forward difference.
    """
    nd = _t(depth_normal)
    fh = _t(prior_features)
    mo = _t(big_object_mask).bool()
    if valid is not None:
        v = _t(valid).bool()
    else:
        v = torch.ones_like(mo)

    h, w = nd.shape[:2]
    gx_n = torch.zeros(h, w, dtype=nd.dtype)
    gy_n = torch.zeros(h, w, dtype=nd.dtype)
    wx = torch.zeros(h, w, dtype=nd.dtype)
    wy = torch.zeros(h, w, dtype=nd.dtype)

    pair_x = v[:, 1:] & v[:, :-1]
    pair_y = v[1:, :] & v[:-1, :]
    gx_n[:, :-1] = torch.abs(nd[:, 1:] - nd[:, :-1]).sum(-1) * pair_x
    gy_n[:-1, :] = torch.abs(nd[1:, :] - nd[:-1, :]).sum(-1) * pair_y
    wx[:, :-1] = torch.exp(-torch.abs(fh[:, 1:] - fh[:, :-1]).sum(-1))
    wy[:-1, :] = torch.exp(-torch.abs(fh[1:, :] - fh[:-1, :]).sum(-1))

    integrand = gx_n * wx + gy_n * wy
    if not mo.any():
        return integrand.sum() * 0.0
    return integrand[mo].mean()


def depth_refinement_loss(unbiased_depth, target_depth, depth_normal,
                          prior_normal, alpha, valid=None):
    """1 - exp(-|D_p - D_r|) over pixels where N_d . N_hat < 0.9 and A is
    above the floor; the target is detached."""
    dp = _t(unbiased_depth)
    dr = _t(target_depth).detach()
    nd, nh, a = _t(depth_normal), _t(prior_normal), _t(alpha)
    with torch.no_grad():
        gate = ((nd * nh).sum(-1) < DEPTH_GATE_COS) & (a > ALPHA_FLOOR)
        if valid is not None:
            gate &= _t(valid).bool()
    if not gate.any():
        return dp.sum() * 0.0
    resid = torch.abs(dp - dr)[gate]
    return (1.0 - torch.exp(-resid)).mean()


def sensor_depth_loss(unbiased_depth, sensor_depth):
    """Mean absolute error against sensor depth over valid (> 0) pixels."""
    dp, sd = _t(unbiased_depth), _t(sensor_depth)
    valid = sd > 0
    if not valid.any():
        return dp.sum() * 0.0
    return torch.abs(dp - sd)[valid].mean()


def total_loss(terms: dict, weights: LossWeights):
    """Weighted sum in a fixed order; returns (torch scalar, LossReport).

    ``terms`` maps keys l_c/l_n/l_m/l_clip/l_s/l_d to scalars; missing or
    None entries contribute zero (disabled by config).
    """
    coeff = {"l_c": 1.0, "l_n": weights.alpha_n, "l_m": weights.alpha_m,
             "l_clip": weights.alpha_clip, "l_d": weights.alpha_d,
             "l_s": weights.alpha_s}
    total = None
    values = {}
    for name in ("l_c", "l_n", "l_m", "l_clip", "l_d", "l_s"):
        term = terms.get(name)
        if term is None:
            values[name] = 0.0
            continue
        t = _t(term)
        val = float(t.detach())
        if math.isnan(val):
            raise TrainingDivergenceError(f"loss term {name} is NaN")
        values[name] = val
        weighted = coeff[name] * t
        total = weighted if total is None else total + weighted
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    report = LossReport(total=float(total.detach()), **values)
    return total, report
