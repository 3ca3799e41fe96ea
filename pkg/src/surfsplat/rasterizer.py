"""Differentiable forward rendering of color/alpha/depth/feature/normal
channels and the analytic backward pass.

The core operates on torch tensors so gradients flow to every primitive
parameter; the public API accepts/returns numpy. Splats are alpha-composited
front to back (stable sort by view depth, input order breaks ties) with the
3DGS conventions: 0.3 px^2 low-pass on the 2D covariance, per-splat alpha
clamped at 0.99, transmittance cutoff 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import io_utils
from .scene import Camera, GaussianPrimitive, InvalidParameterError, Scene

LOW_PASS = 0.3
ALPHA_CLAMP = 0.99
TRANSMITTANCE_CUTOFF = 1e-4
COS_CLAMP = 0.1
DET_EPS = 1e-12
TILE_SIZE = 16

CHANNEL_NAMES = ("color", "alpha", "depth", "unbiased_depth", "feature", "normal")


@dataclass
class Splat2D:
    mean2d: np.ndarray       # (2,) pixels
    cov2d: np.ndarray        # (2, 2) pixels^2, after low-pass
    view_depth: float        # distance along the camera axis
    color: np.ndarray        # (3,)
    feature: np.ndarray      # (D_f,)
    opacity: float
    normal_cam: np.ndarray   # (3,) unit, camera frame


@dataclass
class RenderOutput:
    color: np.ndarray           # (H, W, 3)
    alpha: np.ndarray           # (H, W)
    depth: np.ndarray           # (H, W)
    unbiased_depth: np.ndarray  # (H, W)
    feature: np.ndarray         # (H, W, D_f)
    normal: np.ndarray          # (H, W, 3) camera frame, unit where alpha > 0
    ray_dirs: np.ndarray        # (H, W, 3)


@dataclass
class SceneGrads:
    centers: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    features: np.ndarray
    mean2d: np.ndarray          # (N, 2) screen-space positional gradient
    radii: np.ndarray           # (N,) screen-space footprint radius in px


# ---------------------------------------------------------------------------
# torch core


def _quat_to_rotmat_t(q):
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ]
    return torch.stack(rows, -2)


def _eval_sh_t(sh, dirs):
    """sh (N, 16, 3), dirs (N, 3) unit -> colors (N, 3) in [0, 1]."""
    from .scene import SH_C0, SH_C1, SH_C2, SH_C3

    x, y, z = dirs.unbind(-1)
    xx, yy, zz = x * x, y * y, z * z
    b = torch.stack([
        torch.full_like(x, SH_C0),
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
        SH_C2[3] * x * z, SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
        SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3 * yy),
    ], dim=-1)
    color = torch.einsum("nk,nkc->nc", b, sh) + 0.5
    return torch.clamp(color, 0.0, 1.0)


def render_core(centers, scales, quats, opacities, sh, features, camera: Camera,
                background, retain_mean2d=False):
    """Differentiable forward pass. All tensor args share dtype/device.

    Returns a dict of channel tensors plus auxiliary entries: ``ray_dirs``
    (constant), ``mean2d_full``/``radii_full`` (per input primitive, for the
    densification statistics) when ``retain_mean2d``.
    """
    dtype = centers.dtype
    n = centers.shape[0]
    h, w = camera.height, camera.width
    w2c = torch.as_tensor(camera.world_to_camera, dtype=dtype)
    Rw, tw = w2c[:3, :3], w2c[:3, 3]

    p_cam = centers @ Rw.T + tw
    z = p_cam[:, 2]

    mean2d_full = torch.stack([
        camera.fx * p_cam[:, 0] / z + camera.cx,
        camera.fy * p_cam[:, 1] / z + camera.cy,
    ], dim=-1)
    if retain_mean2d and mean2d_full.requires_grad:
        mean2d_full.retain_grad()

    # covariance in camera frame, then first-order projection
    Rq = _quat_to_rotmat_t(quats)
    M = Rq * scales[:, None, :]                     # R diag(s)
    cov3d = M @ M.transpose(1, 2)
    W = Rw.expand(n, 3, 3)
    cov_cam = W @ cov3d @ W.transpose(1, 2)
    fx, fy = camera.fx, camera.fy
    zz = z * z
    J = torch.zeros(n, 2, 3, dtype=dtype)
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * p_cam[:, 0] / zz
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * p_cam[:, 1] / zz
    cov2d = J @ cov_cam @ J.transpose(1, 2)
    cov2d = cov2d + LOW_PASS * torch.eye(2, dtype=dtype)

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    # 3-sigma screen footprint from the larger eigenvalue
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.0))
    radii = 3.0 * torch.sqrt(lam_max)

    with torch.no_grad():
        on_screen = ((mean2d_full[:, 0] > -radii) & (mean2d_full[:, 0] < w + radii)
                     & (mean2d_full[:, 1] > -radii) & (mean2d_full[:, 1] < h + radii))
        keep = (z > camera.near) & (det > DET_EPS) & on_screen
        keep_idx = torch.nonzero(keep, as_tuple=False).squeeze(-1)
        order = keep_idx[torch.argsort(z[keep_idx], stable=True)]

    # shortest-axis normal in camera frame, oriented toward the camera
    with torch.no_grad():
        axis = torch.argmin(scales, dim=1)
    n_world = torch.gather(
        Rq, 2, axis[:, None, None].expand(n, 3, 1)).squeeze(-1)
    cam_pos = torch.as_tensor(np.asarray(camera.position), dtype=dtype)
    with torch.no_grad():
        sign = torch.sign(torch.einsum("nd,nd->n", n_world, cam_pos - centers))
        sign = torch.where(sign == 0, torch.ones_like(sign), sign)
    n_world = n_world * sign[:, None]
    n_cam = n_world @ Rw.T
    n_cam = n_cam / torch.linalg.norm(n_cam, dim=-1, keepdim=True)

    view_dirs = centers - cam_pos
    view_dirs = view_dirs / torch.linalg.norm(view_dirs, dim=-1, keepdim=True)
    colors = _eval_sh_t(sh, view_dirs)

    # pixel grid and per-pixel ray directions (camera frame)
    gx, gy = torch.meshgrid(
        torch.arange(w, dtype=dtype), torch.arange(h, dtype=dtype), indexing="xy")
    pix = torch.stack([gx, gy], dim=-1).reshape(-1, 2)      # (P, 2)
    rays = torch.stack([(gx - camera.cx) / camera.fx,
                        (gy - camera.cy) / camera.fy,
                        torch.ones_like(gx)], dim=-1)
    rays = rays / torch.linalg.norm(rays, dim=-1, keepdim=True)  # (H, W, 3)

    p = h * w
    df = features.shape[1]
    bg = torch.as_tensor(background, dtype=dtype)

    A_flat = torch.zeros(p, dtype=dtype)
    col_flat = torch.zeros(p, 3, dtype=dtype)
    dep_flat = torch.zeros(p, dtype=dtype)
    dist_flat = torch.zeros(p, dtype=dtype)
    feat_flat = torch.zeros(p, df, dtype=dtype)
    nrm_flat = torch.zeros(p, 3, dtype=dtype)

    # signed distance from the camera center to each splat's tangent plane,
    # used for the plane-intersection (unbiased) depth
    plane_dist = torch.einsum("nd,nd->n", n_world, centers - cam_pos)

    if order.numel() > 0:
        m2 = mean2d_full[order]
        c2 = cov2d[order]
        inv_det = 1.0 / det[order]
        ia = c2[:, 1, 1] * inv_det
        ib = -c2[:, 0, 1] * inv_det
        ic = c2[:, 0, 0] * inv_det
        val_col = colors[order]
        val_dep = z[order]
        val_dist = plane_dist[order]
        val_feat = features[order]
        val_nrm = n_cam[order]
        op_s = opacities[order]

        # tile the image; each splat composites only where its 3-sigma box
        # overlaps, which keeps the pairwise tensors small
        ts = TILE_SIZE
        flat_idx = torch.arange(p).reshape(h, w)
        with torch.no_grad():
            r_s = radii[order]
            x0 = m2[:, 0] - r_s
            x1 = m2[:, 0] + r_s
            y0 = m2[:, 1] - r_s
            y1 = m2[:, 1] + r_s
        for ty in range(0, h, ts):
            for tx in range(0, w, ts):
                ty1 = min(ty + ts, h)
                tx1 = min(tx + ts, w)
                with torch.no_grad():
                    hit = (x1 >= tx) & (x0 < tx1) & (y1 >= ty) & (y0 < ty1)
                    sel = torch.nonzero(hit, as_tuple=False).squeeze(-1)
                if sel.numel() == 0:
                    continue
                pix_idx = flat_idx[ty:ty1, tx:tx1].reshape(-1)
                tpix = pix[pix_idx]                           # (Pt, 2)
                tm = m2[sel]
                dx = tpix[None, :, 0] - tm[:, 0, None]        # (Mt, Pt)
                dy = tpix[None, :, 1] - tm[:, 1, None]
                power = -0.5 * (ia[sel, None] * dx * dx
                                + 2 * ib[sel, None] * dx * dy
                                + ic[sel, None] * dy * dy)
                alpha = torch.clamp(op_s[sel, None] * torch.exp(power),
                                    max=ALPHA_CLAMP)
                trans = torch.cumprod(1.0 - alpha, dim=0)
                T = torch.cat([torch.ones(1, tpix.shape[0], dtype=dtype),
                               trans[:-1]], dim=0)
                with torch.no_grad():
                    live = T >= TRANSMITTANCE_CUTOFF
                wgt = alpha * T * live                        # (Mt, Pt)

                A_flat[pix_idx] = wgt.sum(dim=0)
                col_flat[pix_idx] = wgt.T @ val_col[sel]
                dep_flat[pix_idx] = wgt.T @ val_dep[sel]
                dist_flat[pix_idx] = wgt.T @ val_dist[sel]
                feat_flat[pix_idx] = wgt.T @ val_feat[sel]
                nrm_flat[pix_idx] = wgt.T @ val_nrm[sel]

    out = {
        "alpha": A_flat,
        "color": col_flat + (1.0 - A_flat)[:, None] * bg,
        "depth": dep_flat,
        "feature": feat_flat,
        "normal": nrm_flat,
    }

    # renormalized normal and plane-intersection (unbiased) depth: divide the
    # blended camera-to-plane distance by n . (x', y', 1), which lands the
    # depth on the local tangent plane instead of the splat center
    nrm = out["normal"].reshape(h, w, 3)
    nlen = torch.linalg.norm(nrm, dim=-1, keepdim=True)
    unit_n = nrm / torch.clamp(nlen, min=1e-12)
    dir_z1 = torch.stack([(gx - camera.cx) / camera.fx,
                          (gy - camera.cy) / camera.fy,
                          torch.ones_like(gx)], dim=-1)
    denom = torch.einsum("hwc,hwc->hw", unit_n, dir_z1)
    mag = torch.clamp(torch.abs(denom), min=COS_CLAMP)
    with torch.no_grad():
        sgn = torch.where(denom < 0, -torch.ones_like(denom),
                          torch.ones_like(denom))
    out["unbiased_depth"] = torch.clamp(
        dist_flat.reshape(h, w) / (sgn * mag), min=0.0).reshape(-1)

    out = {k: v.reshape((h, w) + v.shape[1:]) for k, v in out.items()}
    out["normal"] = torch.where(nlen > 1e-12, unit_n, nrm)
    out["ray_dirs"] = rays
    if retain_mean2d:
        out["mean2d_full"] = mean2d_full
        out["radii_full"] = torch.where(keep, radii, torch.zeros_like(radii)).detach()
    return out


# ---------------------------------------------------------------------------
# public numpy API


def _scene_tensors(scene: Scene, dtype=torch.float64, requires_grad=False):
    def t(a):
        x = torch.tensor(np.asarray(a), dtype=dtype)
        x.requires_grad_(requires_grad)
        return x

    return (t(scene.centers), t(scene.scales), t(scene.rotations),
            t(scene.opacities), t(scene.sh), t(scene.features))


def render(scene: Scene, camera: Camera, dtype=torch.float64) -> RenderOutput:
    with torch.no_grad():
        tensors = _scene_tensors(scene, dtype)
        out = render_core(*tensors, camera, scene.background_color)
    return RenderOutput(
        color=out["color"].numpy(), alpha=out["alpha"].numpy(),
        depth=out["depth"].numpy(), unbiased_depth=out["unbiased_depth"].numpy(),
        feature=out["feature"].numpy(), normal=out["normal"].numpy(),
        ray_dirs=out["ray_dirs"].numpy())


def render_backward(scene: Scene, camera: Camera, upstream_grads: dict,
                    dtype=torch.float64) -> SceneGrads:
    """Gradients of sum(upstream * channel) over the given adjoint maps.

    ``upstream_grads`` maps channel names (see CHANNEL_NAMES) to HxW(xC)
    arrays matching the rendered shapes.
    """
    tensors = _scene_tensors(scene, dtype, requires_grad=True)
    out = render_core(*tensors, camera, scene.background_color, retain_mean2d=True)
    total = None
    for name, adj in upstream_grads.items():
        if name not in CHANNEL_NAMES:
            raise InvalidParameterError(f"unknown channel {name!r}")
        ch = out[name]
        adj_t = torch.as_tensor(np.asarray(adj), dtype=dtype)
        if adj_t.shape != ch.shape:
            raise InvalidParameterError(
                f"adjoint for {name} has shape {tuple(adj_t.shape)}, "
                f"expected {tuple(ch.shape)}")
        term = (ch * adj_t).sum()
        total = term if total is None else total + term
    if total is None:
        total = sum(t.sum() * 0.0 for t in tensors)
    total.backward()

    def g(t, like):
        return t.grad.numpy() if t.grad is not None else np.zeros_like(like)

    m2 = out["mean2d_full"]
    m2_grad = m2.grad.numpy() if m2.grad is not None else np.zeros((len(scene), 2))
    return SceneGrads(
        centers=g(tensors[0], scene.centers), scales=g(tensors[1], scene.scales),
        rotations=g(tensors[2], scene.rotations),
        opacities=g(tensors[3], scene.opacities),
        sh=g(tensors[4], scene.sh), features=g(tensors[5], scene.features),
        mean2d=m2_grad, radii=out["radii_full"].numpy())


def project_gaussian(primitive: GaussianPrimitive, camera: Camera):
    """EWA projection of a single primitive; returns None when culled."""
    scene = Scene(primitive.center[None], primitive.scale[None],
                  primitive.rotation[None], [primitive.opacity],
                  primitive.sh_coeffs[None], primitive.feature[None])
    c, s, q, o, sh, f = _scene_tensors(scene)
    dtype = c.dtype
    w2c = torch.as_tensor(camera.world_to_camera, dtype=dtype)
    p_cam = (c @ w2c[:3, :3].T + w2c[:3, 3])[0]
    z = float(p_cam[2])
    if z <= camera.near:
        return None
    out = render_core(c, s, q, o, sh, f, camera,
                      np.zeros(3), retain_mean2d=True)
    radius = float(out["radii_full"][0])
    if radius == 0.0:
        return None
    mean2d = out["mean2d_full"].detach().numpy()[0]

    # recompute cov2d via the same path for the returned value
    from .scene import covariance_from_scale_rotation

    Rw = camera.world_to_camera[:3, :3]
    cov_cam = Rw @ covariance_from_scale_rotation(primitive.scale, primitive.rotation) @ Rw.T
    x, y = float(p_cam[0]), float(p_cam[1])
    J = np.array([[camera.fx / z, 0, -camera.fx * x / z ** 2],
                  [0, camera.fy / z, -camera.fy * y / z ** 2]])
    cov2d = J @ cov_cam @ J.T + LOW_PASS * np.eye(2)

    from .scene import gaussian_normal, sh_to_color

    n_world = gaussian_normal(primitive, camera.position)
    n_cam = Rw @ n_world
    view_dir = primitive.center - camera.position
    view_dir = view_dir / np.linalg.norm(view_dir)
    return Splat2D(mean2d=mean2d, cov2d=cov2d, view_depth=z,
                   color=sh_to_color(primitive.sh_coeffs, view_dir),
                   feature=primitive.feature, opacity=primitive.opacity,
                   normal_cam=n_cam)


def unbiased_depth(depth, normal, ray_dirs):
    """D_p = D / max(|n.v|, COS_CLAMP); |.| so orientation cannot flip the sign."""
    cos = np.abs(np.einsum("hwc,hwc->hw", np.asarray(normal), np.asarray(ray_dirs)))
    return np.asarray(depth) / np.maximum(cos, COS_CLAMP)


def export_render(output: RenderOutput, out_dir, prefix="view"):
    """PNG for color, raw f32 planes for the remaining channels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    io_utils.write_png(out_dir / f"{prefix}_color.png", output.color)
    io_utils.write_raw_plane(out_dir / f"{prefix}_alpha.raw", output.alpha)
    io_utils.write_raw_plane(out_dir / f"{prefix}_depth.raw", output.depth)
    io_utils.write_raw_plane(out_dir / f"{prefix}_unbiased_depth.raw",
                             output.unbiased_depth)
    io_utils.write_raw_plane(out_dir / f"{prefix}_normal.raw", output.normal)
    io_utils.write_raw_plane(out_dir / f"{prefix}_feature.raw", output.feature)
