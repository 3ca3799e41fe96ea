"""Training loop: parameter activations and schedules, Adam updates,
gradient-statistic densification/pruning, opacity resets, checkpointing.

The optimizable state lives in a :class:`GaussianModel` (pre-activation
parameters); :class:`~surfsplat.scene.Scene` snapshots are exported between
steps. One view is sampled per iteration in seeded shuffled epoch order, so
runs are bit-reproducible for a fixed config and seed.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import geometry, losses, rasterizer
from .geometry import ALPHA_FLOOR
from .losses import ClassifierHead, LossWeights, TrainingDivergenceError
from .priors import Dataset
from .scene import Scene, rgb_to_sh_dc


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 30_000
    # learning rates
    position_lr_init: float = 0.00016
    position_lr_final: float = 0.0000016
    position_lr_delay_mult: float = 0.01
    position_lr_delay_steps: int = 0
    position_lr_max_steps: int = 30_000
    feature_lr: float = 0.0025
    opacity_lr: float = 0.05
    scaling_lr: float = 0.005
    rotation_lr: float = 0.001
    semantic_lr: float = 0.0025      # reuses feature_lr by default
    mlp_lr: float = 0.00005
    # densification
    percent_dense: float = 0.01
    densification_interval: int = 100
    densify_from: int = 500
    densify_until: int = 15_000
    densify_grad_threshold: float = 0.0006
    densify_abs_grad_threshold: float = 0.0008
    abs_split_radii2d_threshold: float = 20.0
    max_abs_split_points: int = 50_000
    max_all_points: int = 6_000_000
    # opacity maintenance
    opacity_reset_interval: int = 3000
    opacity_cull_threshold: float = 0.05
    init_opacity: float = 0.1
    # losses
    weights: LossWeights = field(default_factory=LossWeights)
    use_normal_loss: bool = True
    use_mask_loss: bool = True
    use_clip_loss: bool = True
    use_depth_loss: bool = True
    use_smooth_loss: bool = True
    use_sensor_depth: bool = False
    sensor_depth_weight: float = 0.5
    # misc
    seed: int = 0
    checkpoint_interval: int = 0     # 0: final checkpoint only

    def __post_init__(self):
        if self.densify_from <= 0 or self.densify_from >= self.densify_until:
            raise TrainingError("require 0 < densify_from < densify_until")

    def to_json(self):
        d = asdict(self)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def expon_lr(step, lr_init, lr_final, max_steps, delay_mult, delay_steps=0):
    """Log-linear interpolation from lr_init to lr_final over max_steps, with
    an optional sine warmup ramp from delay_mult over the first delay_steps."""
    t = min(max(step / max_steps, 0.0), 1.0)
    lr = math.exp(math.log(lr_init) * (1 - t) + math.log(lr_final) * t)
    if delay_steps > 0:
        ramp = delay_mult + (1 - delay_mult) * math.sin(
            0.5 * math.pi * min(step / delay_steps, 1.0))
        lr *= ramp
    return lr


def _inverse_sigmoid(x):
    return math.log(x / (1 - x))


class GaussianModel:
    """Pre-activation parameter store with densify/prune/reset machinery."""

    DTYPE = torch.float32

    def __init__(self, xyz, colors, feature_dim, config: TrainConfig,
                 spatial_scale):
        n = len(xyz)
        xyz = np.asarray(xyz, dtype=np.float64)
        self.config = config
        self.spatial_scale = float(spatial_scale)

        # isotropic init scale from mean 3-NN distance, as in 3DGS
        if n > 3:
            tree = cKDTree(xyz)
            d, _ = tree.query(xyz, k=4)
            dist = np.maximum(d[:, 1:].mean(axis=1), 1e-7)
        else:
            dist = np.full(n, 0.05)
        t = lambda a: torch.tensor(np.asarray(a), dtype=self.DTYPE)

        self._xyz = t(xyz).requires_grad_(True)
        self._scaling = t(np.log(dist)[:, None].repeat(3, 1)).requires_grad_(True)
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        self._rotation = t(rot).requires_grad_(True)
        self._opacity = t(np.full((n, 1), _inverse_sigmoid(config.init_opacity))
                          ).requires_grad_(True)
        sh = np.zeros((n, 16, 3))
        sh[:, 0, :] = rgb_to_sh_dc(np.asarray(colors))
        self._features_dc = t(sh[:, :1, :]).requires_grad_(True)
        self._features_rest = t(sh[:, 1:, :]).requires_grad_(True)
        self._semantic = t(np.zeros((n, feature_dim))).requires_grad_(True)

        self.optimizer = torch.optim.Adam([
            {"params": [self._xyz], "lr": config.position_lr_init * spatial_scale,
             "name": "xyz"},
            {"params": [self._features_dc], "lr": config.feature_lr, "name": "f_dc"},
            {"params": [self._features_rest], "lr": config.feature_lr / 20.0,
             "name": "f_rest"},
            {"params": [self._opacity], "lr": config.opacity_lr, "name": "opacity"},
            {"params": [self._scaling], "lr": config.scaling_lr, "name": "scaling"},
            {"params": [self._rotation], "lr": config.rotation_lr, "name": "rotation"},
            {"params": [self._semantic], "lr": config.semantic_lr, "name": "semantic"},
        ], eps=1e-15, betas=(0.9, 0.999))
        self._reset_stats()

    def __len__(self):
        return self._xyz.shape[0]

    def _reset_stats(self):
        n = len(self)
        self.grad_accum = torch.zeros(n)
        self.abs_grad_accum = torch.zeros(n)
        self.denom = torch.zeros(n)
        self.max_radii = torch.zeros(n)
        self.xyz_grad_accum = torch.zeros(n, 3)

    # -- rendering interface ----------------------------------------------

    def activated(self):
        """(centers, scales, quats, opacities, sh, features) for render_core."""
        return (self._xyz, torch.exp(self._scaling), self._rotation,
                torch.sigmoid(self._opacity).squeeze(-1),
                torch.cat([self._features_dc, self._features_rest], dim=1),
                self._semantic)

    def to_scene(self, background=(0.0, 0.0, 0.0)) -> Scene:
        with torch.no_grad():
            c, s, q, o, sh, f = (x.detach() for x in self.activated())
            qn = q / torch.linalg.norm(q, dim=-1, keepdim=True)
        return Scene(c.numpy().astype(np.float64), s.numpy().astype(np.float64),
                     qn.numpy().astype(np.float64), o.numpy().astype(np.float64),
                     sh.numpy().astype(np.float64), f.numpy().astype(np.float64),
                     background_color=background)

    def accumulate_stats(self, mean2d_grad, radii, xyz_grad):
        vis = radii > 0
        g = torch.linalg.norm(mean2d_grad, dim=-1)
        self.grad_accum[vis] += g[vis]
        # the absolute-gradient statistic shares the per-iteration norm; the
        # split criterion differs by threshold and the screen-radius gate
        self.abs_grad_accum[vis] += g[vis]
        self.denom[vis] += 1
        self.max_radii = torch.maximum(self.max_radii, radii)
        if xyz_grad is not None:
            self.xyz_grad_accum[vis] += xyz_grad[vis]

    # -- optimizer surgery -------------------------------------------------

    def _param_refs(self):
        return {"xyz": "_xyz", "f_dc": "_features_dc", "f_rest": "_features_rest",
                "opacity": "_opacity", "scaling": "_scaling",
                "rotation": "_rotation", "semantic": "_semantic"}

    def _rebuild(self, keep_mask=None, extras=None):
        """Prune by mask and/or append new rows, fixing Adam state alongside."""
        refs = self._param_refs()
        for group in self.optimizer.param_groups:
            name = group["name"]
            old = group["params"][0]
            state = self.optimizer.state.pop(old, None)
            tensor = old.detach()
            if keep_mask is not None:
                tensor = tensor[keep_mask]
                if state is not None:
                    state["exp_avg"] = state["exp_avg"][keep_mask]
                    state["exp_avg_sq"] = state["exp_avg_sq"][keep_mask]
            if extras is not None and name in extras:
                add = extras[name].to(self.DTYPE)
                tensor = torch.cat([tensor, add], dim=0)
                if state is not None:
                    zeros = torch.zeros_like(add)
                    state["exp_avg"] = torch.cat([state["exp_avg"], zeros], dim=0)
                    state["exp_avg_sq"] = torch.cat([state["exp_avg_sq"], zeros], dim=0)
            new_param = tensor.requires_grad_(True)
            group["params"][0] = new_param
            if state is not None:
                self.optimizer.state[new_param] = state
            setattr(self, refs[name], new_param)
        self._reset_stats()

    def prune(self, prune_mask):
        keep = ~prune_mask
        if int(keep.sum()) == 0:
            raise TrainingError("pruning removed every primitive")
        self._rebuild(keep_mask=keep)

    def densify_and_prune(self, iteration):
        cfg = self.config
        denom = torch.clamp(self.denom, min=1)
        avg = self.grad_accum / denom
        avg_abs = self.abs_grad_accum / denom
        xyz_dir = self.xyz_grad_accum / denom[:, None]

        with torch.no_grad():
            scales = torch.exp(self._scaling)
            max_scale = scales.max(dim=1).values
            small = max_scale <= cfg.percent_dense * self.spatial_scale

            clone_mask = (avg >= cfg.densify_grad_threshold) & small
            split_mask = (avg >= cfg.densify_grad_threshold) & ~small
            abs_mask = ((avg_abs >= cfg.densify_abs_grad_threshold)
                        & (self.max_radii > cfg.abs_split_radii2d_threshold))
            if int(abs_mask.sum()) > cfg.max_abs_split_points:
                scores = torch.where(abs_mask, avg_abs, torch.zeros_like(avg_abs))
                top = torch.topk(scores, cfg.max_abs_split_points).indices
                limited = torch.zeros_like(abs_mask)
                limited[top] = True
                abs_mask = limited
            split_mask = (split_mask | abs_mask) & ~clone_mask

            budget = cfg.max_all_points - len(self)
            n_new = int(clone_mask.sum()) + int(split_mask.sum())
            if budget <= 0 or n_new > budget:
                clone_mask = torch.zeros_like(clone_mask)
                split_mask = torch.zeros_like(split_mask)

            extras = {k: [] for k in self._param_refs()}

            def push(idx, xyz, scaling):
                extras["xyz"].append(xyz)
                extras["scaling"].append(scaling)
                extras["f_dc"].append(self._features_dc.detach()[idx])
                extras["f_rest"].append(self._features_rest.detach()[idx])
                extras["opacity"].append(self._opacity.detach()[idx])
                extras["rotation"].append(self._rotation.detach()[idx])
                extras["semantic"].append(self._semantic.detach()[idx])

            if clone_mask.any():
                idx = torch.nonzero(clone_mask).squeeze(-1)
                # move the clone one nudge down the accumulated positional
                # gradient so duplicates separate under a deterministic renderer
                g = xyz_dir[idx]
                gn = torch.linalg.norm(g, dim=-1, keepdim=True)
                step = 0.3 * scales[idx].mean(dim=1, keepdim=True)
                offset = torch.where(gn > 0, -g / torch.clamp(gn, min=1e-12) * step,
                                     torch.zeros_like(g))
                push(idx, self._xyz.detach()[idx] + offset, self._scaling.detach()[idx])

            if split_mask.any():
                idx = torch.nonzero(split_mask).squeeze(-1)
                k = idx.shape[0]
                from .rasterizer import _quat_to_rotmat_t

                R = _quat_to_rotmat_t(self._rotation.detach()[idx])
                local = torch.randn(2, k, 3) * scales[idx]
                world = torch.einsum("nij,snj->sni", R, local)
                new_scaling = self._scaling.detach()[idx] - math.log(1.6)
                for s in range(2):
                    push(idx, self._xyz.detach()[idx] + world[s], new_scaling)

            have_extras = any(len(v) for v in extras.values())
            extras_cat = ({k: torch.cat(v, dim=0) for k, v in extras.items()}
                          if have_extras else None)

            opacity = torch.sigmoid(self._opacity.detach()).squeeze(-1)
            prune_mask = opacity < cfg.opacity_cull_threshold
            prune_mask = prune_mask | split_mask
            keep = ~prune_mask
            if have_extras or prune_mask.any():
                if int(keep.sum()) == 0 and not have_extras:
                    raise TrainingError("pruning removed every primitive")
                self._rebuild(keep_mask=keep, extras=extras_cat)
            else:
                self._reset_stats()

    def reset_opacity(self):
        level = _inverse_sigmoid(self.config.opacity_cull_threshold)
        with torch.no_grad():
            self._opacity.clamp_(max=level)
        state = self.optimizer.state.get(self._opacity)
        if state is not None:
            state["exp_avg"].zero_()
            state["exp_avg_sq"].zero_()

    def step(self, iteration):
        for group in self.optimizer.param_groups:
            if group["name"] == "xyz":
                group["lr"] = self.spatial_scale * expon_lr(
                    iteration, self.config.position_lr_init,
                    self.config.position_lr_final,
                    self.config.position_lr_max_steps,
                    self.config.position_lr_delay_mult,
                    self.config.position_lr_delay_steps)
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        with torch.no_grad():
            self._rotation /= torch.linalg.norm(self._rotation, dim=-1,
                                                keepdim=True)


@dataclass
class TrainResult:
    scene: Scene
    head: ClassifierHead
    log: list


def _view_tensors(dataset: Dataset, v, dtype):
    pri = dataset.priors[v]
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)
    labeled = np.linalg.norm(pri.normal_prior, axis=-1) > 0.5
    out = {
        "image": t(dataset.images[v]),
        "normal_prior": t(pri.normal_prior),
        "prior_labeled": torch.as_tensor(labeled),
        "instance": torch.as_tensor(pri.instance_mask, dtype=torch.long),
        "features": t(pri.feature_map),
        "big_mask": torch.as_tensor(pri.big_object_mask),
    }
    if dataset.sensor_depths is not None:
        out["sensor"] = t(dataset.sensor_depths[v])
    return out


def train(dataset: Dataset, config: TrainConfig, out_dir=None) -> TrainResult:
    """Optimize a scene (and classifier head) against a dataset."""
    if config.use_sensor_depth and dataset.sensor_depths is None:
        raise TrainingError("use_sensor_depth set but the dataset has no depths/")
    if config.use_clip_loss and not dataset.has_features:
        raise TrainingError("clip loss enabled but the dataset has no feats/")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    dtype = GaussianModel.DTYPE

    pts = dataset.init_points
    extent = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)) / 2)
    model = GaussianModel(pts, dataset.init_colors, dataset.feature_dim,
                          config, extent)
    head = ClassifierHead(dataset.feature_dim, dataset.class_count,
                          seed=config.seed)
    head.weight = head.weight.detach().to(dtype).requires_grad_(True)
    head.bias = head.bias.detach().to(dtype).requires_grad_(True)
    head_opt = torch.optim.Adam(head.parameters(), lr=config.mlp_lr,
                                eps=1e-15, betas=(0.9, 0.999))

    views = [_view_tensors(dataset, v, dtype) for v in range(len(dataset.cameras))]
    n_views = len(views)
    order = []

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved-config.json").write_text(
            json.dumps(config.to_json(), indent=1))
        log_file = (out_dir / "train_log.jsonl").open("w")

    def checkpoint(tag="checkpoint"):
        if out_dir is None:
            return
        scene = model.to_scene()
        scene.save(out_dir / f"{tag}.glsc")
        np.savez(out_dir / f"{tag}_head.npz", **head.state_arrays())
        torch.save(model.optimizer.state_dict(), out_dir / f"{tag}_adam.pt")

    log = []
    t_start = time.time()
    try:
        for iteration in range(1, config.iterations + 1):
            if not order:
                order = list(rng.permutation(n_views))
            v = int(order.pop())
            cam = dataset.cameras[v]
            view = views[v]

            out = rasterizer.render_core(*model.activated(), cam,
                                         np.zeros(3), retain_mean2d=True)
            terms = {}
            terms["l_c"] = losses.photometric_loss(
                out["color"], view["image"], config.weights.lambda_dssim)

            need_nd = (config.use_normal_loss or config.use_smooth_loss
                       or config.use_depth_loss)
            if need_nd:
                n_d, nd_valid = geometry.normal_from_depth_t(out["depth"], cam)
                surf = (out["alpha"].detach() > ALPHA_FLOOR)
                valid_n = nd_valid & view["prior_labeled"] & surf
            if config.use_normal_loss:
                terms["l_n"] = losses.normal_prior_loss(
                    n_d, view["normal_prior"], out["alpha"], valid=valid_n)
            if config.use_mask_loss:
                terms["l_m"] = losses.mask_ce_loss(out["feature"], head,
                                                   view["instance"])
            if config.use_clip_loss:
                terms["l_clip"] = losses.clip_feature_loss(out["feature"],
                                                           view["features"])
            if config.use_smooth_loss:
                terms["l_s"] = losses.smoothness_loss(
                    n_d, view["features"], view["big_mask"], valid=nd_valid)
            if config.use_depth_loss:
                with torch.no_grad():
                    nrm_np = out["normal"].numpy()
                    rays_np = out["ray_dirs"].numpy()
                    masks = geometry.refinement_masks(
                        nrm_np, view["normal_prior"].numpy(), rays_np,
                        valid=valid_n.numpy())
                    d_r = geometry.refined_depth(
                        out["depth"].numpy(), out["unbiased_depth"].numpy(),
                        out["alpha"].numpy(), masks)
                terms["l_d"] = losses.depth_refinement_loss(
                    out["unbiased_depth"], torch.as_tensor(d_r, dtype=dtype),
                    n_d, view["normal_prior"], out["alpha"], valid=valid_n)

            total, report = losses.total_loss(terms, config.weights)
            record = report.as_dict()
            if config.use_sensor_depth:
                l_sensor = losses.sensor_depth_loss(out["unbiased_depth"],
                                                    view["sensor"])
                record["l_sensor"] = float(l_sensor.detach())
                total = total + config.sensor_depth_weight * l_sensor

            total.backward()

            with torch.no_grad():
                m2grad = out["mean2d_full"].grad
                if m2grad is not None:
                    model.accumulate_stats(m2grad, out["radii_full"],
                                           model._xyz.grad)
            model.step(iteration)
            head_opt.step()
            head_opt.zero_grad(set_to_none=True)

            record.update(iteration=iteration, n_primitives=len(model),
                          view=v, wall=time.time() - t_start)
            log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")

            in_window = config.densify_from <= iteration <= config.densify_until
            if in_window and iteration % config.densification_interval == 0:
                model.densify_and_prune(iteration)
            if (iteration % config.opacity_reset_interval == 0
                    and iteration < config.densify_until
                    and iteration < config.iterations):
                model.reset_opacity()
            if (config.checkpoint_interval
                    and iteration % config.checkpoint_interval == 0):
                checkpoint()
    except TrainingDivergenceError:
        checkpoint("last-good")
        raise
    finally:
        if log_file is not None:
            log_file.close()

    checkpoint()
    return TrainResult(scene=model.to_scene(), head=head, log=log)
