"""Synthetic dataset generation with analytic ground truth.

Scenes are built from parametric shapes (spheres, finite planes, boxes) and
ray-traced per view, producing rgb/depth/normal/instance/feature maps plus a
triangulated ground-truth mesh. Prior noise (normal jitter, mask dropout,
feature noise) and rgb lighting perturbation are applied on top, so the
clean analytic maps stay available as ground truth.

World convention: z up; cameras orbit a target with +z as world up and the
camera y axis pointing down (image rows grow downward).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .priors import Dataset, PriorBundle, top_k_object_mask, DEFAULT_TOP_K
from .scene import Camera


class ConfigError(ValueError):
    pass


@dataclass
class ShapeSpec:
    kind: str                      # "sphere" | "plane" | "box"
    object_id: int                 # dense from 1
    color: tuple                   # rgb in [0, 1]
    feature: np.ndarray            # (D_f,)
    # sphere
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    # plane: rectangle at `center` with normal/tangent frame and half extents
    normal: tuple = (0.0, 0.0, 1.0)
    tangent: tuple = (1.0, 0.0, 0.0)
    half_extents: tuple = (1.0, 1.0)
    # box
    box_min: tuple = (0.0, 0.0, 0.0)
    box_max: tuple = (1.0, 1.0, 1.0)


@dataclass
class SyntheticSceneSpec:
    shapes: list
    feature_dim: int = 16
    image_width: int = 64
    image_height: int = 64
    focal: float = 70.0
    n_views: int = 16
    orbit_radius: float = 3.0
    orbit_height: float = 1.8
    orbit_target: tuple = (0.0, 0.0, 0.4)
    lighting_amplitude: float = 0.0
    lighting_object_ids: list | None = None
    normal_noise_deg: float = 0.0
    mask_dropout_prob: float = 0.0
    feature_noise_std: float = 0.0
    init_point_count: int = 1500
    top_k: int = DEFAULT_TOP_K
    near: float = 0.05
    far: float = 20.0
    with_sensor_depth: bool = False

    def to_json(self):
        shapes = []
        for s in self.shapes:
            d = {"kind": s.kind, "object_id": s.object_id,
                 "color": list(s.color), "feature": [float(x) for x in s.feature],
                 "center": list(s.center), "radius": s.radius,
                 "normal": list(s.normal), "tangent": list(s.tangent),
                 "half_extents": list(s.half_extents),
                 "box_min": list(s.box_min), "box_max": list(s.box_max)}
            shapes.append(d)
        d = {k: getattr(self, k) for k in (
            "feature_dim", "image_width", "image_height", "focal", "n_views",
            "orbit_radius", "orbit_height", "lighting_amplitude",
            "normal_noise_deg", "mask_dropout_prob", "feature_noise_std",
            "init_point_count", "top_k", "near", "far", "with_sensor_depth")}
        d["orbit_target"] = list(self.orbit_target)
        d["lighting_object_ids"] = self.lighting_object_ids
        d["shapes"] = shapes
        return d

    @classmethod
    def from_json(cls, d):
        shapes = [ShapeSpec(kind=s["kind"], object_id=s["object_id"],
                            color=tuple(s["color"]),
                            feature=np.array(s["feature"], dtype=np.float64),
                            center=tuple(s.get("center", (0, 0, 0))),
                            radius=s.get("radius", 1.0),
                            normal=tuple(s.get("normal", (0, 0, 1))),
                            tangent=tuple(s.get("tangent", (1, 0, 0))),
                            half_extents=tuple(s.get("half_extents", (1, 1))),
                            box_min=tuple(s.get("box_min", (0, 0, 0))),
                            box_max=tuple(s.get("box_max", (1, 1, 1))))
                  for s in d["shapes"]]
        kwargs = {k: v for k, v in d.items() if k != "shapes"}
        kwargs["orbit_target"] = tuple(kwargs.get("orbit_target", (0, 0, 0.4)))
        return cls(shapes=shapes, **kwargs)


@dataclass
class GroundTruth:
    mesh_vertices: np.ndarray
    mesh_faces: np.ndarray
    mesh_labels: np.ndarray                 # per-vertex object id
    depth_maps: list                        # analytic z-depth per view
    normal_maps: list                       # analytic camera-frame normals
    instance_maps: list                     # analytic id maps
    object_masks: list                      # per view: {id: HxW bool}


# ---------------------------------------------------------------------------
# cameras


def look_at_camera(eye, target, fx, width, height, near, far) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    fl = np.linalg.norm(forward)
    if fl < 1e-9:
        raise ConfigError("degenerate camera: eye coincides with target")
    forward /= fl
    up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(forward, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ eye
    return Camera(fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  width=width, height=height, world_to_camera=w2c,
                  near=near, far=far)


def orbit_cameras(spec: SyntheticSceneSpec):
    if spec.orbit_radius <= 0 or spec.n_views < 1:
        raise ConfigError("orbit requires positive radius and at least one view")
    cams = []
    for i in range(spec.n_views):
        phi = 2 * np.pi * i / spec.n_views
        eye = np.array([spec.orbit_radius * np.cos(phi),
                        spec.orbit_radius * np.sin(phi),
                        spec.orbit_height])
        cams.append(look_at_camera(eye, spec.orbit_target, spec.focal,
                                   spec.image_width, spec.image_height,
                                   spec.near, spec.far))
    return cams


# ---------------------------------------------------------------------------
# analytic ray casting


def _intersect_shape(shape: ShapeSpec, origins, dirs):
    """Ray-shape intersection; rays are o + t d with d_z(cam) = 1, so t is
    the camera z-depth. Returns (t, normal_world) with t = inf where missed."""
    o = origins
    d = dirs
    inf = np.full(d.shape[:-1], np.inf)
    if shape.kind == "sphere":
        c = np.asarray(shape.center)
        oc = o - c
        a = np.einsum("...k,...k->...", d, d)
        b = 2 * np.einsum("...k,...k->...", oc, d)
        cc = np.einsum("...k,...k->...", oc, oc) - shape.radius ** 2
        disc = b * b - 4 * a * cc
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t = np.where(hit, (-b - sq) / (2 * a), np.inf)
        t = np.where(t > 1e-6, t, np.inf)
        pts = o + t[..., None] * d
        n = (pts - c) / shape.radius
        return t, n
    if shape.kind == "plane":
        n0 = np.asarray(shape.normal, dtype=np.float64)
        n0 = n0 / np.linalg.norm(n0)
        u = np.asarray(shape.tangent, dtype=np.float64)
        u = u - np.dot(u, n0) * n0
        u /= np.linalg.norm(u)
        v = np.cross(n0, u)
        p0 = np.asarray(shape.center)
        denom = np.einsum("...k,k->...", d, n0)
        t = np.where(np.abs(denom) > 1e-12,
                     np.einsum("k,...k->...", n0, p0 - o) / denom, np.inf)
        pts = o + t[..., None] * d
        lu = np.einsum("...k,k->...", pts - p0, u)
        lv = np.einsum("...k,k->...", pts - p0, v)
        inside = ((np.abs(lu) <= shape.half_extents[0])
                  & (np.abs(lv) <= shape.half_extents[1]) & (t > 1e-6))
        t = np.where(inside, t, np.inf)
        nrm = np.broadcast_to(n0, d.shape).copy()
        return t, nrm
    if shape.kind == "box":
        bmin = np.asarray(shape.box_min)
        bmax = np.asarray(shape.box_max)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
        t1 = (bmin - o) * inv
        t2 = (bmax - o) * inv
        tmin = np.minimum(t1, t2).max(axis=-1)
        tmax = np.maximum(t1, t2).min(axis=-1)
        hit = (tmax >= tmin) & (tmax > 1e-6)
        t = np.where(hit & (tmin > 1e-6), tmin, np.inf)
        pts = o + t[..., None] * d
        center = (bmin + bmax) / 2
        half = (bmax - bmin) / 2
        rel = (pts - center) / half
        face = np.argmax(np.abs(rel), axis=-1)
        n = np.zeros_like(pts)
        idx = np.indices(face.shape)
        n[(*idx, face)] = np.sign(rel[(*idx, face)])
        return t, n
    raise ConfigError(f"unknown shape kind {shape.kind!r}")


def trace_view(spec: SyntheticSceneSpec, camera: Camera):
    """Analytic render of one view: depth (z-depth), camera-frame normals,
    instance ids, base colors, features."""
    h, w = camera.height, camera.width
    R = camera.world_to_camera[:3, :3]
    eye = camera.position
    gu, gv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    d_cam = np.stack([(gu - camera.cx) / camera.fx,
                      (gv - camera.cy) / camera.fy,
                      np.ones_like(gu)], axis=-1)
    d_world = d_cam @ R              # R^T applied row-wise
    origins = np.broadcast_to(eye, d_world.shape)

    depth = np.full((h, w), np.inf)
    ids = np.zeros((h, w), dtype=np.int64)
    normal_w = np.zeros((h, w, 3))
    colors = np.zeros((h, w, 3))
    feats = np.zeros((h, w, spec.feature_dim))
    for shape in spec.shapes:
        t, n = _intersect_shape(shape, origins, d_world)
        closer = t < depth
        depth = np.where(closer, t, depth)
        ids = np.where(closer, shape.object_id, ids)
        normal_w = np.where(closer[..., None], n, normal_w)
        colors = np.where(closer[..., None], np.asarray(shape.color), colors)
        feats = np.where(closer[..., None], shape.feature, feats)

    hitmask = np.isfinite(depth)
    depth = np.where(hitmask, depth, 0.0)
    normal_c = normal_w @ R.T
    # orient toward the camera
    view = d_cam / np.linalg.norm(d_cam, axis=-1, keepdims=True)
    flip = np.einsum("hwc,hwc->hw", normal_c, view) > 0
    normal_c = np.where(flip[..., None], -normal_c, normal_c)
    normal_c = np.where(hitmask[..., None], normal_c, 0.0)
    return depth, normal_c, ids, colors, feats


# ---------------------------------------------------------------------------
# ground-truth meshes


def _sphere_mesh(center, radius, object_id, n_theta=24, n_phi=48):
    thetas = np.linspace(0, np.pi, n_theta + 1)
    phis = np.linspace(0, 2 * np.pi, n_phi, endpoint=False)
    verts = []
    for th in thetas:
        for ph in phis:
            verts.append([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph),
                          np.cos(th)])
    verts = np.array(verts) * radius + np.asarray(center)
    faces = []
    for i in range(n_theta):
        for j in range(n_phi):
            a = i * n_phi + j
            b = i * n_phi + (j + 1) % n_phi
            c = (i + 1) * n_phi + j
            d = (i + 1) * n_phi + (j + 1) % n_phi
            faces.append([a, b, d])
            faces.append([a, d, c])
    labels = np.full(len(verts), object_id)
    return verts, np.array(faces), labels


def _plane_mesh(shape: ShapeSpec, n=16):
    n0 = np.asarray(shape.normal, dtype=np.float64)
    n0 = n0 / np.linalg.norm(n0)
    u = np.asarray(shape.tangent, dtype=np.float64)
    u = u - np.dot(u, n0) * n0
    u /= np.linalg.norm(u)
    v = np.cross(n0, u)
    hu, hv = shape.half_extents
    us = np.linspace(-hu, hu, n + 1)
    vs = np.linspace(-hv, hv, n + 1)
    verts = [np.asarray(shape.center) + a * u + b * v for a in us for b in vs]
    verts = np.array(verts)
    faces = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b = a + 1
            c = a + (n + 1)
            d = c + 1
            faces.append([a, b, d])
            faces.append([a, d, c])
    return verts, np.array(faces), np.full(len(verts), shape.object_id)


def _box_mesh(shape: ShapeSpec):
    mn, mx = np.asarray(shape.box_min), np.asarray(shape.box_max)
    corners = np.array([[mn[0], mn[1], mn[2]], [mx[0], mn[1], mn[2]],
                        [mx[0], mx[1], mn[2]], [mn[0], mx[1], mn[2]],
                        [mn[0], mn[1], mx[2]], [mx[0], mn[1], mx[2]],
                        [mx[0], mx[1], mx[2]], [mn[0], mx[1], mx[2]]])
    faces = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
                      [0, 1, 5], [0, 5, 4], [2, 3, 7], [2, 7, 6],
                      [1, 2, 6], [1, 6, 5], [3, 0, 4], [3, 4, 7]])
    return corners, faces, np.full(8, shape.object_id)


def ground_truth_mesh(spec: SyntheticSceneSpec):
    verts, faces, labels = [], [], []
    offset = 0
    for shape in spec.shapes:
        if shape.kind == "sphere":
            v, f, l = _sphere_mesh(shape.center, shape.radius, shape.object_id)
        elif shape.kind == "plane":
            v, f, l = _plane_mesh(shape)
        else:
            v, f, l = _box_mesh(shape)
        verts.append(v)
        faces.append(f + offset)
        labels.append(l)
        offset += len(v)
    return (np.concatenate(verts), np.concatenate(faces),
            np.concatenate(labels))


# ---------------------------------------------------------------------------
# noise models


def _smooth_field(rng, h, w, n_blobs=6):
    """Sum of random Gaussian blobs in [-1, 1]-ish range, simulating shadow
    and highlight patches."""
    gu, gv = np.meshgrid(np.arange(w), np.arange(h))
    out = np.zeros((h, w))
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        s = rng.uniform(0.08, 0.25) * max(h, w)
        sign = rng.choice([-1.0, 1.0])
        out += sign * np.exp(-((gu - cx) ** 2 + (gv - cy) ** 2) / (2 * s * s))
    m = np.abs(out).max()
    return out / m if m > 0 else out


def _jitter_normals(rng, normals, hitmask, angle_std_rad):
    if angle_std_rad <= 0:
        return normals
    noise = rng.normal(scale=angle_std_rad, size=normals.shape)
    out = normals + noise
    lens = np.linalg.norm(out, axis=-1, keepdims=True)
    out = np.where(lens > 1e-9, out / np.maximum(lens, 1e-9), normals)
    return np.where(hitmask[..., None], out, 0.0)


# ---------------------------------------------------------------------------
# generation


def generate_synthetic(spec: SyntheticSceneSpec, seed=0):
    """Deterministic synthetic dataset + analytic ground truth for a seed."""
    if not spec.shapes:
        raise ConfigError("scene needs at least one shape")
    ids = sorted(s.object_id for s in spec.shapes)
    if ids != list(range(1, len(ids) + 1)):
        raise ConfigError("object ids must be dense starting at 1")

    rng = np.random.default_rng(seed)
    cameras = orbit_cameras(spec)

    images, priors = [], []
    depth_maps, normal_maps, instance_maps, object_masks = [], [], [], []
    for cam in cameras:
        depth, normal_c, inst, colors, feats = trace_view(spec, cam)
        hit = depth > 0

        rgb = colors.copy()
        if spec.lighting_amplitude > 0:
            fieldv = _smooth_field(rng, cam.height, cam.width)
            scale = 1.0 + spec.lighting_amplitude * fieldv
            affected = hit.copy()
            if spec.lighting_object_ids is not None:
                affected &= np.isin(inst, spec.lighting_object_ids)
            rgb = np.where(affected[..., None], rgb * scale[..., None], rgb)
        rgb = np.clip(rgb, 0.0, 1.0)
        # quantize to the on-disk precision so write/load round-trips exactly
        rgb = np.round(rgb * 255.0) / 255.0

        prior_normal = _jitter_normals(rng, normal_c, hit, np.deg2rad(
            spec.normal_noise_deg))
        prior_mask = inst.copy()
        if spec.mask_dropout_prob > 0:
            for oid in ids:
                if rng.uniform() < spec.mask_dropout_prob:
                    prior_mask[prior_mask == oid] = 0
        prior_feats = feats.copy()
        if spec.feature_noise_std > 0:
            prior_feats = prior_feats + rng.normal(
                scale=spec.feature_noise_std, size=prior_feats.shape) * hit[..., None]

        prior_normal = prior_normal.astype(np.float32).astype(np.float64)
        prior_feats = prior_feats.astype(np.float32).astype(np.float64)

        images.append(rgb)
        priors.append(PriorBundle(
            normal_prior=prior_normal, instance_mask=prior_mask,
            feature_map=prior_feats,
            big_object_mask=top_k_object_mask(prior_mask, spec.top_k)))
        depth_maps.append(depth)
        normal_maps.append(normal_c)
        instance_maps.append(inst)
        object_masks.append({oid: inst == oid for oid in ids})

    # init points sampled on the analytic surfaces via the ground-truth mesh
    verts, faces, labels = ground_truth_mesh(spec)
    tri = verts[faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=-1)
    probs = areas / areas.sum()
    pick = rng.choice(len(faces), size=spec.init_point_count, p=probs)
    r1, r2 = rng.uniform(size=(2, spec.init_point_count))
    su = np.sqrt(r1)
    bary = np.stack([1 - su, su * (1 - r2), su * r2], axis=-1)
    pts = np.einsum("nk,nkc->nc", bary, tri[pick])
    shape_by_id = {s.object_id: s for s in spec.shapes}
    pt_colors = np.array([shape_by_id[labels[faces[p][0]]].color for p in pick])
    pts = pts.astype(np.float32).astype(np.float64)
    pt_colors = np.round(pt_colors * 255.0) / 255.0

    text_queries = {f"object{s.object_id}": np.array(s.feature, dtype=np.float64)
                    for s in spec.shapes}
    class_names = {s.object_id: f"object{s.object_id}" for s in spec.shapes}

    dataset = Dataset(
        cameras=cameras, images=images, priors=priors,
        class_count=len(ids) + 1, class_names=class_names,
        init_points=pts, init_colors=pt_colors, feature_dim=spec.feature_dim,
        text_queries=text_queries,
        sensor_depths=[d.astype(np.float32).astype(np.float64)
                       for d in depth_maps] if spec.with_sensor_depth else None)
    gt = GroundTruth(mesh_vertices=verts, mesh_faces=faces, mesh_labels=labels,
                     depth_maps=depth_maps, normal_maps=normal_maps,
                     instance_maps=instance_maps, object_masks=object_masks)
    return dataset, gt


def two_object_spec(feature_dim=8, n_views=16, size=64, lighting_amplitude=0.0,
                    prior_noise=0.0, with_sensor_depth=False) -> SyntheticSceneSpec:
    """Sphere above a ground plane; the verification workhorse scene.

    ``prior_noise`` scales all three prior noise channels together (0.1 means
    ~5.7 deg normal jitter, 10% mask dropout, 0.1 feature noise std).
    """
    rng = np.random.default_rng(7)
    f1 = rng.normal(size=feature_dim)
    f2 = rng.normal(size=feature_dim)
    f1 /= np.linalg.norm(f1)
    f2 /= np.linalg.norm(f2)
    # orthogonalize: distinct object embeddings should not be correlated
    f2 = f2 - (f2 @ f1) * f1
    f2 /= np.linalg.norm(f2)
    shapes = [
        ShapeSpec(kind="sphere", object_id=1, color=(0.8, 0.3, 0.25),
                  feature=f1, center=(0.0, 0.0, 0.5), radius=0.5),
        ShapeSpec(kind="plane", object_id=2, color=(0.35, 0.4, 0.5),
                  feature=f2, center=(0.0, 0.0, 0.0), normal=(0, 0, 1),
                  tangent=(1, 0, 0), half_extents=(1.6, 1.6)),
    ]
    return SyntheticSceneSpec(
        shapes=shapes, feature_dim=feature_dim, image_width=size,
        image_height=size, n_views=n_views,
        lighting_amplitude=lighting_amplitude,
        lighting_object_ids=[2] if lighting_amplitude > 0 else None,
        normal_noise_deg=np.rad2deg(prior_noise),
        mask_dropout_prob=prior_noise, feature_noise_std=prior_noise,
        with_sensor_depth=with_sensor_depth)
