"""Per-view prior ingestion: geometric/semantic cue bundles, the dataset
container, the on-disk layout, and the top-k object mask.

Layout under a dataset root:
    cameras.json, images/{v:04}.png, normals/{v:04}.raw+.json,
    masks/{v:04}.pgm (16-bit), feats/{v:04}.raw+.json, init_points.ply,
    classes.json, optional text_queries.json, optional depths/{v:04}.raw
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io_utils
from .scene import Camera

DEFAULT_TOP_K = 3


class DatasetError(RuntimeError):
    """Missing or inconsistent dataset files."""


@dataclass
class PriorBundle:
    normal_prior: np.ndarray      # (H, W, 3) unit where labeled, camera frame
    instance_mask: np.ndarray     # (H, W) int ids, 0 = unlabeled
    feature_map: np.ndarray       # (H, W, D_f)
    big_object_mask: np.ndarray   # (H, W) bool


@dataclass
class Dataset:
    cameras: list
    images: list                  # (H, W, 3) float in [0, 1]
    priors: list
    class_count: int
    class_names: dict             # id -> name
    init_points: np.ndarray       # (N, 3)
    init_colors: np.ndarray       # (N, 3)
    feature_dim: int
    text_queries: dict = field(default_factory=dict)   # name -> (D_f,) embedding
    sensor_depths: list | None = None
    has_features: bool = True

    def __post_init__(self):
        n = len(self.cameras)
        if not (len(self.images) == len(self.priors) == n):
            raise DatasetError("view counts differ across cameras/images/priors")


def top_k_object_mask(instance_mask, k=DEFAULT_TOP_K):
    """Union of the k instance ids with the largest pixel counts (id 0
    excluded); ties break toward the smaller id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    mask = np.asarray(instance_mask)
    ids, counts = np.unique(mask[mask > 0], return_counts=True)
    if len(ids) == 0:
        return np.zeros(mask.shape, dtype=bool)
    # sort by (-count, id): stable argsort on id order, then stable by -count
    order = np.lexsort((ids, -counts))
    chosen = ids[order[:k]]
    return np.isin(mask, chosen)


# ---------------------------------------------------------------------------
# on-disk layout


def _camera_to_json(cam: Camera):
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "world_to_camera": [float(x) for x in cam.world_to_camera.reshape(-1)],
            "near": cam.near, "far": cam.far}


def _camera_from_json(d):
    return Camera(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                  width=d["width"], height=d["height"],
                  world_to_camera=np.array(d["world_to_camera"]).reshape(4, 4),
                  near=d.get("near", 0.01), far=d.get("far", 100.0))


def write_dataset(dataset: Dataset, root, top_k=DEFAULT_TOP_K):
    root = Path(root)
    for sub in ("images", "normals", "masks", "feats"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "cameras.json").write_text(json.dumps(
        [_camera_to_json(c) for c in dataset.cameras], indent=1))
    for v, (img, pri) in enumerate(zip(dataset.images, dataset.priors)):
        io_utils.write_png(root / "images" / f"{v:04}.png", img)
        io_utils.write_raw_plane(root / "normals" / f"{v:04}.raw", pri.normal_prior)
        io_utils.write_pgm16(root / "masks" / f"{v:04}.pgm", pri.instance_mask)
        io_utils.write_raw_plane(root / "feats" / f"{v:04}.raw", pri.feature_map)
    io_utils.write_ply_points(root / "init_points.ply",
                              dataset.init_points, dataset.init_colors)
    (root / "classes.json").write_text(json.dumps(
        {"class_count": dataset.class_count,
         "names": {str(k): v for k, v in dataset.class_names.items()},
         "top_k": top_k}))
    if dataset.text_queries:
        (root / "text_queries.json").write_text(json.dumps(
            {k: [float(x) for x in v] for k, v in dataset.text_queries.items()}))
    if dataset.sensor_depths is not None:
        (root / "depths").mkdir(exist_ok=True)
        for v, d in enumerate(dataset.sensor_depths):
            io_utils.write_raw_plane(root / "depths" / f"{v:04}.raw", d)


def load_dataset(root, no_clip=False) -> Dataset:
    root = Path(root)
    cam_file = root / "cameras.json"
    if not cam_file.exists():
        raise DatasetError(f"missing {cam_file}")
    cameras = [_camera_from_json(d) for d in json.loads(cam_file.read_text())]

    classes = json.loads((root / "classes.json").read_text())
    class_count = int(classes["class_count"])
    class_names = {int(k): v for k, v in classes.get("names", {}).items()}

    has_features = (root / "feats").is_dir() and any((root / "feats").glob("*.raw"))
    if not has_features and not no_clip:
        raise DatasetError(
            f"{root}/feats missing; pass no_clip to train without CLIP features")

    images, priors = [], []
    feature_dim = None
    for v, cam in enumerate(cameras):
        img_path = root / "images" / f"{v:04}.png"
        if not img_path.exists():
            raise DatasetError(f"view {v}: missing {img_path}")
        img = io_utils.read_png(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"view {v}: image dims {img.shape[:2]} != camera "
                               f"{(cam.height, cam.width)}")
        normal = io_utils.read_raw_plane(root / "normals" / f"{v:04}.raw")
        if normal.shape != (cam.height, cam.width, 3):
            raise DatasetError(f"view {v}: bad normal map shape {normal.shape}")
        mask = io_utils.read_pgm16(root / "masks" / f"{v:04}.pgm")
        if mask.shape != (cam.height, cam.width):
            raise DatasetError(f"view {v}: bad mask shape {mask.shape}")
        if mask.max() >= class_count:
            raise DatasetError(f"view {v}: instance id {mask.max()} >= class "
                               f"count {class_count}")
        norms = np.linalg.norm(normal, axis=-1)
        labeled = mask > 0
        if labeled.any() and np.abs(norms[labeled] - 1.0).max() > 1e-3:
            raise DatasetError(f"view {v}: normal prior not unit where labeled")
        if has_features:
            feats = io_utils.read_raw_plane(root / "feats" / f"{v:04}.raw")
            if not np.isfinite(feats).all():
                raise DatasetError(f"view {v}: non-finite feature map")
            if feature_dim is None:
                feature_dim = feats.shape[2]
            elif feats.shape[2] != feature_dim:
                raise DatasetError(f"view {v}: feature dim mismatch")
        else:
            feats = np.zeros((cam.height, cam.width, 0))
        images.append(img)
        priors.append(PriorBundle(
            normal_prior=normal, instance_mask=mask, feature_map=feats,
            big_object_mask=top_k_object_mask(mask, classes.get("top_k",
                                                                DEFAULT_TOP_K))))
    if feature_dim is None:
        feature_dim = 0

    pts = io_utils.read_ply(root / "init_points.ply")["vertex"]
    init_points = np.stack([pts["x"], pts["y"], pts["z"]], -1).astype(np.float64)
    if "red" in pts:
        init_colors = np.stack([pts["red"], pts["green"], pts["blue"]], -1) / 255.0
    else:
        init_colors = np.full((len(init_points), 3), 0.5)

    text_queries = {}
    tq = root / "text_queries.json"
    if tq.exists():
        text_queries = {k: np.array(v, dtype=np.float64)
                        for k, v in json.loads(tq.read_text()).items()}

    sensor_depths = None
    if (root / "depths").is_dir():
        sensor_depths = [io_utils.read_raw_plane(root / "depths" / f"{v:04}.raw")
                         for v in range(len(cameras))]

    return Dataset(cameras=cameras, images=images, priors=priors,
                   class_count=class_count, class_names=class_names,
                   init_points=init_points, init_colors=init_colors,
                   feature_dim=feature_dim, text_queries=text_queries,
                   sensor_depths=sensor_depths, has_features=has_features)
