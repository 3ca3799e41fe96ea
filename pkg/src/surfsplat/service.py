"""Read-only HTTP viewer backend over a trained scene snapshot.

Endpoints:
    GET /api/info                   scene stats and the stored query palette
    GET /api/render?pose=..&fov=..&w=..&h=..&channel=color|depth|normal|attention
                                    PNG of the requested channel
    GET /api/query?name=..&threshold=..   selection stats + mask PNG (base64)
    GET /api/mesh?semantic=0|1      fused mesh as binary PLY

Every response carries a deterministic ETag derived from the snapshot hash
and the request parameters; the snapshot itself is never mutated.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import math
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, Query, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image

from . import io_utils, ovseg, rasterizer, tsdf
from .losses import ClassifierHead
from .scene import Camera, Scene

RENDER_CHANNELS = ("color", "depth", "normal", "attention")
MAX_RENDER_DIM = 1024


@dataclass
class SceneSnapshot:
    scene: Scene
    head: ClassifierHead | None
    queries: dict                 # name -> (D_f,) embedding
    home_camera: Camera
    content_hash: str
    mesh_cache: dict

    def etag(self, *parts):
        digest = hashlib.sha256()
        digest.update(self.content_hash.encode())
        for p in parts:
            digest.update(b"\x00")
            digest.update(str(p).encode())
        return digest.hexdigest()[:32]


def _hash_snapshot(scene: Scene, head, queries):
    digest = hashlib.sha256()
    for arr in (scene.centers, scene.scales, scene.rotations, scene.opacities,
                scene.sh, scene.features):
        digest.update(np.ascontiguousarray(arr).tobytes())
    if head is not None:
        for arr in head.state_arrays().values():
            digest.update(np.ascontiguousarray(arr).tobytes())
    for name in sorted(queries):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(queries[name]).tobytes())
    return digest.hexdigest()


def _default_home_camera(scene: Scene, width=256, height=256):
    center = scene.centers.mean(axis=0)
    radius = 3.0 * max(float(np.linalg.norm(
        scene.centers - center, axis=1).max()), 1e-3)
    eye = center + radius * np.array([0.0, -0.8, 0.6])
    fwd = center - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(np.array([0.0, 0.0, 1.0]), fwd)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    w2c = np.eye(4)
    w2c[:3, :3] = np.stack([right, down, fwd])
    w2c[:3, 3] = -w2c[:3, :3] @ eye
    f = 0.5 * width / math.tan(math.radians(60.0) / 2)
    return Camera(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2,
                  width=width, height=height, world_to_camera=w2c)


def load_snapshot(scene_path, head_path=None, data_root=None,
                  queries=None) -> SceneSnapshot:
    scene = Scene.load(scene_path)
    head = None
    if head_path is None:
        cand = Path(scene_path).with_name(Path(scene_path).stem + "_head.npz")
        head_path = cand if cand.exists() else None
    if head_path is not None:
        arrs = np.load(head_path)
        head = ClassifierHead.from_arrays(arrs["weight"], arrs["bias"])

    queries = dict(queries or {})
    home = None
    if data_root is not None:
        root = Path(data_root)
        tq = root / "text_queries.json"
        if tq.exists():
            queries.update({k: np.array(v, dtype=np.float64)
                            for k, v in json.loads(tq.read_text()).items()})
        cams = root / "cameras.json"
        if cams.exists():
            from .priors import _camera_from_json

            home = _camera_from_json(json.loads(cams.read_text())[0])
    if home is None:
        home = _default_home_camera(scene)
    return SceneSnapshot(scene=scene, head=head, queries=queries,
                         home_camera=home,
                         content_hash=_hash_snapshot(scene, head, queries),
                         mesh_cache={})


# ---------------------------------------------------------------------------
# colormaps and encoding

# polynomial fit of the turbo colormap (Google AI blog, 2019)
_TURBO_R = (0.13572138, 4.61539260, -42.66032258, 132.13108234,
            -152.94239396, 59.28637943)
_TURBO_G = (0.09140261, 2.19418839, 4.84296658, -14.18503333,
            4.27729857, 2.82956604)
_TURBO_B = (0.10667330, 12.64194608, -60.58204836, 110.36276771,
            -89.90310912, 27.34824973)


def _turbo(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    out = np.empty(x.shape + (3,))
    for c, coef in enumerate((_TURBO_R, _TURBO_G, _TURBO_B)):
        acc = np.zeros_like(x)
        for k in reversed(coef):
            acc = acc * x + k
        out[..., c] = acc
    return np.clip(out, 0.0, 1.0)


def _png_bytes(image):
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = (arr * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _parse_pose(pose_str):
    try:
        vals = [float(x) for x in pose_str.split(",")]
    except ValueError as exc:
        raise ValueError(f"pose is not a comma-separated float list: {exc}")
    if len(vals) != 12:
        raise ValueError(f"pose needs 12 floats (row-major 3x4), got {len(vals)}")
    w2c = np.eye(4)
    w2c[:3, :] = np.array(vals).reshape(3, 4)
    R = w2c[:3, :3]
    if abs(abs(np.linalg.det(R)) - 1.0) > 1e-3:
        raise ValueError("pose rotation block is not orthonormal")
    return w2c


def _camera_for_request(pose, fov, w, h):
    if not 1.0 <= fov <= 175.0:
        raise ValueError("fov out of range (1..175 degrees)")
    if not (0 < w <= MAX_RENDER_DIM and 0 < h <= MAX_RENDER_DIM):
        raise ValueError(f"image size out of range (1..{MAX_RENDER_DIM})")
    f = 0.5 * w / math.tan(math.radians(fov) / 2)
    return Camera(fx=f, fy=f, cx=(w - 1) / 2, cy=(h - 1) / 2,
                  width=w, height=h, world_to_camera=pose)


def _render_channel(snapshot: SceneSnapshot, camera, channel, query_name,
                    threshold):
    scene = snapshot.scene
    if channel == "attention":
        if query_name not in snapshot.queries:
            raise KeyError(query_name)
        q = ovseg.QueryEmbedding(query_name, snapshot.queries[query_name])
        scores = ovseg.score_gaussians(scene, q)
        # alpha-blend per-splat similarity as a one-channel feature map
        heat_scene = Scene(scene.centers, scene.scales, scene.rotations,
                           scene.opacities, scene.sh,
                           scores[:, None].clip(0.0, 1.0))
        out = rasterizer.render(heat_scene, camera, dtype=torch.float32)
        return _turbo(out.feature[..., 0])
    out = rasterizer.render(scene, camera, dtype=torch.float32)
    if channel == "color":
        return out.color
    if channel == "depth":
        valid = out.alpha > 0.05
        if valid.any():
            dmax = float(out.depth[valid].max())
            norm = out.depth / dmax if dmax > 0 else out.depth
        else:
            norm = out.depth
        return np.where(valid[..., None], _turbo(norm), 0.0)
    if channel == "normal":
        return np.where((out.alpha > 0.05)[..., None],
                        out.normal * 0.5 + 0.5, 0.0)
    raise ValueError(f"unknown channel {channel!r}")


def _mesh_ply_bytes(snapshot: SceneSnapshot, semantic):
    key = bool(semantic)
    if key not in snapshot.mesh_cache:
        if semantic and snapshot.head is None:
            raise ValueError("snapshot has no classifier head for a semantic mesh")
        cams = _orbit_for_mesh(snapshot)
        mesh = tsdf.extract_scene_mesh(
            snapshot.scene, cams, semantic=semantic,
            head=snapshot.head if semantic else None, resolution=128)
        with tempfile.NamedTemporaryFile(suffix=".ply") as tmp:
            io_utils.write_ply_mesh(tmp.name, mesh.vertices, mesh.faces,
                                    colors=mesh.colors, labels=mesh.labels)
            snapshot.mesh_cache[key] = Path(tmp.name).read_bytes()
    return snapshot.mesh_cache[key]


def _orbit_for_mesh(snapshot, n=12):
    scene = snapshot.scene
    center = scene.centers.mean(axis=0)
    radius = 2.5 * max(float(np.linalg.norm(
        scene.centers - center, axis=1).max()), 1e-3)
    base = snapshot.home_camera
    cams = []
    for k in range(n):
        a = 2 * math.pi * k / n
        eye = center + radius * np.array(
            [math.cos(a) * 0.9, math.sin(a) * 0.9, 0.55])
        fwd = center - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(np.array([0.0, 0.0, 1.0]), fwd)
        nrm = np.linalg.norm(right)
        if nrm < 1e-9:
            right = np.array([1.0, 0.0, 0.0])
        else:
            right /= nrm
        down = np.cross(fwd, right)
        w2c = np.eye(4)
        w2c[:3, :3] = np.stack([right, down, fwd])
        w2c[:3, 3] = -w2c[:3, :3] @ eye
        cams.append(Camera(fx=base.fx, fy=base.fy, cx=base.cx, cy=base.cy,
                           width=base.width, height=base.height,
                           world_to_camera=w2c))
    return cams


# ---------------------------------------------------------------------------
# app factory


def create_app(snapshot: SceneSnapshot, static_dir=None) -> FastAPI:
    app = FastAPI(title="surfsplat viewer service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["GET"], allow_headers=["*"])

    def error(status, message):
        return JSONResponse(status_code=status, content={"error": message})

    @app.get("/api/info")
    def info():
        scene = snapshot.scene
        cam = snapshot.home_camera
        body = {
            "primitive_count": len(scene),
            "feature_dim": scene.feature_dim,
            "queries": sorted(snapshot.queries),
            "has_head": snapshot.head is not None,
            "bounds": {"min": scene.centers.min(axis=0).tolist(),
                       "max": scene.centers.max(axis=0).tolist()},
            "home_pose": cam.world_to_camera[:3, :].reshape(-1).tolist(),
            "home_size": [cam.width, cam.height],
            "snapshot_hash": snapshot.content_hash,
        }
        return JSONResponse(content=body,
                            headers={"ETag": snapshot.etag("info")})

    @app.get("/api/render")
    def render(pose: str, fov: float = 60.0, w: int = 256, h: int = 256,
               channel: str = "color", query: str = Query(default=""),
               threshold: float = ovseg.DEFAULT_THRESHOLD):
        if channel not in RENDER_CHANNELS:
            return error(400, f"channel must be one of {RENDER_CHANNELS}")
        try:
            camera = _camera_for_request(_parse_pose(pose), fov, w, h)
        except ValueError as exc:
            return error(400, str(exc))
        try:
            img = _render_channel(snapshot, camera, channel, query, threshold)
        except KeyError:
            return error(404, f"unknown query name {query!r}")
        except Exception as exc:  # noqa: BLE001 - render failure funnel
            return error(500, f"render failed: {exc}")
        etag = snapshot.etag("render", pose, fov, w, h, channel, query,
                             threshold)
        return Response(content=_png_bytes(img), media_type="image/png",
                        headers={"ETag": etag})

    @app.get("/api/query")
    def query_endpoint(name: str, threshold: float = ovseg.DEFAULT_THRESHOLD):
        if name not in snapshot.queries:
            return error(404, f"unknown query name {name!r}")
        if not -1.0 <= threshold <= 1.0:
            return error(400, "threshold must lie in [-1, 1]")
        q = ovseg.QueryEmbedding(name, snapshot.queries[name])
        result = ovseg.select_and_render(snapshot.scene, q, threshold,
                                         snapshot.home_camera)
        mask = result.masks[0]
        scores = result.scores
        hist, edges = np.histogram(scores, bins=20, range=(-1.0, 1.0))
        body = {
            "name": name, "threshold": threshold,
            "selected": int(len(result.indices)),
            "total": len(snapshot.scene),
            "empty": bool(result.empty),
            "mask_pixels": int(mask.sum()),
            "score_histogram": {"counts": hist.tolist(),
                                "edges": edges.tolist()},
            "mask_png_base64": base64.b64encode(
                _png_bytes(mask.astype(np.float64))).decode(),
        }
        return JSONResponse(content=body,
                            headers={"ETag": snapshot.etag("query", name,
                                                           threshold)})

    @app.get("/api/mesh")
    def mesh(semantic: int = 0):
        try:
            data = _mesh_ply_bytes(snapshot, bool(semantic))
        except ValueError as exc:
            return error(400, str(exc))
        return Response(content=data, media_type="application/octet-stream",
                        headers={"ETag": snapshot.etag("mesh", int(bool(semantic))),
                                 "Content-Disposition":
                                     "attachment; filename=scene.ply"})

    if static_dir is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        static_dir = bundled if bundled.is_dir() else None
    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="ui")
    return app
