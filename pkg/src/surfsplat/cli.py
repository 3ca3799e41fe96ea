"""Command-line entry point covering the whole pipeline:

    surfsplat gen-synthetic  --spec spec.json | --preset two-object  --out dir
    surfsplat train          --data dir --out run/ [ablation + hyperparameter flags]
    surfsplat mesh           --scene ckpt --data dir --out mesh.ply
    surfsplat query          --scene ckpt --data dir --text-name NAME --out masks/
    surfsplat eval           --pred mesh.ply --gt gt.ply
    surfsplat eval-seg       --pred masks/ --gt masks_gt/
    surfsplat serve          --scene ckpt [--data dir] --port 8000

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np


def _add_train_flags(p):
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-interval", type=int)
    for name in ("position-lr-init", "position-lr-final", "position-lr-delay-mult",
                 "feature-lr", "opacity-lr", "scaling-lr", "rotation-lr",
                 "semantic-lr", "mlp-lr", "percent-dense",
                 "densify-grad-threshold", "densify-abs-grad-threshold",
                 "abs-split-radii2d-threshold", "opacity-cull-threshold",
                 "init-opacity", "sensor-depth-weight"):
        p.add_argument(f"--{name}", type=float)
    for name in ("position-lr-delay-steps", "position-lr-max-steps",
                 "densification-interval", "densify-from", "densify-until",
                 "max-abs-split-points", "max-all-points",
                 "opacity-reset-interval"):
        p.add_argument(f"--{name}", type=int)
    for name in ("alpha-n", "alpha-m", "alpha-clip", "alpha-d", "alpha-s",
                 "lambda-dssim"):
        p.add_argument(f"--{name}", type=float)
    p.add_argument("--no-ln", action="store_true", help="disable the normal prior loss")
    p.add_argument("--no-mask", action="store_true", help="disable the mask cross-entropy loss")
    p.add_argument("--no-clip", action="store_true",
                   help="disable the feature loss (also allows datasets without feats/)")
    p.add_argument("--no-ld", action="store_true", help="disable the depth refinement loss")
    p.add_argument("--no-ls", action="store_true", help="disable the smoothness loss")
    p.add_argument("--sensor-depth", action="store_true",
                   help="add the sensor depth term (needs depths/ in the dataset)")


def _build_parser():
    parser = argparse.ArgumentParser(prog="surfsplat")
    parser.add_argument("--verbose", action="store_true",
                        help="JSON-lines progress on stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="generate a synthetic dataset")
    g.add_argument("--spec", help="scene spec JSON")
    g.add_argument("--preset", choices=["two-object"])
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--views", type=int, default=16)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--feature-dim", type=int, default=8)
    g.add_argument("--prior-noise", type=float, default=0.0)
    g.add_argument("--lighting", type=float, default=0.0)
    g.add_argument("--with-sensor-depth", action="store_true")

    t = sub.add_parser("train", help="optimize a scene against a dataset")
    _add_train_flags(t)

    m = sub.add_parser("mesh", help="fuse rendered depths and extract a mesh")
    m.add_argument("--scene", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--semantic", action="store_true")
    m.add_argument("--head", help="classifier head .npz (default: next to --scene)")
    m.add_argument("--biased-depth", action="store_true",
                   help="fuse the raw blended depth instead of the unbiased one")
    m.add_argument("--resolution", type=int, default=256)

    q = sub.add_parser("query", help="select primitives by text embedding")
    q.add_argument("--scene", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--text-name", required=True)
    q.add_argument("--threshold", type=float, default=0.6)
    q.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="mesh metrics against a ground-truth mesh")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--tau", type=float, default=0.05)
    e.add_argument("--samples", type=int, default=10000)
    e.add_argument("--out", help="write the metric table JSON here too")

    s = sub.add_parser("eval-seg", help="mIoU/mBIoU between mask directories")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--boundary-width", type=int, default=3)
    s.add_argument("--out")

    v = sub.add_parser("serve", help="read-only HTTP viewer over a checkpoint")
    v.add_argument("--scene", required=True)
    v.add_argument("--data", help="dataset root for text queries and a home pose")
    v.add_argument("--head")
    v.add_argument("--port", type=int, default=8000)
    v.add_argument("--bind", default="127.0.0.1")
    return parser


def _cmd_gen_synthetic(args):
    from . import synthetic
    from .priors import write_dataset
    from . import io_utils

    if args.spec:
        spec = synthetic.SyntheticSceneSpec.from_json(
            json.loads(Path(args.spec).read_text()))
    else:
        spec = synthetic.two_object_spec(
            feature_dim=args.feature_dim, n_views=args.views, size=args.size,
            lighting_amplitude=args.lighting, prior_noise=args.prior_noise,
            with_sensor_depth=args.with_sensor_depth)
    dataset, gt = synthetic.generate_synthetic(spec, seed=args.seed)
    out = Path(args.out)
    write_dataset(dataset, out, top_k=spec.top_k)
    (out / "scene_spec.json").write_text(json.dumps(spec.to_json(), indent=1))
    io_utils.write_ply_mesh(out / "gt_mesh.ply", gt.mesh_vertices, gt.mesh_faces,
                            labels=gt.mesh_labels)
    for oid in sorted(gt.object_masks[0]):
        mdir = out / "gtmasks" / f"object{oid}"
        mdir.mkdir(parents=True, exist_ok=True)
        for v, masks in enumerate(gt.object_masks):
            io_utils.write_png(mdir / f"{v:04}.png",
                               masks[oid].astype(np.float64))
    print(f"wrote {len(dataset.cameras)} views to {out}")
    return 0


def _cmd_train(args):
    from .priors import load_dataset
    from .trainer import TrainConfig, train

    cfg = TrainConfig()
    weight_names = {f.name for f in dc_fields(cfg.weights)}
    for f in dc_fields(cfg):
        val = getattr(args, f.name, None)
        if val is not None and f.name != "weights":
            setattr(cfg, f.name, val)
    for name in weight_names:
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg.weights, name, val)
    cfg.use_normal_loss = not args.no_ln
    cfg.use_mask_loss = not args.no_mask
    cfg.use_clip_loss = not args.no_clip
    cfg.use_depth_loss = not args.no_ld
    cfg.use_smooth_loss = not args.no_ls
    cfg.use_sensor_depth = args.sensor_depth

    dataset = load_dataset(args.data, no_clip=args.no_clip)
    result = train(dataset, cfg, out_dir=args.out)
    if args.verbose:
        for rec in result.log:
            print(json.dumps(rec))
    last = result.log[-1] if result.log else {}
    print(f"trained {cfg.iterations} iterations, "
          f"{len(result.scene)} primitives, "
          f"final total loss {last.get('total', 0.0):.4f}")
    return 0


def _load_head(args, scene_path):
    from .losses import ClassifierHead

    head_path = args.head or str(Path(scene_path).with_name(
        Path(scene_path).stem + "_head.npz"))
    if not Path(head_path).exists():
        raise FileNotFoundError(f"classifier head not found at {head_path}")
    arrs = np.load(head_path)
    return ClassifierHead.from_arrays(arrs["weight"], arrs["bias"])


def _cmd_mesh(args):
    from . import io_utils, tsdf
    from .priors import load_dataset
    from .scene import Scene

    scene = Scene.load(args.scene)
    dataset = load_dataset(args.data, no_clip=True)
    head = _load_head(args, args.scene) if args.semantic else None
    bounds = (dataset.init_points.min(axis=0), dataset.init_points.max(axis=0))
    mesh = tsdf.extract_scene_mesh(
        scene, dataset.cameras, use_unbiased=not args.biased_depth,
        semantic=args.semantic, head=head, resolution=args.resolution,
        bounds=bounds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io_utils.write_ply_mesh(out, mesh.vertices, mesh.faces,
                            colors=mesh.colors, labels=mesh.labels)
    if args.semantic:
        out.with_suffix(".palette.json").write_text(json.dumps(
            {"palette": tsdf.DEFAULT_PALETTE.tolist()}))
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} faces to {out}")
    return 0


def _cmd_query(args):
    from . import io_utils, ovseg
    from .priors import load_dataset
    from .scene import Scene

    scene = Scene.load(args.scene)
    dataset = load_dataset(args.data, no_clip=True)
    if args.text_name not in dataset.text_queries:
        known = ", ".join(sorted(dataset.text_queries)) or "(none)"
        raise KeyError(f"unknown text query {args.text_name!r}; dataset has {known}")
    query = ovseg.QueryEmbedding(args.text_name,
                                 dataset.text_queries[args.text_name])
    result = ovseg.select_and_render(scene, query, args.threshold,
                                     dataset.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v, mask in enumerate(result.masks):
        io_utils.write_png(out / f"{v:04}.png", mask.astype(np.float64))
    (out / "selection.json").write_text(json.dumps({
        "query": args.text_name, "threshold": args.threshold,
        "selected": int(len(result.indices)), "total": len(scene),
        "empty": bool(result.empty)}))
    print(f"selected {len(result.indices)}/{len(scene)} primitives, "
          f"wrote {len(result.masks)} masks to {out}")
    return 0


def _cmd_eval(args):
    from . import io_utils, metrics

    pv, pf, _, _ = io_utils.read_ply_mesh(args.pred)
    gv, gf, _, _ = io_utils.read_ply_mesh(args.gt)
    mm = metrics.mesh_metrics((pv, pf), (gv, gf), sample_count=args.samples,
                              tau=args.tau)
    table = mm.as_dict()
    print(json.dumps(table, indent=1))
    if args.out:
        Path(args.out).write_text(json.dumps(table, indent=1))
    return 0


def _read_mask_dir(path):
    from . import io_utils

    files = sorted(p for p in Path(path).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no .png masks under {path}")
    masks = {}
    for p in files:
        img = io_utils.read_png(p)
        if img.ndim == 3:
            img = img.mean(axis=-1)
        masks[p.name] = img > 0.5
    return masks


def _cmd_eval_seg(args):
    from . import ovseg

    pred = _read_mask_dir(args.pred)
    gt = _read_mask_dir(args.gt)
    common = sorted(set(pred) & set(gt))
    if not common:
        raise ValueError("pred and gt mask directories share no filenames")
    miou, mbiou = ovseg.miou_mbiou([pred[k] for k in common],
                                   [gt[k] for k in common],
                                   boundary_width=args.boundary_width)
    table = {"miou": miou, "mbiou": mbiou, "views": len(common)}
    print(json.dumps(table, indent=1))
    if args.out:
        Path(args.out).write_text(json.dumps(table, indent=1))
    return 0


def _cmd_serve(args):
    import uvicorn

    from .service import load_snapshot, create_app

    snapshot = load_snapshot(args.scene, head_path=args.head,
                             data_root=args.data)
    app = create_app(snapshot)
    uvicorn.run(app, host=args.bind, port=args.port, log_level="info")
    return 0


_HANDLERS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "train": _cmd_train,
    "mesh": _cmd_mesh,
    "query": _cmd_query,
    "eval": _cmd_eval,
    "eval-seg": _cmd_eval_seg,
    "serve": _cmd_serve,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    # dashed flags arrive underscored; dataclass field names match after that
    try:
        return _HANDLERS[args.command](args)
    except (KeyboardInterrupt,):
        return 1
    except Exception as exc:  # noqa: BLE001 - single CLI failure funnel
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
