"""Command-line entry point.

Subcommands: gen-synth, train, infer-pose, eval, export-mesh,
render-debug. Exit codes: 0 success, 1 usage error, 2 data or validation
error. Progress is logged one event per line (timestamp, stage, loss
components); report files themselves carry no timestamps so identical
runs produce identical bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np


def _log_line(stream, **kv):
    ts = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    parts = [ts] + [f"{k}={v}" for k, v in kv.items()]
    line = " ".join(parts)
    print(line)
    if stream:
        stream.write(line + "\n")
        stream.flush()


def _build_parser():
    p = argparse.ArgumentParser(prog="tetramorph",
                                description="morphable 3D shape models with "
                                            "neural vertex features")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen-synth", help="generate a synthetic category dataset")
    g.add_argument("--family", required=True)
    g.add_argument("--videos", type=int, required=True)
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--feat-size", type=int, default=32)
    g.add_argument("--feature-dim", type=int, default=128)

    t = sub.add_parser("train", help="train a category model (both stages)")
    t.add_argument("--config", default=None)
    t.add_argument("--category", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--dataset", default=None, help="dataset root (overrides config)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--threads", type=int, default=None)

    i = sub.add_parser("infer-pose", help="estimate object rotation for one view")
    i.add_argument("--model", required=True)
    i.add_argument("--features", required=True)
    i.add_argument("--out-pose", default=None)
    i.add_argument("--camera", default=None,
                   help="pose file supplying translation/intrinsics "
                        "(defaults to the model directory's camera.txt)")
    i.add_argument("--starts", type=int, default=None)
    i.add_argument("--steps", type=int, default=None)

    e = sub.add_parser("eval", help="evaluate pose, segmentation, and transfer")
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", required=True, help="category directory")
    e.add_argument("--report", required=True)
    e.add_argument("--views", type=int, default=None)
    e.add_argument("--starts", type=int, default=None)
    e.add_argument("--steps", type=int, default=None)
    e.add_argument("--holdout-only", action="store_true",
                   help="restrict to the training hold-out split")

    x = sub.add_parser("export-mesh", help="write the template surface as OBJ")
    x.add_argument("--model", required=True)
    x.add_argument("--out", required=True)

    r = sub.add_parser("render-debug", help="write mask / feature visualizations")
    r.add_argument("--model", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--features", default=None)
    r.add_argument("--camera", default=None)
    return p


def _model_path(arg):
    p = Path(arg)
    return p / "model.mcm" if p.is_dir() else p


def _camera_from_file(path):
    from .data import read_mask_pgm, read_pose_txt

    lines = Path(path).read_text().strip().splitlines()
    if len(lines) >= 3:
        h, w = (int(v) for v in lines[2].split())
    else:
        h = w = 64
    return read_pose_txt(path, h, w)


def _write_camera_file(path, pose):
    from .data import write_pose_txt

    write_pose_txt(path, pose)
    with open(path, "a") as fh:
        fh.write(f"{pose.height} {pose.width}\n")


def _cmd_gen_synth(args):
    from .data import SyntheticSpec, gen_synthetic

    spec = SyntheticSpec(family=args.family, n_videos=args.videos,
                         frames=args.frames, seed=args.seed,
                         image_size=args.image_size, feat_size=args.feat_size,
                         feature_dim=args.feature_dim)
    cat, records = gen_synthetic(args.out, spec)
    n = sum(len(r.samples) for r in records)
    _log_line(None, command="gen-synth", category=str(cat), videos=len(records),
              samples=n)
    return 0


def _cmd_train(args):
    from .config import Config, load_config
    from .data import DataError, load_dataset
    from .model import new_model, save_model
    from .train import train_joint, train_template

    cfg = load_config(args.config) if args.config else Config()
    if args.dataset is not None:
        cfg.dataset = args.dataset
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if not cfg.dataset:
        raise DataError("no dataset root: pass --dataset or set it in the config")
    category_dir = Path(cfg.dataset) / args.category
    records = load_dataset(category_dir)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.as_text())
    log_fh = open(out / "train_log.txt", "a")

    sample0 = records[0].samples[0]
    if cfg.backbone_channels != sample0.feature_map.shape[0]:
        raise DataError(
            f"config backbone_channels={cfg.backbone_channels} but dataset "
            f"feature maps have {sample0.feature_map.shape[0]} channels")
    _write_camera_file(out / "camera.txt", sample0.pose)

    model = new_model(cfg.field_spec(), grid_resolution=cfg.grid_resolution,
                      seed=cfg.seed, temperature=cfg.temperature,
                      vertex_samples=cfg.vertex_samples)
    tc = cfg.train_config()
    log = lambda event: _log_line(log_fh, **event)
    ck1 = train_template(records, tc, model, log=log)
    ck1.save(out / "checkpoint_template.mcm")
    _log_line(log_fh, stage="template", event="done",
              holdout_loss=round(ck1.holdout_loss, 6), epoch=ck1.epoch)
    ck2 = train_joint(records, tc, ck1, log=log)
    ck2.save(out / "checkpoint_joint.mcm")
    save_model(ck2.model, out / "model.mcm")
    _log_line(log_fh, stage="joint", event="done",
              holdout_loss=round(ck2.holdout_loss, 6), epoch=ck2.epoch)
    log_fh.close()
    return 0


def _cmd_infer_pose(args):
    from .data import DataError, read_feature_map, write_pose_txt
    from .camera import CameraPose
    from .infer import estimate_pose
    from .model import load_model

    model = load_model(_model_path(args.model))
    fmap = read_feature_map(args.features)
    cam_file = args.camera
    if cam_file is None:
        cand = Path(args.model)
        cand = cand if cand.is_dir() else cand.parent
        cam_file = cand / "camera.txt"
        if not Path(cam_file).exists():
            raise DataError("no camera convention found: pass --camera or keep "
                            "camera.txt next to the model")
    pose = _camera_from_file(cam_file)
    kw = {}
    if args.starts is not None:
        kw["n_starts"] = args.starts
    if args.steps is not None:
        kw["steps"] = args.steps
    hyp = estimate_pose(model, fmap, pose, **kw)
    _log_line(None, command="infer-pose", score=round(hyp.score, 6),
              rotation=",".join(f"{v:.6f}" for v in hyp.rotation))
    if args.out_pose:
        out_pose = CameraPose.from_matrix(hyp.matrix, pose.translation,
                                          pose.fx, pose.fy, pose.cx, pose.cy,
                                          pose.height, pose.width)
        write_pose_txt(args.out_pose, out_pose)
    return 0


def _format_report_table(report):
    lines = ["video      frame  rot_err_deg      iou"]
    for r in report["samples"]:
        lines.append(f"{r['video']:<10} {r['frame']:>5}  "
                     f"{r['rotation_error_deg']:>11.3f}  {r['iou']:>7.4f}")
    s = report["summary"]
    lines.append("")
    lines.append(f"views={s['views']} acc30={s['acc30']} acc10={s['acc10']} "
                 f"mean_iou={s['mean_iou']} pck={s['pck']}")
    return "\n".join(lines) + "\n"


def _cmd_eval(args):
    from .data import load_dataset, load_synthetic_meta, split_holdout
    from .infer import evaluate
    from .model import load_model

    model = load_model(_model_path(args.model))
    records = load_dataset(args.dataset)
    if args.holdout_only:
        _, records = split_holdout(records)
    meta = load_synthetic_meta(args.dataset)
    rep = evaluate(model, records,
                   n_views=args.views, synthetic_meta=meta,
                   **{k: v for k, v in
                      (("n_starts", args.starts), ("steps", args.steps))
                      if v is not None},
                   progress=lambda msg: _log_line(None, command="eval", info=msg))
    Path(args.report).write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n")
    sys.stdout.write(_format_report_table(rep))
    return 0


def _cmd_export_mesh(args):
    from .autodiff import Tape
    from .model import load_model
    from .tetgrid import export_obj

    model = load_model(_model_path(args.model))
    mesh, _ = model.template_mesh(Tape(dtype=np.float64))
    export_obj(args.out, mesh.positions, mesh.faces)
    _log_line(None, command="export-mesh", vertices=mesh.vertex_count,
              faces=mesh.face_count, out=args.out)
    return 0


def _cmd_render_debug(args):
    from .autodiff import Tape
    from .data import read_feature_map
    from .camera import CameraPose
    from .infer import render_instance_mask
    from .model import load_model
    from .render import feature_pca_image, rasterize, write_pgm, write_ppm
    from .tetgrid import Mesh

    model = load_model(_model_path(args.model))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.camera:
        pose = _camera_from_file(args.camera)
    else:
        pose = CameraPose(np.zeros(3), np.array([0.0, 0.0, 3.0]),
                          56.0, 56.0, 32.0, 32.0, 64, 64)
    tape = Tape(dtype=np.float64)
    bound = model.bind(tape)
    mesh, _ = model.template_mesh(tape, bound)
    verts = mesh.positions.astype(np.float64)
    if args.features:
        fmap = read_feature_map(args.features)
        latent = bound.encode_latent(fmap)
        v_def = bound.deform(verts, latent)
    else:
        v_def = tape.leaf(verts)
    feats = bound.vertex_features(v_def.v)
    dmesh = Mesh(v_def, mesh.faces, mesh.vertex_nodes, mesh.vertex_t, feats)
    render = rasterize(dmesh, pose)
    write_pgm(out / "mask.pgm", render.mask.v)
    write_ppm(out / "features_pca.ppm", feature_pca_image(render))
    _log_line(None, command="render-debug", out=str(out),
              covered=int(render.cov_pixels.size))
    return 0


_COMMANDS = {
    "gen-synth": _cmd_gen_synth,
    "train": _cmd_train,
    "infer-pose": _cmd_infer_pose,
    "eval": _cmd_eval,
    "export-mesh": _cmd_export_mesh,
    "render-debug": _cmd_render_debug,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    from .autodiff import ContractError
    from .data import DataError
    from .serialize import FormatError

    try:
        return _COMMANDS[args.command](args)
    except (DataError, FormatError, ContractError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry():
    # honor --threads before numpy spins up its thread pools
    argv = sys.argv[1:]
    if "--threads" in argv:
        idx = argv.index("--threads")
        if idx + 1 < len(argv):
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS"):
                os.environ.setdefault(var, argv[idx + 1])
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
