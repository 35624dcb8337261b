"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import checks, nn
from . import descriptor as D
from . import pipeline as P
from . import retrieval as RT
from .errors import ConfigError, DataError, NumericalError, SemlocError
from .geom import pose_error
from .renderer import render
from .scene import load_dataset, save_dataset

log = logging.getLogger("semloc")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config(args) -> P.Config:
    return P.load_config(args.config) if getattr(args, "config", None) else P.Config()


def _dataset(path, load_frames=True):
    if not Path(path, "scene.json").is_file():
        raise DataError(f"{path}: not a dataset directory (scene.json missing)")
    return load_dataset(path, load_frames=load_frames)


def _model(args, ds) -> P.Model:
    if not Path(args.ckpt).is_file():
        raise DataError(f"checkpoint not found: {args.ckpt}")
    expected = D.build_model(ds.scene.n_classes)
    store, meta = nn.load_checkpoint(args.ckpt, expected)
    if "epsilon_db" not in meta:
        raise DataError(f"{args.ckpt}: metadata lacks epsilon_db")
    return P.Model.prepare(store, meta["epsilon_db"], ds)


def _query(ds, index):
    n = len(ds.split.query_frames)
    if not 0 <= index < n:
        raise ConfigError(f"query index {index} out of range [0, {n})")
    return ds.split.query_frames[index], ds.split.query_poses[index]


def cmd_config(args):
    sys.stdout.write(P.default_config_text())


def cmd_gen(args):
    cfg = _config(args)
    ds = P.build(cfg)
    save_dataset(args.out, ds)
    print(f"scene: {len(ds.scene)} primitives, {ds.scene.n_instances} instances; "
          f"{len(ds.split.train_poses)} train / {len(ds.split.query_poses)} query frames; "
          f"{len(ds.submaps)} submaps -> {args.out}")


def cmd_train(args):
    cfg = _config(args)
    ds = _dataset(args.data)
    res = RT.train_retrieval(ds, ds.submaps, cfg.train)
    nn.save_checkpoint(args.out, res.store, res.metadata)
    print(f"loss {res.history[0]:.4f} -> {res.history[-1]:.4f}; epsilon {res.epsilon_db:.3f} dB -> {args.out}")


def cmd_retrieve(args):
    ds = _dataset(args.data)
    model = _model(args, ds)
    frame, _ = _query(ds, args.query)
    qd = D.describe_image(model.store, RT.image_inputs(frame, ds))
    cands = RT.retrieve_topk(qd, model.submap_desc, ds.submaps, args.k)
    scored = RT.psnr_gate(cands, frame, ds.scene, ds.split.intr, -np.inf)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["submap_id", "cosine", "psnr"])
    for c in scored:
        w.writerow([c.submap_id, repr(c.score), repr(c.psnr)])


def cmd_localize(args):
    cfg = _config(args)
    ds = _dataset(args.data)
    model = _model(args, ds)
    frame, gt = _query(ds, args.query)
    loc = P.localize(model, ds, frame, cfg, query_index=args.query)
    print("candidate,submap_id,cosine,gate_psnr,final_trans_cm,final_rot_deg,final_psnr")
    for i, c in enumerate(loc.candidates):
        if loc.traces:
            t, r = pose_error(loc.traces[i].final_pose, gt)
            fp = loc.traces[i].final_psnr
        else:
            (t, r), fp = pose_error(c.pose, gt), c.psnr
        print(f"{i},{c.submap_id},{c.score:.6f},{c.psnr:.4f},{100 * t:.4f},{r:.4f},{fp:.4f}")
    t, r = pose_error(loc.pose, gt)
    print(f"selected candidate {loc.selected}: trans {100 * t:.3f} cm, rot {r:.4f} deg")
    print("pose " + " ".join(repr(v) for v in loc.pose.to_list()))
    if args.trace and loc.traces:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "L", "L_pixel", "L_match", "trans_err", "rot_err"])
            for it, e in enumerate(loc.traces[loc.selected].entries):
                et, er = pose_error(e.pose, gt)
                w.writerow([it, repr(e.loss), repr(e.loss_pixel), repr(e.loss_match), repr(et), repr(er)])


def cmd_eval(args):
    cfg = _config(args)
    if args.coarse_only:
        cfg.eval.coarse_only = True
    ds = _dataset(args.data)
    model = _model(args, ds)
    init = P.load_poses(args.init_from) if args.init_from else None
    report = P.evaluate(ds, model, cfg, init_poses=init)
    report.write(args.out)
    sys.stdout.write(report.summary())


def cmd_perturb(args):
    ds = _dataset(args.data, load_frames=False)
    diag = ds.scene.diagonal
    poses = P.perturb_poses(ds.split.query_poses, tuple(args.rot_deg),
                            (args.trans_frac[0] * diag, args.trans_frac[1] * diag), seed=args.seed)
    P.save_poses(args.out, poses)
    print(f"{len(poses)} perturbed query poses -> {args.out}")


def cmd_render(args):
    ds = _dataset(args.data, load_frames=False)
    poses = ds.split.query_poses if args.split == "query" else ds.split.train_poses
    if not 0 <= args.index < len(poses):
        raise ConfigError(f"{args.split} index {args.index} out of range [0, {len(poses)})")
    frame = render(ds.scene.splats, poses[args.index], ds.split.intr)
    rgb = np.clip(np.rint(frame.rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb).save(args.out)
    print(f"{args.split}/{args.index} -> {args.out}")


def cmd_gradcheck(args):
    ds = _dataset(args.data) if args.data else P.build(P.Config())
    res = checks.gradient_suite(ds, render_cases=args.cases, n_coords=args.coords)
    limits = {"model": 1e-5, "render": 1e-2, "refine": 1e-2}
    ok = True
    for k, v in res.items():
        good = v < limits[k]
        ok &= good
        print(f"{k}: max rel err {v:.3e} (limit {limits[k]:.0e}) {'ok' if good else 'FAIL'}")
    if not ok:
        raise NumericalError("gradient check failed")


def cmd_descriptors(args):
    ds = _dataset(args.data)
    model = _model(args, ds)
    w = csv.writer(sys.stdout if args.out == "-" else open(args.out, "w", newline=""),
                   lineterminator="\n")
    d = model.submap_desc.shape[1]
    w.writerow(["source", "source_id"] + [f"f{i}" for i in range(d)])
    for s, v in zip(ds.submaps, model.submap_desc):
        w.writerow(["submap", s.id] + [repr(float(x)) for x in v])
    for i, f in enumerate(ds.split.query_frames):
        v = D.describe_image(model.store, RT.image_inputs(f, ds))
        w.writerow(["image", i] + [repr(float(x)) for x in v])


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semloc", description="Semantic Gaussian-splat localization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("config", help="print the default configuration file")
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("gen", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", help="train the retrieval model")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_train)

    for name, func, extra in (("retrieve", cmd_retrieve, True), ("localize", cmd_localize, False)):
        s = sub.add_parser(name, help=f"{name} one query frame")
        s.add_argument("--data", required=True)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--query", type=int, required=True)
        if extra:
            s.add_argument("--k", type=int, default=5)
        else:
            s.add_argument("--config")
            s.add_argument("--trace", help="write the selected candidate's trace as CSV")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="localize every query and write a report")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--config")
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--coarse-only", action="store_true")
    mode.add_argument("--init-from", help="JSON pose file with one initial pose per query")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("perturb", help="write perturbed query poses for --init-from")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rot-deg", type=float, nargs=2, default=(30.0, 45.0), metavar=("LO", "HI"))
    s.add_argument("--trans-frac", type=float, nargs=2, default=(0.5, 0.6), metavar=("LO", "HI"),
                   help="camera offset range as a fraction of the room diagonal")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("render", help="render a dataset pose to PNG")
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "query"), default="query")
    s.add_argument("--index", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    s.add_argument("--data", help="dataset directory (default: generate the default scene)")
    s.add_argument("--cases", type=int, default=20)
    s.add_argument("--coords", type=int, default=256)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("descriptors", help="dump submap and query descriptors as CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_descriptors)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except SemlocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
