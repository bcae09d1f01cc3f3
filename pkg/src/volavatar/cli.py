"""Command-line entry point: ``volavatar <subcommand> ...``."""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys

import numpy as np

# section of the config file that each subcommand reads
_SECTION = {"train": "train", "train-mapping": "train", "register": "register", "track": "track"}


class CliError(RuntimeError):
    pass


def read_config(path):
    """``key = value`` text file with optional ``[train]``/``[track]``/``[register]`` sections.

    Keys before any section header belong to ``[train]``. Values are
    parsed as JSON when possible (numbers, lists, objects), else kept as
    strings.
    """
    with open(path) as fh:
        text = fh.read()
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string("[train]\n" + text)
    out = {}
    for sec in cp.sections():
        d = {}
        for k, v in cp.items(sec):
            try:
                d[k] = json.loads(v)
            except json.JSONDecodeError:
                d[k] = v
        out[sec] = d
    return out


def _build_parser():
    p = argparse.ArgumentParser(prog="volavatar", description="Volumetric deformable avatar toolkit.")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", help="text config file (key = value, optional [train]/[track]/[register] sections)")
    p.add_argument("--threads", type=int, help="worker threads for compiled kernels")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--preset", choices=("jaw_head", "rigid_blob"), default="jaw_head")
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True)

    s = sub.add_parser("register", help="fit the parametric model to a scan and transfer the rig")
    s.add_argument("--model", required=True, help="parametric model rig file")
    s.add_argument("--scan", required=True, help="scan mesh (OBJ)")
    s.add_argument("--landmarks", required=True, help="scan landmark positions, one 'x y z' per line")
    s.add_argument("--out", required=True, help="output template rig")

    s = sub.add_parser("track", help="track pose and expression in every frame")
    s.add_argument("--data", required=True, help="dataset directory or manifest")
    s.add_argument("--out", help="tracks file (default <data>/tracks.txt)")
    s.add_argument("--iters", type=int)

    s = sub.add_parser("train", help="train the avatar")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output directory (checkpoint and loss CSV)")
    s.add_argument("--iterations", type=int)
    s.add_argument("--mode", help="ablation mode (FULL, NO_DEFORMATION_FIELD, ...)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--ground-truth", action="store_true", help="use the generator's true parameters as tracks")

    s = sub.add_parser("train-mapping", help="fit the weight mapping network")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="output checkpoint (default: overwrite input)")
    s.add_argument("--ground-truth", action="store_true")

    s = sub.add_parser("render", help="render one image from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--pose", required=True, help="tracks file holding the pose")
    s.add_argument("--camera", required=True, help="camera file (manifest grammar)")
    s.add_argument("--frame", type=int, help="frame id in the pose file (default: first record)")
    s.add_argument("--camera-index", type=int, default=0)
    s.add_argument("--weights", choices=("auto", "stored", "mapped", "zero"), default="auto")
    s.add_argument("--out", required=True, help="output PNG")

    s = sub.add_parser("animate", help="render a pose trajectory")
    s.add_argument("--checkpoint", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--poses", help="tracks file with one pose per output frame")
    g.add_argument("--expressions", help="text file, one 'jaw_x jaw_y jaw_z psi_0 ... psi_n' row per frame")
    s.add_argument("--camera", required=True)
    s.add_argument("--camera-index", type=int, default=0)
    s.add_argument("--weights", choices=("auto", "stored", "mapped", "zero"), default="mapped")
    s.add_argument("--out", required=True, help="output directory for numbered PNGs")

    s = sub.add_parser("eval", help="metrics table (CSV) against ground-truth images")
    s.add_argument("--data", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--pred", help="directory of predicted PNGs named like the dataset images")
    s.add_argument("--split", choices=("train", "test", "all"), default="all")
    s.add_argument("--weights", choices=("auto", "stored", "mapped", "zero"), default="auto")
    s.add_argument("--ground-truth", action="store_true")
    s.add_argument("--out", help="CSV path (default: standard output)")
    return p


def _train_config(args, section):
    from .training import TrainConfig
    kw = dict(section)
    kw["seed"] = args.seed
    if getattr(args, "iterations", None):
        kw["iterations"] = args.iterations
    if getattr(args, "mode", None):
        kw["mode"] = args.mode
    return TrainConfig.from_dict(kw)


def _dataset(args):
    from .dataio import load_dataset
    from .training import use_ground_truth
    ds = load_dataset(args.data)
    if getattr(args, "ground_truth", False):
        use_ground_truth(ds)
    return ds


def _cmd_synth(args, cfg):
    from .synth import synth_generate
    ds = synth_generate(args.preset, args.frames, args.seed, args.out, size=args.size)
    print(f"wrote {len(ds)} frames to {args.out}")


def _cmd_register(args, cfg):
    from .body_model import load_rig, save_rig
    from .geometry import load_mesh
    from .registration import RegistrationConfig, chamfer_after, register
    rc = RegistrationConfig(**cfg)
    model = load_rig(args.model)
    scan = load_mesh(args.scan)
    lm = np.loadtxt(args.landmarks, ndmin=2)
    res, template = register(model, scan, lm, rc)
    save_rig(template, args.out)
    print(f"chamfer {chamfer_after(model, res, scan):.3e}; template written to {args.out}")


def _cmd_track(args, cfg):
    from .body_model import load_rig
    from .dataio import load_dataset, save_dataset
    from .tracking import TrackConfig, TrackInput, track_sequence
    tc = TrackConfig(**cfg)
    if args.iters:
        tc.iters = args.iters
    ds = load_dataset(args.data)
    rig = load_rig(ds.rig_path())
    frames = sorted([f for f in ds.frames if f.landmarks is not None], key=lambda f: f.index)
    if not frames:
        raise CliError("no frames carry landmarks")
    inputs = (TrackInput(f.index, f.camera, ds.image(f), f.landmarks) for f in frames)
    out = args.out or os.path.join(ds.root, "tracks.txt")
    track_sequence(rig, inputs, tc, path=out)
    ds.tracks = os.path.relpath(os.path.abspath(out), ds.root)
    save_dataset(ds)
    print(f"tracked {len(frames)} frames -> {out}")


def _cmd_train(args, cfg):
    from .training import train
    ds = _dataset(args)
    config = _train_config(args, cfg)
    tr = train(ds, config, out_dir=args.out, log=lambda m: print(m, file=sys.stderr), resume=args.resume)
    print(f"trained {tr.iteration} iterations; checkpoint in {args.out}")


def _cmd_train_mapping(args, cfg):
    from .training import load_avatar, save_avatar, train_mapping
    avatar, _, meta = load_avatar(args.checkpoint)
    for k, v in cfg.items():
        if k.startswith("mapping_"):
            setattr(avatar.config, k, v)
    ds = _dataset(args)
    train_mapping(avatar, ds)
    out = args.out or args.checkpoint
    save_avatar(out, avatar, iteration=meta.get("iteration", 0))
    print(f"mapping network written to {out}")


def _pose_records(path):
    from .tracking import load_tracks
    return load_tracks(path)


def _camera(args):
    from .dataio import load_cameras
    cams = load_cameras(args.camera)
    if not 0 <= args.camera_index < len(cams):
        raise CliError(f"camera index {args.camera_index} out of range ({len(cams)} cameras)")
    return cams[args.camera_index]


class _Frame:
    def __init__(self, index, camera, params, category):
        self.index, self.camera, self.params, self.category = index, camera, params, category


def _cmd_render(args, cfg):
    from .dataio import FrameCategory, write_image
    from .training import load_avatar, render_frame
    avatar, _, _ = load_avatar(args.checkpoint)
    recs = _pose_records(args.pose)
    if args.frame is None:
        rec = recs[0]
    else:
        rec = next((r for r in recs if r.frame == args.frame), None)
        if rec is None:
            raise CliError(f"frame {args.frame} not in {args.pose}")
    img, _ = render_frame(avatar, _Frame(rec.frame, _camera(args), rec.params, FrameCategory.TALKING_FRONTAL),
                          args.weights)
    write_image(args.out, img)
    print(f"wrote {args.out}")


def _cmd_animate(args, cfg):
    from .body_model import PoseParams
    from .dataio import FrameCategory, write_image
    from .training import load_avatar, render_frame
    avatar, _, _ = load_avatar(args.checkpoint)
    cam = _camera(args)
    rig = avatar.rig
    if args.poses:
        poses = [(r.frame, r.params) for r in _pose_records(args.poses)]
    else:
        rows = np.loadtxt(args.expressions, ndmin=2)
        if rows.shape[1] < 3:
            raise CliError("expression rows need at least the three jaw angles")
        poses = []
        for i, r in enumerate(rows):
            psi = np.zeros(rig.n_expr)
            k = min(rig.n_expr, len(r) - 3)
            psi[:k] = r[3:3 + k]
            poses.append((i, PoseParams(np.zeros((rig.n_body_joints, 3)), r[:3], np.zeros(rig.n_shape), psi)))
    os.makedirs(args.out, exist_ok=True)
    for n, (fid, params) in enumerate(poses):
        img, _ = render_frame(avatar, _Frame(fid, cam, params, FrameCategory.TALKING_FRONTAL), args.weights)
        write_image(os.path.join(args.out, f"{n:05d}.png"), img)
    print(f"wrote {len(poses)} frames to {args.out}")


EVAL_FIELDS = ("frame", "split", "category", "l1", "psnr", "ssim", "lpips")


def _cmd_eval(args, cfg):
    from .dataio import read_image
    from .metrics import metric_l1, metric_psnr, metric_ssim
    from .training import evaluate_frames, load_avatar
    ds = _dataset(args)
    frames = ds.frames if args.split == "all" else ds.split(args.split)
    if not frames:
        raise CliError(f"no frames in split {args.split!r}")
    if args.checkpoint:
        avatar, _, _ = load_avatar(args.checkpoint)
        missing = [f.index for f in frames if f.params is None]
        if missing:
            raise CliError(f"frames without tracked parameters: {missing[:5]}")
        rows = evaluate_frames(avatar, ds, frames, args.weights)
    else:
        rows = []
        for fr in frames:
            pred = read_image(os.path.join(args.pred, os.path.basename(fr.image_path)))
            ref, mask = ds.image(fr), ds.mask(fr)
            rows.append({"frame": fr.index, "split": fr.split, "category": fr.category.value,
                         "l1": metric_l1(pred, ref, mask), "psnr": metric_psnr(pred, ref, mask),
                         "ssim": metric_ssim(pred, ref, mask)})
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        wr = csv.writer(fh)
        wr.writerow(EVAL_FIELDS)
        for r in rows:
            wr.writerow([r["frame"], r["split"], r["category"], f"{r['l1']:.6f}", f"{r['psnr']:.4f}",
                         f"{r['ssim']:.6f}", "n/a"])
        mean = [np.mean([r[k] for r in rows]) for k in ("l1", "psnr", "ssim")]
        wr.writerow(["mean", args.split, "", f"{mean[0]:.6f}", f"{mean[1]:.4f}", f"{mean[2]:.6f}", "n/a"])
    finally:
        if fh is not sys.stdout:
            fh.close()


_COMMANDS = {"synth": _cmd_synth, "register": _cmd_register, "track": _cmd_track, "train": _cmd_train,
             "train-mapping": _cmd_train_mapping, "render": _cmd_render, "animate": _cmd_animate, "eval": _cmd_eval}


def cli_main(argv=None) -> int:
    """Run one subcommand; returns 0 on success, 1 on runtime errors, 2 on usage errors."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.threads:
            import numba
            numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
        cfg = read_config(args.config).get(_SECTION.get(args.command, ""), {}) if args.config else {}
        _COMMANDS[args.command](args, cfg)
    except Exception as e:  # every failure past argument parsing is a runtime error
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
