"""Command-line entry point.

Exit codes: 0 success, 1 validation or parse failure, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

log = logging.getLogger("seqvo")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _require_dir(path, what="data directory"):
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} not found: {p}")
    return p


def _require_file(path, what="file"):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


# -- synth -----------------------------------------------------------------------------------

def cmd_synth(args):
    from .dataio import MotionSpec, synth_scene, write_sequence

    motion = MotionSpec.parse(args.motion)
    ds = synth_scene(args.seed, args.frames, motion, args.height, args.width)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_sequence(ds, out, args.seq, args.image_ext)
    except OSError as e:
        raise CliError(f"cannot write dataset to {out}: {e}") from None
    print(f"wrote {args.frames} frames to {out / 'sequences' / args.seq}")


# -- train -----------------------------------------------------------------------------------

def cmd_train(args):
    from .dataio import load_sequence
    from .train import checkpoint_load, load_config, train
    from .networks import NetworkConfig
    from .train import TrainConfig

    data = _require_dir(args.data)
    ds = load_sequence(data, args.seq)
    if args.resume:
        net, optim, step, cfg = checkpoint_load(_require_file(args.resume, "checkpoint"))
        net_cfg = net.cfg
    else:
        if args.config:
            net_cfg, cfg = load_config(_require_file(args.config, "config file"))
        else:
            net_cfg, cfg = NetworkConfig.desk(), TrainConfig.desk()
        net = optim = None
        step = 0
    if args.ckpt_every is not None:
        cfg = replace(cfg, ckpt_every=args.ckpt_every)
    if args.steps is not None:
        stop = step + args.steps
    else:
        stop = cfg.iterations
    if ds.flow_source is None:
        raise CliError(f"{data}: no flow directory and no ground truth to synthesise flow from")

    def report(s, rep):
        if s % args.log_every == 0 or s == stop - 1:
            log.info("step %d total %.5f ap %.5f smo %.5f tc %.5f g %.4f d %.4f",
                     s, rep.total, rep.ap, rep.smo, rep.tc, rep.g_adv, rep.d_adv)

    train(ds, net_cfg, cfg, args.out, net=net, optim=optim, start_step=step, stop_step=stop, callback=report)
    print(f"trained to step {stop}; checkpoint {Path(args.out) / 'ckpt_last.bin'}")


# -- infer -----------------------------------------------------------------------------------

def cmd_infer(args):
    from .dataio import load_sequence, save_poses, write_depth_pgm
    from .evaluation import accumulate
    from .geometry import pose_to_transform
    from .train import checkpoint_load, predict_sequence

    ds = load_sequence(_require_dir(args.data), args.seq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.oracle_gt:
        if ds.gt_poses is None or ds.gt_depths is None:
            raise CliError("--oracle-gt needs ground-truth poses and depths in the dataset")
        from .geometry import invert

        # same expression as the evaluator's ground-truth path, so ATE is exactly zero
        rel_T = [invert(b) @ a for a, b in zip(ds.gt_poses[:-1], ds.gt_poses[1:])]
        depths = ds.gt_depths
        rel = None
    else:
        net, _, _, cfg = checkpoint_load(_require_file(args.ckpt, "checkpoint"))
        H, W = ds.size
        aspect_data, aspect_net = W / H, net.cfg.input_w / net.cfg.input_h
        if abs(aspect_data / aspect_net - 1) > 0.05:
            raise CliError(
                f"checkpoint expects {net.cfg.input_w}x{net.cfg.input_h} input; "
                f"data is {W}x{H} with a different aspect ratio"
            )
        pred = predict_sequence(net, ds, cfg.snippet_len, cfg.use_code, cfg.use_lstm)
        rel = pred.poses
        rel_T = [pose_to_transform(p) for p in rel]
        depths = pred.depths
    (out / "depth").mkdir(exist_ok=True)
    for i, d in enumerate(depths):
        write_depth_pgm(out / "depth" / f"{i:06d}.pgm", d)
    save_poses(out / "poses_rel.txt", rel_T)
    traj = accumulate(rel if rel is not None else [_pose_of(T) for T in rel_T])
    save_poses(out / "trajectory.txt", traj)
    print(f"wrote {len(depths)} depth maps and {len(rel_T)} relative poses to {out}")


def _pose_of(T):
    from .geometry import transform_to_pose

    return transform_to_pose(T)


# -- evaluation --------------------------------------------------------------------------------

def _emit_csv(header, rows, path=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if path:
        Path(path).write_text(text)
    return text


def cmd_eval_depth(args):
    from .dataio import load_sequence, read_depth_pgm
    from .evaluation import DepthMetrics, depth_metrics, mean_depth_metrics

    ds = load_sequence(_require_dir(args.data), args.seq)
    if ds.gt_depths is None:
        raise CliError(f"{args.data}: no ground-truth depth")
    pdir = _require_dir(args.pred, "prediction directory")
    crop = tuple(int(v) for v in args.crop.split(",")) if args.crop else None
    per = []
    for i, gt in enumerate(ds.gt_depths):
        path = _require_file(pdir / f"{i:06d}.pgm", "predicted depth")
        pred = np.maximum(read_depth_pgm(path), 1.0 / 256)
        per.append(depth_metrics(pred, gt, args.cap, not args.no_median, crop))
    m = mean_depth_metrics(per)
    names = DepthMetrics.names()
    if args.per_frame:
        _emit_csv(["frame"] + names, [[i] + r.as_row() for i, r in enumerate(per)], args.per_frame)
    sys.stdout.write(_emit_csv(["cap"] + names, [[args.cap] + m.as_row()], args.csv))


def cmd_eval_odom(args):
    from .dataio import load_poses
    from .evaluation import snippet_ate, relative_poses, identity_baseline_ate

    data = _require_dir(args.data)
    gt_path = data / "poses" / f"{args.seq}.txt"
    gt = load_poses(_require_file(gt_path, "ground-truth poses"))
    pred_T = load_poses(_require_file(args.pred, "predicted poses"))
    if args.trajectory:
        rel = relative_poses(pred_T)
    else:
        rel = [_pose_of(T) for T in pred_T]
    if len(rel) != len(gt) - 1:
        raise CliError(f"{len(rel)} predicted relative poses for {len(gt)} ground-truth frames")
    res = snippet_ate(rel, gt, args.snippet)
    base = identity_baseline_ate(gt, args.snippet)
    if args.per_frame:
        _emit_csv(["start", "ate"], list(enumerate(res.per_snippet)), args.per_frame)
    header = ["ate_mean", "ate_std", "snippets", "flagged", "identity_ate_mean"]
    row = [res.mean, res.std, len(res.per_snippet), len(res.flagged), base.mean]
    sys.stdout.write(_emit_csv(header, [row], args.csv))


# -- gradcheck ----------------------------------------------------------------------------------

def cmd_gradcheck(args):
    from . import gradsuite

    failures = []

    def show(r):
        flag = "ok" if r.ok else "FAIL"
        print(f"{r.scope:8s} {r.name:36s} max_rel_err={r.error:.3e} tol={r.tol:.0e} {flag} ({r.seconds:.2f}s)")
        if not r.ok:
            failures.append(r.name)

    gradsuite.run(args.scope, args.seed, on_result=show)
    if failures:
        raise CliError("gradient check failures: " + ", ".join(failures), EXIT_NUMERICAL)


# -- plot ------------------------------------------------------------------------------------------

def trajectory_svg(tracks, size=480, margin=24) -> str:
    """SVG of x-z polylines; ``tracks`` is a list of ``(label, N x 3 positions, colour)``."""
    xs = np.concatenate([t[1][:, 0] for t in tracks])
    zs = np.concatenate([t[1][:, 2] for t in tracks])
    span = max(float(xs.max() - xs.min()), float(zs.max() - zs.min()), 1e-9)
    s = (size - 2 * margin) / span

    def pt(x, z):
        return f"{margin + (x - xs.min()) * s:.3f},{size - margin - (z - zs.min()) * s:.3f}"

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for k, (label, pos, colour) in enumerate(tracks):
        pts = " ".join(pt(p[0], p[2]) for p in pos)
        lines.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"><title>{escape(label)}</title></polyline>')
        lines.append(f'<text x="{margin}" y="{14 + 14 * k}" font-size="12" fill="{colour}">{escape(label)}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_plot(args):
    from .dataio import load_poses
    from .evaluation import scale_align_positions

    from .geometry import invert

    def local(poses):  # positions in the first camera's frame
        base = invert(poses[0])
        return np.array([(base @ T)[:3, 3] for T in poses])

    pred = load_poses(_require_file(args.poses, "pose file"))
    gt = load_poses(_require_file(args.gt, "ground-truth pose file"))
    if len(pred) != len(gt):
        raise CliError(f"{len(pred)} predicted poses for {len(gt)} ground-truth poses")
    pred0, gt0 = local(pred), local(gt)
    aligned, scale = scale_align_positions(pred0, gt0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trajectory.svg").write_text(trajectory_svg([("ground truth", gt0, "black"), ("predicted", aligned, "red")]))
    rows = [[i, *gt0[i], *aligned[i]] for i in range(len(gt0))]
    _emit_csv(["frame", "gt_x", "gt_y", "gt_z", "pred_x", "pred_y", "pred_z"], rows, out / "trajectory.csv")
    print(f"scale {scale:.6g}; wrote {out / 'trajectory.svg'} and {out / 'trajectory.csv'}")


# -- wiring ------------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqvo", description="Sequential depth and ego-motion learning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic sequence")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--motion", default="default", help="'default', 'identity' or key=value,... overrides")
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=104)
    s.add_argument("--seq", default="00")
    s.add_argument("--image-ext", default=".png", choices=[".png", ".ppm"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on one sequence")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--seq", default="00")
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--steps", type=int, help="number of steps to run (default: up to iterations)")
    s.add_argument("--log-every", type=int, default=50)
    s.add_argument("--ckpt-every", type=int, help="write ckpt_<step>.bin every N steps (0 = only ckpt_last.bin)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict depth and relative poses")
    s.add_argument("--ckpt")
    s.add_argument("--data", required=True)
    s.add_argument("--seq", default="00")
    s.add_argument("--out", required=True)
    s.add_argument("--oracle-gt", action="store_true", help="emit ground truth instead of network output")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval-depth", help="depth metrics against ground truth")
    s.add_argument("--pred", required=True, help="directory of <frame>.pgm predictions")
    s.add_argument("--data", required=True)
    s.add_argument("--seq", default="00")
    s.add_argument("--cap", type=float, default=80.0)
    s.add_argument("--no-median", action="store_true")
    s.add_argument("--crop", help="top,bottom,left,right")
    s.add_argument("--csv")
    s.add_argument("--per-frame")
    s.set_defaults(func=cmd_eval_depth)

    s = sub.add_parser("eval-odom", help="scale-aligned snippet ATE")
    s.add_argument("--pred", required=True, help="relative pose file (T_t<-t-1 per line)")
    s.add_argument("--trajectory", action="store_true", help="--pred holds camera-to-world poses instead")
    s.add_argument("--data", required=True)
    s.add_argument("--seq", default="00")
    s.add_argument("--snippet", type=int, default=5)
    s.add_argument("--csv")
    s.add_argument("--per-frame")
    s.set_defaults(func=cmd_eval_odom)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks at 64-bit")
    s.add_argument("--scope", choices=["ops", "losses", "end2end"], default="ops")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("plot", help="x-z trajectory SVG and CSV")
    s.add_argument("--poses", required=True, help="predicted camera-to-world trajectory")
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    from .dataio import FormatError
    from .flow import FlowFormatError
    from .networks import CheckpointError
    from .train import NumericalError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, FlowFormatError, CheckpointError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
