"""Command-line surface: scene generation, training, localization, eval.

Four subcommands cover the whole artifact workflow:

  gen-scene   build a synthetic point map plus rendered ground-truth views
  train       fit one refinement stage and write its checkpoint
  localize    run iterative localization over a scene's frames
  eval        aggregate one or more result files into metric tables

Every command is deterministic under a fixed --seed, writes files
atomically (temp file plus rename), and exits 0 only when all outputs
were written.  Exit code 2 marks input or validation problems, 3 marks
training divergence.  A key=value --config file may supply any long flag
default; explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import math
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import geometry as G
from . import maprender as M
from . import pipeline as PL
from .tensor import make_rng

STAGE_PRESETS = {1: (2.0, 10.0), 2: (1.0, 2.0), 3: (0.6, 2.0)}

MAP_FILE = "map.poetmap"
POSES_FILE = "poses.csv"
INTRINSICS_FILE = "intrinsics.txt"
FRAME_PATTERN = "frame_%04d.ppm"

_CONFIG_CASTS = {
    "seed": int, "frames": int, "steps": int, "stage": int, "nq": int, "batch": int,
    "warmup": int,
    "jobs": int, "runs": int, "boxes": int, "poles": int, "width": int,
    "height": int, "search_radius": int,
    "extent": float, "ground_spacing": float, "object_spacing": float,
    "ground_y": float, "near_z": float, "view_trans": float,
    "view_rot": float, "fx": float, "fy": float, "cx": float, "cy": float,
    "trans_range": float, "rot_range": float, "lr": float,
    "t_weight": float, "r_weight": float,
    "mirror_prob": float, "perturb_trans": float, "perturb_rot": float,
    "scene": str, "out": str, "optimizer": str, "overlay_dir": str,
}


class CommandError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _write_text(path, text):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


# -- config file -------------------------------------------------------------

def read_config(path):
    """Parse a key=value file; '#' starts a comment, blank lines skipped."""
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise CommandError(2, "cannot read config %s: %s" % (path, e))
    values = {}
    for lineno, line in enumerate(lines, 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise CommandError(2, "%s:%d: expected key=value" % (path, lineno))
        key, _, val = body.partition("=")
        values[key.strip()] = val.strip()
    return values


def apply_config(args, argv):
    """Fill args from the config file wherever no explicit flag was given."""
    if not getattr(args, "config", None):
        return
    for key, raw in read_config(args.config).items():
        attr = key.replace("-", "_")
        if attr not in _CONFIG_CASTS or not hasattr(args, attr):
            raise CommandError(2, "config key %r is not a known setting" % (key,))
        if ("--" + key) in argv:
            continue
        try:
            setattr(args, attr, _CONFIG_CASTS[attr](raw))
        except ValueError:
            raise CommandError(2, "config key %r has a bad value %r" % (key, raw))


# -- scene directory layout --------------------------------------------------

def _intrinsics_text(k: G.CameraIntrinsics) -> str:
    return (
        "fx=%.9f\nfy=%.9f\ncx=%.9f\ncy=%.9f\nwidth=%d\nheight=%d\n"
        % (k.fx, k.fy, k.cx, k.cy, k.width, k.height)
    )


def _parse_intrinsics(path) -> G.CameraIntrinsics:
    values = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                key, _, val = line.partition("=")
                values[key] = val
    return G.CameraIntrinsics(
        float(values["fx"]), float(values["fy"]),
        float(values["cx"]), float(values["cy"]),
        int(values["width"]), int(values["height"]),
    )


def _poses_text(poses) -> str:
    lines = ["frame_id,tx,ty,tz,qw,qx,qy,qz"]
    for i, p in enumerate(poses):
        lines.append(
            "%d,%.12f,%.12f,%.12f,%.12f,%.12f,%.12f,%.12f"
            % (i, p.t[0], p.t[1], p.t[2], p.q[0], p.q[1], p.q[2], p.q[3])
        )
    return "\n".join(lines) + "\n"


def _parse_poses(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("frame_id"):
        raise CommandError(2, "%s: not a pose table" % (path,))
    poses = []
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = line.split(",")
        poses.append((
            int(cells[0]),
            G.Pose7D(np.array([float(c) for c in cells[1:4]]),
                     np.array([float(c) for c in cells[4:8]])),
        ))
    return poses


def load_scene_dir(path):
    """Read back everything gen-scene wrote: map, intrinsics, frames."""
    if not os.path.isdir(path):
        raise CommandError(2, "scene directory %s does not exist" % (path,))
    try:
        pmap = M.load_point_map(os.path.join(path, MAP_FILE))
        k = _parse_intrinsics(os.path.join(path, INTRINSICS_FILE))
        poses = _parse_poses(os.path.join(path, POSES_FILE))
    except (OSError, ValueError, KeyError) as e:
        raise CommandError(2, "scene directory %s is incomplete: %s" % (path, e))
    frames = []
    for frame_id, pose in poses:
        fpath = os.path.join(path, FRAME_PATTERN % frame_id)
        try:
            image = M.load_ppm(fpath)
        except (OSError, ValueError) as e:
            raise CommandError(2, "cannot read %s: %s" % (fpath, e))
        frames.append(PL.Frame(frame_id, image, pose))
    return pmap, k, frames


# -- commands ----------------------------------------------------------------

def cmd_gen_scene(args):
    try:
        os.makedirs(args.out, exist_ok=True)
        probe = os.path.join(args.out, ".write-test")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as e:
        raise CommandError(2, "output path %s is not writable: %s" % (args.out, e))
    spec = M.SceneSpec(
        extent=args.extent, near_z=args.near_z, ground_y=args.ground_y,
        ground_spacing=args.ground_spacing, object_spacing=args.object_spacing,
        n_boxes=args.boxes, n_poles=args.poles,
    )
    k = G.CameraIntrinsics(args.fx, args.fy, args.cx, args.cy, args.width, args.height)
    rng = make_rng(args.seed)
    scene = M.generate_synthetic_scene(spec, rng)
    poses = PL.sample_view_poses(
        args.frames, M.PerturbationRange(args.view_trans, args.view_rot), rng
    )
    M.save_point_map(scene.point_map, os.path.join(args.out, MAP_FILE))
    _write_text(os.path.join(args.out, POSES_FILE), _poses_text(poses))
    _write_text(os.path.join(args.out, INTRINSICS_FILE), _intrinsics_text(k))
    for i, pose in enumerate(poses):
        M.save_ppm(scene.render_rgb(pose, k), os.path.join(args.out, FRAME_PATTERN % i))
    print("wrote %d frames, map with %d points to %s"
          % (len(poses), len(scene.point_map), args.out))


def _stage_range(args):
    preset = STAGE_PRESETS[args.stage]
    trans = preset[0] if args.trans_range is None else args.trans_range
    rot = preset[1] if args.rot_range is None else args.rot_range
    return M.PerturbationRange(trans, rot)


def cmd_train(args):
    pmap, k, frames = load_scene_dir(args.scene)
    if args.frames:
        frames = frames[: args.frames]
    if not frames:
        raise CommandError(2, "scene has no frames to train on")
    prange = _stage_range(args)
    rng = make_rng(args.seed)
    probe_depth = M.render_depth(pmap, frames[0].pose, k)
    model = PL.LocalizationModel.initialize(
        k, rng, search_radius=args.search_radius,
        probe_image=frames[0].image, probe_depth=probe_depth,
    )
    settings = PL.TrainSettings(
        steps=args.steps, learning_rate=args.lr, optimizer=args.optimizer,
        mirror_probability=args.mirror_prob, nq=args.nq,
        batch_size=args.batch, warmup_steps=args.warmup,
        translation_weight=args.t_weight, rotation_weight=args.r_weight,
    )
    try:
        losses = PL.train(model, frames, pmap, prange, settings, rng,
                          log=lambda line: print(line, flush=True))
    except PL.TrainingDiverged as e:
        raise CommandError(3, str(e))
    model.save(args.out)
    log_lines = ["step,loss"] + ["%d,%.9f" % (i, v) for i, v in enumerate(losses)]
    _write_text(args.out + ".loss.csv", "\n".join(log_lines) + "\n")
    print("trained %d steps on range %.3fm/%.1fdeg, checkpoint at %s"
          % (args.steps, prange.max_translation, prange.max_rotation, args.out))


def overlay_image(rgb, depth):
    """Depth points painted over an RGB view, near red through far blue."""
    img = np.array(rgb, dtype=np.float64, copy=True)
    d = depth.depth if isinstance(depth, M.DepthImage) else np.asarray(depth)
    hit = d > 0
    if hit.any():
        lo, hi = float(d[hit].min()), float(d[hit].max())
        span = (hi - lo) if hi > lo else 1.0
        u = np.clip((d - lo) / span, 0.0, 1.0)[:, :, None]
        near = np.array([1.0, 0.15, 0.1])
        far = np.array([0.1, 0.25, 1.0])
        shades = (1.0 - u) * near + u * far
        img[hit] = shades[hit]
    return np.clip(img, 0.0, 1.0)


def _result_columns(iterations):
    cols = ["frame_id"]
    cols += ["trans_cm_%d" % i for i in range(iterations + 1)]
    cols += ["rot_deg_%d" % i for i in range(iterations + 1)]
    cols += ["tx", "ty", "tz", "qw", "qx", "qy", "qz"]
    return cols


def results_to_csv(results) -> str:
    iterations = results[0][1].iterations
    lines = [",".join(_result_columns(iterations))]
    for frame_id, res in results:
        final = res.poses[-1]
        cells = [str(frame_id)]
        cells += ["%.9f" % v for v in res.translation_errors_cm]
        cells += ["%.9f" % v for v in res.rotation_errors_deg]
        cells += ["%.12f" % v for v in list(final.t) + list(final.q)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def parse_results_csv(path):
    """Rebuild per-frame error lists from a localize output file."""
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise CommandError(2, "cannot read results %s: %s" % (path, e))
    if not lines:
        raise CommandError(2, "%s: empty results file" % (path,))
    header = lines[0].split(",")
    t_cols = [i for i, name in enumerate(header) if name.startswith("trans_cm_")]
    r_cols = [i for i, name in enumerate(header) if name.startswith("rot_deg_")]
    if not t_cols or len(t_cols) != len(r_cols):
        raise CommandError(2, "%s: unrecognized results header" % (path,))
    run = []
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = line.split(",")
        t_errs = [float(cells[i]) for i in t_cols]
        r_errs = [float(cells[i]) for i in r_cols]
        poses = [G.Pose7D.identity() for _ in t_errs]
        run.append(PL.LocalizationResult(poses, t_errs, r_errs))
    if not run:
        raise CommandError(2, "%s: no result rows" % (path,))
    return run


def cmd_localize(args):
    pmap, k, frames = load_scene_dir(args.scene)
    if args.frames:
        frames = frames[: args.frames]
    models = []
    for path in args.checkpoints:
        try:
            model = PL.LocalizationModel.load(path)
        except (OSError, ValueError) as e:
            raise CommandError(2, "cannot load checkpoint %s: %s" % (path, e))
        if (model.intrinsics.width, model.intrinsics.height) != (k.width, k.height):
            raise CommandError(
                2,
                "checkpoint %s was trained for %dx%d images but the scene has %dx%d"
                % (path, model.intrinsics.width, model.intrinsics.height,
                   k.width, k.height),
            )
        models.append(model)
    if args.range:
        if len(args.range) != len(models):
            raise CommandError(2, "need one --range per checkpoint")
        ranges = args.range
    else:
        ranges = [STAGE_PRESETS[i + 1] for i in range(len(models))]
    stages = [
        PL.StageConfig(M.PerturbationRange(t, r), model=m)
        for (t, r), m in zip(ranges, models)
    ]
    perturb = M.PerturbationRange(args.perturb_trans, args.perturb_rot)

    def run_one(frame):
        rng = make_rng(args.seed * 1000003 + frame.frame_id)
        delta = M.sample_perturbation(perturb, rng)
        p0 = G.compose_refined_pose(frame.pose, G.pose_inverse(delta))
        res = PL.localize(frame.image, pmap, p0, stages, nq=args.nq,
                          rng=rng, ground_truth=frame.pose)
        return frame.frame_id, p0, res

    try:
        if args.jobs > 1:
            with ThreadPoolExecutor(max_workers=args.jobs) as pool:
                rows = list(pool.map(run_one, frames))
        else:
            rows = [run_one(frame) for frame in frames]
    except ValueError as e:
        raise CommandError(2, str(e))
    rows.sort(key=lambda item: item[0])
    results = [(frame_id, res) for frame_id, _, res in rows]
    _write_text(args.out, results_to_csv(results))
    if args.overlay_dir:
        os.makedirs(args.overlay_dir, exist_ok=True)
        by_id = {f.frame_id: f for f in frames}
        for frame_id, p0, res in rows:
            frame = by_id[frame_id]
            for tag, pose in (("initial", p0), ("final", res.poses[-1])):
                depth = M.render_depth(pmap, pose, k)
                M.save_ppm(
                    overlay_image(frame.image, depth),
                    os.path.join(args.overlay_dir, "overlay_%04d_%s.ppm" % (frame_id, tag)),
                )
    print("localized %d frames through %d stages, results at %s"
          % (len(results), len(stages), args.out))


def cmd_eval(args):
    if args.runs is not None and len(args.results) != args.runs:
        raise CommandError(
            2, "expected %d result files, got %d" % (args.runs, len(args.results))
        )
    runs = [parse_results_csv(path) for path in args.results]
    try:
        rows = PL.evaluate(runs)
    except ValueError as e:
        raise CommandError(2, str(e))
    table = PL.format_metrics_table(rows)
    print(table, end="")
    _write_text(args.out, PL.metrics_to_csv(rows))
    print("metrics written to %s" % (args.out,))


# -- argument wiring ---------------------------------------------------------

def _range_pair(text):
    m = re.fullmatch(r"([0-9.eE+-]+):([0-9.eE+-]+)", text)
    if not m:
        raise argparse.ArgumentTypeError("expected TRANS:ROT, e.g. 0.6:2")
    return float(m.group(1)), float(m.group(2))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="poetloc",
        description="camera-in-point-cloud localization toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-scene", help="generate a synthetic scene")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--frames", type=int, default=20)
    gen.add_argument("--extent", type=float, default=1.0)
    gen.add_argument("--near-z", type=float, default=0.2)
    gen.add_argument("--ground-y", type=float, default=0.25)
    gen.add_argument("--ground-spacing", type=float, default=0.018)
    gen.add_argument("--object-spacing", type=float, default=0.012)
    gen.add_argument("--boxes", type=int, default=4)
    gen.add_argument("--poles", type=int, default=3)
    gen.add_argument("--view-trans", type=float, default=0.12)
    gen.add_argument("--view-rot", type=float, default=5.0)
    gen.add_argument("--fx", type=float, default=200.0)
    gen.add_argument("--fy", type=float, default=200.0)
    gen.add_argument("--cx", type=float, default=127.5)
    gen.add_argument("--cy", type=float, default=95.5)
    gen.add_argument("--width", type=int, default=256)
    gen.add_argument("--height", type=int, default=192)
    gen.add_argument("--config", default=None)
    gen.set_defaults(func=cmd_gen_scene)

    tr = sub.add_parser("train", help="train one refinement stage")
    tr.add_argument("--scene", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--stage", type=int, choices=(1, 2, 3), default=1)
    tr.add_argument("--trans-range", type=float, default=None)
    tr.add_argument("--rot-range", type=float, default=None)
    tr.add_argument("--steps", type=int, default=2000)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--optimizer", choices=("adam", "momentum"), default="adam")
    tr.add_argument("--mirror-prob", type=float, default=0.5)
    tr.add_argument("--nq", type=int, default=1)
    tr.add_argument("--batch", type=int, default=1)
    tr.add_argument("--warmup", type=int, default=0)
    tr.add_argument("--t-weight", type=float, default=1.0)
    tr.add_argument("--r-weight", type=float, default=1.0)
    tr.add_argument("--frames", type=int, default=0)
    tr.add_argument("--search-radius", type=int, default=1)
    tr.add_argument("--config", default=None)
    tr.set_defaults(func=cmd_train)

    loc = sub.add_parser("localize", help="iteratively localize scene frames")
    loc.add_argument("--scene", required=True)
    loc.add_argument("--out", default="results.csv")
    loc.add_argument("--checkpoints", nargs="+", required=True)
    loc.add_argument("--range", action="append", type=_range_pair, default=None,
                     help="per-stage TRANS:ROT, repeatable, coarse to fine")
    loc.add_argument("--perturb-trans", type=float, default=STAGE_PRESETS[1][0])
    loc.add_argument("--perturb-rot", type=float, default=STAGE_PRESETS[1][1])
    loc.add_argument("--nq", type=int, default=1)
    loc.add_argument("--seed", type=int, default=0)
    loc.add_argument("--jobs", type=int, default=1)
    loc.add_argument("--frames", type=int, default=0)
    loc.add_argument("--overlay-dir", default=None)
    loc.add_argument("--config", default=None)
    loc.set_defaults(func=cmd_localize)

    ev = sub.add_parser("eval", help="aggregate localization results")
    ev.add_argument("results", nargs="+")
    ev.add_argument("--runs", type=int, default=None)
    ev.add_argument("--out", default="metrics.csv")
    ev.add_argument("--config", default=None)
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        apply_config(args, argv)
        args.func(args)
    except CommandError as e:
        print("error: %s" % (e,), file=sys.stderr)
        return e.code
    except (OSError, ValueError) as e:
        print("error: %s" % (e,), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
