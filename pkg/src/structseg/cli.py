"""Command line driver: every pipeline stage as a subcommand with file handoff.

Exit status is 0 on success, 1 for usage errors (unknown flags, invalid
values, bad config files) and 2 for data errors (unreadable or malformed
inputs, failed checks).

Files:

* images are binary PPM, label maps and edge maps are PGM
* tensors (CAMs, boundary stacks, features, checkpoints) use the SMT1
  container; ``FILE:NAME`` selects an entry, otherwise the command's
  default entry name or the only entry is used
* metrics are CSV with columns ``class,iou,iop,precision,recall,f1,pixels``
  followed by a final ``mIoU,<value>`` row

Any subcommand accepts ``--config FILE`` with ``key = value`` lines (``#``
starts a comment, later keys win). Keys are long flag names; flags given on
the command line override the file.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import ioformats as iof
from .edge import CannyConfig, canny, label_to_boundary
from .eval import CSV_COLUMNS, evaluate, metrics_to_csv
from .gradcheck import run_suite
from .loss import LossConfig, boundary_bce, smoothness_loss, total_objective
from .refine import (
    AffinityGraph,
    RefineConfig,
    build_color_affinity,
    cam_to_pseudo_label,
    random_walk_refine,
    refine_cam_by_smoothness,
)
from .sbdm import (
    TrainConfig,
    evaluate_sbdm,
    init_sbdm,
    params_from_tensors,
    params_to_tensors,
    sbdm_forward,
    train_sbdm,
)
from .synth import DegradeSpec, SceneSpec, degrade_to_cam, generate_scene

log = logging.getLogger("structseg")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config files ----------------------------------------------------------------

def read_config(path) -> dict:
    """``key = value`` pairs; blank lines and ``#`` comments are skipped."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise UsageError(f"cannot read config file {path}: {e}") from None
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"{path}:{n}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _apply_config(sub: argparse.ArgumentParser, values: dict) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r} for {sub.prog}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} needs a boolean, got {raw!r}")
            defaults[key] = lowered in ("true", "1", "yes")
        elif action.nargs in ("+", "*"):
            defaults[key] = [action.type(v) if action.type else v for v in raw.split()]
        else:
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except (TypeError, ValueError):
                raise UsageError(f"config key {key!r}: invalid value {raw!r}") from None
        action.required = False
    sub.set_defaults(**defaults)


# -- file helpers ---------------------------------------------------------------

def _split_ref(ref: str):
    path, _, name = ref.partition(":") if not os.path.exists(ref) else (ref, "", "")
    return path, name or None


def load_tensor(ref: str, default: str | None = None) -> np.ndarray:
    path, name = _split_ref(ref)
    tensors = iof.read_tensors(path)
    if name is None:
        if default is not None and default in tensors:
            name = default
        elif len(tensors) == 1:
            name = next(iter(tensors))
        else:
            raise DataError(f"{path}: choose an entry with {path}:NAME from {sorted(tensors)}")
    if name not in tensors:
        raise DataError(f"{path}: no entry named {name!r}")
    return tensors[name]


def load_tags(ref: str | None, cam_ref: str | None, channels: int):
    """Tags from ``ref``, else a ``tags`` entry beside the CAM, else all active."""
    if ref is not None:
        return load_tensor(ref, "tags")
    if cam_ref is not None:
        tensors = iof.read_tensors(_split_ref(cam_ref)[0])
        if "tags" in tensors:
            return tensors["tags"]
    return np.ones(channels - 1, dtype=np.float32)


def load_map(path: str) -> np.ndarray:
    """A (1, H, W) map in [0, 1] from a PGM or a one-entry tensor file."""
    if path.lower().endswith(".pgm"):
        return (iof.read_pgm(path).astype(np.float32) / 255.0)[None]
    m = load_tensor(path)
    return m if m.ndim == 3 else m[None]


def scene_paths(prefix: str) -> dict:
    return {"image": prefix + ".ppm", "labels": prefix + ".labels.pgm", "tensors": prefix + ".smt"}


def expand_scenes(refs) -> list:
    out = []
    for ref in refs:
        if os.path.isdir(ref):
            out += sorted(p[:-4] for p in glob.glob(os.path.join(ref, "*.smt")))
        else:
            out.append(ref[:-4] if ref.endswith(".smt") else ref)
    if not out:
        raise DataError("no scenes found")
    return out


def _write_csv_out(text: str, out: str | None):
    sys.stdout.write(text)
    if out:
        iof.write_text(out, text)


def _config(factory, **kwargs):
    try:
        return factory(**kwargs)
    except ValueError as e:
        raise UsageError(str(e)) from None


# -- subcommands ------------------------------------------------------------------

def _synth_one(job):
    i, args = job
    spec = SceneSpec(width=args.size, height=args.size, num_objects=args.objects,
                     num_classes=args.classes, noise_sigma=args.noise, seed=args.seed + i)
    scene = generate_scene(spec)
    degrade = DegradeSpec(args.keep_fraction, args.blur_sigma, args.spurious_rate, seed=args.seed + i)
    cam = degrade_to_cam(scene.labels, degrade, spec.total_classes)
    prefix = os.path.join(args.out, f"scene_{i:03d}")
    paths = scene_paths(prefix)
    tensors = {f"features.{k}": f for k, f in enumerate(scene.features)}
    tensors.update(tags=scene.tags, cam=cam)
    iof.write_ppm(paths["image"], scene.image)
    iof.write_labels(paths["labels"], scene.labels)
    iof.write_tensors(paths["tensors"], tensors)
    return prefix


def _map_jobs(fn, jobs, n_jobs: int):
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, jobs))


def cmd_synth(args):
    _config(SceneSpec, width=args.size, height=args.size, num_objects=args.objects,
            num_classes=args.classes, noise_sigma=args.noise)
    _config(DegradeSpec, keep_fraction=args.keep_fraction, blur_sigma=args.blur_sigma,
            spurious_rate=args.spurious_rate)
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    os.makedirs(args.out, exist_ok=True)
    for prefix in _map_jobs(_synth_one, [(i, args) for i in range(args.count)], args.jobs):
        print(prefix)


def cmd_canny(args):
    config = _config(CannyConfig, gaussian_sigma=args.sigma, low_threshold=args.low,
                     high_threshold=args.high)
    edges = canny(_read_image(args.image), config)
    iof.write_pgm(args.out, (edges[0] * 255).astype(np.uint8))


def _read_image(path):
    return iof.read_pgm(path) if path.lower().endswith(".pgm") else iof.read_ppm(path)


def cmd_boundary(args):
    if args.thickness < 1:
        raise UsageError(f"--thickness must be >= 1, got {args.thickness}")
    labels = iof.read_labels(args.labels, args.classes)
    iof.write_tensors(args.out, {"boundary": label_to_boundary(labels, args.classes, args.thickness)})


def _training_batch(prefix, canny_config, thickness):
    paths = scene_paths(prefix)
    tensors = iof.read_tensors(paths["tensors"])
    levels = sorted((k for k in tensors if k.startswith("features.")), key=lambda k: int(k.split(".")[1]))
    if not levels:
        raise DataError(f"{paths['tensors']}: no features.* entries")
    features = [tensors[k] for k in levels]
    tags = tensors.get("tags")
    if tags is None:
        raise DataError(f"{paths['tensors']}: no tags entry")
    labels = iof.read_labels(paths["labels"], len(tags) + 1)
    target = label_to_boundary(labels, len(tags) + 1, thickness)
    return features, canny(iof.read_ppm(paths["image"]), canny_config), target, tags


def _parse_levels(text):
    if text in (None, "", "all"):
        return None
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--levels expects comma-separated integers or 'all', got {text!r}") from None


def cmd_sbdm_train(args):
    config = _config(TrainConfig, l_init=args.l_init, gamma=args.gamma, max_itr=args.iters,
                     momentum=args.momentum, seed=args.seed,
                     clip_norm=args.clip_norm if args.clip_norm > 0 else None)
    loss_config = _config(LossConfig, lambda1=args.lambda1)
    batches = [_training_batch(p, CannyConfig(), 1) for p in expand_scenes(args.scenes)]
    first_features, _, first_target, _ = batches[0]
    try:
        params = init_sbdm([f.shape[0] for f in first_features], first_target.shape[0],
                           levels=_parse_levels(args.levels), width=args.width, hidden=args.hidden,
                           use_canny=not args.no_canny, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    loss0, f1_0 = evaluate_sbdm(params, batches, loss_config)
    params, losses = train_sbdm(params, batches, config, loss_config)
    loss1, f1_1 = evaluate_sbdm(params, batches, loss_config)
    iof.write_tensors(args.out, params_to_tensors(params))
    print("stage,mean_boundary_loss,boundary_f1")
    print(f"initial,{loss0!r},{f1_0!r}")
    print(f"trained,{loss1!r},{f1_1!r}")
    if args.loss_curve:
        iof.write_text(args.loss_curve, "itr,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses)))


def cmd_sbdm_infer(args):
    params = params_from_tensors(iof.read_tensors(args.checkpoint))
    paths = scene_paths(expand_scenes([args.scene])[0])
    tensors = iof.read_tensors(paths["tensors"])
    features = [tensors[f"features.{i}"] for i in range(len(params.in_channels))]
    prob = sbdm_forward(features, canny(iof.read_ppm(paths["image"])), params)
    iof.write_tensors(args.out, {"boundary": prob})


def cmd_loss_eval(args):
    config = _config(LossConfig, alpha=args.alpha, lambda_s=args.lambda_s, lambda1=args.lambda1,
                     lambda2=args.lambda2, guide_mode=args.guide_mode)
    cam = load_tensor(args.cam, "cam")
    guide = load_tensor(args.guide, "boundary")
    if cam.shape != guide.shape:
        raise DataError(f"cam shape {cam.shape} does not match guide shape {guide.shape}")
    tags = load_tags(args.tags, args.cam, cam.shape[0])
    cam64, guide64 = cam.astype(np.float64), guide.astype(np.float64)
    l1, _ = smoothness_loss(cam64, guide64, tags, 1, config)
    l2, _ = smoothness_loss(cam64, guide64, tags, 2, config)
    ls = l1 + config.lambda_s * l2
    lb = 0.0
    if args.pred is not None:
        pred = load_tensor(args.pred, "boundary").astype(np.float64)
        if pred.shape != guide.shape:
            raise DataError(f"prediction shape {pred.shape} does not match target shape {guide.shape}")
        lb, _ = boundary_bce(pred, guide64, tags, config.bce_clamp)
    total, _ = total_objective(args.base_loss, None, lb, None, ls, None, config)
    print("L_S1,L_S2,L_S,L_B,total")
    print(",".join(repr(float(v)) for v in (l1, l2, ls, lb, total)))


def cmd_refine(args):
    config = _config(RefineConfig, steps=args.steps, fidelity_mu=args.mu, solver=args.solver)
    loss_config = _config(LossConfig, lambda2=args.lambda2, lambda_s=args.lambda_s, alpha=args.alpha,
                          guide_mode=args.guide_mode)
    cam = load_tensor(args.cam, "cam")
    guide = load_tensor(args.guide, "boundary")
    if cam.shape != guide.shape:
        raise DataError(f"cam shape {cam.shape} does not match guide shape {guide.shape}")
    tags = load_tags(args.tags, args.cam, cam.shape[0])
    refined = refine_cam_by_smoothness(cam, guide, tags, config, loss_config)
    iof.write_tensors(args.out, {"cam": refined, "tags": np.asarray(tags, dtype=np.float32)})


def cmd_random_walk(args):
    config = _config(RefineConfig, rw_beta=args.beta, rw_iters=args.iters,
                     affinity_radius=args.radius, affinity_sigma=args.sigma)
    cam = load_tensor(args.cam, "cam")
    if args.affinity:
        graph = AffinityGraph.from_tensors(iof.read_tensors(args.affinity))
    elif args.image:
        graph = build_color_affinity(_read_image(args.image), config)
    else:
        raise UsageError("random-walk needs --image or --affinity")
    try:
        out = random_walk_refine(cam, graph, config, args.conserve_mass)
    except ValueError as e:
        raise DataError(str(e)) from None
    tensors = {"cam": out}
    path = _split_ref(args.cam)[0]
    src = iof.read_tensors(path)
    if "tags" in src:
        tensors["tags"] = src["tags"]
    iof.write_tensors(args.out, tensors)


def cmd_pseudo_label(args):
    if not 0 <= args.bg_threshold <= 1:
        raise UsageError(f"--bg-threshold must be in [0, 1], got {args.bg_threshold}")
    cam = load_tensor(args.cam, "cam")
    tags = load_tags(args.tags, args.cam, cam.shape[0])
    iof.write_labels(args.out, cam_to_pseudo_label(cam, tags, args.bg_threshold))


def cmd_evaluate(args):
    if len(args.pred) != len(args.truth):
        raise UsageError(f"{len(args.pred)} --pred files but {len(args.truth)} --truth files")
    if args.classes < 1 or args.tolerance < 0:
        raise UsageError("--classes must be >= 1 and --tolerance >= 0")
    preds = [iof.read_labels(p, args.classes) for p in args.pred]
    truths = [iof.read_labels(t, args.classes) for t in args.truth]
    try:
        report = evaluate(preds, truths, args.classes, args.tolerance, args.include_absent)
    except ValueError as e:
        raise DataError(str(e)) from None
    _write_csv_out(metrics_to_csv(report), args.out)


def cmd_heatmap(args):
    m = load_map(args.map)
    if not 0 <= args.channel < m.shape[0]:
        raise UsageError(f"--channel {args.channel} outside 0..{m.shape[0] - 1}")
    iof.write_ppm(args.out, iof.render_heatmap(m[args.channel]))


def cmd_grad_check(args):
    if args.instances < 1:
        raise UsageError(f"--instances must be >= 1, got {args.instances}")
    results = run_suite(args.seed, args.instances, args.h)
    print("check,max_rel_error,rel_fraction,max_abs_outside_rel,skipped,passed")
    for r in results:
        print(f"{r.name},{r.max_rel_floored:.3e},{r.rel_fraction:.6f},"
              f"{r.max_abs_outside_rel:.3e},{r.skipped},{int(r.passed)}")
    if not all(r.passed for r in results):
        raise DataError("gradient check failed")


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="structseg", description=__doc__.split("\n\n")[0],
                     epilog="Exit status: 0 ok, 1 usage error, 2 data error.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def sub(name, fn, help_text, seed=False):
        p = subs.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value file; flags override it")
        if seed:
            p.add_argument("--seed", type=int, required=True, help="random seed (required)")
        p.set_defaults(func=fn)
        return p

    p = sub("synth", cmd_synth, "write seeded synthetic scenes with degraded CAMs", seed=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--size", type=int, default=32, help="square side, multiple of 8")
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--classes", type=int, default=3, help="foreground classes")
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--keep-fraction", type=float, default=0.35)
    p.add_argument("--blur-sigma", type=float, default=2.0)
    p.add_argument("--spurious-rate", type=float, default=0.05)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub("canny", cmd_canny, "Canny edge map of an image (PGM, 0/255)")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=1.4)
    p.add_argument("--low", type=float, default=0.1)
    p.add_argument("--high", type=float, default=0.3)

    p = sub("boundary", cmd_boundary, "per-class boundary stack of a label map")
    p.add_argument("--labels", required=True)
    p.add_argument("--classes", type=int, required=True, help="classes including background")
    p.add_argument("--thickness", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub("sbdm-train", cmd_sbdm_train, "train the boundary module on synth scenes", seed=True)
    p.add_argument("--scenes", nargs="+", required=True, help="scene prefixes or directories")
    p.add_argument("--out", required=True, help="checkpoint file")
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--levels", default="all", help="comma-separated feature levels or 'all'")
    p.add_argument("--no-canny", action="store_true")
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--l-init", type=float, default=0.01)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--clip-norm", type=float, default=3.0, help="0 disables clipping")
    p.add_argument("--lambda1", type=float, default=0.05)
    p.add_argument("--loss-curve", help="optional CSV of per-iteration losses")

    p = sub("sbdm-infer", cmd_sbdm_infer, "boundary probabilities for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)

    p = sub("loss-eval", cmd_loss_eval, "print L_S1,L_S2,L_S,L_B,total as CSV")
    p.add_argument("--cam", required=True)
    p.add_argument("--guide", required=True, help="boundary supervision S")
    p.add_argument("--pred", help="predicted boundaries B for the cross-entropy term")
    p.add_argument("--tags")
    p.add_argument("--base-loss", type=float, default=0.0, help="externally supplied base term")
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--lambda-s", type=float, default=10.0)
    p.add_argument("--lambda1", type=float, default=0.05)
    p.add_argument("--lambda2", type=float, default=1.0)
    p.add_argument("--guide-mode", choices=("gradient", "direct"), default="gradient")

    p = sub("refine", cmd_refine, "boundary-guided CAM smoothing")
    p.add_argument("--cam", required=True)
    p.add_argument("--guide", required=True)
    p.add_argument("--tags")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--mu", type=float, default=1.0, help="fidelity weight")
    p.add_argument("--lambda2", type=float, default=1.0)
    p.add_argument("--lambda-s", type=float, default=10.0)
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--guide-mode", choices=("gradient", "direct"), default="gradient")
    p.add_argument("--solver", choices=("mm", "gd"), default="mm")

    p = sub("random-walk", cmd_random_walk, "random-walk diffusion of a CAM")
    p.add_argument("--cam", required=True)
    p.add_argument("--image", help="build a color affinity from this image")
    p.add_argument("--affinity", help="affinity graph tensor file instead of --image")
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float, default=8.0)
    p.add_argument("--iters", type=int, default=16)
    p.add_argument("--radius", type=int, default=4)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--conserve-mass", action="store_true")

    p = sub("pseudo-label", cmd_pseudo_label, "argmax pseudo labels (PGM)")
    p.add_argument("--cam", required=True)
    p.add_argument("--tags")
    p.add_argument("--out", required=True)
    p.add_argument("--bg-threshold", type=float, default=0.25)

    p = sub("evaluate", cmd_evaluate, "metrics CSV: " + ",".join(CSV_COLUMNS) + " then mIoU,<value>")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--classes", type=int, required=True, help="classes including background")
    p.add_argument("--tolerance", type=int, default=2)
    p.add_argument("--include-absent", action="store_true")
    p.add_argument("--out", help="also write the CSV here")

    p = sub("heatmap", cmd_heatmap, "render one channel as a blue-to-red PPM")
    p.add_argument("--map", required=True, help="tensor file or PGM")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub("grad-check", cmd_grad_check,
            "finite-difference gradient suite; prints check,max_rel_error,rel_fraction,"
            "max_abs_outside_rel,skipped,passed. max_rel_error divides by max(|analytic|, "
            "|numeric|, 1e-2); rel_fraction counts components with plain relative error "
            "below 1e-3; skipped counts module components whose +-h step flips a ReLU", seed=True)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--h", type=float, default=1e-3)
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(name)
    return None


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except UsageError:
            # a config file may supply required flags; retry with its values
            pre = _Parser(add_help=False)
            pre.add_argument("--config")
            known, _ = pre.parse_known_args(argv)
            command = next((a for a in argv if not a.startswith("-")), None)
            sub = _subparser(parser, command) if command else None
            if not (known.config and sub):
                raise
            _apply_config(sub, read_config(known.config))
            args = parser.parse_args(argv)
        else:
            if getattr(args, "config", None):
                _apply_config(_subparser(parser, args.command), read_config(args.config))
                args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        log.info("running %s", args.command)
        args.func(args)
        return 0
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:     # --help
        return int(e.code or 0)
    except (DataError, iof.FormatError, OSError, ValueError, KeyError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
