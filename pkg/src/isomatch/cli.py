"""Command line front end.

Subcommands cover the full workflow:

    isomatch preprocess manifest.txt --target-n 1500 --k 60
    isomatch train manifest.txt --iterations 100 --seed 7 --out-dir run
    isomatch infer run/checkpoint_final.bin x.ply y.ply -o map.corr
    isomatch refine map.corr x.ply y.ply -o refined.corr --pmf-iters 10
    isomatch eval map.corr y.ply --gt identity
    isomatch export-colors map.corr x.ply y.ply

Option values resolve as flags, then key=value lines from --config, then
built-in defaults. Exit codes: 0 success, 2 usage, 3 data, 4 numerical;
errors print one `error[<kind>]: message` line on stderr.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import dataio
from . import net as netmod
from .dataio import (PreprocessParams, content_hash, load_dataset,
                     load_ground_truth, read_manifest)
from .errors import DataError, IsomatchError, NumericsError
from .evaluation import NORMALIZATIONS, curve, geodesic_errors, save_curve
from .fmaps import SoftCorrespondence, pipeline_forward, soft_corr
from .mesh import load_mesh, save_mesh_with_colors
from .refine import (PMF_ITERS, PointMap, extract_map, load_corr, pmf_refine,
                     save_corr, upscale)
from .train import TrainConfig, train_loop

DEFAULTS = {
    "target_n": None,
    "k": 120,
    "shot_bins": 10,
    "shot_radius_fraction": 0.05,
    "iterations": 3000,
    "learning_rate": 1e-3,
    "batch_pairs": 4,
    "depth": netmod.DEFAULT_DEPTH,
    "mode": "unsupervised",
    "seed": 0,
    "checkpoint_every": 100,
    "pmf_iters": PMF_ITERS,
    "normalization": "diameter",
}

_CONFIG_KEYS = set(DEFAULTS) | {"cache_dir", "out_dir"}


class _Parser(argparse.ArgumentParser):
    """argparse with the machine-parsable usage-error line."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error[usage]: {message}\n")
        sys.exit(2)


def _read_config(path):
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise DataError(f"no such config file: {path}")
    out = {}
    with open(path) as fh:
        for no, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{no}: expected key=value")
            key, val = line.split("=", 1)
            key = key.strip().replace("-", "_")
            if key not in _CONFIG_KEYS:
                raise DataError(f"{path}:{no}: unknown config key '{key}'")
            out[key] = val.strip()
    return out


def _resolve(args, cfg, name, cast=None):
    value = getattr(args, name, None)
    if value is None and name in cfg:
        value = cfg[name]
    if value is None:
        return DEFAULTS.get(name)
    if cast is not None and not isinstance(value, cast):
        try:
            value = cast(value)
        except ValueError:
            raise DataError(f"bad value for {name}: {value!r}")
    return value


def _preprocess_params(args, cfg):
    return PreprocessParams(
        target_n=_resolve(args, cfg, "target_n", int),
        k=_resolve(args, cfg, "k", int),
        shot_bins=_resolve(args, cfg, "shot_bins", int),
        shot_radius_fraction=_resolve(args, cfg, "shot_radius_fraction", float))


def _cache_dir(args, cfg, manifest=None):
    """Explicit value wins; manifest-driven commands default to a `cache`
    directory next to the manifest, mesh-path commands to no cache."""
    value = getattr(args, "cache_dir", None)
    if value is None:
        value = cfg.get("cache_dir")
    if value is None and manifest is not None:
        value = os.path.join(os.path.dirname(os.path.abspath(manifest)),
                             "cache")
    return value


def _apply_threads(n):
    if n is None:
        return
    if n < 1:
        raise DataError("threads must be positive")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import numba
        numba.set_num_threads(n)
    except Exception:
        pass


# ----------------------------------------------------------------- commands

def _cmd_preprocess(args):
    cfg = _read_config(args.config)
    params = _preprocess_params(args, cfg)
    cache_dir = _cache_dir(args, cfg, manifest=args.manifest)
    entries = read_manifest(args.manifest)
    for mesh_path, _ in entries:
        was_cached = os.path.isfile(os.path.join(
            cache_dir, content_hash(mesh_path, params), "meta.json"))
        bundle = dataio.preprocess(mesh_path, params, cache_dir)
        status = "cached" if was_cached else "computed"
        print(f"{mesh_path}  n={bundle.n}  k={bundle.basis.k}  {status}")
    print(f"{len(entries)} shape(s) ready in {cache_dir}")
    return 0


def _cmd_train(args):
    cfg = _read_config(args.config)
    params = _preprocess_params(args, cfg)
    cache_dir = _cache_dir(args, cfg, manifest=args.manifest)
    out_dir = getattr(args, "out_dir", None) or cfg.get("out_dir") or "run"
    dataset = load_dataset(args.manifest, params, cache_dir)
    config = TrainConfig(
        iterations=_resolve(args, cfg, "iterations", int),
        learning_rate=_resolve(args, cfg, "learning_rate", float),
        batch_pairs=_resolve(args, cfg, "batch_pairs", int),
        k=params.k,
        seed=_resolve(args, cfg, "seed", int),
        mode=_resolve(args, cfg, "mode", str),
        depth=_resolve(args, cfg, "depth", int),
        checkpoint_every=_resolve(args, cfg, "checkpoint_every", int),
        out_dir=out_dir)
    os.makedirs(out_dir, exist_ok=True)
    snapshot = {
        "k": params.k,
        "width": int(dataset[0].shot.d),
        "depth": config.depth,
        "mode": config.mode,
        "seed": config.seed,
        "iterations": config.iterations,
        "learning_rate": config.learning_rate,
        "batch_pairs": config.batch_pairs,
        "target_n": params.target_n,
        "shot_bins": params.shot_bins,
        "shot_radius_fraction": params.shot_radius_fraction,
    }
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(snapshot, fh, indent=1, sort_keys=True)
    _, history = train_loop(dataset, config)
    if history:
        first, last = history[0], history[-1]
        print(f"unsup_loss {float(first['unsup_loss'])!r} -> "
              f"{float(last['unsup_loss'])!r} over {len(history)} "
              f"iteration(s)")
    print(f"checkpoint: {os.path.join(out_dir, 'checkpoint_final.bin')}")
    print(f"log: {os.path.join(out_dir, 'log.csv')}")
    return 0


def _load_run_snapshot(checkpoint_path):
    sidecar = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)),
                           "config.json")
    if not os.path.isfile(sidecar):
        return {}
    with open(sidecar) as fh:
        return json.load(fh)


def _infer_bundles(args, cfg):
    """Load checkpoint plus the two shape bundles, with the training-run
    config snapshot supplying preprocessing defaults the user left unset."""
    net = netmod.load_checkpoint(args.checkpoint)
    snapshot = _load_run_snapshot(args.checkpoint)
    for key in ("target_n", "k", "shot_bins", "shot_radius_fraction"):
        if getattr(args, key, None) is None and key not in cfg \
                and snapshot.get(key) is not None:
            cfg[key] = snapshot[key]
    params = _preprocess_params(args, cfg)
    if "k" in snapshot and params.k != snapshot["k"]:
        raise DataError(
            f"checkpoint was trained with k={snapshot['k']}, "
            f"bundles use k={params.k}")
    cache_dir = _cache_dir(args, cfg)
    bx = dataio.preprocess(args.mesh_x, params, cache_dir)
    by = dataio.preprocess(args.mesh_y, params, cache_dir)
    for b, path in ((bx, args.mesh_x), (by, args.mesh_y)):
        if b.shot.d != net.width:
            raise DataError(
                f"checkpoint descriptor width {net.width} does not match "
                f"{path} (width {b.shot.d})")
    return net, bx, by, params, cache_dir


def _cmd_infer(args):
    cfg = _read_config(args.config)
    net, bx, by, _, _ = _infer_bundles(args, cfg)
    state = pipeline_forward(net, bx, by)
    pmap = extract_map(state.soft)
    save_corr(args.out, pmap)
    if args.soft_out:
        with open(args.soft_out, "wb") as fh:
            np.save(fh, state.soft.p)
    print(f"wrote {args.out} ({pmap.n_x} -> {pmap.n_y} vertices)")
    return 0


def _cmd_refine(args):
    cfg = _read_config(args.config)
    params = _preprocess_params(args, cfg)
    cache_dir = _cache_dir(args, cfg)
    bx = dataio.preprocess(args.mesh_x, params, cache_dir)
    by = dataio.preprocess(args.mesh_y, params, cache_dir)
    if args.soft:
        pmap = extract_map(SoftCorrespondence(np.load(args.input)))
    else:
        pmap = load_corr(args.input)
    if pmap.n_x != bx.n or pmap.n_y != by.n:
        raise DataError(
            f"correspondence is {pmap.n_x} -> {pmap.n_y} but bundles have "
            f"{bx.n} and {by.n} vertices")
    iters = _resolve(args, cfg, "pmf_iters", int)
    if iters > 0:
        diameter = 0.5 * (bx.distances.diameter + by.distances.diameter)
        pmap = pmf_refine(pmap, bx.basis, by.basis, iterations=iters,
                          diameter=diameter)
    if args.upscale:
        full = PreprocessParams(target_n=None, k=params.k,
                                shot_bins=params.shot_bins,
                                shot_radius_fraction=params.shot_radius_fraction)
        fx = dataio.preprocess(args.mesh_x, full, cache_dir)
        fy = dataio.preprocess(args.mesh_y, full, cache_dir)
        c_up = upscale(pmap, bx.vertex_map, by.vertex_map, fx.basis, fy.basis)
        pmap = extract_map(soft_corr(c_up, fx.basis, fy.basis))
    save_corr(args.out, pmap)
    print(f"wrote {args.out} ({pmap.n_x} -> {pmap.n_y} vertices)")
    return 0


def _cmd_eval(args):
    cfg = _read_config(args.config)
    params = _preprocess_params(args, cfg)
    cache_dir = _cache_dir(args, cfg)
    pred = load_corr(args.corr)
    by = dataio.preprocess(args.mesh_y, params, cache_dir)
    if pred.n_y != by.n:
        raise DataError(f"correspondence targets {pred.n_y} vertices but "
                        f"{args.mesh_y} has {by.n}")
    if args.gt == "identity":
        gt = PointMap(np.arange(pred.n_x), pred.n_y)
    else:
        gt = load_ground_truth(args.gt, n_x=pred.n_x, n_y=pred.n_y)
    normalization = _resolve(args, cfg, "normalization", str)
    total_area = float(by.basis.mass.sum())
    errors = geodesic_errors(pred, gt, by.distances,
                             normalization=normalization,
                             total_area=total_area)
    result = curve(errors)
    print(f"mean_error={float(result.mean_error)!r}")
    covered = np.searchsorted(result.thresholds, 0.02, side="right")
    if covered:
        print(f"fraction_within_0.02={float(result.fractions[covered - 1])!r}")
    if args.out:
        save_curve(args.out, result,
                   metadata={"normalization": normalization,
                             "evaluated": int(errors.size)})
        print(f"curve: {args.out}")
    return 0


def _position_colors(mesh):
    v = mesh.vertices
    span = np.ptp(v, axis=0)
    safe = np.where(span > 0, span, 1.0)
    colors = (v - v.min(axis=0)) / safe
    colors[:, span == 0] = 0.5
    return colors


def _cmd_export_colors(args):
    mx = load_mesh(args.mesh_x)
    my = load_mesh(args.mesh_y)
    pmap = load_corr(args.corr)
    if pmap.n_x != mx.n_vertices or pmap.n_y != my.n_vertices:
        raise DataError(
            f"correspondence is {pmap.n_x} -> {pmap.n_y} but meshes have "
            f"{mx.n_vertices} and {my.n_vertices} vertices")
    colors_x = _position_colors(mx)
    colors_y = np.full((my.n_vertices, 3), 0.5)
    matched = pmap.matched
    colors_y[pmap.map[matched]] = colors_x[matched]
    out_x = args.out_x or os.path.splitext(args.mesh_x)[0] + "_colored.ply"
    out_y = args.out_y or os.path.splitext(args.mesh_y)[0] + "_colored.ply"
    save_mesh_with_colors(mx, colors_x, out_x)
    save_mesh_with_colors(my, colors_y, out_y)
    print(f"wrote {out_x} and {out_y}")
    return 0


# ------------------------------------------------------------------ parser

def _add_pre_flags(sub):
    sub.add_argument("--target-n", type=int, dest="target_n",
                     help="remesh to at most this many vertices")
    sub.add_argument("--k", type=int, help="spectral basis size")
    sub.add_argument("--shot-bins", type=int, dest="shot_bins")
    sub.add_argument("--shot-radius-fraction", type=float,
                     dest="shot_radius_fraction")
    sub.add_argument("--cache-dir", dest="cache_dir")


def _add_common(sub):
    sub.add_argument("--config", help="key=value defaults file")
    sub.add_argument("--threads", type=int, help="cap worker threads")


def build_parser():
    parser = _Parser(prog="isomatch",
                     description="dense correspondence between deformable "
                                 "triangle meshes")
    commands = parser.add_subparsers(dest="command", required=True,
                                     metavar="command")

    p = commands.add_parser("preprocess",
                            help="build cached shape bundles from a manifest")
    p.add_argument("manifest")
    _add_pre_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_preprocess)

    p = commands.add_parser("train", help="train the descriptor network")
    p.add_argument("manifest")
    p.add_argument("--iterations", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--batch-pairs", type=int, dest="batch_pairs")
    p.add_argument("--depth", type=int)
    p.add_argument("--mode", choices=("unsupervised", "supervised"))
    p.add_argument("--seed", type=int, help="controls all randomness")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--out-dir", dest="out_dir")
    _add_pre_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = commands.add_parser("infer",
                            help="predict a correspondence with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("mesh_x")
    p.add_argument("mesh_y")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--soft-out", dest="soft_out",
                   help="also dump the soft map as .npy")
    _add_pre_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_infer)

    p = commands.add_parser("refine",
                            help="sharpen a correspondence (assignment "
                                 "filtering, optional upscaling)")
    p.add_argument("input", help="correspondence file, or soft map with --soft")
    p.add_argument("mesh_x")
    p.add_argument("mesh_y")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--soft", action="store_true",
                   help="input is a soft-map .npy dump")
    p.add_argument("--pmf-iters", type=int, dest="pmf_iters")
    p.add_argument("--upscale", action="store_true",
                   help="lift the map to the full-resolution meshes")
    _add_pre_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_refine)

    p = commands.add_parser("eval", help="geodesic error against ground truth")
    p.add_argument("corr")
    p.add_argument("mesh_y")
    p.add_argument("--gt", required=True,
                   help="ground-truth file or the literal 'identity'")
    p.add_argument("--normalization", choices=NORMALIZATIONS)
    p.add_argument("-o", "--out", help="write the error curve CSV here")
    _add_pre_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = commands.add_parser("export-colors",
                            help="transfer source position colors through a "
                                 "correspondence into a colored PLY pair")
    p.add_argument("corr")
    p.add_argument("mesh_x")
    p.add_argument("mesh_y")
    p.add_argument("--out-x", dest="out_x")
    p.add_argument("--out-y", dest="out_y")
    _add_common(p)
    p.set_defaults(func=_cmd_export_colors)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _apply_threads(args.threads)
        return args.func(args)
    except NumericsError as exc:
        sys.stderr.write(f"error[numerics]: {exc}\n")
        return 4
    except (IsomatchError, OSError) as exc:
        sys.stderr.write(f"error[data]: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
