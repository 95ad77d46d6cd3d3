"""Command-line interface.

Progress goes to stderr; machine-readable records (one JSON object per
line) go to stdout. Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields

from . import autograd as ag
from .errors import BadGridSize, NonManifold, TexSegError
from .evaluation import SynthSpec, baseline_segment, emit_report, evaluate, synth_textured_mesh
from .features import read_feature_matrix, write_features
from .labels import read_labels, write_labels
from .mesh import build_adjacency, drop_nonmanifold, load_mesh, write_labeled_ply, write_obj
from .patches import DescriptorKind, PatchConfig
from .pipeline import FeatureConfig, prepare, prepare_from_features, segment, to_facets
from .trainer import VARIANTS, TrainConfig

log = logging.getLogger("texseg")


# ---------------------------------------------------------------------------
# argument types


def grid_size(text: str) -> int:
    n = int(text)
    try:
        PatchConfig(n=n)
    except BadGridSize as e:
        raise argparse.ArgumentTypeError(str(e))
    return n


def channel_list(text: str) -> tuple:
    try:
        return tuple(DescriptorKind.parse(t.strip()) for t in text.split(",") if t.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


_TRAIN_HELP = {
    "K": "IPC cluster count",
    "batch_size": "instances per batch",
    "max_epochs": "epoch limit",
    "beta_c": "first-epoch cleaner gate",
    "eps": "convergence: label-change fraction",
    "patience": "convergence: consecutive quiet epochs",
    "generator_steps": "optimizer steps per batch for the generator",
    "cleaner_steps": "optimizer steps per batch for the cleaner",
}


def _add_train_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("training")
    for f in fields(TrainConfig):
        if f.name == "seed":
            continue
        if f.type in ("bool", bool):
            g.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction,
                           default=f.default)
        elif f.name == "model_pair":
            g.add_argument(_flag(f.name), dest=f.name, default=f.default, choices=["transformer", "alg+mlc"])
        elif f.name == "ipc_method":
            g.add_argument(_flag(f.name), dest=f.name, default=f.default, choices=["kmeans", "meanshift"])
        elif f.name == "gaussian_mode":
            g.add_argument(_flag(f.name), dest=f.name, default=f.default, choices=["target", "input"])
        elif f.name == "dtype":
            g.add_argument(_flag(f.name), dest=f.name, default=f.default, choices=["float32", "float64"])
        else:
            typ = {"int": int, "float": float}.get(f.type, type(f.default))
            g.add_argument(_flag(f.name), dest=f.name, type=typ, default=f.default,
                           help=_TRAIN_HELP.get(f.name))


def _add_patch_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("patches and features")
    g.add_argument("--grid", type=grid_size, default=24, help="patch grid side n")
    g.add_argument("--channels", type=channel_list, default=(DescriptorKind.SV, DescriptorKind.LD,
                                                             DescriptorKind.Cur))
    g.add_argument("--extractor", default="fixed-projection", choices=["fixed-projection", "identity-pool"])
    g.add_argument("--extractor-seed", type=int, default=0)
    g.add_argument("--dim", type=int, default=256, help="feature dimension D")
    g.add_argument("--tokens", type=int, default=16, help="sequence length n_k")
    g.add_argument("--features", help="precomputed feature file; skips patch extraction")
    g.add_argument("--permissive", action="store_true", help="drop non-manifold facets instead of failing")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="texseg",
                                 description="Unsupervised 3D texture segmentation of triangle meshes.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("-q", "--quiet", action="store_true")
    # the same flags after the subcommand; SUPPRESS keeps them from resetting the top-level values
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS)
    subs = ap.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        return subs.add_parser(name, parents=[common], **kw)

    s = add("segment", help="label every facet as texture / non-texture")
    s.add_argument("mesh")
    s.add_argument("--out", default="labels.csv")
    s.add_argument("--ply")
    s.add_argument("--checkpoint", help="directory for generator/cleaner checkpoints")
    s.add_argument("--seed", type=u64, default=0)
    _add_patch_flags(s)
    _add_train_flags(s)

    e = add("eval", help="compare predicted labels with ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)

    b = add("baseline", help="clustering baseline on the same features")
    b.add_argument("mesh")
    b.add_argument("--method", default="kmeans2", choices=["kmeans2", "gmm2", "dbscan"])
    b.add_argument("--out", default="baseline.csv")
    b.add_argument("--gt", help="ground truth for cluster-to-class alignment")
    b.add_argument("--dbscan-eps", type=float)
    b.add_argument("--min-pts", type=int, default=5)
    b.add_argument("--seed", type=u64, default=0)
    _add_patch_flags(b)

    y = add("synth", help="write a synthetic textured grid and its ground truth")
    y.add_argument("--side", type=int, default=64)
    y.add_argument("--mask", default="half", choices=["half", "disc", "band", "all"])
    y.add_argument("--pattern", default="sine", choices=["sine", "bumps", "none"])
    y.add_argument("--amplitude", type=float, default=0.1)
    y.add_argument("--frequency", type=float)
    y.add_argument("--seed", type=u64, default=0)
    y.add_argument("--out", default="synth.obj")
    y.add_argument("--gt", default="synth_gt.csv")

    a = add("ablate", help="run the ablation variants and report metrics")
    a.add_argument("mesh")
    a.add_argument("--gt", required=True)
    a.add_argument("--variants", default="all", help="comma list or 'all'")
    a.add_argument("--seed", type=u64, default=0)
    _add_patch_flags(a)
    _add_train_flags(a)

    add("gradcheck", help="finite-difference check of all backward passes")

    f = add("features", help="write per-facet features for later reuse")
    f.add_argument("mesh")
    f.add_argument("--out", default="features.bin")
    _add_patch_flags(f)
    return ap


# ---------------------------------------------------------------------------
# helpers


def _emit(record: dict):
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()


def _progress(rec: dict):
    log.info("epoch %d  tlg %s  tlc %s  texture %d  non-texture %d  changed %s",
             rec["epoch"], _fmt(rec["tlg_loss"]), _fmt(rec["tlc_loss"]), rec["texture"],
             rec["non_texture"], _fmt(rec["change_fraction"]))


def _fmt(v):
    return "-" if v is None else f"{v:.4g}"


def _load(args):
    mesh = load_mesh(args.mesh)
    if getattr(args, "permissive", False):
        try:
            build_adjacency(mesh)
        except NonManifold:
            before = mesh.facet_count
            mesh, _ = drop_nonmanifold(mesh)
            log.warning("dropped %d non-manifold facets", before - mesh.facet_count)
    return mesh


def _prepare(args, mesh):
    fcfg = FeatureConfig(kind=args.extractor, seed=args.extractor_seed, D=args.dim, n_k=args.tokens)
    if args.features:
        ids, mat = read_feature_matrix(args.features)
        return prepare_from_features(mesh, ids, mat, fcfg)
    pcfg = PatchConfig(n=args.grid, channel_ids=args.channels)
    ticks = {"t": 0.0}

    def prog(i, total):
        now = time.monotonic()
        if now - ticks["t"] > 2.0 or i == total:
            ticks["t"] = now
            log.info("patches %d/%d", i, total)

    return prepare(mesh, pcfg, fcfg, progress=prog)


def _train_config(args) -> TrainConfig:
    kw = {f.name: getattr(args, f.name) for f in fields(TrainConfig) if hasattr(args, f.name)}
    return TrainConfig(**kw)


# ---------------------------------------------------------------------------
# subcommands


def cmd_segment(args) -> int:
    mesh = _load(args)
    prep = _prepare(args, mesh)
    cfg = _train_config(args)
    t0 = time.monotonic()
    state = segment(prep, cfg, progress=_progress)
    write_labels(state, args.out)
    if args.ply:
        write_labeled_ply(mesh, state, args.ply)
    if args.checkpoint:
        os.makedirs(args.checkpoint, exist_ok=True)
        gen, cls = state.models
        ag.save_checkpoint(os.path.join(args.checkpoint, "generator.ckpt"), gen.params)
        ag.save_checkpoint(os.path.join(args.checkpoint, "cleaner.ckpt"), cls.params)
    counts = state.counts()
    log.info("done in %.1f s", time.monotonic() - t0)
    _emit({"command": "segment", "out": args.out, "epochs": state.iteration,
           "converged": bool(state.trace.get("converged")), **counts})
    return 0


def cmd_eval(args) -> int:
    pred, gt = read_labels(args.pred), read_labels(args.gt)
    m = evaluate(pred, gt)
    rep = emit_report([(os.path.basename(args.pred), m)])
    for r in rep["records"]:
        _emit(r)
    sys.stderr.write(rep["table"] + "\n")
    return 0


def cmd_baseline(args) -> int:
    mesh = _load(args)
    prep = _prepare(args, mesh)
    gt = read_labels(args.gt).labels[prep.centers] if args.gt else None
    params = {"eps": args.dbscan_eps, "min_pts": args.min_pts}
    state = baseline_segment(prep.features, args.method, params, gt=gt, seed=args.seed)
    facets = to_facets(prep, state)
    write_labels(facets, args.out)
    rec = {"command": "baseline", "method": args.method, "out": args.out, **facets.counts()}
    if args.gt:
        rec.update(evaluate(facets, read_labels(args.gt)))
    _emit(rec)
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(side=args.side, mask=args.mask, pattern=args.pattern, amplitude=args.amplitude,
                     frequency=args.frequency, seed=args.seed)
    mesh, gt = synth_textured_mesh(spec)
    write_obj(mesh, args.out)
    write_labels(gt, args.gt)
    _emit({"command": "synth", "out": args.out, "gt": args.gt, "facets": mesh.facet_count,
           "texture_fraction": float(gt.labels.mean())})
    return 0


def cmd_ablate(args) -> int:
    mesh = _load(args)
    prep = _prepare(args, mesh)
    gt = read_labels(args.gt)
    cfg = _train_config(args)
    names = VARIANTS if args.variants == "all" else tuple(v.strip() for v in args.variants.split(","))
    runs = []
    for v in names:
        log.info("variant %s", v)
        t0 = time.monotonic()
        state = segment(prep, cfg, variant=v, progress=_progress)
        runs.append((v, evaluate(state, gt), time.monotonic() - t0))
    rep = emit_report(runs)
    for r in rep["records"]:
        _emit(r)
    sys.stderr.write(rep["table"] + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    worst = run_suite()
    ok = True
    for name, err in worst.items():
        passed = err < TOLERANCE
        ok &= passed
        _emit({"check": name, "max_rel_error": err, "passed": passed})
    return 0 if ok else 1


def cmd_features(args) -> int:
    mesh = _load(args)
    prep = _prepare(args, mesh)
    write_features(args.out, prep.features, prep.centers)
    _emit({"command": "features", "out": args.out, "rows": int(len(prep.centers)),
           "dim": int(prep.features.shape[1]) if prep.features.ndim == 2 else 0})
    return 0


COMMANDS = {
    "segment": cmd_segment,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "synth": cmd_synth,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "features": cmd_features,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](args)
    except BadGridSize as e:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"texseg: error: {e}\n")
        return 2
    except (TexSegError, OSError, ValueError) as e:
        sys.stderr.write(f"texseg {args.command}: {_describe(e)}\n")
        return 1


def _describe(e: Exception) -> str:
    if isinstance(e, OSError) and e.filename:
        return f"{e.filename}: {e.strerror or e}"
    return str(e)


def main():
    sys.exit(run_cli())
