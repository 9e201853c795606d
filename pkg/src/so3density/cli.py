"""Command-line entry point.

Subcommands: grid gen, synth, train, eval, predict, viz, bench.  Every
training option can come from a plain-text ``key = value`` config file and
be overridden by the flag of the same name; the effective configuration is
echoed into each output artifact's metadata (embedded for JSON artifacts, a
``<out>.meta.json`` sidecar for binary formats).  Logs go to stderr, data to
files or stdout.  Exit codes: 0 success, 1 usage error, 2 data error.

Heavy imports happen inside handlers so that --threads can cap BLAS pools
before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

__all__ = ["main"]


def _log(msg):
    print(msg, file=sys.stderr)


def _parse_config_file(path):
    """key = value lines; '#' starts a comment; values stay strings."""
    out = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: malformed line {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _write_sidecar(out_path, config):
    with open(str(out_path) + ".meta.json", "w") as fh:
        json.dump({"config": config}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _build_parser():
    parser = argparse.ArgumentParser(prog="so3density")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker/BLAS threads (default: machine cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_grid = sub.add_parser("grid", help="grid utilities")
    grid_sub = p_grid.add_subparsers(dest="grid_command", required=True)
    p_gen = grid_sub.add_parser("gen", help="generate an equivolumetric grid file")
    p_gen.add_argument("--level", type=int, required=True)
    p_gen.add_argument("--out", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic solid dataset")
    p_synth.add_argument("--kind", required=True)
    p_synth.add_argument("--n", type=int, required=True)
    p_synth.add_argument("--noise", type=float, default=0.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--dim", type=int, default=16)
    p_synth.add_argument("--out", required=True)

    p_train = sub.add_parser("train", help="train a density model")
    p_train.add_argument("--config", default=None, help="key = value config file")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--trace", default=None, help="loss trace CSV path")
    for flag, kwargs in [
        ("--total-steps", dict(type=int)),
        ("--batch-size", dict(type=int)),
        ("--query-count", dict(type=int)),
        ("--query-mode", dict(choices=["rotated_grid", "random"])),
        ("--grid-level", dict(type=int)),
        ("--base-lr", dict(type=float)),
        ("--warmup-steps", dict(type=int)),
        ("--adam-beta1", dict(type=float)),
        ("--adam-beta2", dict(type=float)),
        ("--adam-eps", dict(type=float)),
        ("--grad-clip", dict(type=float)),
        ("--precision", dict(choices=["f32", "f64"])),
        ("--seed", dict(type=int)),
        ("--pe-frequencies", dict(type=int)),
        ("--hidden-width", dict(type=int)),
        ("--hidden-layers", dict(type=int)),
        ("--model-seed", dict(type=int)),
    ]:
        p_train.add_argument(flag, default=None, **kwargs)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--grid-level", type=int, required=True)
    p_eval.add_argument("--report", required=True)
    p_eval.add_argument("--csv", default=None, help="per-record error CSV path")
    p_eval.add_argument("--topk", type=int, default=None)
    p_eval.add_argument("--max-records", type=int, default=None)
    p_eval.add_argument("--precision", choices=["f32", "f64"], default="f32")
    p_eval.add_argument("--exact-ll", action="store_true",
                        help="score annotations by querying the model at the "
                             "exact pose instead of the nearest cell")

    p_pred = sub.add_parser("predict", help="predict pose(s) for one descriptor")
    p_pred.add_argument("--ckpt", required=True)
    p_pred.add_argument("--descriptor", required=True,
                        help="file with the descriptor (JSON array or whitespace floats)")
    p_pred.add_argument("--grid-level", type=int, required=True)
    p_pred.add_argument("--ascent-steps", type=int, default=100)
    p_pred.add_argument("--step-size", type=float, default=1e-3)
    p_pred.add_argument("--modes", type=int, default=None,
                        help="also print the top-k modes as JSON lines")
    p_pred.add_argument("--dist-out", default=None)

    p_viz = sub.add_parser("viz", help="render a distribution to SVG")
    p_viz.add_argument("--dist", required=True)
    p_viz.add_argument("--grid", required=True)
    p_viz.add_argument("--out", required=True)
    p_viz.add_argument("--axis", choices=["x", "y", "z"], default="z")
    p_viz.add_argument("--floor", type=float, default=2.0)
    p_viz.add_argument("--width", type=int, default=800)
    p_viz.add_argument("--gt", default=None, help="orbit file drawn as outlines")

    p_bench = sub.add_parser("bench", help="time full-distribution inference")
    p_bench.add_argument("--ckpt", required=True)
    p_bench.add_argument("--levels", default="3,4,5")
    p_bench.add_argument("--reps", type=int, default=5)
    p_bench.add_argument("--out", default=None, help="CSV path (default stdout)")
    return parser


def _cmd_grid_gen(args):
    from . import grid as grid_mod

    g = grid_mod.generate_grid(args.level)
    grid_mod.write_grid(g, args.out)
    config = {"command": "grid gen", "level": args.level, "out": args.out}
    _write_sidecar(args.out, config)
    _log(f"wrote level-{args.level} grid ({len(g)} cells) to {args.out}")
    return 0


def _cmd_synth(args):
    from . import symsol

    records = symsol.generate_dataset(args.kind, args.n, args.noise,
                                      seed=args.seed, dim=args.dim)
    symsol.write_dataset(records, args.out)
    config = {"command": "synth", "kind": args.kind, "n": args.n,
              "noise": args.noise, "seed": args.seed, "dim": args.dim,
              "out": args.out}
    _write_sidecar(args.out, config)
    _log(f"wrote {len(records)} {args.kind} records to {args.out}")
    return 0


_MODEL_KEYS = ("pe_frequencies", "hidden_width", "hidden_layers", "model_seed")


def _cmd_train(args):
    from . import model as model_mod
    from . import symsol, train as train_mod

    options = _parse_config_file(args.config) if args.config else {}
    for key in list(options) + list(_MODEL_KEYS):
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            options[key] = flag_value
    for key, value in vars(args).items():
        if key in ("config", "data", "out", "trace", "command", "threads") or value is None:
            continue
        options[key] = value

    model_opts = {k: options.pop(k) for k in list(options) if k in _MODEL_KEYS}
    records = symsol.read_dataset(args.data)
    if not records:
        raise ValueError(f"{args.data}: empty dataset")
    config = train_mod.config_from_mapping(options)
    mcfg = model_mod.ModelConfig(
        descriptor_dim=len(records[0].descriptor),
        pe_frequencies=int(model_opts.get("pe_frequencies", 3)),
        hidden_width=int(model_opts.get("hidden_width", 256)),
        hidden_layers=int(model_opts.get("hidden_layers", 4)),
        seed=int(model_opts.get("model_seed", 0)),
    )
    model = model_mod.ImplicitDensityModel(mcfg)
    _log(f"training on {len(records)} records: {config}")

    def progress(step, lr, loss):
        if step % 200 == 0 or step == config.total_steps - 1:
            _log(f"step {step}: lr {lr:.3e} loss {loss:.4f}")

    trace_path = args.trace or (args.out + ".trace.csv")
    result = train_mod.train(model, records, config, trace_path=trace_path,
                             progress=progress)
    effective = {"command": "train", "data": args.data, "out": args.out,
                 "model": mcfg.__dict__ | {"descriptor_dim": mcfg.descriptor_dim},
                 "train": {k: getattr(config, k) for k in config.__dataclass_fields__}}
    model_mod.save_checkpoint(model, args.out, extra_metadata=effective)
    _write_sidecar(args.out, effective)
    _log(f"final loss {result.final_loss:.4f}; checkpoint at {args.out}")
    return 0


def _records_to_eval(records, dists, grid):
    """Pair dataset records with distributions, attaching orbits when known."""
    import numpy as np

    from . import symsol
    from .infer import PoseDistribution
    from .metrics import EvalRecord

    out = []
    for rec, dens in zip(records, dists):
        kind = rec.group_kind
        gt_full = None
        if kind in symsol.DISCRETE_KINDS + symsol.CONTINUOUS_KINDS:
            group = symsol._group_cached(kind) if kind in symsol.DISCRETE_KINDS \
                else symsol.build_group(kind)
            gt_full = symsol.orbit(rec.gt_rotation, group)
        elif kind == "sphereX" and symsol.marker_visible(rec.gt_rotation):
            gt_full = rec.gt_rotation.quaternion.reshape(1, 4)
        out.append(EvalRecord(
            distribution=PoseDistribution(grid_level=grid.level,
                                          densities=np.asarray(dens)),
            gt_annotated=rec.gt_rotation,
            gt_full=gt_full,
        ))
    return out


def _cmd_eval(args):
    import numpy as np

    from . import infer, metrics, model as model_mod, symsol
    from .grid import generate_grid

    model, _ = model_mod.load_checkpoint(args.ckpt)
    records = symsol.read_dataset(args.data)
    if args.max_records:
        records = records[: args.max_records]
    grid = generate_grid(args.grid_level)
    dtype = np.float32 if args.precision == "f32" else np.float64
    desc = np.stack([r.descriptor for r in records])
    _log(f"evaluating {len(records)} records at level {args.grid_level}")
    dists = infer.evaluate_distributions(model, desc, grid, dtype=dtype)
    eval_records = _records_to_eval(records, dists, grid)

    argmaxes = [grid.rotation(int(np.argmax(d))) for d in dists]
    mode_sets = None
    topk = ()
    if args.topk:
        mode_sets = []
        for er in eval_records:
            try:
                mode_sets.append(infer.extract_modes(er.distribution, grid))
            except infer.EmptyModeSet:
                mode_sets.append(None)
        keep = [i for i, m in enumerate(mode_sets) if m is not None]
        if len(keep) < len(mode_sets):
            _log(f"{len(mode_sets) - len(keep)} records had no above-floor mode")
        mode_sets = [mode_sets[i] for i in keep]
        eval_for_topk = [eval_records[i] for i in keep]
        topk = tuple(range(1, args.topk + 1))
    report, errors = metrics.build_report(eval_records, grid, predictions=argmaxes,
                                          mode_sets=None, topk=())
    if args.topk and mode_sets:
        tk_report, _ = metrics.build_report(eval_for_topk, grid, predictions=None,
                                            mode_sets=mode_sets, topk=topk)
        report["topk"] = tk_report["topk"]
    if args.exact_ll:
        report["avg_log_likelihood_exact"] = _exact_ll(model, records, grid, dtype)
    report["config"] = {"command": "eval", "ckpt": args.ckpt, "data": args.data,
                        "grid_level": args.grid_level, "topk": args.topk,
                        "precision": args.precision,
                        "max_records": args.max_records}
    metrics.write_report(args.report, report)
    csv_path = args.csv or (args.report + ".errors.csv")
    metrics.write_per_record_csv(csv_path, errors)
    _log(f"avg log-likelihood {report['avg_log_likelihood']:.4f}; report at {args.report}")
    return 0


def _exact_ll(model, records, grid, dtype):
    """Score each annotation by querying the model at the exact pose."""
    import math

    import numpy as np

    from . import model as model_mod
    from .infer import grid_scores

    total = 0.0
    for rec in records:
        scores = grid_scores(model, rec.descriptor, grid, dtype=dtype)
        f_gt = float(model_mod.forward(model, rec.descriptor, rec.gt_rotation)[0])
        peak = max(scores.max(), f_gt)
        lse = math.log(np.exp(scores - peak).sum()) + peak
        total += f_gt - lse - math.log(math.pi ** 2 / len(grid))
    return total / len(records)


def _read_descriptor(path):
    import numpy as np

    text = open(path).read().strip()
    try:
        values = json.loads(text)
    except json.JSONDecodeError:
        values = [float(tok) for tok in text.split()]
    return np.asarray(values, dtype=np.float64)


def _cmd_predict(args):
    from . import infer, model as model_mod
    from .grid import generate_grid

    model, _ = model_mod.load_checkpoint(args.ckpt)
    descriptor = _read_descriptor(args.descriptor)
    grid = generate_grid(args.grid_level)
    pose = infer.predict_pose(model, descriptor, grid,
                              ascent_steps=args.ascent_steps,
                              step_size=args.step_size)
    print(json.dumps({"quaternion": [float(v) for v in pose.quaternion]}))
    if args.modes or args.dist_out:
        dist = infer.evaluate_distribution(model, descriptor, grid)
        if args.dist_out:
            infer.write_distribution(dist, args.dist_out)
            _write_sidecar(args.dist_out, {"command": "predict", "ckpt": args.ckpt,
                                           "grid_level": args.grid_level})
        if args.modes:
            modes = infer.extract_modes(dist, grid)
            for rank, mode in enumerate(modes.modes[: args.modes], start=1):
                print(json.dumps({
                    "rank": rank,
                    "quaternion": [float(v) for v in mode.center.quaternion],
                    "mass": mode.mass,
                }))
    return 0


def _cmd_viz(args):
    from . import grid as grid_mod, infer, viz

    dist = infer.read_distribution(args.dist)
    grid = grid_mod.read_grid(args.grid)
    if grid.level != dist.grid_level or len(grid) != dist.densities.shape[0]:
        raise ValueError(f"{args.dist}: distribution level {dist.grid_level} "
                         f"does not match grid level {grid.level}")
    gt_orbit = None
    if args.gt:
        _, gt_orbit = grid_mod_read_rotations(args.gt)
    config = viz.VizConfig(canonical_axis=args.axis, density_floor=args.floor,
                           width=args.width, gt_orbit=gt_orbit)
    viz.render(dist, grid, config, args.out)
    _write_sidecar(args.out, {"command": "viz", "dist": args.dist,
                              "grid": args.grid, "axis": args.axis,
                              "floor": args.floor, "width": args.width,
                              "gt": args.gt, "out": args.out})
    _log(f"wrote {args.out}")
    return 0


def grid_mod_read_rotations(path):
    """Lenient SO3G reader for orbit dumps (count need not match the level)."""
    import struct

    import numpy as np

    from .grid import GRID_MAGIC

    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GRID_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {GRID_MAGIC!r}")
        version, level = struct.unpack("<BB", fh.read(2))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        (count,) = struct.unpack("<Q", fh.read(8))
        q = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64).reshape(-1, 4)
        if q.shape[0] != count:
            raise ValueError(f"{path}: truncated payload")
    return level, q


def _cmd_bench(args):
    from . import bench, model as model_mod

    model, _ = model_mod.load_checkpoint(args.ckpt)
    levels = [int(tok) for tok in args.levels.split(",") if tok]
    results = []
    for level in levels:
        res = bench.time_inference(model, level, repetitions=args.reps)
        _log(f"level {level}: {res.median_seconds:.4f}s/frame "
             f"({res.frames_per_second:.2f} fps)")
        results.append(res)
    if args.out:
        bench.write_bench_csv(args.out, results)
        _write_sidecar(args.out, {"command": "bench", "ckpt": args.ckpt,
                                  "levels": levels, "reps": args.reps})
    else:
        print("level,cells,median_seconds,fps")
        for r in results:
            print(f"{r.level},{r.cells},{r.median_seconds:.6f},{r.frames_per_second:.4f}")
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "viz": _cmd_viz,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return 0 if exc.code in (0, None) else 1
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        if args.command == "grid":
            return _cmd_grid_gen(args)
        return _HANDLERS[args.command](args)
    except (ValueError, OSError) as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
