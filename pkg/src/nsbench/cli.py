"""Command-line entry point: generate, train, benchmark, inspect, import-weights, reproduce.

Every command that writes an output directory also writes ``run.json``
recording the command line, resolved configuration, seeds and the sha256 of
every input and output file. ``reproduce`` re-runs that command into a
scratch directory and compares the output digests.

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 digest mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .grid import GridSpec, dir_digests, file_digest, read_manifest, read_realization
from .models import TrainedModel, build, default_spec
from .sgs import DATASET_KINDS, default_proportions, default_ranges, estimate_trend_proportion, generate_dataset
from .training import TrainConfig, train
from .evaluation import (compare_models, emit_report, oracle_predictor, report_from_pairs, type1_benchmark,
                         type2_benchmark)
from .variogram import experimental_semivariogram, oracle_range

EXIT_RUNTIME, EXIT_USAGE, EXIT_DIGEST = 1, 2, 3
RUN_FILE = "run.json"
CACHE_ENV = "NSBENCH_CACHE"

PROFILES = {
    # grid side (cells), cell size (m), range scale, replicates per setting
    "paper": {"side": 224, "cell": 5.0, "scale": 1.0, "replicates": 50},
    "desk": {"side": 64, "cell": 5.0, "scale": 64 / 224, "replicates": 10},
}


class DigestMismatch(RuntimeError):
    pass


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _grid(args) -> GridSpec:
    prof = PROFILES[args.profile]
    side = args.size or prof["side"]
    return GridSpec(side, side, args.cell_size or prof["cell"])


def _write_run(out: Path, args, config: dict, seeds: dict, inputs: dict):
    outputs = dir_digests(out, exclude=(RUN_FILE,))
    run = {"tool": "nsbench", "version": __version__, "command": args.command, "argv": args.argv,
           "cwd": os.getcwd(),
           "config": config, "seeds": seeds, "inputs": inputs, "outputs": outputs}
    (out / RUN_FILE).write_text(json.dumps(run, indent=1, sort_keys=True) + "\n")


def _input_digests(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.update({str(p / k): v for k, v in dir_digests(p, exclude=(RUN_FILE,)).items()})
        elif p.exists():
            out[str(p)] = file_digest(p)
    return out


def _prepare_out(out: Path, force: bool):
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (pass --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# subcommands


def generate_settings(args):
    """(grid, ranges, proportions, replicates) resolved from flags and the profile."""
    grid = _grid(args)
    prof = PROFILES[args.profile]
    ranges = _floats(args.ranges) if args.ranges else None
    if ranges is None:
        if args.n_ranges:
            lo, hi = (400.0, 1000.0) if args.kind == "type1" else (40.0, 400.0)
            ranges = [float(v) for v in np.linspace(lo, hi, args.n_ranges) * prof["scale"]]
        else:
            ranges = default_ranges(args.kind, prof["scale"])
    props = _floats(args.proportions) if args.proportions else (default_proportions() if args.kind == "type2" else [])
    n = args.n if args.n is not None else prof["replicates"]
    return grid, ranges, props, n


def cmd_generate(args):
    grid, ranges, props, n = generate_settings(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} exists and is not empty (pass --force to overwrite)")
    manifest = generate_dataset(grid, args.kind, ranges, props, n, args.seed, out, azimuth=args.azimuth,
                                force=args.force, workers=args.threads)
    config = {"grid": grid.to_dict(), "kind": args.kind, "ranges": ranges, "proportions": props,
              "replicates": n, "azimuth": args.azimuth, "profile": args.profile}
    _write_run(out, args, config, {"base_seed": args.seed}, {})
    print(f"wrote {len(manifest.items)} realizations to {out}")


def cmd_train(args):
    manifest = read_manifest(args.data)
    spec = default_spec(args.family, args.profile)
    if spec.input_size != manifest.grid.nx:
        spec = type(spec).from_dict({**spec.to_dict(), "input_size": manifest.grid.nx, "param_budget": None})
    cfg = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, patience=args.patience,
                      augment_to=args.augment_to, val_fraction=args.val_fraction, seed=args.seed,
                      label_scale=args.label_scale)
    out = Path(args.out)
    _prepare_out(out, args.force)

    def progress(d):
        if not args.quiet:
            print(f"epoch {d['epoch']:3d}  train {d['train_loss']:.5f}  val {d['val_loss']:.5f}", flush=True)

    model = train(spec, manifest, cfg, progress=progress)
    model.save(out)
    _write_run(out, args, {"spec": spec.to_dict(), "train": cfg.to_dict(), "data": str(Path(args.data))},
               {"seed": args.seed}, _input_digests([args.data]))
    print(f"best epoch {model.history['best_epoch']}, val loss {model.history['best_val_loss']:.5f}; "
          f"checkpoint in {out}")


def _predictor(path):
    if path == "oracle":
        return oracle_predictor(), None
    model = TrainedModel.load(path)
    return model.predict_range, model


def cmd_benchmark(args):
    grid = _grid(args)
    prof = PROFILES[args.profile]
    cache = os.environ.get(CACHE_ENV) or None
    predict, model = _predictor(args.model)
    inputs = [] if args.model == "oracle" else [args.model]
    if model is not None:
        grid = GridSpec(model.spec.input_size, model.spec.input_size, grid.cell_size)

    def run(pred):
        if args.type == "s":
            if not args.data:
                raise ValueError("--type s needs --data MANIFEST")
            m = read_manifest(args.data)
            reals = m.load_all()
            return report_from_pairs([(r.label.range_m, pred(r)) for r in reals], [r.label for r in reals])
        if args.type == "1":
            ranges = _floats(args.ranges) if args.ranges else default_ranges("type1", prof["scale"])
            return type1_benchmark(pred, grid, ranges, args.n, args.seed, cache_dir=cache, workers=args.threads)
        ranges = _floats(args.ranges) if args.ranges else default_ranges("type2", prof["scale"])
        props = _floats(args.proportions) if args.proportions else default_proportions()
        return type2_benchmark(pred, grid, ranges, props, args.n, args.seed, cache_dir=cache, workers=args.threads)

    if args.data:
        inputs.append(args.data)
    report = run(predict)
    comparison = None
    if args.baseline:
        base_predict, _ = _predictor(args.baseline)
        if args.baseline != "oracle":
            inputs.append(args.baseline)
        comparison = compare_models(run(base_predict), report, seed=args.seed)
    out = Path(args.out)
    _prepare_out(out, args.force)
    emit_report(report, out, comparison)
    _write_run(out, args, {"type": args.type, "grid": grid.to_dict(), "n": args.n, "ranges": args.ranges,
                           "proportions": args.proportions, "model": args.model, "baseline": args.baseline},
               {"base_seed": args.seed}, _input_digests(inputs))
    print(f"{len(report.records)} predictions, mean |relative error| {report.mean_abs_error():.4f}; "
          f"report in {out}")


def cmd_inspect(args):
    r = read_realization(args.file)
    v = r.values.astype(np.float64)
    print(f"grid        {r.grid.nx} x {r.grid.ny} cells, {r.grid.cell_size} m")
    print(f"label       range {r.label.range_m} m, trend proportion {r.label.trend_proportion}, "
          f"seed {r.label.seed}, {r.label.nonstat_type}")
    print(f"values      mean {v.mean():.4f}  variance {v.var():.4f}  min {v.min():.4f}  max {v.max():.4f}")
    ev = experimental_semivariogram(r, n_bins=args.bins)
    print("lag_m       gamma       pairs")
    for lag, g, n in zip(ev.lags, ev.gamma, ev.pair_counts):
        print(f"{lag:<11.2f} {g:<11.5f} {n}")
    print(f"fitted range (spherical)  {oracle_range(r, n_bins=args.bins):.2f} m")
    print(f"trend proportion (linear regression)  {estimate_trend_proportion(r):.4f}")


def cmd_import_weights(args):
    if args.model:
        model = TrainedModel.load(args.model)
    else:
        model = build(default_spec(args.family, args.profile), check=False)
    names = model.import_weights(args.weights)
    out = Path(args.out)
    _prepare_out(out, args.force)
    model.save(out)
    _write_run(out, args, {"spec": model.spec.to_dict(), "weights": str(args.weights)}, {},
               _input_digests([args.weights] + ([args.model] if args.model else [])))
    print(f"imported {len(names)} tensors into {out}")


def cmd_reproduce(args):
    run_dir = Path(args.run)
    run_path = run_dir / RUN_FILE if run_dir.is_dir() else run_dir
    run = json.loads(run_path.read_text())
    prev_cwd = os.getcwd()
    os.chdir(run.get("cwd", prev_cwd))
    try:
        _rerun(run, args)
    finally:
        os.chdir(prev_cwd)


def _rerun(run, args):
    for path, digest in run.get("inputs", {}).items():
        if not Path(path).exists() or file_digest(path) != digest:
            raise DigestMismatch(f"input {path} changed or missing since the run was recorded")
    argv = list(run["argv"])
    with tempfile.TemporaryDirectory(prefix="nsbench-reproduce-") as tmp:
        target = Path(tmp) / "out"
        argv = _replace_out(argv, str(target))
        if args.threads is not None:
            argv = _strip_flag(argv, "--threads") + ["--threads", str(args.threads)]
        code = main(argv + ["--force", "--quiet"] if "--quiet" not in argv else argv + ["--force"])
        if code != 0:
            raise RuntimeError(f"re-run of {run['command']} exited with code {code}")
        got = dir_digests(target, exclude=(RUN_FILE,))
    want = run["outputs"]
    bad = sorted(k for k in set(want) | set(got) if want.get(k) != got.get(k))
    if bad:
        raise DigestMismatch(f"{len(bad)} output file(s) differ: {', '.join(bad[:10])}")
    print(f"reproduced {len(want)} output file(s) of '{run['command']}' byte-for-byte")


def _strip_flag(argv, flag):
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == flag:
            skip = True
            continue
        if a.startswith(flag + "="):
            continue
        out.append(a)
    return out


def _replace_out(argv, new):
    return _strip_flag(_strip_flag(argv, "--out"), "--force") + ["--out", new]


# ---------------------------------------------------------------------------
# parser


def _common(p, out=True):
    p.add_argument("--profile", choices=sorted(PROFILES), default="paper",
                   help="paper: 224x224 cells of 5 m, full settings; desk: 64x64 cells, ranges scaled by 64/224, "
                        "10 replicates (default: paper)")
    p.add_argument("--threads", type=int, default=1,
                   help="worker processes for simulation; results do not depend on it (default: 1)")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress lines")
    if out:
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="replace a non-empty output directory")


def _grid_flags(p):
    p.add_argument("--size", type=int, help="grid side in cells (default: from profile)")
    p.add_argument("--cell-size", type=float, help="cell size in metres (default: 5)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nsbench", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"nsbench {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a labelled realization dataset")
    p.add_argument("--kind", choices=DATASET_KINDS, default="train",
                   help="train: stationary; type1: ranges above domain/3; type2: linear trend + residual")
    p.add_argument("--ranges", help="comma-separated variogram ranges in metres "
                                    "(default: 40-400 m in 10 steps, type1 400-1000 m in 7, times the profile scale)")
    p.add_argument("--n-ranges", type=int, help="number of evenly spaced default ranges instead of 10 (or 7)")
    p.add_argument("--proportions", help="comma-separated trend variance proportions for type2 (default: 0,0.1,...,0.9)")
    p.add_argument("--azimuth", type=float, help="trend azimuth in degrees from the +x axis toward +y "
                                                 "(default: drawn per realization from its seed)")
    p.add_argument("--n", type=int, help="realizations per setting (default: 50 paper, 10 desk)")
    p.add_argument("--seed", type=int, default=0, help="base seed (default: 0)")
    _grid_flags(p)
    _common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a range regressor on a dataset")
    p.add_argument("--family", choices=("cnn", "vit", "swin"), required=True, help="model family")
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--augment-to", type=int, help="training-split size after dihedral augmentation (images)")
    p.add_argument("--seed", type=int, default=0, help="seed for initialization, split, shuffling (default: 0)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default: 1e-3)")
    p.add_argument("--batch", type=int, default=32, help="batch size in images (default: 32)")
    p.add_argument("--epochs", type=int, default=40, help="maximum epochs (default: 40)")
    p.add_argument("--patience", type=int, default=10, help="early-stop patience in epochs (default: 10)")
    p.add_argument("--val-fraction", type=float, default=0.2,
                   help="fraction of each range held out for validation (default: 0.2)")
    p.add_argument("--label-scale", choices=("log", "linear"), default="log",
                   help="regress on log range or on range, each mapped onto [0, 1] (default: log)")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("benchmark", help="score a model on nonstationary or held-out data")
    p.add_argument("--type", choices=("1", "2", "s"), required=True,
                   help="1: type I ranges sweep; 2: range x trend proportion sweep; s: held-out dataset (--data)")
    p.add_argument("--model", required=True, help="checkpoint directory, or 'oracle' for variogram fitting")
    p.add_argument("--baseline", help="second checkpoint (or 'oracle') compared against --model with bootstrap CIs")
    p.add_argument("--data", help="dataset directory for --type s")
    p.add_argument("--ranges", help="comma-separated ranges in metres (default: profile sweep)")
    p.add_argument("--proportions", help="comma-separated trend proportions for --type 2")
    p.add_argument("--n", type=int, default=20, help="realizations per setting (default: 20)")
    p.add_argument("--seed", type=int, default=0, help="base seed for the sweep and bootstrap (default: 0)")
    _grid_flags(p)
    _common(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("inspect", help="print statistics, experimental variogram and fitted range of a file")
    p.add_argument("file", help="realization file")
    p.add_argument("--bins", type=int, default=30, help="variogram lag bins (default: 30)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("import-weights", help="load an external weight archive after name/shape validation")
    p.add_argument("--weights", required=True, help="directory holding weights.bin and weights.json")
    p.add_argument("--model", help="checkpoint providing spec and normalization")
    p.add_argument("--family", choices=("cnn", "vit", "swin"), default="swin",
                   help="model family when --model is not given (default: swin)")
    _common(p)
    p.set_defaults(func=cmd_import_weights)

    p = sub.add_parser("reproduce", help="re-run a recorded command and verify output digests")
    p.add_argument("run", help="output directory containing run.json, or the run.json path")
    p.add_argument("--threads", type=int, help="override the recorded worker count")
    p.set_defaults(func=cmd_reproduce)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    args.argv = argv
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("nsbench: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        # BLAS stays single-threaded so floating-point results never depend on --threads
        with threadpool_limits(limits=1):
            args.func(args)
    except DigestMismatch as exc:
        print(f"nsbench: digest mismatch: {exc}", file=sys.stderr)
        return EXIT_DIGEST
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"nsbench: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
