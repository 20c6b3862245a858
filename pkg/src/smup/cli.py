"""Command-line interface: ``smup <command> [flags]``.

Exit codes: 0 ok, 2 usage, 3 data mismatch / invalid data, 4 malformed
input, 5 internal error. Every command writes a JSON manifest with SHA-256
digests of its inputs and outputs next to its output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import traceback
from pathlib import Path

from smup.exceptions import GridMismatchError, InvalidInputError, MalformedInputError, SmupError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_MALFORMED = 4
EXIT_INTERNAL = 5

log = logging.getLogger("smup")


class UsageError(SmupError):
    pass


def _default_threads() -> int:
    env = os.environ.get("SMUP_THREADS")
    if env:
        try:
            return max(int(env), 1)
        except ValueError:
            pass
    return 1


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected VAR=PATH, got {text!r}")
    k, v = text.split("=", 1)
    if not k or not v:
        raise argparse.ArgumentTypeError(f"expected VAR=PATH, got {text!r}")
    return k, v


def _pair(text: str) -> tuple[str, str]:
    parts = text.split(",")
    if len(parts) != 2 or not all(parts):
        raise argparse.ArgumentTypeError(f"expected FINE,COARSE paths, got {text!r}")
    return parts[0], parts[1]


def _digests(paths) -> dict:
    from smup.pipeline import sha256_file

    out = {}
    for p in paths:
        p = Path(p)
        for cand in ([p] if p.suffix else [Path(f"{p}.json"), Path(f"{p}.bin")]):
            if cand.is_file():
                out[str(cand)] = sha256_file(cand)
    return out


def _write_manifest(target: Path, command: str, args: argparse.Namespace, inputs, outputs) -> Path:
    target = Path(target)
    path = target / "manifest.json" if target.is_dir() else Path(f"{target}.manifest.json")
    params = {k: v for k, v in vars(args).items() if k not in ("func",)}
    doc = {
        "command": command,
        "args": json.loads(json.dumps(params, default=str)),
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
        "inputs": _digests(inputs),
        "outputs": _digests(outputs),
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _stack(args):
    from smup.pipeline import load_stack

    dynamic = dict(args.dynamic or [])
    static = dict(args.static or [])
    if not dynamic and not static:
        raise UsageError("at least one --dynamic or --static predictor is required")
    return load_stack(dynamic, static), dynamic, static


def _stack_inputs(dynamic, static):
    paths = []
    for var, d in dynamic.items():
        paths += sorted(m.with_suffix("") for m in Path(d).glob(f"{var}_*.json"))
    paths += [Path(p) for p in static.values()]
    return paths


def _train_config(args):
    from smup.gbdt import TrainConfig

    base = {}
    if getattr(args, "train_config", None):
        base = _load_json(args.train_config)
    overrides = {
        "n_rounds": args.rounds,
        "learning_rate": args.eta,
        "max_depth": args.max_depth,
        "reg_lambda": args.reg_lambda,
        "gamma": args.gamma,
        "min_child_weight": args.min_child_weight,
        "subsample": args.subsample,
        "colsample": args.colsample,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    base["seed"] = args.seed
    return TrainConfig.from_dict(base)


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedInputError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise MalformedInputError(f"{path}: {exc}") from exc


# -- commands -----------------------------------------------------------------


def cmd_resample(args):
    from smup.grid import GeoGrid, read_raster, resample_nearest, write_raster

    src = read_raster(args.input)
    if args.like:
        target = read_raster(args.like).grid
    elif args.extent:
        target = GeoGrid.from_extent(*args.extent, cellsize=args.cellsize)
    else:
        raise UsageError("resample needs --like or --extent")
    out = write_raster(resample_nearest(src, target), args.out)
    _write_manifest(out, "resample", args, [args.input] + ([args.like] if args.like else []), [out])


def cmd_fuse(args):
    from smup.fusion import FusionParams, ScenePair, estarfm_fuse, ub_estarfm_fuse
    from smup.grid import dated_name, read_timed, split_dated_name, write_raster

    p1 = ScenePair(read_timed(args.pair1[0]), read_timed(args.pair1[1]))
    p2 = ScenePair(read_timed(args.pair2[0]), read_timed(args.pair2[1]))
    ctp = read_timed(args.coarse_tp)
    params = FusionParams(
        window=args.window, num_classes=args.classes, min_similar=args.min_similar, coeff_clip=args.coeff_clip
    )
    fuse = ub_estarfm_fuse if args.method == "ubestarfm" else estarfm_fuse
    fused = fuse(p1, p2, ctp, params=params, threads=args.threads)
    var = args.var or split_dated_name(args.pair1[0])[0]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = write_raster(fused.raster, out_dir / dated_name(var, fused.date))
    _write_manifest(out, "fuse", args, [*args.pair1, *args.pair2, args.coarse_tp], [out])


def cmd_train(args):
    from smup.gbdt import save_model, train
    from smup.pipeline import build_training_table, read_sites_csv

    stack, dynamic, static = _stack(args)
    sites = read_sites_csv(args.sites)
    matrix = build_training_table(stack, sites)
    model = train(matrix.table, matrix.labels, _train_config(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    log.info("trained on %d rows; dropped %s", matrix.n_rows, matrix.drops)
    _write_manifest(out, "train", args, [args.sites, *_stack_inputs(dynamic, static)], [out])


def cmd_predict(args):
    from smup.gbdt import load_model
    from smup.grid import dated_name, parse_date, write_raster
    from smup.pipeline import upscale_predict

    model = load_model(args.model)
    stack, dynamic, static = _stack(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for d in args.date:
        sm = upscale_predict(model, stack, parse_date(d), threads=args.threads)
        written.append(write_raster(sm.raster, out_dir / dated_name("sm", sm.date)))
    _write_manifest(out_dir, "predict", args, [args.model, *_stack_inputs(dynamic, static)], written)


def cmd_validate(args):
    from smup.pipeline import build_training_table, read_sites_csv
    from smup.validation import cross_validate_matrix, make_split

    stack, dynamic, static = _stack(args)
    sites = read_sites_csv(args.sites)
    matrix = build_training_table(stack, sites)
    plan = make_split(sites, args.mode, k=args.k, seed=args.seed)
    report = cross_validate_matrix(
        matrix, plan, _train_config(args), threads=args.threads, permute_seed=args.seed if args.permute else None
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    _write_manifest(out, "validate", args, [args.sites, *_stack_inputs(dynamic, static)], [out])


def cmd_shap(args):
    from smup.gbdt import load_model
    from smup.pipeline import build_training_table, read_sites_csv, write_shap_csv
    from smup.shap import shap_summary, summary_to_dict, tree_shap_many

    model = load_model(args.model)
    stack, dynamic, static = _stack(args)
    matrix = build_training_table(stack, read_sites_csv(args.sites))
    X = matrix.table.values if args.max_rows is None else matrix.table.values[: args.max_rows]
    from smup.gbdt import FeatureTable

    table = FeatureTable(X, matrix.table.feature_names)
    phi, base = tree_shap_many(model, table)
    preds = model.predict(table)
    csv_path = write_shap_csv(args.out_csv, model.feature_names, phi, base, preds)
    summary_path = Path(args.out_summary)
    summary_path.parent.mkdir(parents=True, exist_ok=True)
    summary_path.write_text(json.dumps(summary_to_dict(shap_summary(list(phi), model.feature_names)), indent=2) + "\n")
    _write_manifest(csv_path, "shap", args, [args.model, args.sites, *_stack_inputs(dynamic, static)], [csv_path, summary_path])


def cmd_plot(args):
    from smup import plots

    doc = _load_json(args.input)
    if not isinstance(doc, dict):
        raise MalformedInputError(f"{args.input}: expected a JSON object")
    if args.kind == "taylor":
        svg = plots.taylor_svg(plots.taylor_series_from_doc(doc))
    elif args.kind == "density":
        x, y = plots.density_xy_from_doc(doc)
        try:
            svg = plots.density_svg(x, y, nbins=args.nbins, xlabel=doc.get("xlabel", "observed"), ylabel=doc.get("ylabel", "predicted"))
        except (TypeError, ValueError) as exc:
            raise MalformedInputError(f"{args.input}: {exc}") from exc
    else:
        svg = plots.violin_svg(doc, top=args.top)
    out = plots.write_svg(svg, args.out)
    _write_manifest(out, "plot", args, [args.input], [out])


def cmd_run(args):
    from smup.pipeline import ExperimentError, load_config, run_experiment

    config, base = load_config(args.config)
    try:
        result = run_experiment(config, base, threads=args.threads)
    except ExperimentError as exc:
        print(f"smup run: stage {exc.stage!r} failed: {exc.cause}", file=sys.stderr)
        raise exc.cause from exc
    print(json.dumps({k: str(v) for k, v in result.outputs.items()}, indent=2))


# -- parser -------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--seed", type=int, default=42, help="seed for every random draw (default 42)")
    p.add_argument("--threads", type=int, default=None, help="worker cap; falls back to $SMUP_THREADS, then 1")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_stack(p):
    p.add_argument("--dynamic", type=_kv, action="append", metavar="VAR=DIR", help="directory of VAR_<date> rasters")
    p.add_argument("--static", type=_kv, action="append", metavar="VAR=PATH", help="static raster base path")


def _add_train(p):
    p.add_argument("--train-config", help="JSON file with train settings")
    p.add_argument("--rounds", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--lambda", dest="reg_lambda", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--min-child-weight", type=float)
    p.add_argument("--subsample", type=float)
    p.add_argument("--colsample", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smup", description="Soil-moisture upscaling toolkit", allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("resample", help="nearest-neighbour resampling", allow_abbrev=False)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--like", help="raster whose grid is the target")
    p.add_argument("--extent", type=float, nargs=4, metavar=("WEST", "SOUTH", "EAST", "NORTH"))
    p.add_argument("--cellsize", type=float, default=0.001)
    _add_common(p)
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("fuse", help="ESTARFM / ubESTARFM fusion", allow_abbrev=False)
    p.add_argument("--method", choices=["estarfm", "ubestarfm"], required=True)
    p.add_argument("--pair1", type=_pair, required=True, metavar="FINE,COARSE")
    p.add_argument("--pair2", type=_pair, required=True, metavar="FINE,COARSE")
    p.add_argument("--coarse-tp", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--var", help="output variable name (default: from --pair1 fine name)")
    p.add_argument("--window", type=int, default=51)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--min-similar", type=int, default=5)
    p.add_argument("--coeff-clip", type=float, default=5.0)
    _add_common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train", help="train the boosted-tree model", allow_abbrev=False)
    p.add_argument("--sites", required=True)
    p.add_argument("--out", required=True)
    _add_stack(p)
    _add_train(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="produce upscaled SM rasters", allow_abbrev=False)
    p.add_argument("--model", required=True)
    p.add_argument("--date", action="append", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_stack(p)
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("validate", help="four-fold or cross-cluster validation", allow_abbrev=False)
    p.add_argument("--sites", required=True)
    p.add_argument("--mode", choices=["four-fold", "cross-cluster"], default="four-fold")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--permute", action="store_true", help="shuffled-label control")
    p.add_argument("--out", required=True)
    _add_stack(p)
    _add_train(p)
    _add_common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("shap", help="TreeSHAP attributions for training rows", allow_abbrev=False)
    p.add_argument("--model", required=True)
    p.add_argument("--sites", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-summary", required=True)
    p.add_argument("--max-rows", type=int)
    _add_stack(p)
    _add_common(p)
    p.set_defaults(func=cmd_shap)

    p = sub.add_parser("plot", help="emit an SVG figure", allow_abbrev=False)
    p.add_argument("--kind", choices=["density", "taylor", "violin"], required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nbins", type=int, default=100)
    p.add_argument("--top", type=int, default=6)
    _add_common(p)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("run", help="run a full experiment from a config JSON", allow_abbrev=False)
    p.add_argument("--config", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_run)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (MalformedInputError, json.JSONDecodeError, FileNotFoundError)):
        return EXIT_MALFORMED
    if isinstance(exc, (GridMismatchError, InvalidInputError)):
        return EXIT_DATA
    return EXIT_INTERNAL


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is None:
        args.threads = _default_threads()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"smup {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        code = exit_code_for(exc)
        print(f"smup {args.command}: {exc}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            traceback.print_exc(file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
