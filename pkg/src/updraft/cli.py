"""Batch command line: synth, prepare, train, hypersearch, predict, evaluate, regrid, timeit.

Every subcommand writes into ``--out`` and drops a ``<command>_config.json``
sidecar holding the fully resolved arguments.  Exit codes: 0 success,
2 usage error, 3 validation error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataprep, regrid, shash, verify
from .errors import DomainError, FormatError, TrainingDivergedError, UndefinedMetricError, ValidationError
from .grid_io import Grid3D, composite_max, read_grid, read_terrain, write_grid
from .loss import LossConfig, WeightPolicy
from .model.baseline import LinearBaseline, linreg_baseline
from .model.checkpoint import load_checkpoint, save_checkpoint
from .model.network import INPUT_MODES, SKIP_STYLES, ModelSpec, prepare_input
from .model.search import HyperSpace, hypersearch
from .model.train import TrainConfig, build_network, median_r2, predict, train

log = logging.getLogger("updraft")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _require(path, what):
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- argument parsing -----------------------------------------------------


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--input-mode", choices=INPUT_MODES, default="levels_2d")
    g.add_argument("--depth", type=int, default=2)
    g.add_argument("--filters", type=int, default=8, help="base filter count")
    g.add_argument("--kernel", type=int, default=3)
    g.add_argument("--skip-style", choices=SKIP_STYLES, default="unet")
    g.add_argument("--batch-norm", action="store_true")
    g.add_argument("--l2", type=float, default=0.0)


def _add_train_args(p):
    g = p.add_argument_group("training")
    g.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--epochs", type=int, default=200)
    g.add_argument("--patience", type=int, default=10)
    g.add_argument("--max-steps", type=int, default=None)
    g.add_argument("--epsilon", type=float, default=1e-7)
    g.add_argument("--weight-threshold", type=float, default=0.0)
    g.add_argument("--weight-above", type=float, default=1.0)
    g.add_argument("--dtype", choices=("float32", "float64"), default="float32")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of default argument values")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    common.add_argument("--out", default="out", help="output directory (regrid: output file or directory)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="updraft", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("synth", parents=[common], help="generate synthetic storm scenes")
    p.add_argument("--n-scenes", type=int, default=1200)
    p.add_argument("--ny", type=int, default=64)
    p.add_argument("--nx", type=int, default=64)
    p.add_argument("--storms", type=_ints, default=[1, 5], help="min,max storms per scene")
    p.add_argument("--intensity", type=_floats, default=[40.0, 65.0], help="peak dBZ range low,high")
    p.add_argument("--n-levels", type=int, default=12, help="levels spanning 0.5-17 km AGL")

    p = sub.add_parser("prepare", parents=[common], help="slice, filter, scale and archive patches")
    p.add_argument("--scenes", required=True, help="directory written by synth")
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--counts", type=_ints, default=[512, 128, 128], help="train,val,test sample counts")
    p.add_argument("--threshold", type=float, default=10.0, help="convection filter, m/s")
    p.add_argument("--tries", type=int, default=10, help="slice attempts per scene")

    p = sub.add_parser("train", parents=[common], help="train one model (or the linear baseline)")
    p.add_argument("--data", required=True, help="directory with train.json and val.json")
    p.add_argument("--baseline", action="store_true", help="fit the 30 dBZ linear regression instead")
    _add_model_args(p)
    _add_train_args(p)

    p = sub.add_parser("hypersearch", parents=[common], help="random hyperparameter search")
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=10, help="number of sampled configurations")
    p.add_argument("--space", help="JSON file overriding candidate lists")
    _add_model_args(p)
    _add_train_args(p)

    p = sub.add_parser("predict", parents=[common], help="median / quantile / exceedance maps")
    p.add_argument("--model", required=True, help="checkpoint from train (or linreg.json)")
    p.add_argument("--input", required=True, help="split manifest JSON or raw reflectivity ZGRID (dBZ)")
    p.add_argument("--quantiles", type=_floats, default=[0.5, 0.8, 0.95])
    p.add_argument("--exceedance", type=_floats, default=[10.0], help="m/s levels for P(w >= v)")

    p = sub.add_parser("evaluate", parents=[common], help="verification report")
    p.add_argument("--pred", required=True, help="predictions.json from predict, or a ZGRID field")
    p.add_argument("--truth", help="ZGRID truth (required when --pred is a ZGRID)")
    p.add_argument("--thresholds", type=_floats, default=[5.0, 10.0, 15.0])
    p.add_argument("--area-threshold", type=float, default=5.0)

    p = sub.add_parser(
        "regrid",
        parents=[common],
        help="MSL->AGL, nearest-neighbour resample, block mean",
        description="Distances for nearest-neighbour search are Euclidean in the grid's own "
        "horizontal units (km or degrees); no geodesic correction is applied.",
    )
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--terrain", help="terrain ZGRID (km MSL); triggers MSL->AGL conversion")
    p.add_argument("--levels", default="0.5:17:24", help="AGL targets start:stop:count or list")
    p.add_argument("--dst-coords", help="JSON {y_coords, x_coords} or a ZGRID whose grid to adopt")
    p.add_argument("--block-mean", type=int, default=None)

    p = sub.add_parser("timeit", parents=[common], help="inference timing")
    p.add_argument("--model", help="checkpoint; untrained default network when omitted")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--n-batches", type=int, default=30)
    p.add_argument("--patch", type=int, default=32)
    _add_model_args(p)
    p.add_argument("--n-levels", type=int, default=12)
    subs.update(sub.choices)
    return parser, subs


def parse_args(argv):
    """Parse ``argv``; values from ``--config`` act as defaults that flags override."""
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(_require(args.config, "config file").read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file is not valid JSON: {exc}") from exc
        flat = {k.replace("-", "_"): v for k, v in overrides.items() if not isinstance(v, dict)}
        flat.update({k.replace("-", "_"): v for k, v in overrides.get(args.command, {}).items()})
        unknown = sorted(k for k in flat if k not in vars(args))
        if unknown:
            raise ValidationError(f"unknown config keys for {args.command}: {unknown}")
        subs[args.command].set_defaults(**flat)
        args = parser.parse_args(argv)
    return args


def _spec_from_args(args, n_levels):
    return ModelSpec(
        input_mode=args.input_mode,
        depth=args.depth,
        base_filters=args.filters,
        kernel_size=args.kernel,
        skip_style=args.skip_style,
        batch_norm=args.batch_norm,
        l2_reg=args.l2,
        n_levels=n_levels,
    )


def _cfg_from_args(args):
    return TrainConfig(
        optimizer=args.optimizer,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        max_steps=args.max_steps,
        seed=args.seed,
        dtype=args.dtype,
        loss=LossConfig(args.epsilon, WeightPolicy(args.weight_threshold, args.weight_above)),
    )


# -- subcommands ------------------------------------------------------------


def cmd_synth(args, out):
    if args.n_scenes < 1:
        raise ValidationError("--n-scenes must be >= 1")
    if len(args.storms) != 2 or args.storms[0] < 0 or args.storms[1] < args.storms[0]:
        raise ValidationError("--storms must be min,max with 0 <= min <= max")
    if len(args.intensity) != 2 or args.intensity[1] < args.intensity[0]:
        raise ValidationError("--intensity must be low,high")
    levels = np.linspace(0.5, 17.0, args.n_levels)
    stream = dataprep.scene_stream(args.seed, (args.ny, args.nx), tuple(args.storms), tuple(args.intensity), levels)
    scene_dir = out / "scenes"
    scene_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for _ in range(args.n_scenes):
        refl, w = next(stream)
        rp, wp = f"scenes/{refl.name}_refl.zgrid", f"scenes/{refl.name}_w.zgrid"
        write_grid(refl, out / rp)
        write_grid(w, out / wp)
        entries.append({"name": refl.name, "refl": rp, "w": wp})
    _dump(out / "scenes.json", {"seed": args.seed, "scenes": entries})
    log.info("wrote %d scenes to %s", len(entries), scene_dir)


def _scene_reader(scene_root):
    index = json.loads(_require(Path(scene_root) / "scenes.json", "scene index").read_text())
    for e in index["scenes"]:
        yield read_grid(Path(scene_root) / e["refl"]), read_grid(Path(scene_root) / e["w"])


def cmd_prepare(args, out):
    if len(args.counts) != 3:
        raise ValidationError("--counts needs train,val,test")
    counts = dict(zip(dataprep.SPLITS, args.counts))
    manifest = dataprep.build_splits(
        _scene_reader(args.scenes), counts, (args.patch, args.patch), args.threshold, args.tries, args.seed
    )
    scaler = dataprep.fit_scaler(manifest.train)
    levels = None
    for split in dataprep.SPLITS:
        samples = getattr(manifest, split)
        if not samples:
            continue
        if levels is None:
            levels = read_grid(Path(args.scenes) / json.loads((Path(args.scenes) / "scenes.json").read_text())["scenes"][0]["refl"]).z_coords
        dataprep.write_split(samples, split, scaler, out, levels=levels)
    _dump(out / "splits.json", {"counts": manifest.counts(), "fractions": manifest.fractions(), "scaler": scaler.to_dict()})


def _load_split(data_dir, split):
    return dataprep.ManifestDataset(_require(Path(data_dir) / f"{split}.json", f"{split} manifest"))


def _cached(ds):
    x, y = ds.all()
    return dataprep.ArrayDataset(x, y)


def cmd_train(args, out):
    train_ds = _load_split(args.data, "train")
    val_ds = _load_split(args.data, "val")
    scaler = train_ds.scaler
    if args.baseline:
        x, y = train_ds.all()
        comp = dataprep.invert_scaler(x.max(axis=1), scaler)
        model = linreg_baseline(comp, y)
        vx, vy = val_ds.all()
        r2 = verify.r_squared(vy, model.predict(dataprep.invert_scaler(vx.max(axis=1), scaler)))
        _dump(out / "linreg.json", {"kind": "linreg", "slope": model.slope, "intercept": model.intercept,
                                     "mask_dbz": model.mask_dbz, "scaler": scaler.to_dict(), "val_r2": r2})
        log.info("linear baseline val R^2 = %.4f", r2)
        return
    n_levels, h, w = train_ds.sample_shape
    spec = _spec_from_args(args, n_levels)
    spec.check_patch(h, w)
    cfg = _cfg_from_args(args)
    train_mem, val_mem = _cached(train_ds), _cached(val_ds)
    state, history = train(spec, train_mem, val_mem, cfg)
    r2 = median_r2(spec, state, val_mem)
    save_checkpoint(out / "model.ckpt", spec, state, cfg, metrics={"val_r2": r2}, extra={"scaler": scaler.to_dict()})
    _dump(out / "history.json", {"history": history, "best_epoch": state.best_epoch, "val_r2": r2})
    log.info("best epoch %d, val R^2 = %.4f", state.best_epoch, r2)


def cmd_hypersearch(args, out):
    train_ds = _load_split(args.data, "train")
    val_ds = _load_split(args.data, "val")
    space = HyperSpace()
    if args.space:
        space = HyperSpace.from_dict(json.loads(_require(args.space, "space file").read_text()))
    n_levels, _, _ = train_ds.sample_shape
    base_spec = _spec_from_args(args, n_levels)
    result = hypersearch(space, args.n, args.seed, _cached(train_ds), _cached(val_ds), base_spec, _cfg_from_args(args))
    runs = []
    for run in result.runs:
        runs.append({
            "index": run["index"],
            "spec": run["spec"].to_dict(),
            "config": run["config"].to_dict(),
            "val_r2": run["r2"],
            "epochs": len(run["history"]),
            "error": run.get("error"),
        })
    best = result.best
    if best is not None:
        save_checkpoint(out / "best.ckpt", best["spec"], best["state"], best["config"],
                        metrics={"val_r2": best["r2"]}, extra={"scaler": train_ds.scaler.to_dict()})
    _dump(out / "search.json", {"runs": runs, "best_index": result.best_index})


def _load_model(path):
    path = _require(path, "model")
    if path.suffix == ".json":
        meta = json.loads(path.read_text())
        if meta.get("kind") != "linreg":
            raise ValidationError(f"{path}: not a linear-baseline model file")
        return "linreg", LinearBaseline(meta["slope"], meta["intercept"], meta["mask_dbz"]), dataprep.ScalerParams.from_dict(meta["scaler"])
    spec, state, header = load_checkpoint(path)
    scaler = header.get("extra", {}).get("scaler")
    return "net", (spec, state), dataprep.ScalerParams.from_dict(scaler) if scaler else None


def _like(values, template_y, template_x, name, units, z=None):
    vals = np.asarray(values, dtype=np.float32)
    if vals.ndim == 2:
        vals = vals[None]
    return Grid3D(name=name, units=units, values=vals, z_coords=z if z is not None else np.arange(vals.shape[0], dtype=float),
                  y_coords=template_y, x_coords=template_x, height_datum="AGL")


def cmd_predict(args, out):
    kind, model, scaler = _load_model(args.model)
    inp = _require(args.input, "input")
    items = []
    if inp.suffix == ".json":
        ds = dataprep.ManifestDataset(inp)
        for i, s in enumerate(ds.samples):
            xg = read_grid(ds.root / s["x_path"])
            items.append((f"{i:06d}", xg, str((ds.root / s["y_path"]).resolve()), xg.values.astype(np.float64)))
    else:
        g = read_grid(inp)
        if scaler is None:
            raise ValidationError("checkpoint lacks scaler parameters; cannot scale raw reflectivity")
        items.append(("000000", g, None, dataprep.apply_scaler(np.where(g.missing_mask(), scaler.min, g.values), scaler)))
    pred_dir = out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for key, grid, truth_path, x in items:
        entry = {"id": key, "source": grid.name, "truth": truth_path}
        if kind == "linreg":
            comp = dataprep.invert_scaler(x.max(axis=0), scaler)
            median_map = model.predict(comp)
        else:
            spec, state = model
            res = predict(spec, state, x[None], quantiles=args.quantiles, exceedance=args.exceedance)
            params = res["params"][0]
            median_map = shash.median(params)
            pg = _like(params.as_array(), grid.y_coords, grid.x_coords, "shash_params", "mu,sigma,gamma,tau")
            write_grid(pg, pred_dir / f"{key}_params.zgrid")
            entry["params"] = f"predictions/{key}_params.zgrid"
            if args.quantiles:
                qs = sorted(res["quantiles"])
                qg = _like(np.stack([res["quantiles"][q][0] for q in qs]), grid.y_coords, grid.x_coords, "quantiles", "m s-1", z=qs)
                write_grid(qg, pred_dir / f"{key}_quantiles.zgrid")
                entry["quantiles"] = f"predictions/{key}_quantiles.zgrid"
            if args.exceedance:
                vs = sorted(res["exceedance"])
                eg = _like(np.stack([res["exceedance"][v][0] for v in vs]), grid.y_coords, grid.x_coords, "exceedance", "1", z=vs)
                write_grid(eg, pred_dir / f"{key}_exceedance.zgrid")
                entry["exceedance"] = f"predictions/{key}_exceedance.zgrid"
        write_grid(_like(median_map, grid.y_coords, grid.x_coords, "median", "m s-1"), pred_dir / f"{key}_median.zgrid")
        entry["median"] = f"predictions/{key}_median.zgrid"
        index.append(entry)
    _dump(out / "predictions.json", {"model": str(Path(args.model).resolve()), "items": index})


def _truth_field(grid):
    return composite_max(grid) if grid.dims[0] > 1 else grid.values[0]


def _metric(fn, *a):
    try:
        return fn(*a)
    except UndefinedMetricError:
        return None


def cmd_evaluate(args, out):
    pred = _require(args.pred, "predictions")
    truths, medians, params = [], [], []
    if pred.suffix == ".json":
        index = json.loads(pred.read_text())
        root = pred.parent
        for item in index["items"]:
            tpath = args.truth or item.get("truth")
            if not tpath:
                raise ValidationError(f"no truth for prediction {item['id']}; pass --truth")
            truths.append(_truth_field(read_grid(_require(tpath, "truth"))).astype(np.float64))
            medians.append(read_grid(root / item["median"]).values[0].astype(np.float64))
            if "params" in item:
                params.append(read_grid(root / item["params"]).values.astype(np.float64))
    else:
        if not args.truth:
            raise ValidationError("--truth is required when --pred is a ZGRID")
        medians.append(_truth_field(read_grid(pred)).astype(np.float64))
        truths.append(_truth_field(read_grid(_require(args.truth, "truth"))).astype(np.float64))
    y = np.stack(truths)
    yhat = np.stack(medians)
    if y.shape != yhat.shape:
        raise ValidationError(f"truth {y.shape} and prediction {yhat.shape} shapes differ")
    sp = None
    if params and len(params) == len(medians):
        sp = shash.ShashParams.stack(np.moveaxis(np.stack(params), 1, 0))
    pairs = verify.EvalPairs(truth=y, pred=yhat, params=sp)
    th = sorted(args.thresholds)
    report = {
        "n_pixels": pairs.n,
        "n_samples": len(truths),
        "rmse": verify.rmse(pairs),
        "crmse": {str(t): _metric(verify.crmse, pairs, t) for t in th},
        "iou": {str(t): _metric(verify.iou, y, yhat, t) for t in th},
        "r2": _metric(verify.r_squared, y, yhat),
        "area_fraction_series": {
            "threshold": args.area_threshold,
            "truth": verify.area_fraction_series(y, args.area_threshold),
            "pred": verify.area_fraction_series(yhat, args.area_threshold),
        },
        "iou_series": {str(t): verify.iou_series(y, yhat, t) for t in th},
        "timings": None,
    }
    if sp is not None:
        hist, edges = verify.pit_histogram(verify.pit(pairs))
        iqrr = verify.iqr_rate(pairs)
        report.update(pit_hist=hist.tolist(), pit_edges=edges.tolist(), pitd=verify.pitd(hist),
                      iqrr=iqrr, iqrr_distance_from_ideal=abs(iqrr - 0.5))
    else:
        report.update(pit_hist=None, pit_edges=None, pitd=None, iqrr=None, iqrr_distance_from_ideal=None)
    _dump(out / "report.json", report)
    with open(out / "timeseries.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "threshold", "iou", "area_truth_pct", "area_pred_pct"])
        for t in th:
            for k in range(len(truths)):
                v = report["iou_series"][str(t)][k]
                wr.writerow([k, t, "" if v is None else repr(v), repr(verify.area_fraction(y[k], t)), repr(verify.area_fraction(yhat[k], t))])
    log.info("RMSE %.4f  R^2 %s", report["rmse"], report["r2"])


def cmd_regrid(args, out):
    grid = read_grid(_require(args.inp, "input grid"))
    if args.terrain:
        grid = regrid.to_agl(grid, read_terrain(_require(args.terrain, "terrain")), regrid.parse_levels(args.levels))
    if args.dst_coords:
        dst = _require(args.dst_coords, "destination coordinates")
        if dst.suffix == ".json":
            d = json.loads(dst.read_text())
            coords = (d["y_coords"], d["x_coords"])
        else:
            g = read_grid(dst)
            coords = (g.y_coords, g.x_coords)
        grid = regrid.nn_resample(grid, coords)
    if args.block_mean:
        grid = regrid.block_mean(grid, args.block_mean)
    target = out / Path(args.inp).name if out.is_dir() else out
    write_grid(grid, target)
    log.info("wrote %s dims %s", target, grid.dims)
    return target


def cmd_timeit(args, out):
    if args.model:
        kind, model, _ = _load_model(args.model)
        if kind != "net":
            raise ValidationError("timeit needs a network checkpoint")
        spec, state = model
    else:
        spec, state = _spec_from_args(args, args.n_levels), None
    spec.check_patch(args.patch, args.patch)
    net = build_network(spec, state, seed=args.seed)

    def run(batch):
        return net.forward(prepare_input(spec, batch), train=False)

    shape = (spec.n_levels, args.patch, args.patch)
    report = verify.timeit(run, shape, args.batch_size, args.n_batches, seed=args.seed)
    report["spec"] = spec.to_dict()
    _dump(out / "timing.json", report)
    log.info("mean %.2f ms/batch (std %.2f) over %d batches", report["mean_ms"], report["std_ms"], args.n_batches)


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "hypersearch": cmd_hypersearch,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "regrid": cmd_regrid,
    "timeit": cmd_timeit,
}


def run(argv=None):
    """Execute one subcommand; returns the process exit code."""
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    if args.command == "regrid" and out.suffix:
        out.parent.mkdir(parents=True, exist_ok=True)
        sidecar = out.parent / "regrid_config.json"
    else:
        out.mkdir(parents=True, exist_ok=True)
        sidecar = out / f"{args.command}_config.json"
    try:
        _dump(sidecar, {k: v for k, v in sorted(vars(args).items())})
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                COMMANDS[args.command](args, out)
        else:
            COMMANDS[args.command](args, out)
    except (ValidationError, FormatError, DomainError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
