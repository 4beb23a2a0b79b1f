"""Command-line entry point: ``klfusion <command> [options]``.

Every command reads an optional JSON config, applies flag overrides (flags
win) and writes its outputs plus a ``manifest.json`` into ``--out``.
Diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, pipeline, synth, validation
from .hmm import DateMap
from .kl import concentration_threshold, load_models, save_models, train_tile_models
from .raster import RasterStack, Tile, import_geotiffs, load_stack, write_stack

log = logging.getLogger("klfusion")


# configuration ---------------------------------------------------------------

OVERRIDES = {
    "alpha": "kl.alpha", "energy": "kl.energy", "m": "kl.m", "fill": "kl.fill",
    "tile": None,
    "optical_thresh": "hmm.optical_thresh", "sar_thresh": "hmm.sar_thresh", "ftc": "hmm.ftc",
    "sigma2_weight": "filter.smooth_weight", "sigma3_weight": "filter.temporal_weight",
    "tol": "filter.tol", "max_iters": "filter.max_iters",
    "mode": "mode", "seed": "seed", "workers": "workers", "out": "out",
    "training": "training", "optical": "optical", "sar": "sar", "model": "model",
}


def _ftc_arg(text: str):
    return text if text == "auto" else int(text)


def load_config(args) -> pipeline.PipelineConfig:
    raw = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
    cfg = pipeline.PipelineConfig.from_dict(raw)
    changes = {}
    for flag, key in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None or key is None:
            continue
        changes[key] = value
    if getattr(args, "tile", None):
        changes["kl.tile_rows"] = changes["kl.tile_cols"] = args.tile
    if "workers" not in raw and changes.get("workers") is None:
        changes["workers"] = os.cpu_count() or 1
    cfg = cfg.override(**changes)
    pipeline.PipelineConfig.from_dict(cfg.to_dict())  # re-validate after overrides
    return cfg


def _versions() -> dict:
    import numba
    import scipy

    return {"klfusion": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__}


def _digest_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: pipeline.PipelineConfig | None, outputs: list[Path],
                   extra: dict | None = None) -> None:
    """Run manifest: config, its digest, library versions and output checksums (no clock data)."""
    body = {"command": command, "versions": _versions()}
    if cfg is not None:
        conf = cfg.to_dict()
        conf.pop("workers", None)
        conf.pop("out", None)
        body["config"] = conf
        body["config_digest"] = cfg.digest()
    body["outputs"] = {p.name: _digest_file(p) for p in sorted(outputs)}
    if extra:
        body.update(extra)
    (out / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _stack_files(base: Path) -> list[Path]:
    return [base.with_suffix(".json"), base.with_suffix(".bin")]


def _out_dir(cfg_or_path) -> Path:
    out = Path(cfg_or_path.out if hasattr(cfg_or_path, "out") else (cfg_or_path or "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what):
    if not path:
        raise ValueError(f"no {what} stack given (config key or --{what} flag)")
    return load_stack(path)


# model bundles with tile geometry -----------------------------------------------

def save_tile_models(path: Path, tile_models, height: int, width: int, alpha: float) -> None:
    tiles = [[t.row0, t.col0, t.rows, t.cols] for t, _ in tile_models]
    save_models(path, [m for _, m in tile_models],
                {"tiles": tiles, "height": height, "width": width, "alpha": alpha})


def load_tile_models(path):
    models, header = load_models(path)
    H, W = header["height"], header["width"]
    tiles = [Tile(r, c, nr, nc, H, W) for r, c, nr, nc in header["tiles"]]
    return list(zip(tiles, models)), header


# commands ----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg)
    training = _require(cfg.training, "training")
    tile_models = train_tile_models(training, cfg.anomaly_config())
    base = out / "model"
    save_tile_models(base, tile_models, training.height, training.width, cfg.kl.alpha)
    level = np.zeros(training.height * training.width)
    for _, mdl in tile_models:
        level[mdl.pixel_index] = concentration_threshold(mdl, None, cfg.kl.alpha)
    thr = RasterStack(level.reshape(1, training.height, training.width).astype(np.float32), [0],
                      "optical-anomaly", None, training.meta)
    write_stack(thr, out / "threshold")
    write_manifest(out, "train", cfg, _stack_files(base) + _stack_files(out / "threshold"),
                   {"truncation": [int(m.m) for _, m in tile_models]})
    log.info("trained %d tile model(s); m = %s", len(tile_models), [m.m for _, m in tile_models])
    return 0


def _detect_one(cfg: pipeline.PipelineConfig):
    training = optical = sar = tile_models = None
    if cfg.mode in ("hybrid", "optical-only"):
        optical = _require(cfg.optical, "optical")
        if not cfg.kl.raw_optical:
            if cfg.model and Path(cfg.model).with_suffix(".json").exists():
                tile_models, _ = load_tile_models(cfg.model)
            else:
                training = _require(cfg.training, "training")
    if cfg.mode in ("hybrid", "sar-only"):
        sar = _require(cfg.sar, "sar")
    features = pipeline.compute_features(cfg, training, optical, sar, tile_models)
    return features, pipeline.classify(cfg, features, keep_paths=False)


def cmd_detect(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg)
    features, dm = _detect_one(cfg)
    ref = features.optical if features.optical is not None else features.sar
    outputs = []
    write_stack(dm.to_stack(ref.meta), out / "datemap")
    outputs += _stack_files(out / "datemap")
    dm.to_csv(out / "datemap.csv")
    outputs.append(out / "datemap.csv")
    if features.optical is not None and features.optical.band == "optical-anomaly":
        write_stack(features.optical, out / "anomaly")
        outputs += _stack_files(out / "anomaly")
    if features.sar is not None and features.sar.band == "sar-filtered":
        write_stack(features.sar, out / "sar_filtered")
        outputs += _stack_files(out / "sar_filtered")
    write_manifest(out, "detect", cfg, outputs, {"deforested_pixels": int(dm.deforested.sum())})
    log.info("%s: %d pixel(s) confirmed", cfg.mode, int(dm.deforested.sum()))
    return 0


def _load_datemap(path) -> DateMap:
    p = Path(path)
    if p.suffix == ".csv":
        raise ValueError("pass the native date-map stack, not the CSV")
    return DateMap.from_stack(load_stack(p))


def _load_truth(path, shape) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".csv":
        return synth.GroundTruth.from_csv(p, *shape).deforested
    stack = load_stack(p)
    return stack.values[0] >= 0 if stack.band == "truth" else stack.values[0] > 0


def cmd_validate(args) -> int:
    out = _out_dir(args.out)
    rows, outputs = [], []
    if args.confusion:
        rep = validation.metrics_from_confusion(validation.load_confusion_csv(args.confusion))
        rows.append({"map": Path(args.confusion).name, **rep.as_dict()})
    preds = {Path(p).stem: _load_datemap(p) for p in (args.pred or [])}
    if args.strata:
        if len(args.strata) != 3:
            raise ValueError("--strata needs the hybrid, optical and sar date maps")
        maps = [_load_datemap(p) for p in args.strata]
        design = validation.StratifiedDesign(tuple(int(x) for x in args.design.split(",")))
        points = validation.stratified_sample(*maps, design=design, seed=args.seed)
        labels = {"hybrid": maps[0].deforested, "optical": maps[1].deforested, "sar": maps[2].deforested}
        truth = None
        if args.truth:
            truth = _load_truth(args.truth, maps[0].confirm.shape)
            labels["reference"] = truth
        validation.write_samples(out / "samples.csv", points, labels)
        outputs.append(out / "samples.csv")
        if truth is not None:
            rr = np.array([p.row for p in points])
            cc = np.array([p.col for p in points])
            st = np.array([p.stratum for p in points])
            areas = validation.strata_areas(*maps)
            for name, mp in zip(("hybrid", "optical", "sar"), maps):
                rep = validation.compute_metrics(mp.deforested[rr, cc], truth[rr, cc])
                rows.append({"map": f"{name}-sample", **rep.as_dict()})
                rep = validation.compute_metrics(mp.deforested[rr, cc], truth[rr, cc], areas, st)
                rows.append({"map": f"{name}-area-weighted", **rep.as_dict()})
    if args.samples:
        r, c, ref, _ = validation.load_samples(args.samples)
        for name, dm in preds.items():
            rep = validation.compute_metrics(dm.deforested[r, c], ref)
            rows.append({"map": f"{name}-samples", **rep.as_dict()})
    elif args.truth and preds:
        for name, dm in preds.items():
            truth = _load_truth(args.truth, dm.confirm.shape)
            rep = validation.compute_metrics(dm.deforested.ravel(), truth.ravel())
            rows.append({"map": name, **rep.as_dict()})
    if not rows and not outputs:
        raise ValueError("nothing to validate: give --confusion, --pred with --truth/--samples, or --strata")
    if rows:
        validation.write_reports(out / "metrics.csv", rows)
        outputs.append(out / "metrics.csv")
    write_manifest(out, "validate", None, outputs,
                   {"inputs": sorted(str(p) for p in (args.pred or []) + (args.strata or []))})
    return 0


def _parse_counts(text: str, total: int) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part == "all":
            out.append(total)
        else:
            out.append(int(part))
    return out


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    cfg = cfg.override(**{"hmm.ftc": cfg.hmm.ftc if cfg.hmm.ftc is not None else "auto"})
    out = _out_dir(cfg)
    training = _require(cfg.training, "training")
    optical = _require(cfg.optical, "optical")
    sar = _require(cfg.sar, "sar")
    feats = pipeline.compute_features(cfg.override(mode="hybrid"), training, optical, sar)
    truth = _load_truth(args.truth, (optical.height, optical.width))
    counts = _parse_counts(args.n, optical.slices)
    curve_rows, trial_rows = [], []
    for n in counts:
        res = validation.ablate_optical(cfg, feats, truth, n, args.trials, seed=cfg.seed)
        curve_rows.append(res.summary(args.metric))
        for t, (h, o) in enumerate(zip(res.hybrid, res.optical)):
            trial_rows.append({"n_optical": n, "trial": t, "subset": res.hybrid_hashes[t],
                               "optical_subset": res.optical_hashes[t],
                               **{f"hybrid_{k}": v for k, v in h.as_dict().items()},
                               **{f"optical_{k}": v for k, v in o.as_dict().items()}})
        log.info("n=%d done", n)
    validation.write_reports(out / "curves.csv", curve_rows)
    validation.write_reports(out / "trials.csv", trial_rows)
    outputs = [out / "curves.csv", out / "trials.csv"]
    if args.plot:
        plot_curves(out / "curves.csv", out / "curves.png")
        outputs.append(out / "curves.png")
    write_manifest(out, "ablate", cfg, outputs, {"n": counts, "trials": args.trials, "metric": args.metric})
    return 0


def cmd_synth(args) -> int:
    out = _out_dir(args.out)
    if args.scene:
        spec = synth.SceneSpec.from_json(args.scene)
        if args.seed is not None:
            from dataclasses import replace

            spec = replace(spec, seed=args.seed)
    else:
        spec = synth.default_scene(seed=args.seed or 0, size=args.size)
    files = synth.write_scene(out, synth.generate(spec))
    spec.to_json(out / "scene.json")
    outputs = [out / "scene.json", out / "truth.csv"]
    for stem in ("training", "optical", "sar", "truth_map"):
        if (out / f"{stem}.json").exists():
            outputs += _stack_files(out / stem)
    write_manifest(out, "synth", None, outputs, {"seed": spec.seed})
    log.info("scene written: %s", ", ".join(sorted(files)))
    return 0


def plot_curves(csv_path, png_path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{csv_path}: no curve rows")
    needed = {"n_optical", "hybrid_mean", "hybrid_var", "optical_mean", "optical_var"}
    if not needed <= set(rows[0]):
        raise ValueError(f"{csv_path}: missing columns {sorted(needed - set(rows[0]))}")
    n = np.array([float(r["n_optical"]) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for name, colour in (("hybrid", "tab:blue"), ("optical", "tab:orange")):
        mean = np.array([float(r[f"{name}_mean"]) for r in rows])
        std = np.sqrt(np.array([float(r[f"{name}_var"]) for r in rows]))
        ax.plot(n, mean, marker="o", color=colour, label=name)
        ax.fill_between(n, mean - std, mean + std, color=colour, alpha=0.2)
    ax.set_xlabel("optical days kept")
    ax.set_ylabel("metric")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, format="png", metadata={"Software": None})
    plt.close(fig)


def cmd_plot(args) -> int:
    out = _out_dir(args.out)
    png = out / (Path(args.curves).stem + ".png")
    plot_curves(args.curves, png)
    write_manifest(out, "plot", None, [png], {"input": _digest_file(Path(args.curves))})
    return 0


def cmd_convert(args) -> int:
    out = _out_dir(args.out)
    days = [int(d) for d in args.days.split(",")]
    stack = import_geotiffs(args.files, days, args.band, nodata=args.nodata)
    write_stack(stack, out / args.name)
    write_manifest(out, "convert", None, _stack_files(out / args.name))
    return 0


# parser ------------------------------------------------------------------------

def _common(p, pipeline_flags=True):
    p.add_argument("--config", help="JSON pipeline config")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    if not pipeline_flags:
        return
    p.add_argument("--mode", choices=pipeline.MODES)
    p.add_argument("--training")
    p.add_argument("--optical")
    p.add_argument("--sar")
    p.add_argument("--model", help="model bundle written by 'train'")
    g = p.add_argument_group("overrides")
    g.add_argument("--alpha", type=float)
    g.add_argument("--energy", type=float)
    g.add_argument("--m", type=int)
    g.add_argument("--fill")
    g.add_argument("--tile", type=int, help="square KL tile size")
    g.add_argument("--optical-thresh", dest="optical_thresh", type=float)
    g.add_argument("--sar-thresh", dest="sar_thresh", type=float)
    g.add_argument("--ftc", type=_ftc_arg, help="integer or 'auto'")
    g.add_argument("--sigma2-weight", dest="sigma2_weight", type=float)
    g.add_argument("--sigma3-weight", dest="sigma3_weight", type=float)
    g.add_argument("--tol", type=float)
    g.add_argument("--max-iters", dest="max_iters", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="klfusion", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit tile KL models from a training stack")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="produce a date map")
    _common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("validate", help="accuracy reports and stratified samples")
    _common(p, pipeline_flags=False)
    p.add_argument("--pred", nargs="+", help="date-map stacks to score")
    p.add_argument("--truth", help="truth CSV or truth/date-map stack")
    p.add_argument("--samples", help="interpreted sample CSV (row,col,reference)")
    p.add_argument("--confusion", help="CSV of predicted,reference label pairs")
    p.add_argument("--strata", nargs=3, metavar=("HYBRID", "OPTICAL", "SAR"))
    p.add_argument("--design", default="700,130,100,70")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("ablate", help="optical-day removal sweep")
    _common(p)
    p.add_argument("--truth", required=True)
    p.add_argument("--n", default="1-12", help="counts, e.g. '1-12' or '5,10,all'")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--metric", default="overall", choices=validation.REPORT_FIELDS[:7])
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    _common(p, pipeline_flags=False)
    p.add_argument("--scene", help="SceneSpec JSON (default: benchmark scene)")
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plot", help="render ablation curves")
    _common(p, pipeline_flags=False)
    p.add_argument("curves")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("convert", help="import per-date GeoTIFFs")
    _common(p, pipeline_flags=False)
    p.add_argument("files", nargs="+")
    p.add_argument("--days", required=True, help="comma-separated day numbers, one per file")
    p.add_argument("--band", required=True)
    p.add_argument("--name", default="stack")
    p.add_argument("--nodata", type=float)
    p.set_defaults(func=cmd_convert)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # every failure becomes a nonzero exit with a message
        if args.verbose:
            log.exception("failed")
        print(f"klfusion {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
