"""Command-line entry point.

Subcommands: synth, fit, rank, masks, noise-latents, emit, train, eval, sweep.
Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
failure. Every run writes a config-echo JSON next to its outputs; with a
fixed seed and --workers 1 reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dirrank, maskgen, metrics, opfit, segtrain
from .errors import DataError, NumericalError
from .imgcore import PairDatasetSource, load_manifest, save_mask_png, save_pair_dataset

DEFAULT_SUITE_KINDS = "segmenting,global-affine,global-affine,global-affine,identity,identity,warp,warp"


def _echo_config(out_dir, command, options):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = command.replace("-", "_") + "_config.json"
    options = {k: v for k, v in options.items() if not callable(v)}
    payload = {"command": command, "options": options}
    (out_dir / name).write_text(json.dumps(payload, indent=2, sort_keys=True))


def _map_indexed(fn, items, workers):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _add_fit_flags(p):
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--init-sigma", type=float, default=0.01)
    p.add_argument("--eval-samples", type=int, default=64)


def _fit_config(args):
    return opfit.FitConfig(
        steps=args.steps,
        learning_rate=args.lr,
        batch=args.batch,
        seed=args.seed,
        init_noise_sigma=args.init_sigma,
        eval_samples=args.eval_samples,
    )


def _add_suite_flags(p):
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--sigma", type=float, default=0.005)
    p.add_argument("--delta", type=float, default=0.3)


def _suite_spec(args, kinds=("segmenting",), segmenting_index=0):
    return dirrank.SuiteSpec(
        side=args.side,
        count=args.count,
        segmenting_index=segmenting_index,
        kinds=tuple(kinds),
        noise_sigma=args.sigma,
        margin_delta=args.delta,
    )


def _filter_config(args):
    filters = args.filters
    stages = () if filters in ("", "none") else tuple(filters.split(","))
    return maskgen.FilterConfig(
        size_threshold=args.size_threshold,
        histogram_bins=args.bins,
        smoothing_window=args.window,
        cc_ratio=args.cc_ratio,
        stages=stages,
    )


def _add_filter_flags(p):
    p.add_argument("--filters", default="size,histogram,cc",
                   help="comma list of stages, or 'none'")
    p.add_argument("--size-threshold", type=float, default=0.5)
    p.add_argument("--cc-ratio", type=float, default=0.2)
    p.add_argument("--bins", type=int, default=12)
    p.add_argument("--window", type=int, default=3)


def _add_mask_flags(p):
    p.add_argument("--mode", choices=maskgen.MASK_MODES, default="assignment")
    p.add_argument("--fit", help="fit.json with the operator pair (assignment mode)")
    p.add_argument("--foreground", choices=("auto", "1", "2"), default="auto")


def _foreground(args):
    return None if args.foreground == "auto" else int(args.foreground)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args):
    out = Path(args.out)
    if args.what == "dataset":
        spec = _suite_spec(args)
        source = dirrank.synthetic_affine_source(spec, args.seed)
        samples = [source.fetch(args.start_index + i) for i in range(args.count)]
        save_pair_dataset(samples, out, metadata={"kind": "oracle", "seed": str(args.seed)})
    else:  # suite
        kinds = tuple(args.kinds.split(","))
        if "segmenting" not in kinds:
            raise DataError("suite kinds must include exactly one 'segmenting'")
        spec = _suite_spec(args, kinds=kinds, segmenting_index=kinds.index("segmenting"))
        suite = dirrank.synthetic_direction_suite(spec, args.seed)
        entries = []
        for cand in suite.candidates:
            cdir = out / cand.direction.id
            samples = [cand.source.fetch(i) for i in range(args.count)]
            save_pair_dataset(samples, cdir, metadata={"kind": cand.kind})
            entries.append(
                {"id": cand.direction.id, "kind": cand.kind, "path": cand.direction.id}
            )
        (out / "suite.json").write_text(json.dumps({
            "side": spec.side,
            "count": spec.count,
            "segmenting_index": spec.segmenting_index,
            "kinds": list(spec.kinds),
            "noise_sigma": spec.noise_sigma,
            "margin_delta": spec.margin_delta,
            "candidates": entries,
        }, indent=2))
    _echo_config(out, "synth", vars(args))
    return 0


def _cmd_fit(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source = PairDatasetSource(load_manifest(args.data))
    cfg = _fit_config(args)
    if args.sample_index is not None:
        result = opfit.fit_per_sample(source.fetch(args.sample_index), cfg)
    else:
        result = opfit.fit_operators(source, cfg)
    opfit.save_fit_json(result, out / "fit.json")
    _echo_config(out, "fit", vars(args))
    return 0


def _cmd_rank(args):
    suite_dir = Path(args.suite)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta_path = suite_dir / "suite.json"
    if not meta_path.exists():
        raise DataError(f"suite metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    reports = []
    for j, entry in enumerate(meta["candidates"]):
        source = PairDatasetSource(load_manifest(suite_dir / entry["path"]))
        cfg = opfit.FitConfig(
            steps=args.steps,
            learning_rate=args.lr,
            batch=args.batch,
            seed=args.seed * 100003 + j,
            init_noise_sigma=args.init_sigma,
            eval_samples=args.eval_samples,
        )
        fit = opfit.fit_operators(source, cfg)
        reports.append(dirrank.DirectionReport(direction_id=entry["id"], fit=fit))
    result = dirrank.rank_directions(reports, loss_quantile=args.quantile)
    (out / "selection.json").write_text(json.dumps({
        "selected": result.selected.direction_id,
        "shortlist": [r.direction_id for r in result.shortlist],
        "reports": [
            {"id": r.direction_id, "loss": r.loss, "distance": r.distance}
            for r in result.reports
        ],
    }, indent=2))
    with open(out / "reports.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "loss", "distance"])
        for r in result.reports:
            writer.writerow([r.direction_id, repr(r.loss), repr(r.distance)])
    _echo_config(out, "rank", vars(args))
    return 0


def _cmd_masks(args):
    out = Path(args.out)
    manifest = load_manifest(args.data)
    pair = None
    if args.mode == "assignment":
        if not args.fit:
            raise DataError("assignment mode requires --fit")
        pair = opfit.load_fit_json(args.fit).pair
    cfg = _filter_config(args)
    if args.mode == "mean-threshold":
        cfg = maskgen.FilterConfig(
            size_threshold=cfg.size_threshold,
            histogram_bins=cfg.histogram_bins,
            smoothing_window=cfg.smoothing_window,
            cc_ratio=cfg.cc_ratio,
            stages=tuple(s for s in cfg.stages if s != "size"),
        )
    foreground = _foreground(args)

    def process(i):
        sample = manifest.load_sample(i)
        mask = maskgen.generate_mask(sample, args.mode, pair=pair, foreground=foreground)
        return sample, *maskgen.run_filter_pipeline(sample, mask, cfg)

    results = _map_indexed(process, range(len(manifest)), args.workers)
    kept = []
    reports = []
    from .imgcore import PairSample
    for sample, ok, mask, report in results:
        reports.append(report)
        if ok:
            kept.append(PairSample(id=sample.id, image=sample.image,
                                   shifted=sample.shifted, gt_mask=mask))
    if not kept:
        raise DataError("all samples were rejected by the filter pipeline")
    save_pair_dataset(kept, out, metadata={"mask_mode": args.mode})
    (out / "filter_report.json").write_text(json.dumps([
        {"id": r.sample_id, "verdicts": r.verdicts, "cc_removed": r.cc_removed}
        for r in reports
    ], indent=2))
    _echo_config(out, "masks", vars(args))
    return 0


def _cmd_noise_latents(args):
    latents = maskgen.load_latents(args.latents)
    out_path = Path(args.out)
    result = maskgen.noisy_latents(latents, args.alpha, args.count, args.seed)
    maskgen.save_latents(result, out_path)
    _echo_config(out_path.parent, "noise-latents", vars(args))
    return 0


def _cmd_emit(args):
    out = Path(args.out)
    spec = _suite_spec(args)
    source = dirrank.synthetic_affine_source(spec, args.seed)
    pair = None
    if args.mode == "assignment":
        if args.fit:
            pair = opfit.load_fit_json(args.fit).pair
        else:
            pair = opfit.fit_operators(source, _fit_config(args)).pair
    cfg = _filter_config(args)
    manifest, reports = maskgen.emit_dataset(
        source, args.mode, cfg, args.target, out, pair=pair,
        foreground=_foreground(args),
    )
    (out / "filter_report.json").write_text(json.dumps([
        {"id": r.sample_id, "verdicts": r.verdicts, "cc_removed": r.cc_removed}
        for r in reports
    ], indent=2))
    _echo_config(out, "emit", vars(args))
    return 0


def _parse_widths(text):
    try:
        return tuple(int(w) for w in text.split(","))
    except ValueError as exc:
        raise DataError(f"bad --widths value {text!r}") from exc


def _cmd_train(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = segtrain.ModelConfig(
        side=args.side,
        widths=_parse_widths(args.widths),
        depth=args.depth,
        skips=not args.no_skips,
        seed=args.seed,
    )
    train_cfg = segtrain.TrainConfig(
        steps=args.steps,
        batch=args.batch,
        learning_rate=args.lr,
        decay_factor=args.decay_factor,
        decay_step=args.decay_step,
        seed=args.seed,
        val_fraction=args.val_fraction,
    )
    weights, log = segtrain.train(args.data, model_cfg, train_cfg)
    segtrain.save_weights(weights, out / "model.bin")
    with open(out / "train_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss", "val_iou"])
        for row in log:
            writer.writerow([
                row["step"], repr(row["lr"]), repr(row["loss"]),
                "" if row["val_iou"] is None else repr(row["val_iou"]),
            ])
    _echo_config(out, "train", vars(args))
    return 0


def _cmd_eval(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.data)
    weights = segtrain.load_weights(args.model)
    gts = {}
    samples = []
    for i, entry in enumerate(manifest.samples):
        if not entry.get("mask"):
            raise DataError(f"sample {entry['id']!r} has no ground-truth mask")
        sample = manifest.load_sample(i)
        samples.append(sample)
        gts[sample.id] = sample.gt_mask

    def run(sample):
        return sample.id, segtrain.predict(weights, sample.image)

    preds = dict(_map_indexed(run, samples, args.workers))
    report = metrics.evaluate_dataset(preds, gts, mode=args.mode, beta_sq=args.beta_sq)
    (out / "metrics.json").write_text(json.dumps({
        "max_f_beta": report.max_f_beta,
        "iou": report.iou,
        "accuracy": report.accuracy,
        "n_images": report.n_images,
        "mode": args.mode,
    }, indent=2))
    if args.curve:
        with open(out / "curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "precision", "recall", "f"])
            for t, (p, r, f) in zip(metrics.THRESHOLDS, report.curve):
                writer.writerow([repr(float(t)), repr(p), repr(r), repr(f)])
    if args.dump_masks:
        mask_dir = out / "pred"
        for sample in samples:
            save_mask_png(preds[sample.id].binarize(), mask_dir / f"{sample.id}.png")
    _echo_config(out, "eval", vars(args))
    return 0


def _cmd_sweep(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = segtrain.ModelConfig(
        side=args.side, widths=_parse_widths(args.widths), depth=args.depth,
        skips=not args.no_skips, seed=args.seed,
    )
    try:
        grid_spec = json.loads(Path(args.grid).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed grid file {args.grid}: {exc}") from exc
    if not isinstance(grid_spec, list):
        raise DataError("grid file must hold a JSON list of config objects")
    grid = []
    for i, overrides in enumerate(grid_spec):
        base = {
            "steps": args.steps, "batch": args.batch, "learning_rate": args.lr,
            "decay_factor": args.decay_factor, "decay_step": args.decay_step,
            "seed": args.seed + i, "val_fraction": args.val_fraction,
        }
        base.update(overrides)
        try:
            grid.append(segtrain.TrainConfig(**base))
        except TypeError as exc:
            raise DataError(f"bad grid entry {overrides}: {exc}") from exc
    rows = segtrain.sweep(args.data, model_cfg, grid)
    fields = ["index", "steps", "batch", "learning_rate", "decay_factor",
              "decay_step", "seed", "val_iou", "val_accuracy", "val_max_f", "error"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    _echo_config(out, "sweep", vars(args))
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="latseg",
        description="Latent-segmenter toolkit: operator fitting, mask synthesis, "
                    "synthetic supervision, and saliency evaluation.",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate oracle datasets and direction suites")
    p.add_argument("what", choices=("dataset", "suite"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start-index", type=int, default=0,
                   help="first sample index (use to carve held-out splits)")
    p.add_argument("--kinds", default=DEFAULT_SUITE_KINDS)
    _add_suite_flags(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fit", help="fit the affine operator pair on a pair dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-index", type=int, default=None,
                   help="fit on this single sample instead of the whole stream")
    _add_fit_flags(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("rank", help="fit every suite candidate and apply the selection rule")
    p.add_argument("--suite", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quantile", type=float, default=0.7)
    _add_fit_flags(p)
    p.set_defaults(func=_cmd_rank)

    p = sub.add_parser("masks", help="generate and filter masks for a pair dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    _add_mask_flags(p)
    _add_filter_flags(p)
    p.set_defaults(func=_cmd_masks)

    p = sub.add_parser("noise-latents", help="sample codes near existing latent rows")
    p.add_argument("--latents", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_noise_latents)

    p = sub.add_parser("emit", help="draw oracle samples until the target count passes the filters")
    p.add_argument("--out", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_mask_flags(p)
    _add_filter_flags(p)
    _add_suite_flags(p)
    _add_fit_flags(p)
    p.set_defaults(func=_cmd_emit)

    p = sub.add_parser("train", help="train the mini segmentation network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--widths", default="8,16,32")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--no-skips", action="store_true")
    p.add_argument("--steps", type=int, default=12000)
    p.add_argument("--batch", type=int, default=95)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--decay-factor", type=float, default=0.2)
    p.add_argument("--decay-step", type=int, default=8000)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on a labeled dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("dataset-level", "per-image"),
                   default="per-image")
    p.add_argument("--beta-sq", type=float, default=0.3)
    p.add_argument("--curve", action="store_true", help="also write curve.csv")
    p.add_argument("--dump-masks", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="hyperparameter sweep over training configs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", required=True, help="JSON list of config overrides")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--widths", default="8,16,32")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--no-skips", action="store_true")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--decay-factor", type=float, default=0.2)
    p.add_argument("--decay-step", type=int, default=400)
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.set_defaults(func=_cmd_sweep)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
