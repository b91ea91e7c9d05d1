"""Command-line surface: one subcommand per pipeline stage.

    synth            make a synthetic labeled scene (.pt3r + .plbl)
    decompose        compute the feature cube (.pftc), optionally ingesting
                     externally produced cubes
    slic             segment into superpixels (.pspx)
    filter-features  beam-search group selection, emits a text report
    pretrain         contrastive pretraining, emits a checkpoint (.pckp)
    finetune         train a classifier from a checkpoint (or from scratch)
    evaluate         confusion matrix + OA/AA/Kappa on held-out labels
    sweep            label/unlabeled ratio grid versus the supervised baseline
    render-map       paint a label raster as a PPM image

Exit codes: 0 success, 2 validation error (bad arguments, missing files,
malformed formats, config mistakes), 1 unexpected runtime failure.
``--seed`` threads the master seed through every stochastic stage; flag
values override config-file values, which override defaults.  The
``HCL_THREADS`` environment variable caps internal (BLAS) parallelism and
must be honored before numpy loads, which is why this module imports the
heavy machinery lazily.
"""

from __future__ import annotations

import argparse
import os
import sys

__all__ = ["main", "build_parser"]


def _apply_thread_cap() -> None:
    cap = os.environ.get("HCL_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        raise ValueError(f"HCL_THREADS must be an integer, got {cap!r}") from None
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def _load_train_config(args) -> "TrainConfig":
    from .training import TrainConfig, apply_config_values, parse_config_text

    config = TrainConfig()
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            config = apply_config_values(config, parse_config_text(fh.read()))
    overrides = {}
    for key in ("tau", "batch_size", "epochs", "lr0", "patch_size", "theta",
                "seed", "unlabeled_fraction", "label_fraction", "sampling_mode",
                "architecture"):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "beam", None) is not None:
        overrides["beam"] = tuple(int(tok) for tok in args.beam.split(","))
    if getattr(args, "frozen_encoder", False):
        overrides["frozen_encoder"] = True
    if getattr(args, "allow_unfiltered", False):
        overrides["allow_unfiltered"] = True
    return apply_config_values(config, overrides)


def _manifest(args, command: str, config=None) -> "RunManifest":
    from .manifest import RunManifest

    cfg = {}
    if config is not None:
        from .training import CONFIG_FILE_KEYS

        for key in CONFIG_FILE_KEYS:
            value = getattr(config, key)
            cfg[key] = list(value) if isinstance(value, tuple) else value
    return RunManifest(command=command, master_seed=getattr(args, "seed", None),
                       config=cfg)


def _finish(manifest, path: str) -> None:
    from .manifest import write_manifest

    write_manifest(path, manifest)


# -- commands -------------------------------------------------------------------


def _cmd_synth(args) -> int:
    import numpy as np

    from .sar import (
        WishartClassSpec,
        block_layout,
        synthesize_wishart,
        write_coherency_raster,
        write_label_map,
    )

    if args.classes < 1 or args.classes > 15:
        raise ValueError("classes must be in 1..15")
    shapes = [
        np.array([[1.0, 0.45 + 0.2j, 0], [0.45 - 0.2j, 0.35, 0], [0, 0, 0.12]]),
        np.array([[0.35, -0.3 + 0.1j, 0], [-0.3 - 0.1j, 1.0, 0], [0, 0, 0.3]]),
        np.array([[0.3, 0, 0.1j], [0, 0.25, 0], [-0.1j, 0, 0.9]]),
        np.array([[0.8, 0.1, 0.2], [0.1, 0.6, 0.1j], [0.2, -0.1j, 0.4]]),
        np.array([[0.5, -0.2j, 0], [0.2j, 0.5, 0.15], [0, 0.15, 0.5]]),
    ]
    specs = []
    for cid in range(1, args.classes + 1):
        shape = shapes[(cid - 1) % len(shapes)]
        scale = 1.0 + 0.6 * ((cid - 1) // len(shapes))
        specs.append(WishartClassSpec(cid, shape * scale, looks=args.looks))
    layout = block_layout(args.size, args.size, args.classes, args.cell, args.seed)
    img = synthesize_wishart(specs, layout, seed=args.seed)

    raster = f"{args.output_prefix}.pt3r"
    labels = f"{args.output_prefix}.plbl"
    write_coherency_raster(raster, img)
    write_label_map(labels, img.labels)
    manifest = _manifest(args, "synth")
    manifest.config.update(classes=args.classes, size=args.size, looks=args.looks,
                           cell=args.cell)
    manifest.add_output("raster", raster)
    manifest.add_output("labels", labels)
    _finish(manifest, f"{args.output_prefix}.manifest.json")
    return 0


def _cmd_decompose(args) -> int:
    from .decomposition import assemble_cube, read_feature_cube, write_feature_cube
    from .sar import read_coherency_raster, speckle_filter

    img = read_coherency_raster(args.input)
    if args.speckle_window > 1:
        img = speckle_filter(img, args.speckle_window)
    extra = [read_feature_cube(p) for p in args.ingest or []]
    cube = assemble_cube(img, extra=extra)
    write_feature_cube(args.output, cube)
    manifest = _manifest(args, "decompose")
    manifest.config.update(speckle_window=args.speckle_window)
    manifest.add_input("raster", args.input)
    for i, p in enumerate(args.ingest or []):
        manifest.add_input(f"ingest_{i}", p)
    manifest.add_output("cube", args.output)
    _finish(manifest, f"{args.output}.manifest.json")
    return 0


def _cmd_slic(args) -> int:
    from .sar import read_coherency_raster, speckle_filter
    from .superpixel import default_k, pauli_features, slic, write_superpixel_map

    img = read_coherency_raster(args.input)
    if args.speckle_window > 1:
        img = speckle_filter(img, args.speckle_window)
    k = args.k if args.k else default_k(img.height, img.width)
    spmap = slic(pauli_features(img), k, compactness=args.compactness,
                 iters=args.iters)
    write_superpixel_map(args.output, spmap)
    manifest = _manifest(args, "slic")
    manifest.config.update(k=k, compactness=args.compactness, iters=args.iters,
                           speckle_window=args.speckle_window)
    manifest.add_input("raster", args.input)
    manifest.add_output("superpixels", args.output)
    _finish(manifest, f"{args.output}.manifest.json")
    return 0


def _cmd_filter_features(args) -> int:
    from ._util import atomic_write_bytes
    from .decomposition import read_feature_cube
    from .feature_filter import (
        FilterConfig,
        beam_search,
        format_report,
        stratified_label_subset,
        train_filter_classifier,
    )
    from .sar import read_label_map
    from .training import _rng, _STREAM_FINETUNE_LABELS

    config = _load_train_config(args)
    cube = read_feature_cube(args.cube)
    labels = read_label_map(args.labels)
    if labels.shape != (cube.height, cube.width):
        raise ValueError("label map does not match cube dimensions")
    subset = stratified_label_subset(
        labels, config.label_fraction, _rng(config.seed, _STREAM_FINETUNE_LABELS)
    )
    fcfg = FilterConfig(theta=config.theta, beam_schedule=config.beam)
    classifier = train_filter_classifier(cube, subset, config.seed, fcfg)
    result = beam_search(classifier, cube, fcfg)
    report = format_report(result, cube, fcfg)
    atomic_write_bytes(args.output, report.encode("utf-8"))
    manifest = _manifest(args, "filter-features", config)
    manifest.add_input("cube", args.cube)
    manifest.add_input("labels", args.labels)
    manifest.add_output("report", args.output)
    _finish(manifest, f"{args.output}.manifest.json")
    return 0


def _apply_filter_report(cube, report_path: str | None, config) -> None:
    from .feature_filter import parse_report_group_ids

    if report_path:
        with open(report_path, "r", encoding="utf-8") as fh:
            cube.set_active_groups(parse_report_group_ids(fh.read()))
    elif not config.allow_unfiltered:
        raise ValueError(
            "no --filter-report given; pass one or use --allow-unfiltered"
        )


def _cmd_pretrain(args) -> int:
    from .decomposition import read_feature_cube
    from .nn import save_checkpoint
    from .sar import read_coherency_raster, read_label_map
    from .superpixel import read_superpixel_map
    from .training import pretrain

    config = _load_train_config(args)
    img = read_coherency_raster(args.image)
    if args.labels:
        img.labels = __import__("numpy").asarray(read_label_map(args.labels))
    cube = read_feature_cube(args.cube)
    spmap = read_superpixel_map(args.superpixels)
    _apply_filter_report(cube, args.filter_report, config)
    result = pretrain(img, cube, spmap, config)
    save_checkpoint(args.output, result.checkpoint)
    manifest = _manifest(args, "pretrain", config)
    manifest.add_input("image", args.image)
    manifest.add_input("cube", args.cube)
    manifest.add_input("superpixels", args.superpixels)
    if args.filter_report:
        manifest.add_input("filter_report", args.filter_report)
    manifest.add_output("checkpoint", args.output)
    _finish(manifest, f"{args.output}.manifest.json")
    return 0


def _cmd_finetune(args) -> int:
    from .nn import load_checkpoint, save_checkpoint
    from .sar import read_coherency_raster, read_label_map
    from .training import finetune

    config = _load_train_config(args)
    img = read_coherency_raster(args.image)
    labels = read_label_map(args.labels)
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    result = finetune(ckpt, img, labels, config)
    save_checkpoint(args.output, result.checkpoint())
    manifest = _manifest(args, "finetune", config)
    manifest.add_input("image", args.image)
    manifest.add_input("labels", args.labels)
    if args.checkpoint:
        manifest.add_input("checkpoint", args.checkpoint)
    manifest.add_output("model", args.output)
    _finish(manifest, f"{args.output}.manifest.json")
    return 0


def _cmd_evaluate(args) -> int:
    from ._util import atomic_write_bytes
    from .metrics import confusion_to_csv, evaluate_predictions, metrics
    from .nn import load_checkpoint
    from .sar import read_coherency_raster, read_label_map, write_label_map
    from .training import classifier_from_checkpoint, predict_map

    img = read_coherency_raster(args.image)
    labels = read_label_map(args.labels)
    model, train_labels = classifier_from_checkpoint(load_checkpoint(args.model))
    if train_labels.shape != labels.shape:
        raise ValueError("model was fine-tuned on a different raster size")
    predicted = predict_map(model, img)
    cm = evaluate_predictions(labels, predicted,
                              exclude=None if args.include_train else train_labels)
    oa, aa, kappa = metrics(cm)

    pred_path = f"{args.output_prefix}.pred.plbl"
    metrics_path = f"{args.output_prefix}.metrics.csv"
    confusion_path = f"{args.output_prefix}.confusion.csv"
    write_label_map(pred_path, predicted)
    atomic_write_bytes(metrics_path,
                       f"oa,aa,kappa\n{oa:.6f},{aa:.6f},{kappa:.6f}\n".encode())
    atomic_write_bytes(confusion_path, confusion_to_csv(cm).encode())
    print(f"oa={oa:.6f} aa={aa:.6f} kappa={kappa:.6f}")

    manifest = _manifest(args, "evaluate")
    manifest.add_input("image", args.image)
    manifest.add_input("labels", args.labels)
    manifest.add_input("model", args.model)
    manifest.add_output("predictions", pred_path)
    manifest.add_output("metrics", metrics_path)
    manifest.add_output("confusion", confusion_path)
    _finish(manifest, f"{args.output_prefix}.manifest.json")
    return 0


def _cmd_sweep(args) -> int:
    from ._util import atomic_write_bytes
    from .decomposition import read_feature_cube
    from .metrics import ratio_sweep, sweep_rows_to_csv
    from .sar import read_coherency_raster, read_label_map
    from .superpixel import read_superpixel_map
    from .training import pretrain  # noqa: F401  (imported for side-effect-free check)

    config = _load_train_config(args)
    img = read_coherency_raster(args.image)
    img.labels = read_label_map(args.labels)
    cube = read_feature_cube(args.cube)
    spmap = read_superpixel_map(args.superpixels)
    _apply_filter_report(cube, args.filter_report, config)
    labeled = [float(tok) for tok in args.labeled_ratios.split(",")]
    unlabeled = [float(tok) for tok in args.unlabeled_ratios.split(",")]
    from .metrics import ratio_sweep as _ratio_sweep

    rows = _ratio_sweep(img, cube, spmap, config, labeled, unlabeled)
    atomic_write_bytes(args.output, sweep_rows_to_csv(rows).encode())
    manifest = _manifest(args, "sweep", config)
    manifest.config.update(labeled_ratios=labeled, unlabeled_ratios=unlabeled)
    manifest.add_input("image", args.image)
    manifest.add_input("labels", args.labels)
    manifest.add_input("cube", args.cube)
    manifest.add_input("superpixels", args.superpixels)
    manifest.add_output("table", args.output)
    _finish(manifest, f"{args.output}.manifest.json")
    return 0


def _cmd_render_map(args) -> int:
    from .metrics import write_map_ppm
    from .sar import read_label_map

    labels = read_label_map(args.labels)
    write_map_ppm(args.output, labels)
    manifest = _manifest(args, "render-map")
    manifest.add_input("labels", args.labels)
    manifest.add_output("map", args.output)
    _finish(manifest, f"{args.output}.manifest.json")
    return 0


# -- parser ---------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="master seed for all stochastic stages")
    if training:
        p.add_argument("--tau", type=float)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr0", type=float)
        p.add_argument("--patch-size", type=int, dest="patch_size")
        p.add_argument("--unlabeled-fraction", type=float, dest="unlabeled_fraction")
        p.add_argument("--label-fraction", type=float, dest="label_fraction")
        p.add_argument("--sampling-mode", dest="sampling_mode",
                       choices=["superpixel", "vanilla", "label-oracle"])
        p.add_argument("--architecture", choices=["heterogeneous", "siamese"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polsarcl",
        description="PolSAR contrastive pretraining and few-shot classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a labeled multilook scene")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--looks", type=int, default=4)
    p.add_argument("--cell", type=int, default=32, help="block size of the layout")
    p.add_argument("--output-prefix", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("decompose", help="compute the decomposition feature cube")
    p.add_argument("--input", required=True, help=".pt3r coherency raster")
    p.add_argument("--output", required=True, help=".pftc feature cube")
    p.add_argument("--ingest", nargs="*", help="extra .pftc cubes to append")
    p.add_argument("--speckle-window", type=int, default=1, dest="speckle_window")
    p.set_defaults(func=_cmd_decompose)

    p = sub.add_parser("slic", help="superpixel segmentation")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help=".pspx superpixel map")
    p.add_argument("--k", type=int, help="superpixel count (default: ~30x30 sizing)")
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--speckle-window", type=int, default=1, dest="speckle_window")
    p.set_defaults(func=_cmd_slic)

    p = sub.add_parser("filter-features", help="beam-search feature-group selection")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--theta", type=int)
    p.add_argument("--beam", help="comma-separated beam widths, e.g. 2,2,2,1")
    p.add_argument("--output", required=True, help="selection report path")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_filter_features)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    p.add_argument("--image", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--superpixels", required=True)
    p.add_argument("--filter-report", dest="filter_report")
    p.add_argument("--labels", help="label map (only for label-oracle sampling)")
    p.add_argument("--allow-unfiltered", action="store_true", dest="allow_unfiltered")
    p.add_argument("--output", required=True, help=".pckp checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="train the downstream classifier")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--checkpoint", help="pretraining checkpoint; omit for the "
                                        "no-pretrain supervised baseline")
    p.add_argument("--frozen-encoder", action="store_true", dest="frozen_encoder")
    p.add_argument("--output", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("evaluate", help="metrics on held-out labeled pixels")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--include-train", action="store_true", dest="include_train")
    p.add_argument("--output-prefix", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="label/unlabeled ratio grid")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--superpixels", required=True)
    p.add_argument("--filter-report", dest="filter_report")
    p.add_argument("--allow-unfiltered", action="store_true", dest="allow_unfiltered")
    p.add_argument("--labeled-ratios", required=True, dest="labeled_ratios")
    p.add_argument("--unlabeled-ratios", required=True, dest="unlabeled_ratios")
    p.add_argument("--output", required=True, help="CSV table")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("render-map", help="label raster to PPM image")
    p.add_argument("--labels", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_render_map)

    return parser


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValueError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
