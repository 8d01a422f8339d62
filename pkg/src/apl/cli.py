"""Command-line entry point: ``apl <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import clustering, evaluation, features, gbdt, inference, preprocess, synthetic, weak
from .errors import AplError, StageError
from .pipeline import PipelineConfig, discover_images, read_assignments, run_pipeline, write_assignments
from .raster import Extent, load_image, load_mask, save_image, save_mask


def _cmd_preprocess(args) -> None:
    params = preprocess.ShadowParams(args.sigma, args.threshold_factor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for iid, path in discover_images(args.inp).items():
        img = load_image(path)
        mask = preprocess.detect_shadow_mask(img, params)
        save_image(preprocess.remove_shadows(img, mask, params), out / f"{iid}.png")
        save_mask(mask, out / f"{iid}.shadow.png")
        print(f"{iid}: {mask.area} shadow pixels")


def _cmd_features(args) -> None:
    parts = []
    for iid, path in discover_images(args.inp).items():
        img = load_image(path)
        grid = features.extract_patches(img.extent, args.patch, args.stride, iid)
        parts.append(features.compute_features(img, grid, args.extractor, features.HogParams(), args.color_bins))
    fm = features.FeatureMatrix.concat(parts)
    features.save_features(fm, args.out)
    print(f"{len(fm)} patches, dim {fm.dim}")


def _cmd_cluster(args) -> None:
    fm = features.read_feature_file(args.features)
    model, labels = clustering.kmeans_fit(fm, args.k, args.seed, args.max_iter, args.rel_tol, args.standardize)
    clustering.save_model(model, args.out)
    if args.assignments:
        write_assignments(fm.keys, labels, args.assignments)
    print(f"k={model.k} iterations={model.iterations} inertia={model.inertia:.6g}")


def _cmd_assign(args) -> None:
    keys, labels = read_assignments(args.assignments)
    points = weak.read_points_csv(args.labels)
    counts = {}
    for iid in sorted({k[0] for k in keys}):
        origins = tuple((k[1], k[2]) for k in keys if k[0] == iid)
        size = args.patch
        w = max(x for x, _ in origins) + size
        h = max(y for _, y in origins) + size
        grid = features.PatchGrid(iid, size, size, origins, w, h)
        counts.update(weak.map_points_to_patches(points, grid))
    k = args.k or int(labels.max()) + 1
    rel = weak.cluster_relevance(keys, labels, counts, args.target, k, args.presence)
    labeling = weak.label_clusters(rel, args.rule)
    labeling.save(args.out)
    if args.training:
        tset = weak.build_training_set(keys, labels, labeling, args.neg_ratio, args.seed)
        tset.write_csv(args.training)
    print("relevance", " ".join(f"{v:.4f}" for v in labeling.relevance))
    print("positive", list(labeling.positive))


def _cmd_train(args) -> None:
    fm = features.read_feature_file(args.features)
    tset = weak.LabeledPatchSet.read_csv(args.labels)
    params = gbdt.GbdtParams(rounds=args.rounds, learning_rate=args.eta, max_depth=args.depth,
                             min_child_weight=args.min_child_weight, l2_lambda=args.lam)
    model = gbdt.train_gbdt(fm.select(tset.keys).rows, tset.labels, params, args.seed)
    model.save(args.out)
    print(f"{len(model.trees)} trees, final loss {model.loss_history[-1]:.6f}")


def _cmd_predict(args) -> None:
    model = gbdt.TreeEnsemble.load(args.model)
    pmap = inference.sliding_window_predict(load_image(args.inp), model, args.window, args.step, args.descriptor)
    pmap.save(args.out)
    print(f"{pmap.grid_width}x{pmap.grid_height} cells of {pmap.cell_size} px")


def _cmd_eval(args) -> None:
    pmap = inference.PredictionMap.load(args.pred)
    extent = Extent(0, 0, pmap.image_width or pmap.grid_width * pmap.cell_size,
                    pmap.image_height or pmap.grid_height * pmap.cell_size)
    metrics: dict = {"accuracy": None, "iou": None, "auc": None, "roc": []}
    if args.ground:
        points = weak.read_points_csv(args.ground)
        image_id = args.image_id or Path(args.pred).stem
        raster = evaluation.rasterize_point_labels(points, pmap.cell_size, extent, args.target, image_id)
        keep = raster.labeled & pmap.covered
        curve = evaluation.roc_auc(pmap.scores[keep], raster.states[keep] == evaluation.POSITIVE)
        metrics["auc"], metrics["roc"] = curve.auc, curve.to_json()
    ref = None
    if args.refmask:
        ref = load_mask(args.refmask)
    elif args.polygons:
        ref = evaluation.polygons_to_mask(evaluation.PolygonAnnotation.load(args.polygons), extent)
    if ref is not None:
        pred = evaluation.threshold_prediction(pmap, args.threshold, ref.width, ref.height)
        metrics["accuracy"], metrics["iou"] = evaluation.mask_metrics(pred, ref)
    if metrics["auc"] is None and ref is None:
        raise ValueError("eval needs --ground, --refmask or --polygons")
    Path(args.out).write_text(json.dumps(metrics, indent=1) + "\n")
    print(json.dumps({k: metrics[k] for k in ("auc", "accuracy", "iou")}))


def _cmd_synth(args) -> None:
    params = synthetic.ForestParams(
        image_size=args.size, n_target=args.targets, n_background=args.background,
        radius_range=(args.radius_min, args.radius_max), trunk_offset_max=args.offset,
        seed=args.seed, image_id=Path(args.out_prefix).name,
    )
    img, truth, points = synthetic.generate_forest(params)
    prefix = args.out_prefix
    save_image(img, f"{prefix}.png")
    save_mask(truth, f"{prefix}.truth.png")
    weak.write_points_csv(points, f"{prefix}.labels.csv")
    print(f"{prefix}.png {prefix}.truth.png {prefix}.labels.csv")


def _cmd_roc_plot(args) -> None:
    obj = json.loads(Path(args.metrics).read_text())
    roc = obj["roc"]
    if not roc:
        raise ValueError(f"{args.metrics} holds no ROC points")
    curve = evaluation.RocCurve(
        np.array([np.inf if r["threshold"] is None else r["threshold"] for r in roc]),
        np.array([r["fpr"] for r in roc]), np.array([r["tpr"] for r in roc]), float(obj["auc"]),
    )
    Path(args.out).write_text(evaluation.roc_svg(curve, args.title))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _cmd_run(args) -> None:
    obj = json.loads(Path(args.config).read_text())
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        obj[key] = _parse_value(value)
    if args.out_dir:
        obj["out_dir"] = args.out_dir
    if args.workers:
        obj["workers"] = args.workers
    cfg = PipelineConfig.from_dict(obj)
    report = run_pipeline(cfg, log=lambda msg: print(msg, file=sys.stderr))
    print(json.dumps({"auc": report.auc, "accuracy": report.accuracy, "iou": report.iou,
                      "positive": report.positive}))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="apl", description="Weakly supervised canopy segmentation workflow.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="detect and remove shadows")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=15.0)
    p.add_argument("--threshold-factor", type=float, default=0.6)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("features", help="patch descriptors for every image in a directory")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--patch", type=int, default=100)
    p.add_argument("--stride", type=int, default=100)
    p.add_argument("--extractor", choices=features.EXTRACTORS, default="hog+color")
    p.add_argument("--color-bins", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("cluster", help="k-means prototypes")
    p.add_argument("--features", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--rel-tol", type=float, default=1e-6)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--assignments")
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("assign", help="cluster relevance and labeling from point labels")
    p.add_argument("--assignments", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--rule", default="gap")
    p.add_argument("--patch", type=int, default=100)
    p.add_argument("--k", type=int, default=0, help="cluster count (default: inferred)")
    p.add_argument("--presence", action="store_true")
    p.add_argument("--out", default="labeling.json")
    p.add_argument("--training", help="also write the labeled patch set here")
    p.add_argument("--neg-ratio", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_assign)

    p = sub.add_parser("train", help="fit the boosted classifier")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--min-child-weight", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="sliding-window prediction map")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--step", type=int, default=10)
    p.add_argument("--descriptor", choices=features.EXTRACTORS, default="hog")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="ROC against point labels, accuracy/IoU against a mask")
    p.add_argument("--pred", required=True)
    p.add_argument("--ground")
    p.add_argument("--refmask")
    p.add_argument("--polygons")
    p.add_argument("--target", default="palm")
    p.add_argument("--image-id", help="image id of the labels (default: prediction file stem)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic forest scene")
    p.add_argument("--size", type=int, default=1000)
    p.add_argument("--targets", type=int, default=25)
    p.add_argument("--background", type=int, default=60)
    p.add_argument("--offset", type=float, default=30.0)
    p.add_argument("--radius-min", type=int, default=synthetic.ForestParams.radius_range[0])
    p.add_argument("--radius-max", type=int, default=synthetic.ForestParams.radius_range[1])
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("roc-plot", help="SVG of the ROC curve stored in a metrics file")
    p.add_argument("--metrics", required=True)
    p.add_argument("--title", default="ROC")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_roc_plot)

    p = sub.add_parser("run", help="full pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=_cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except StageError as exc:
        print(f"apl {args.command}: {exc}", file=sys.stderr)
        return 2
    except (AplError, OSError, ValueError, KeyError) as exc:
        print(f"apl {args.command}: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
