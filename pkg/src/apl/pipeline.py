"""End-to-end orchestration with file-based stage boundaries.

Every stage reads its inputs from and writes its outputs to ``out_dir``.  A
stage is skipped when its outputs exist, are newer than its inputs and were
produced under the same stage settings; otherwise it is recomputed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .clustering import kmeans_assign, kmeans_fit, load_model, save_model
from .errors import AplError, InsufficientDataError, OutOfExtentError, StageError
from .evaluation import (
    mask_metrics,
    rasterize_point_labels,
    roc_auc,
    roc_svg,
    threshold_prediction,
)
from .features import (
    FeatureMatrix,
    HogParams,
    PatchGrid,
    compute_features,
    extract_patches,
    read_feature_file,
    save_features,
)
from .gbdt import GbdtParams, TreeEnsemble, train_gbdt
from .inference import PredictionMap, sliding_window_predict
from .preprocess import ShadowParams, detect_shadow_mask, remove_shadows
from .raster import Extent, SegmentationMask, load_image, load_mask, save_image, save_mask, tessellate
from .weak import (
    ClusterLabeling,
    PointLabel,
    build_training_set,
    label_clusters,
    phase_relevance,
    read_points_csv,
)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")
SIDECAR_TAGS = (".truth", ".shadow", ".mask")
STAGES = ("preprocess", "features", "cluster", "assign", "train", "predict", "eval")


@dataclass
class PipelineConfig:
    image_dir: str
    labels: str
    out_dir: str = "apl-run"
    truth_dir: str | None = None  # reference masks named <id>.truth.png; default image_dir
    target: str = "palm"
    # preprocessing
    shadow_removal: bool = True
    blur_sigma: float = 15.0
    threshold_factor: float = 0.6
    # features and clustering
    patch_size: int = 100
    cluster_stride: int | None = 20  # None means disjoint patches only
    cluster_descriptor: str = "hog+color"
    color_bins: int = 8
    k: int = 20
    cluster_seed: int = 0
    max_iter: int = 300
    rel_tol: float = 1e-6
    standardize: bool = False
    # weak labels
    rule: str = "gap"
    presence: bool = False
    neg_ratio: float | None = 3.0
    sample_seed: int = 0
    train_stride: int = 20
    # classifier
    train_descriptor: str = "hog"
    rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 4
    min_child_weight: float = 1.0
    l2_lambda: float = 1.0
    subsample: float = 1.0
    colsample: float = 1.0
    gbdt_seed: int = 0
    # inference and evaluation
    window: int = 100
    step: int = 10
    subarea: int = 200
    split: float = 0.75
    split_seed: int = 0
    threshold: float = 0.5
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.split < 1:
            raise ValueError("split must lie strictly between 0 and 1")
        if self.subarea % self.patch_size:
            raise ValueError(f"subarea {self.subarea} is not a multiple of patch size {self.patch_size}")
        if self.subarea % self.step:
            raise ValueError(f"subarea {self.subarea} is not a multiple of step {self.step}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def corpus_stride(self) -> int:
        return self.cluster_stride or self.patch_size

    @classmethod
    def from_dict(cls, obj: dict) -> PipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> PipelineConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    def shadow_params(self) -> ShadowParams:
        return ShadowParams(self.blur_sigma, self.threshold_factor)

    def gbdt_params(self) -> GbdtParams:
        return GbdtParams(
            rounds=self.rounds, learning_rate=self.learning_rate, max_depth=self.max_depth,
            min_child_weight=self.min_child_weight, l2_lambda=self.l2_lambda,
            subsample=self.subsample, colsample=self.colsample,
        )


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def discover_images(image_dir) -> dict[str, Path]:
    """Image id (file stem) -> path, skipping mask sidecars; sorted by id."""
    found = {}
    for p in sorted(Path(image_dir).iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if any(p.stem.endswith(tag) for tag in SIDECAR_TAGS):
            continue
        if p.stem in found:
            raise ValueError(f"two images share the id {p.stem!r}")
        found[p.stem] = p
    if not found:
        raise FileNotFoundError(f"no PNG or TIFF images in {image_dir}")
    return found


def split_subareas(extents: dict[str, Extent], size: int, fraction: float, seed: int):
    """Seeded uniform split of all subareas into (train, test) lists of (image_id, Extent)."""
    cells = [(iid, e) for iid in sorted(extents) for e in tessellate(extents[iid], size)]
    if len(cells) < 2:
        raise InsufficientDataError(f"{len(cells)} subarea(s) cannot be split into train and test")
    perm = np.random.default_rng(seed).permutation(len(cells))
    n_train = min(max(int(round(fraction * len(cells))), 1), len(cells) - 1)
    train = sorted(perm[:n_train].tolist())
    test = sorted(perm[n_train:].tolist())
    return [cells[i] for i in train], [cells[i] for i in test]


def _inside(x: int, y: int, size: int, area: Extent) -> bool:
    return area.x <= x and x + size <= area.x1 and area.y <= y and y + size <= area.y1


def write_assignments(keys, labels, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "x", "y", "cluster"])
        for key, c in zip(keys, labels):
            w.writerow([key[0], key[1], key[2], int(c)])


def read_assignments(path) -> tuple[list[tuple], np.ndarray]:
    keys, labels = [], []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            keys.append((r["image_id"], int(r["x"]), int(r["y"])))
            labels.append(int(r["cluster"]))
    return keys, np.asarray(labels, dtype=np.int64)


def _extent_json(cells):
    return [[iid, e.x, e.y, e.width, e.height] for iid, e in cells]


def _extent_from_json(rows):
    return [(r[0], Extent(int(r[1]), int(r[2]), int(r[3]), int(r[4]))) for r in rows]


def _map(fn: Callable, items: list, workers: int) -> list:
    """Ordered map; results do not depend on the worker count."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class _Stamps:
    """Staleness bookkeeping: outputs must exist, be newer than inputs and match settings."""

    def __init__(self, root: Path):
        self.root = root / "stamps"

    def fresh(self, stage: str, inputs, outputs, settings: dict) -> dict | None:
        """The recorded stage summary if the outputs can be reused, else None."""
        stamp = self.root / f"{stage}.json"
        if not stamp.is_file() or any(not Path(o).exists() for o in outputs):
            return None
        recorded = json.loads(stamp.read_text())
        if recorded.get("settings") != _fingerprint(settings):
            return None
        newest_in = max((Path(i).stat().st_mtime_ns for i in inputs), default=0)
        oldest_out = min(Path(o).stat().st_mtime_ns for o in outputs)
        return recorded.get("summary", {}) if newest_in <= oldest_out else None

    def mark(self, stage: str, settings: dict, summary: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        body = {"settings": _fingerprint(settings), "summary": summary}
        (self.root / f"{stage}.json").write_text(json.dumps(body) + "\n")


def _fingerprint(settings: dict) -> str:
    blob = json.dumps(settings, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def _preprocess_one(job):
    src, dst, mask_dst, enabled, params = job
    img = load_image(src)
    mask = detect_shadow_mask(img, params)
    out = remove_shadows(img, mask, params) if enabled else img
    save_image(out, dst)
    save_mask(mask, mask_dst)
    return int(mask.area)


def stage_preprocess(cfg: PipelineConfig, images: dict[str, Path]) -> dict:
    pre = cfg.out / "pre"
    pre.mkdir(parents=True, exist_ok=True)
    jobs = [
        (str(p), str(pre / f"{iid}.png"), str(pre / f"{iid}.shadow.png"),
         cfg.shadow_removal, cfg.shadow_params())
        for iid, p in images.items()
    ]
    areas = _map(_preprocess_one, jobs, cfg.workers)
    return {"shadow_pixels": dict(zip(images, areas))}


def _features_one(job):
    path, iid, size, stride, extractor, bins = job
    img = load_image(path)
    grid = extract_patches(img.extent, size, stride, iid)
    return compute_features(img, grid, extractor, HogParams(), bins)


def stage_features(cfg: PipelineConfig, images: dict[str, Path]) -> dict:
    pre = cfg.out / "pre"
    jobs = [
        (str(pre / f"{iid}.png"), iid, cfg.patch_size, cfg.corpus_stride,
         cfg.cluster_descriptor, cfg.color_bins)
        for iid in images
    ]
    fm = FeatureMatrix.concat(_map(_features_one, jobs, cfg.workers))
    save_features(fm, cfg.out / "cluster.aplfeat")
    if cfg.corpus_stride != cfg.patch_size:
        jobs = [j[:3] + (cfg.patch_size,) + j[4:] for j in jobs]
        grid_fm = FeatureMatrix.concat(_map(_features_one, jobs, cfg.workers))
        save_features(grid_fm, cfg.out / "grid.aplfeat")
    return {"corpus_patches": len(fm), "dim": fm.dim}


def stage_cluster(cfg: PipelineConfig) -> dict:
    corpus = read_feature_file(cfg.out / "cluster.aplfeat")
    model, labels = kmeans_fit(corpus, cfg.k, cfg.cluster_seed, cfg.max_iter, cfg.rel_tol, cfg.standardize)
    save_model(model, cfg.out / "kmeans.aplkm")
    write_assignments(corpus.keys, labels, cfg.out / "assignments.csv")
    if cfg.corpus_stride != cfg.patch_size:
        # the disjoint grid is what patch-level prototype quality is scored on
        grid_fm = read_feature_file(cfg.out / "grid.aplfeat")
        write_assignments(grid_fm.keys, kmeans_assign(model, grid_fm), cfg.out / "grid_assignments.csv")
    else:
        (cfg.out / "grid_assignments.csv").unlink(missing_ok=True)
    return {"iterations": model.iterations, "inertia": model.inertia,
            "sizes": np.bincount(labels, minlength=cfg.k).tolist()}


def stage_assign(cfg: PipelineConfig, images: dict[str, Path], points: list[PointLabel]) -> dict:
    labeled = sorted({p.image_id for p in points} & set(images))
    if not labeled:
        raise InsufficientDataError("no image carries ground labels")
    extents = {}
    for iid in labeled:
        img = load_image(cfg.out / "pre" / f"{iid}.png")
        extents[iid] = img.extent
    for p in points:
        e = extents.get(p.image_id)
        if e is not None and not (0 <= p.x <= e.width and 0 <= p.y <= e.height):
            raise OutOfExtentError(f"point {p} lies outside image {p.image_id!r} ({e.width}x{e.height})")
    train, test = split_subareas(extents, cfg.subarea, cfg.split, cfg.split_seed)
    (cfg.out / "split.json").write_text(
        json.dumps({"train": _extent_json(train), "test": _extent_json(test)}, indent=1) + "\n"
    )

    keys, labels = read_assignments(cfg.out / "assignments.csv")
    rel_idx = [
        i for i, key in enumerate(keys)
        if any(j == key[0] and _inside(key[1], key[2], cfg.patch_size, a) for j, a in train)
    ]
    rel_keys = [keys[i] for i in rel_idx]
    relevance = phase_relevance(rel_keys, labels[rel_idx], points, cfg.target, cfg.k, cfg.patch_size,
                                cfg.presence)
    labeling = label_clusters(relevance, cfg.rule)
    labeling.save(cfg.out / "labeling.json")
    return {"relevance_patches": len(rel_keys), "train_subareas": len(train), "test_subareas": len(test)}


def _train_grid_one(job):
    path, iid, areas, size, stride, extractors, bins = job
    img = load_image(path)
    grids = [extract_patches(a, size, stride, iid) for a in areas]
    origins = tuple(o for g in grids for o in g.origins)
    grid = PatchGrid(iid, size, stride, origins, img.width, img.height)
    return [compute_features(img, grid, ex, HogParams(), bins) for ex in extractors]


def stage_train(cfg: PipelineConfig) -> dict:
    split = json.loads((cfg.out / "split.json").read_text())
    train = _extent_from_json(split["train"])
    jobs = []
    for iid in sorted({iid for iid, _ in train}):
        areas = [a for j, a in train if j == iid]
        jobs.append((str(cfg.out / "pre" / f"{iid}.png"), iid, areas, cfg.patch_size, cfg.train_stride,
                     (cfg.cluster_descriptor, cfg.train_descriptor), cfg.color_bins))
    parts = _map(_train_grid_one, jobs, cfg.workers)
    cluster_fm = FeatureMatrix.concat([p[0] for p in parts])
    train_fm = FeatureMatrix.concat([p[1] for p in parts])

    model = load_model(cfg.out / "kmeans.aplkm")
    labeling = ClusterLabeling.load(cfg.out / "labeling.json")
    assigned = kmeans_assign(model, cluster_fm)
    tset = build_training_set(cluster_fm.keys, assigned, labeling, cfg.neg_ratio, cfg.sample_seed)
    tset.write_csv(cfg.out / "training.csv")
    rows = train_fm.select(tset.keys)
    save_features(rows, cfg.out / "train.aplfeat")
    ensemble = train_gbdt(rows.rows, tset.labels, cfg.gbdt_params(), cfg.gbdt_seed)
    ensemble.save(cfg.out / "model.json")
    return {"train_positive": tset.n_positive, "train_negative": len(tset.keys) - tset.n_positive,
            "final_loss": ensemble.loss_history[-1]}


def _predict_one(job):
    path, model_path, dst, window, step, descriptor, bins = job
    model = TreeEnsemble.load(model_path)
    pmap = sliding_window_predict(load_image(path), model, window, step, descriptor, HogParams(), bins)
    pmap.save(dst)
    return dst


def stage_predict(cfg: PipelineConfig, images: dict[str, Path]) -> dict:
    pred = cfg.out / "pred"
    pred.mkdir(parents=True, exist_ok=True)
    jobs = [
        (str(cfg.out / "pre" / f"{iid}.png"), str(cfg.out / "model.json"), str(pred / f"{iid}.png"),
         cfg.window, cfg.step, cfg.train_descriptor, cfg.color_bins)
        for iid in images
    ]
    _map(_predict_one, jobs, cfg.workers)
    return {"predicted_images": len(jobs)}


def truth_path(cfg: PipelineConfig, iid: str) -> Path:
    return Path(cfg.truth_dir or cfg.image_dir) / f"{iid}.truth.png"


def _test_cells(test, iid: str, cell: int, gw: int, gh: int) -> np.ndarray:
    sel = np.zeros((gh, gw), dtype=bool)
    for j, a in test:
        if j == iid:
            sel[a.y // cell:a.y1 // cell, a.x // cell:a.x1 // cell] = True
    return sel


def stage_eval(cfg: PipelineConfig, points: list[PointLabel]) -> dict:
    split = json.loads((cfg.out / "split.json").read_text())
    test = _extent_from_json(split["test"])
    scores, states = [], []
    preds, refs = [], []
    for iid in sorted({iid for iid, _ in test}):
        pmap = PredictionMap.load(cfg.out / "pred" / f"{iid}.png")
        extent = Extent(0, 0, pmap.image_width, pmap.image_height)
        raster = rasterize_point_labels(points, pmap.cell_size, extent, cfg.target, image_id=iid)
        sel = _test_cells(test, iid, pmap.cell_size, pmap.grid_width, pmap.grid_height)
        sel &= raster.labeled & pmap.covered
        scores.append(pmap.scores[sel])
        states.append(raster.states[sel])
        tp = truth_path(cfg, iid)
        if tp.is_file():
            cells = _test_cells(test, iid, pmap.cell_size, pmap.grid_width, pmap.grid_height)
            region = np.kron(cells, np.ones((pmap.cell_size, pmap.cell_size), dtype=bool))
            preds.append(threshold_prediction(pmap, cfg.threshold).data[region])
            refs.append(load_mask(tp).data[region])
    curve = roc_auc(np.concatenate(scores), np.concatenate(states) == 1)
    metrics = {"auc": curve.auc, "accuracy": None, "iou": None, "threshold": cfg.threshold,
               "n_positive_cells": int(sum((s == 1).sum() for s in states)),
               "n_negative_cells": int(sum((s == 0).sum() for s in states)),
               "roc": curve.to_json()}
    if preds:
        p = SegmentationMask(np.concatenate(preds)[None, :])
        r = SegmentationMask(np.concatenate(refs)[None, :])
        metrics["accuracy"], metrics["iou"] = mask_metrics(p, r)
    (cfg.out / "metrics.json").write_text(json.dumps(metrics, indent=1) + "\n")
    (cfg.out / "roc.svg").write_text(roc_svg(curve, "held-out subareas"))
    return {k: metrics[k] for k in ("auc", "accuracy", "iou")}


def prototype_quality(cfg: PipelineConfig, images: dict[str, Path]) -> dict | None:
    """Precision and recall of the positive clusters against truth-majority patches."""
    grid_file = cfg.out / "grid_assignments.csv"
    keys, labels = read_assignments(grid_file if grid_file.is_file() else cfg.out / "assignments.csv")
    labeling = ClusterLabeling.load(cfg.out / "labeling.json")
    masks = {iid: load_mask(truth_path(cfg, iid)).data for iid in images if truth_path(cfg, iid).is_file()}
    if not masks:
        return None
    s = cfg.patch_size
    truth, pred = [], []
    for key, c in zip(keys, labels):
        m = masks.get(key[0])
        if m is None:
            continue
        x, y = key[1], key[2]
        truth.append(2 * int(m[y:y + s, x:x + s].sum()) > s * s)
        pred.append(int(c) in labeling.positive)
    truth, pred = np.asarray(truth), np.asarray(pred)
    hit = int((truth & pred).sum())
    return {
        "precision": hit / int(pred.sum()) if pred.any() else 0.0,
        "recall": hit / int(truth.sum()) if truth.any() else 0.0,
        "truth_patches": int(truth.sum()),
        "predicted_patches": int(pred.sum()),
    }


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------


@dataclass
class RunReport:
    config: dict
    relevance: list
    positive: list
    auc: float
    accuracy: float | None
    iou: float | None
    stages: dict = field(default_factory=dict)
    prototype: dict | None = None
    timings: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def without_timings(self) -> dict:
        obj = self.to_json()
        obj.pop("timings")
        return obj


def run_pipeline(cfg: PipelineConfig, log: Callable[[str], None] | None = None) -> RunReport:
    """Run every stage, recomputing only missing or stale outputs."""
    log = log or (lambda msg: None)
    cfg.out.mkdir(parents=True, exist_ok=True)
    stamps = _Stamps(cfg.out)
    settings = asdict(cfg)
    settings.pop("workers")  # output is schedule independent
    settings.pop("out_dir")

    try:
        images = discover_images(cfg.image_dir)
    except (OSError, ValueError) as exc:
        raise StageError("preprocess", exc) from exc
    ids = list(images)
    out = cfg.out
    pre = [out / "pre" / f"{i}.png" for i in ids]
    dense = cfg.corpus_stride != cfg.patch_size
    features_out = [out / "cluster.aplfeat"] + ([out / "grid.aplfeat"] if dense else [])
    cluster_out = [out / "kmeans.aplkm", out / "assignments.csv"] + ([out / "grid_assignments.csv"] if dense else [])
    plan = [
        ("preprocess", list(images.values()), pre + [out / "pre" / f"{i}.shadow.png" for i in ids],
         ["shadow_removal", "blur_sigma", "threshold_factor"], lambda: stage_preprocess(cfg, images)),
        ("features", pre, features_out,
         ["patch_size", "cluster_stride", "cluster_descriptor", "color_bins"], lambda: stage_features(cfg, images)),
        ("cluster", features_out, cluster_out,
         ["k", "cluster_seed", "max_iter", "rel_tol", "standardize"], lambda: stage_cluster(cfg)),
        ("assign", [out / "assignments.csv", Path(cfg.labels)], [out / "labeling.json", out / "split.json"],
         ["target", "rule", "presence", "subarea", "split", "split_seed"],
         lambda: stage_assign(cfg, images, read_points_csv(cfg.labels))),
        ("train", [out / "labeling.json", out / "split.json", out / "kmeans.aplkm"],
         [out / "model.json", out / "training.csv"],
         ["neg_ratio", "sample_seed", "train_stride", "train_descriptor", "rounds", "learning_rate",
          "max_depth", "min_child_weight", "l2_lambda", "subsample", "colsample", "gbdt_seed"],
         lambda: stage_train(cfg)),
        ("predict", [out / "model.json"] + pre, [out / "pred" / f"{i}.png" for i in ids],
         ["window", "step"], lambda: stage_predict(cfg, images)),
        ("eval", [out / "split.json", Path(cfg.labels)] + [out / "pred" / f"{i}.png" for i in ids],
         [out / "metrics.json", out / "roc.svg"], ["threshold", "truth_dir"],
         lambda: stage_eval(cfg, read_points_csv(cfg.labels))),
    ]

    timings, summaries = {}, {}
    upstream: dict = {}
    for name, inputs, outputs, keys, fn in plan:
        upstream.update({k: settings[k] for k in keys})
        t0 = time.perf_counter()
        cached = stamps.fresh(name, inputs, outputs, upstream)
        if cached is not None:
            log(f"[{name}] up to date")
            summaries[name] = cached
        else:
            log(f"[{name}] running")
            try:
                summaries[name] = fn()
            except AplError as exc:
                raise StageError(name, exc) from exc
            except (OSError, ValueError, KeyError) as exc:
                raise StageError(name, exc) from exc
            stamps.mark(name, upstream, summaries[name])
        timings[name] = time.perf_counter() - t0

    labeling = ClusterLabeling.load(out / "labeling.json")
    metrics = json.loads((out / "metrics.json").read_text())
    report = RunReport(
        config=asdict(cfg),
        relevance=list(labeling.relevance),
        positive=list(labeling.positive),
        auc=metrics["auc"],
        accuracy=metrics["accuracy"],
        iou=metrics["iou"],
        stages=summaries,
        prototype=prototype_quality(cfg, images),
        timings=timings,
    )
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1) + "\n")
    return report
