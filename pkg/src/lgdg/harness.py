"""Experiment orchestration: dataset provisioning, two-stage training,
the three adaptation settings, ablation grids, and report emission.

Every run cell is identified by (config fingerprint, seed) and is
bit-reproducible: the root seed fans out into named substreams (data,
detector-noise, init, masking, batching, eval) so toggling one mechanism
never perturbs another's draws.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .config import (
    ConfigError,
    ExperimentConfig,
    FEATURE_CATEGORY_NAMES,
    LossWeights,
    substream,
    stable_stream_int,
)
from .detector import (
    GridDetector,
    OracleDetector,
    _Adam,
    detect,
    train_grid_detector,
)
from .graph import GraphGeometry, encode_prepared, mask, prepare_geometry
from .losses import ClassBalance, balanced_bce, lg_sample_loss
from .metrics import aggregate, map3
from .models import BaselineClassifier, LgModel, rasterize_detections
from .scenes import Dataset, generate_domain, read_dataset, stratified_split, video_rates, write_dataset


class ProtocolViolationError(Exception):
    """An adaptation-setting contract was breached (CLI exit code 3)."""


class NumericDivergenceError(Exception):
    """Training produced a non-finite loss (CLI exit code 4)."""


LG_VARIANTS = ("lg", "lg-dg")


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def dataset_fingerprint(cfg: ExperimentConfig, domain_key: str) -> str:
    payload = {
        "domain": cfg.domains[domain_key].to_dict(),
        "videos": cfg.videos_per_domain,
        "frames": cfg.frames_per_video,
        "fractions": list(cfg.split_fractions),
        "data_seed": cfg.data_seed,
    }
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def ensure_dataset(cfg: ExperimentConfig, domain_key: str,
                   data_root: str | Path) -> Dataset:
    """Read the cached dataset for a domain, generating it if absent."""
    root = Path(data_root)
    path = root / f"ds_{domain_key}_{dataset_fingerprint(cfg, domain_key)}"
    if (path / "manifest.json").exists():
        return read_dataset(path)
    domain = cfg.domains[domain_key]
    scenes = generate_domain(domain, cfg.videos_per_domain,
                             cfg.frames_per_video, cfg.data_seed)
    rates = video_rates(scenes)
    names = ("train", "val", "test")
    split = dict(zip(names, stratified_split(rates, cfg.split_fractions,
                                             seed=cfg.data_seed)))
    ds = Dataset(scenes, domain, split, cfg.data_seed)
    write_dataset(ds, path)
    return ds


class GuardedDataset:
    """Access-audited dataset wrapper: splits outside the allow-list raise.

    The domain-generalization runner wraps the target dataset with
    allowed={'test'} so any code path that tries to read target training
    frames or labels aborts the run.
    """

    def __init__(self, dataset: Dataset, allowed: set[str], label: str):
        self._dataset = dataset
        self._allowed = set(allowed)
        self._label = label

    @property
    def domain(self):
        return self._dataset.domain

    def split_scenes(self, name: str):
        if name not in self._allowed:
            raise ProtocolViolationError(
                f"protocol violation: {self._label} split {name!r} may not be "
                f"read in this setting (allowed: {sorted(self._allowed)})")
        return self._dataset.split_scenes(name)


# ---------------------------------------------------------------------------
# Frame preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedFrame:
    frame_id: int
    image: np.ndarray                  # (3, input_hw, input_hw)
    label: tuple[int, int, int]
    detections: list
    input_boxes: list                  # detection boxes scaled to input coords
    geometry: GraphGeometry | None     # lg variants
    raster: np.ndarray | None          # layout baselines
    native_size: tuple[int, int]


def _frame_id(scene) -> int:
    return scene.video_id * 100_000 + scene.frame_index


def prepare_frames(scenes, detect_fn, model_cfg, variant: str,
                   backbone_out_hw: int, knn_k: int) -> list[PreparedFrame]:
    frames = []
    hw = model_cfg.input_hw
    for s in scenes:
        dets = detect_fn(s)
        img = s.image
        if img.shape[1:] != (hw, hw):
            img = ad.bilinear_resize_array(img, hw, hw)
        w, h = s.image_size
        input_boxes = [(d.box[0] * hw / w, d.box[1] * hw / h,
                        d.box[2] * hw / w, d.box[3] * hw / h) for d in dets]
        geometry = raster = None
        if variant in LG_VARIANTS:
            geometry = prepare_geometry(dets, s.image_size,
                                        (backbone_out_hw, backbone_out_hw), knn_k)
        elif variant in ("layout", "layout+image"):
            raster = rasterize_detections(dets, s.image_size, hw)
        frames.append(PreparedFrame(_frame_id(s), img, s.label, dets,
                                    input_boxes, geometry, raster, s.image_size))
    return frames


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    fingerprint: str
    seed: int
    setting: str
    variant: str
    train_losses: list[float]          # per-epoch means
    val_map_per_epoch: list[float]
    best_epoch: int
    val_ap: tuple[float, float, float]
    val_map: float
    test_ap: tuple[float, float, float]
    test_map: float
    wall_time_s: float
    detector_box_map: float | None = None

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint, "seed": self.seed,
            "setting": self.setting, "variant": self.variant,
            "train_losses": list(self.train_losses),
            "val_map_per_epoch": list(self.val_map_per_epoch),
            "best_epoch": self.best_epoch,
            "val_ap": list(self.val_ap), "val_map": self.val_map,
            "test_ap": list(self.test_ap), "test_map": self.test_map,
            "wall_time_s": self.wall_time_s,
            "detector_box_map": self.detector_box_map,
        }

    @staticmethod
    def from_dict(d: dict) -> "RunRecord":
        return RunRecord(
            d["fingerprint"], d["seed"], d["setting"], d["variant"],
            list(d["train_losses"]), list(d["val_map_per_epoch"]),
            d["best_epoch"], tuple(d["val_ap"]), d["val_map"],
            tuple(d["test_ap"]), d["test_map"], d["wall_time_s"],
            d.get("detector_box_map"),
        )


# ---------------------------------------------------------------------------
# Training one cell
# ---------------------------------------------------------------------------


def _setting_plan(cfg: ExperimentConfig, source_ds: Dataset, target_ds: Dataset):
    """Which domain trains the detector, which splits train/validate/test the
    classifier, and which accesses are even allowed."""
    if cfg.setting == "fully-supervised":
        det_domain = cfg.target_domain
        cls_ds = GuardedDataset(target_ds, {"train", "val", "test"}, "target")
        det_ds = cls_ds
    elif cfg.setting == "partially-supervised":
        det_domain = cfg.source_domain
        cls_ds = GuardedDataset(target_ds, {"train", "val", "test"}, "target")
        det_ds = GuardedDataset(source_ds, {"train", "val", "test"}, "source")
    elif cfg.setting == "domain-generalization":
        det_domain = cfg.source_domain
        cls_ds = GuardedDataset(source_ds, {"train", "val", "test"}, "source")
        det_ds = cls_ds
    else:
        raise ConfigError(f"unknown setting {cfg.setting!r}")
    test_ds = GuardedDataset(
        target_ds,
        {"test"} if cfg.setting == "domain-generalization" else {"train", "val", "test"},
        "target")
    return det_domain, det_ds, cls_ds, test_ds


def _make_detect_fn(cfg: ExperimentConfig, det_domain: str, det_ds, seed: int):
    """Frozen per-run detection source; per-frame substreams keep oracle
    noise independent of iteration order."""
    if cfg.detection.source == "oracle":
        oracle = OracleDetector(det_domain, cfg.oracle_profiles)

        def detect_fn(scene):
            rng = substream(seed, "detector-noise", scene.video_id, scene.frame_index)
            return oracle.detect_scene(scene, rng)

        return detect_fn, None
    if cfg.detection.source != "grid":
        raise ConfigError(f"unknown detection source {cfg.detection.source!r}")

    annotated = det_ds.split_scenes("train")
    step = max(1, int(round(1.0 / cfg.detection.annotated_fraction)))
    annotated = annotated[::step]  # the box-annotated subset
    gd = train_grid_detector(annotated, cfg.model,
                             seed=stable_stream_int((seed, "detector-train")) % (2 ** 62),
                             epochs=cfg.detection.grid_epochs,
                             lr=cfg.optim.lr)

    def detect_fn(scene):
        return detect(gd, scene.image, scene.image_size,
                      cfg.detection.score_threshold, cfg.detection.nms_iou)

    return detect_fn, gd


class _Classifier:
    """Uniform train/eval facade over the lg family and the baselines."""

    def __init__(self, cfg: ExperimentConfig, rng, grid_detector):
        self.cfg = cfg
        self.variant = cfg.variant
        if self.variant in LG_VARIANTS:
            self.model = LgModel(cfg.model, rng,
                                 include_backbone=cfg.recon_include_backbone)
        else:
            enc = grid_detector.encoder if self.variant == "det-init" else None
            self.model = BaselineClassifier(self.variant, cfg.model, rng,
                                            detector_encoder=enc)
        if self.variant == "lg-dg":
            self.weights = cfg.loss_weights
        elif self.variant == "lg":
            w = cfg.loss_weights
            self.weights = LossWeights(0.0, 0.0, 0.0, w.lambda_recon)
        else:
            self.weights = None

    def parameters(self) -> dict:
        return self.model.parameters()

    def sample_loss(self, frame: PreparedFrame, bal, rng) -> ad.Tensor:
        y = frame.label
        if self.variant in LG_VARIANTS:
            img = ad.constant(frame.image)
            g = encode_prepared(frame.geometry, self.model.backbone.forward(img))
            return lg_sample_loss(self.model, g, y, img, frame.input_boxes,
                                  self.weights, bal, self.cfg.cvs_mask,
                                  self.cfg.recon_mask, rng)
        logits = self._baseline_logits(frame)
        return balanced_bce(logits, y, bal)

    def _baseline_logits(self, frame: PreparedFrame) -> ad.Tensor:
        img = ad.constant(frame.image)
        if self.variant in ("layout", "layout+image"):
            raster = ad.constant(frame.raster)
            x = raster if self.variant == "layout" else ad.concat([raster, img], axis=0)
            return self.model.net.logits(x)
        return self.model.net.logits(img)

    def scores(self, frame: PreparedFrame, rng) -> np.ndarray:
        """Per-criterion probabilities for evaluation (masking applied as
        configured, exactly as during training)."""
        if self.variant in LG_VARIANTS:
            img = ad.constant(frame.image)
            g = encode_prepared(frame.geometry, self.model.backbone.forward(img))
            if self.cfg.cvs_mask:
                g = mask(g, self.cfg.cvs_mask, rng)
            logits = self.model.head.forward(g)
        else:
            logits = self._baseline_logits(frame)
        return ad.sigmoid(logits).data.reshape(3)


def _evaluate(clf: _Classifier, frames: list[PreparedFrame], rng) -> tuple[float, tuple]:
    scores = np.stack([clf.scores(f, rng) for f in frames])
    labels = np.stack([f.label for f in frames])
    ids = [f.frame_id for f in frames]
    return map3(scores, labels, ids)


def train_run(cfg: ExperimentConfig, seed: int, source_ds: Dataset,
              target_ds: Dataset) -> RunRecord:
    """Train one (config, seed) cell and evaluate on the setting's test split."""
    cfg.validate()
    if cfg.variant == "det-init" and cfg.detection.source != "grid":
        raise ConfigError("det-init requires detection.source == 'grid'")
    start = time.perf_counter()
    det_domain, det_ds, cls_ds, test_ds = _setting_plan(cfg, source_ds, target_ds)
    detect_fn, grid_detector = _make_detect_fn(cfg, det_domain, det_ds, seed)

    bb_out = cfg.model.input_hw // 8
    train_frames = prepare_frames(cls_ds.split_scenes("train"), detect_fn,
                                  cfg.model, cfg.variant, bb_out, cfg.model.knn_edges)
    val_frames = prepare_frames(cls_ds.split_scenes("val"), detect_fn,
                                cfg.model, cfg.variant, bb_out, cfg.model.knn_edges)
    test_frames = prepare_frames(test_ds.split_scenes("test"), detect_fn,
                                 cfg.model, cfg.variant, bb_out, cfg.model.knn_edges)

    bal = ClassBalance.from_labels([f.label for f in train_frames])
    clf = _Classifier(cfg, substream(seed, "init"), grid_detector)
    params = clf.parameters()
    opt = _Adam(params, cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2,
                cfg.optim.eps)

    batch_rng = substream(seed, "batching")
    mask_rng = substream(seed, "masking")

    best = {"val_map": -1.0, "epoch": -1,
            "params": {k: p.data.copy() for k, p in params.items()},
            "val_ap": (0.0, 0.0, 0.0)}
    train_losses: list[float] = []
    val_curve: list[float] = []

    n = len(train_frames)
    bs = cfg.optim.batch_size
    for epoch in range(cfg.optim.epochs):
        order = batch_rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, bs):
            batch = [train_frames[i] for i in order[lo:lo + bs]]
            with Tape():
                total = clf.sample_loss(batch[0], bal, mask_rng)
                for f in batch[1:]:
                    total = ad.add(total, clf.sample_loss(f, bal, mask_rng))
                total = ad.scale(total, 1.0 / len(batch))
                loss_val = total.item()
                if not np.isfinite(loss_val):
                    raise NumericDivergenceError(
                        f"non-finite loss {loss_val} at epoch {epoch}, "
                        f"batch {lo // bs}, seed {seed}")
                backward(total)
            opt.step()
            ad.zero_grads(params.values())
            epoch_losses.append(loss_val)
        train_losses.append(float(np.mean(epoch_losses)))
        val_map, val_ap = _evaluate(clf, val_frames, substream(seed, "masking-eval", epoch))
        val_curve.append(val_map)
        if val_map > best["val_map"]:
            best = {"val_map": val_map, "epoch": epoch,
                    "params": {k: p.data.copy() for k, p in params.items()},
                    "val_ap": val_ap}

    # zero-epoch runs report initialization metrics
    if cfg.optim.epochs == 0:
        val_map, val_ap = _evaluate(clf, val_frames, substream(seed, "masking-eval", 0))
        best = {"val_map": val_map, "epoch": -1, "params": None, "val_ap": val_ap}
    elif best["params"] is not None:
        for k, p in params.items():
            p.data[...] = best["params"][k]

    test_map, test_ap = _evaluate(clf, test_frames, substream(seed, "masking-test"))
    det_map = None
    if grid_detector is not None:
        from .detector import detector_box_map
        det_map = detector_box_map(
            lambda s: detect_fn(s), det_ds.split_scenes("val"))["avg"]

    return RunRecord(cfg.fingerprint(), seed, cfg.setting, cfg.variant,
                     train_losses, val_curve, best["epoch"], best["val_ap"],
                     best["val_map"], test_ap, test_map,
                     time.perf_counter() - start, det_map)


# ---------------------------------------------------------------------------
# Settings, grids, presets
# ---------------------------------------------------------------------------


def _worker_cell(args) -> dict:
    cfg_json, seed, data_root = args
    cfg = ExperimentConfig.from_json(cfg_json)
    source_ds = ensure_dataset(cfg, cfg.source_domain, data_root)
    target_ds = ensure_dataset(cfg, cfg.target_domain, data_root)
    return train_run(cfg, seed, source_ds, target_ds).to_dict()


def cell_parallelism() -> int:
    try:
        return max(1, int(os.environ.get("LGDG_THREADS", "1")))
    except ValueError:
        return 1


def run_setting(cfg: ExperimentConfig, data_root: str | Path,
                datasets: tuple[Dataset, Dataset] | None = None) -> list[RunRecord]:
    """All seeds of one configuration under its adaptation setting."""
    cfg.validate()
    workers = cell_parallelism()
    if workers > 1 and len(cfg.seeds) > 1:
        # make sure datasets exist before forking
        ensure_dataset(cfg, cfg.source_domain, data_root)
        ensure_dataset(cfg, cfg.target_domain, data_root)
        jobs = [(cfg.to_json(), seed, str(data_root)) for seed in cfg.seeds]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            dicts = list(pool.map(_worker_cell, jobs))
        return [RunRecord.from_dict(d) for d in dicts]
    if datasets is None:
        source_ds = ensure_dataset(cfg, cfg.source_domain, data_root)
        target_ds = ensure_dataset(cfg, cfg.target_domain, data_root)
    else:
        source_ds, target_ds = datasets
    return [train_run(cfg, seed, source_ds, target_ds) for seed in cfg.seeds]


# keep sets per grid row, in the paper tables' row order
CVS_HEAD_GRID = (
    ("graph-visual", "graph-semantic", "backbone-image"),
    ("graph-visual", "graph-semantic"),
    ("graph-visual", "backbone-image"),
    ("graph-semantic",),
    ("graph-semantic", "backbone-image"),
    ("graph-visual",),
)

RECON_GRID = (
    ("graph-visual", "graph-semantic", "backbone-image"),
    ("graph-visual", "graph-semantic"),
    ("graph-visual", "backbone-image"),
    ("graph-semantic",),
    ("graph-semantic", "backbone-image"),
)

GRID_PRESETS = {"cvs-head": CVS_HEAD_GRID, "recon": RECON_GRID}


def mask_for_kept(kept) -> tuple[str, ...]:
    return tuple(c for c in FEATURE_CATEGORY_NAMES if c not in kept)


@dataclass
class GridRow:
    kept: tuple[str, ...]
    records: list[RunRecord]

    def checkmarks(self) -> str:
        return " ".join("✓" if c in self.kept else "✗"
                        for c in FEATURE_CATEGORY_NAMES)


def run_ablation_grid(base_cfg: ExperimentConfig, head: str, rows,
                      data_root: str | Path) -> list[GridRow]:
    """One run-set per row; a row lists the categories kept for the chosen
    head ('cvs' or 'recon'), everything else is masked."""
    if not rows:
        raise ConfigError("empty ablation grid")
    if head not in ("cvs", "recon"):
        raise ConfigError(f"unknown ablation head {head!r}")
    source_ds = ensure_dataset(base_cfg, base_cfg.source_domain, data_root)
    target_ds = ensure_dataset(base_cfg, base_cfg.target_domain, data_root)
    out = []
    for kept in rows:
        kept = tuple(kept)
        for c in kept:
            if c not in FEATURE_CATEGORY_NAMES:
                raise ConfigError(f"unknown feature category {c!r}")
        if head == "cvs":
            cfg = base_cfg.replace(cvs_mask=mask_for_kept(kept))
        else:
            cfg = base_cfg.replace(recon_mask=mask_for_kept(kept))
        out.append(GridRow(kept, run_setting(cfg, data_root,
                                             (source_ds, target_ds))))
    return out


def grid_report_text(rows: list[GridRow]) -> str:
    header = ("graph-visual graph-semantic backbone-image".split())
    lines = ["  ".join(f"{h:>14}" for h in header) + "   mAP"]
    for row in rows:
        cells = ["✓" if c in row.kept else "✗" for c in header]
        agg = aggregate([r.test_map for r in row.records])
        lines.append("  ".join(f"{c:>14}" for c in cells) + f"   {agg.formatted()}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("fingerprint", "seed", "setting", "variant",
               "ap_c1", "ap_c2", "ap_c3", "map")


def emit_report(records: list[RunRecord], out_dir: str | Path,
                fmt: str = "csv") -> Path:
    """CSV: one row per run in a stable column order. JSON: nested
    aggregates with mean +/- std per (setting, variant, fingerprint)."""
    if not records:
        raise ValueError("no records to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = out_dir / "runs.csv"
        lines = [",".join(CSV_COLUMNS)]
        for r in sorted(records, key=lambda r: (r.fingerprint, r.seed)):
            lines.append(",".join([
                r.fingerprint, str(r.seed), r.setting, r.variant,
                repr(r.test_ap[0]), repr(r.test_ap[1]), repr(r.test_ap[2]),
                repr(r.test_map)]))
        path.write_text("\n".join(lines) + "\n")
        return path
    if fmt == "json":
        path = out_dir / "aggregate.json"
        groups: dict[tuple, list[RunRecord]] = {}
        for r in records:
            groups.setdefault((r.setting, r.variant, r.fingerprint), []).append(r)
        payload = {}
        for (setting, variant, fp), recs in sorted(groups.items()):
            agg = aggregate([r.test_map for r in recs])
            payload.setdefault(setting, {})[f"{variant}:{fp}"] = {
                "variant": variant,
                "fingerprint": fp,
                "seeds": [r.seed for r in recs],
                "test_map_values": list(agg.values),
                "mean": agg.mean,
                "std": agg.std,
                "formatted": agg.formatted(),
            }
        path.write_text(json.dumps(payload, indent=1, sort_keys=True))
        return path
    raise ValueError(f"unknown report format {fmt!r}")


def read_report_csv(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().strip().split("\n")
    header = lines[0].split(",")
    out = []
    for line in lines[1:]:
        cells = line.split(",")
        row = dict(zip(header, cells))
        row["seed"] = int(row["seed"])
        for k in ("ap_c1", "ap_c2", "ap_c3", "map"):
            row[k] = float(row[k])
        out.append(row)
    return out


def save_records(records: list[RunRecord], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in records], indent=1))


def load_records(path: str | Path) -> list[RunRecord]:
    return [RunRecord.from_dict(d) for d in json.loads(Path(path).read_text())]
