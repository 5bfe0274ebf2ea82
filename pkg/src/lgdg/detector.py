"""Detection sources: an oracle-with-noise simulator standing in for a
frozen detector, and a small learned grid detector for the two-stage
protocol and the detector-initialized baseline.

The oracle perturbs ground-truth objects under a configurable noise
profile (per-class misses, box jitter, confusion-mixed class probabilities,
false positives) and never reads a scene's label. Profiles keyed by
(trained-domain, applied-domain) pairs give controllable cross-domain
degradation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape, backward
from .containerio import read_container, write_container
from .metrics import average_precision
from .models import Backbone, Linear, save_params, load_params, _prefixed
from .scenes import N_CLASSES, Scene, box_iou

N_HEAD_FIELDS = 11  # 1 objectness + 6 class logits + 4 box offsets


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    class_probs: tuple[float, ...]
    score: float

    def __post_init__(self):
        total = sum(self.class_probs)
        if abs(total - 1.0) >= 1e-9:
            raise ValueError(f"class_probs sum {total} != 1")


@dataclass(frozen=True)
class NoiseProfile:
    box_jitter_sigma: float
    miss_rate: tuple[float, ...]            # per class
    false_positive_rate: float
    confusion: tuple[tuple[float, ...], ...]  # row-stochastic 6x6
    prob_temperature: float

    def __post_init__(self):
        for rate in tuple(self.miss_rate) + (self.false_positive_rate,):
            if not (0.0 <= rate <= 1.0):
                raise ValueError(f"rate {rate} outside [0, 1]")
        for row in self.confusion:
            if abs(sum(row) - 1.0) > 1e-9:
                raise ValueError("confusion rows must sum to 1")
        if self.prob_temperature <= 0:
            raise ValueError("prob_temperature must be positive")

    @staticmethod
    def from_config(d: dict) -> "NoiseProfile":
        diag = d["confusion_diag"]
        off = (1.0 - diag) / (N_CLASSES - 1)
        confusion = tuple(tuple(diag if i == j else off for j in range(N_CLASSES))
                          for i in range(N_CLASSES))
        return NoiseProfile(
            box_jitter_sigma=d["box_jitter_sigma"],
            miss_rate=tuple(d["miss_rate"]),
            false_positive_rate=d["false_positive_rate"],
            confusion=confusion,
            prob_temperature=d["prob_temperature"],
        )

    @staticmethod
    def exact() -> "NoiseProfile":
        identity = tuple(tuple(1.0 if i == j else 0.0 for j in range(N_CLASSES))
                         for i in range(N_CLASSES))
        return NoiseProfile(0.0, (0.0,) * N_CLASSES, 0.0, identity, 1.0)


def _soften(row, temperature: float) -> tuple[float, ...]:
    p = np.asarray(row, dtype=np.float64) ** (1.0 / temperature)
    p = p / p.sum()
    return tuple(float(v) for v in p)


def _fix_box(box, w, h) -> tuple[float, ...]:
    x1, x2 = sorted((box[0], box[2]))
    y1, y2 = sorted((box[1], box[3]))
    x1, x2 = np.clip((x1, x2), 0.0, w - 1.0)
    y1, y2 = np.clip((y1, y2), 0.0, h - 1.0)
    if x2 - x1 < 1.0:
        cx = np.clip((x1 + x2) / 2, 0.5, w - 1.5)
        x1, x2 = cx - 0.5, cx + 0.5
    if y2 - y1 < 1.0:
        cy = np.clip((y1 + y2) / 2, 0.5, h - 1.5)
        y1, y2 = cy - 0.5, cy + 0.5
    return (float(x1), float(y1), float(x2), float(y2))


def simulate_detect(scene: Scene, profile: NoiseProfile,
                    rng: np.random.Generator) -> list[Detection]:
    """Noisy observation of a scene's present objects.

    Per object, in list order: one miss draw, then (if kept) four jitter
    draws. After all objects: one false-positive draw, then (if it fires)
    a class index and four box corners. A zero-noise profile reproduces
    ground truth exactly with one-hot probabilities.
    """
    w, h = scene.image_size
    detections = []
    for obj in scene.objects:
        if not obj.present:
            continue
        if rng.uniform() < profile.miss_rate[obj.class_id]:
            continue
        jitter = rng.normal(0.0, 1.0, size=4) * profile.box_jitter_sigma
        box = _fix_box(np.asarray(obj.box) + jitter, w, h)
        probs = _soften(profile.confusion[obj.class_id], profile.prob_temperature)
        detections.append(Detection(box, probs, max(probs)))
    if rng.uniform() < profile.false_positive_rate:
        cls = int(rng.integers(0, N_CLASSES))
        x = np.sort(rng.uniform(0.0, w - 1.0, size=2))
        y = np.sort(rng.uniform(0.0, h - 1.0, size=2))
        box = _fix_box((x[0], y[0], x[1], y[1]), w, h)
        probs = _soften(profile.confusion[cls], profile.prob_temperature)
        detections.append(Detection(box, probs, max(probs)))
    return detections


class OracleDetector:
    """Frozen-detector stand-in: behavior depends on which domain it was
    'trained' on via the profile table keyed 'trained:applied'."""

    def __init__(self, trained_domain: str, profile_table: dict):
        self.trained_domain = trained_domain
        self.profiles = {k: (v if isinstance(v, NoiseProfile) else NoiseProfile.from_config(v))
                         for k, v in profile_table.items()}

    def profile_for(self, domain_id: str) -> NoiseProfile:
        return self.profiles[f"{self.trained_domain}:{domain_id}"]

    def detect_scene(self, scene: Scene, rng: np.random.Generator) -> list[Detection]:
        return simulate_detect(scene, self.profile_for(scene.domain_id), rng)


# ---------------------------------------------------------------------------
# Learned grid detector
# ---------------------------------------------------------------------------


class GridDetector:
    """Conv encoder + per-cell heads (objectness, class logits, box offsets)
    on the encoder's g x g output grid. The encoder is a plain Backbone so
    its weights satisfy the shape contract of the detector-initialized
    classifier."""

    def __init__(self, model_cfg, rng):
        self.input_hw = model_cfg.input_hw
        self.encoder = Backbone(3, model_cfg.input_hw, model_cfg.backbone_channels, rng)
        self.grid = self.encoder.out_hw
        self.head = Linear(model_cfg.backbone_channels, N_HEAD_FIELDS, rng)

    def cell_outputs(self, image: Tensor) -> Tensor:
        """(g*g, 11) raw head outputs for a model-input-sized image."""
        fmap = self.encoder.forward(image)
        c = fmap.shape[0]
        cells = ad.transpose2d(ad.reshape(fmap, (c, self.grid * self.grid)))
        return self.head(cells)

    def parameters(self) -> dict:
        return {**_prefixed("encoder", self.encoder.parameters()),
                **_prefixed("head", self.head.parameters())}

    def save(self, path, header: dict | None = None) -> None:
        meta = {"kind": "grid-detector", "input_hw": self.input_hw,
                "grid": self.grid}
        if header:
            meta.update(header)
        save_params(path, self.parameters(), meta)

    def load(self, path) -> dict:
        return load_params(path, self.parameters())


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _cell_targets(scene: Scene, grid: int, input_hw: int):
    """Objectness/class/box targets per cell; an object claims the cell its
    center falls in (largest area wins collisions)."""
    w, h = scene.image_size
    sx, sy = input_hw / w, input_hw / h
    cell = input_hw / grid
    obj_t = np.zeros(grid * grid)
    cls_t = np.zeros((grid * grid, N_CLASSES))
    box_t = np.zeros((grid * grid, 4))
    area = np.full(grid * grid, -1.0)
    for o in scene.objects:
        if not o.present:
            continue
        x1, y1, x2, y2 = o.box[0] * sx, o.box[1] * sy, o.box[2] * sx, o.box[3] * sy
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        col = int(np.clip(cx // cell, 0, grid - 1))
        row = int(np.clip(cy // cell, 0, grid - 1))
        k = row * grid + col
        a = (x2 - x1) * (y2 - y1)
        if a <= area[k]:
            continue
        area[k] = a
        obj_t[k] = 1.0
        cls_t[k] = 0.0
        cls_t[k, o.class_id] = 1.0
        box_t[k] = (cx / cell - col, cy / cell - row,
                    np.log(max(x2 - x1, 1e-6) / input_hw),
                    np.log(max(y2 - y1, 1e-6) / input_hw))
    return obj_t, cls_t, box_t


def grid_detector_loss(gd: GridDetector, image: Tensor, scene: Scene):
    """Objectness BCE over all cells + class BCE and box MSE at positive
    cells; returns (total, objectness-only) scalars."""
    out = gd.cell_outputs(image)
    g2 = gd.grid * gd.grid
    obj_t, cls_t, box_t = _cell_targets(scene, gd.grid, gd.input_hw)

    obj_logits = ad.take(out, np.arange(g2) * N_HEAD_FIELDS)
    obj_bce = ad.sub(ad.softplus(obj_logits), ad.mul(obj_logits, ad.constant(obj_t)))
    obj_loss = ad.mean_all(obj_bce)

    n_pos = max(1.0, obj_t.sum())
    pos_cls = np.repeat(obj_t[:, None], N_CLASSES, axis=1)
    cls_idx = (np.arange(g2)[:, None] * N_HEAD_FIELDS + 1 + np.arange(N_CLASSES)[None, :])
    cls_logits = ad.take(out, cls_idx)
    cls_bce = ad.sub(ad.softplus(cls_logits), ad.mul(cls_logits, ad.constant(cls_t)))
    cls_loss = ad.scale(ad.sum_all(ad.mul(cls_bce, ad.constant(pos_cls))),
                        1.0 / (n_pos * N_CLASSES))

    pos_box = np.repeat(obj_t[:, None], 4, axis=1)
    box_idx = (np.arange(g2)[:, None] * N_HEAD_FIELDS + 7 + np.arange(4)[None, :])
    box_pred = ad.take(out, box_idx)
    err = ad.sub(box_pred, ad.constant(box_t))
    box_loss = ad.scale(ad.sum_all(ad.mul(ad.mul(err, err), ad.constant(pos_box))),
                        1.0 / (n_pos * 4.0))

    total = ad.add(ad.add(obj_loss, cls_loss), box_loss)
    return total, obj_loss


def decode_cells(raw: np.ndarray, grid: int, input_hw: int, image_size,
                 score_threshold: float, nms_iou: float) -> list[Detection]:
    """Threshold on objectness, decode boxes, then greedy NMS."""
    w, h = image_size
    cell = input_hw / grid
    cands = []
    for k in range(grid * grid):
        obj_p = float(_sigmoid(raw[k, 0]))
        if obj_p < score_threshold:
            continue
        row, col = divmod(k, grid)
        tx, ty, tw, th = raw[k, 7:11]
        cx = (col + np.clip(tx, 0.0, 1.0)) * cell
        cy = (row + np.clip(ty, 0.0, 1.0)) * cell
        bw = np.exp(tw) * input_hw
        bh = np.exp(th) * input_hw
        box = ((cx - bw / 2) * w / input_hw, (cy - bh / 2) * h / input_hw,
               (cx + bw / 2) * w / input_hw, (cy + bh / 2) * h / input_hw)
        box = _fix_box(box, w, h)
        z = raw[k, 1:7] - raw[k, 1:7].max()
        e = np.exp(z)
        probs = tuple(float(v) for v in e / e.sum())
        cands.append((obj_p, Detection(box, probs, max(probs))))
    cands.sort(key=lambda t: -t[0])
    kept: list[Detection] = []
    for _, det in cands:
        if all(box_iou(det.box, k.box) <= nms_iou for k in kept):
            kept.append(det)
    return kept


def detect(gd: GridDetector, image: np.ndarray, image_size,
           score_threshold: float = 0.3, nms_iou: float = 0.5) -> list[Detection]:
    """Run the frozen grid detector on a native-resolution image."""
    if image.shape[1:] != (gd.input_hw, gd.input_hw):
        image = ad.bilinear_resize_array(image, gd.input_hw, gd.input_hw)
    raw = gd.cell_outputs(ad.constant(image)).data
    return decode_cells(raw, gd.grid, gd.input_hw, image_size,
                        score_threshold, nms_iou)


def train_grid_detector(train_scenes: list[Scene], model_cfg, seed: int,
                        epochs: int = 30, lr: float = 1e-3,
                        images: list[np.ndarray] | None = None) -> GridDetector:
    """Stage one of two-stage training: fit the grid detector on the
    box-annotated subset, then treat it as frozen. Deterministic in seed."""
    if not train_scenes:
        raise ValueError("empty detector training set")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD37]))
    gd = GridDetector(model_cfg, rng)
    params = gd.parameters()
    opt = _Adam(params, lr)
    if images is None:
        images = [_input_image(s, model_cfg.input_hw) for s in train_scenes]
    order = np.arange(len(train_scenes))
    for _ in range(epochs):
        rng.shuffle(order)
        for i in order:
            with Tape():
                loss, _ = grid_detector_loss(gd, ad.constant(images[i]), train_scenes[i])
                backward(loss)
            opt.step()
            ad.zero_grads(params.values())
    return gd


def _input_image(scene: Scene, input_hw: int) -> np.ndarray:
    img = scene.image
    if img.shape[1:] != (input_hw, input_hw):
        img = ad.bilinear_resize_array(img, input_hw, input_hw)
    return img


class _Adam:
    """Adaptive-moment SGD over a parameter dict."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# Box mAP (greedy IoU matching on top of the shared AP core)
# ---------------------------------------------------------------------------


def detector_box_map(detect_fn, scenes: list[Scene], iou_threshold: float = 0.5
                     ) -> dict:
    """Per-class AP with greedy IoU-0.5 matching; detections are assigned to
    their argmax class and scored by that class's probability."""
    per_class_scores = {c: [] for c in range(N_CLASSES)}
    per_class_hits = {c: [] for c in range(N_CLASSES)}
    n_gt = {c: 0 for c in range(N_CLASSES)}
    for scene in scenes:
        gt = {c: [o.box for o in scene.objects if o.present and o.class_id == c]
              for c in range(N_CLASSES)}
        for c in range(N_CLASSES):
            n_gt[c] += len(gt[c])
        dets = detect_fn(scene)
        by_class = {c: [] for c in range(N_CLASSES)}
        for d in dets:
            c = int(np.argmax(d.class_probs))
            by_class[c].append(d)
        for c in range(N_CLASSES):
            used = [False] * len(gt[c])
            for d in sorted(by_class[c], key=lambda d: -d.class_probs[int(np.argmax(d.class_probs))]):
                best, best_iou = -1, iou_threshold
                for gi, gbox in enumerate(gt[c]):
                    if used[gi]:
                        continue
                    v = box_iou(d.box, gbox)
                    if v >= best_iou:
                        best, best_iou = gi, v
                if best >= 0:
                    used[best] = True
                    per_class_hits[c].append(1)
                else:
                    per_class_hits[c].append(0)
                per_class_scores[c].append(max(d.class_probs))
    out = {}
    aps = []
    for c in range(N_CLASSES):
        if n_gt[c] == 0:
            out[c] = None
            continue
        if not per_class_scores[c]:
            out[c] = 0.0
        else:
            out[c] = average_precision(per_class_scores[c], per_class_hits[c],
                                       n_positive_total=n_gt[c])
        aps.append(out[c])
    out["avg"] = float(np.mean(aps)) if aps else 0.0
    return out
