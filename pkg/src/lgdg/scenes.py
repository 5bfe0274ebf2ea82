"""Synthetic two-domain scene generator.

A scene is a handful of colored boxes/ellipses on a noisy background. The
three binary criteria are pure functions of object geometry, so labels are
exactly recomputable, renders can change appearance without touching any
label, and the generator can drive per-criterion achievement rates toward
configured targets by planning label bits per frame and constructing
layouts that realize them.

Criterion rules (geometric surrogates for the clinical checklist):
  C1: a cystic duct and a cystic artery are both present, do not overlap
      each other, and each lies mostly (> 0.5 of its own area) inside a
      calot-triangle box.
  C2: a calot triangle is present and no tool box overlaps it with IoU
      above 0.2.
  C3: a cystic plate is present with area at least 1.5% of the image.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CLASS_NAMES = ("cystic_plate", "calot_triangle", "cystic_artery",
               "cystic_duct", "gallbladder", "tool")
CYSTIC_PLATE, CALOT_TRIANGLE, CYSTIC_ARTERY, CYSTIC_DUCT, GALLBLADDER, TOOL = range(6)
N_CLASSES = 6

C1_CONTAINMENT = 0.5
C2_TOOL_IOU = 0.2
C3_AREA_FRACTION = 0.015

# base colors before per-object jitter and domain hue shift
PALETTE = {
    CYSTIC_PLATE: (0.85, 0.75, 0.55),
    CALOT_TRIANGLE: (0.75, 0.45, 0.35),
    CYSTIC_ARTERY: (0.80, 0.15, 0.15),
    CYSTIC_DUCT: (0.55, 0.75, 0.35),
    GALLBLADDER: (0.35, 0.55, 0.25),
    TOOL: (0.70, 0.72, 0.78),
}

# (min, max) box side as a fraction of min(W, H), per class, for
# unconstrained placement
SIZE_RANGES = {
    CYSTIC_PLATE: (0.08, 0.22),
    CALOT_TRIANGLE: (0.30, 0.45),
    CYSTIC_ARTERY: (0.08, 0.16),
    CYSTIC_DUCT: (0.08, 0.16),
    GALLBLADDER: (0.25, 0.45),
    TOOL: (0.10, 0.40),
}

N_TOOL_SLOTS = 2


class DatasetError(Exception):
    """Corrupt manifest, bad checksum, or otherwise unreadable dataset."""


@dataclass
class SceneObject:
    class_id: int
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in pixels
    color: tuple[float, float, float]
    texture: float
    present: bool = True


@dataclass(eq=False)
class Scene:
    image: np.ndarray | None  # (3, H, W) float64 in [0, 1]
    objects: list[SceneObject]
    label: tuple[int, int, int]
    video_id: int
    frame_index: int
    domain_id: str
    image_size: tuple[int, int]  # (W, H)


@dataclass(frozen=True)
class DomainConfig:
    """Appearance, framing, imbalance and detector-noise profile of one domain."""

    name: str
    aspect_ratio: float  # W : H
    image_height: int
    fov_crop_fraction: float  # vignette radius, normalized half-axes units
    background_color: tuple[float, float, float]
    background_var: float
    hue_shift: float
    texture_amplitude: float
    presence_priors: tuple[float, ...]  # per class, CLASS_NAMES order
    target_rates: tuple[float, float, float]
    noise_profile: str

    @property
    def image_size(self) -> tuple[int, int]:
        h = int(self.image_height)
        return int(round(self.aspect_ratio * h)), h

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "DomainConfig":
        d = dict(d)
        d["background_color"] = tuple(d["background_color"])
        d["presence_priors"] = tuple(d["presence_priors"])
        d["target_rates"] = tuple(d["target_rates"])
        return DomainConfig(**d)


# ---------------------------------------------------------------------------
# Box geometry and labels
# ---------------------------------------------------------------------------


def box_area(b) -> float:
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def intersect_area(a, b) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(0.0, w) * max(0.0, h)


def box_iou(a, b) -> float:
    inter = intersect_area(a, b)
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def inside_fraction(inner, outer) -> float:
    area = box_area(inner)
    return intersect_area(inner, outer) / area if area > 0 else 0.0


def label_scene(objects: Iterable[SceneObject], image_w: int, image_h: int
                ) -> tuple[int, int, int]:
    """Recompute the three criteria from geometry alone."""
    present = [o for o in objects if o.present]
    by_class: dict[int, list] = {c: [] for c in range(N_CLASSES)}
    for o in present:
        by_class[o.class_id].append(o.box)

    c1 = False
    for tri in by_class[CALOT_TRIANGLE]:
        for duct in by_class[CYSTIC_DUCT]:
            for artery in by_class[CYSTIC_ARTERY]:
                if (intersect_area(duct, artery) <= 0.0
                        and inside_fraction(duct, tri) > C1_CONTAINMENT
                        and inside_fraction(artery, tri) > C1_CONTAINMENT):
                    c1 = True

    c2 = any(all(box_iou(tri, tool) <= C2_TOOL_IOU for tool in by_class[TOOL])
             for tri in by_class[CALOT_TRIANGLE])

    c3 = any(box_area(p) >= C3_AREA_FRACTION * image_w * image_h
             for p in by_class[CYSTIC_PLATE])

    return int(c1), int(c2), int(c3)


# ---------------------------------------------------------------------------
# Layout construction
# ---------------------------------------------------------------------------


@dataclass
class _Slot:
    class_id: int
    present: bool
    box: np.ndarray  # mutable (4,)


def _rand_box(rng, class_id, w, h) -> np.ndarray:
    lo, hi = SIZE_RANGES[class_id]
    base = min(w, h)
    bw = rng.uniform(lo, hi) * base
    bh = rng.uniform(lo, hi) * base
    if class_id == TOOL:
        bw, bh = 0.35 * bw, 1.2 * bh  # elongated
    x1 = rng.uniform(0, max(w - bw, 1.0))
    y1 = rng.uniform(0, max(h - bh, 1.0))
    return np.array([x1, y1, min(x1 + bw, w - 1), min(y1 + bh, h - 1)])


def _clamp_box(box: np.ndarray, w: int, h: int) -> None:
    bw = min(box[2] - box[0], w - 2.0)
    bh = min(box[3] - box[1], h - 2.0)
    box[0] = min(max(box[0], 0.0), w - 1.0 - bw)
    box[1] = min(max(box[1], 0.0), h - 1.0 - bh)
    box[2] = box[0] + bw
    box[3] = box[1] + bh


def _walk(slot: _Slot, rng, w, h) -> None:
    step = 0.02 * min(w, h)
    delta = rng.normal(0.0, step, size=2)
    grow = np.exp(rng.normal(0.0, 0.02, size=2))
    cx, cy = (slot.box[0] + slot.box[2]) / 2 + delta[0], (slot.box[1] + slot.box[3]) / 2 + delta[1]
    bw = (slot.box[2] - slot.box[0]) * grow[0]
    bh = (slot.box[3] - slot.box[1]) * grow[1]
    slot.box = np.array([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2])
    _clamp_box(slot.box, w, h)


def _markov_presence(slot: _Slot, prior: float, rng) -> None:
    u = rng.uniform()
    if slot.present:
        if u < 0.1 * (1.0 - prior):
            slot.present = False
    else:
        if u < 0.1 * prior:
            slot.present = True


def _place_away_from(rng, slot: _Slot, anchor, w, h, max_frac: float) -> None:
    """Re-place slot.box until its inside-fraction w.r.t. anchor is small."""
    for _ in range(20):
        if inside_fraction(slot.box, anchor) <= max_frac:
            return
        slot.box = _rand_box(rng, slot.class_id, w, h)
    # deterministic fallback: shrink and pin to the farthest corner
    bw = min(slot.box[2] - slot.box[0], 0.12 * w)
    bh = min(slot.box[3] - slot.box[1], 0.12 * h)
    ax = (anchor[0] + anchor[2]) / 2
    ay = (anchor[1] + anchor[3]) / 2
    x1 = 1.0 if ax > w / 2 else w - 1.0 - bw
    y1 = 1.0 if ay > h / 2 else h - 1.0 - bh
    slot.box = np.array([x1, y1, x1 + bw, y1 + bh])


def _apply_plan(slots: dict, tools: list, bits, cfg: DomainConfig, rng,
                w: int, h: int) -> None:
    c1, c2, c3 = bits
    tri = slots[CALOT_TRIANGLE]
    duct = slots[CYSTIC_DUCT]
    artery = slots[CYSTIC_ARTERY]
    plate = slots[CYSTIC_PLATE]

    if c1 or c2:
        tri.present = True

    if c3:
        plate.present = True
        area = rng.uniform(0.022, 0.05) * w * h
    elif plate.present:
        area = rng.uniform(0.004, 0.010) * w * h
    else:
        area = None
    if plate.present and area is not None:
        aspect = rng.uniform(0.6, 1.6)
        bw = float(np.sqrt(area * aspect))
        bh = area / bw
        cx = (plate.box[0] + plate.box[2]) / 2
        cy = (plate.box[1] + plate.box[3]) / 2
        plate.box = np.array([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2])
        _clamp_box(plate.box, w, h)

    if c1:
        duct.present = True
        artery.present = True
        tx1, ty1, tx2, ty2 = tri.box
        tw, th = tx2 - tx1, ty2 - ty1
        split = 0.5 + rng.uniform(-0.05, 0.05)
        gap = 0.05 * tw
        top = ty1 + rng.uniform(0.05, 0.15) * th
        bot = ty2 - rng.uniform(0.05, 0.15) * th
        duct.box = np.array([tx1 + 0.05 * tw, top, tx1 + split * tw - gap / 2, bot])
        artery.box = np.array([tx1 + split * tw + gap / 2, top, tx2 - 0.05 * tw, bot])
    elif tri.present:
        # defeat C1 by keeping whichever of duct/artery is present mostly
        # outside the triangle
        for s in (duct, artery):
            if s.present:
                _place_away_from(rng, s, tri.box, w, h, 0.3)

    if c2:
        tri_box = tri.box
        for t in tools:
            if t.present:
                for _ in range(20):
                    if box_iou(t.box, tri_box) <= 0.5 * C2_TOOL_IOU:
                        break
                    t.box = _rand_box(rng, TOOL, w, h)
                else:
                    _place_away_from(rng, t, tri_box, w, h, 0.0)
    elif tri.present:
        # force a violating tool: same-size box shifted by a quarter width
        # has IoU 0.6 with the triangle
        t = tools[0]
        t.present = True
        tx1, ty1, tx2, ty2 = tri.box
        dx = 0.25 * (tx2 - tx1)
        t.box = np.array([tx1 + dx, ty1, tx2 + dx, ty2])
        _clamp_box(t.box, w, h)


def generate_video(cfg: DomainConfig, video_id: int, n_frames: int,
                   seed: int) -> list[Scene]:
    """One video: boxes random-walk between frames; criterion bits follow a
    late-achievement plan whose per-video quota drives the configured rates.

    Deterministic in (cfg, video_id, seed); parallel generation across
    videos is bit-identical to serial generation.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    for r in cfg.target_rates:
        if not (0.0 < r < 1.0):
            raise ValueError(f"infeasible target rate {r}: must be in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(video_id)]))
    w, h = cfg.image_size

    # per-video rates jitter symmetrically around the configured targets
    rates = np.array(cfg.target_rates) * (1.0 + 0.6 * rng.uniform(-1.0, 1.0, size=3))
    quotas = np.floor(rates * n_frames + rng.uniform(size=3)).astype(int)
    quotas = np.minimum(quotas, n_frames)

    slots = {c: _Slot(c, bool(rng.uniform() < cfg.presence_priors[c]),
                      _rand_box(rng, c, w, h))
             for c in (CYSTIC_PLATE, CALOT_TRIANGLE, CYSTIC_ARTERY,
                       CYSTIC_DUCT, GALLBLADDER)}
    tools = [_Slot(TOOL, bool(rng.uniform() < cfg.presence_priors[TOOL]),
                   _rand_box(rng, TOOL, w, h))
             for _ in range(N_TOOL_SLOTS)]
    colors = {id(s): _jitter_color(rng, PALETTE[s.class_id])
              for s in list(slots.values()) + tools}

    scenes = []
    for i in range(n_frames):
        bits = tuple(int(i >= n_frames - q) for q in quotas)
        for s in slots.values():
            _markov_presence(s, cfg.presence_priors[s.class_id], rng)
            _walk(s, rng, w, h)
        for t in tools:
            _markov_presence(t, cfg.presence_priors[TOOL], rng)
            _walk(t, rng, w, h)
        _apply_plan(slots, tools, bits, cfg, rng, w, h)

        objects = [SceneObject(s.class_id, tuple(float(v) for v in s.box),
                               colors[id(s)], cfg.texture_amplitude)
                   for s in list(slots.values()) + tools if s.present]
        label = label_scene(objects, w, h)
        if label != bits:
            raise AssertionError(
                f"layout construction failed to realize plan {bits}, got {label}")
        image = render(objects, cfg, rng)
        scenes.append(Scene(image, objects, label, int(video_id), i,
                            cfg.name, (w, h)))
    return scenes


def _jitter_color(rng, base) -> tuple[float, float, float]:
    c = np.clip(np.asarray(base) + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
    return tuple(float(v) for v in c)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_ELLIPSE_CLASSES = {CYSTIC_PLATE, GALLBLADDER}


def render(objects: Sequence[SceneObject], cfg: DomainConfig,
           rng: np.random.Generator) -> np.ndarray:
    """Rasterize a layout with the domain's appearance.

    Flat fills plus texture noise keep the zero-noise case piecewise
    constant; hue shift and the field-of-view vignette are appearance-only
    and never move a box.
    """
    w, h = cfg.image_size
    img = np.empty((3, h, w), dtype=np.float64)
    img[:] = np.asarray(cfg.background_color)[:, None, None]
    img += rng.normal(0.0, np.sqrt(cfg.background_var), size=(3, h, w))

    ys, xs = np.mgrid[0:h, 0:w]
    order = sorted([o for o in objects if o.present],
                   key=lambda o: -box_area(o.box))
    for o in order:
        x1, y1, x2, y2 = o.box
        if o.class_id in _ELLIPSE_CLASSES:
            cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
            rx, ry = max((x2 - x1) / 2, 0.5), max((y2 - y1) / 2, 0.5)
            mask = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        else:
            mask = (xs >= x1) & (xs <= x2) & (ys >= y1) & (ys <= y2)
        n = int(mask.sum())
        if n == 0:
            continue
        fill = np.asarray(o.color)[:, None] + rng.normal(0.0, o.texture, size=(3, n))
        img[:, mask] = fill

    if cfg.hue_shift:
        f = cfg.hue_shift
        img = (1.0 - f) * img + f * img[[1, 2, 0]]

    cx, cy = (w - 1) / 2, (h - 1) / 2
    radial = ((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2
    img[:, radial > cfg.fov_crop_fraction ** 2] *= 0.25

    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Video-stratified splits
# ---------------------------------------------------------------------------


def video_rates(scenes: Sequence[Scene]) -> dict[int, tuple[float, float, float]]:
    """Per-video frame-level achievement rate of each criterion."""
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for s in scenes:
        sums.setdefault(s.video_id, np.zeros(3))
        sums[s.video_id] += np.asarray(s.label, dtype=float)
        counts[s.video_id] = counts.get(s.video_id, 0) + 1
    return {v: tuple(sums[v] / counts[v]) for v in sums}


def split_deviation(assignment: Sequence[Sequence[int]],
                    rates: dict[int, tuple]) -> float:
    """Max over splits and criteria of |split mean rate - global mean rate|."""
    global_mean = np.mean([rates[v] for v in rates], axis=0)
    worst = 0.0
    for ids in assignment:
        if not ids:
            return float("inf")
        mean = np.mean([rates[v] for v in ids], axis=0)
        worst = max(worst, float(np.max(np.abs(mean - global_mean))))
    return worst


def stratified_split(rates: dict[int, tuple], fractions: Sequence[float],
                     seed: int, tolerance: float = 0.05
                     ) -> tuple[list[int], list[int], list[int]]:
    """Video-disjoint split whose per-criterion video-level achievement
    stays within `tolerance` of the global rate (when feasible).

    Greedy balanced assignment over a seeded ordering, then pairwise-swap
    repair.
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise ValueError("fractions must be three values summing to 1")
    ids = sorted(rates)
    n = len(ids)
    if n < 3:
        raise ValueError("too few videos for stratification")

    counts = [int(np.floor(f * n)) for f in fractions]
    remainders = [f * n - c for f, c in zip(fractions, counts)]
    for _ in range(n - sum(counts)):
        k = int(np.argmax(remainders))
        counts[k] += 1
        remainders[k] = -1.0
    if min(counts) < 1:
        raise ValueError("too few videos for stratification")

    rng = np.random.default_rng(seed)
    order = [int(v) for v in rng.permutation(ids)]
    order.sort(key=lambda v: -sum(rates[v]))  # stable: shuffled among ties

    # proportional deal over the sorted order: each split draws evenly from
    # every band of the achievement spectrum
    splits: list[list[int]] = [[], [], []]
    for i, v in enumerate(order):
        deficits = [counts[k] * (i + 1) / n - len(splits[k]) for k in range(3)]
        feasible = [k for k in range(3) if len(splits[k]) < counts[k]]
        best = max(feasible, key=lambda k: deficits[k])
        splits[best].append(v)

    # steepest-descent pairwise swap repair
    dev = split_deviation(splits, rates)
    for _ in range(300):
        if dev <= tolerance:
            break
        best_swap, best_dev = None, dev
        for a in range(3):
            for b in range(a + 1, 3):
                for i, va in enumerate(splits[a]):
                    for j, vb in enumerate(splits[b]):
                        splits[a][i], splits[b][j] = vb, va
                        new_dev = split_deviation(splits, rates)
                        splits[a][i], splits[b][j] = va, vb
                        if new_dev < best_dev - 1e-12:
                            best_swap, best_dev = (a, i, b, j), new_dev
        if best_swap is None:
            break
        a, i, b, j = best_swap
        splits[a][i], splits[b][j] = splits[b][j], splits[a][i]
        dev = best_dev

    return tuple(sorted(int(v) for v in s) for s in splits)


# ---------------------------------------------------------------------------
# On-disk dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    scenes: list[Scene]
    domain: DomainConfig
    split: dict[str, list[int]]
    data_seed: int

    def split_scenes(self, name: str) -> list[Scene]:
        ids = set(self.split[name])
        return [s for s in self.scenes if s.video_id in ids]


def generate_domain(cfg: DomainConfig, n_videos: int, frames_per_video: int,
                    seed: int) -> list[Scene]:
    scenes: list[Scene] = []
    for vid in range(n_videos):
        scenes.extend(generate_video(cfg, vid, frames_per_video, seed))
    return scenes


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    """Directory layout: manifest.json plus one raw little-endian float64
    blob per video (row-major (3, H, W) frames, concatenated)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    by_video: dict[int, list[Scene]] = {}
    for s in dataset.scenes:
        by_video.setdefault(s.video_id, []).append(s)

    videos = []
    for vid in sorted(by_video):
        frames = sorted(by_video[vid], key=lambda s: s.frame_index)
        blob_name = f"video_{vid:04d}.f64"
        blob = np.stack([f.image for f in frames]).astype("<f8").tobytes()
        (path / blob_name).write_bytes(blob)
        videos.append({
            "video_id": vid,
            "n_frames": len(frames),
            "blob": blob_name,
            "sha256": hashlib.sha256(blob).hexdigest(),
            "frames": [{
                "frame_index": f.frame_index,
                "label": list(f.label),
                "objects": [{
                    "class_id": o.class_id,
                    "box": list(o.box),
                    "color": list(o.color),
                    "texture": o.texture,
                } for o in f.objects],
            } for f in frames],
        })

    manifest = {
        "format_version": 1,
        "domain": dataset.domain.to_dict(),
        "data_seed": dataset.data_seed,
        "image_shape": [3, dataset.domain.image_size[1], dataset.domain.image_size[0]],
        "n_frames_total": sum(v["n_frames"] for v in videos),
        "split": {k: sorted(v) for k, v in dataset.split.items()},
        "videos": videos,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"corrupt manifest: {e}") from e
    try:
        domain = DomainConfig.from_dict(manifest["domain"])
        shape = tuple(manifest["image_shape"])
        scenes = []
        for v in manifest["videos"]:
            blob = (path / v["blob"]).read_bytes()
            digest = hashlib.sha256(blob).hexdigest()
            if digest != v["sha256"]:
                raise DatasetError(f"checksum mismatch for {v['blob']}")
            expected = v["n_frames"] * int(np.prod(shape)) * 8
            if len(blob) != expected:
                raise DatasetError(f"blob {v['blob']} has {len(blob)} bytes, "
                                   f"expected {expected}")
            frames = np.frombuffer(blob, dtype="<f8").reshape((v["n_frames"],) + shape)
            for rec in v["frames"]:
                objects = [SceneObject(o["class_id"], tuple(o["box"]),
                                       tuple(o["color"]), o["texture"])
                           for o in rec["objects"]]
                scenes.append(Scene(
                    np.ascontiguousarray(frames[rec["frame_index"]]),
                    objects, tuple(rec["label"]), v["video_id"],
                    rec["frame_index"], domain.name, domain.image_size))
        split = {k: list(v) for k, v in manifest["split"].items()}
        return Dataset(scenes, domain, split, manifest["data_seed"])
    except DatasetError:
        raise
    except (KeyError, ValueError, OSError) as e:
        raise DatasetError(f"corrupt manifest: {e}") from e
