"""Latent-graph assembly and the feature-category masking function.

A latent graph holds three categories of content:
  graph-visual:   per-node and per-edge feature vectors pooled from the
                  backbone map over (union) box regions;
  graph-semantic: detection-derived, appearance-free content -- normalized
                  box coordinates + class probabilities on nodes, the five
                  pairwise geometric features on edges;
  backbone-image: the whole-image backbone feature map.

mask() returns a fresh graph in which the requested categories are replaced
by i.i.d. unit Gaussian noise drawn from the supplied generator; everything
else is shared bit-identically with the input. Resampling noise at every
call is what lets masking double as a training-time augmentation.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .containerio import read_container, write_container
from .scenes import box_iou

SEMANTIC_DIM = 10  # 4 normalized coords + 6 class probabilities
GEOMETRIC_EDGE_DIM = 5


class FeatureCategory(enum.Enum):
    GRAPH_VISUAL = "graph-visual"
    GRAPH_SEMANTIC = "graph-semantic"
    BACKBONE_IMAGE = "backbone-image"


def parse_categories(names: Iterable[str | FeatureCategory]) -> frozenset[FeatureCategory]:
    out = set()
    for n in names:
        out.add(n if isinstance(n, FeatureCategory) else FeatureCategory(n))
    return frozenset(out)


@dataclass
class LatentGraph:
    """Nodes/edges over detections plus the backbone feature map.

    Tensors are None when the graph has no nodes (or no edges); the
    backbone map is always present.
    """

    n_nodes: int
    edges: tuple[tuple[int, int], ...]
    node_visual: Tensor | None      # (n, d_v)
    node_semantic: Tensor | None    # (n, 10)
    edge_visual: Tensor | None      # (E, d_v)
    edge_geometric: Tensor | None   # (E, 5)
    backbone_map: Tensor            # (C_b, h, w)
    image_size: tuple[int, int]     # native (W, H) the boxes live in

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def geometric_edge_features(box_a, box_b, image_dims) -> np.ndarray:
    """(dcx/W, dcy/H, log(wA/wB), log(hA/hB), IoU) for an ordered box pair."""
    w, h = image_dims
    wa, ha = box_a[2] - box_a[0], box_a[3] - box_a[1]
    wb, hb = box_b[2] - box_b[0], box_b[3] - box_b[1]
    if wa <= 0 or ha <= 0 or wb <= 0 or hb <= 0:
        raise ValueError("degenerate zero-area box")
    dcx = ((box_b[0] + box_b[2]) - (box_a[0] + box_a[2])) / 2.0 / w
    dcy = ((box_b[1] + box_b[3]) - (box_a[1] + box_a[3])) / 2.0 / h
    return np.array([dcx, dcy, np.log(wa / wb), np.log(ha / hb),
                     box_iou(box_a, box_b)])


def knn_edges(boxes: Sequence, k: int) -> tuple[tuple[int, int], ...]:
    """Symmetrized directed pairs: each node connects to its k nearest
    neighbors by center distance (ties broken by index)."""
    n = len(boxes)
    if n < 2:
        return ()
    centers = np.array([[(b[0] + b[2]) / 2, (b[1] + b[3]) / 2] for b in boxes])
    pairs = set()
    kk = min(k, n - 1)
    for i in range(n):
        d = np.hypot(*(centers - centers[i]).T)
        order = sorted((float(d[j]), j) for j in range(n) if j != i)
        for _, j in order[:kk]:
            pairs.add((i, j))
            pairs.add((j, i))
    return tuple(sorted(pairs))


@dataclass(frozen=True)
class GraphGeometry:
    """Image-free part of a graph, precomputable once per frame: semantic
    features, edge structure, and pooling matrices over the backbone grid."""

    n_nodes: int
    edges: tuple[tuple[int, int], ...]
    node_semantic: np.ndarray | None   # (n, 10)
    edge_geometric: np.ndarray | None  # (E, 5)
    node_pool: np.ndarray | None       # (n, h*w) row-normalized indicators
    edge_pool: np.ndarray | None       # (E, h*w)
    image_size: tuple[int, int]


def _box_to_cells(box, image_size, grid_hw) -> tuple[int, int, int, int]:
    w, h = image_size
    gh, gw = grid_hw
    gx1 = int(np.clip(np.floor(box[0] / w * gw), 0, gw - 1))
    gy1 = int(np.clip(np.floor(box[1] / h * gh), 0, gh - 1))
    gx2 = int(np.clip(np.ceil(box[2] / w * gw), gx1 + 1, gw))
    gy2 = int(np.clip(np.ceil(box[3] / h * gh), gy1 + 1, gh))
    return gy1, gy2, gx1, gx2


def _pool_row(box, image_size, grid_hw) -> np.ndarray:
    gh, gw = grid_hw
    gy1, gy2, gx1, gx2 = _box_to_cells(box, image_size, grid_hw)
    row = np.zeros((gh, gw))
    row[gy1:gy2, gx1:gx2] = 1.0
    return row.reshape(-1) / row.sum()


def prepare_geometry(detections: Sequence, image_size, grid_hw,
                     knn_k: int = 3) -> GraphGeometry:
    """Everything encode() needs that does not depend on the image."""
    n = len(detections)
    w, h = image_size
    if n == 0:
        return GraphGeometry(0, (), None, None, None, None, tuple(image_size))
    boxes = [d.box for d in detections]
    semantic = np.stack([
        np.concatenate(([b[0] / w, b[1] / h, b[2] / w, b[3] / h], d.class_probs))
        for b, d in zip(boxes, detections)])
    edges = knn_edges(boxes, knn_k)
    node_pool = np.stack([_pool_row(b, image_size, grid_hw) for b in boxes])
    if edges:
        geo = np.stack([geometric_edge_features(boxes[i], boxes[j], image_size)
                        for i, j in edges])
        union = [(min(boxes[i][0], boxes[j][0]), min(boxes[i][1], boxes[j][1]),
                  max(boxes[i][2], boxes[j][2]), max(boxes[i][3], boxes[j][3]))
                 for i, j in edges]
        edge_pool = np.stack([_pool_row(b, image_size, grid_hw) for b in union])
    else:
        geo, edge_pool = None, None
    return GraphGeometry(n, edges, semantic, geo, node_pool, edge_pool,
                         tuple(image_size))


def encode_prepared(geom: GraphGeometry, backbone_map: Tensor) -> LatentGraph:
    """Assemble the latent graph from precomputed geometry and a live map."""
    c, gh, gw = backbone_map.shape
    if geom.n_nodes == 0:
        return LatentGraph(0, (), None, None, None, None, backbone_map,
                           geom.image_size)
    map_cells = ad.transpose2d(ad.reshape(backbone_map, (c, gh * gw)))
    node_visual = ad.matmul(ad.constant(geom.node_pool), map_cells)
    node_semantic = ad.constant(geom.node_semantic)
    if geom.edges:
        edge_visual = ad.matmul(ad.constant(geom.edge_pool), map_cells)
        edge_geometric = ad.constant(geom.edge_geometric)
    else:
        edge_visual = edge_geometric = None
    return LatentGraph(geom.n_nodes, geom.edges, node_visual, node_semantic,
                       edge_visual, edge_geometric, backbone_map,
                       geom.image_size)


def encode(image: Tensor, detections: Sequence, backbone, knn_k: int = 3,
           image_size: tuple[int, int] | None = None) -> LatentGraph:
    """Full graph assembly from an image and its detections.

    Node visual features mean-pool the backbone map over each box; edge
    visual features pool over the union box of the pair; semantic parts are
    recomputable from the detections alone. `image_size` is the (W, H) the
    detection boxes live in; it defaults to the image tensor's own dims.
    """
    backbone_map = backbone.forward(image)
    _, gh, gw = backbone_map.shape
    if image_size is None:
        _, h, w = image.shape
        image_size = (w, h)
    geom = prepare_geometry(detections, image_size, (gh, gw), knn_k)
    return encode_prepared(geom, backbone_map)


def mask(g: LatentGraph, categories, rng: np.random.Generator) -> LatentGraph:
    """Fresh graph with the requested categories replaced by N(0, 1) noise.

    Draw order is fixed (node then edge within a category; categories in
    enum order) so a seeded generator reproduces the same masked graph.
    The input graph is never modified; unmasked parts are shared.
    """
    cats = parse_categories(categories)
    out = replace(g)
    if FeatureCategory.GRAPH_VISUAL in cats:
        if out.node_visual is not None:
            out.node_visual = ad.constant(rng.standard_normal(out.node_visual.shape))
        if out.edge_visual is not None:
            out.edge_visual = ad.constant(rng.standard_normal(out.edge_visual.shape))
    if FeatureCategory.GRAPH_SEMANTIC in cats:
        if out.node_semantic is not None:
            out.node_semantic = ad.constant(rng.standard_normal(out.node_semantic.shape))
        if out.edge_geometric is not None:
            out.edge_geometric = ad.constant(rng.standard_normal(out.edge_geometric.shape))
    if FeatureCategory.BACKBONE_IMAGE in cats:
        out.backbone_map = ad.constant(rng.standard_normal(out.backbone_map.shape))
    return out


# -- debugging dump -----------------------------------------------------------


def dump_graph(g: LatentGraph, path: str | Path) -> None:
    header = {
        "kind": "latent-graph",
        "n_nodes": g.n_nodes,
        "edges": [list(e) for e in g.edges],
        "image_size": list(g.image_size),
        "node_semantic": None if g.node_semantic is None else g.node_semantic.data.tolist(),
        "edge_geometric": None if g.edge_geometric is None else g.edge_geometric.data.tolist(),
    }
    arrays = {"backbone_map": g.backbone_map.data}
    if g.node_visual is not None:
        arrays["node_visual"] = g.node_visual.data
    if g.edge_visual is not None:
        arrays["edge_visual"] = g.edge_visual.data
    write_container(path, header, arrays)


def load_graph(path: str | Path) -> LatentGraph:
    header, arrays = read_container(path)
    if header.get("kind") != "latent-graph":
        raise ValueError(f"not a latent-graph dump: {header.get('kind')!r}")
    sem = header["node_semantic"]
    geo = header["edge_geometric"]
    return LatentGraph(
        n_nodes=header["n_nodes"],
        edges=tuple(tuple(e) for e in header["edges"]),
        node_visual=ad.constant(arrays["node_visual"]) if "node_visual" in arrays else None,
        node_semantic=ad.constant(np.asarray(sem)) if sem is not None else None,
        edge_visual=ad.constant(arrays["edge_visual"]) if "edge_visual" in arrays else None,
        edge_geometric=ad.constant(np.asarray(geo)) if geo is not None else None,
        backbone_map=ad.constant(arrays["backbone_map"]),
        image_size=tuple(header["image_size"]),
    )
