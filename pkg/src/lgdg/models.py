"""Trainable heads: shared conv backbone, GNN classification head,
feature-layout reconstruction branch, and the baseline classifiers.

All modules expose parameters() as a flat name -> Tensor dict; construction
order is fixed so a seeded generator reproduces initialization bit-exactly.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .containerio import read_container, write_container
from .graph import LatentGraph

N_DET_CLASSES = 6


def _prefixed(prefix: str, params: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in params.items()}


class Linear:
    def __init__(self, n_in: int, n_out: int, rng, scale: float | None = None,
                 bias: bool = True):
        scale = np.sqrt(2.0 / n_in) if scale is None else scale
        self.w = ad.parameter(rng.normal(0.0, scale, size=(n_in, n_out)))
        self.b = ad.parameter(np.zeros((1, n_out))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if self.b is None:
            return ad.matmul(x, self.w)
        return ad.affine(x, self.w, self.b)

    def parameters(self) -> dict:
        p = {"w": self.w}
        if self.b is not None:
            p["b"] = self.b
        return p


class Mlp:
    """Two-layer perceptron with ReLU in between."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))

    def parameters(self) -> dict:
        return {**_prefixed("fc1", self.fc1.parameters()),
                **_prefixed("fc2", self.fc2.parameters())}


_IM2COL_CACHE: dict[tuple, np.ndarray] = {}


def _im2col_indices(c: int, h: int, w: int, k: int, stride: int, pad: int):
    key = (c, h, w, k, stride, pad)
    idx = _IM2COL_CACHE.get(key)
    if idx is None:
        hp, wp = h + 2 * pad, w + 2 * pad
        oh = (hp - k) // stride + 1
        ow = (wp - k) // stride + 1
        oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        ci, di, dj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k),
                                 indexing="ij")
        # (P, 1) base offsets + (1, C*k*k) within-patch offsets
        base = (oy * stride * wp + ox * stride).reshape(-1, 1)
        inner = (ci * hp * wp + di * wp + dj).reshape(1, -1)
        idx = (base + inner).astype(np.intp)
        _IM2COL_CACHE[key] = idx
    return idx


class Conv2d:
    """k x k convolution over a (C, H, W) map via im2col + matmul."""

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int, rng,
                 pad: int | None = None):
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        scale = np.sqrt(2.0 / (in_ch * k * k))
        self.w = ad.parameter(rng.normal(0.0, scale, size=(in_ch * k * k, out_ch)))
        self.b = ad.parameter(np.zeros((1, out_ch)))

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        if c != self.in_ch:
            raise ad.ShapeError(f"conv expects {self.in_ch} channels, got {c}")
        xp = ad.pad_chw(x, self.pad, self.pad) if self.pad else x
        idx = _im2col_indices(c, h, w, self.k, self.stride, self.pad)
        patches = ad.take(xp, idx)                       # (P, C*k*k)
        out = ad.affine(patches, self.w, self.b)         # (P, out_ch)
        hp, wp = h + 2 * self.pad, w + 2 * self.pad
        oh = (hp - self.k) // self.stride + 1
        ow = (wp - self.k) // self.stride + 1
        return ad.reshape(ad.transpose2d(out), (self.out_ch, oh, ow))

    def parameters(self) -> dict:
        return {"w": self.w, "b": self.b}


class ConvTranspose2d:
    """Stride-s transpose convolution as zero-interleave + same conv."""

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int, rng):
        self.stride = stride
        self.conv = Conv2d(in_ch, out_ch, k, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if self.stride > 1:
            x = ad.zero_interleave_chw(x, self.stride)
        return self.conv(x)

    def parameters(self) -> dict:
        return self.conv.parameters()


class Backbone:
    """Two stride-2 convs + ReLU, then a 2x2 mean pool: (C, s, s) -> map of
    (channels, s/8, s/8)."""

    def __init__(self, in_channels: int, input_hw: int, channels: int, rng):
        if input_hw % 8:
            raise ValueError("backbone input side must be divisible by 8")
        self.in_channels = in_channels
        self.input_hw = input_hw
        self.channels = channels
        self.out_hw = input_hw // 8
        self.conv1 = Conv2d(in_channels, channels, 3, 2, rng)
        self.conv2 = Conv2d(channels, channels, 3, 2, rng)

    def forward(self, image: Tensor) -> Tensor:
        x = ad.relu(self.conv1(image))
        x = ad.relu(self.conv2(x))
        return ad.avg_pool_chw(x, 2)

    def parameters(self) -> dict:
        return {**_prefixed("conv1", self.conv1.parameters()),
                **_prefixed("conv2", self.conv2.parameters())}


class GnnHead:
    """Message-passing classification head over a latent graph.

    Per layer: m_ij = MLP([h_i; h_j; e_ij]), summed into the destination
    node, residual update h_i <- h_i + MLP([h_i; sum_j m_ji]). Mean-pool
    readout, final linear to 3 logits. Empty graphs go through a learned
    embedding so frames with no detections stay trainable.
    """

    def __init__(self, node_dim: int, edge_dim: int, hidden: int,
                 n_layers: int, rng):
        self.node_dim, self.edge_dim, self.hidden = node_dim, edge_dim, hidden
        self.in_proj = Linear(node_dim, hidden, rng)
        self.layers = []
        for _ in range(n_layers):
            msg = Mlp(2 * hidden + edge_dim, hidden, hidden, rng)
            upd = Mlp(2 * hidden, hidden, hidden, rng)
            self.layers.append((msg, upd))
        self.out = Linear(hidden, 3, rng, scale=np.sqrt(1.0 / hidden))
        self.empty_embedding = ad.parameter(rng.normal(0.0, 0.1, size=(1, hidden)))

    def forward(self, g: LatentGraph) -> Tensor:
        if g.n_nodes == 0:
            return self.out(self.empty_embedding)
        n = g.n_nodes
        x = ad.concat([g.node_visual, g.node_semantic], axis=1)
        h = ad.relu(self.in_proj(x))
        if g.n_edges:
            e = ad.concat([g.edge_visual, g.edge_geometric], axis=1)
            src = np.zeros((g.n_edges, n))
            dst = np.zeros((g.n_edges, n))
            for row, (i, j) in enumerate(g.edges):
                src[row, i] = 1.0
                dst[row, j] = 1.0
            s_src, s_dst = ad.constant(src), ad.constant(dst)
            s_dst_t = ad.constant(dst.T)
        for msg, upd in self.layers:
            if g.n_edges:
                m = msg(ad.concat([ad.matmul(s_src, h), ad.matmul(s_dst, h), e], axis=1))
                agg = ad.matmul(s_dst_t, m)
            else:
                agg = ad.constant(np.zeros((n, self.hidden)))
            h = ad.add(h, upd(ad.concat([h, agg], axis=1)))
        readout = ad.matmul(ad.constant(np.full((1, n), 1.0 / n)), h)
        return self.out(readout)

    def forward_many(self, graphs: list[LatentGraph]) -> Tensor:
        """(k, 3) logits for k graphs in one disjoint-union pass.

        Row-independent ops make this numerically equivalent to k separate
        forward() calls; empty graphs contribute their embedding row.
        """
        k = len(graphs)
        live = [(i, g) for i, g in enumerate(graphs) if g.n_nodes > 0]
        emb_select = np.zeros((k, 1))
        for i, g in enumerate(graphs):
            if g.n_nodes == 0:
                emb_select[i, 0] = 1.0
        if not live:
            return self.out(ad.matmul(ad.constant(emb_select), self.empty_embedding))

        offsets = {}
        total = 0
        for i, g in live:
            offsets[i] = total
            total += g.n_nodes
        x = ad.concat([ad.concat([g.node_visual, g.node_semantic], axis=1)
                       for _, g in live], axis=0)
        h = ad.relu(self.in_proj(x))

        edge_rows = []
        edge_feats = []
        for i, g in live:
            off = offsets[i]
            edge_rows.extend((off + a, off + b) for a, b in g.edges)
            if g.n_edges:
                edge_feats.append(ad.concat([g.edge_visual, g.edge_geometric], axis=1))
        n_edges = len(edge_rows)
        if n_edges:
            e = edge_feats[0] if len(edge_feats) == 1 else ad.concat(edge_feats, axis=0)
            src = np.zeros((n_edges, total))
            dst = np.zeros((n_edges, total))
            for row, (a, b) in enumerate(edge_rows):
                src[row, a] = 1.0
                dst[row, b] = 1.0
            s_src, s_dst = ad.constant(src), ad.constant(dst)
            s_dst_t = ad.constant(dst.T)
        for msg, upd in self.layers:
            if n_edges:
                m = msg(ad.concat([ad.matmul(s_src, h), ad.matmul(s_dst, h), e], axis=1))
                agg = ad.matmul(s_dst_t, m)
            else:
                agg = ad.constant(np.zeros((total, self.hidden)))
            h = ad.add(h, upd(ad.concat([h, agg], axis=1)))

        readout_rows = np.zeros((k, total))
        for i, g in live:
            readout_rows[i, offsets[i]:offsets[i] + g.n_nodes] = 1.0 / g.n_nodes
        readout = ad.matmul(ad.constant(readout_rows), h)
        if emb_select.any():
            readout = ad.add(readout, ad.matmul(ad.constant(emb_select),
                                                self.empty_embedding))
        return self.out(readout)

    def parameters(self) -> dict:
        p = _prefixed("in_proj", self.in_proj.parameters())
        for i, (msg, upd) in enumerate(self.layers):
            p.update(_prefixed(f"msg{i}", msg.parameters()))
            p.update(_prefixed(f"upd{i}", upd.parameters()))
        p.update(_prefixed("out", self.out.parameters()))
        p["empty_embedding"] = self.empty_embedding
        return p


def _norm_box_to_cells(nbox: np.ndarray, gh: int, gw: int) -> tuple[int, int, int, int]:
    """Cells covered by a normalized box; total for any input (masked
    semantics may carry arbitrary noise where coordinates used to be)."""
    x1, y1, x2, y2 = np.clip(nbox, 0.0, 1.0)
    x1, x2 = min(x1, x2), max(x1, x2)
    y1, y2 = min(y1, y2), max(y1, y2)
    gx1 = int(np.clip(np.floor(x1 * gw), 0, gw - 1))
    gy1 = int(np.clip(np.floor(y1 * gh), 0, gh - 1))
    gx2 = int(np.clip(np.ceil(x2 * gw), gx1 + 1, gw))
    gy2 = int(np.clip(np.ceil(y2 * gh), gy1 + 1, gh))
    return gy1, gy2, gx1, gx2


class ReconBranch:
    """Feature-layout builder plus two transpose-conv decoder layers.

    Node features are linearly projected to the layout channel count and
    added into every grid cell their (semantic) box covers; overlaps sum.
    The decoder sees [resized backbone map when included; layout; resized
    backgroundized image] as channels.
    """

    def __init__(self, node_dim: int, backbone_channels: int,
                 layout_channels: int, grid_hw: int, out_hw: int,
                 hidden: int, rng, include_backbone: bool = True):
        if out_hw % grid_hw:
            raise ValueError("decoder output side must be a multiple of the grid")
        total = out_hw // grid_hw
        if total not in (1, 2, 4):
            raise ValueError(f"unsupported upsampling factor {total}")
        s1 = 2 if total >= 2 else 1
        s2 = total // s1
        self.grid_hw = grid_hw
        self.out_hw = out_hw
        self.layout_channels = layout_channels
        self.include_backbone = include_backbone
        self.proj = ad.parameter(
            rng.normal(0.0, np.sqrt(1.0 / node_dim), size=(node_dim, layout_channels)))
        in_ch = layout_channels + 3 + (backbone_channels if include_backbone else 0)
        self.dec1 = ConvTranspose2d(in_ch, hidden, 3, s1, rng)
        self.dec2 = ConvTranspose2d(hidden, 3, 3, s2, rng)

    def build_feature_layout(self, g: LatentGraph) -> Tensor:
        gh = gw = self.grid_hw
        if g.n_nodes == 0:
            return ad.constant(np.zeros((self.layout_channels, gh, gw)))
        feats = ad.concat([g.node_visual, g.node_semantic], axis=1)
        proj = ad.matmul(feats, self.proj)          # (n, C_l)
        cells = np.zeros((g.n_nodes, gh * gw))
        for i in range(g.n_nodes):
            gy1, gy2, gx1, gx2 = _norm_box_to_cells(
                g.node_semantic.data[i, :4], gh, gw)
            block = np.zeros((gh, gw))
            block[gy1:gy2, gx1:gx2] = 1.0
            cells[i] = block.reshape(-1)
        flat = ad.matmul(ad.transpose2d(proj), ad.constant(cells))
        return ad.reshape(flat, (self.layout_channels, gh, gw))

    def forward(self, g_r: LatentGraph, backgroundized: Tensor) -> Tensor:
        gh = gw = self.grid_hw
        parts = []
        if self.include_backbone:
            parts.append(ad.resize_bilinear(g_r.backbone_map, gh, gw))
        parts.append(self.build_feature_layout(g_r))
        parts.append(ad.resize_bilinear(backgroundized, gh, gw))
        x = ad.concat(parts, axis=0)
        return self.dec2(ad.relu(self.dec1(x)))

    def parameters(self) -> dict:
        return {"proj": self.proj,
                **_prefixed("dec1", self.dec1.parameters()),
                **_prefixed("dec2", self.dec2.parameters())}


def reconstruct(branch: ReconBranch, g_r: LatentGraph, backgroundized: Tensor) -> Tensor:
    return branch.forward(g_r, backgroundized)


class LgModel:
    """Backbone + GNN head + reconstruction branch for the latent-graph
    classifier family."""

    def __init__(self, model_cfg, rng, include_backbone: bool = True):
        self.cfg = model_cfg
        c = model_cfg.backbone_channels
        self.node_dim = c + 10
        self.edge_dim = c + 5
        self.backbone = Backbone(3, model_cfg.input_hw, c, rng)
        self.head = GnnHead(self.node_dim, self.edge_dim, model_cfg.gnn_hidden,
                            model_cfg.gnn_layers, rng)
        self.recon = ReconBranch(self.node_dim, c, model_cfg.layout_channels,
                                 model_cfg.layout_grid, model_cfg.input_hw,
                                 model_cfg.decoder_hidden, rng,
                                 include_backbone=include_backbone)

    def classify(self, g: LatentGraph) -> Tensor:
        return self.head.forward(g)

    def parameters(self) -> dict:
        return {**_prefixed("backbone", self.backbone.parameters()),
                **_prefixed("head", self.head.parameters()),
                **_prefixed("recon", self.recon.parameters())}


def classify(head: GnnHead, g: LatentGraph) -> Tensor:
    return head.forward(g)


# ---------------------------------------------------------------------------
# Baseline classifiers
# ---------------------------------------------------------------------------

BASELINE_VARIANTS = ("layout", "layout+image", "image", "det-init")


def rasterize_detections(detections, image_size, hw: int) -> np.ndarray:
    """Paint each detection's class-probability vector into its box region
    of a (6, hw, hw) canvas; overlaps sum. Reads no pixel data."""
    canvas = np.zeros((N_DET_CLASSES, hw, hw))
    w, h = image_size
    for d in detections:
        nbox = np.array([d.box[0] / w, d.box[1] / h, d.box[2] / w, d.box[3] / h])
        gy1, gy2, gx1, gx2 = _norm_box_to_cells(nbox, hw, hw)
        canvas[:, gy1:gy2, gx1:gx2] += np.asarray(d.class_probs)[:, None, None]
    return canvas


def backgroundize(image: np.ndarray, boxes, rng: np.random.Generator) -> np.ndarray:
    """Replace the union of (input-scaled) foreground boxes with unit noise."""
    out = image.copy()
    _, h, w = image.shape
    fg = np.zeros((h, w), dtype=bool)
    for b in boxes:
        x1 = int(np.clip(np.floor(b[0]), 0, w - 1))
        y1 = int(np.clip(np.floor(b[1]), 0, h - 1))
        x2 = int(np.clip(np.ceil(b[2]), x1 + 1, w))
        y2 = int(np.clip(np.ceil(b[3]), y1 + 1, h))
        fg[y1:y2, x1:x2] = True
    n = int(fg.sum())
    if n:
        out[:, fg] = rng.standard_normal((3, n))
    return out


class ConvNetClassifier:
    """Conv encoder + MLP head producing 3 logits; the image-only baseline,
    and the body shared by the layout baselines."""

    def __init__(self, in_channels: int, input_hw: int, channels: int,
                 hidden: int, rng):
        self.encoder = Backbone(in_channels, input_hw, channels, rng)
        flat = channels * self.encoder.out_hw ** 2
        self.flat = flat
        self.fc1 = Linear(flat, hidden, rng)
        self.fc2 = Linear(hidden, 3, rng, scale=np.sqrt(1.0 / hidden))

    def logits(self, x: Tensor) -> Tensor:
        m = self.encoder.forward(x)
        v = ad.reshape(m, (1, self.flat))
        return self.fc2(ad.relu(self.fc1(v)))

    def parameters(self) -> dict:
        return {**_prefixed("encoder", self.encoder.parameters()),
                **_prefixed("fc1", self.fc1.parameters()),
                **_prefixed("fc2", self.fc2.parameters())}


_BASELINE_IN_CHANNELS = {"layout": N_DET_CLASSES,
                         "layout+image": N_DET_CLASSES + 3,
                         "image": 3,
                         "det-init": 3}


class BaselineClassifier:
    """The four non-latent-graph designs behind one interface.

    layout: class-probability rasterization only (appearance-free);
    layout+image: rasterization channel-concatenated with the image;
    image: the image alone; det-init: the image-only architecture with its
    encoder initialized from a trained grid detector's encoder.
    """

    def __init__(self, variant: str, model_cfg, rng,
                 detector_encoder: Backbone | None = None):
        if variant not in BASELINE_VARIANTS:
            raise ValueError(f"unknown baseline variant {variant!r}")
        if variant == "det-init" and detector_encoder is None:
            raise ValueError("det-init requires a trained grid detector")
        self.variant = variant
        self.input_hw = model_cfg.input_hw
        self.net = ConvNetClassifier(_BASELINE_IN_CHANNELS[variant],
                                     model_cfg.input_hw,
                                     model_cfg.backbone_channels,
                                     model_cfg.gnn_hidden, rng)
        if variant == "det-init":
            mine = self.net.encoder.parameters()
            for name, p in detector_encoder.parameters().items():
                mine[name].data[...] = p.data

    def logits(self, image: Tensor | None, detections, image_size) -> Tensor:
        hw = self.input_hw
        if self.variant == "image" or self.variant == "det-init":
            x = image
        else:
            raster = ad.constant(rasterize_detections(detections, image_size, hw))
            if self.variant == "layout":
                x = raster
            else:
                x = ad.concat([raster, image], axis=0)
        return self.net.logits(x)

    def parameters(self) -> dict:
        return self.net.parameters()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_params(path, params: dict, header: dict | None = None) -> None:
    meta = {"kind": "model-params"}
    if header:
        meta.update(header)
    write_container(path, meta, {k: v.data for k, v in params.items()})


def load_params(path, params: dict) -> dict:
    header, arrays = read_container(path)
    for name, p in params.items():
        if name not in arrays:
            raise KeyError(f"checkpoint missing parameter {name}")
        if arrays[name].shape != p.data.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        p.data[...] = arrays[name]
    return header
