import numpy as np
import pytest

from lgdg import autodiff as ad
from lgdg.detector import Detection
from lgdg.graph import (
    FeatureCategory,
    dump_graph,
    encode,
    encode_prepared,
    geometric_edge_features,
    knn_edges,
    load_graph,
    mask,
    prepare_geometry,
)
from lgdg.models import Backbone


def det(box, cls=0):
    probs = [0.0] * 6
    probs[cls] = 1.0
    return Detection(tuple(float(v) for v in box), tuple(probs), 1.0)


def test_identical_boxes_edge_features():
    f = geometric_edge_features((2, 3, 10, 12), (2, 3, 10, 12), (64, 64))
    assert np.allclose(f, [0, 0, 0, 0, 1])


def test_disjoint_boxes_have_zero_iou():
    f = geometric_edge_features((0, 0, 4, 4), (10, 10, 20, 20), (64, 64))
    assert f[4] == 0.0


def test_edge_feature_antisymmetry():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = np.sort(rng.uniform(0, 64, 4).reshape(2, 2), axis=0).T.reshape(-1)
        b = np.sort(rng.uniform(0, 64, 4).reshape(2, 2), axis=0).T.reshape(-1)
        boxa = (a[0], a[2], a[1] + 1, a[3] + 1)
        boxb = (b[0], b[2], b[1] + 1, b[3] + 1)
        fab = geometric_edge_features(boxa, boxb, (64, 64))
        fba = geometric_edge_features(boxb, boxa, (64, 64))
        assert np.allclose(fab[:4], -fba[:4], atol=1e-12)
        assert fab[4] == pytest.approx(fba[4], abs=1e-15)


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        geometric_edge_features((0, 0, 0, 4), (1, 1, 2, 2), (64, 64))


def test_known_iou_example():
    f = geometric_edge_features((0, 0, 2, 2), (1, 1, 3, 3), (64, 64))
    assert f[4] == pytest.approx(1.0 / 7.0, abs=1e-15)


def make_backbone(rng_seed=0):
    return Backbone(3, 16, 4, np.random.default_rng(rng_seed))


def test_encode_zero_detections():
    bb = make_backbone()
    img = ad.constant(np.random.default_rng(1).uniform(size=(3, 16, 16)))
    g = encode(img, [], bb)
    assert g.n_nodes == 0 and g.n_edges == 0
    assert g.node_visual is None and g.node_semantic is None
    assert g.backbone_map.shape == (4, 2, 2)


def test_encode_single_detection():
    bb = make_backbone()
    img = ad.constant(np.random.default_rng(1).uniform(size=(3, 16, 16)))
    g = encode(img, [det((2, 2, 10, 10))], bb)
    assert g.n_nodes == 1 and g.n_edges == 0
    assert g.node_visual.shape == (1, 4)
    assert g.node_semantic.shape == (1, 10)


def test_encode_semantic_content():
    bb = make_backbone()
    img = ad.constant(np.zeros((3, 16, 16)))
    g = encode(img, [det((4, 8, 8, 16), cls=2)], bb)
    sem = g.node_semantic.data[0]
    assert np.allclose(sem[:4], [4 / 16, 8 / 16, 8 / 16, 1.0])
    assert sem[4 + 2] == 1.0


def test_semantic_parts_ignore_appearance():
    bb = make_backbone()
    rng = np.random.default_rng(7)
    dets = [det((1, 1, 6, 6)), det((8, 8, 14, 14), cls=3)]
    g1 = encode(ad.constant(rng.uniform(size=(3, 16, 16))), dets, bb)
    g2 = encode(ad.constant(rng.uniform(size=(3, 16, 16))), dets, bb)
    assert np.array_equal(g1.node_semantic.data, g2.node_semantic.data)
    assert np.array_equal(g1.edge_geometric.data, g2.edge_geometric.data)
    assert not np.array_equal(g1.node_visual.data, g2.node_visual.data)


def test_knn_edges_symmetrized_and_bounded():
    boxes = [(0, 0, 2, 2), (10, 0, 12, 2), (0, 10, 2, 12), (10, 10, 12, 12),
             (5, 5, 7, 7)]
    edges = knn_edges(boxes, k=2)
    assert all((j, i) in edges for i, j in edges)
    assert all(i != j for i, j in edges)
    assert len(edges) <= 2 * 2 * len(boxes)


def test_mask_empty_set_is_identity():
    bb = make_backbone()
    img = ad.constant(np.random.default_rng(2).uniform(size=(3, 16, 16)))
    g = encode(img, [det((1, 1, 8, 8)), det((6, 6, 14, 14), cls=1)], bb)
    m = mask(g, (), np.random.default_rng(0))
    assert m.node_visual is g.node_visual
    assert m.node_semantic is g.node_semantic
    assert m.backbone_map is g.backbone_map


def test_mask_is_deterministic_given_seed():
    bb = make_backbone()
    img = ad.constant(np.random.default_rng(2).uniform(size=(3, 16, 16)))
    g = encode(img, [det((1, 1, 8, 8)), det((6, 6, 14, 14), cls=1)], bb)
    cats = ("graph-visual", "graph-semantic", "backbone-image")
    m1 = mask(g, cats, np.random.default_rng(42))
    m2 = mask(g, cats, np.random.default_rng(42))
    assert np.array_equal(m1.node_visual.data, m2.node_visual.data)
    assert np.array_equal(m1.edge_geometric.data, m2.edge_geometric.data)
    assert np.array_equal(m1.backbone_map.data, m2.backbone_map.data)


def test_mask_complement_untouched_and_input_unmodified():
    bb = make_backbone()
    img = ad.constant(np.random.default_rng(2).uniform(size=(3, 16, 16)))
    g = encode(img, [det((1, 1, 8, 8)), det((6, 6, 14, 14), cls=1)], bb)
    before = {k: getattr(g, k).data.copy()
              for k in ("node_visual", "node_semantic", "edge_visual",
                        "edge_geometric", "backbone_map")}
    m = mask(g, ("graph-visual",), np.random.default_rng(1))
    # masked parts replaced, complement shared bit-identically
    assert not np.array_equal(m.node_visual.data, g.node_visual.data)
    assert not np.array_equal(m.edge_visual.data, g.edge_visual.data)
    assert m.node_semantic is g.node_semantic
    assert m.edge_geometric is g.edge_geometric
    assert m.backbone_map is g.backbone_map
    for k, v in before.items():
        assert np.array_equal(getattr(g, k).data, v)


def test_mask_noise_moments():
    rng = np.random.default_rng(11)
    bb = make_backbone()
    img = ad.constant(rng.uniform(size=(3, 16, 16)))
    dets = [det((1, 1, 8, 8)), det((6, 6, 14, 14), cls=1), det((2, 9, 9, 15), cls=4)]
    g = encode(img, dets, bb)
    samples = []
    draw = np.random.default_rng(5)
    while len(samples) < 10_000:
        m = mask(g, ("graph-visual", "graph-semantic", "backbone-image"), draw)
        for part in (m.node_visual, m.node_semantic, m.edge_visual,
                     m.edge_geometric, m.backbone_map):
            samples.extend(part.data.reshape(-1))
    arr = np.asarray(samples[:10_000])
    assert abs(arr.mean()) < 0.05
    assert abs(arr.var() - 1.0) < 0.1


def test_encode_permutation_equivariance():
    bb = make_backbone()
    img = ad.constant(np.random.default_rng(3).uniform(size=(3, 16, 16)))
    dets = [det((1, 1, 6, 6), 0), det((8, 2, 14, 8), 1), det((3, 9, 10, 15), 2)]
    perm = [2, 0, 1]
    g1 = encode(img, dets, bb)
    g2 = encode(img, [dets[p] for p in perm], bb)
    # node p of g2 is node perm[p] of g1
    for new_i, old_i in enumerate(perm):
        assert np.allclose(g2.node_visual.data[new_i], g1.node_visual.data[old_i])
        assert np.allclose(g2.node_semantic.data[new_i], g1.node_semantic.data[old_i])
    inv = {old: new for new, old in enumerate(perm)}
    remapped = sorted((inv[i], inv[j]) for i, j in g1.edges)
    assert remapped == sorted(g2.edges)


def test_graph_dump_round_trip(tmp_path):
    bb = make_backbone()
    img = ad.constant(np.random.default_rng(2).uniform(size=(3, 16, 16)))
    g = encode(img, [det((1, 1, 8, 8)), det((6, 6, 14, 14), cls=1)], bb)
    dump_graph(g, tmp_path / "g.lgc")
    back = load_graph(tmp_path / "g.lgc")
    assert back.n_nodes == g.n_nodes
    assert back.edges == g.edges
    assert np.array_equal(back.node_visual.data, g.node_visual.data)
    assert np.allclose(back.node_semantic.data, g.node_semantic.data)
    assert np.array_equal(back.backbone_map.data, g.backbone_map.data)


def test_encode_prepared_matches_encode(sample_scene, toy_model_cfg):
    from tests.conftest import build_graph, exact_detections
    from lgdg.models import LgModel

    model = LgModel(toy_model_cfg, np.random.default_rng(0))
    g, img, dets = build_graph(model, sample_scene)
    g2 = encode(img, dets, model.backbone, knn_k=toy_model_cfg.knn_edges,
                image_size=sample_scene.image_size)
    if g.n_nodes:
        assert np.allclose(g.node_visual.data, g2.node_visual.data)
        assert np.array_equal(g.node_semantic.data, g2.node_semantic.data)
    assert g.edges == g2.edges
