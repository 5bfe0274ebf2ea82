import numpy as np
import pytest

from lgdg import autodiff as ad
from lgdg.autodiff import Tape, backward, grad_check
from lgdg.config import ModelConfig
from lgdg.detector import Detection, _Adam
from lgdg.graph import encode, mask
from lgdg.losses import ClassBalance, balanced_bce, reconstruction_loss
from lgdg.models import (
    Backbone,
    BaselineClassifier,
    Conv2d,
    ConvTranspose2d,
    LgModel,
    load_params,
    rasterize_detections,
    save_params,
)

from tests.conftest import build_graph, exact_detections


def det(box, cls=0, probs=None):
    if probs is None:
        probs = [0.0] * 6
        probs[cls] = 1.0
    return Detection(tuple(float(v) for v in box), tuple(probs), max(probs))


def naive_conv(x, w, b, k, stride, pad):
    """Direct-summation convolution oracle."""
    c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out_ch = w.shape[1]
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((out_ch, oh, ow))
    for oc in range(out_ch):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[oc, i, j] = (patch.reshape(-1) * w[:, oc]).sum() + b[0, oc]
    return out


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(0)
    for stride in (1, 2):
        conv = Conv2d(2, 3, 3, stride, rng)
        x = rng.normal(size=(2, 6, 6))
        got = conv(ad.constant(x)).data
        want = naive_conv(x, conv.w.data, conv.b.data, 3, stride, 1)
        assert np.allclose(got, want, atol=1e-12), stride


def test_conv_transpose_shapes():
    rng = np.random.default_rng(0)
    t = ConvTranspose2d(3, 2, 3, 2, rng)
    out = t(ad.constant(rng.normal(size=(3, 4, 4))))
    assert out.shape == (2, 8, 8)


def test_backbone_output_dims():
    rng = np.random.default_rng(0)
    bb = Backbone(3, 64, 16, rng)
    out = bb.forward(ad.constant(rng.uniform(size=(3, 64, 64))))
    assert out.shape == (16, 8, 8)
    tiny = Backbone(3, 16, 4, rng)
    assert tiny.forward(ad.constant(rng.uniform(size=(3, 16, 16)))).shape == (4, 2, 2)


def test_backbone_rejects_bad_input_side():
    with pytest.raises(ValueError):
        Backbone(3, 36, 8, np.random.default_rng(0))


def test_classify_empty_graph_is_finite_and_deterministic(toy_model_cfg):
    model = LgModel(toy_model_cfg, np.random.default_rng(1))
    img = ad.constant(np.random.default_rng(0).uniform(size=(3, 16, 16)))
    g = encode(img, [], model.backbone)
    l1 = model.classify(g).data
    l2 = model.classify(g).data
    assert np.all(np.isfinite(l1))
    assert np.array_equal(l1, l2)
    assert l1.shape == (1, 3)


def test_classify_permutation_invariance(toy_model_cfg):
    model = LgModel(toy_model_cfg, np.random.default_rng(1))
    img = ad.constant(np.random.default_rng(2).uniform(size=(3, 16, 16)))
    dets = [det((1, 1, 6, 6), 0), det((8, 2, 14, 8), 1),
            det((3, 9, 10, 15), 2), det((9, 9, 15, 15), 5)]
    base = model.classify(encode(img, dets, model.backbone)).data
    rng = np.random.default_rng(3)
    for _ in range(4):
        perm = rng.permutation(len(dets))
        permuted = model.classify(encode(img, [dets[p] for p in perm],
                                         model.backbone)).data
        assert np.allclose(base, permuted, atol=1e-9)


def test_head_gradients_pass_grad_check(toy_model_cfg, sample_scene):
    model = LgModel(toy_model_cfg, np.random.default_rng(4))
    g, img, dets = build_graph(model, sample_scene)
    y = np.array(sample_scene.label)
    bal = ClassBalance((0.3, 0.3, 0.3))

    def loss_fn(_):
        gg, _, _ = build_graph(model, sample_scene, dets)
        return balanced_bce(model.head.forward(gg), y, bal)

    params = model.head.parameters()
    for name in ("out.w", "in_proj.w", "msg0.fc1.w", "upd1.fc2.b", "empty_embedding"):
        err = grad_check(loss_fn, params[name], eps=1e-5)
        assert err < 1e-5, (name, err)


def test_feature_layout_empty_graph(toy_model_cfg):
    model = LgModel(toy_model_cfg, np.random.default_rng(1))
    img = ad.constant(np.random.default_rng(0).uniform(size=(3, 16, 16)))
    g = encode(img, [], model.backbone)
    layout = model.recon.build_feature_layout(g)
    assert layout.shape == (3, 4, 4)
    assert np.all(layout.data == 0.0)


def test_feature_layout_full_cover_constant(toy_model_cfg):
    model = LgModel(toy_model_cfg, np.random.default_rng(1))
    img = ad.constant(np.random.default_rng(0).uniform(size=(3, 16, 16)))
    g = encode(img, [det((0, 0, 15, 15))], model.backbone)
    layout = model.recon.build_feature_layout(g).data
    feats = np.concatenate([g.node_visual.data[0], g.node_semantic.data[0]])
    expected = feats @ model.recon.proj.data
    for c in range(layout.shape[0]):
        assert np.allclose(layout[c], expected[c], atol=1e-12)


def test_feature_layout_overlaps_sum(toy_model_cfg):
    model = LgModel(toy_model_cfg, np.random.default_rng(1))
    img = ad.constant(np.zeros((3, 16, 16)))
    # grid is 4x4 over a 16x16 frame: left box covers columns 0-1,
    # right box covers columns 1-2; column 1 overlaps
    d1, d2 = det((0, 0, 8, 15)), det((4, 0, 12, 15), cls=1)
    g = encode(img, [d1, d2], model.backbone)
    layout = model.recon.build_feature_layout(g).data
    feats = np.stack([np.concatenate([g.node_visual.data[i], g.node_semantic.data[i]])
                      for i in range(2)])
    proj = feats @ model.recon.proj.data
    assert np.allclose(layout[:, 0, 0], proj[0], atol=1e-12)
    assert np.allclose(layout[:, 0, 2], proj[1], atol=1e-12)
    assert np.allclose(layout[:, 0, 1], proj[0] + proj[1], atol=1e-12)
    assert np.allclose(layout[:, 0, 3], 0.0)


def test_include_backbone_toggles_decoder_channels(toy_model_cfg):
    rng = np.random.default_rng(0)
    from lgdg.models import ReconBranch
    with_bb = ReconBranch(14, 4, 3, 4, 16, 4, rng, include_backbone=True)
    without = ReconBranch(14, 4, 3, 4, 16, 4, np.random.default_rng(0),
                          include_backbone=False)
    assert with_bb.dec1.conv.in_ch - without.dec1.conv.in_ch == 4


def test_masked_semantic_changes_reconstruction(toy_model_cfg, sample_scene):
    model = LgModel(toy_model_cfg, np.random.default_rng(5))
    g, img, dets = build_graph(model, sample_scene)
    assert g.n_nodes > 0
    bg = ad.constant(np.zeros((3, 16, 16)))
    plain = model.recon.forward(g, bg).data
    noised = model.recon.forward(mask(g, ("graph-semantic",),
                                      np.random.default_rng(9)), bg).data
    assert plain.shape == (3, 16, 16)
    assert not np.allclose(plain, noised)


@pytest.mark.slow
def test_reconstruction_overfits_single_image(toy_model_cfg, sample_scene):
    model = LgModel(toy_model_cfg, np.random.default_rng(6))
    g, img, dets = build_graph(model, sample_scene)
    bg = ad.constant(np.zeros((3, 16, 16)))
    params = model.parameters()
    opt = _Adam(params, lr=3e-3)
    losses = []
    for _ in range(500):
        with Tape():
            gg, _, _ = build_graph(model, sample_scene, dets)
            loss = reconstruction_loss(model.recon.forward(gg, bg), img)
            backward(loss)
        losses.append(loss.item())
        opt.step()
        ad.zero_grads(params.values())
    assert losses[-1] < 0.01, losses[-1]


def test_layout_baseline_ignores_appearance(toy_model_cfg, sample_scene):
    clf = BaselineClassifier("layout", toy_model_cfg, np.random.default_rng(0))
    dets = exact_detections(sample_scene)
    img1 = ad.constant(np.random.default_rng(1).uniform(size=(3, 16, 16)))
    img2 = ad.constant(np.random.default_rng(2).uniform(size=(3, 16, 16)))
    l1 = clf.logits(img1, dets, sample_scene.image_size).data
    l2 = clf.logits(img2, dets, sample_scene.image_size).data
    assert np.array_equal(l1, l2)


def test_layout_plus_image_reads_appearance(toy_model_cfg, sample_scene):
    clf = BaselineClassifier("layout+image", toy_model_cfg, np.random.default_rng(0))
    dets = exact_detections(sample_scene)
    img1 = ad.constant(np.random.default_rng(1).uniform(size=(3, 16, 16)))
    img2 = ad.constant(np.random.default_rng(2).uniform(size=(3, 16, 16)))
    l1 = clf.logits(img1, dets, sample_scene.image_size).data
    l2 = clf.logits(img2, dets, sample_scene.image_size).data
    assert np.abs(l1 - l2).max() > 0


def test_image_baseline_never_reads_detections(toy_model_cfg, sample_scene):
    clf = BaselineClassifier("image", toy_model_cfg, np.random.default_rng(0))
    img = ad.constant(np.random.default_rng(1).uniform(size=(3, 16, 16)))
    dets = exact_detections(sample_scene)
    assert np.array_equal(
        clf.logits(img, dets, sample_scene.image_size).data,
        clf.logits(img, [], sample_scene.image_size).data)


def test_det_init_copies_encoder_bit_exact(toy_model_cfg):
    from lgdg.detector import GridDetector
    gd = GridDetector(toy_model_cfg, np.random.default_rng(3))
    clf = BaselineClassifier("det-init", toy_model_cfg, np.random.default_rng(4),
                             detector_encoder=gd.encoder)
    for name, p in gd.encoder.parameters().items():
        assert np.array_equal(clf.net.encoder.parameters()[name].data, p.data)


def test_det_init_requires_detector(toy_model_cfg):
    with pytest.raises(ValueError):
        BaselineClassifier("det-init", toy_model_cfg, np.random.default_rng(0))


def test_rasterization_never_reads_pixels():
    dets = [det((0, 0, 16, 16), cls=2), det((8, 8, 30, 30), cls=5)]
    r = rasterize_detections(dets, (32, 32), 8)
    assert r.shape == (6, 8, 8)
    assert r[2, 0, 0] == 1.0
    assert r[5, 0, 0] == 0.0
    # overlap cell sums both
    assert r[2, 3, 3] == 1.0 and r[5, 3, 3] == 1.0


def test_baseline_gradients(toy_model_cfg, sample_scene):
    for variant in ("layout", "layout+image", "image"):
        clf = BaselineClassifier(variant, toy_model_cfg, np.random.default_rng(0))
        dets = exact_detections(sample_scene)
        img = ad.constant(np.random.default_rng(1).uniform(size=(3, 16, 16)))
        y = np.array([1, 0, 1])
        bal = ClassBalance.uniform()

        def loss_fn(_):
            return balanced_bce(clf.logits(img, dets, sample_scene.image_size), y, bal)

        p = clf.parameters()
        for name in ("encoder.conv1.w", "fc2.w", "fc1.b"):
            err = grad_check(loss_fn, p[name], eps=1e-5)
            assert err < 1e-5, (variant, name, err)


def test_param_checkpoint_round_trip(tmp_path, toy_model_cfg):
    model = LgModel(toy_model_cfg, np.random.default_rng(0))
    params = model.parameters()
    original = {k: v.data.copy() for k, v in params.items()}
    save_params(tmp_path / "m.lgc", params, {"variant": "lg"})
    for p in params.values():
        p.data[...] = 0.0
    header = load_params(tmp_path / "m.lgc", params)
    assert header["variant"] == "lg"
    for k, v in params.items():
        assert np.array_equal(v.data, original[k])
