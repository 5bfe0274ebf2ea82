import numpy as np
import pytest

from lgdg import autodiff as ad
from lgdg.config import ModelConfig
from lgdg.detector import NoiseProfile, simulate_detect
from lgdg.graph import encode_prepared, prepare_geometry
from lgdg.scenes import DomainConfig, generate_video


@pytest.fixture
def toy_model_cfg():
    return ModelConfig(input_hw=16, backbone_channels=4, gnn_hidden=6,
                       gnn_layers=2, layout_channels=3, layout_grid=4,
                       decoder_hidden=4, knn_edges=3)


def small_domain(**overrides) -> DomainConfig:
    base = dict(
        name="toy", aspect_ratio=1.0, image_height=32, fov_crop_fraction=1.3,
        background_color=(0.4, 0.2, 0.2), background_var=0.0005, hue_shift=0.0,
        texture_amplitude=0.02,
        presence_priors=(0.5, 0.7, 0.5, 0.5, 0.7, 0.5),
        target_rates=(0.25, 0.2, 0.3), noise_profile="a")
    base.update(overrides)
    return DomainConfig(**base)


@pytest.fixture
def sample_scene():
    return generate_video(small_domain(), video_id=0, n_frames=8, seed=123)[5]


def exact_detections(scene):
    return simulate_detect(scene, NoiseProfile.exact(), np.random.default_rng(0))


def scene_input_image(scene, input_hw):
    img = scene.image
    if img.shape[1:] != (input_hw, input_hw):
        img = ad.bilinear_resize_array(img, input_hw, input_hw)
    return img


def build_graph(model, scene, detections=None):
    dets = exact_detections(scene) if detections is None else detections
    img = ad.constant(scene_input_image(scene, model.backbone.input_hw))
    fmap = model.backbone.forward(img)
    geom = prepare_geometry(dets, scene.image_size,
                            (model.backbone.out_hw, model.backbone.out_hw),
                            model.cfg.knn_edges)
    return encode_prepared(geom, fmap), img, dets
