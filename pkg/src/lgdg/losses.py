"""Loss functions: inverse-frequency-balanced BCE, the disentanglement
loss over single-category-surviving masked graphs, reconstruction MSE, and
the combined training objective.

BCE is evaluated through the softplus identity
    -[y log s(l) + (1-y) log(1 - s(l))] = softplus(l) - y*l,
which is exactly the sigmoid/log composition but immune to saturation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import LossWeights
from .graph import FeatureCategory, LatentGraph, mask

# which categories get noised so that exactly one survives per branch
MASK_FOR_SEM = (FeatureCategory.GRAPH_VISUAL, FeatureCategory.BACKBONE_IMAGE)
MASK_FOR_VIZ = (FeatureCategory.GRAPH_SEMANTIC, FeatureCategory.BACKBONE_IMAGE)
MASK_FOR_IMG = (FeatureCategory.GRAPH_VISUAL, FeatureCategory.GRAPH_SEMANTIC)


@dataclass(frozen=True)
class ClassBalance:
    """Per-criterion positive frequency from the training split, frozen."""

    positive_rates: tuple[float, float, float]

    def __post_init__(self):
        for p in self.positive_rates:
            if not (0.0 < p < 1.0):
                raise ValueError(f"positive rate {p} outside (0, 1)")

    @staticmethod
    def from_labels(labels) -> "ClassBalance":
        rates = np.asarray(labels, dtype=np.float64).mean(axis=0)
        return ClassBalance(tuple(float(r) for r in rates))

    @staticmethod
    def uniform() -> "ClassBalance":
        return ClassBalance((0.5, 0.5, 0.5))

    def weights(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).reshape(3)
        p = np.asarray(self.positive_rates)
        return np.where(y > 0.5, 1.0 / p, 1.0 / (1.0 - p))


def balanced_bce(logits: Tensor, y, bal: ClassBalance) -> Tensor:
    """Mean over criteria of w_c * BCE(sigmoid(logit_c), y_c) with
    w_c = 1/p_c on positives and 1/(1-p_c) on negatives."""
    y_arr = np.asarray(y, dtype=np.float64).reshape(1, 3)
    if logits.shape != (1, 3):
        raise ad.ShapeError(f"expected (1, 3) logits, got {logits.shape}")
    w = ad.constant(bal.weights(y_arr).reshape(1, 3))
    bce = ad.sub(ad.softplus(logits), ad.mul(logits, ad.constant(y_arr)))
    return ad.mean_all(ad.mul(bce, w))


def masked_branch_graphs(g: LatentGraph, rng: np.random.Generator
                         ) -> tuple[LatentGraph, LatentGraph, LatentGraph]:
    """The three single-category graphs, drawn in fixed order
    (semantic-only, graph-visual-only, backbone-image-only)."""
    g_sem = mask(g, MASK_FOR_SEM, rng)
    g_viz = mask(g, MASK_FOR_VIZ, rng)
    g_img = mask(g, MASK_FOR_IMG, rng)
    return g_sem, g_viz, g_img


def disentanglement_loss(g: LatentGraph, y, weights: LossWeights, head,
                         bal: ClassBalance, rng: np.random.Generator) -> Tensor:
    """lambda_sem * L(y_sem) + lambda_viz * L(y_viz) + lambda_img * L(y_img),
    each branch predicting from a freshly masked graph.

    All-zero weights short-circuit to an exact 0 without consuming any
    noise, so the plain objective's stream is untouched when the loss is
    disabled. The three branches run as one disjoint-union head pass.
    """
    if weights.lambda_sem == 0 and weights.lambda_viz == 0 and weights.lambda_img == 0:
        return ad.constant(np.zeros(1))
    g_sem, g_viz, g_img = masked_branch_graphs(g, rng)
    logits = head.forward_many([g_sem, g_viz, g_img])  # (3, 3)
    y_rows = ad.constant(np.tile(np.asarray(y, dtype=np.float64).reshape(1, 3), (3, 1)))
    w_rows = ad.constant(np.tile(bal.weights(y).reshape(1, 3), (3, 1)))
    bce = ad.mul(ad.sub(ad.softplus(logits), ad.mul(logits, y_rows)), w_rows)
    lam = ad.constant(np.array([[weights.lambda_sem, weights.lambda_viz,
                                 weights.lambda_img]]))
    # per-branch mean over the 3 criteria, then the lambda-weighted sum
    branch_means = ad.matmul(bce, ad.constant(np.full((3, 1), 1.0 / 3.0)))
    return ad.reshape(ad.matmul(lam, branch_means), (1,))


def reconstruction_loss(reconstructed: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all pixels and channels."""
    if reconstructed.shape != target.shape:
        raise ad.ShapeError(f"reconstruction {reconstructed.shape} vs "
                            f"target {target.shape}")
    diff = ad.sub(reconstructed, target)
    return ad.mean_all(ad.mul(diff, diff))


def lg_sample_loss(model, g: LatentGraph, y, image: Tensor, det_boxes,
                   weights: LossWeights, bal: ClassBalance, cvs_mask_cats,
                   recon_mask_cats, rng: np.random.Generator) -> Tensor:
    """Full objective for one frame.

    Draw order from the masking stream is fixed: CVS-head mask, the three
    disentanglement branches, the reconstruction-head mask, then the
    backgroundized image's noise. With all disentanglement weights zero and
    the same mask settings this reproduces the plain objective bit-exactly.
    """
    g_cvs = mask(g, cvs_mask_cats, rng) if cvs_mask_cats else g
    loss = balanced_bce(model.head.forward(g_cvs), y, bal)
    loss = ad.add(loss, disentanglement_loss(g, y, weights, model.head, bal, rng))
    if weights.lambda_recon > 0:
        g_r = mask(g, recon_mask_cats, rng) if recon_mask_cats else g
        bg = backgroundized_image(image.data, det_boxes, rng)
        recon = model.recon.forward(g_r, ad.constant(bg))
        loss = ad.add(loss, ad.scale(reconstruction_loss(recon, image),
                                     weights.lambda_recon))
    return loss


def backgroundized_image(image: np.ndarray, boxes,
                         rng: np.random.Generator) -> np.ndarray:
    from .models import backgroundize
    return backgroundize(image, boxes, rng)
