"""Finite-difference verification of the full backend + classification loss.

Runs in 64-bit at generic parameter points: every parameter is jittered away
from its init so symmetric points (zeroed attention gates, batch-norm shift
invariances) do not produce exact-zero gradients that drown in finite-
difference noise.
"""

import numpy as np

from . import autodiff as ad
from . import objectives
from .model import BackendModel, ModelConfig


def check_config(n_layers=3, n_frames=7):
    """Small all-features-on configuration for finite-difference runs."""
    cfg = ModelConfig(input_dim=6, input_layers=n_layers, backbone_dim=8,
                      d2_bottleneck=4, d2_layers=2, d2_growth=4, num_heads=2,
                      head_dim=4, asp_bottleneck=4, embed_dim=5)
    return cfg, n_frames


def full_model_grad_check(seed=0, eps=1e-4, batch=2, n_classes=3,
                          max_entries_per_param=None, cfg=None, n_frames=7,
                          refine_threshold=5e-5, floor=1e-5):
    """Worst relative error of d(loss)/d(theta) for every parameter.

    Loss is the margin softmax over a random batch; parameters and the
    classifier weights are jittered uniformly so the check runs at a generic
    point.  Returns the worst relative error against central differences.
    """
    if cfg is None:
        cfg, n_frames = check_config()
    rng = np.random.default_rng(seed)
    m = BackendModel(cfg, seed=seed, dtype=np.float64)
    for _, t in m.params.items():
        t.data = t.data + rng.uniform(-0.1, 0.1, size=t.data.shape)
    class_w = m.params.register(
        "classifier.weight",
        rng.uniform(-0.5, 0.5, size=(n_classes, cfg.embed_dim)))
    x = rng.standard_normal(
        (batch, cfg.input_dim, cfg.input_layers, n_frames))
    labels = rng.integers(0, n_classes, size=batch)

    def loss():
        emb = m.forward(ad.Tensor(x), training=True)
        return objectives.aam_softmax_loss(emb, labels, class_w)

    return ad.grad_check(loss, m.params, eps=eps,
                         max_entries_per_param=max_entries_per_param, rng=rng,
                         refine_threshold=refine_threshold, floor=floor)
