"""Training objective and trial scoring.

Additive-angular-margin softmax over length-normalized embeddings and class
weights (scale 30, margin 0.2), and plain cosine similarity for trials.
"""

import math

import numpy as np

from . import autodiff as ad

COS_CLAMP = 1e-7  # keep cos away from +-1: the angle derivative blows up there


def cosine_score(a, b):
    """Cosine similarity of two embedding vectors, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine score undefined for a zero-norm embedding")
    return float(np.dot(a, b) / (na * nb))


def _unit_rows(x):
    norms = ad.sqrt(ad.sum_(ad.square(x), axis=1, keepdims=True))
    return ad.div(x, norms)


def aam_softmax_loss(embeddings, labels, class_weights, scale=30.0, margin=0.2):
    """Mean cross-entropy with an additive angular margin on the target.

    embeddings: Tensor (B, R); labels: int array (B,);
    class_weights: Tensor (S, R).  Target logit is scale*cos(theta + margin),
    the others scale*cos(theta).
    """
    labels = np.asarray(labels)
    n_classes = class_weights.data.shape[0]
    if labels.ndim != 1 or labels.shape[0] != embeddings.data.shape[0]:
        raise ValueError("labels must be one int per embedding")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(
            f"label out of range [0, {n_classes}): {labels.min()},"
            f" {labels.max()}")

    e = _unit_rows(embeddings)
    w = _unit_rows(class_weights)
    cos = ad.matmul(e, ad.transpose(w))                      # (B, S)
    cos = ad.clip(cos, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    sin = ad.sqrt(ad.add(ad.neg(ad.square(cos)), 1.0 + 1e-16))
    phi = ad.sub(ad.mul(cos, math.cos(margin)),
                 ad.mul(sin, math.sin(margin)))              # cos(theta + m)

    onehot = np.zeros(cos.data.shape, dtype=cos.data.dtype)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    logits = ad.mul(ad.add(cos, ad.mul(ad.sub(phi, cos), onehot)), scale)

    shift = logits.data.max(axis=1, keepdims=True)           # constant shift
    lse = ad.add(ad.log(ad.sum_(ad.exp(ad.sub(logits, shift)), axis=1)),
                 shift.reshape(-1))
    target = ad.sum_(ad.mul(logits, onehot), axis=1)
    return ad.mean(ad.sub(lse, target))
