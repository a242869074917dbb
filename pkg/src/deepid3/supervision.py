"""Joint identification-verification losses and the heads that carry them.

A head turns an activation into a feature vector (through an optional
fully-connected projection), classifies it over the training identities and
compares the features of the two images of a pair with a contrastive loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .layers import fully_connected, fully_connected_backward
from .tensor import Rng, init_he


def softmax_cross_entropy(logits, label: int):
    """Returns ``(loss, grad_logits)`` for ``-log softmax(logits)[label]``."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    k = logits.size
    if k < 2:
        raise ShapeError(f"softmax needs at least 2 classes, got {k}")
    if not 0 <= label < k:
        raise IndexError(f"label {label} out of range for {k} classes")
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    loss = log_z - shifted[label]
    grad = np.exp(shifted - log_z)
    grad[label] -= 1.0
    return float(loss), grad


def verification_loss(f1, f2, same: bool, margin: float):
    """Contrastive loss on a feature pair.

    Genuine pairs pay ``0.5 * |f1 - f2|^2``; impostor pairs pay
    ``0.5 * max(0, margin - |f1 - f2|)^2``. Returns ``(loss, grad_f1, grad_f2)``.
    """
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape:
        raise ShapeError(f"verification_loss: feature shapes differ {f1.shape} vs {f2.shape}")
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    diff = f1 - f2
    if same:
        return 0.5 * float(diff @ diff), diff.copy(), -diff
    dist = float(np.sqrt(diff @ diff))
    gap = margin - dist
    if gap <= 0.0:
        zero = np.zeros_like(diff)
        return 0.0, zero, zero.copy()
    # d/df1 of 0.5*(m - |d|)^2 = -(m - |d|) * d/|d|; the direction is undefined
    # at |d| = 0, where the zero vector is used
    g = -gap * diff / dist if dist > 0.0 else np.zeros_like(diff)
    return 0.5 * gap * gap, g, -g


@dataclass
class SupervisionHead:
    """Metadata for one branch of supervision.

    Parameters live in the owning network's parameter store under
    ``<name>.proj.{w,b}`` (absent when ``in_dim is None``) and
    ``<name>.cls.{w,b}``.
    """

    name: str
    attach_point: str
    in_dim: int | None
    feature_dim: int
    num_identities: int
    margin: float = 1.0
    verif_weight: float = 0.05

    @property
    def has_projection(self):
        return self.in_dim is not None

    def param_shapes(self):
        shapes = {}
        if self.has_projection:
            shapes[f"{self.name}.proj.w"] = (self.feature_dim, self.in_dim)
            shapes[f"{self.name}.proj.b"] = (self.feature_dim,)
        shapes[f"{self.name}.cls.w"] = (self.num_identities, self.feature_dim)
        shapes[f"{self.name}.cls.b"] = (self.num_identities,)
        return shapes

    def init_params(self, rng: Rng):
        params = {}
        for pname, shape in self.param_shapes().items():
            if pname.endswith(".b"):
                params[pname] = np.zeros(shape)
            else:
                # projection is linear, so keep unit gain instead of the ReLU factor 2
                params[pname] = init_he(shape, 2 * shape[1], rng)
        return params


def head_features(head: SupervisionHead, params, act):
    """Feature vector the head's losses act on."""
    flat = np.asarray(act).reshape(-1)
    if head.has_projection:
        return fully_connected(flat, params[f"{head.name}.proj.w"], params[f"{head.name}.proj.b"])
    if flat.size != head.feature_dim:
        raise ShapeError(f"head '{head.name}': activation size {flat.size} != feature dim {head.feature_dim}")
    return flat


def head_loss(head: SupervisionHead, params, act1, act2, id1: int, id2: int):
    """Joint loss of one head on a training pair.

    Returns ``(loss, param_grads, grad_act1, grad_act2)``; the activation
    gradients have the activations' shapes.
    """
    n = head.name
    f1 = head_features(head, params, act1)
    f2 = head_features(head, params, act2)
    wc, bc = params[f"{n}.cls.w"], params[f"{n}.cls.b"]

    loss1, gl1 = softmax_cross_entropy(fully_connected(f1, wc, bc), id1)
    loss2, gl2 = softmax_cross_entropy(fully_connected(f2, wc, bc), id2)
    gf1, gw1, gb1 = fully_connected_backward(f1, wc, gl1)
    gf2, gw2, gb2 = fully_connected_backward(f2, wc, gl2)
    grads = {f"{n}.cls.w": gw1 + gw2, f"{n}.cls.b": gb1 + gb2}
    loss = loss1 + loss2

    if head.verif_weight != 0.0:
        vloss, gv1, gv2 = verification_loss(f1, f2, id1 == id2, head.margin)
        loss += head.verif_weight * vloss
        gf1 = gf1 + head.verif_weight * gv1
        gf2 = gf2 + head.verif_weight * gv2

    if head.has_projection:
        wp = params[f"{n}.proj.w"]
        ga1, gwp1, gbp1 = fully_connected_backward(act1, wp, gf1)
        ga2, gwp2, gbp2 = fully_connected_backward(act2, wp, gf2)
        grads[f"{n}.proj.w"] = gwp1 + gwp2
        grads[f"{n}.proj.b"] = gbp1 + gbp2
    else:
        ga1 = gf1.reshape(np.shape(act1))
        ga2 = gf2.reshape(np.shape(act2))
    return loss, grads, ga1, ga2
