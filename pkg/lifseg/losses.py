# Licensed under the MIT license. See LICENSE.md file in the project root for full license information.

"""
Segmentation losses and the combined training objective

    L = (cross_entropy + lovasz_softmax) + alpha * (loss_reg + loss_dir)

cross_entropy and lovasz_softmax are fused autodiff nodes with analytic backward.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from lifseg import autodiff as ad
from lifseg.errors import LabelOutOfRange, ShapeMismatch
from lifseg.offset_rectification import OffsetTargets, loss_dir, loss_reg

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


def _check_labels(op: str, logits: ad.DenseArray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeMismatch(op, logits.shape, labels.shape)
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = labels[(labels < 0) | (labels >= classes)][0]
        raise LabelOutOfRange(f"{op}: label {int(bad)} outside [0, {classes})")
    return labels


def cross_entropy(logits: ad.ArrayLike, labels) -> ad.DenseArray:
    """Mean over points of -log softmax(logits)[label]."""
    logits = ad.constant(logits)
    labels = _check_labels("cross_entropy", logits, labels)
    n = labels.shape[0]
    if n == 0:
        return ad.make_node(np.asarray(0.0), (logits,), lambda g: (np.zeros(logits.shape),), "cross_entropy")
    values = logits.data
    peak = values.max(axis=1, keepdims=True)
    log_norm = peak[:, 0] + np.log(np.exp(values - peak).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(log_norm - values[rows, labels])
    probs = ad.softmax_rows(values)

    def backward_fn(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return (float(g) * grad / n,)

    return ad.make_node(np.asarray(loss), (logits,), backward_fn, "cross_entropy")


def lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss at foreground flags sorted by decreasing error."""
    fg_sorted = np.asarray(fg_sorted, dtype=np.float64)
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    if jaccard.shape[0] > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(logits: ad.ArrayLike, labels) -> ad.DenseArray:
    """
    Mean over the classes present in labels of the Lovasz extension of the
    Jaccard loss, applied to the per-point errors |onehot - softmax prob|.
    """
    logits = ad.constant(logits)
    labels = _check_labels("lovasz_softmax", logits, labels)
    n, classes = logits.shape
    present = np.unique(labels)
    if n == 0 or present.size == 0:
        return ad.make_node(np.asarray(0.0), (logits,), lambda g: (np.zeros(logits.shape),), "lovasz_softmax")
    probs = ad.softmax_rows(logits.data)
    grad_probs = np.zeros_like(probs)
    total = 0.0
    for c in present:
        fg = (labels == c).astype(np.float64)
        errors = np.abs(fg - probs[:, c])
        order = np.argsort(-errors, kind="stable")
        weights = lovasz_grad(fg[order])
        total += float(np.dot(errors[order], weights))
        d_errors = np.empty(n)
        d_errors[order] = weights
        grad_probs[:, c] = d_errors * np.where(fg > 0, -1.0, 1.0)
    value = total / present.size
    grad_probs /= present.size

    def backward_fn(g):
        inner = np.sum(grad_probs * probs, axis=1, keepdims=True)
        return (float(g) * probs * (grad_probs - inner),)

    return ad.make_node(np.asarray(value), (logits,), backward_fn, "lovasz_softmax")


@dataclass(frozen=True, eq=False)
class LossTerms:
    cross_entropy: ad.DenseArray
    lovasz: ad.DenseArray
    reg: Optional[ad.DenseArray]
    direction: Optional[ad.DenseArray]
    total: ad.DenseArray

    def as_floats(self) -> dict:
        out = {"cross_entropy": self.cross_entropy.item(), "lovasz": self.lovasz.item(), "total": self.total.item()}
        if self.reg is not None:
            out["reg"] = self.reg.item()
            out["dir"] = self.direction.item()
        return out


def semantic_loss(logits: ad.ArrayLike, labels) -> ad.DenseArray:
    return ad.add(cross_entropy(logits, labels), lovasz_softmax(logits, labels))


def loss_terms(logits: ad.ArrayLike, labels, offset=None, targets: Optional[OffsetTargets] = None,
               weights: LossWeights = LossWeights()) -> LossTerms:
    """All loss components; the auxiliary pair is left out when offset or targets is None."""
    ce = cross_entropy(logits, labels)
    lov = lovasz_softmax(logits, labels)
    total = ad.add(ce, lov)
    reg = direction = None
    if offset is not None and targets is not None:
        reg = loss_reg(offset, targets)
        direction = loss_dir(offset, targets)
        total = ad.add(total, ad.mul_scalar(ad.add(reg, direction), weights.alpha))
    return LossTerms(cross_entropy=ce, lovasz=lov, reg=reg, direction=direction, total=total)


def total_loss(logits: ad.ArrayLike, labels, offset, targets: Optional[OffsetTargets],
               weights: LossWeights = LossWeights()) -> ad.DenseArray:
    """L = L_sem + alpha * (L_reg + L_dir)."""
    return loss_terms(logits, labels, offset, targets, weights).total
