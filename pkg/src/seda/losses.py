"""Training objectives and the two-branch loss dispatch.

Below the staged step the prediction is tied to the visual class structure
(center distance plus matched-row L1 offset) and above it the prediction
reconstructs the clean textual feature. Both branches add a classification
term through the shared head.
"""

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .exceptions import InvalidArgumentError

STAGE_ORDERS = ("as-written", "reversed")


@dataclass
class StagedLossConfig:
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta: float = 1.5
    gamma: float = 1.5
    staged_step: int = 50
    label_mode: str = "single"
    stage_order: str = "as-written"

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"loss weight {name} must be >= 0")
        if self.staged_step < 0:
            raise InvalidArgumentError("staged_step must be >= 0")
        if self.label_mode not in ("single", "multi"):
            raise InvalidArgumentError(f"unknown label_mode {self.label_mode!r}")
        if self.stage_order not in STAGE_ORDERS:
            raise InvalidArgumentError(f"stage_order must be one of {STAGE_ORDERS}")

    def semantic_branch(self, steps):
        """Boolean mask of samples routed to the structural-consistency branch."""
        steps = torch.as_tensor(steps)
        if self.stage_order == "as-written":
            return steps <= self.staged_step
        return steps > self.staged_step


class ClassCenters(NamedTuple):
    classes: torch.Tensor  # ids of classes present in the batch
    centers: torch.Tensor  # len(classes) x d
    counts: torch.Tensor


class StagedLoss(NamedTuple):
    total: torch.Tensor
    structural: torch.Tensor
    ce_semantic: torch.Tensor
    mse: torch.Tensor
    ce_textual: torch.Tensor
    n_semantic: int
    n_textual: int

    def as_floats(self):
        return {
            "total": float(self.total),
            "structural": float(self.structural),
            "ce_semantic": float(self.ce_semantic),
            "mse": float(self.mse),
            "ce_textual": float(self.ce_textual),
        }


def membership(labels, num_classes):
    """Float B x C indicator matrix from class ids or a multi-hot matrix."""
    labels = torch.as_tensor(labels)
    if labels.ndim == 1:
        if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
            raise InvalidArgumentError(f"label ids must lie in [0, {num_classes})")
        return F.one_hot(labels.long(), num_classes).to(torch.float64)
    if labels.ndim == 2:
        if labels.shape[1] != num_classes:
            raise InvalidArgumentError(f"multi-hot labels need {num_classes} columns, got {labels.shape[1]}")
        return (labels != 0).to(torch.float64)
    raise InvalidArgumentError("labels must be a vector of ids or a multi-hot matrix")


def class_centers(features, labels, num_classes):
    """Per-class mean of the rows whose label set contains the class."""
    member = membership(labels, num_classes).to(features.dtype)
    if member.shape[0] != features.shape[0]:
        raise InvalidArgumentError("labels and features disagree on batch size")
    counts = member.sum(dim=0)
    present = torch.nonzero(counts > 0).reshape(-1)
    sums = member[:, present].T @ features
    return ClassCenters(present, sums / counts[present, None], counts[present])


def structural_consistency_loss(x_pred, x_visual, labels, num_classes):
    """Summed center distances over present classes plus summed row-wise L1 offsets."""
    if x_pred.shape != x_visual.shape or x_pred.ndim != 2:
        raise InvalidArgumentError("x_pred and x_visual must be matching B x d matrices")
    if x_pred.shape[0] == 0:
        raise InvalidArgumentError("structural consistency needs a non-empty batch")
    pred_c = class_centers(x_pred, labels, num_classes)
    vis_c = class_centers(x_visual, labels, num_classes)
    center_term = torch.linalg.vector_norm(pred_c.centers - vis_c.centers, dim=1).sum()
    offset_term = (x_pred - x_visual).abs().sum()
    return center_term + offset_term


def reconstruction_mse(x_pred, x_textual):
    """Batch mean of the squared Euclidean row distance."""
    if x_pred.shape != x_textual.shape:
        raise InvalidArgumentError(f"shape mismatch {tuple(x_pred.shape)} vs {tuple(x_textual.shape)}")
    return ((x_textual - x_pred) ** 2).sum(dim=-1).mean()


def cross_entropy_loss(logits, labels, label_mode="single"):
    num_classes = logits.shape[-1]
    labels = torch.as_tensor(labels)
    if label_mode == "single":
        if labels.ndim != 1:
            raise InvalidArgumentError("single-label mode expects a vector of class ids")
        if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
            raise InvalidArgumentError(f"label ids must lie in [0, {num_classes})")
        return F.cross_entropy(logits, labels.long())
    if label_mode == "multi":
        target = membership(labels, num_classes).to(logits.dtype)
        return F.binary_cross_entropy_with_logits(logits, target)
    raise InvalidArgumentError(f"unknown label_mode {label_mode!r}")


def staged_loss(config, steps, x_pred, x_visual, x_textual, logits, labels, num_classes=None):
    """Route each sample to its branch by step and sum the two composites.

    An empty branch contributes zero.
    """
    steps = torch.as_tensor(steps).reshape(-1)
    n = x_pred.shape[0]
    if n == 0:
        raise InvalidArgumentError("staged_loss needs a non-empty batch")
    if steps.numel() != n:
        raise InvalidArgumentError(f"expected {n} steps, got {steps.numel()}")
    if num_classes is None:
        num_classes = logits.shape[-1]
    labels = torch.as_tensor(labels)
    sem = config.semantic_branch(steps)
    txt = ~sem
    zero = x_pred.new_zeros(())

    sc = ce_sem = mse = ce_txt = zero
    if bool(sem.any()):
        sc = structural_consistency_loss(x_pred[sem], x_visual[sem], labels[sem], num_classes)
        ce_sem = cross_entropy_loss(logits[sem], labels[sem], config.label_mode)
    if bool(txt.any()):
        if x_textual is None:
            raise InvalidArgumentError("textual features are required for the reconstruction branch")
        mse = reconstruction_mse(x_pred[txt], x_textual[txt])
        ce_txt = cross_entropy_loss(logits[txt], labels[txt], config.label_mode)
    total = config.alpha1 * sc + config.beta * ce_sem + config.alpha2 * mse + config.gamma * ce_txt
    return StagedLoss(total, sc, ce_sem, mse, ce_txt, int(sem.sum()), int(txt.sum()))
