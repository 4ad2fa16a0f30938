"""Training objectives: symmetric cross-entropy, cross-entropy, l1+GIoU box
losses, and teacher-target construction.

All functions are pure and differentiable torch ops; scalar convenience
wrappers accept BoundingBox values. Boxes are center format (cx, cy, w, h);
the loss functions do not restrict coordinates to [0, 1] so they also apply
to unnormalized geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .boxes import BoundingBox
from .errors import ShapeError, ValidationError

_EPS = 1e-7


@dataclass
class LabelAssignment:
    """Targets for the two softmax directions of a similarity matrix S (n x m).

    y_image: (n, m); row i is the target distribution over text columns for
    image row i. y_text: (n, m); column j is the target distribution over
    image rows for text column j. A row/column may be all-zero, meaning it
    has no positive pair and is excluded from that direction's mean.
    """

    y_image: torch.Tensor
    y_text: torch.Tensor

    def __post_init__(self):
        self.y_image = torch.as_tensor(self.y_image)
        self.y_text = torch.as_tensor(self.y_text)
        if self.y_image.shape != self.y_text.shape:
            raise ShapeError("y_image and y_text must have identical shapes")
        for name, sums in (("y_image rows", self.y_image.sum(dim=1)),
                           ("y_text columns", self.y_text.sum(dim=0))):
            ok = torch.isclose(sums, torch.ones_like(sums), atol=1e-5) | (sums.abs() < 1e-12)
            if not bool(ok.all()) or bool((self.y_image < 0).any()) or bool((self.y_text < 0).any()):
                raise ValidationError(f"{name} must each sum to 1 (or be all-zero)")

    @classmethod
    def identity(cls, n: int, dtype=torch.float64) -> "LabelAssignment":
        eye = torch.eye(n, dtype=dtype)
        return cls(eye, eye.clone())

    @classmethod
    def from_onehot(cls, targets: torch.Tensor) -> "LabelAssignment":
        """Build both directions from a single 0/1 match matrix, normalizing
        rows (image direction) and columns (text direction)."""
        targets = torch.as_tensor(targets, dtype=torch.float64)
        row_sum = targets.sum(dim=1, keepdim=True)
        col_sum = targets.sum(dim=0, keepdim=True)
        y_image = torch.where(row_sum > 0, targets / row_sum.clamp(min=1.0), targets)
        y_text = torch.where(col_sum > 0, targets / col_sum.clamp(min=1.0), targets)
        return cls(y_image, y_text)


def sce_loss(similarity: torch.Tensor, labels: LabelAssignment) -> torch.Tensor:
    """Symmetric cross-entropy over a similarity matrix.

    Mean of the image-direction CE (softmax over text columns per image row)
    and the text-direction CE (softmax over image rows per text column),
    each averaged over its active pairs so the value is batch-size invariant.
    """
    if similarity.ndim != 2:
        raise ShapeError("similarity must be 2-D")
    if similarity.shape != labels.y_image.shape:
        raise ShapeError(
            f"labels {tuple(labels.y_image.shape)} do not match similarity {tuple(similarity.shape)}"
        )
    if not torch.isfinite(similarity).all():
        raise ValidationError("similarity matrix contains non-finite values")
    y_image = labels.y_image.to(similarity.dtype).to(similarity.device)
    y_text = labels.y_text.to(similarity.dtype).to(similarity.device)

    log_rows = torch.log_softmax(similarity, dim=1)
    log_cols = torch.log_softmax(similarity, dim=0)

    row_mass = y_image.sum(dim=1)
    col_mass = y_text.sum(dim=0)
    active_rows = (row_mass > 0).to(similarity.dtype)
    active_cols = (col_mass > 0).to(similarity.dtype)
    n_rows = active_rows.sum().clamp(min=1.0)
    n_cols = active_cols.sum().clamp(min=1.0)

    image_ce = -(y_image * log_rows).sum() / n_rows
    text_ce = -(y_text * log_cols).sum() / n_cols
    return (image_ce + text_ce) / 2.0


def ce_loss(logits: torch.Tensor, target: int) -> torch.Tensor:
    """Plain classification cross-entropy: -log softmax(logits)[target]."""
    logits = torch.as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError("logits must be a 1-D class-logit vector")
    if not 0 <= int(target) < logits.shape[0]:
        raise ValidationError(f"target {target} out of range for {logits.shape[0]} classes")
    return -torch.log_softmax(logits, dim=0)[int(target)]


def center_to_corners(boxes: torch.Tensor) -> torch.Tensor:
    """(..., 4) center format -> (..., 4) corner format (x1, y1, x2, y2)."""
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def iou_giou(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Elementwise IoU and generalized IoU for center-format box tensors.

    IoU = |A∩B| / |A∪B|; GIoU = IoU - |C\\(A∪B)| / |C| where C is the
    smallest enclosing axis-aligned box. Denominators are clamped at 1e-7 so
    degenerate zero-area pairs yield IoU 0 with finite gradients.
    """
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape or a.shape[-1] != 4:
        raise ShapeError("boxes must be matching (..., 4) center-format tensors")
    ca = center_to_corners(a)
    cb = center_to_corners(b)
    area_a = (ca[..., 2] - ca[..., 0]).clamp(min=0) * (ca[..., 3] - ca[..., 1]).clamp(min=0)
    area_b = (cb[..., 2] - cb[..., 0]).clamp(min=0) * (cb[..., 3] - cb[..., 1]).clamp(min=0)

    inter_lt = torch.maximum(ca[..., :2], cb[..., :2])
    inter_rb = torch.minimum(ca[..., 2:], cb[..., 2:])
    inter_wh = (inter_rb - inter_lt).clamp(min=0)
    inter = inter_wh[..., 0] * inter_wh[..., 1]
    union = area_a + area_b - inter
    iou = inter / union.clamp(min=_EPS)

    enc_lt = torch.minimum(ca[..., :2], cb[..., :2])
    enc_rb = torch.maximum(ca[..., 2:], cb[..., 2:])
    enc_wh = (enc_rb - enc_lt).clamp(min=0)
    enc = enc_wh[..., 0] * enc_wh[..., 1]
    giou_val = iou - (enc - union) / enc.clamp(min=_EPS)
    return iou, giou_val


def _as_center_tensor(box) -> torch.Tensor:
    if isinstance(box, BoundingBox):
        return torch.tensor(box.as_tuple(), dtype=torch.float64)
    return torch.as_tensor(box, dtype=torch.float64)


def giou(a, b) -> tuple[float, float]:
    """Scalar convenience: (iou, giou) for two center-format boxes."""
    i, g = iou_giou(_as_center_tensor(a), _as_center_tensor(b))
    return float(i), float(g)


def box_loss(pred: torch.Tensor, gt: torch.Tensor,
             l1_weight: float = 1.0, giou_weight: float = 1.0) -> torch.Tensor:
    """Combined box objective: (L_l1 + L_GIoU) / 2.

    L_l1 is the mean over parts of the l1 corner-to-corner distance;
    L_GIoU is the mean over parts of (1 - GIoU). Parts are matched by
    index, one predicted box per named part.
    """
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt).to(pred.dtype)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[-1] != 4:
        raise ShapeError("pred and gt must both be (n_parts, 4) center-format tensors")
    l1 = (center_to_corners(pred) - center_to_corners(gt)).abs().sum(dim=-1).mean()
    _, g = iou_giou(pred, gt)
    giou_term = (1.0 - g).mean()
    return (l1_weight * l1 + giou_weight * giou_term) / 2.0


def boxes_to_tensor(boxes, dtype=torch.float64) -> torch.Tensor:
    """Stack BoundingBox values (or 4-sequences) into an (n, 4) tensor."""
    rows = [_as_center_tensor(b) for b in boxes]
    if not rows:
        raise ShapeError("need at least one box")
    return torch.stack(rows).to(dtype)


def binarize_teacher(teacher_similarity: torch.Tensor) -> torch.Tensor:
    """One-hot the teacher similarity per part column (argmax over patches,
    lowest index on ties). Input (n_patches, n_parts), output same shape."""
    sim = torch.as_tensor(teacher_similarity)
    if sim.ndim != 2:
        raise ShapeError("teacher similarity must be (n_patches, n_parts)")
    if not torch.isfinite(sim).all():
        raise ValidationError("teacher similarity contains non-finite values")
    idx = sim.argmax(dim=0)
    onehot = torch.zeros_like(sim, dtype=torch.float64)
    onehot[idx, torch.arange(sim.shape[1])] = 1.0
    return onehot


def selection_onehot(indices, n_patches: int, dtype=torch.float64) -> torch.Tensor:
    """Teacher selection indices -> one-hot (n_patches, n_parts) target."""
    idx = torch.as_tensor(indices, dtype=torch.long)
    onehot = torch.zeros((n_patches, idx.shape[0]), dtype=dtype)
    onehot[idx, torch.arange(idx.shape[0])] = 1.0
    return onehot
