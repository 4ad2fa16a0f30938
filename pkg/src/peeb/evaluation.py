"""Metrics and ablation runners: accuracy, zero-shot harmonic means, box
quality against a reference set, keypoint precision, part-subset and
randomized-descriptor ablations."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .boxes import BoundingBox
from .data import Keypoint
from .descriptors import DescriptorLibrary, randomize_descriptors
from .errors import ConfigurationError, ShapeError, ValidationError
from .losses import giou
from .model import (
    PeebModel,
    descriptor_texts,
    part_scores,
    per_part_class_scores,
    project_patches,
    select_parts,
    sum_part_scores,
)


@dataclass(frozen=True)
class MetricReport:
    name: str
    values: dict
    sample_count: int
    config_digest: str

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ValidationError("metric reports need a positive sample count")
        for key, v in self.values.items():
            if isinstance(v, float) and not np.isfinite(v):
                raise ValidationError(f"metric {key!r} is not finite")

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name, "values": self.values,
            "sample_count": self.sample_count, "config_digest": self.config_digest,
        })

    def to_csv_rows(self) -> list[str]:
        """One `name,key,value,sample_count,config_digest` row per value."""
        return [f"{self.name},{key},{value},{self.sample_count},{self.config_digest}"
                for key, value in self.values.items()]


def _digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def top1_accuracy(predictions, labels) -> float:
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels):
        raise ShapeError(f"{len(predictions)} predictions vs {len(labels)} labels")
    if not predictions:
        raise ValidationError("cannot compute accuracy of an empty set")
    return sum(1 for p, l in zip(predictions, labels) if p == l) / len(predictions)


def harmonic_mean(seen_acc: float, unseen_acc: float) -> float:
    """2ab/(a+b), the zero-shot summary over the seen/unseen (or easy/hard)
    accuracy pair; defined as 0 when either side is 0."""
    if not (0 <= seen_acc <= 100 and 0 <= unseen_acc <= 100):
        raise ValidationError("accuracies must lie in [0, 100]")
    if seen_acc == 0 or unseen_acc == 0:
        return 0.0
    return 2.0 * seen_acc * unseen_acc / (seen_acc + unseen_acc)


def box_mean_iou(pred_boxes, reference_boxes, keypoints=None) -> float:
    """Mean IoU of aligned box pairs. With `keypoints` given (one Keypoint or
    None per pair), only reference boxes containing their keypoint count."""
    pred = list(pred_boxes)
    ref = list(reference_boxes)
    if len(pred) != len(ref):
        raise ShapeError(f"{len(pred)} predictions vs {len(ref)} references")
    if keypoints is not None and len(list(keypoints)) != len(ref):
        raise ShapeError("keypoint list must align with the box pairs")
    ious = []
    kps = list(keypoints) if keypoints is not None else [None] * len(ref)
    for p, r, kp in zip(pred, ref, kps):
        if keypoints is not None:
            if kp is None or not kp.visible or not _box_contains(r, kp.x, kp.y):
                continue
        ious.append(giou(p, r)[0])
    if not ious:
        raise ValidationError("no box pairs left to evaluate")
    return float(np.mean(ious))


def _box_contains(box: BoundingBox, x: float, y: float) -> bool:
    x1, y1, x2, y2 = box.to_corners()
    return x1 <= x <= x2 and y1 <= y <= y2  # closed box: boundary counts


def keypoint_precision(pred_boxes, keypoints) -> float:
    """Fraction of visible keypoints contained in their part's predicted box.

    Invisible keypoints are excluded from the denominator. Both inputs are
    aligned per part (and may span many images, flattened)."""
    pred = list(pred_boxes)
    kps = list(keypoints)
    if len(pred) != len(kps):
        raise ShapeError(f"{len(pred)} boxes vs {len(kps)} keypoints")
    hits, total = 0, 0
    for box, kp in zip(pred, kps):
        if kp is None or not kp.visible:
            continue
        total += 1
        if _box_contains(box, kp.x, kp.y):
            hits += 1
    if total == 0:
        raise ValidationError("no visible keypoints to evaluate")
    return hits / total


# ---------------------------------------------------------------------------
# model-running helpers shared by the ablation runners


@torch.no_grad()
def part_score_table(model: PeebModel, features, desc_embs: torch.Tensor,
                     name_embs: torch.Tensor, selection=None) -> torch.Tensor:
    """(n_parts, n_classes) per-part class scores for one image's features.
    selection=None self-selects; otherwise uses the given patch indices."""
    feats = torch.as_tensor(features, dtype=model.dtype())
    adapted = model.encoder_delta(feats)
    if selection is None:
        projected = project_patches(adapted, model.projection)
        indices = select_parts(projected, name_embs, model.projection,
                               model.config.similarity)
    else:
        indices = torch.as_tensor(selection, dtype=torch.long)
    selected = adapted[indices]
    scores = part_scores(selected, model.part_mlp, desc_embs)
    return per_part_class_scores(scores, model.n_parts)


def predict_with_mask(per_part: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Class logits and argmax using only the masked part rows. The mask is a
    {0,1} float multiplier so a full mask reproduces full classification
    bit for bit."""
    logits = sum_part_scores(per_part, mask)
    return logits, int(logits.argmax())


def _embed_library(model: PeebModel, text_encoder, lib: DescriptorLibrary) -> torch.Tensor:
    texts = descriptor_texts(lib, model.config.prefix_part_names)
    return torch.as_tensor(text_encoder.encode_text(texts), dtype=model.dtype())


def _embed_parts(model: PeebModel, text_encoder, lib: DescriptorLibrary) -> torch.Tensor:
    return torch.as_tensor(text_encoder.encode_text(model.config.part_queries()),
                           dtype=model.dtype())


def evaluate_top1(model: PeebModel, text_encoder, lib: DescriptorLibrary,
                  examples, selection: str = "self") -> float:
    """Top-1 accuracy over examples (synthetic-style records with features,
    class_index, and teacher). selection is "self" or "teacher"."""
    desc = _embed_library(model, text_encoder, lib)
    names = _embed_parts(model, text_encoder, lib)
    preds, labels = [], []
    for ex in examples:
        sel = ex.teacher.selection if selection == "teacher" else None
        per_part = part_score_table(model, ex.features, desc, names, sel)
        _, pred = predict_with_mask(per_part, torch.ones(model.n_parts, dtype=per_part.dtype))
        preds.append(pred)
        labels.append(ex.class_index)
    return top1_accuracy(preds, labels)


def part_subset_eval(model: PeebModel, text_encoder, lib: DescriptorLibrary,
                     examples, k: int, order: str,
                     part_frequencies: dict[str, float]) -> MetricReport:
    """Classification restricted to the k most- or least-frequently-visible
    parts. k equal to the full vocabulary reproduces full classification."""
    if part_frequencies is None:
        raise ConfigurationError("part-subset ablation needs a part-frequency table")
    parts = list(lib.vocabulary.parts)
    missing = [p for p in parts if p not in part_frequencies]
    if missing:
        raise ConfigurationError(f"frequency table missing parts: {missing}")
    if not 1 <= k <= len(parts):
        raise ValidationError(f"k must be in [1, {len(parts)}]")
    if order not in ("most", "least"):
        raise ValidationError("order must be 'most' or 'least'")

    ranked = sorted(range(len(parts)),
                    key=lambda j: (-part_frequencies[parts[j]], j) if order == "most"
                    else (part_frequencies[parts[j]], j))
    chosen = set(ranked[:k])
    mask = torch.tensor([1.0 if j in chosen else 0.0 for j in range(len(parts))],
                        dtype=model.dtype())

    desc = _embed_library(model, text_encoder, lib)
    names = _embed_parts(model, text_encoder, lib)
    preds, labels = [], []
    for ex in examples:
        per_part = part_score_table(model, ex.features, desc, names)
        _, pred = predict_with_mask(per_part, mask)
        preds.append(pred)
        labels.append(ex.class_index)
    acc = top1_accuracy(preds, labels)
    config = {"k": k, "order": order, "parts": [parts[j] for j in ranked[:k]]}
    return MetricReport(
        name="part_subset_top1",
        values={"accuracy": acc, "k": k, "order": order},
        sample_count=len(preds),
        config_digest=_digest(config),
    )


def randomized_descriptor_eval(model: PeebModel, text_encoder, lib: DescriptorLibrary,
                               examples, seed: int) -> MetricReport:
    """Accuracy with the true library vs. with per-part phrase permutations
    across classes; the pair quantifies how much the classifier actually
    reads the descriptors."""
    original = evaluate_top1(model, text_encoder, lib, examples)
    shuffled = randomize_descriptors(lib, seed)
    randomized = evaluate_top1(model, text_encoder, shuffled, examples)
    return MetricReport(
        name="randomized_descriptors_top1",
        values={"original": original, "randomized": randomized},
        sample_count=len(list(examples)),
        config_digest=_digest({"seed": seed, "classes": len(lib)}),
    )


def derive_part_frequencies(records, parts) -> dict[str, float]:
    """Visibility frequency per part from records carrying keypoints."""
    counts = {p: 0 for p in parts}
    total = 0
    for r in records:
        total += 1
        for p in parts:
            kp = r.keypoints.get(p) if hasattr(r, "keypoints") else None
            if isinstance(kp, Keypoint) and kp.visible:
                counts[p] += 1
    if total == 0:
        raise ValidationError("no records to derive part frequencies from")
    return {p: counts[p] / total for p in parts}
