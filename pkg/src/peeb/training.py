"""Two-stage pre-training, downstream finetuning, and gradient verification.

Stage 1 trains the encoder adaptation and the part MLP contrastively with
teacher-forced part selection. Stage 2 freezes the encoder and trains the
linear projection (to mimic the teacher's selection) jointly with the box
MLP (to mimic the teacher's boxes). Finetuning switches the matching loss
from contrastive to plain classification CE and trains everything except
the text encoder, which stays frozen throughout.
"""

from __future__ import annotations

import copy
import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
import yaml

from .descriptors import DescriptorLibrary
from .encoders import TeacherAnnotation, TextEncoder
from .errors import ConfigurationError, ValidationError
from .losses import LabelAssignment, center_to_corners, iou_giou, sce_loss, selection_onehot
from .model import (
    ModelConfig,
    PeebModel,
    descriptor_texts,
    load_checkpoint,
    save_checkpoint,
)

STAGES = ("pretrain1", "pretrain2", "finetune")
CONTRASTIVE_STAGES = ("pretrain1", "pretrain2")

STAGE_TRAINABLE_GROUPS = {
    "pretrain1": ("encoder_delta", "part_mlp"),
    "pretrain2": ("projection", "box_mlp"),
    "finetune": ("encoder_delta", "projection", "part_mlp", "box_mlp"),
}


@dataclass
class TrainConfig:
    stage: str = "pretrain1"
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    early_stop_patience: int = 5
    in_batch_classes: int = 48
    seed: int = 0
    max_steps: int | None = None
    scheduler_factor: float = 0.1
    scheduler_patience: int = 2
    l1_weight: float = 1.0
    giou_weight: float = 1.0
    single_thread: bool = True  # bitwise-reproducible runs
    log_path: str | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValidationError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        for name in ("epochs",):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("batch_size", "learning_rate", "weight_decay",
                     "early_stop_patience", "scheduler_factor", "scheduler_patience"):
            if getattr(self, name) <= 0 and name not in ("weight_decay",):
                raise ValidationError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.stage in CONTRASTIVE_STAGES:
            if self.in_batch_classes < 1:
                raise ValidationError("contrastive stages need in_batch_classes >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValidationError("max_steps must be >= 0")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


def load_train_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValidationError("train config must be a key/value mapping")
    return TrainConfig.from_dict(doc)


def save_train_config(config: TrainConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)


@dataclass
class TrainBundle:
    """Everything a training stage consumes. Examples must expose image_id,
    class_index, features (n_patches x d_image), and a TeacherAnnotation."""

    train: list
    val: list
    library: DescriptorLibrary
    text_encoder: TextEncoder

    def class_count(self) -> int:
        return len(self.library)


def make_synthetic_bundle(world) -> TrainBundle:
    train, val = world.split()
    return TrainBundle(train=train, val=val, library=world.library(),
                       text_encoder=world.text_encoder())


@dataclass(frozen=True)
class ManifestExample:
    image_id: str
    class_index: int
    features: np.ndarray
    teacher: TeacherAnnotation | None


def bundle_from_manifest(manifest, library: DescriptorLibrary, image_encoder,
                         text_encoder: TextEncoder, val_fraction: float = 0.1,
                         seed: int = 0) -> TrainBundle:
    """Materialize a training bundle from a dataset manifest.

    Features come from the image encoder over each record's path; records
    must already carry teacher annotations (attach_annotations). The
    validation split is a seeded fraction of the data.
    """
    class_index = {name: i for i, name in enumerate(library.class_names)}
    examples = []
    for record in manifest.records:
        if record.label not in class_index:
            raise ValidationError(
                f"record {record.id!r} has label {record.label!r} not in the library"
            )
        examples.append(ManifestExample(
            image_id=record.id,
            class_index=class_index[record.label],
            features=np.asarray(image_encoder.encode_image(record.path)),
            teacher=record.teacher,
        ))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    n_val = int(round(len(examples) * val_fraction))
    val_idx = set(order[:n_val].tolist())
    train = [ex for i, ex in enumerate(examples) if i not in val_idx]
    val = [ex for i, ex in enumerate(examples) if i in val_idx]
    return TrainBundle(train=train, val=val, library=library, text_encoder=text_encoder)


@dataclass
class TrainResult:
    model: PeebModel
    config: TrainConfig
    best_val: float
    epochs_run: int
    steps_run: int
    history: list[dict] = field(default_factory=list)

    def save(self, path):
        save_checkpoint(path, self.model, extra={
            "train_config": self.config.to_dict(),
            "best_val": self.best_val,
            "epochs_run": self.epochs_run,
            "steps_run": self.steps_run,
            "torch_rng_state": torch.get_rng_state().numpy().tobytes().hex(),
            "frozen": ["text_encoder"],
        })


def load_train_result(path) -> tuple[PeebModel, dict]:
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# shared machinery


def _require_teacher(examples, stage: str):
    for ex in examples:
        if not isinstance(getattr(ex, "teacher", None), TeacherAnnotation):
            raise ConfigurationError(
                f"{stage} requires teacher annotations; example {ex.image_id!r} has none"
            )


def _descriptor_matrix(bundle: TrainBundle, model: PeebModel) -> torch.Tensor:
    texts = descriptor_texts(bundle.library, model.config.prefix_part_names)
    return torch.as_tensor(bundle.text_encoder.encode_text(texts), dtype=model.dtype())


def _part_name_matrix(bundle: TrainBundle, model: PeebModel) -> torch.Tensor:
    return torch.as_tensor(
        bundle.text_encoder.encode_text(model.config.part_queries()),
        dtype=model.dtype(),
    )


def _stack_features(examples, dtype) -> torch.Tensor:
    return torch.as_tensor(np.stack([ex.features for ex in examples]), dtype=dtype)


def contrastive_batches(examples, config: TrainConfig, rng: np.random.Generator):
    """Yield per-step example batches drawing `in_batch_classes` distinct
    classes (or all available, if fewer) per batch."""
    by_class: dict[int, list] = {}
    for ex in examples:
        by_class.setdefault(ex.class_index, []).append(ex)
    classes = sorted(by_class)
    n_classes = min(config.in_batch_classes, len(classes))
    n_batches = max(1, len(examples) // config.batch_size)
    for _ in range(n_batches):
        chosen = rng.choice(len(classes), size=n_classes, replace=False)
        chosen_classes = [classes[i] for i in sorted(chosen)]
        pool = [ex for c in chosen_classes for ex in by_class[c]]
        take = min(config.batch_size, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        yield chosen_classes, [pool[i] for i in sorted(idx)]


def _plain_batches(examples, config: TrainConfig, rng: np.random.Generator):
    order = rng.permutation(len(examples))
    for start in range(0, len(examples), config.batch_size):
        chunk = order[start:start + config.batch_size]
        yield [examples[i] for i in chunk]


def _selection_logits_batch(model: PeebModel, adapted: torch.Tensor,
                            name_embs: torch.Tensor) -> torch.Tensor:
    """(B, n_patches, n_parts) selection similarities for a feature batch."""
    projected = model.projection(adapted)
    if model.config.similarity == "cosine":
        p = torch.nn.functional.normalize(projected, dim=-1, eps=1e-12)
        t = torch.nn.functional.normalize(name_embs, dim=-1, eps=1e-12)
    else:
        p, t = projected, name_embs
    return torch.einsum("bnd,pd->bnp", p, t) * model.projection.logit_scale \
        + model.projection.logit_shift


def _gather_selected(adapted: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    batch_idx = torch.arange(adapted.shape[0]).unsqueeze(1)
    return adapted[batch_idx, indices]  # (B, P, d_image)


def _stage1_loss(model: PeebModel, batch, class_order: list[int],
                 desc_embs: torch.Tensor) -> torch.Tensor:
    """Teacher-forced contrastive matching loss for one batch.

    Rows are the parts of every image in the batch; columns are the
    descriptors of the in-batch classes (class-major, part-minor). Row
    (b, j) matches column (class_b, j); all other entries are negatives.
    """
    n_parts = model.n_parts
    feats = _stack_features(batch, model.dtype())
    adapted = model.encoder_delta(feats)
    teacher_idx = torch.as_tensor(np.stack([ex.teacher.selection for ex in batch]),
                                  dtype=torch.long)
    selected = _gather_selected(adapted, teacher_idx)
    s = model.part_mlp(selected).reshape(len(batch) * n_parts, -1)

    class_pos = {c: i for i, c in enumerate(class_order)}
    cols = torch.cat([desc_embs[c * n_parts:(c + 1) * n_parts] for c in class_order])
    similarity = s @ cols.T

    targets = torch.zeros(similarity.shape, dtype=torch.float64)
    for b, ex in enumerate(batch):
        pos = class_pos[ex.class_index]
        for j in range(n_parts):
            targets[b * n_parts + j, pos * n_parts + j] = 1.0
    return sce_loss(similarity, LabelAssignment.from_onehot(targets))


def _batch_box_loss(pred: torch.Tensor, gt: torch.Tensor,
                    l1_weight: float, giou_weight: float) -> torch.Tensor:
    l1 = (center_to_corners(pred) - center_to_corners(gt)).abs().sum(dim=-1).mean()
    _, g = iou_giou(pred, gt)
    return (l1_weight * l1 + giou_weight * (1.0 - g).mean()) / 2.0


def _stage2_loss(model: PeebModel, batch, name_embs: torch.Tensor,
                 config: TrainConfig) -> torch.Tensor:
    """Selection mimicry (SCE vs. binarized teacher) + box regression."""
    feats = _stack_features(batch, model.dtype())
    with torch.no_grad():
        adapted = model.encoder_delta(feats)  # encoder frozen this stage
    logits = _selection_logits_batch(model, adapted, name_embs)

    n_patches = adapted.shape[1]
    sce_terms = []
    for b, ex in enumerate(batch):
        target = selection_onehot(ex.teacher.selection, n_patches)
        sce_terms.append(sce_loss(logits[b], LabelAssignment.from_onehot(target)))
    sce_term = torch.stack(sce_terms).mean()

    self_idx = logits.argmax(dim=1)  # (B, P): student's own selection
    selected = _gather_selected(adapted, self_idx)
    pred_boxes = torch.sigmoid(model.box_mlp(selected))
    gt = torch.as_tensor(
        np.stack([[b.as_tuple() for b in ex.teacher.boxes] for ex in batch]),
        dtype=pred_boxes.dtype,
    )
    box_term = _batch_box_loss(pred_boxes, gt, config.l1_weight, config.giou_weight)
    return sce_term.to(box_term.dtype) + box_term


def _finetune_loss(model: PeebModel, batch, name_embs: torch.Tensor,
                   desc_embs: torch.Tensor, config: TrainConfig) -> torch.Tensor:
    """Classification CE over diagonal-sum logits plus both stage-2 losses."""
    n_parts = model.n_parts
    feats = _stack_features(batch, model.dtype())
    adapted = model.encoder_delta(feats)
    logits_sel = _selection_logits_batch(model, adapted, name_embs)

    n_patches = adapted.shape[1]
    sce_terms = []
    for b, ex in enumerate(batch):
        target = selection_onehot(ex.teacher.selection, n_patches)
        sce_terms.append(sce_loss(logits_sel[b], LabelAssignment.from_onehot(target)))
    sce_term = torch.stack(sce_terms).mean()

    self_idx = logits_sel.argmax(dim=1)
    selected = _gather_selected(adapted, self_idx)

    pred_boxes = torch.sigmoid(model.box_mlp(selected))
    gt = torch.as_tensor(
        np.stack([[b.as_tuple() for b in ex.teacher.boxes] for ex in batch]),
        dtype=pred_boxes.dtype,
    )
    box_term = _batch_box_loss(pred_boxes, gt, config.l1_weight, config.giou_weight)

    s = model.part_mlp(selected)  # (B, P, d_text)
    scores = torch.einsum("bpd,kd->bpk", s, desc_embs)  # (B, P, N*P)
    n_classes = desc_embs.shape[0] // n_parts
    blocks = scores.reshape(len(batch), n_parts, n_classes, n_parts)
    part_idx = torch.arange(n_parts)
    class_logits = blocks[:, part_idx, :, part_idx].sum(dim=0)  # advanced indexing puts P first
    labels = torch.as_tensor([ex.class_index for ex in batch], dtype=torch.long)
    ce_term = torch.nn.functional.cross_entropy(class_logits, labels)

    return ce_term + sce_term.to(ce_term.dtype) + box_term


# ---------------------------------------------------------------------------
# stage drivers


def _validate_loss(model: PeebModel, bundle: TrainBundle, config: TrainConfig,
                   name_embs, desc_embs) -> float:
    if not bundle.val:
        return float("nan")
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(bundle.val), config.batch_size):
            batch = bundle.val[start:start + config.batch_size]
            if config.stage == "pretrain1":
                class_order = sorted({ex.class_index for ex in batch})
                loss = _stage1_loss(model, batch, class_order, desc_embs)
            elif config.stage == "pretrain2":
                loss = _stage2_loss(model, batch, name_embs, config)
            else:
                loss = _finetune_loss(model, batch, name_embs, desc_embs, config)
            total += float(loss) * len(batch)
            count += len(batch)
    return total / count


def _run_stage(bundle: TrainBundle, config: TrainConfig, model: PeebModel) -> TrainResult:
    if config.single_thread:
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    groups = model.parameter_groups()
    trainable_names = STAGE_TRAINABLE_GROUPS[config.stage]
    trainable = [p for name in trainable_names for p in groups[name]]
    for name, params in groups.items():
        for p in params:
            p.requires_grad_(name in trainable_names)

    optimizer = torch.optim.AdamW(trainable, lr=config.learning_rate,
                                  betas=(0.9, 0.999), eps=1e-8,
                                  weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, factor=config.scheduler_factor, patience=config.scheduler_patience)

    name_embs = _part_name_matrix(bundle, model)
    desc_embs = _descriptor_matrix(bundle, model)

    history: list[dict] = []
    best_val = float("inf")
    best_state = copy.deepcopy(model.state_dict())
    epochs_without_improvement = 0
    steps = 0
    epochs_run = 0
    stop = False

    for epoch in range(config.epochs):
        if stop:
            break
        model.train()
        if config.stage in CONTRASTIVE_STAGES:
            batches = contrastive_batches(bundle.train, config, rng)
        else:
            batches = _plain_batches(bundle.train, config, rng)
        for item in batches:
            if config.max_steps is not None and steps >= config.max_steps:
                stop = True
                break
            if config.stage == "pretrain1":
                class_order, batch = item
                loss = _stage1_loss(model, batch, class_order, desc_embs)
            elif config.stage == "pretrain2":
                _, batch = item
                loss = _stage2_loss(model, batch, name_embs, config)
            else:
                batch = item
                loss = _finetune_loss(model, batch, name_embs, desc_embs, config)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            steps += 1
            history.append({"step": steps, "epoch": epoch, "stage": config.stage,
                            "loss": float(loss.detach()), "val_loss": ""})
        epochs_run = epoch + 1

        model.eval()
        val_loss = _validate_loss(model, bundle, config, name_embs, desc_embs)
        history.append({"step": steps, "epoch": epoch, "stage": config.stage,
                        "loss": "", "val_loss": val_loss})
        if val_loss == val_loss:  # not NaN
            scheduler.step(val_loss)
            if val_loss < best_val:
                best_val = val_loss
                best_state = copy.deepcopy(model.state_dict())
                epochs_without_improvement = 0
            else:
                epochs_without_improvement += 1
                if epochs_without_improvement >= config.early_stop_patience:
                    break

    if config.epochs > 0 and best_val < float("inf"):
        model.load_state_dict(best_state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)

    if config.log_path:
        _write_log(config.log_path, history)
    return TrainResult(model=model, config=config, best_val=best_val,
                       epochs_run=epochs_run, steps_run=steps, history=history)


def _write_log(path, history: list[dict]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "epoch", "stage", "loss", "val_loss"])
        writer.writeheader()
        writer.writerows(history)


def pretrain_stage1(bundle: TrainBundle, config: TrainConfig,
                    model: PeebModel | None = None) -> TrainResult:
    """Contrastive stage: trains encoder adaptation + part MLP with
    teacher-forced selection; projection and box MLP are untouched."""
    if config.stage != "pretrain1":
        raise ValidationError(f"config.stage is {config.stage!r}, expected 'pretrain1'")
    _require_teacher(bundle.train, "pretrain1")
    if model is None:
        model = PeebModel(ModelConfig(
            d_image=bundle.train[0].features.shape[1],
            d_text=bundle.text_encoder.dim,
            parts=tuple(bundle.library.vocabulary.parts),
        ))
    return _run_stage(bundle, config, model)


def pretrain_stage2(bundle: TrainBundle, config: TrainConfig,
                    model: PeebModel) -> TrainResult:
    """Teacher-distillation stage: trains projection + box MLP; the encoder
    is frozen and the part MLP is not involved."""
    if config.stage != "pretrain2":
        raise ValidationError(f"config.stage is {config.stage!r}, expected 'pretrain2'")
    _require_teacher(bundle.train, "pretrain2")
    return _run_stage(bundle, config, model)


def finetune(bundle: TrainBundle, config: TrainConfig, model: PeebModel) -> TrainResult:
    """Downstream classification: CE over diagonal-sum logits plus both
    stage-2 losses; everything except the text encoder trains jointly."""
    if config.stage != "finetune":
        raise ValidationError(f"config.stage is {config.stage!r}, expected 'finetune'")
    _require_teacher(bundle.train, "finetune")
    n_classes = bundle.class_count()
    for ex in bundle.train + bundle.val:
        if not 0 <= ex.class_index < n_classes:
            raise ValidationError(
                f"example {ex.image_id!r} has label {ex.class_index} outside the "
                f"{n_classes}-class library"
            )
    return _run_stage(bundle, config, model)


# ---------------------------------------------------------------------------
# audits


def snapshot_parameters(model: PeebModel) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()}


def changed_parameter_names(before: dict[str, np.ndarray],
                            after: dict[str, np.ndarray]) -> set[str]:
    return {name for name in before if not np.array_equal(before[name], after[name])}


GROUP_PREFIXES = ("encoder_delta", "projection", "part_mlp", "box_mlp")


def changed_groups(before: dict[str, np.ndarray], after: dict[str, np.ndarray]) -> set[str]:
    names = changed_parameter_names(before, after)
    return {prefix for prefix in GROUP_PREFIXES
            if any(n.startswith(prefix + ".") for n in names)}


def audit_stage_isolation(before: dict[str, np.ndarray], after: dict[str, np.ndarray],
                          stage: str) -> dict:
    """A stage passes if every changed tensor belongs to a declared group and
    every declared group has at least one changed tensor."""
    declared = set(STAGE_TRAINABLE_GROUPS[stage])
    changed = changed_parameter_names(before, after)
    out_of_bounds = {n for n in changed
                     if not any(n.startswith(g + ".") for g in declared)}
    touched_groups = {g for g in declared if any(n.startswith(g + ".") for n in changed)}
    return {
        "stage": stage,
        "declared_groups": sorted(declared),
        "changed_tensors": sorted(changed),
        "out_of_bounds": sorted(out_of_bounds),
        "untouched_declared_groups": sorted(declared - touched_groups),
        "ok": not out_of_bounds and touched_groups == declared,
    }


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    per_group: dict[str, float]
    non_finite: list[str]

    @property
    def max_rel_err(self) -> float:
        return max(self.per_group.values()) if self.per_group else float("nan")


def finite_difference_gradient(fn: Callable[[], torch.Tensor], tensor: torch.Tensor,
                               eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar-valued closure w.r.t. tensor."""
    grad = torch.zeros_like(tensor, dtype=torch.float64)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + eps
            up = float(fn())
            flat[i] = original - eps
            down = float(fn())
            flat[i] = original
            gflat[i] = (up - down) / (2.0 * eps)
    return grad


def relative_gradient_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Max-norm error normalized by the larger gradient scale."""
    a = analytic.detach().reshape(-1).to(torch.float64)
    n = numeric.detach().reshape(-1).to(torch.float64)
    scale = max(float(a.abs().max()), float(n.abs().max()), 1e-12)
    return float((a - n).abs().max()) / scale


def grad_check(model: PeebModel, loss_fn: Callable[[PeebModel], torch.Tensor],
               eps: float = 1e-5,
               groups: Sequence[str] | None = None) -> GradCheckReport:
    """Compare autograd gradients against central finite differences,
    per parameter group. Frozen groups (and the parameterless text encoder)
    never appear in the report. Run the model in float64."""
    model = model.double()
    wanted = tuple(groups) if groups else GROUP_PREFIXES
    per_group: dict[str, float] = {}
    non_finite: list[str] = []

    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    loss.backward()

    for group_name in wanted:
        params = model.parameter_groups()[group_name]
        errors = []
        for p in params:
            if p.grad is None:
                continue
            if not torch.isfinite(p.grad).all():
                non_finite.append(group_name)
                continue
            numeric = finite_difference_gradient(lambda: loss_fn(model), p.data, eps)
            errors.append(relative_gradient_error(p.grad, numeric))
        if errors:
            per_group[group_name] = max(errors)
    return GradCheckReport(per_group=per_group, non_finite=non_finite)
