"""The classification head: linear projection + part selection, part-matching
MLP, box MLP, diagonal-sum class logits, and explanation assembly.

The trainable parameter count is independent of the number of classes; all
class-specific state lives in the descriptor library, which is why classes
can be added or edited without touching a single weight.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .boxes import BoundingBox
from .descriptors import DescriptorLibrary
from .encoders import ImageEncoder, TextEncoder
from .errors import ShapeError, ValidationError

CHECKPOINT_FORMAT = "peeb-ckpt-1"


@dataclass
class ModelConfig:
    """Dimensions and behavior switches for the head."""

    d_image: int = 64
    d_text: int = 32
    hidden_dim: int = 64
    parts: tuple[str, ...] = ()
    similarity: str = "cosine"  # or "dot"; argmax rule for part selection
    prefix_part_names: bool = True  # encode descriptors as "{part}: {phrase}"
    part_query_template: str = "{part}"  # text sent to the encoder per part name

    def __post_init__(self):
        if self.similarity not in ("cosine", "dot"):
            raise ValidationError(f"unknown similarity mode {self.similarity!r}")
        if "{part}" not in self.part_query_template:
            raise ValidationError("part_query_template must contain '{part}'")
        self.parts = tuple(self.parts)

    def part_queries(self) -> list[str]:
        return [self.part_query_template.format(part=p) for p in self.parts]

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    def to_dict(self) -> dict:
        return {
            "d_image": self.d_image,
            "d_text": self.d_text,
            "hidden_dim": self.hidden_dim,
            "parts": list(self.parts),
            "similarity": self.similarity,
            "prefix_part_names": self.prefix_part_names,
            "part_query_template": self.part_query_template,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(
            d_image=int(doc["d_image"]),
            d_text=int(doc["d_text"]),
            hidden_dim=int(doc["hidden_dim"]),
            parts=tuple(doc["parts"]),
            similarity=doc.get("similarity", "cosine"),
            prefix_part_names=bool(doc.get("prefix_part_names", True)),
            part_query_template=doc.get("part_query_template", "{part}"),
        )


class LinearProjection(nn.Module):
    """Projects patch embeddings into the text space, with a learnable logit
    scale and shift applied to the selection similarities. Both scalars pass
    through ELU(x) + 1, keeping the effective scale positive so the per-part
    argmax is unaffected by the affine map."""

    def __init__(self, d_image: int, d_text: int):
        super().__init__()
        self.linear = nn.Linear(d_image, d_text)
        self.raw_logit_scale = nn.Parameter(torch.zeros(()))
        self.raw_logit_shift = nn.Parameter(torch.zeros(()))

    @property
    def logit_scale(self) -> torch.Tensor:
        # floor keeps the scale strictly positive even when elu(x)+1
        # cancels to zero in float32
        return (nn.functional.elu(self.raw_logit_scale) + 1.0).clamp(min=1e-8)

    @property
    def logit_shift(self) -> torch.Tensor:
        return nn.functional.elu(self.raw_logit_shift) + 1.0

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return self.linear(patches)

    def selection_logits(self, projected: torch.Tensor, name_embeddings: torch.Tensor,
                         similarity: str = "cosine") -> torch.Tensor:
        """(n_patches, n_parts) selection similarities, scaled and shifted."""
        if projected.shape[-1] != name_embeddings.shape[-1]:
            raise ShapeError("projected patches and name embeddings disagree on dim")
        if similarity == "cosine":
            p = nn.functional.normalize(projected, dim=-1, eps=1e-12)
            t = nn.functional.normalize(name_embeddings, dim=-1, eps=1e-12)
        else:
            p, t = projected, name_embeddings
        return p @ t.T * self.logit_scale + self.logit_shift


class ThreeLayerMLP(nn.Module):
    """Three linear layers with GELU after each of the first two."""

    def __init__(self, d_in: int, hidden: int, d_out: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Linear(d_in, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, d_out),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class EncoderDelta(nn.Module):
    """Trainable adaptation on top of a frozen patch featureizer; initialized
    to the identity so an untrained model passes features through unchanged.
    This is the desk-scale stand-in for finetuning the image encoder."""

    def __init__(self, d_image: int):
        super().__init__()
        self.linear = nn.Linear(d_image, d_image)
        with torch.no_grad():
            self.linear.weight.copy_(torch.eye(d_image))
            self.linear.bias.zero_()

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return self.linear(patches)


def project_patches(patches: torch.Tensor, projection: LinearProjection) -> torch.Tensor:
    """Linear map of raw patch embeddings into the text embedding space."""
    patches = torch.as_tensor(patches)
    if patches.ndim != 2 or patches.shape[1] != projection.linear.in_features:
        raise ShapeError(
            f"patches {tuple(patches.shape)} do not match projection input "
            f"dim {projection.linear.in_features}"
        )
    out = projection(patches.to(projection.linear.weight.dtype))
    if not torch.isfinite(out).all():
        raise ValidationError("projection produced non-finite values")
    return out


def select_parts(projected: torch.Tensor, name_embeddings: torch.Tensor,
                 projection: LinearProjection, similarity: str = "cosine") -> torch.Tensor:
    """Per part, the patch index with the highest selection similarity.

    Ties break to the lowest patch index. Duplicate selections are allowed.
    """
    logits = projection.selection_logits(projected, torch.as_tensor(name_embeddings,
                                                                    dtype=projected.dtype),
                                         similarity)
    return logits.argmax(dim=0)


def part_scores(selected: torch.Tensor, part_mlp: ThreeLayerMLP,
                descriptor_embeddings: torch.Tensor) -> torch.Tensor:
    """Match the selected raw patch embeddings against descriptor embeddings.

    selected: (n_parts, d_image) raw (pre-projection) embeddings at the
    chosen indices. Returns (n_parts, n_parts * n_classes) dot products.
    """
    selected = torch.as_tensor(selected)
    desc = torch.as_tensor(descriptor_embeddings).to(selected.dtype)
    s = part_mlp(selected)
    if s.shape[-1] != desc.shape[-1]:
        raise ShapeError("part MLP output dim does not match descriptor embedding dim")
    return s @ desc.T


def per_part_class_scores(scores: torch.Tensor, n_parts: int) -> torch.Tensor:
    """Reshape the (n_parts, n_parts*N) score matrix into the (n_parts, N)
    diagonal of each class block: entry (j, c) is part j's score against
    class c's descriptor for part j."""
    scores = torch.as_tensor(scores)
    if scores.ndim != 2 or scores.shape[0] != n_parts:
        raise ShapeError(f"scores must be ({n_parts}, {n_parts}*N)")
    if scores.shape[1] % n_parts != 0:
        raise ShapeError(
            f"score columns ({scores.shape[1]}) not divisible by part count ({n_parts})"
        )
    n_classes = scores.shape[1] // n_parts
    blocks = scores.reshape(n_parts, n_classes, n_parts)
    idx = torch.arange(n_parts)
    return blocks[idx, :, idx]  # (n_parts, n_classes)


def sum_part_scores(per_part: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Accumulate the (n_parts, N) score table into class logits part by
    part, in vocabulary order. The sequential reduction makes the result
    bit-identical to a naive per-class loop, and a full (all-ones) mask
    reproduces unmasked classification exactly."""
    rows = per_part if mask is None else per_part * mask.unsqueeze(1)
    logits = rows[0]
    for j in range(1, rows.shape[0]):
        logits = logits + rows[j]
    return logits


def classify(scores: torch.Tensor, n_parts: int) -> torch.Tensor:
    """Diagonal-sum class logits: logit[c] = sum_j score[j, c*n_parts + j].

    Descriptor columns must be ordered class-major, part-minor, aligned with
    the vocabulary order. Argmax ties break to the lowest class index.
    """
    return sum_part_scores(per_part_class_scores(scores, n_parts))


def predict_boxes(selected: torch.Tensor, box_mlp: ThreeLayerMLP) -> torch.Tensor:
    """One center-format box per part, squashed into [0, 1] by a sigmoid.
    Width and height are floored at emission so a saturated sigmoid cannot
    produce a zero-area box."""
    selected = torch.as_tensor(selected)
    raw = box_mlp(selected)
    if raw.shape[-1] != 4:
        raise ShapeError("box MLP must emit 4 values per part")
    out = torch.sigmoid(raw)
    size_floor = out[..., 2:].clamp(min=1e-6)
    return torch.cat((out[..., :2], size_floor), dim=-1)


class PeebModel(nn.Module):
    """All trainable components. The text encoder lives outside this module
    (it is frozen by contract and carries no trainable state here)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if not config.parts:
            raise ValidationError("model config needs a non-empty part vocabulary")
        self.config = config
        self.encoder_delta = EncoderDelta(config.d_image)
        self.projection = LinearProjection(config.d_image, config.d_text)
        self.part_mlp = ThreeLayerMLP(config.d_image, config.hidden_dim, config.d_text)
        self.box_mlp = ThreeLayerMLP(config.d_image, config.hidden_dim, 4)

    @property
    def n_parts(self) -> int:
        return self.config.n_parts

    def adapt(self, raw_patches: torch.Tensor) -> torch.Tensor:
        """Apply the trainable encoder adaptation to frozen features."""
        raw_patches = torch.as_tensor(raw_patches, dtype=self.dtype())
        return self.encoder_delta(raw_patches)

    def dtype(self) -> torch.dtype:
        return self.projection.linear.weight.dtype

    def select(self, patches: torch.Tensor, name_embeddings: torch.Tensor) -> torch.Tensor:
        projected = project_patches(patches, self.projection)
        return select_parts(projected, name_embeddings, self.projection,
                            self.config.similarity)

    def scores_for(self, selected: torch.Tensor,
                   descriptor_embeddings: torch.Tensor) -> torch.Tensor:
        return part_scores(selected, self.part_mlp, descriptor_embeddings)

    def boxes_for(self, selected: torch.Tensor) -> torch.Tensor:
        return predict_boxes(selected, self.box_mlp)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "encoder_delta": list(self.encoder_delta.parameters()),
            "projection": list(self.projection.parameters()),
            "part_mlp": list(self.part_mlp.parameters()),
            "box_mlp": list(self.box_mlp.parameters()),
        }

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass(frozen=True)
class PartExplanation:
    part: str
    phrase: str
    box: BoundingBox
    score: float


@dataclass(frozen=True)
class Explanation:
    """One class's grounded evidence: per-part phrase, box, and matching
    score; the class logit is exactly the sum of the per-part scores."""

    class_name: str
    total_logit: float
    softmax_prob: float
    per_part: tuple[PartExplanation, ...]


def descriptor_texts(lib: DescriptorLibrary, prefix_part_names: bool = True) -> list[str]:
    """Flatten the library class-major, part-minor, as fed to the text encoder."""
    texts = []
    for name in lib.class_names:
        for part in lib.vocabulary:
            phrase = lib.classes[name][part]
            texts.append(f"{part}: {phrase}" if prefix_part_names else phrase)
    return texts


class Pipeline:
    """Inference wiring: encoders + model + a descriptor library produce
    ranked explanations for an image. Read-only over the model; reentrant."""

    def __init__(self, model: PeebModel, text_encoder: TextEncoder,
                 image_encoder: ImageEncoder):
        if model.config.d_text != text_encoder.dim:
            raise ValidationError("model d_text does not match text encoder dim")
        self.model = model
        self.text_encoder = text_encoder
        self.image_encoder = image_encoder
        self._name_embeddings = torch.as_tensor(
            text_encoder.encode_text(model.config.part_queries()), dtype=model.dtype()
        )
        self._descriptor_cache: dict[int, torch.Tensor] = {}

    def descriptor_embeddings(self, lib: DescriptorLibrary) -> torch.Tensor:
        key = id(lib)
        if key not in self._descriptor_cache:
            texts = descriptor_texts(lib, self.model.config.prefix_part_names)
            emb = torch.as_tensor(self.text_encoder.encode_text(texts),
                                  dtype=self.model.dtype())
            if len(self._descriptor_cache) > 64:
                self._descriptor_cache.clear()
            self._descriptor_cache[key] = emb
        return self._descriptor_cache[key]

    def raw_patches(self, image) -> torch.Tensor:
        feats = torch.as_tensor(self.image_encoder.encode_image(image),
                                dtype=self.model.dtype())
        return self.model.adapt(feats)

    @torch.no_grad()
    def explain(self, image, lib: DescriptorLibrary, top_k: int | None = None) -> list[Explanation]:
        """Full inference pass, one Explanation per class sorted by softmax."""
        if len(lib) == 0:
            raise ValidationError("cannot classify against an empty library")
        if tuple(lib.vocabulary.parts) != self.model.config.parts:
            raise ValidationError("library vocabulary does not match the model's parts")
        patches = self.raw_patches(image)
        projected = project_patches(patches, self.model.projection)
        indices = select_parts(projected, self._name_embeddings, self.model.projection,
                               self.model.config.similarity)
        selected = patches[indices]
        boxes_t = predict_boxes(selected, self.model.box_mlp)
        scores = part_scores(selected, self.model.part_mlp, self.descriptor_embeddings(lib))
        per_part = per_part_class_scores(scores, self.model.n_parts)  # (P, N)
        logits = sum_part_scores(per_part)
        probs = torch.softmax(logits, dim=0)

        boxes = [BoundingBox(*(float(v) for v in row)) for row in boxes_t]
        names = lib.class_names
        explanations = []
        for c, name in enumerate(names):
            parts = tuple(
                PartExplanation(
                    part=part,
                    phrase=lib.classes[name][part],
                    box=boxes[j],
                    score=float(per_part[j, c]),
                )
                for j, part in enumerate(lib.vocabulary)
            )
            explanations.append(Explanation(
                class_name=name,
                total_logit=float(logits[c]),
                softmax_prob=float(probs[c]),
                per_part=parts,
            ))
        explanations.sort(key=lambda e: -e.softmax_prob)
        if top_k is not None:
            if not 1 <= top_k <= len(names):
                raise ValidationError(f"top_k {top_k} out of range for {len(names)} classes")
            explanations = explanations[:top_k]
        return explanations


def save_checkpoint(path, model: PeebModel, extra: dict | None = None):
    """Self-describing zip container: meta.json + one .npy per named tensor."""
    tensors = {name: p.detach().cpu().numpy() for name, p in model.state_dict().items()}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "tensors": {name: {"shape": list(t.shape), "dtype": str(t.dtype)}
                    for name, t in tensors.items()},
        "frozen": ["text_encoder"],
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2))
        for name, t in tensors.items():
            buf = io.BytesIO()
            np.save(buf, t)
            zf.writestr(f"tensors/{name}.npy", buf.getvalue())


def load_checkpoint(path) -> tuple[PeebModel, dict]:
    """Restore a model and the extra metadata block from a checkpoint file."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError(
                f"unsupported checkpoint format {meta.get('format')!r}; expected {CHECKPOINT_FORMAT}"
            )
        config = ModelConfig.from_dict(meta["config"])
        model = PeebModel(config)
        state = {}
        for name in meta["tensors"]:
            arr = np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")))
            state[name] = torch.as_tensor(arr)
        model.load_state_dict(state)
    return model, meta.get("extra", {})
