"""Deterministic synthetic task for desk-scale end-to-end training.

Each (class, part) pair owns a fixed random prototype vector. An "image" is
the stack of its class's part prototypes placed at known patch positions,
plus distractor patches, plus per-patch positional codes and seeded Gaussian
noise. Descriptor embeddings are the noise-free prototypes pushed through a
fixed random linear map, so the matching task is learnable by construction
and the ideal part-matcher generalizes to classes never seen in training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import BoundingBox
from .descriptors import DescriptorLibrary, PartVocabulary
from .encoders import HashTextEncoder, TableTextEncoder, TeacherAnnotation
from .errors import ConfigurationError, ValidationError


@dataclass
class SyntheticConfig:
    n_classes: int = 8
    extra_classes: int = 1  # held back from training; used by editability tests
    n_parts: int = 12
    d_image: int = 64
    d_text: int = 32
    n_patches: int = 16
    noise_sigma: float = 0.1
    pos_scale: float = 1.0
    images_per_class: int = 50
    train_fraction: float = 0.8
    seed: int = 0
    # optional per-part noise multipliers; unequal values make parts unequally
    # informative (high scale drowns the prototype, so that part carries
    # little class signal)
    part_noise_scales: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_patches < self.n_parts:
            raise ValidationError("need at least one patch per part")
        if self.n_parts < 1 or self.n_classes < 1:
            raise ValidationError("class and part counts must be positive")
        if self.part_noise_scales is not None:
            self.part_noise_scales = tuple(float(s) for s in self.part_noise_scales)
            if len(self.part_noise_scales) != self.n_parts:
                raise ValidationError("part_noise_scales needs one entry per part")


@dataclass(frozen=True)
class SyntheticExample:
    image_id: str
    class_index: int
    features: np.ndarray  # (n_patches, d_image) float32
    teacher: TeacherAnnotation


@dataclass
class SyntheticWorld:
    """Holds the generator state plus the derived library, encoders, and data."""

    config: SyntheticConfig
    vocabulary: PartVocabulary = field(init=False)

    def __post_init__(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        self.vocabulary = PartVocabulary(tuple(f"part{p:02d}" for p in range(cfg.n_parts)))
        self.class_names = [f"class_{c:02d}" for c in range(cfg.n_classes + cfg.extra_classes)]

        total = cfg.n_classes + cfg.extra_classes
        protos = rng.standard_normal((total, cfg.n_parts, cfg.d_image))
        self.prototypes = protos / np.linalg.norm(protos, axis=-1, keepdims=True)

        pos = rng.standard_normal((cfg.n_patches, cfg.d_image))
        self.positions = cfg.pos_scale * pos / np.linalg.norm(pos, axis=-1, keepdims=True)

        self.text_map = rng.standard_normal((cfg.d_text, cfg.d_image)) / math.sqrt(cfg.d_image)

        names = rng.standard_normal((cfg.n_parts, cfg.d_text))
        self.part_name_embeddings = names / np.linalg.norm(names, axis=-1, keepdims=True)

        # grid geometry for teacher boxes: patch i lives in cell i of a g x g grid
        self.grid = math.ceil(math.sqrt(cfg.n_patches))

    # ---- descriptors ----------------------------------------------------

    def phrase(self, class_index: int, part_index: int) -> str:
        return (f"{self.class_names[class_index]} {self.vocabulary.parts[part_index]} "
                f"signature {class_index}-{part_index}")

    def phrases_for_class(self, class_index: int) -> dict[str, str]:
        return {part: self.phrase(class_index, j)
                for j, part in enumerate(self.vocabulary)}

    def descriptor_embedding(self, class_index: int, part_index: int) -> np.ndarray:
        vec = self.text_map @ self.prototypes[class_index, part_index]
        return (vec / np.linalg.norm(vec)).astype(np.float32)

    def library(self, n_classes: int | None = None) -> DescriptorLibrary:
        n = n_classes if n_classes is not None else self.config.n_classes
        classes = {self.class_names[c]: self.phrases_for_class(c) for c in range(n)}
        return DescriptorLibrary(self.vocabulary, classes)

    def text_encoder(self) -> TableTextEncoder:
        """Encoder resolving the generated phrases (templated or bare) to the
        prototype-mapped embeddings, and part names to their query vectors."""
        table: dict[str, np.ndarray] = {}
        total = self.config.n_classes + self.config.extra_classes
        for c in range(total):
            for j, part in enumerate(self.vocabulary):
                emb = self.descriptor_embedding(c, j)
                bare = self.phrase(c, j)
                table[bare] = emb
                table[f"{part}: {bare}"] = emb
        for j, part in enumerate(self.vocabulary):
            table[part] = self.part_name_embeddings[j].astype(np.float32)
        return TableTextEncoder(table, dim=self.config.d_text,
                                fallback=HashTextEncoder(self.config.d_text, self.config.seed))

    # ---- images ----------------------------------------------------------

    def patch_box(self, patch_index: int) -> BoundingBox:
        g = self.grid
        row, col = divmod(patch_index, g)
        cell = 1.0 / g
        return BoundingBox((col + 0.5) * cell, (row + 0.5) * cell, cell, cell)

    def teacher_annotation(self) -> TeacherAnnotation:
        cfg = self.config
        return TeacherAnnotation(
            selection=tuple(range(cfg.n_parts)),
            boxes=tuple(self.patch_box(j) for j in range(cfg.n_parts)),
            object_box=BoundingBox(0.5, 0.5, 1.0, 1.0),
        )

    def image_features(self, class_index: int, sample_index: int) -> np.ndarray:
        """Part j's prototype sits at patch j; remaining patches are
        distractors. Every patch carries its positional code plus noise."""
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 7_919, class_index, sample_index])
        patches = rng.standard_normal((cfg.n_patches, cfg.d_image))
        patches /= np.linalg.norm(patches, axis=-1, keepdims=True)  # distractor content
        patches[: cfg.n_parts] = self.prototypes[class_index]
        patches = patches + self.positions
        noise = cfg.noise_sigma * rng.standard_normal(patches.shape)
        if cfg.part_noise_scales is not None:
            scales = np.asarray(cfg.part_noise_scales)[:, None]
            noise[: cfg.n_parts] *= scales
        return (patches + noise).astype(np.float32)

    def example(self, class_index: int, sample_index: int) -> SyntheticExample:
        return SyntheticExample(
            image_id=f"syn-{class_index:03d}-{sample_index:04d}",
            class_index=class_index,
            features=self.image_features(class_index, sample_index),
            teacher=self.teacher_annotation(),
        )

    def split(self, classes: list[int] | None = None) -> tuple[list[SyntheticExample], list[SyntheticExample]]:
        """Deterministic train/validation split per class."""
        cfg = self.config
        classes = classes if classes is not None else list(range(cfg.n_classes))
        n_train = int(round(cfg.images_per_class * cfg.train_fraction))
        train, val = [], []
        for c in classes:
            for s in range(cfg.images_per_class):
                ex = self.example(c, s)
                (train if s < n_train else val).append(ex)
        return train, val

    def held_out_for_class(self, class_index: int, n: int = 10) -> list[SyntheticExample]:
        """Fresh samples (indices beyond the standard pool) for one class."""
        start = self.config.images_per_class
        return [self.example(class_index, start + s) for s in range(n)]


class SyntheticFeatureSource:
    """Image-encoder-shaped provider over synthetic image ids."""

    def __init__(self, world: SyntheticWorld):
        self.world = world
        self.n_patches = world.config.n_patches
        self.dim = world.config.d_image
        self.provider_id = f"synthetic-s{world.config.seed}"

    def encode_image(self, image) -> np.ndarray:
        image_id = image if isinstance(image, str) else getattr(image, "image_id", None)
        if not isinstance(image_id, str) or not image_id.startswith("syn-"):
            raise ConfigurationError(f"synthetic source cannot encode {image!r}")
        _, c, s = image_id.split("-")
        return self.world.image_features(int(c), int(s))
