"""Encoder providers, the frozen teacher contract, and the embedding cache.

Text and image encoders are pluggable providers behind small protocols. The
hash-based stubs below keep tests and desk-scale runs deterministic without
any pretrained checkpoint. The text encoder is frozen by contract: no
training stage ever updates it.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .boxes import BoundingBox
from .errors import ConfigurationError, FormatError, PeebError, ValidationError

EMBEDDING_MAGIC = b"PEEBEMB1"


@runtime_checkable
class TextEncoder(Protocol):
    """Maps strings to fixed-dimension embeddings. Deterministic and frozen."""

    dim: int
    provider_id: str

    def encode_text(self, texts: Sequence[str]) -> np.ndarray: ...


@runtime_checkable
class ImageEncoder(Protocol):
    """Maps an image reference to an (n_patches, dim) patch embedding matrix."""

    n_patches: int
    dim: int
    provider_id: str

    def encode_image(self, image) -> np.ndarray: ...


def _hash_to_unit_vector(key: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    vec = rng.standard_normal(dim)
    return (vec / np.linalg.norm(vec)).astype(np.float32)


class HashTextEncoder:
    """Deterministic stand-in encoder: seeded hash of the text expanded to a
    unit-norm vector. Distinct strings map to distinct directions."""

    def __init__(self, dim: int = 32, seed: int = 0):
        if dim <= 0:
            raise ValidationError("text embedding dim must be positive")
        self.dim = dim
        self.seed = seed
        self.provider_id = f"hash-text-d{dim}-s{seed}"

    def encode_text(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            raise ValidationError("encode_text requires at least one string")
        rows = [_hash_to_unit_vector(f"text:{self.seed}:{t}", self.dim) for t in texts]
        return np.stack(rows, axis=0)


class TableTextEncoder:
    """Lookup-table encoder with a fallback for unseen strings.

    Used by the synthetic world: known descriptor strings resolve to
    generator-defined embeddings, anything else (e.g. a user edit) falls back
    to the hash encoder so edited phrases still embed deterministically.
    """

    def __init__(self, table: dict[str, np.ndarray], dim: int, fallback: TextEncoder | None = None):
        self.table = {k: np.asarray(v, dtype=np.float32) for k, v in table.items()}
        self.dim = dim
        self.fallback = fallback or HashTextEncoder(dim=dim)
        digest = hashlib.sha256(json.dumps(sorted(self.table)).encode()).hexdigest()[:10]
        self.provider_id = f"table-text-d{dim}-{digest}"

    def encode_text(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            raise ValidationError("encode_text requires at least one string")
        rows = []
        for t in texts:
            if t in self.table:
                rows.append(self.table[t])
            else:
                rows.append(self.fallback.encode_text([t])[0])
        return np.stack(rows, axis=0)


class HashImageEncoder:
    """Deterministic image featureizer for tests: decodes and resizes the
    image, then expands a content hash into patch vectors."""

    def __init__(self, n_patches: int = 16, dim: int = 32, input_size: int = 224, seed: int = 0):
        if n_patches <= 0 or dim <= 0:
            raise ValidationError("patch count and dim must be positive")
        self.n_patches = n_patches
        self.dim = dim
        self.input_size = input_size
        self.seed = seed
        self.provider_id = f"hash-image-n{n_patches}-d{dim}-r{input_size}-s{seed}"

    def encode_image(self, image) -> np.ndarray:
        content = self._load_bytes(image)
        digest = hashlib.sha256(f"img:{self.seed}:".encode() + content).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        patches = rng.standard_normal((self.n_patches, self.dim)).astype(np.float32)
        norms = np.linalg.norm(patches, axis=1, keepdims=True)
        return patches / norms

    def _load_bytes(self, image) -> bytes:
        from PIL import Image, UnidentifiedImageError

        if isinstance(image, (str, os.PathLike)):
            try:
                img = Image.open(image)
            except (FileNotFoundError, UnidentifiedImageError) as exc:
                raise PeebError(f"cannot decode image {image!r}: {exc}") from exc
        elif isinstance(image, (bytes, bytearray)):
            try:
                img = Image.open(io.BytesIO(image))
            except UnidentifiedImageError as exc:
                raise PeebError(f"cannot decode image bytes: {exc}") from exc
        else:
            img = image
        img = img.convert("RGB").resize((self.input_size, self.input_size))
        return img.tobytes()


@dataclass(frozen=True)
class TeacherAnnotation:
    """Frozen-teacher targets for one image: the chosen patch index per part,
    one box per part, and the whole-object box."""

    selection: tuple[int, ...]
    boxes: tuple[BoundingBox, ...]
    object_box: BoundingBox

    def __post_init__(self):
        if len(self.selection) != len(self.boxes):
            raise ValidationError("selection and boxes must have one entry per part")
        object.__setattr__(self, "selection", tuple(int(i) for i in self.selection))
        object.__setattr__(self, "boxes", tuple(self.boxes))


@runtime_checkable
class TeacherProvider(Protocol):
    def annotate(self, image_id: str) -> TeacherAnnotation: ...


class RecordedTeacher:
    """Teacher backed by a recorded-annotations file: one JSON record per
    image id with selection indices and center-format boxes."""

    def __init__(self, annotations: dict[str, TeacherAnnotation]):
        self._annotations = dict(annotations)

    @classmethod
    def from_file(cls, path) -> "RecordedTeacher":
        annotations: dict[str, TeacherAnnotation] = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"bad annotation record at line {line_no}: {exc.msg}") from exc
                image_id = str(rec["id"])
                if image_id in annotations:
                    raise ValidationError(f"duplicate annotation for image id {image_id!r}")
                annotations[image_id] = TeacherAnnotation(
                    selection=tuple(rec["selection"]),
                    boxes=tuple(BoundingBox(*b) for b in rec["boxes"]),
                    object_box=BoundingBox(*rec["object_box"]),
                )
        return cls(annotations)

    def annotate(self, image_id: str) -> TeacherAnnotation:
        if image_id not in self._annotations:
            raise ConfigurationError(f"no recorded teacher annotation for image id {image_id!r}")
        return self._annotations[image_id]

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._annotations

    def __len__(self) -> int:
        return len(self._annotations)


def save_recorded_annotations(path, annotations: dict[str, TeacherAnnotation]):
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, ann in annotations.items():
            rec = {
                "id": image_id,
                "selection": list(ann.selection),
                "boxes": [list(b.as_tuple()) for b in ann.boxes],
                "object_box": list(ann.object_box.as_tuple()),
            }
            fh.write(json.dumps(rec) + "\n")


def write_embedding_file(path, matrix: np.ndarray):
    """Binary container: magic 'PEEBEMB1', LE u32 rows/dim, float32 row-major."""
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    if matrix.ndim != 2:
        raise ValidationError("embedding payload must be a 2-D matrix")
    payload = EMBEDDING_MAGIC + struct.pack("<II", matrix.shape[0], matrix.shape[1])
    payload += matrix.astype("<f4").tobytes()
    # atomic: write temp in the same directory, then rename over the target
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_embedding_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(len(EMBEDDING_MAGIC) + 8)
        if len(header) < len(EMBEDDING_MAGIC) + 8 or header[: len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
            raise FormatError(f"{path} is not an embedding cache file")
        rows, dim = struct.unpack("<II", header[len(EMBEDDING_MAGIC):])
        data = np.frombuffer(fh.read(rows * dim * 4), dtype="<f4")
    if data.size != rows * dim:
        raise FormatError(f"{path} is truncated")
    return data.reshape(rows, dim).copy()


class EmbeddingCache:
    """On-disk embedding cache keyed by (provider id, content hash)."""

    def __init__(self, directory):
        self.directory = os.fspath(directory)
        os.makedirs(self.directory, exist_ok=True)

    def _path(self, provider_id: str, content_key: str) -> str:
        key = hashlib.sha256(f"{provider_id}\x00{content_key}".encode()).hexdigest()
        return os.path.join(self.directory, f"{key}.peebemb")

    def get(self, provider_id: str, content_key: str) -> np.ndarray | None:
        path = self._path(provider_id, content_key)
        if not os.path.exists(path):
            return None
        return read_embedding_file(path)

    def put(self, provider_id: str, content_key: str, matrix: np.ndarray):
        write_embedding_file(self._path(provider_id, content_key), matrix)


class CachedTextEncoder:
    """Wraps a text encoder with the on-disk cache; hits are bitwise equal to
    cold calls because the payload is stored losslessly as float32."""

    def __init__(self, inner: TextEncoder, cache: EmbeddingCache):
        self.inner = inner
        self.cache = cache
        self.dim = inner.dim
        self.provider_id = inner.provider_id

    def encode_text(self, texts: Sequence[str]) -> np.ndarray:
        key = hashlib.sha256("\x1f".join(texts).encode("utf-8")).hexdigest()
        hit = self.cache.get(self.provider_id, key)
        if hit is not None:
            return hit
        out = self.inner.encode_text(texts)
        self.cache.put(self.provider_id, key, out)
        return out


def text_encoder_fingerprint(encoder: TextEncoder, probes: Sequence[str] | None = None) -> str:
    """Behavioral fingerprint used to audit the frozen-encoder invariant."""
    probes = list(probes) if probes is not None else ["crown", "wings", "a small probe phrase"]
    out = encoder.encode_text(probes)
    return hashlib.sha256(out.tobytes()).hexdigest()


def normalized_object_box(box_w_px: float, box_h_px: float, image_w: float, image_h: float,
                          cx_px: float | None = None, cy_px: float | None = None) -> BoundingBox:
    """Normalize a pixel-space object box; defaults to the image center."""
    cx = (cx_px if cx_px is not None else image_w / 2.0) / image_w
    cy = (cy_px if cy_px is not None else image_h / 2.0) / image_h
    return BoundingBox(cx, cy, box_w_px / image_w, box_h_px / image_h)
