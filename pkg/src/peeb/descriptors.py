"""Part vocabulary and the editable class-descriptor library.

A library maps each class name to one short phrase per named part. The
library is the only class-specific state in the whole classifier, so adding
or editing classes is pure data manipulation: every function here returns a
new library and never mutates its input.

File format (UTF-8 JSON)::

    {"parts": ["back", "beak", ...],
     "classes": {"Cardinal": {"back": "vibrant red feathers", ...}, ...}}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConflictError, FormatError, NotFoundError, ValidationError

BIRD_PARTS = (
    "back", "beak", "belly", "breast", "crown", "forehead",
    "eyes", "legs", "wings", "nape", "tail", "throat",
)
DOG_PARTS = ("head", "body", "legs", "tail", "muzzle", "ears")


@dataclass(frozen=True)
class PartVocabulary:
    """Ordered, unique part names. The order fixes the part index used by
    selection, boxes, and score layout everywhere downstream."""

    parts: tuple[str, ...]

    def __post_init__(self):
        if not self.parts:
            raise ValidationError("part vocabulary must be non-empty")
        if len(set(self.parts)) != len(self.parts):
            raise ValidationError("part names must be unique")
        object.__setattr__(self, "parts", tuple(self.parts))

    def __len__(self) -> int:
        return len(self.parts)

    def __iter__(self):
        return iter(self.parts)

    def index(self, part: str) -> int:
        try:
            return self.parts.index(part)
        except ValueError:
            raise NotFoundError(f"unknown part {part!r}") from None


@dataclass(frozen=True)
class DescriptorLibrary:
    """Immutable snapshot of per-class part descriptors.

    ``classes`` maps class name -> {part name -> phrase}; every class carries
    exactly the vocabulary's parts. Class names are case-sensitive exact keys.
    """

    vocabulary: PartVocabulary
    classes: dict[str, dict[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        for name, phrases in self.classes.items():
            _validate_descriptor_set(self.vocabulary, name, phrases)

    @property
    def class_names(self) -> list[str]:
        return list(self.classes.keys())

    def __len__(self) -> int:
        return len(self.classes)

    def phrases_for(self, class_name: str) -> dict[str, str]:
        if class_name not in self.classes:
            raise NotFoundError(f"unknown class {class_name!r}")
        return dict(self.classes[class_name])


def _validate_descriptor_set(vocabulary: PartVocabulary, class_name: str, phrases: dict[str, str]):
    for part in vocabulary:
        if part not in phrases:
            raise ValidationError(f"class {class_name!r} is missing part {part!r}")
        if not isinstance(phrases[part], str) or not phrases[part].strip():
            raise ValidationError(f"class {class_name!r} has an empty phrase for part {part!r}")
    extra = set(phrases) - set(vocabulary.parts)
    if extra:
        raise ValidationError(
            f"class {class_name!r} has phrases for unknown parts {sorted(extra)!r}"
        )


def load_library(source: str) -> DescriptorLibrary:
    """Parse descriptor-file content into a validated library."""
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise FormatError(f"descriptor file is not valid JSON (line {exc.lineno}): {exc.msg}") from exc
    if not isinstance(doc, dict) or "parts" not in doc or "classes" not in doc:
        raise FormatError('descriptor file must be an object with "parts" and "classes" keys')
    parts = doc["parts"]
    if not isinstance(parts, list) or not all(isinstance(p, str) for p in parts):
        raise FormatError('"parts" must be a list of strings')
    classes = doc["classes"]
    if not isinstance(classes, dict):
        raise FormatError('"classes" must be an object of class name -> part phrases')
    vocabulary = PartVocabulary(tuple(parts))
    cleaned: dict[str, dict[str, str]] = {}
    for name, phrases in classes.items():
        if not isinstance(phrases, dict):
            raise FormatError(f"class {name!r} must map part names to phrases")
        cleaned[name] = {str(k): str(v) for k, v in phrases.items()}
    return DescriptorLibrary(vocabulary, cleaned)


def load_library_file(path) -> DescriptorLibrary:
    with open(path, encoding="utf-8") as fh:
        return load_library(fh.read())


def save_library(lib: DescriptorLibrary) -> str:
    """Serialize canonically: parts in vocabulary order, phrases keyed per part order."""
    doc = {
        "parts": list(lib.vocabulary.parts),
        "classes": {
            name: {part: phrases[part] for part in lib.vocabulary}
            for name, phrases in lib.classes.items()
        },
    }
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def save_library_file(lib: DescriptorLibrary, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(save_library(lib))


def edit_descriptor(
    lib: DescriptorLibrary, class_name: str, part: str, phrase: str
) -> DescriptorLibrary:
    """Replace one phrase; everything else (including model parameters) is untouched."""
    if class_name not in lib.classes:
        raise NotFoundError(f"unknown class {class_name!r}")
    if part not in lib.vocabulary.parts:
        raise NotFoundError(f"unknown part {part!r}")
    if not phrase or not phrase.strip():
        raise ValidationError(f"phrase for ({class_name!r}, {part!r}) must be non-empty")
    classes = {name: dict(phrases) for name, phrases in lib.classes.items()}
    classes[class_name][part] = phrase
    return DescriptorLibrary(lib.vocabulary, classes)


def clone_class(lib: DescriptorLibrary, src: str, new: str) -> DescriptorLibrary:
    """Duplicate src's phrases under a new class name."""
    if src not in lib.classes:
        raise NotFoundError(f"unknown class {src!r}")
    if new in lib.classes:
        raise ConflictError(f"class {new!r} already exists")
    if not new or not new.strip():
        raise ValidationError("new class name must be non-empty")
    classes = {name: dict(phrases) for name, phrases in lib.classes.items()}
    classes[new] = dict(lib.classes[src])
    return DescriptorLibrary(lib.vocabulary, classes)


def add_class(lib: DescriptorLibrary, name: str, phrases: dict[str, str]) -> DescriptorLibrary:
    if name in lib.classes:
        raise ConflictError(f"class {name!r} already exists")
    classes = {cname: dict(p) for cname, p in lib.classes.items()}
    classes[name] = dict(phrases)
    return DescriptorLibrary(lib.vocabulary, classes)


def delete_class(lib: DescriptorLibrary, name: str) -> DescriptorLibrary:
    if name not in lib.classes:
        raise NotFoundError(f"unknown class {name!r}")
    classes = {cname: dict(p) for cname, p in lib.classes.items() if cname != name}
    return DescriptorLibrary(lib.vocabulary, classes)


def randomize_descriptors(lib: DescriptorLibrary, seed: int) -> DescriptorLibrary:
    """Swap phrases across classes, independently per part.

    Each part's phrases are permuted over the classes with a seeded
    permutation, so per part the multiset of phrases is exactly preserved.
    """
    names = lib.class_names
    if len(names) < 2:
        raise ValidationError("randomization needs at least 2 classes")
    classes = {name: dict(phrases) for name, phrases in lib.classes.items()}
    for part_index, part in enumerate(lib.vocabulary):
        rng = np.random.default_rng([seed, part_index])
        perm = rng.permutation(len(names))
        part_phrases = [lib.classes[name][part] for name in names]
        for dst, src in enumerate(perm):
            classes[names[dst]][part] = part_phrases[src]
    return DescriptorLibrary(lib.vocabulary, classes)


def diff_libraries(old: DescriptorLibrary, new: DescriptorLibrary) -> dict:
    """Summarize what changed between two snapshots (for edit responses/UI)."""
    old_names = set(old.classes)
    new_names = set(new.classes)
    changed = []
    for name in sorted(old_names & new_names):
        for part in new.vocabulary:
            if old.classes[name][part] != new.classes[name][part]:
                changed.append({"class_name": name, "part": part,
                                "before": old.classes[name][part],
                                "after": new.classes[name][part]})
    return {
        "added_classes": sorted(new_names - old_names),
        "removed_classes": sorted(old_names - new_names),
        "changed_phrases": changed,
    }
