"""Dataset manifests, the object-size filter, annotation attachment, and
GZSL/ZSL split construction with audited disjointness.

Manifests are TSV, one record per line, streamable and diffable::

    id<TAB>path<TAB>label<TAB>width<TAB>height<TAB>box<TAB>keypoints

where box is "x1,y1,x2,y2" in pixels (or empty) and keypoints is a
";"-joined list of "part:x:y:v" entries (v is 0/1 visibility).
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .encoders import TeacherAnnotation
from .errors import FormatError, NotFoundError, ValidationError

MANIFEST_COLUMNS = ("id", "path", "label", "width", "height", "box", "keypoints")


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visible: bool


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    label: str
    width: int
    height: int
    box: tuple[float, float, float, float] | None = None  # pixel corners x1,y1,x2,y2
    keypoints: dict[str, Keypoint] = field(default_factory=dict)
    teacher: TeacherAnnotation | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"record {self.id!r} has non-positive dimensions")
        for part, kp in self.keypoints.items():
            if kp.visible and not (0 <= kp.x <= self.width and 0 <= kp.y <= self.height):
                raise ValidationError(
                    f"record {self.id!r}: visible keypoint for {part!r} at "
                    f"({kp.x}, {kp.y}) is outside the {self.width}x{self.height} image"
                )

    def box_size(self) -> tuple[float, float] | None:
        if self.box is None:
            return None
        x1, y1, x2, y2 = self.box
        return (x2 - x1, y2 - y1)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    classes: tuple[str, ...]

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValidationError("record ids must be unique")
        known = set(self.classes)
        for r in self.records:
            if r.label not in known:
                raise ValidationError(f"record {r.id!r} has label {r.label!r} not in class list")

    def __len__(self) -> int:
        return len(self.records)

    def record_ids(self) -> set[str]:
        return {r.id for r in self.records}

    @classmethod
    def from_records(cls, records) -> "DatasetManifest":
        records = tuple(sorted(records, key=lambda r: r.id))
        classes = tuple(sorted({r.label for r in records}))
        return cls(records, classes)


def _format_box(box) -> str:
    return "" if box is None else ",".join(f"{v:g}" for v in box)


def _format_keypoints(kps: dict[str, Keypoint]) -> str:
    return ";".join(f"{part}:{kp.x:g}:{kp.y:g}:{int(kp.visible)}"
                    for part, kp in kps.items())


def save_manifest(manifest: DatasetManifest) -> str:
    out = io.StringIO()
    out.write("\t".join(MANIFEST_COLUMNS) + "\n")
    for r in manifest.records:
        out.write("\t".join([
            r.id, r.path, r.label, str(r.width), str(r.height),
            _format_box(r.box), _format_keypoints(r.keypoints),
        ]) + "\n")
    return out.getvalue()


def save_manifest_file(manifest: DatasetManifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(save_manifest(manifest))


def load_manifest(text: str) -> DatasetManifest:
    lines = text.splitlines()
    if not lines:
        raise FormatError("manifest is empty")
    header = tuple(lines[0].rstrip("\n").split("\t"))
    if header != MANIFEST_COLUMNS:
        raise FormatError(f"manifest header {header!r} != expected {MANIFEST_COLUMNS!r}")
    records = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != len(MANIFEST_COLUMNS):
            raise FormatError(f"line {line_no}: expected {len(MANIFEST_COLUMNS)} columns, "
                              f"got {len(cols)}")
        rid, path, label, width, height, box_s, kp_s = cols
        try:
            box = tuple(float(v) for v in box_s.split(",")) if box_s else None
            if box is not None and len(box) != 4:
                raise ValueError("box needs 4 values")
            keypoints = {}
            if kp_s:
                for entry in kp_s.split(";"):
                    part, x, y, v = entry.split(":")
                    keypoints[part] = Keypoint(float(x), float(y), bool(int(v)))
            records.append(ImageRecord(
                id=rid, path=path, label=label,
                width=int(width), height=int(height),
                box=box, keypoints=keypoints,
            ))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"line {line_no}: {exc}") from exc
    return DatasetManifest.from_records(records)


def load_manifest_file(path) -> DatasetManifest:
    with open(path, encoding="utf-8") as fh:
        return load_manifest(fh.read())


def manifest_hash(manifest: DatasetManifest) -> str:
    return hashlib.sha256(save_manifest(manifest).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# filtering


@dataclass(frozen=True)
class FilterOutcome:
    manifest: DatasetManifest
    kept: int
    dropped_small: int
    dropped_missing: int


def filter_by_box_detailed(manifest: DatasetManifest, min_w: float, min_h: float,
                           missing: str = "drop") -> FilterOutcome:
    """Keep records whose object box is at least min_w x min_h pixels
    (inclusive). Records without a box follow the `missing` policy."""
    if missing not in ("drop", "error"):
        raise ValidationError(f"unknown missing-box policy {missing!r}")
    kept, dropped_small, dropped_missing = [], 0, 0
    for r in manifest.records:
        size = r.box_size()
        if size is None:
            if missing == "error":
                raise ValidationError(f"record {r.id!r} has no object box")
            dropped_missing += 1
            continue
        if size[0] >= min_w and size[1] >= min_h:
            kept.append(r)
        else:
            dropped_small += 1
    filtered = DatasetManifest(tuple(kept), manifest.classes)
    return FilterOutcome(filtered, len(kept), dropped_small, dropped_missing)


def filter_by_box(manifest: DatasetManifest, min_w: float, min_h: float,
                  missing: str = "drop") -> DatasetManifest:
    return filter_by_box_detailed(manifest, min_w, min_h, missing).manifest


def exclude_classes(manifest: DatasetManifest, excluded) -> DatasetManifest:
    """Drop whole classes via an exclusion list (e.g. ambiguous general
    labels that shadow fine-grained species)."""
    excluded = set(excluded)
    unknown = excluded - set(manifest.classes)
    if unknown:
        raise NotFoundError(f"exclusion list names unknown classes: {sorted(unknown)[:5]}")
    kept = tuple(r for r in manifest.records if r.label not in excluded)
    classes = tuple(c for c in manifest.classes if c not in excluded)
    return DatasetManifest(kept, classes)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    name: str
    train_ids: frozenset[str]
    val_ids: frozenset[str]
    test_ids: frozenset[str]
    seen_classes: frozenset[str]
    unseen_classes: frozenset[str]

    def __post_init__(self):
        if self.train_ids & self.test_ids or self.train_ids & self.val_ids \
                or self.val_ids & self.test_ids:
            raise ValidationError("split record sets must be pairwise disjoint")


def make_gzsl_split(manifest: DatasetManifest, protected_test_ids) -> SplitSpec:
    """Reserve the given ids as the test set; everything else trains.
    Classes may overlap between the two sides (generalized zero-shot)."""
    protected = set(protected_test_ids)
    all_ids = manifest.record_ids()
    missing = protected - all_ids
    if missing:
        raise NotFoundError(f"protected ids not in manifest: {sorted(missing)[:5]}")
    if not protected:
        raise ValidationError("protected test-id set is empty")
    train = all_ids - protected
    if not train:
        raise ValidationError("no training records remain after protecting the test set")
    by_id = {r.id: r for r in manifest.records}
    train_classes = {by_id[i].label for i in train}
    test_classes = {by_id[i].label for i in protected}
    return SplitSpec(
        name="gzsl",
        train_ids=frozenset(train),
        val_ids=frozenset(),
        test_ids=frozenset(protected),
        seen_classes=frozenset(train_classes),
        unseen_classes=frozenset(test_classes - train_classes),
    )


def make_zsl_split(manifest: DatasetManifest, unseen_classes) -> SplitSpec:
    """Train on classes outside `unseen_classes`; test only on them."""
    unseen = set(unseen_classes)
    known = set(manifest.classes)
    if not unseen:
        raise ValidationError("unseen class set is empty")
    unknown = unseen - known
    if unknown:
        raise NotFoundError(f"unseen classes not in manifest: {sorted(unknown)[:5]}")
    if unseen == known:
        raise ValidationError("unseen classes cannot cover every class")
    train = {r.id for r in manifest.records if r.label not in unseen}
    test = {r.id for r in manifest.records if r.label in unseen}
    return SplitSpec(
        name="zsl",
        train_ids=frozenset(train),
        val_ids=frozenset(),
        test_ids=frozenset(test),
        seen_classes=frozenset(known - unseen),
        unseen_classes=frozenset(unseen),
    )


def audit_zsl_disjointness(manifest: DatasetManifest, split: SplitSpec):
    """Post-condition check over the actual record labels, not the split's
    declared intent."""
    by_id = {r.id: r for r in manifest.records}
    train_labels = {by_id[i].label for i in split.train_ids}
    overlap = train_labels & split.unseen_classes
    if overlap:
        raise ValidationError(f"ZSL audit failed: unseen classes in training: {sorted(overlap)}")
    test_labels = {by_id[i].label for i in split.test_ids}
    stray = test_labels - split.unseen_classes
    if stray:
        raise ValidationError(f"ZSL audit failed: test records outside unseen classes: {sorted(stray)}")
    return True


def make_super_category_splits(manifest: DatasetManifest, super_map: dict[str, str],
                               n_unseen: int, seed: int) -> tuple[SplitSpec, SplitSpec]:
    """Easy/hard zero-shot splits from a class -> super-category map.

    The easy split's unseen classes each share a super-category with some
    training class; the hard split removes whole super-categories so its
    unseen classes share none.
    """
    classes = list(manifest.classes)
    missing = [c for c in classes if c not in super_map]
    if missing:
        raise NotFoundError(f"classes missing from super-category map: {missing[:5]}")
    if not 1 <= n_unseen < len(classes):
        raise ValidationError("n_unseen must leave at least one seen class")
    rng = np.random.default_rng(seed)

    by_super: dict[str, list[str]] = {}
    for c in classes:
        by_super.setdefault(super_map[c], []).append(c)

    # easy: only pick unseen classes from super-categories with >= 2 classes,
    # never draining a super-category completely
    shared_pool = [c for sup, cs in sorted(by_super.items()) if len(cs) >= 2 for c in cs]
    easy_unseen: list[str] = []
    remaining: dict[str, int] = {sup: len(cs) for sup, cs in by_super.items()}
    for idx in rng.permutation(len(shared_pool)):
        c = shared_pool[idx]
        if len(easy_unseen) >= n_unseen:
            break
        if remaining[super_map[c]] >= 2:
            easy_unseen.append(c)
            remaining[super_map[c]] -= 1
    if len(easy_unseen) < n_unseen:
        raise ValidationError("not enough shared super-categories for the easy split")

    # hard: remove whole super-categories until n_unseen classes are covered
    supers = sorted(by_super)
    hard_unseen: list[str] = []
    for idx in rng.permutation(len(supers)):
        sup = supers[idx]
        if len(hard_unseen) >= n_unseen:
            break
        if len(hard_unseen) + len(by_super[sup]) <= max(n_unseen, len(classes) - 1):
            hard_unseen.extend(by_super[sup])
    if not hard_unseen or len(hard_unseen) >= len(classes):
        raise ValidationError("could not build a hard split from the super-category map")

    easy = replace(make_zsl_split(manifest, easy_unseen), name="scs-easy")
    hard = replace(make_zsl_split(manifest, hard_unseen), name="sce-hard")
    return easy, hard


# ---------------------------------------------------------------------------
# annotation attachment


@dataclass(frozen=True)
class AttachOutcome:
    manifest: DatasetManifest
    matched: int
    unmatched_ids: tuple[str, ...]


def attach_annotations_detailed(manifest: DatasetManifest, source) -> AttachOutcome:
    """Attach TeacherAnnotation and/or keypoints keyed by record id.

    `source` is a mapping or an iterable of (id, annotation) pairs; each
    annotation is a dict with optional "teacher" (TeacherAnnotation) and
    "keypoints" ({part: Keypoint}) entries. Ids may appear at most once.
    """
    pairs = source.items() if hasattr(source, "items") else source
    collected: dict[str, dict] = {}
    for rid, ann in pairs:
        if rid in collected:
            raise ValidationError(f"duplicate annotation for id {rid!r}")
        collected[rid] = ann
    source = collected
    new_records = []
    matched = 0
    manifest_ids = manifest.record_ids()
    for r in manifest.records:
        ann = source.get(r.id)
        if ann is None:
            new_records.append(r)
            continue
        matched += 1
        new_records.append(replace(
            r,
            teacher=ann.get("teacher", r.teacher),
            keypoints=dict(ann.get("keypoints", r.keypoints)),
        ))
    unmatched = tuple(sorted(set(source) - manifest_ids))
    return AttachOutcome(DatasetManifest(tuple(new_records), manifest.classes),
                         matched, unmatched)


def attach_annotations(manifest: DatasetManifest, source: dict) -> DatasetManifest:
    return attach_annotations_detailed(manifest, source).manifest


# ---------------------------------------------------------------------------
# small text formats


def load_class_list(text: str) -> list[str]:
    """Plain text, one class per line; blank lines and #-comments ignored."""
    out = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    return out


def load_super_category_map(text: str) -> dict[str, str]:
    """Tab-separated "class<TAB>super_category", one entry per line."""
    out: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"line {line_no}: expected 'class<TAB>super_category'")
        out[parts[0]] = parts[1]
    return out


def load_keypoint_merge_table(text: str) -> dict[str, str]:
    """Tab-separated "source_part<TAB>merged_part" (e.g. left/right collapses)."""
    return load_super_category_map(text)


def default_keypoint_merge_table() -> dict[str, str]:
    """The shipped (editable) merge of the 15 raw bird keypoints into 12 parts."""
    from importlib import resources

    text = resources.files("peeb").joinpath("data_files/cub_keypoint_merge.tsv").read_text()
    return load_keypoint_merge_table(text)


def apply_keypoint_merge(keypoints: dict[str, Keypoint],
                         table: dict[str, str]) -> dict[str, Keypoint]:
    """Collapse raw keypoints to the merged vocabulary. When several source
    points merge into one part, the first visible one wins."""
    merged: dict[str, Keypoint] = {}
    for part, kp in keypoints.items():
        target = table.get(part, part)
        if target not in merged or (kp.visible and not merged[target].visible):
            merged[target] = kp
    return merged
