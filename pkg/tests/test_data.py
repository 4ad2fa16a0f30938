import numpy as np
import pytest

from peeb.boxes import BoundingBox
from peeb.data import (
    DatasetManifest,
    ImageRecord,
    Keypoint,
    apply_keypoint_merge,
    attach_annotations,
    attach_annotations_detailed,
    audit_zsl_disjointness,
    default_keypoint_merge_table,
    filter_by_box,
    filter_by_box_detailed,
    load_class_list,
    load_manifest,
    load_super_category_map,
    make_gzsl_split,
    make_super_category_splits,
    make_zsl_split,
    manifest_hash,
    save_manifest,
)
from peeb.encoders import TeacherAnnotation
from peeb.errors import FormatError, NotFoundError, ValidationError


def record(i, label="sparrow", box=(0, 0, 200, 200), w=500, h=400, keypoints=None):
    return ImageRecord(id=f"img-{i:03d}", path=f"/data/{i}.jpg", label=label,
                       width=w, height=h, box=box, keypoints=keypoints or {})


def manifest(n=10, labels=("sparrow", "finch")):
    return DatasetManifest.from_records(
        [record(i, label=labels[i % len(labels)]) for i in range(n)]
    )


def random_manifest(rng, n_classes=None, n_records=None):
    n_classes = n_classes or int(rng.integers(3, 8))
    n_records = n_records or int(rng.integers(n_classes, 40))
    labels = [f"class-{c}" for c in range(n_classes)]
    records = [record(i, label=labels[int(rng.integers(0, n_classes))],
                      box=(0, 0, float(rng.integers(20, 400)), float(rng.integers(20, 400))))
               for i in range(n_records)]
    # guarantee every class appears
    for c, label in enumerate(labels):
        records.append(record(1000 + c, label=label))
    return DatasetManifest.from_records(records)


class TestRecords:
    def test_dimensions_must_be_positive(self):
        with pytest.raises(ValidationError):
            ImageRecord(id="x", path="p", label="l", width=0, height=10)

    def test_visible_keypoint_must_be_inside(self):
        with pytest.raises(ValidationError, match="img-bad"):
            ImageRecord(id="img-bad", path="p", label="l", width=100, height=100,
                        keypoints={"crown": Keypoint(150, 50, True)})

    def test_invisible_keypoint_may_be_outside(self):
        rec = ImageRecord(id="x", path="p", label="l", width=100, height=100,
                          keypoints={"crown": Keypoint(-1, -1, False)})
        assert not rec.keypoints["crown"].visible


class TestManifestIO:
    def test_roundtrip(self):
        m = DatasetManifest.from_records([
            record(0, keypoints={"crown": Keypoint(10, 20, True),
                                 "tail": Keypoint(0, 0, False)}),
            record(1, label="finch", box=None),
        ])
        text = save_manifest(m)
        again = load_manifest(text)
        assert again == m
        assert manifest_hash(again) == manifest_hash(m)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValidationError):
            DatasetManifest((record(1), record(1)), ("sparrow",))

    def test_bad_header(self):
        with pytest.raises(FormatError):
            load_manifest("not\ta\tmanifest\n")

    def test_bad_row(self):
        m = manifest(2)
        text = save_manifest(m) + "only-three\tcolumns\there\n"
        with pytest.raises(FormatError, match="line"):
            load_manifest(text)

    def test_hash_changes_with_content(self):
        assert manifest_hash(manifest(3)) != manifest_hash(manifest(4))


class TestFilter:
    def test_strictly_smaller_box_removed(self):
        m = DatasetManifest.from_records([record(0, box=(0, 0, 99, 150))])
        assert len(filter_by_box(m, 100, 100)) == 0

    def test_threshold_is_inclusive(self):
        m = DatasetManifest.from_records([record(0, box=(0, 0, 100, 100))])
        assert len(filter_by_box(m, 100, 100)) == 1

    def test_nesting(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = random_manifest(rng)
            loose = filter_by_box(m, 100, 100)
            strict = filter_by_box(m, 200, 200)
            assert strict.record_ids() <= loose.record_ids()

    def test_idempotent(self):
        m = random_manifest(np.random.default_rng(1))
        once = filter_by_box(m, 100, 100)
        twice = filter_by_box(once, 100, 100)
        assert once == twice

    def test_missing_box_policies(self):
        m = DatasetManifest.from_records([record(0, box=None), record(1)])
        outcome = filter_by_box_detailed(m, 10, 10, missing="drop")
        assert outcome.dropped_missing == 1
        assert outcome.kept == 1
        with pytest.raises(ValidationError):
            filter_by_box(m, 10, 10, missing="error")

    def test_exclusion_list_drops_whole_classes(self):
        from peeb.data import exclude_classes

        m = manifest(10, labels=("Cardinal", "Yellow Cardinal", "Northern Cardinal"))
        out = exclude_classes(m, ["Cardinal"])  # general label shadows the fine-grained ones
        assert "Cardinal" not in out.classes
        assert all(r.label != "Cardinal" for r in out.records)
        with pytest.raises(NotFoundError):
            exclude_classes(m, ["Dodo"])


class TestGzslSplit:
    def test_counts(self):
        m = manifest(10)
        protected = {f"img-{i:03d}" for i in range(3)}
        split = make_gzsl_split(m, protected)
        assert len(split.train_ids) == 7
        assert len(split.test_ids) == 3

    def test_empty_protected_rejected(self):
        with pytest.raises(ValidationError):
            make_gzsl_split(manifest(5), set())

    def test_unknown_protected_rejected(self):
        with pytest.raises(NotFoundError):
            make_gzsl_split(manifest(5), {"nope"})

    def test_no_intersection_on_random_manifests(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            m = random_manifest(rng)
            ids = sorted(m.record_ids())
            take = rng.integers(1, len(ids))
            protected = set(rng.choice(ids, size=take, replace=False).tolist())
            if protected == set(ids):
                continue
            split = make_gzsl_split(m, protected)
            assert not (split.train_ids & split.test_ids)


class TestZslSplit:
    def test_train_labels_exclude_unseen(self):
        m = manifest(9, labels=("A", "B", "C"))
        split = make_zsl_split(m, {"C"})
        by_id = {r.id: r for r in m.records}
        assert {by_id[i].label for i in split.train_ids} <= {"A", "B"}
        assert {by_id[i].label for i in split.test_ids} == {"C"}

    def test_empty_or_full_unseen_rejected(self):
        m = manifest(6, labels=("A", "B"))
        with pytest.raises(ValidationError):
            make_zsl_split(m, set())
        with pytest.raises(ValidationError):
            make_zsl_split(m, {"A", "B"})

    def test_disjointness_audit_over_random_manifests(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            m = random_manifest(rng)
            classes = list(m.classes)
            take = rng.integers(1, len(classes))
            unseen = set(rng.choice(classes, size=take, replace=False).tolist())
            split = make_zsl_split(m, unseen)
            assert audit_zsl_disjointness(m, split)

    def test_audit_catches_leakage(self):
        from dataclasses import replace

        m = manifest(9, labels=("A", "B", "C"))
        split = make_zsl_split(m, {"C"})
        # move one unseen-class record into training: ids stay disjoint but
        # the class-disjointness guarantee is now violated
        moved = next(iter(split.test_ids))
        leaked = replace(split,
                         train_ids=frozenset(split.train_ids | {moved}),
                         test_ids=frozenset(split.test_ids - {moved}))
        with pytest.raises(ValidationError, match="audit failed"):
            audit_zsl_disjointness(m, leaked)


class TestSuperCategorySplits:
    def super_map(self):
        # two supers with multiple classes, one singleton super
        return {"A1": "warbler", "A2": "warbler", "B1": "gull", "B2": "gull", "C1": "owl"}

    def test_easy_shares_hard_does_not(self):
        labels = tuple(self.super_map())
        m = manifest(25, labels=labels)
        easy, hard = make_super_category_splits(m, self.super_map(), n_unseen=1, seed=0)
        smap = self.super_map()
        train_supers_easy = {smap[c] for c in easy.seen_classes}
        for c in easy.unseen_classes:
            assert smap[c] in train_supers_easy
        train_supers_hard = {smap[c] for c in hard.seen_classes}
        for c in hard.unseen_classes:
            assert smap[c] not in train_supers_hard

    def test_reproducible_from_seed(self):
        labels = tuple(self.super_map())
        m = manifest(25, labels=labels)
        a = make_super_category_splits(m, self.super_map(), n_unseen=2, seed=7)
        b = make_super_category_splits(m, self.super_map(), n_unseen=2, seed=7)
        assert a == b

    def test_missing_class_in_map(self):
        m = manifest(4, labels=("A1", "Zed"))
        with pytest.raises(NotFoundError):
            make_super_category_splits(m, self.super_map(), n_unseen=1, seed=0)


class TestAttach:
    def teacher(self):
        return TeacherAnnotation(
            selection=(0,), boxes=(BoundingBox(0.5, 0.5, 0.5, 0.5),),
            object_box=BoundingBox(0.5, 0.5, 1.0, 1.0))

    def test_full_coverage(self):
        m = manifest(3)
        source = {r.id: {"teacher": self.teacher()} for r in m.records}
        outcome = attach_annotations_detailed(m, source)
        assert outcome.unmatched_ids == ()
        assert all(r.teacher is not None for r in outcome.manifest.records)

    def test_partial_coverage_reports_unmatched(self):
        m = manifest(3)
        source = {"img-000": {"teacher": self.teacher()}, "ghost": {"teacher": self.teacher()}}
        outcome = attach_annotations_detailed(m, source)
        assert outcome.matched == 1
        assert outcome.unmatched_ids == ("ghost",)

    def test_duplicate_annotation_rejected(self):
        m = manifest(2)
        pairs = [("img-000", {"teacher": self.teacher()}),
                 ("img-000", {"teacher": self.teacher()})]
        with pytest.raises(ValidationError, match="duplicate"):
            attach_annotations_detailed(m, pairs)

    def test_out_of_bounds_keypoint_names_record(self):
        m = manifest(1, labels=("sparrow",))
        source = {"img-000": {"keypoints": {"crown": Keypoint(9999, 0, True)}}}
        with pytest.raises(ValidationError, match="img-000"):
            attach_annotations(m, source)


class TestTextFormats:
    def test_class_list(self):
        assert load_class_list("# comment\nA\n\nB\n") == ["A", "B"]

    def test_super_map(self):
        assert load_super_category_map("A\twarbler\nB\tgull\n") == \
            {"A": "warbler", "B": "gull"}
        with pytest.raises(FormatError):
            load_super_category_map("A warbler no tab\n")

    def test_default_merge_table(self):
        table = default_keypoint_merge_table()
        assert table["left wing"] == "wings"
        assert table["right wing"] == "wings"
        assert table["left eye"] == "eyes"
        assert table["right leg"] == "legs"

    def test_apply_merge(self):
        table = default_keypoint_merge_table()
        raw = {
            "left wing": Keypoint(1, 1, False),
            "right wing": Keypoint(2, 2, True),
            "beak": Keypoint(3, 3, True),
        }
        merged = apply_keypoint_merge(raw, table)
        assert set(merged) == {"wings", "beak"}
        assert merged["wings"].visible  # visible source wins over invisible
