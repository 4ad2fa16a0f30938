import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peeb.descriptors import (
    BIRD_PARTS,
    DescriptorLibrary,
    PartVocabulary,
    clone_class,
    diff_libraries,
    edit_descriptor,
    load_library,
    randomize_descriptors,
    save_library,
)
from peeb.errors import ConflictError, FormatError, NotFoundError, ValidationError

CARDINAL = {
    "back": "vibrant red feathers",
    "beak": "stout, conical, and orange",
    "belly": "light red to grayish-white",
    "breast": "bright red plumage",
    "crown": "distinctive red crest",
    "forehead": "vibrant red feathers",
    "eyes": "small, black, and alert",
    "legs": "slender, grayish-brown",
    "wings": "red with black and white accents",
    "nape": "red feather transition to grayish-white",
    "tail": "long, red, and wedge-shaped",
    "throat": "bright red with sharp delineation from white belly",
}


def cardinal_doc() -> str:
    return json.dumps({"parts": list(BIRD_PARTS), "classes": {"Cardinal": CARDINAL}})


class TestVocabulary:
    def test_order_defines_index(self):
        vocab = PartVocabulary(BIRD_PARTS)
        assert len(vocab) == 12
        assert vocab.index("beak") == 1
        assert vocab.index("throat") == 11

    def test_rejects_empty_and_duplicates(self):
        with pytest.raises(ValidationError):
            PartVocabulary(())
        with pytest.raises(ValidationError):
            PartVocabulary(("a", "a"))

    def test_unknown_part(self):
        with pytest.raises(NotFoundError):
            PartVocabulary(("a", "b")).index("horns")


class TestLoad:
    def test_cardinal_entry(self):
        lib = load_library(cardinal_doc())
        assert len(lib) == 1
        assert len(lib.vocabulary) == 12
        assert lib.classes["Cardinal"]["beak"] == "stout, conical, and orange"

    def test_empty_class_map_is_valid(self):
        lib = load_library(json.dumps({"parts": list(BIRD_PARTS), "classes": {}}))
        assert len(lib) == 0

    def test_missing_part_names_class_and_part(self):
        phrases = dict(CARDINAL)
        del phrases["nape"]
        doc = json.dumps({"parts": list(BIRD_PARTS), "classes": {"Cardinal": phrases}})
        with pytest.raises(ValidationError, match="Cardinal.*nape"):
            load_library(doc)

    def test_parse_failure_reports_line(self):
        with pytest.raises(FormatError, match="line"):
            load_library('{"parts": [,]}')

    def test_not_an_object(self):
        with pytest.raises(FormatError):
            load_library("[1, 2, 3]")

    def test_empty_phrase_rejected(self):
        phrases = dict(CARDINAL, nape="  ")
        doc = json.dumps({"parts": list(BIRD_PARTS), "classes": {"Cardinal": phrases}})
        with pytest.raises(ValidationError, match="nape"):
            load_library(doc)

    def test_extra_part_rejected(self):
        phrases = dict(CARDINAL, horns="none")
        doc = json.dumps({"parts": list(BIRD_PARTS), "classes": {"Cardinal": phrases}})
        with pytest.raises(ValidationError, match="horns"):
            load_library(doc)


class TestRoundTrip:
    def test_load_save_identity(self, small_library):
        text = save_library(small_library)
        again = load_library(text)
        assert again.vocabulary.parts == small_library.vocabulary.parts
        assert again.classes == small_library.classes
        assert save_library(again) == text


class TestEdit:
    def test_single_phrase_changes(self, small_library):
        out = edit_descriptor(small_library, "Blue Jay", "wings", "rusty brick-red wings")
        assert out.classes["Blue Jay"]["wings"] == "rusty brick-red wings"
        # nothing else moved
        assert out.classes["Cardinal"] == small_library.classes["Cardinal"]
        assert out.classes["Blue Jay"]["crown"] == small_library.classes["Blue Jay"]["crown"]
        assert out.vocabulary == small_library.vocabulary
        # input untouched (value semantics)
        assert small_library.classes["Blue Jay"]["wings"] == "blue with white bars"

    def test_identity_edit(self, small_library):
        out = edit_descriptor(small_library, "Cardinal", "crown", "distinctive red crest")
        assert out.classes == small_library.classes

    def test_unknown_part(self, small_library):
        with pytest.raises(NotFoundError):
            edit_descriptor(small_library, "Cardinal", "horns", "x")

    def test_unknown_class(self, small_library):
        with pytest.raises(NotFoundError):
            edit_descriptor(small_library, "Dodo", "crown", "x")

    def test_empty_phrase(self, small_library):
        with pytest.raises(ValidationError):
            edit_descriptor(small_library, "Cardinal", "crown", "")


class TestClone:
    def test_clone_adds_one_class(self, small_library):
        out = clone_class(small_library, "Blue Jay", "Eastern Bluebird")
        assert len(out) == len(small_library) + 1
        assert out.classes["Eastern Bluebird"] == small_library.classes["Blue Jay"]

    def test_clone_then_edit_two_parts(self, small_library):
        out = clone_class(small_library, "Blue Jay", "Eastern Bluebird")
        out = edit_descriptor(out, "Eastern Bluebird", "wings", "deep blue above")
        out = edit_descriptor(out, "Eastern Bluebird", "tail", "rusty red below")
        differing = [p for p in out.vocabulary
                     if out.classes["Eastern Bluebird"][p] != out.classes["Blue Jay"][p]]
        assert sorted(differing) == ["tail", "wings"]

    def test_clone_onto_existing_name(self, small_library):
        with pytest.raises(ConflictError):
            clone_class(small_library, "Blue Jay", "Cardinal")

    def test_clone_unknown_src(self, small_library):
        with pytest.raises(NotFoundError):
            clone_class(small_library, "Dodo", "Dodo 2")


class TestRandomize:
    def test_two_classes_multiset_preserved(self, small_library):
        out = randomize_descriptors(small_library, seed=3)
        for part in small_library.vocabulary:
            before = sorted(small_library.classes[c][part] for c in small_library.class_names)
            after = sorted(out.classes[c][part] for c in out.class_names)
            assert before == after

    def test_deterministic(self, small_library):
        a = randomize_descriptors(small_library, seed=11)
        b = randomize_descriptors(small_library, seed=11)
        assert a.classes == b.classes

    def test_different_seeds_can_differ(self, small_library):
        outputs = {json.dumps(randomize_descriptors(small_library, seed=s).classes, sort_keys=True)
                   for s in range(8)}
        assert len(outputs) > 1

    def test_large_library_multisets(self):
        vocab = PartVocabulary(BIRD_PARTS)
        classes = {
            f"species {i}": {p: f"phrase {i} for {p}" for p in vocab}
            for i in range(200)
        }
        lib = DescriptorLibrary(vocab, classes)
        out = randomize_descriptors(lib, seed=0)
        for part in vocab:
            assert sorted(lib.classes[c][part] for c in lib.class_names) == \
                sorted(out.classes[c][part] for c in out.class_names)

    def test_needs_two_classes(self, small_vocab):
        lib = DescriptorLibrary(small_vocab, {"only": {p: "x" for p in small_vocab}})
        with pytest.raises(ValidationError):
            randomize_descriptors(lib, seed=0)

    @settings(max_examples=25, deadline=None)
    @given(n_classes=st.integers(2, 12), seed=st.integers(0, 2**31 - 1))
    def test_permutation_property(self, n_classes, seed):
        vocab = PartVocabulary(("crown", "wings"))
        lib = DescriptorLibrary(vocab, {
            f"c{i}": {"crown": f"crown-{i}", "wings": f"wings-{i}"} for i in range(n_classes)
        })
        out = randomize_descriptors(lib, seed=seed)
        for part in vocab:
            assert sorted(out.classes[c][part] for c in out.class_names) == \
                sorted(lib.classes[c][part] for c in lib.class_names)


class TestDiff:
    def test_diff_reports_changes(self, small_library):
        out = clone_class(small_library, "Blue Jay", "New Bird")
        out = edit_descriptor(out, "Cardinal", "tail", "short tail")
        diff = diff_libraries(small_library, out)
        assert diff["added_classes"] == ["New Bird"]
        assert diff["removed_classes"] == []
        assert len(diff["changed_phrases"]) == 1
        assert diff["changed_phrases"][0]["part"] == "tail"
