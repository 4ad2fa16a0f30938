import numpy as np
import pytest

from peeb.boxes import BoundingBox
from peeb.encoders import (
    CachedTextEncoder,
    EmbeddingCache,
    HashImageEncoder,
    HashTextEncoder,
    RecordedTeacher,
    TableTextEncoder,
    TeacherAnnotation,
    normalized_object_box,
    read_embedding_file,
    save_recorded_annotations,
    text_encoder_fingerprint,
    write_embedding_file,
)
from peeb.errors import ConfigurationError, FormatError, PeebError, ValidationError


class TestHashTextEncoder:
    def test_shape_contract(self):
        enc = HashTextEncoder(dim=16)
        parts = [f"part{i}" for i in range(12)]
        out = enc.encode_text(parts)
        assert out.shape == (12, 16)
        assert out.dtype == np.float32

    def test_determinism_bitwise(self):
        enc = HashTextEncoder(dim=16, seed=1)
        a = enc.encode_text(["crown", "wings"])
        b = enc.encode_text(["crown", "wings"])
        assert np.array_equal(a, b)

    def test_distinct_strings_distinct_rows(self):
        enc = HashTextEncoder(dim=32)
        out = enc.encode_text(["aaa", "aab"])
        assert not np.array_equal(out[0], out[1])

    def test_unit_norm(self):
        out = HashTextEncoder(dim=32).encode_text(["anything"])
        assert np.linalg.norm(out[0]) == pytest.approx(1.0, abs=1e-5)

    def test_empty_input_rejected(self):
        with pytest.raises(ValidationError):
            HashTextEncoder().encode_text([])


class TestTableTextEncoder:
    def test_lookup_and_fallback(self):
        known = np.ones(8, dtype=np.float32)
        enc = TableTextEncoder({"known phrase": known}, dim=8)
        out = enc.encode_text(["known phrase", "novel phrase"])
        assert np.array_equal(out[0], known)
        assert not np.array_equal(out[1], known)
        # fallback is deterministic too
        again = enc.encode_text(["novel phrase"])
        assert np.array_equal(out[1], again[0])


class TestHashImageEncoder:
    @pytest.fixture
    def png(self, tmp_path):
        from PIL import Image

        path = tmp_path / "bird.png"
        rng = np.random.default_rng(0)
        Image.fromarray(rng.integers(0, 255, (40, 60, 3), dtype=np.uint8)).save(path)
        return path

    def test_shape_contract(self, png):
        enc = HashImageEncoder(n_patches=16, dim=32)
        out = enc.encode_image(str(png))
        assert out.shape == (16, 32)

    def test_same_image_equal(self, png):
        enc = HashImageEncoder(n_patches=16, dim=32)
        assert np.array_equal(enc.encode_image(str(png)), enc.encode_image(str(png)))

    def test_undecodable_image(self, tmp_path):
        bad = tmp_path / "not_an_image.png"
        bad.write_bytes(b"this is not a picture")
        with pytest.raises(PeebError):
            HashImageEncoder().encode_image(str(bad))

    def test_finite(self, png):
        out = HashImageEncoder().encode_image(str(png))
        assert np.isfinite(out).all()


class TestTeacherAnnotation:
    def test_length_invariant(self):
        with pytest.raises(ValidationError):
            TeacherAnnotation(selection=(0, 1), boxes=(BoundingBox(0.5, 0.5, 0.2, 0.2),),
                              object_box=BoundingBox(0.5, 0.5, 1.0, 1.0))

    def test_recorded_roundtrip_verbatim(self, tmp_path):
        ann = TeacherAnnotation(
            selection=(3, 1),
            boxes=(BoundingBox(0.25, 0.25, 0.5, 0.5), BoundingBox(0.75, 0.75, 0.2, 0.2)),
            object_box=BoundingBox(0.5, 0.5, 1.0, 1.0),
        )
        path = tmp_path / "teacher.jsonl"
        save_recorded_annotations(path, {"img-1": ann})
        teacher = RecordedTeacher.from_file(path)
        assert teacher.annotate("img-1") == ann

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "teacher.jsonl"
        line = ('{"id": "x", "selection": [0], "boxes": [[0.5, 0.5, 0.2, 0.2]], '
                '"object_box": [0.5, 0.5, 1.0, 1.0]}\n')
        path.write_text(line + line)
        with pytest.raises(ValidationError, match="duplicate"):
            RecordedTeacher.from_file(path)

    def test_missing_id_is_configuration_error(self, tmp_path):
        path = tmp_path / "teacher.jsonl"
        path.write_text("")
        teacher = RecordedTeacher.from_file(path)
        with pytest.raises(ConfigurationError):
            teacher.annotate("nope")

    def test_pixel_normalization(self):
        box = normalized_object_box(91, 150, 500, 500)
        assert box.w == pytest.approx(0.182)
        assert box.h == pytest.approx(0.300)


class TestEmbeddingCache:
    def test_file_roundtrip_bitwise(self, tmp_path):
        mat = np.random.default_rng(0).standard_normal((5, 7)).astype(np.float32)
        path = tmp_path / "m.peebemb"
        write_embedding_file(path, mat)
        assert np.array_equal(read_embedding_file(path), mat)
        with open(path, "rb") as fh:
            assert fh.read(8) == b"PEEBEMB1"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.peebemb"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(FormatError):
            read_embedding_file(path)

    def test_cache_hit_equals_cold_call(self, tmp_path):
        cache = EmbeddingCache(tmp_path / "cache")
        inner = HashTextEncoder(dim=16)
        enc = CachedTextEncoder(inner, cache)
        cold = enc.encode_text(["crown", "wings"])
        hit = enc.encode_text(["crown", "wings"])
        assert np.array_equal(cold, hit)
        assert cache.get(inner.provider_id, "missing") is None

    def test_fingerprint_stable(self):
        enc = HashTextEncoder(dim=16, seed=0)
        assert text_encoder_fingerprint(enc) == text_encoder_fingerprint(enc)
        assert text_encoder_fingerprint(enc) != text_encoder_fingerprint(HashTextEncoder(dim=16, seed=5))


class TestSyntheticProviders:
    def test_prototype_rows(self, synthetic_world):
        """Part j's patch equals its class prototype (plus position code)
        up to the configured noise level."""
        cfg = synthetic_world.config
        feats = synthetic_world.image_features(class_index=2, sample_index=0)
        assert feats.shape == (cfg.n_patches, cfg.d_image)
        for j in range(cfg.n_parts):
            residual = feats[j] - synthetic_world.prototypes[2, j] - synthetic_world.positions[j]
            assert np.linalg.norm(residual) < 4 * cfg.noise_sigma * np.sqrt(cfg.d_image)

    def test_teacher_identity_selection(self, synthetic_world):
        ann = synthetic_world.teacher_annotation()
        assert ann.selection == tuple(range(synthetic_world.config.n_parts))

    def test_feature_source_roundtrip(self, synthetic_world):
        from peeb.synthetic import SyntheticFeatureSource

        src = SyntheticFeatureSource(synthetic_world)
        ex = synthetic_world.example(1, 2)
        assert np.array_equal(src.encode_image(ex.image_id), ex.features)
        with pytest.raises(ConfigurationError):
            src.encode_image("not-an-id")
