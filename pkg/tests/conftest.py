"""Shared fixtures: a small descriptor library and the trained synthetic
model reused by the evaluation/acceptance tests (training once per session)."""

import pytest
import torch

from peeb.descriptors import DescriptorLibrary, PartVocabulary
from peeb.synthetic import SyntheticConfig, SyntheticWorld
from peeb.training import TrainConfig, make_synthetic_bundle, pretrain_stage1, pretrain_stage2

torch.set_num_threads(1)


@pytest.fixture
def small_vocab() -> PartVocabulary:
    return PartVocabulary(("crown", "wings", "tail"))


@pytest.fixture
def small_library(small_vocab) -> DescriptorLibrary:
    return DescriptorLibrary(small_vocab, {
        "Cardinal": {"crown": "distinctive red crest", "wings": "red with black accents",
                     "tail": "long and wedge-shaped"},
        "Blue Jay": {"crown": "blue crest", "wings": "blue with white bars",
                     "tail": "blue banded tail"},
    })


@pytest.fixture(scope="session")
def synthetic_world() -> SyntheticWorld:
    return SyntheticWorld(SyntheticConfig(n_classes=8, extra_classes=1, n_parts=12,
                                          noise_sigma=0.1, seed=0))


@pytest.fixture(scope="session")
def trained_synthetic(synthetic_world):
    """Stage-1 + stage-2 pre-trained model over the 8-class synthetic task,
    with parameter snapshots around each stage for the isolation audits."""
    from peeb.encoders import text_encoder_fingerprint
    from peeb.evaluation import evaluate_top1
    from peeb.training import snapshot_parameters

    import time

    from peeb.model import ModelConfig, PeebModel

    start = time.monotonic()
    bundle = make_synthetic_bundle(synthetic_world)
    fingerprint_before = text_encoder_fingerprint(bundle.text_encoder)

    torch.manual_seed(0)
    model = PeebModel(ModelConfig(
        d_image=synthetic_world.config.d_image,
        d_text=synthetic_world.config.d_text,
        parts=tuple(synthetic_world.vocabulary.parts)))
    snap_init = snapshot_parameters(model)

    res1 = pretrain_stage1(bundle, TrainConfig(
        stage="pretrain1", epochs=50, batch_size=32, learning_rate=2e-3,
        weight_decay=0.01, early_stop_patience=5, in_batch_classes=8,
        seed=0, max_steps=200), model)
    snap_after1 = snapshot_parameters(res1.model)
    stage1_val_acc = evaluate_top1(res1.model, bundle.text_encoder, bundle.library,
                                   bundle.val, selection="teacher")

    res2 = pretrain_stage2(bundle, TrainConfig(
        stage="pretrain2", epochs=60, batch_size=32, learning_rate=2e-3,
        weight_decay=0.01, early_stop_patience=8, in_batch_classes=8,
        seed=0, max_steps=400), res1.model)
    snap_after2 = snapshot_parameters(res2.model)
    fingerprint_after = text_encoder_fingerprint(bundle.text_encoder)

    return {
        "world": synthetic_world,
        "bundle": bundle,
        "model": res2.model,
        "stage1_steps": res1.steps_run,
        "stage2_steps": res2.steps_run,
        "stage1_val_acc": stage1_val_acc,
        "snap_init": snap_init,
        "snap_after1": snap_after1,
        "snap_after2": snap_after2,
        "text_encoder_fingerprints": (fingerprint_before, fingerprint_after),
        "train_seconds": time.monotonic() - start,
    }
