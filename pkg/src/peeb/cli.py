"""Command-line interface. Each subcommand maps 1:1 to a module operation.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import json
import sys

import click
import numpy as np
import torch

from . import data as datamod
from . import descriptors as dsc
from .encoders import HashImageEncoder, HashTextEncoder, RecordedTeacher
from .errors import ConfigurationError, PeebError, ValidationError
from .evaluation import (
    harmonic_mean,
    part_subset_eval,
    randomized_descriptor_eval,
    top1_accuracy,
)
from .losses import box_loss, ce_loss, sce_loss, LabelAssignment
from .model import ModelConfig, PeebModel, Pipeline, load_checkpoint
from .synthetic import SyntheticConfig, SyntheticFeatureSource, SyntheticWorld
from .training import (
    TrainConfig,
    bundle_from_manifest,
    finetune,
    grad_check,
    load_train_config,
    make_synthetic_bundle,
    pretrain_stage1,
    pretrain_stage2,
)


@click.group()
def cli():
    """Part-based classification with an editable descriptor bottleneck."""


# ---------------------------------------------------------------------------
# helpers


def _build_world(seed: int, extra: dict | None = None) -> SyntheticWorld:
    cfg = SyntheticConfig(seed=seed)
    if extra and "synthetic_config" in extra:
        cfg = SyntheticConfig(**extra["synthetic_config"])
    return SyntheticWorld(cfg)


def _pipeline_from_checkpoint(checkpoint_path: str, provider: str, seed: int):
    model, extra = load_checkpoint(checkpoint_path)
    if provider == "synthetic":
        world = _build_world(seed, extra)
        return Pipeline(model, world.text_encoder(), SyntheticFeatureSource(world)), extra
    text = HashTextEncoder(dim=model.config.d_text, seed=seed)
    image = HashImageEncoder(n_patches=16, dim=model.config.d_image, seed=seed)
    return Pipeline(model, text, image), extra


def _load_library_arg(path: str | None, world: SyntheticWorld | None):
    if path:
        return dsc.load_library_file(path)
    if world is not None:
        return world.library()
    raise ConfigurationError("a --library file is required for this provider")


# ---------------------------------------------------------------------------
# train


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True),
              help="YAML key/value training config.")
@click.option("--data", type=click.Choice(["synthetic", "manifest"]), default="synthetic")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True))
@click.option("--annotations", "annotations_path", type=click.Path(exists=True))
@click.option("--library", "library_path", type=click.Path(exists=True))
@click.option("--resume", "resume_path", type=click.Path(exists=True),
              help="Checkpoint to continue from (required for pretrain2/finetune).")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--synthetic-seed", default=0, show_default=True)
def train(config_path, data, manifest_path, annotations_path, library_path,
          resume_path, out_path, synthetic_seed):
    """Run one training stage and write the resulting checkpoint."""
    config = load_train_config(config_path)
    extra_meta: dict = {}
    if data == "synthetic":
        world = _build_world(synthetic_seed)
        bundle = make_synthetic_bundle(world)
        extra_meta["synthetic_config"] = world.config.__dict__
    else:
        if not (manifest_path and library_path):
            raise ConfigurationError("manifest training needs --manifest and --library")
        manifest = datamod.load_manifest_file(manifest_path)
        if annotations_path:
            teacher = RecordedTeacher.from_file(annotations_path)
            source = {rid: {"teacher": teacher.annotate(rid)}
                      for rid in (r.id for r in manifest.records) if rid in teacher}
            manifest = datamod.attach_annotations(manifest, source)
        library = dsc.load_library_file(library_path)
        text = HashTextEncoder(dim=32, seed=synthetic_seed)
        image = HashImageEncoder(n_patches=16, dim=64, seed=synthetic_seed)
        bundle = bundle_from_manifest(manifest, library, image, text, seed=config.seed)

    model = None
    if resume_path:
        model, _ = load_checkpoint(resume_path)
    if config.stage == "pretrain1":
        result = pretrain_stage1(bundle, config, model)
    elif config.stage == "pretrain2":
        if model is None:
            raise ConfigurationError("pretrain2 requires --resume with a stage-1 checkpoint")
        result = pretrain_stage2(bundle, config, model)
    else:
        if model is None:
            raise ConfigurationError("finetune requires --resume with a pre-trained checkpoint")
        result = finetune(bundle, config, model)

    from .model import save_checkpoint
    save_checkpoint(out_path, result.model, extra={
        "train_config": config.to_dict(),
        "best_val": result.best_val,
        "steps_run": result.steps_run,
        **extra_meta,
    })
    click.echo(f"stage={config.stage} steps={result.steps_run} "
               f"best_val={result.best_val:.6f} checkpoint={out_path}")


# ---------------------------------------------------------------------------
# eval


@cli.group(name="eval")
def eval_group():
    """Metric calculators."""


@eval_group.command()
@click.option("--seen", required=True, type=float)
@click.option("--unseen", required=True, type=float)
def harmonic(seen, unseen):
    """Harmonic mean of a seen/unseen accuracy pair."""
    click.echo(f"{harmonic_mean(seen, unseen):.2f}")


@eval_group.command()
@click.option("--predictions", "pred_path", required=True, type=click.Path(exists=True),
              help="JSON array of predicted labels.")
@click.option("--labels", "label_path", required=True, type=click.Path(exists=True),
              help="JSON array of true labels.")
def top1(pred_path, label_path):
    with open(pred_path) as fh:
        preds = json.load(fh)
    with open(label_path) as fh:
        labels = json.load(fh)
    click.echo(f"{top1_accuracy(preds, labels):.4f}")


# ---------------------------------------------------------------------------
# dataset commands


def _parse_box_size(text: str) -> tuple[float, float]:
    try:
        w, h = text.lower().split("x")
        return float(w), float(h)
    except ValueError:
        raise click.UsageError(f"--min-box must look like 100x100, got {text!r}")


@cli.command(name="filter")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--min-box", required=True, help="Minimum object box, e.g. 100x100.")
@click.option("--missing", type=click.Choice(["drop", "error"]), default="drop")
@click.option("--exclude-classes", "exclude_path", type=click.Path(exists=True),
              help="Class list file; whole classes dropped before the box filter.")
@click.option("--out", "out_path", required=True, type=click.Path())
def filter_cmd(manifest_path, min_box, missing, exclude_path, out_path):
    """Drop records whose object box is smaller than the threshold."""
    manifest = datamod.load_manifest_file(manifest_path)
    if exclude_path:
        with open(exclude_path) as fh:
            manifest = datamod.exclude_classes(manifest, datamod.load_class_list(fh.read()))
    min_w, min_h = _parse_box_size(min_box)
    outcome = datamod.filter_by_box_detailed(manifest, min_w, min_h, missing)
    datamod.save_manifest_file(outcome.manifest, out_path)
    click.echo(f"kept={outcome.kept} dropped_small={outcome.dropped_small} "
               f"dropped_missing={outcome.dropped_missing} out={out_path}")


@cli.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["zsl", "gzsl", "scs-sce"]), required=True)
@click.option("--unseen-classes", "unseen_path", type=click.Path(exists=True),
              help="Class list file (zsl mode).")
@click.option("--protected-ids", "protected_path", type=click.Path(exists=True),
              help="Record-id list file (gzsl mode).")
@click.option("--super-map", "super_map_path", type=click.Path(exists=True),
              help="class<TAB>super file (scs-sce mode).")
@click.option("--n-unseen", type=int, default=None)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def split(manifest_path, mode, unseen_path, protected_path, super_map_path,
          n_unseen, seed, out_path):
    """Build a train/test split with audited class disjointness."""
    manifest = datamod.load_manifest_file(manifest_path)

    def dump(spec):
        return {
            "name": spec.name,
            "train_ids": sorted(spec.train_ids),
            "val_ids": sorted(spec.val_ids),
            "test_ids": sorted(spec.test_ids),
            "seen_classes": sorted(spec.seen_classes),
            "unseen_classes": sorted(spec.unseen_classes),
        }

    if mode == "zsl":
        if not unseen_path:
            raise click.UsageError("zsl mode needs --unseen-classes")
        with open(unseen_path) as fh:
            unseen = datamod.load_class_list(fh.read())
        spec = datamod.make_zsl_split(manifest, unseen)
        datamod.audit_zsl_disjointness(manifest, spec)
        doc = dump(spec)
    elif mode == "gzsl":
        if not protected_path:
            raise click.UsageError("gzsl mode needs --protected-ids")
        with open(protected_path) as fh:
            protected = datamod.load_class_list(fh.read())
        doc = dump(datamod.make_gzsl_split(manifest, protected))
    else:
        if not (super_map_path and n_unseen):
            raise click.UsageError("scs-sce mode needs --super-map and --n-unseen")
        with open(super_map_path) as fh:
            super_map = datamod.load_super_category_map(fh.read())
        easy, hard = datamod.make_super_category_splits(manifest, super_map, n_unseen, seed)
        for s in (easy, hard):
            datamod.audit_zsl_disjointness(manifest, s)
        doc = {"scs": dump(easy), "sce": dump(hard)}

    with open(out_path, "w") as fh:
        json.dump(doc, fh, indent=2)
    click.echo(f"split written to {out_path}")


# ---------------------------------------------------------------------------
# inference


@cli.command()
@click.option("--image", "image_ref", required=True)
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--library", "library_path", type=click.Path(exists=True))
@click.option("--provider", type=click.Choice(["synthetic", "hash"]), default="synthetic")
@click.option("--top-k", type=int, default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
def classify(image_ref, checkpoint_path, library_path, provider, top_k, seed):
    """Rank classes for one image."""
    pipeline, extra = _pipeline_from_checkpoint(checkpoint_path, provider, seed)
    world = _build_world(seed, extra) if provider == "synthetic" else None
    lib = _load_library_arg(library_path, world)
    top_k = min(top_k, len(lib))
    for e in pipeline.explain(image_ref, lib, top_k=top_k):
        click.echo(f"{e.class_name}\t{e.softmax_prob:.4f}\t{e.total_logit:.4f}")


@cli.command()
@click.option("--image", "image_ref", required=True)
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--library", "library_path", type=click.Path(exists=True))
@click.option("--provider", type=click.Choice(["synthetic", "hash"]), default="synthetic")
@click.option("--seed", default=0, show_default=True)
def explain(image_ref, checkpoint_path, library_path, provider, seed):
    """Per-part grounded explanation for the top class."""
    pipeline, extra = _pipeline_from_checkpoint(checkpoint_path, provider, seed)
    world = _build_world(seed, extra) if provider == "synthetic" else None
    lib = _load_library_arg(library_path, world)
    top = pipeline.explain(image_ref, lib)[0]
    click.echo(f"prediction: {top.class_name} softmax={top.softmax_prob:.4f} "
               f"logit={top.total_logit:.4f}")
    for p in top.per_part:
        x1, y1, x2, y2 = p.box.to_corners()
        click.echo(f"  {p.part:<12} score={p.score:+.4f} "
                   f"box=({x1:.3f},{y1:.3f})-({x2:.3f},{y2:.3f}) :: {p.phrase}")


@cli.command()
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--library", "library_path", type=click.Path(exists=True))
@click.option("--provider", type=click.Choice(["synthetic", "hash"]), default="synthetic")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--seed", default=0, show_default=True)
def serve(checkpoint_path, library_path, provider, host, port, seed):
    """Run the HTTP service over a checkpoint and a descriptor library."""
    import uvicorn

    from .service import create_app

    pipeline, extra = _pipeline_from_checkpoint(checkpoint_path, provider, seed)
    world = _build_world(seed, extra) if provider == "synthetic" else None
    lib = _load_library_arg(library_path, world)
    uvicorn.run(create_app(pipeline, lib), host=host, port=port)


# ---------------------------------------------------------------------------
# verification & ablations


@cli.command()
@click.option("--eps", default=1e-5, show_default=True)
@click.option("--seed", default=0, show_default=True)
def gradcheck(eps, seed):
    """Compare autograd gradients against central finite differences."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    parts = tuple(f"p{i}" for i in range(3))
    model = PeebModel(ModelConfig(d_image=8, d_text=6, hidden_dim=8, parts=parts))

    features = torch.as_tensor(rng.standard_normal((5, 8)), dtype=torch.float64)
    name_embs = torch.as_tensor(rng.standard_normal((3, 6)), dtype=torch.float64)
    desc_embs = torch.as_tensor(rng.standard_normal((6, 6)), dtype=torch.float64)
    gt_boxes = torch.as_tensor(rng.uniform(0.2, 0.8, (3, 4)), dtype=torch.float64)
    target_sel = torch.zeros((5, 3), dtype=torch.float64)
    target_sel[torch.tensor([0, 2, 4]), torch.arange(3)] = 1.0

    def composite(m):
        adapted = m.encoder_delta(features)
        logits = m.projection.selection_logits(m.projection(adapted), name_embs)
        sce = sce_loss(logits, LabelAssignment.from_onehot(target_sel))
        selected = adapted[torch.tensor([0, 2, 4])]
        scores = m.part_mlp(selected) @ desc_embs.T
        class_logits = scores.reshape(3, 2, 3)[torch.arange(3), :, torch.arange(3)].sum(dim=0)
        ce = ce_loss(class_logits, 0)
        boxes = torch.sigmoid(m.box_mlp(selected))
        return sce + ce + box_loss(boxes, gt_boxes)

    report = grad_check(model, composite, eps=eps)
    for group, err in sorted(report.per_group.items()):
        click.echo(f"{group:<14} max_rel_err={err:.3e}")
    click.echo(f"overall        max_rel_err={report.max_rel_err:.3e}")
    if report.non_finite:
        raise ValidationError(f"non-finite gradients in groups: {report.non_finite}")


@cli.group()
def ablate():
    """Ablation runners over a trained checkpoint (synthetic provider)."""


def _emit_report(report, fmt: str):
    if fmt == "csv":
        for row in report.to_csv_rows():
            click.echo(row)
    else:
        click.echo(report.to_json())


@ablate.command(name="random-descriptors")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True)
@click.option("--shuffle-seed", default=123, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json")
def ablate_random(checkpoint_path, seed, shuffle_seed, fmt):
    """Accuracy with true vs. per-part randomized descriptors."""
    pipeline, extra = _pipeline_from_checkpoint(checkpoint_path, "synthetic", seed)
    world = _build_world(seed, extra)
    _, val = world.split()
    report = randomized_descriptor_eval(pipeline.model, pipeline.text_encoder,
                                        world.library(), val, shuffle_seed)
    _emit_report(report, fmt)


@ablate.command(name="part-subset")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--k", required=True, type=int)
@click.option("--order", type=click.Choice(["most", "least"]), default="most")
@click.option("--seed", default=0, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json")
def ablate_subset(checkpoint_path, k, order, seed, fmt):
    """Classification restricted to the k most/least visible parts."""
    pipeline, extra = _pipeline_from_checkpoint(checkpoint_path, "synthetic", seed)
    world = _build_world(seed, extra)
    _, val = world.split()
    # synthetic parts are all always visible; rank by index as the frequency proxy
    freqs = {p: 1.0 - i * 1e-3 for i, p in enumerate(world.vocabulary.parts)}
    report = part_subset_eval(pipeline.model, pipeline.text_encoder, world.library(),
                              val, k, order, freqs)
    _emit_report(report, fmt)


def main():
    try:
        cli.main(standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.exceptions.Abort:
        sys.exit(2)
    except PeebError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    sys.exit(0)


if __name__ == "__main__":
    main()
