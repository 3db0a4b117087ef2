"""Wiring of module configs from a RunConfig, and the synthetic experiment."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .analytics import (
    POOLED,
    PairedObservation,
    fit_regression,
    render_report,
    stage_statistics,
)
from .cgan import (
    DiscriminatorConfig,
    GanModel,
    GeneratorConfig,
    TrainConfig,
    predict,
    save_checkpoint,
    train,
    write_history,
)
from .cgan.model import load_pair_images
from .config import RunConfig
from .datamodel import (
    TREATMENT_ORDER,
    PairManifest,
    Split,
    manifest_counts,
    read_records,
    save_manifest,
)
from .fid import embed, fit_gaussian, fid_protocol, frechet, provider_from_source
from .pairing import ALL_CLEANING, PairingConfig, build_pairs, clean_pairs
from .preprocess import AugmentConfig, load_and_pad
from .synthcrop import SynthConfig, generate_dataset
from .traits import (
    CommandBackend,
    TraitRecord,
    extract_traits,
    plant_visible,
    segment,
    select_center_plants,
)

log = logging.getLogger(__name__)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def pairing_config(cfg: RunConfig) -> PairingConfig:
    return PairingConfig(
        horizon=cfg["pair.horizon"],
        distance_threshold_m=cfg["pair.threshold"],
        cleaning=ALL_CLEANING if cfg["pair.clean"] else frozenset(),
        stage_unit=cfg["pair.stage_unit"],
    )


def augment_config(cfg: RunConfig) -> AugmentConfig:
    return AugmentConfig(
        target_size=cfg["model.input_size"],
        random_crop=cfg["augment.random_crop"],
        flips=frozenset(_csv_list(cfg["augment.flips"])),
        rotations_deg=frozenset(int(r) for r in _csv_list(cfg["augment.rotations"])),
        seed=cfg["seed"],
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        lambda_l1=cfg["train.lambda_l1"],
        learning_rate=cfg["train.learning_rate"],
        batch_size=cfg["train.batch_size"],
        epochs=cfg["train.epochs"],
        seed=cfg["seed"],
        checkpoint_every=cfg["train.checkpoint_every"],
    )


def build_model(cfg: RunConfig) -> GanModel:
    gen = GeneratorConfig.for_size(
        cfg["model.input_size"],
        base_channels=cfg["model.base_channels"],
        dropout_rate=cfg["model.dropout_rate"],
    )
    disc = DiscriminatorConfig(
        patch_levels=cfg["disc.patch_levels"], base_channels=cfg["disc.base_channels"]
    )
    return GanModel.create(gen, disc, train_config(cfg))


def synth_config(cfg: RunConfig) -> SynthConfig:
    return SynthConfig(
        n_plants=cfg["synth.n_plants"],
        stages=cfg["synth.stages"],
        image_size=cfg["synth.image_size"],
        jitter_m=cfg["synth.jitter_m"],
        harvest_prob=cfg["synth.harvest_prob"],
        emergence_prob=cfg["synth.emergence_prob"],
        seed=cfg["seed"],
    )


def segmenter(cfg: RunConfig):
    backend = cfg["segment.backend"]
    external = CommandBackend(cfg["segment.command"]) if backend == "external" else None
    min_area = cfg["segment.min_area"]

    def run(image: np.ndarray):
        return segment(image, backend, min_area=min_area, external=external)

    return run


def visibility_map(images: dict[str, np.ndarray], seg, min_area: int) -> dict[str, bool]:
    return {path: plant_visible(seg(im), min_area) for path, im in images.items()}


def plant_trait(
    image: np.ndarray, meta, seg, center_fraction: float
) -> TraitRecord | None:
    """Trait record of the largest plant whose center lies in the image center."""
    records = select_center_plants(
        extract_traits(seg(image), meta), image.shape[0], center_fraction
    )
    if not records:
        return None
    return max(records, key=lambda r: r.projected_leaf_area_px)


def observed_area(image, meta, seg, center_fraction) -> int:
    rec = plant_trait(image, meta, seg, center_fraction)
    return 0 if rec is None else rec.projected_leaf_area_px


# ---------------------------------------------------------------------------
# synthetic end-to-end experiment
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    summary: dict
    out_dir: Path
    model: GanModel


def split_manifest(manifest: PairManifest, split: Split) -> PairManifest:
    return manifest.replace_pairs(p for p in manifest.pairs if p.input.split == split)


def run_synthetic_experiment(cfg: RunConfig, out_dir: str | Path) -> ExperimentResult:
    """Generate data, pair, clean, train, predict held-out plants, segment
    and evaluate. Writes everything under ``out_dir``; the report bundle
    lands in ``out_dir/report``."""
    out_dir = Path(out_dir)
    cfg.write(out_dir)
    seg = segmenter(cfg)
    min_area = cfg["segment.min_area"]
    frac = cfg["segment.center_fraction"]

    dataset = generate_dataset(synth_config(cfg), out_dir / "data", workers=cfg["workers"])
    records = read_records(dataset.records_path)
    manifest = build_pairs(records, pairing_config(cfg), root=dataset.root)
    images = {r.image_path: load_and_pad(dataset.root / r.image_path) for r in records}
    if cfg["pair.clean"]:
        manifest = clean_pairs(manifest, visibility_map(images, seg, min_area))
    save_manifest(manifest, out_dir / "pairs")

    train_m = split_manifest(manifest, Split.TRAIN)
    test_m = split_manifest(manifest, Split.TEST)
    log.info("pairs: %d train, %d test", len(train_m), len(test_m))

    model = build_model(cfg)
    train(model, None, augment_config=augment_config(cfg),
          images=[(images[p.input.image_path], images[p.reference.image_path]) for p in train_m])
    save_checkpoint(model, out_dir / "model.ckpt")
    write_history(model.history, out_dir / "history.csv")

    test_inputs = [images[p.input.image_path] for p in test_m]
    names = [Path(p.reference.image_path).stem + "_pred.png" for p in test_m]
    generated = predict(model, test_inputs, stochastic=cfg["predict.stochastic"],
                        out_dir=out_dir / "generated", names=names)

    obs_by_group: dict[str, list[PairedObservation]] = defaultdict(list)
    ref_areas, gen_areas = [], []
    for p, g in zip(test_m.pairs, generated):
        ref = observed_area(images[p.reference.image_path], p.reference, seg, frac)
        gen = observed_area(g, p.reference, seg, frac)
        o = PairedObservation(ref, gen, p.reference.stage, p.treatment)
        obs_by_group[p.treatment.value].append(o)
        obs_by_group[POOLED].append(o)
        ref_areas.append((p.reference.stage, p.treatment, ref))
        gen_areas.append((p.reference.stage, p.treatment, gen))
    for t in TREATMENT_ORDER:
        obs_by_group.setdefault(t.value, [])

    provider = provider_from_source(cfg["fid.model_source"])
    ref_test = [images[p.reference.image_path] for p in test_m]
    ref_train = [images[p.reference.image_path] for p in train_m]
    fid = fid_protocol(provider, ref_test, generated, ref_train)
    baseline = frechet(fit_gaussian(embed(provider, ref_test)), fit_gaussian(embed(provider, test_inputs)))

    gen_stats = stage_statistics(gen_areas, group_by_treatment=True)
    ref_stats = stage_statistics(ref_areas, group_by_treatment=True)
    final_stage = max(s.stage for s in gen_stats)
    final_means = {s.group: s.mean_area_px for s in gen_stats if s.stage == final_stage}
    ordering = [t.value for t in sorted(
        (t for t in TREATMENT_ORDER if t.value in final_means),
        key=lambda t: -final_means[t.value],
    )]
    pooled = fit_regression(obs_by_group[POOLED])
    train_counts = manifest_counts(train_m)
    stage_pairs = {s.stage: 0 for s in ref_stats}
    for (a, b, _t), n in train_counts.cells.items():
        stage_pairs[b] = stage_pairs.get(b, 0) + n

    extra = {
        "experiment": {
            "n_pairs_train": len(train_m),
            "n_pairs_test": len(test_m),
            "epochs": cfg["train.epochs"],
            "final_stage": final_stage,
            "final_stage_generated_means": final_means,
            "generated_ordering": ordering,
            "expected_ordering": [t.value for t in TREATMENT_ORDER],
            "pooled_r_squared": pooled.r_squared,
            "fid_input_baseline": baseline.distance,
            "final_history": model.history[-1],
        }
    }
    bundle = render_report(
        obs_by_group, ref_stats, gen_stats, fid, out_dir / "report",
        train_pair_counts=stage_pairs, extra=extra,
    )
    return ExperimentResult(bundle.summary, out_dir, model)
