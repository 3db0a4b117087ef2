"""Procedural rosette time series with ground truth.

Each plant sits at a grid position in a field and is photographed once per
stage from above. Its projected leaf area follows

    area(t) = min(multiplier[treatment] * base_area * exp(growth_rate * t), max_area)

with areas given as fractions of the image area. The renderer scales a
fixed per-plant rosette (elliptical leaves around a center) until its mask
pixel count matches area(t), so the mask popcount tracks the law up to
pixel quantization.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .datamodel import (
    TREATMENT_ORDER,
    ImageRecord,
    Split,
    Treatment,
    write_records,
)
from .errors import ConfigError

DEFAULT_MULTIPLIERS = {
    Treatment.IPFP: 1.0,
    Treatment.IPFM: 0.8,
    Treatment.IMFP: 0.65,
    Treatment.IMFM: 0.5,
}
HARVEST_LOG = "harvest_log.csv"
GROUND_TRUTH = "ground_truth.csv"

SOIL_RGB = np.array([122.0, 92.0, 62.0])
LEAF_RGB = np.array([62.0, 150.0, 48.0])


@dataclass(frozen=True)
class SynthConfig:
    n_plants: int = 40
    stages: int = 6
    image_size: int = 64
    base_area: float = 240 / 4096
    growth_rate: float = 0.35
    max_area: float = 1600 / 4096
    multipliers: dict = field(default_factory=lambda: dict(DEFAULT_MULTIPLIERS))
    jitter_m: float = 0.004
    footprint_m: float = 0.5
    spacing_m: float = 0.6
    origin_m: tuple[float, float] = (500000.0, 5700000.0)
    harvest_prob: float = 0.1
    emergence_prob: float = 0.05
    test_every: int = 4
    seed: int = 0

    def __post_init__(self):
        mult = {Treatment(k): float(v) for k, v in self.multipliers.items()}
        object.__setattr__(self, "multipliers", mult)
        if set(mult) != set(TREATMENT_ORDER):
            raise ConfigError("multipliers must cover i+f+, i+f-, i-f+, i-f-")
        ordered = [mult[t] for t in TREATMENT_ORDER]
        if not all(a > b for a, b in zip(ordered, ordered[1:])):
            raise ConfigError("multipliers must satisfy i+f+ > i+f- > i-f+ > i-f-")
        if self.n_plants < 0 or self.stages < 1 or self.image_size < 8:
            raise ConfigError("invalid synthetic dataset size")
        if not (0 < self.base_area and 0 < self.max_area <= 1):
            raise ConfigError("areas are fractions of the image and must be in (0, 1]")

    @property
    def px_per_m(self) -> float:
        return self.image_size / self.footprint_m

    def target_area(self, treatment: Treatment, stage: int) -> float:
        """Target projected leaf area in pixels."""
        px = self.image_size ** 2
        a = self.multipliers[Treatment(treatment)] * self.base_area * math.exp(self.growth_rate * stage)
        return min(a, self.max_area) * px

    def to_json(self) -> str:
        d = asdict(self)
        d["multipliers"] = {t.value: v for t, v in self.multipliers.items()}
        return json.dumps(d, indent=2, sort_keys=True)


@dataclass(frozen=True)
class Plant:
    index: int
    plot_id: str
    treatment: Treatment
    split: Split
    position_m: tuple[float, float]
    emergence_stage: int
    harvest_stage: int | None

    def visible_at(self, stage: int) -> bool:
        return stage >= self.emergence_stage and (
            self.harvest_stage is None or stage < self.harvest_stage
        )


@dataclass(frozen=True)
class GroundTruth:
    image_path: str
    plot_id: str
    stage: int
    treatment: Treatment
    visible: bool
    area_px: int
    target_area_px: float
    mask_path: str


@dataclass
class SynthDataset:
    root: Path
    config: SynthConfig
    plants: list[Plant]
    records: list[ImageRecord]
    truth: dict[str, GroundTruth]

    @property
    def records_path(self) -> Path:
        return self.root / "records.csv"

    def mask(self, image_path: str) -> np.ndarray:
        with Image.open(self.root / self.truth[image_path].mask_path) as im:
            return np.asarray(im) > 0

    def expected_pairs(self, horizon: int, threshold_m: float) -> set[tuple[str, str]]:
        """Pairs implied by plant identity: same plant, ``horizon`` stages
        apart, image centers within ``threshold_m``."""
        by_plot: dict[str, dict[int, ImageRecord]] = {}
        for r in self.records:
            by_plot.setdefault(r.plot_id, {})[r.stage] = r
        out = set()
        for stages in by_plot.values():
            for s, a in stages.items():
                b = stages.get(s + horizon)
                if b is not None and a.distance_to(b) <= threshold_m:
                    out.add((a.image_path, b.image_path))
        return out

    def visibility(self) -> dict[str, bool]:
        """Plant visibility per image from the harvest/emergence log."""
        plants = {p.plot_id: p for p in self.plants}
        return {r.image_path: plants[r.plot_id].visible_at(r.stage) for r in self.records}


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RosetteShape:
    angles: np.ndarray
    aspects: np.ndarray
    reach: np.ndarray
    max_leaves: int
    shades: np.ndarray

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "RosetteShape":
        max_leaves = int(rng.integers(7, 10))
        base = rng.uniform(0, 2 * np.pi)
        angles = base + np.arange(max_leaves) * (2 * np.pi / max_leaves) * 1.618
        angles = angles + rng.normal(0, 0.15, max_leaves)
        return cls(
            angles=angles,
            aspects=rng.uniform(0.45, 0.6, max_leaves),
            reach=rng.uniform(0.85, 1.1, max_leaves),
            max_leaves=max_leaves,
            shades=rng.normal(0, 8, (max_leaves, 3)),
        )

    def n_leaves(self, stage: int) -> int:
        return min(self.max_leaves, 4 + stage)


def rosette_labels(
    shape: RosetteShape, n_leaves: int, scale: float, center: tuple[float, float], size: int
) -> np.ndarray:
    """Leaf index (1-based) per pixel, 0 for background; later leaves on top."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - center[0], yy - center[1]
    labels = np.zeros((size, size), dtype=np.int16)
    labels[dx * dx + dy * dy <= (0.18 * scale) ** 2] = 1
    for i in range(n_leaves):
        th = shape.angles[i]
        length = scale * shape.reach[i]
        a, b = 0.5 * length, 0.5 * length * shape.aspects[i]
        cx, cy = 0.5 * length * math.cos(th), 0.5 * length * math.sin(th)
        u = (dx - cx) * math.cos(th) + (dy - cy) * math.sin(th)
        v = -(dx - cx) * math.sin(th) + (dy - cy) * math.cos(th)
        labels[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = i + 1
    return labels


def fit_rosette(
    shape: RosetteShape, n_leaves: int, target: float, center: tuple[float, float], size: int
) -> np.ndarray:
    """Bisect the rosette scale so that the mask area is closest to ``target``."""
    lo, hi = 0.0, float(size)
    best = None
    for _ in range(40):
        mid = (lo + hi) / 2
        labels = rosette_labels(shape, n_leaves, mid, center, size)
        area = int((labels > 0).sum())
        if best is None or abs(area - target) < abs(best[0] - target):
            best = (area, labels)
        if area < target:
            lo = mid
        elif area > target:
            hi = mid
        else:
            break
    return best[1]


def soil_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Brown soil with low-frequency brightness variation and fine grain."""
    coarse = rng.normal(0, 1, (5, 5))
    idx = np.linspace(0, 4, size)
    i0 = np.clip(np.floor(idx).astype(int), 0, 3)
    f = idx - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    field_ = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    img = SOIL_RGB[None, None, :] * (1 + 0.12 * field_[..., None])
    img = img + rng.normal(0, 3, (size, size, 1)) + rng.normal(0, 2, (size, size, 3))
    return img


def render_plant_image(
    config: SynthConfig,
    shape: RosetteShape,
    plant: Plant,
    stage: int,
    offset_px: tuple[float, float],
) -> tuple[np.ndarray, np.ndarray]:
    size = config.image_size
    rng = np.random.default_rng([config.seed, plant.index, stage, 1])
    img = soil_background(rng, size)
    mask = np.zeros((size, size), dtype=bool)
    if plant.visible_at(stage):
        center = (size / 2 + offset_px[0], size / 2 + offset_px[1])
        target = config.target_area(plant.treatment, stage)
        labels = fit_rosette(shape, shape.n_leaves(stage), target, center, size)
        mask = labels > 0
        leaf_color = LEAF_RGB[None, :] + np.vstack([np.zeros((1, 3)), shape.shades])
        img[mask] = leaf_color[labels[mask]] + rng.normal(0, 4, (int(mask.sum()), 3))
    return np.clip(np.round(img), 0, 255).astype(np.uint8), mask


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

def make_plants(config: SynthConfig) -> list[Plant]:
    cols = max(1, int(math.ceil(math.sqrt(config.n_plants))))
    plants = []
    for idx in range(config.n_plants):
        rng = np.random.default_rng([config.seed, idx, 0])
        treatment = TREATMENT_ORDER[idx % len(TREATMENT_ORDER)]
        split = Split.TEST if (idx // len(TREATMENT_ORDER)) % config.test_every == config.test_every - 1 else Split.TRAIN
        row, col = divmod(idx, cols)
        pos = (config.origin_m[0] + col * config.spacing_m, config.origin_m[1] + row * config.spacing_m)
        emergence = 0
        harvest = None
        if config.stages > 1:
            if rng.random() < config.emergence_prob:
                emergence = int(rng.integers(1, config.stages))
            if rng.random() < config.harvest_prob:
                harvest = int(rng.integers(max(1, emergence + 1), config.stages + 1))
                if harvest >= config.stages:
                    harvest = None
        plants.append(Plant(idx, f"plot{idx:03d}", treatment, split, pos, emergence, harvest))
    return plants


def _render_plant(config: SynthConfig, plant: Plant, images_dir: Path):
    rng = np.random.default_rng([config.seed, plant.index, 2])
    shape = RosetteShape.sample(rng)
    out = []
    for stage in range(config.stages):
        jitter = rng.normal(0, config.jitter_m, 2)
        east = plant.position_m[0] + jitter[0]
        north = plant.position_m[1] + jitter[1]
        # Camera shifted east -> plant appears further west (left); north -> lower.
        offset_px = (-jitter[0] * config.px_per_m, jitter[1] * config.px_per_m)
        img, mask = render_plant_image(config, shape, plant, stage, offset_px)
        name = f"p{plant.index:03d}_s{stage}"
        image_path = f"images/{name}.png"
        mask_path = f"images/{name}.mask.png"
        Image.fromarray(img, mode="RGB").save(images_dir / f"{name}.png")
        Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(images_dir / f"{name}.mask.png")
        record = ImageRecord(image_path, plant.plot_id, stage, float(east), float(north),
                             plant.treatment, plant.split)
        truth = GroundTruth(
            image_path, plant.plot_id, stage, plant.treatment, bool(mask.any()),
            int(mask.sum()),
            config.target_area(plant.treatment, stage) if plant.visible_at(stage) else 0.0,
            mask_path,
        )
        out.append((record, truth))
    return out


def generate_dataset(config: SynthConfig, out_dir: str | Path, workers: int = 1) -> SynthDataset:
    """Render every plant at every stage and write the dataset to ``out_dir``.

    Writes ``records.csv``, ``images/*.png`` with ``*.mask.png`` ground
    truth, ``harvest_log.csv``, ``ground_truth.csv`` and ``synth_config.json``.
    """
    root = Path(out_dir)
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    plants = make_plants(config)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda p: _render_plant(config, p, images_dir), plants))
    else:
        results = [_render_plant(config, p, images_dir) for p in plants]
    records = [r for res in results for r, _ in res]
    truth = {t.image_path: t for res in results for _, t in res}
    records.sort(key=lambda r: r.image_path)

    write_records(records, root / "records.csv")
    with open(root / HARVEST_LOG, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["plot_id", "treatment", "emergence_stage", "harvest_stage"])
        for p in plants:
            w.writerow([p.plot_id, p.treatment.value, p.emergence_stage,
                        "" if p.harvest_stage is None else p.harvest_stage])
    with open(root / GROUND_TRUTH, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_path", "plot_id", "stage", "treatment", "visible",
                    "area_px", "target_area_px", "mask_path"])
        for key in sorted(truth):
            t = truth[key]
            w.writerow([t.image_path, t.plot_id, t.stage, t.treatment.value,
                        int(t.visible), t.area_px, repr(t.target_area_px), t.mask_path])
    (root / "synth_config.json").write_text(config.to_json() + "\n")
    return SynthDataset(root, config, plants, records, truth)


def read_harvest_log(path: str | Path) -> dict[str, tuple[int, int | None]]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            h = row["harvest_stage"]
            out[row["plot_id"]] = (int(row["emergence_stage"]), int(h) if h else None)
    return out
