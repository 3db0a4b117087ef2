"""Plant instance segmentation and trait extraction.

Convention: plant rows run vertically in the image (along y). Width is the
bounding-box extent along x, height the extent along y. Bounding boxes are
half-open pixel intervals ``(x_min, y_min, x_max, y_max)``.
"""

from __future__ import annotations

import csv
import io
import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .datamodel import ImageRecord, Treatment
from .errors import BackendError, ConfigError
from .preprocess import save_image, validate_image

DEFAULT_MIN_AREA = 50
FALLBACK_THRESHOLD = 0.1
UNIMODAL_RATIO = 0.05
DEFAULT_CENTER_FRACTION = 1 / 3
TRAIT_COLUMNS = (
    "source_image", "stage", "treatment", "area_px", "center_x", "center_y",
    "width_px", "height_px", "score",
)


@dataclass(frozen=True, eq=False)
class PlantInstance:
    mask: np.ndarray
    bbox: tuple[int, int, int, int]
    score: float = 1.0

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "mask", mask)
        if not mask.any():
            raise ValueError("instance mask is empty")
        if tuple(self.bbox) != tight_bbox(mask):
            raise ValueError(f"bbox {self.bbox} is not the tight box {tight_bbox(mask)}")
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @classmethod
    def from_mask(cls, mask: np.ndarray, score: float = 1.0) -> "PlantInstance":
        return cls(mask, tight_bbox(mask), score)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("empty mask has no bounding box")
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


# ---------------------------------------------------------------------------
# run-length encoding of masks (external backend contract)
# ---------------------------------------------------------------------------

def encode_rle(mask: np.ndarray) -> list[int]:
    """Row-major alternating run lengths, starting with a run of zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def decode_rle(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    total = shape[0] * shape[1]
    if any((not isinstance(r, int)) or r < 0 for r in runs):
        raise ValueError("RLE runs must be non-negative integers")
    if sum(runs) != total:
        raise ValueError(f"RLE covers {sum(runs)} pixels, image has {total}")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    return np.repeat(values, runs).reshape(shape)


# ---------------------------------------------------------------------------
# baseline segmenter
# ---------------------------------------------------------------------------

def excess_green(image: np.ndarray) -> np.ndarray:
    """2G - R - B on [0, 1] channels."""
    rgb = (np.asarray(image, dtype=np.float64) + 1.0) / 2.0
    return 2.0 * rgb[..., 1] - rgb[..., 0] - rgb[..., 2]


def vegetation_threshold(exg: np.ndarray) -> float:
    """Otsu threshold on the excess-green values, floored at 0.1.

    Falls back to 0.1 when the values are near-constant or the Otsu split
    explains less than 5% of the variance.
    """
    values = exg.ravel()
    total_var = values.var()
    if total_var <= 1e-12:
        return FALLBACK_THRESHOLD
    t = float(threshold_otsu(values, nbins=256))
    lo, hi = values[values <= t], values[values > t]
    if len(lo) == 0 or len(hi) == 0:
        return FALLBACK_THRESHOLD
    w0, w1 = len(lo) / len(values), len(hi) / len(values)
    between = w0 * w1 * (hi.mean() - lo.mean()) ** 2
    if between / total_var < UNIMODAL_RATIO:
        return FALLBACK_THRESHOLD
    return max(t, FALLBACK_THRESHOLD)


def _morph(mask: np.ndarray) -> np.ndarray:
    st = np.ones((3, 3), dtype=bool)
    padded = np.pad(mask, 2, mode="edge")
    padded = ndimage.binary_opening(padded, structure=st)
    padded = ndimage.binary_closing(padded, structure=st)
    return padded[2:-2, 2:-2]


def segment_baseline(image: np.ndarray, min_area: int = DEFAULT_MIN_AREA) -> list[PlantInstance]:
    exg = excess_green(image)
    mask = _morph(exg > vegetation_threshold(exg))
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return []
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    instances = []
    for lab in range(1, n + 1):
        if sizes[lab] < min_area:
            continue
        comp = labels == lab
        score = float(np.clip(exg[comp].mean(), 0.0, 1.0))
        instances.append(PlantInstance.from_mask(comp, score))
    instances.sort(key=lambda inst: (inst.bbox[1], inst.bbox[0]))
    return instances


# ---------------------------------------------------------------------------
# external backend
# ---------------------------------------------------------------------------

def parse_instances_json(text: str, shape: tuple[int, int]) -> list[PlantInstance]:
    """Decode the external backend's instance list for an image of ``shape``."""
    try:
        items = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BackendError(f"backend returned invalid JSON: {exc}") from exc
    if not isinstance(items, list):
        raise BackendError("backend output must be a JSON list of instances")
    out = []
    for i, item in enumerate(items):
        try:
            mask = decode_rle(item["mask_rle"], shape)
            bbox = tuple(int(v) for v in item["bbox"])
            score = float(item["score"])
            if len(bbox) != 4:
                raise ValueError("bbox must have 4 entries")
            out.append(PlantInstance(mask, bbox, score))
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"instance {i}: schema violation ({exc})") from exc
    return out


def instances_to_json(instances: Iterable[PlantInstance]) -> str:
    return json.dumps([
        {"bbox": list(inst.bbox), "score": inst.score, "mask_rle": encode_rle(inst.mask)}
        for inst in instances
    ])


class CommandBackend:
    """Runs ``command <image.png>`` and reads the instance JSON from stdout."""

    def __init__(self, command: str | Sequence[str], timeout: float = 120.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ConfigError("external backend command is empty")
        self.timeout = timeout

    def __call__(self, image: np.ndarray) -> list[PlantInstance]:
        with tempfile.TemporaryDirectory() as tmp:
            path = save_image(image, Path(tmp) / "image.png")
            try:
                proc = subprocess.run(
                    [*self.command, str(path)], capture_output=True, text=True,
                    timeout=self.timeout,
                )
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise BackendError(f"external backend unreachable: {exc}") from exc
        if proc.returncode != 0:
            raise BackendError(
                f"external backend exited {proc.returncode}: {proc.stderr.strip()[:200]}"
            )
        return parse_instances_json(proc.stdout, image.shape[:2])


def segment(
    image: np.ndarray,
    backend: str = "baseline",
    *,
    min_area: int = DEFAULT_MIN_AREA,
    external: CommandBackend | None = None,
) -> list[PlantInstance]:
    image = validate_image(image)
    if backend == "baseline":
        return segment_baseline(image, min_area)
    if backend == "external":
        if external is None:
            raise ConfigError("external backend selected but no backend command configured")
        return external(image)
    raise ConfigError(f"unknown segmentation backend {backend!r}")


def plant_visible(instances: Sequence[PlantInstance], min_area: int = DEFAULT_MIN_AREA) -> bool:
    return any(inst.area >= min_area for inst in instances)


# ---------------------------------------------------------------------------
# traits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraitRecord:
    projected_leaf_area_px: int
    center_xy: tuple[float, float]
    width_px: int
    height_px: int
    bbox: tuple[int, int, int, int]
    source_image: str = ""
    stage: int = 0
    treatment: Treatment = Treatment.NONE
    score: float = 1.0
    height_unreliable: bool = False
    plot_id: str = ""

    def to_row(self) -> list:
        return [
            self.source_image, self.stage, Treatment(self.treatment).value,
            self.projected_leaf_area_px, repr(float(self.center_xy[0])),
            repr(float(self.center_xy[1])), self.width_px, self.height_px,
            repr(float(self.score)),
        ]


def _y_overlap(a, b) -> bool:
    return a[1] < b[3] and b[1] < a[3]


def extract_traits(
    instances: Sequence[PlantInstance], image_meta: ImageRecord | None = None
) -> list[TraitRecord]:
    """Area, bbox center, width (x extent) and height (y extent) per instance.

    Heights are flagged unreliable when another instance's box overlaps
    along y, where neighbouring plants of a row can merge.
    """
    records = []
    for i, inst in enumerate(instances):
        x0, y0, x1, y1 = inst.bbox
        overlap = any(_y_overlap(inst.bbox, o.bbox) for j, o in enumerate(instances) if j != i)
        records.append(TraitRecord(
            projected_leaf_area_px=int(inst.mask.sum()),
            center_xy=((x0 + x1) / 2, (y0 + y1) / 2),
            width_px=x1 - x0,
            height_px=y1 - y0,
            bbox=(x0, y0, x1, y1),
            source_image=image_meta.image_path if image_meta else "",
            stage=image_meta.stage if image_meta else 0,
            treatment=image_meta.treatment if image_meta else Treatment.NONE,
            score=inst.score,
            height_unreliable=overlap,
            plot_id=image_meta.plot_id if image_meta else "",
        ))
    return records


def select_center_plants(
    records: Iterable[TraitRecord], image_size: int, fraction: float = DEFAULT_CENTER_FRACTION
) -> list[TraitRecord]:
    """Keep records whose bbox center lies in the centered square window
    of side ``fraction * image_size`` (boundary inclusive)."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    mid = image_size / 2
    half = fraction * image_size / 2
    return [
        r for r in records
        if abs(r.center_xy[0] - mid) <= half and abs(r.center_xy[1] - mid) <= half
    ]


def traits_to_csv(records: Iterable[TraitRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRAIT_COLUMNS)
    for r in records:
        writer.writerow(r.to_row())
    return buf.getvalue()


def read_traits(path: str | Path) -> list[TraitRecord]:
    """Read a trait CSV. Bounding boxes are rebuilt from center and extent."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRAIT_COLUMNS:
            raise ValueError(f"{path}: header must be {','.join(TRAIT_COLUMNS)}")
        for row in reader:
            cx, cy = float(row["center_x"]), float(row["center_y"])
            w, h = int(row["width_px"]), int(row["height_px"])
            x0, y0 = int(round(cx - w / 2)), int(round(cy - h / 2))
            out.append(TraitRecord(
                projected_leaf_area_px=int(row["area_px"]), center_xy=(cx, cy),
                width_px=w, height_px=h, bbox=(x0, y0, x0 + w, y0 + h),
                source_image=row["source_image"], stage=int(row["stage"]),
                treatment=Treatment(row["treatment"]), score=float(row["score"]),
            ))
    return out
