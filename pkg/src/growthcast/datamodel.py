"""Core domain types and manifest serialization.

A manifest on disk is a directory holding three files:

* ``records.csv``   one image observation per row
* ``pairs.jsonl``   one aligned pair per line, referencing record paths
* ``manifest.json`` dataset-level metadata (horizon, threshold, stage unit)

Stage is a bare integer. Its unit ("week" or "day") is metadata only.
"""

from __future__ import annotations

import csv
import io
import json
import os
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ManifestParseError, ManifestValidationError

RECORD_COLUMNS = (
    "image_path",
    "plot_id",
    "stage",
    "easting_m",
    "northing_m",
    "treatment",
    "split",
)
UNKNOWN_PLOT = "unknown"
DEFAULT_DISTANCE_THRESHOLD_M = 0.02
STAGE_UNITS = ("week", "day")

RECORDS_FILE = "records.csv"
PAIRS_FILE = "pairs.jsonl"
META_FILE = "manifest.json"


class Treatment(str, Enum):
    """Field-management code: irrigation (i) and fertilization (f), each +/-."""

    IPFP = "i+f+"
    IPFM = "i+f-"
    IMFP = "i-f+"
    IMFM = "i-f-"
    NONE = "none"

    def __str__(self) -> str:
        return self.value


# Canonical display order, also the order of expected plant vigour.
TREATMENT_ORDER = (Treatment.IPFP, Treatment.IPFM, Treatment.IMFP, Treatment.IMFM)


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class ImageRecord:
    """One geo-referenced observation of a field plot at a growth stage."""

    image_path: str
    plot_id: str
    stage: int
    easting_m: float
    northing_m: float
    treatment: Treatment = Treatment.NONE
    split: Split = Split.TRAIN

    def __post_init__(self):
        object.__setattr__(self, "treatment", Treatment(self.treatment))
        object.__setattr__(self, "split", Split(self.split))
        if not self.image_path:
            raise ManifestValidationError("image_path must be non-empty")
        if isinstance(self.stage, bool) or not isinstance(self.stage, int):
            raise ManifestValidationError(
                f"{self.image_path}: stage must be an integer, got {self.stage!r}"
            )
        if self.stage < 0:
            raise ManifestValidationError(
                f"{self.image_path}: stage must be >= 0, got {self.stage}"
            )
        if not (math.isfinite(self.easting_m) and math.isfinite(self.northing_m)):
            raise ManifestValidationError(
                f"{self.image_path}: coordinates must be finite"
            )

    def distance_to(self, other: "ImageRecord") -> float:
        return math.hypot(
            self.easting_m - other.easting_m, self.northing_m - other.northing_m
        )


@dataclass(frozen=True)
class ImagePair:
    """An early-stage input (domain A) aligned with a later reference (domain B)."""

    input: ImageRecord
    reference: ImageRecord
    horizon: int

    def __post_init__(self):
        name = f"pair ({self.input.image_path} -> {self.reference.image_path})"
        if self.horizon <= 0:
            raise ManifestValidationError(f"{name}: horizon must be > 0")
        if self.reference.stage - self.input.stage != self.horizon:
            raise ManifestValidationError(
                f"{name}: reference.stage - input.stage = "
                f"{self.reference.stage - self.input.stage} != horizon {self.horizon}"
            )
        a, b = self.input.plot_id, self.reference.plot_id
        if a != b and UNKNOWN_PLOT not in (a, b):
            raise ManifestValidationError(
                f"{name}: plot_id mismatch ({a!r} vs {b!r})"
            )

    @property
    def treatment(self) -> Treatment:
        if self.input.treatment is not Treatment.NONE:
            return self.input.treatment
        return self.reference.treatment

    @property
    def key(self) -> tuple[str, str]:
        return (self.input.image_path, self.reference.image_path)


@dataclass(frozen=True)
class PairManifest:
    pairs: tuple[ImagePair, ...]
    horizon: int
    distance_threshold_m: float = DEFAULT_DISTANCE_THRESHOLD_M
    stage_unit: str = "week"
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if self.root is not None:
            object.__setattr__(self, "root", Path(self.root))
        if self.stage_unit not in STAGE_UNITS:
            raise ManifestValidationError(
                f"stage_unit must be one of {STAGE_UNITS}, got {self.stage_unit!r}"
            )
        if not self.distance_threshold_m > 0:
            raise ManifestValidationError("distance_threshold_m must be > 0")
        seen = set()
        for p in self.pairs:
            if p.horizon != self.horizon:
                raise ManifestValidationError(
                    f"pair ({p.input.image_path} -> {p.reference.image_path}): "
                    f"horizon {p.horizon} != manifest horizon {self.horizon}"
                )
            if p.key in seen:
                raise ManifestValidationError(
                    f"duplicate pair ({p.input.image_path} -> {p.reference.image_path})"
                )
            seen.add(p.key)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def records(self) -> list[ImageRecord]:
        """Unique records referenced by the pairs, sorted by image path."""
        by_path: dict[str, ImageRecord] = {}
        for p in self.pairs:
            for r in (p.input, p.reference):
                prev = by_path.setdefault(r.image_path, r)
                if prev != r:
                    raise ManifestValidationError(
                        f"conflicting records for image {r.image_path}"
                    )
        return [by_path[k] for k in sorted(by_path)]

    def resolve(self, image_path: str) -> Path:
        p = Path(image_path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def replace_pairs(self, pairs: Iterable[ImagePair]) -> "PairManifest":
        return PairManifest(
            pairs=tuple(pairs),
            horizon=self.horizon,
            distance_threshold_m=self.distance_threshold_m,
            stage_unit=self.stage_unit,
            root=self.root,
        )


# ---------------------------------------------------------------------------
# records CSV
# ---------------------------------------------------------------------------

def _parse_row(row: list[str], lineno: int, source: str) -> ImageRecord:
    if len(row) != len(RECORD_COLUMNS):
        raise ManifestParseError(
            f"{source}: row {lineno}: expected {len(RECORD_COLUMNS)} columns, "
            f"got {len(row)}"
        )
    values = dict(zip(RECORD_COLUMNS, row))

    def bad(col, why):
        return ManifestParseError(
            f"{source}: row {lineno}, column {col!r}: {why} (value {values[col]!r})"
        )

    try:
        stage = int(values["stage"])
    except ValueError:
        raise bad("stage", "not an integer") from None
    coords = {}
    for col in ("easting_m", "northing_m"):
        try:
            coords[col] = float(values[col])
        except ValueError:
            raise bad(col, "not a number") from None
    try:
        treatment = Treatment(values["treatment"])
    except ValueError:
        raise bad("treatment", "unknown treatment code") from None
    try:
        split = Split(values["split"])
    except ValueError:
        raise bad("split", "must be 'train' or 'test'") from None
    try:
        return ImageRecord(
            image_path=values["image_path"],
            plot_id=values["plot_id"],
            stage=stage,
            treatment=treatment,
            split=split,
            **coords,
        )
    except ManifestValidationError as exc:
        raise ManifestValidationError(f"{source}: row {lineno}: {exc}") from None


def read_records(path: str | Path) -> list[ImageRecord]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RECORD_COLUMNS:
            raise ManifestParseError(
                f"{path}: row 1: header must be {','.join(RECORD_COLUMNS)}, "
                f"got {header!r}"
            )
        records = [_parse_row(row, i, str(path)) for i, row in enumerate(reader, start=2)]
    dup = [k for k, n in Counter(r.image_path for r in records).items() if n > 1]
    if dup:
        raise ManifestValidationError(f"{path}: duplicate image_path {dup[0]!r}")
    return records


def records_to_csv(records: Iterable[ImageRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_COLUMNS)
    for r in records:
        writer.writerow([
            r.image_path, r.plot_id, r.stage, repr(float(r.easting_m)),
            repr(float(r.northing_m)), r.treatment.value, r.split.value,
        ])
    return buf.getvalue()


def write_records(records: Iterable[ImageRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(records_to_csv(records))
    return path


# ---------------------------------------------------------------------------
# manifest directory
# ---------------------------------------------------------------------------

def save_manifest(manifest: PairManifest, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_records(manifest.records(), out_dir / RECORDS_FILE)
    lines = [
        json.dumps({
            "input": p.input.image_path,
            "reference": p.reference.image_path,
            "horizon": p.horizon,
        })
        for p in manifest.pairs
    ]
    (out_dir / PAIRS_FILE).write_text("".join(line + "\n" for line in lines))
    meta = {
        "horizon": manifest.horizon,
        "distance_threshold_m": manifest.distance_threshold_m,
        "stage_unit": manifest.stage_unit,
    }
    if manifest.root is not None:
        # relative to the manifest directory so the pair can move together
        meta["image_root"] = os.path.relpath(Path(manifest.root).resolve(), out_dir.resolve())
    (out_dir / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out_dir


def load_manifest(
    path: str | Path, records_path: str | Path | None = None
) -> PairManifest:
    """Load a manifest from a directory or from its ``pairs.jsonl`` file.

    Records are looked up in ``records.csv`` next to the pairs file unless
    ``records_path`` is given. Image paths resolve against ``image_root``
    from the metadata file when present (relative roots are taken relative
    to the manifest directory), otherwise the manifest directory.
    """
    path = Path(path)
    if path.is_dir():
        pairs_path = path / PAIRS_FILE
    else:
        pairs_path = path
    base = pairs_path.parent
    if not pairs_path.exists():
        raise ManifestParseError(f"{pairs_path}: file not found")
    records = read_records(records_path or base / RECORDS_FILE)
    by_path = {r.image_path: r for r in records}

    meta = {}
    if (base / META_FILE).exists():
        try:
            meta = json.loads((base / META_FILE).read_text())
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"{base / META_FILE}: {exc}") from None

    pairs = []
    src = str(pairs_path)
    with open(pairs_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"{src}: row {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestParseError(f"{src}: row {lineno}: expected a JSON object")
            for col in ("input", "reference", "horizon"):
                if col not in obj:
                    raise ManifestParseError(f"{src}: row {lineno}, column {col!r}: missing")
            horizon = obj["horizon"]
            if isinstance(horizon, bool) or not isinstance(horizon, int):
                raise ManifestParseError(
                    f"{src}: row {lineno}, column 'horizon': not an integer ({horizon!r})"
                )
            ends = []
            for col in ("input", "reference"):
                rec = by_path.get(obj[col])
                if rec is None:
                    raise ManifestParseError(
                        f"{src}: row {lineno}, column {col!r}: "
                        f"image {obj[col]!r} not in records"
                    )
                ends.append(rec)
            pairs.append(ImagePair(ends[0], ends[1], horizon))

    if "horizon" in meta:
        horizon = int(meta["horizon"])
    elif pairs:
        horizon = pairs[0].horizon
    else:
        raise ManifestParseError(f"{src}: empty manifest without horizon metadata")
    root = Path(meta["image_root"]) if "image_root" in meta else base
    if not root.is_absolute():
        root = base / root
    return PairManifest(
        pairs=tuple(pairs),
        horizon=horizon,
        distance_threshold_m=float(
            meta.get("distance_threshold_m", DEFAULT_DISTANCE_THRESHOLD_M)
        ),
        stage_unit=meta.get("stage_unit", "week"),
        root=root,
    )


# ---------------------------------------------------------------------------
# counts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CountTable:
    """Pair counts keyed by (input stage, reference stage) and treatment."""

    cells: Mapping[tuple[int, int, Treatment], int]

    @property
    def transitions(self) -> list[tuple[int, int]]:
        return sorted({(a, b) for a, b, _ in self.cells})

    @property
    def treatments(self) -> list[Treatment]:
        present = {t for _, _, t in self.cells}
        order = list(TREATMENT_ORDER) + [Treatment.NONE]
        return [t for t in order if t in present]

    def get(self, transition: tuple[int, int], treatment: Treatment | str) -> int:
        return self.cells.get((*transition, Treatment(treatment)), 0)

    def row(self, transition: tuple[int, int]) -> dict[Treatment, int]:
        return {t: self.get(transition, t) for t in self.treatments}

    def row_total(self, transition: tuple[int, int]) -> int:
        return sum(n for (a, b, _), n in self.cells.items() if (a, b) == transition)

    def column_total(self, treatment: Treatment | str) -> int:
        treatment = Treatment(treatment)
        return sum(n for (_, _, t), n in self.cells.items() if t == treatment)

    @property
    def total(self) -> int:
        return sum(self.cells.values())

    def __len__(self) -> int:
        return len(self.cells)

    def to_csv(self) -> str:
        treatments = self.treatments
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["transition", *[t.value for t in treatments], "total"])
        for tr in self.transitions:
            writer.writerow(
                [f"{tr[0]}->{tr[1]}", *[self.get(tr, t) for t in treatments],
                 self.row_total(tr)]
            )
        writer.writerow(
            ["total", *[self.column_total(t) for t in treatments], self.total]
        )
        return buf.getvalue()


def manifest_counts(manifest: PairManifest) -> CountTable:
    counts = Counter(
        (p.input.stage, p.reference.stage, p.treatment) for p in manifest.pairs
    )
    return CountTable(dict(counts))
