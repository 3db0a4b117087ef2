"""Aligned cross-time pair construction and pair cleaning."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np
from scipy.spatial import cKDTree

from .datamodel import (
    DEFAULT_DISTANCE_THRESHOLD_M,
    UNKNOWN_PLOT,
    ImagePair,
    ImageRecord,
    PairManifest,
)
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


class Cleaning(str, Enum):
    DROP_APPEARING = "drop_appearing"
    DROP_DISAPPEARING = "drop_disappearing"


ALL_CLEANING = frozenset(Cleaning)


@dataclass(frozen=True)
class PairingConfig:
    horizon: int
    distance_threshold_m: float = DEFAULT_DISTANCE_THRESHOLD_M
    cleaning: frozenset = field(default=ALL_CLEANING)
    stage_unit: str = "week"

    def __post_init__(self):
        object.__setattr__(
            self, "cleaning", frozenset(Cleaning(c) for c in self.cleaning)
        )
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if not self.distance_threshold_m > 0:
            raise ConfigError("distance_threshold_m must be > 0")


def plots_compatible(a: ImageRecord, b: ImageRecord) -> bool:
    return a.plot_id == b.plot_id or UNKNOWN_PLOT in (a.plot_id, b.plot_id)


def build_pairs(
    records: Iterable[ImageRecord], config: PairingConfig, root=None
) -> PairManifest:
    """Pair every record with its nearest same-scene record ``horizon`` stages later.

    A candidate qualifies when its stage is exactly ``horizon`` later, its
    image center lies within ``distance_threshold_m`` (inclusive) and its
    plot id is compatible. Among qualifying candidates the nearest wins,
    ties going to the lexicographically smallest image path.
    """
    records = sorted(records, key=lambda r: r.image_path)
    by_stage: dict[int, list[ImageRecord]] = defaultdict(list)
    for r in records:
        by_stage[r.stage].append(r)

    empty = PairManifest(
        pairs=(), horizon=config.horizon,
        distance_threshold_m=config.distance_threshold_m,
        stage_unit=config.stage_unit, root=root,
    )
    if len(by_stage) < 2:
        log.warning(
            "build_pairs: records span %d distinct stage(s); no pairs possible",
            len(by_stage),
        )
        return empty

    trees = {
        s: cKDTree(np.array([[r.easting_m, r.northing_m] for r in rs]))
        for s, rs in by_stage.items()
    }
    pairs = []
    thr = config.distance_threshold_m
    for stage in sorted(by_stage):
        target = stage + config.horizon
        if target not in by_stage:
            continue
        candidates = by_stage[target]
        tree = trees[target]
        for a in by_stage[stage]:
            # Small slack on the search radius; the exact test below decides.
            idx = tree.query_ball_point([a.easting_m, a.northing_m], thr * (1 + 1e-9) + 1e-12)
            best = None
            for i in idx:
                b = candidates[i]
                d = a.distance_to(b)
                if d > thr or not plots_compatible(a, b):
                    continue
                key = (d, b.image_path)
                if best is None or key < best[0]:
                    best = (key, b)
            if best is not None:
                pairs.append(ImagePair(a, best[1], config.horizon))
    pairs.sort(key=lambda p: (p.input.stage, p.input.image_path))
    return PairManifest(
        pairs=tuple(pairs), horizon=config.horizon,
        distance_threshold_m=config.distance_threshold_m,
        stage_unit=config.stage_unit, root=root,
    )


def clean_pairs(
    manifest: PairManifest,
    visibility: Mapping[str, bool],
    cleaning: Iterable[Cleaning | str] = ALL_CLEANING,
) -> PairManifest:
    """Drop pairs where the plant appears in or disappears from the frame.

    Pairs with the plant visible (even partially) in both images are kept.
    """
    cleaning = {Cleaning(c) for c in cleaning}
    kept = []
    for p in manifest.pairs:
        vis = []
        for rec in (p.input, p.reference):
            if rec.image_path not in visibility:
                raise DataError(f"no visibility entry for image {rec.image_path}")
            vis.append(bool(visibility[rec.image_path]))
        v_in, v_ref = vis
        if Cleaning.DROP_APPEARING in cleaning and v_ref and not v_in:
            continue
        if Cleaning.DROP_DISAPPEARING in cleaning and v_in and not v_ref:
            continue
        kept.append(p)
    return manifest.replace_pairs(kept)
