import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_record
from growthcast.errors import DataError
from growthcast.pairing import (
    Cleaning,
    PairingConfig,
    build_pairs,
    clean_pairs,
    plots_compatible,
)


def brute_force_pairs(records, horizon, thr):
    """O(n^2): nearest qualifying partner per input, ties by image path."""
    out = set()
    for a in records:
        best = None
        for b in records:
            if b.stage - a.stage != horizon or not plots_compatible(a, b):
                continue
            d = np.hypot(a.easting_m - b.easting_m, a.northing_m - b.northing_m)
            if d <= thr and (best is None or (d, b.image_path) < best[0]):
                best = ((d, b.image_path), b)
        if best is not None:
            out.add((a.image_path, best[1].image_path))
    return out


def random_records(rng, n, stages, extent=0.1, plots=("p1",)):
    return [
        make_record(f"img_{i:04d}.png", int(rng.integers(stages)),
                    e=float(rng.uniform(0, extent)), n=float(rng.uniform(0, extent)),
                    plot=str(rng.choice(plots)))
        for i in range(n)
    ]


def test_close_pair_included():
    recs = [make_record("a.png", 1), make_record("b.png", 4, e=0.01)]
    m = build_pairs(recs, PairingConfig(horizon=3))
    assert [(p.input.image_path, p.reference.image_path) for p in m] == [("a.png", "b.png")]


def test_far_pair_excluded():
    recs = [make_record("a.png", 1), make_record("b.png", 4, e=0.03)]
    assert len(build_pairs(recs, PairingConfig(horizon=3))) == 0


def test_threshold_inclusive():
    recs = [make_record("a.png", 1), make_record("b.png", 4, e=0.015)]
    assert len(build_pairs(recs, PairingConfig(horizon=3, distance_threshold_m=0.015))) == 1


def test_nearest_wins_and_ties_break_by_path():
    recs = [make_record("a.png", 0), make_record("z.png", 1, e=0.005),
            make_record("m.png", 1, e=-0.005), make_record("far.png", 1, e=0.015)]
    m = build_pairs(recs, PairingConfig(horizon=1))
    assert [p.reference.image_path for p in m] == ["m.png"]


def test_single_stage_warns(caplog):
    recs = [make_record("a.png", 1), make_record("b.png", 1)]
    with caplog.at_level(logging.WARNING):
        m = build_pairs(recs, PairingConfig(horizon=1))
    assert len(m) == 0
    assert "stage" in caplog.text


def test_fifty_random_records_match_brute_force(rng):
    recs = random_records(rng, 50, 4, extent=0.08)
    m = build_pairs(recs, PairingConfig(horizon=1))
    assert {p.key for p in m} == brute_force_pairs(recs, 1, 0.02)
    assert len(m) > 0


def test_output_sorted_and_predicates_hold(rng):
    recs = random_records(rng, 200, 5, extent=0.2, plots=("p1", "p2", "unknown"))
    m = build_pairs(recs, PairingConfig(horizon=2))
    keys = [(p.input.stage, p.input.image_path) for p in m]
    assert keys == sorted(keys)
    for p in m:
        assert p.reference.stage - p.input.stage == 2
        assert p.input.distance_to(p.reference) <= 0.02
        assert plots_compatible(p.input, p.reference)
    assert len({p.input.image_path for p in m}) == len(m)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), horizon=st.integers(1, 3))
def test_permutation_invariant(seed, horizon):
    rng = np.random.default_rng(seed)
    recs = random_records(rng, 40, 4, extent=0.05)
    shuffled = [recs[i] for i in rng.permutation(len(recs))]
    cfg = PairingConfig(horizon=horizon)
    assert build_pairs(recs, cfg) == build_pairs(shuffled, cfg)
    assert {p.key for p in build_pairs(recs, cfg)} == brute_force_pairs(recs, horizon, 0.02)


def test_config_validation():
    with pytest.raises(ValueError):
        PairingConfig(horizon=0)
    with pytest.raises(ValueError):
        PairingConfig(horizon=1, distance_threshold_m=0)


def _pair_manifest():
    recs = [make_record("a.png", 0), make_record("b.png", 1)]
    return build_pairs(recs, PairingConfig(horizon=1))


def test_clean_drops_appearing_plant():
    m = _pair_manifest()
    out = clean_pairs(m, {"a.png": False, "b.png": True}, {Cleaning.DROP_APPEARING})
    assert len(out) == 0
    # not dropped when the rule is off
    assert len(clean_pairs(m, {"a.png": False, "b.png": True}, {Cleaning.DROP_DISAPPEARING})) == 1


def test_clean_drops_harvested_plant():
    m = _pair_manifest()
    assert len(clean_pairs(m, {"a.png": True, "b.png": False})) == 0


def test_clean_keeps_visible_both():
    m = _pair_manifest()
    assert len(clean_pairs(m, {"a.png": True, "b.png": True})) == 1


def test_clean_missing_visibility_names_image():
    with pytest.raises(DataError, match="b.png"):
        clean_pairs(_pair_manifest(), {"a.png": True})


def test_clean_matches_harvest_log(small_dataset):
    m = build_pairs(small_dataset.records, PairingConfig(horizon=1))
    vis = small_dataset.visibility()
    out = clean_pairs(m, vis)
    plants = {p.plot_id: p for p in small_dataset.plants}
    expected = set()
    for p in m.pairs:
        plant = plants[p.input.plot_id]
        a, b = plant.visible_at(p.input.stage), plant.visible_at(p.reference.stage)
        if a == b:
            expected.add(p.key)
    assert {p.key for p in out} == expected
    removed = {p.key for p in m} - {p.key for p in out}
    assert removed and expected
    assert {p.key for p in out} <= {p.key for p in m}
