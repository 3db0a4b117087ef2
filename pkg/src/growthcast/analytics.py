"""Generated-vs-reference trait comparison and report emission."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datamodel import TREATMENT_ORDER, Treatment
from .errors import DataError
from .fid import FidTriple
from .traits import TraitRecord

STD_DIVISOR = "n"
POOLED = "all"


@dataclass(frozen=True)
class PairedObservation:
    reference_area_px: float
    generated_area_px: float
    stage: int = 0
    treatment: Treatment = Treatment.NONE

    def __post_init__(self):
        object.__setattr__(self, "treatment", Treatment(self.treatment))
        if self.reference_area_px < 0 or self.generated_area_px < 0:
            raise ValueError("areas must be >= 0")


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    r_squared: float
    n: int

    def equation(self) -> str:
        sign = "+" if self.intercept >= 0 else "-"
        return (f"y = {self.slope:.2f}x {sign} {abs(self.intercept):.2f}, "
                f"R² = {self.r_squared:.2f}")


@dataclass(frozen=True)
class StageStats:
    stage: int
    treatment: Treatment | None
    mean_area_px: float
    std_area_px: float
    n: int

    @property
    def group(self) -> str:
        return POOLED if self.treatment is None else Treatment(self.treatment).value


def fit_regression(observations: Sequence[PairedObservation]) -> RegressionResult:
    """Least squares of generated area (y) on reference area (x)."""
    if len(observations) < 2:
        raise DataError(f"regression needs at least 2 observations, got {len(observations)}")
    x = np.array([o.reference_area_px for o in observations], dtype=np.float64)
    y = np.array([o.generated_area_px for o in observations], dtype=np.float64)
    xm, ym = x.mean(), y.mean()
    dx, dy = x - xm, y - ym
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise DataError("regression is degenerate: all reference areas are equal")
    slope = float(dx @ dy) / sxx
    intercept = float(ym - slope * xm)
    resid = y - (slope * x + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(dy @ dy)
    if ss_tot == 0.0:
        r2 = 0.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return RegressionResult(slope, intercept, r2, len(observations))


def stage_statistics(
    records: Iterable[TraitRecord | tuple], group_by_treatment: bool = True
) -> list[StageStats]:
    """Mean and population std of area per stage (and treatment).

    Accepts trait records (area = projected leaf area) or plain
    ``(stage, treatment, area)`` tuples.
    """
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in records:
        if isinstance(r, TraitRecord):
            stage, treatment, area = r.stage, Treatment(r.treatment), r.projected_leaf_area_px
        else:
            stage, treatment, area = r
            treatment = Treatment(treatment)
        key = (stage, treatment if group_by_treatment else None)
        groups[key].append(float(area))
    if not groups:
        raise DataError("stage_statistics needs at least one record")
    order = {t: i for i, t in enumerate(list(TREATMENT_ORDER) + [Treatment.NONE])}
    out = []
    for (stage, treatment), areas in sorted(
        groups.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else order[kv[0][1]])
    ):
        a = np.array(areas)
        out.append(StageStats(stage, treatment, float(a.mean()), float(a.std(ddof=0)), len(a)))
    return out


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class ReportBundle:
    out_dir: Path
    summary: dict
    files: list[Path]


def _stats_dict(stats: Sequence[StageStats]) -> list[dict]:
    return [
        {"stage": s.stage, "treatment": s.group, "mean_area_px": s.mean_area_px,
         "std_area_px": s.std_area_px, "n": s.n}
        for s in stats
    ]


def _fix_floats(obj):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        return obj
    if isinstance(obj, dict):
        return {k: _fix_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_fix_floats(v) for v in obj]
    return obj


def _svg_settings():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "growthcast"
    plt.rcParams["svg.fonttype"] = "path"
    return plt


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def _plot_scatter(plt, obs: Sequence[PairedObservation], reg: RegressionResult, title: str, path: Path):
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    x = np.array([o.reference_area_px for o in obs])
    y = np.array([o.generated_area_px for o in obs])
    ax.scatter(x, y, s=12, alpha=0.7)
    hi = float(max(x.max(), y.max(), 1.0)) * 1.05
    ax.plot([0, hi], [0, hi], color="grey", linestyle="--", linewidth=1, label="identity")
    ax.plot([0, hi], [reg.intercept, reg.intercept + reg.slope * hi], color="C3", label="fit")
    ax.text(0.04, 0.96, reg.equation(), transform=ax.transAxes, va="top")
    ax.set_xlabel("reference area [px]")
    ax.set_ylabel("generated area [px]")
    ax.set_xlim(0, hi)
    ax.set_ylim(0, hi)
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def _plot_growth(plt, reference: Sequence[StageStats], generated: Sequence[StageStats], path: Path):
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharey=True)
    for ax, stats, title in ((axes[0], reference, "reference"), (axes[1], generated, "generated")):
        by_group: dict[str, list[StageStats]] = defaultdict(list)
        for s in stats:
            by_group[s.group].append(s)
        for group in sorted(by_group):
            rows = by_group[group]
            ax.errorbar([r.stage for r in rows], [r.mean_area_px for r in rows],
                        yerr=[r.std_area_px for r in rows], capsize=3, marker="o", label=group)
        ax.set_title(title)
        ax.set_xlabel("stage")
    axes[0].set_ylabel("mean area [px]")
    axes[1].legend(loc="upper left")
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def render_report(
    observations: Mapping[str, Sequence[PairedObservation]],
    reference_stats: Sequence[StageStats],
    generated_stats: Sequence[StageStats],
    fid: FidTriple | None,
    out_dir: str | Path,
    *,
    train_pair_counts: Mapping[int, int] | None = None,
    extra: Mapping | None = None,
) -> ReportBundle:
    """Write ``summary.json``, scatter and growth-curve SVGs with CSV sidecars.

    ``observations`` maps a treatment label to its paired observations;
    groups with fewer than two points or constant reference area are
    listed under ``skipped``. Stages whose training-pair count is zero are
    flagged in ``stages_without_training_pairs``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plt = _svg_settings()
    files: list[Path] = []
    regressions, skipped = {}, []
    for label in sorted(observations):
        obs = list(observations[label])
        try:
            reg = fit_regression(obs)
        except DataError:
            skipped.append(label)
            continue
        regressions[label] = reg
        svg = out_dir / f"scatter_{label}.svg"
        _plot_scatter(plt, obs, reg, label, svg)
        sidecar = out_dir / f"scatter_{label}.csv"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["reference_area_px", "generated_area_px", "stage", "treatment"])
        for o in obs:
            w.writerow([repr(float(o.reference_area_px)), repr(float(o.generated_area_px)),
                        o.stage, o.treatment.value])
        sidecar.write_text(buf.getvalue())
        files += [svg, sidecar]

    growth_svg = out_dir / "growth_curves.svg"
    _plot_growth(plt, reference_stats, generated_stats, growth_svg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "stage", "treatment", "mean_area_px", "std_area_px", "n"])
    for source, stats in (("reference", reference_stats), ("generated", generated_stats)):
        for s in stats:
            w.writerow([source, s.stage, s.group, repr(s.mean_area_px), repr(s.std_area_px), s.n])
    growth_csv = out_dir / "growth_curves.csv"
    growth_csv.write_text(buf.getvalue())
    files += [growth_svg, growth_csv]

    summary = {
        "regressions": {
            k: {**asdict(v), "annotation": v.equation()} for k, v in regressions.items()
        },
        "skipped": skipped,
        "stage_stats": {
            "reference": _stats_dict(reference_stats),
            "generated": _stats_dict(generated_stats),
        },
        "std_divisor": STD_DIVISOR,
        "fid": None if fid is None else {**fid.to_dict(), "verdict": fid.verdict()},
    }
    if train_pair_counts is not None:
        summary["stages_without_training_pairs"] = sorted(
            int(s) for s, n in train_pair_counts.items() if n == 0
        )
    if extra:
        summary.update(extra)
    summary = _fix_floats(summary)
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files.append(path)
    return ReportBundle(out_dir, summary, files)
