"""``growthcast`` command-line entry point.

Every command resolves a RunConfig (defaults < profile < ``--config`` file
< environment < flags), writes it to ``<out>/run_config.txt`` and then runs
one module pipeline. Failures print a single JSON line on stderr and exit
with the code of the error class.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .config import RunConfig, resolve_config
from .errors import (
    ConfigError,
    DataError,
    GrowthcastError,
    NumericError,
)

log = logging.getLogger("growthcast")

EXIT_CODES = """exit codes:
  0  success
  2  configuration error (bad flag, unknown key, invalid value)
  3  data error (missing or malformed input, empty manifest, shape mismatch)
  4  numeric error (non-finite loss, non-PSD covariance)
  5  backend error (embedding model or external segmenter failed)
"""
LOG_FILE = "growthcast.log"
PREDICTIONS_FILE = "predictions.csv"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _emit_error(exc: BaseException, code: int) -> None:
    line = {"error": type(exc).__name__, "exit_code": code, "message": " ".join(str(exc).split())}
    print(json.dumps(line), file=sys.stderr)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _parse_sets(items: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _resolve(args, flags: dict) -> RunConfig:
    merged = {"seed": args.seed, "workers": args.workers, "profile": args.profile}
    merged.update(_parse_sets(args.set))
    # unset command flags must not mask --set values
    merged.update({k: v for k, v in flags.items() if v is not None})
    return resolve_config(config_file=args.config, flags=merged)


def _setup_logging(out_dir: Path, verbose: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger("growthcast")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fh = logging.FileHandler(out_dir / LOG_FILE, mode="w")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(fh)
    if verbose:
        sh = logging.StreamHandler(sys.stderr)
        sh.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        root.addHandler(sh)


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _list_pngs(directory: str | Path, what: str) -> list[Path]:
    d = _require_file(directory, what)
    if d.is_file():
        return [d]
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png" and not p.name.endswith(".mask.png"))
    if not files:
        raise DataError(f"{what} {d} contains no PNG images")
    return files


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args, out: Path) -> None:
    from .pipeline import synth_config
    from .synthcrop import generate_dataset

    ds = generate_dataset(synth_config(cfg), out, workers=cfg["workers"])
    print(f"wrote {len(ds.records)} records for {len(ds.plants)} plants to {ds.records_path}")


def cmd_pair(cfg: RunConfig, args, out: Path) -> None:
    from .datamodel import manifest_counts, read_records, save_manifest
    from .pairing import build_pairs, clean_pairs
    from .pipeline import pairing_config, segmenter, visibility_map
    from .preprocess import load_and_pad

    records_path = _require_file(args.records, "records file")
    root = Path(args.image_root) if args.image_root else records_path.parent
    records = read_records(records_path)
    manifest = build_pairs(records, pairing_config(cfg), root=root)
    if cfg["pair.clean"] and len(manifest):
        seg = segmenter(cfg)
        images = {r.image_path: load_and_pad(manifest.resolve(r.image_path)) for r in manifest.records()}
        manifest = clean_pairs(manifest, visibility_map(images, seg, cfg["segment.min_area"]))
    save_manifest(manifest, out)
    counts = manifest_counts(manifest)
    (out / "counts.csv").write_text(counts.to_csv())
    print(f"wrote {len(manifest)} pairs to {out}")


def _train_split(manifest):
    from .datamodel import Split

    return manifest.replace_pairs(p for p in manifest.pairs if p.input.split == Split.TRAIN)


def cmd_train(cfg: RunConfig, args, out: Path) -> None:
    from .cgan import save_checkpoint, train, write_history
    from .datamodel import load_manifest
    from .pipeline import augment_config, build_model

    manifest = _train_split(load_manifest(_require_file(args.pairs, "pair manifest")))
    if len(manifest) == 0:
        raise DataError("pair manifest has no training pairs")
    model = build_model(cfg)
    ckpt_dir = out / "checkpoints" if cfg["train.checkpoint_every"] else None
    train(model, manifest, augment_config=augment_config(cfg), checkpoint_dir=ckpt_dir)
    save_checkpoint(model, out / "model.ckpt")
    write_history(model.history, out / "history.csv")
    print(f"trained {cfg['train.epochs']} epochs on {len(manifest)} pairs; wrote {out / 'model.ckpt'}")


def cmd_predict(cfg: RunConfig, args, out: Path) -> None:
    """Generate the reference stage for each selected pair.

    Writes the images, a records CSV describing them (metadata of the
    reference they stand in for) and ``predictions.csv`` mapping each
    generated file to its input and reference.
    """
    from dataclasses import replace

    from .cgan import load_checkpoint, predict
    from .datamodel import Split, load_manifest, write_records
    from .preprocess import load_and_pad

    model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    manifest = load_manifest(_require_file(args.pairs, "pair manifest"))
    pairs = [p for p in manifest.pairs if args.split == "all" or p.input.split == Split(args.split)]
    if not pairs:
        raise DataError(f"no pairs in split {args.split!r}")
    names = [f"{Path(p.reference.image_path).stem}_pred.png" for p in pairs]
    inputs = [load_and_pad(manifest.resolve(p.input.image_path)) for p in pairs]
    predict(model, inputs, stochastic=cfg["predict.stochastic"], out_dir=out / "images", names=names)
    write_records(
        [replace(p.reference, image_path=f"images/{n}") for p, n in zip(pairs, names)],
        out / "records.csv",
    )
    with open(out / PREDICTIONS_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generated_path", "input_path", "reference_path"])
        for p, n in zip(pairs, names):
            w.writerow([f"images/{n}", str(manifest.resolve(p.input.image_path)),
                        str(manifest.resolve(p.reference.image_path))])
    print(f"wrote {len(pairs)} generated images to {out / 'images'}")


def cmd_segment(cfg: RunConfig, args, out: Path) -> None:
    from .datamodel import read_records
    from .pipeline import segmenter
    from .preprocess import load_and_pad
    from .traits import extract_traits, select_center_plants, traits_to_csv

    seg = segmenter(cfg)
    if args.records:
        records_path = _require_file(args.records, "records file")
        root = Path(args.image_root) if args.image_root else records_path.parent
        items = [(root / r.image_path, r) for r in read_records(records_path)]
    else:
        items = [(p, None) for p in _list_pngs(args.images, "image directory")]
    rows = []
    for path, meta in items:
        image = load_and_pad(_require_file(path, "image"))
        traits = extract_traits(seg(image), meta)
        if not args.all_plants:
            traits = select_center_plants(traits, image.shape[0], cfg["segment.center_fraction"])
        if meta is None:
            from dataclasses import replace

            traits = [replace(t, source_image=path.name) for t in traits]
        rows.extend(traits)
    (out / "traits.csv").write_text(traits_to_csv(rows))
    print(f"wrote {len(rows)} trait rows for {len(items)} images to {out / 'traits.csv'}")


def cmd_evaluate(cfg: RunConfig, args, out: Path) -> None:
    from .fid import fid_protocol, provider_from_source
    from .preprocess import load_and_pad

    def load(d, what):
        return [load_and_pad(p) for p in _list_pngs(d, what)]

    provider = provider_from_source(cfg["fid.model_source"])
    triple = fid_protocol(
        provider,
        load(args.reference_test, "reference-test directory"),
        load(args.generated, "generated directory"),
        load(args.reference_train, "reference-train directory"),
    )
    payload = {**triple.to_dict(), "verdict": triple.verdict(), "embedding": repr(provider)}
    (out / "fid.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(triple.verdict())


def _areas_by_image(path: Path) -> dict[str, tuple[int, object, int]]:
    """Largest area per source image: {image: (stage, treatment, area)}."""
    from .traits import read_traits

    best: dict[str, tuple[int, object, int]] = {}
    for t in read_traits(path):
        prev = best.get(t.source_image)
        if prev is None or t.projected_leaf_area_px > prev[2]:
            best[t.source_image] = (t.stage, t.treatment, t.projected_leaf_area_px)
    return best


def cmd_report(cfg: RunConfig, args, out: Path) -> None:
    """Pair generated and reference traits through ``predictions.csv``.

    Images without a detected plant count as area 0.
    """
    from .analytics import POOLED, PairedObservation, render_report, stage_statistics
    from .datamodel import TREATMENT_ORDER, read_records
    from .fid import FidTriple

    preds_path = _require_file(args.predictions, "predictions file")
    gen_areas = _areas_by_image(_require_file(args.generated_traits, "generated traits"))
    ref_areas = _areas_by_image(_require_file(args.reference_traits, "reference traits"))
    gen_meta = {r.image_path: r for r in read_records(preds_path.parent / "records.csv")}

    obs = defaultdict(list)
    ref_rows, gen_rows = [], []
    with open(preds_path, newline="") as fh:
        for row in csv.DictReader(fh):
            meta = gen_meta.get(row["generated_path"])
            if meta is None:
                raise DataError(f"{row['generated_path']} missing from generated records.csv")
            ref = _lookup_area(ref_areas, row["reference_path"])
            gen = _lookup_area(gen_areas, row["generated_path"])
            o = PairedObservation(ref, gen, meta.stage, meta.treatment)
            obs[meta.treatment.value].append(o)
            obs[POOLED].append(o)
            ref_rows.append((meta.stage, meta.treatment, ref))
            gen_rows.append((meta.stage, meta.treatment, gen))
    if not ref_rows:
        raise DataError(f"{preds_path} lists no predictions")
    for t in TREATMENT_ORDER:
        obs.setdefault(t.value, [])
    fid = None
    if args.fid:
        fid = FidTriple.from_dict(json.loads(_require_file(args.fid, "FID file").read_text()))
    bundle = render_report(
        obs, stage_statistics(ref_rows), stage_statistics(gen_rows), fid, out
    )
    print(f"wrote {len(bundle.files)} report files to {out}")


def _lookup_area(areas: dict, path: str) -> int:
    """Match trait ``source_image`` entries by full path or by file name."""
    for key in (path, Path(path).name):
        if key in areas:
            return areas[key][2]
    for key, v in areas.items():
        if Path(key).name == Path(path).name:
            return v[2]
    return 0


def cmd_experiment(cfg: RunConfig, args, out: Path) -> None:
    from .pipeline import run_synthetic_experiment

    result = run_synthetic_experiment(cfg, out)
    exp = result.summary["experiment"]
    print(json.dumps({k: exp[k] for k in ("pooled_r_squared", "generated_ordering", "fid_input_baseline")}))
    print((result.summary.get("fid") or {}).get("verdict", ""))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

COMMANDS: dict[str, tuple[Callable, str]] = {
    "synth": (cmd_synth, "render a synthetic multi-treatment dataset"),
    "pair": (cmd_pair, "build and clean aligned image pairs"),
    "train": (cmd_train, "train the conditional GAN on a pair manifest"),
    "predict": (cmd_predict, "generate later-stage images from a checkpoint"),
    "segment": (cmd_segment, "segment plants and write per-instance traits"),
    "evaluate": (cmd_evaluate, "compute the FID triple over three image directories"),
    "report": (cmd_report, "regressions, growth curves and summary.json"),
    "experiment": (cmd_experiment, "run the synthetic end-to-end experiment"),
}


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--profile", choices=("cauliflower", "rosette", "synthetic"))
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="cap on worker pools")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true", help="also log to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="growthcast",
        description="Predict later-stage crop images with a conditional GAN and evaluate them.",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    ps = {}
    for name, (_, help_text) in COMMANDS.items():
        ps[name] = sub.add_parser(name, help=help_text, description=help_text, epilog=EXIT_CODES,
                                  formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(ps[name])

    ps["synth"].add_argument("--n-plants", type=int)
    ps["synth"].add_argument("--stages", type=int)
    ps["synth"].add_argument("--image-size", type=int)

    p = ps["pair"]
    p.add_argument("--records", required=True, help="records CSV")
    p.add_argument("--image-root", help="directory image paths are relative to (default: records dir)")
    p.add_argument("--horizon", type=int)
    p.add_argument("--threshold", type=float, help="max distance between image centers [m]")
    p.add_argument("--stage-unit")
    p.add_argument("--no-clean", action="store_true", help="skip plant-visibility cleaning")

    p = ps["train"]
    p.add_argument("--pairs", required=True, help="pair manifest directory")
    p.add_argument("--epochs", type=int)

    p = ps["predict"]
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True, help="pair manifest directory")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--deterministic", action="store_true", help="disable dropout at inference")

    p = ps["segment"]
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--records", help="records CSV (attaches stage and treatment)")
    src.add_argument("--images", help="directory of PNG images")
    p.add_argument("--image-root")
    p.add_argument("--backend", choices=("baseline", "external"))
    p.add_argument("--command", dest="seg_command", help="external segmenter command")
    p.add_argument("--all-plants", action="store_true", help="keep plants outside the center window")

    p = ps["evaluate"]
    p.add_argument("--generated", required=True)
    p.add_argument("--reference-test", required=True)
    p.add_argument("--reference-train", required=True)
    p.add_argument("--fid-model", help="TorchScript path or random-projection:dim=..,size=..,seed=..")

    p = ps["report"]
    p.add_argument("--predictions", required=True, help="predictions.csv written by predict")
    p.add_argument("--reference-traits", required=True)
    p.add_argument("--generated-traits", required=True)
    p.add_argument("--fid", help="fid.json written by evaluate")
    return parser


def _command_flags(args) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    flags = {
        "synth.n_plants": get("n_plants"),
        "synth.stages": get("stages"),
        "synth.image_size": get("image_size"),
        "pair.horizon": get("horizon"),
        "pair.threshold": get("threshold"),
        "pair.stage_unit": get("stage_unit"),
        "train.epochs": get("epochs"),
        "segment.backend": get("backend"),
        "segment.command": get("seg_command"),
        "fid.model_source": get("fid_model"),
    }
    if get("no_clean"):
        flags["pair.clean"] = False
    if get("deterministic"):
        flags["predict.stochastic"] = False
    return flags


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _resolve(args, _command_flags(args))
        if args.dry_run:
            sys.stdout.write(cfg.to_text())
            return 0
        out = Path(args.out)
        _setup_logging(out, args.verbose)
        cfg.write(out)
        log.info("growthcast %s %s", __version__, args.command)
        COMMANDS[args.command][0](cfg, args, out)
        return 0
    except GrowthcastError as exc:
        _emit_error(exc, exc.exit_code)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        _emit_error(exc, DataError.exit_code)
        return DataError.exit_code
    except FloatingPointError as exc:
        _emit_error(exc, NumericError.exit_code)
        return NumericError.exit_code
    except ValueError as exc:
        _emit_error(exc, DataError.exit_code)
        return DataError.exit_code
    except SystemExit as exc:
        # --help / --version
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
