"""GanModel container, alternating training loop, inference and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..datamodel import PairManifest
from ..errors import ConfigError, DataError, NumericError, ShapeError, TrainingError
from ..preprocess import (
    AugmentConfig,
    augment_pair,
    load_and_pad,
    save_image,
    validate_image,
)
from .losses import generator_objective, loss_cgan
from .networks import (
    DiscriminatorConfig,
    GeneratorConfig,
    PatchDiscriminator,
    UnetGenerator,
    init_weights,
)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "loss_d", "loss_g_adv", "loss_g_l1", "lr")
CKPT_FORMAT = "growthcast-ckpt"
CKPT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class TrainConfig:
    lambda_l1: float = 100.0
    learning_rate: float = 1e-4
    batch_size: int = 1
    epochs: int = 160
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise ConfigError("lambda_l1 must be >= 0")
        if self.epochs < 2 or self.epochs % 2:
            raise ConfigError(f"epochs must be even and >= 2, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")


def learning_rate_at(config: TrainConfig, epoch: float) -> float:
    """Constant for the first half of training, then linear decay to 0.

    ``epoch`` counts completed epochs (0 at the start); the rate reaches
    0 at ``epoch == config.epochs``.
    """
    half = config.epochs / 2
    if epoch <= half:
        return config.learning_rate
    frac = max(0.0, (config.epochs - epoch) / half)
    return config.learning_rate * frac


@dataclass
class GanModel:
    generator: UnetGenerator
    discriminator: PatchDiscriminator
    generator_config: GeneratorConfig
    discriminator_config: DiscriminatorConfig
    train_config: TrainConfig = field(default_factory=TrainConfig)
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(
        cls,
        generator_config: GeneratorConfig,
        discriminator_config: DiscriminatorConfig | None = None,
        train_config: TrainConfig | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> "GanModel":
        discriminator_config = discriminator_config or DiscriminatorConfig()
        train_config = train_config or TrainConfig()
        gen = torch.Generator().manual_seed(train_config.seed)
        g = UnetGenerator(generator_config)
        d = PatchDiscriminator(discriminator_config)
        init_weights(g, gen)
        init_weights(d, gen)
        return cls(g.to(dtype), d.to(dtype), generator_config,
                   discriminator_config, train_config)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.generator.parameters()).dtype

    def parameter_digest(self, which: str) -> str:
        net = self.generator if which == "generator" else self.discriminator
        h = hashlib.sha256()
        for name, p in net.state_dict().items():
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# conversions
# ---------------------------------------------------------------------------

def to_batch(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype).contiguous()


def from_batch(t: torch.Tensor) -> list[np.ndarray]:
    arr = t.detach().to(torch.float32).permute(0, 2, 3, 1).cpu().numpy()
    return [np.ascontiguousarray(a) for a in arr]


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def generator_forward(model: GanModel, x: np.ndarray, stochastic: bool = True) -> np.ndarray:
    x = validate_image(x)
    size = model.generator_config.input_size
    if x.shape != (size, size, 3):
        raise ShapeError(f"generator expects {size} x {size} x 3, got {x.shape}")
    with torch.no_grad():
        out = model.generator(to_batch([x], model.dtype), stochastic=stochastic)
    return from_batch(out)[0]


@dataclass(frozen=True)
class PatchScores:
    logits: np.ndarray
    mean: float


def discriminator_forward(model: GanModel, x: np.ndarray, y: np.ndarray) -> PatchScores:
    if np.shape(x) != np.shape(y):
        raise ShapeError(f"discriminator inputs differ: {np.shape(x)} vs {np.shape(y)}")
    with torch.no_grad():
        logits = model.discriminator(to_batch([x], model.dtype), to_batch([y], model.dtype))
    grid = logits[0, 0].to(torch.float64).cpu().numpy()
    return PatchScores(grid, float(grid.mean()))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def make_optimizers(model: GanModel) -> tuple[torch.optim.Adam, torch.optim.Adam]:
    tc = model.train_config
    betas = (tc.beta1, tc.beta2)
    opt_g = torch.optim.Adam(model.generator.parameters(), lr=tc.learning_rate, betas=betas)
    opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=tc.learning_rate, betas=betas)
    return opt_g, opt_d


def discriminator_step(model, opt_d, x, y, fake) -> float:
    opt_d.zero_grad(set_to_none=True)
    real_logits = model.discriminator(x, y)
    fake_logits = model.discriminator(x, fake.detach())
    loss = loss_cgan(real_logits, fake_logits, "discriminator")
    loss.backward()
    opt_d.step()
    return float(loss.detach())


def generator_step(model, opt_g, x, y, fake) -> tuple[float, float, float]:
    d = model.discriminator
    flags = [p.requires_grad for p in d.parameters()]
    for p in d.parameters():
        p.requires_grad_(False)
    try:
        opt_g.zero_grad(set_to_none=True)
        total, adv, l1 = generator_objective(
            d(x, fake), y, fake, model.train_config.lambda_l1
        )
        total.backward()
        opt_g.step()
    finally:
        for p, f in zip(d.parameters(), flags):
            p.requires_grad_(f)
    return float(total.detach()), float(adv.detach()), float(l1.detach())


def load_pair_images(manifest: PairManifest) -> list[tuple[np.ndarray, np.ndarray]]:
    cache: dict[str, np.ndarray] = {}

    def get(path):
        if path not in cache:
            cache[path] = load_and_pad(manifest.resolve(path))
        return cache[path]

    return [(get(p.input.image_path), get(p.reference.image_path)) for p in manifest.pairs]


def train(
    model: GanModel,
    manifest: PairManifest | None,
    train_config: TrainConfig | None = None,
    augment_config: AugmentConfig | None = None,
    *,
    images: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
    checkpoint_dir: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> GanModel:
    """Alternating discriminator/generator training.

    Each step first updates D on (real, detached fake), then G on the
    adversarial term plus ``lambda_l1`` times L1. ``images`` may supply
    preloaded (input, reference) arrays instead of reading the manifest.
    """
    if train_config is not None:
        model.train_config = train_config
    tc = model.train_config
    size = model.generator_config.input_size
    augment_config = augment_config or AugmentConfig(target_size=size, seed=tc.seed)
    if augment_config.target_size != size:
        raise ConfigError(
            f"augment target_size {augment_config.target_size} != generator input_size {size}"
        )
    if images is None:
        if manifest is None or len(manifest) == 0:
            raise DataError("cannot train on an empty manifest")
        images = load_pair_images(manifest)
    if len(images) == 0:
        raise DataError("cannot train on an empty manifest")

    torch.manual_seed(tc.seed)
    rng = np.random.default_rng([tc.seed, augment_config.seed])
    opt_g, opt_d = make_optimizers(model)
    model.generator.train()
    model.discriminator.train()
    start = len(model.history)
    n = len(images)

    for epoch in range(tc.epochs):
        lr = learning_rate_at(tc, epoch)
        for opt in (opt_g, opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        sums = np.zeros(3)
        d_updates = g_updates = 0
        order = rng.permutation(n)
        for step, lo in enumerate(range(0, n, tc.batch_size)):
            batch = [augment_pair(*images[i], augment_config, rng) for i in order[lo:lo + tc.batch_size]]
            x = to_batch([a for a, _ in batch], model.dtype)
            y = to_batch([b for _, b in batch], model.dtype)
            try:
                fake = model.generator(x, stochastic=True)
                loss_d = discriminator_step(model, opt_d, x, y, fake)
                d_updates += 1
                _, adv, l1 = generator_step(model, opt_g, x, y, fake)
                g_updates += 1
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch + 1}, step {step + 1}: {exc}") from exc
            values = (loss_d, adv, l1)
            if not np.all(np.isfinite(values)):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch + 1}, step {step + 1}: "
                    f"loss_d={loss_d}, loss_g_adv={adv}, loss_g_l1={l1}"
                )
            sums += values
        row = {
            "epoch": start + epoch + 1,
            "loss_d": float(sums[0] / d_updates),
            "loss_g_adv": float(sums[1] / g_updates),
            "loss_g_l1": float(sums[2] / g_updates),
            "lr": float(lr),
            "d_updates": d_updates,
            "g_updates": g_updates,
        }
        model.history.append(row)
        log.info("epoch %d: %s", row["epoch"], row)
        if on_epoch is not None:
            on_epoch(row)
        if checkpoint_dir is not None and tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch_{row['epoch']:04d}.ckpt")
    return model


def write_history(history: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"], *(repr(float(row[c])) for c in HISTORY_COLUMNS[1:])])
    return path


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict(
    model: GanModel,
    inputs: Sequence[np.ndarray],
    stochastic: bool = True,
    *,
    out_dir: str | Path | None = None,
    names: Sequence[str] | None = None,
    batch_size: int = 8,
) -> list[np.ndarray]:
    """Run the generator over ``inputs`` in order.

    With ``out_dir`` each output is also written as an 8-bit PNG named
    after the matching entry of ``names`` (default ``pred_00000.png``...).
    """
    size = model.generator_config.input_size
    outputs: list[np.ndarray] = []
    model.generator.eval()
    for lo in range(0, len(inputs), batch_size):
        chunk = [validate_image(x, f"input {lo + i}") for i, x in enumerate(inputs[lo:lo + batch_size])]
        for i, x in enumerate(chunk):
            if x.shape != (size, size, 3):
                raise ShapeError(f"input {lo + i}: expected {size} x {size} x 3, got {x.shape}")
        with torch.no_grad():
            out = model.generator(to_batch(chunk, model.dtype), stochastic=stochastic)
        outputs.extend(from_batch(out))
    if out_dir is not None:
        out_dir = Path(out_dir)
        if names is None:
            names = [f"pred_{i:05d}.png" for i in range(len(outputs))]
        if len(names) != len(outputs):
            raise ValueError("names must match inputs in length")
        for name, y in zip(names, outputs):
            save_image(y, out_dir / name)
    return outputs


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_checkpoint(model: GanModel, path: str | Path) -> Path:
    """Write a ``.ckpt`` zip archive.

    ``checkpoint.json`` holds the three configs, the training history and
    an index of parameters (name, shape, byte offset); ``parameters.bin``
    holds the concatenated little-endian float32 payloads.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = [], [], 0
    for prefix, net in (("generator", model.generator), ("discriminator", model.discriminator)):
        for name, tensor in net.state_dict().items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            raw = arr.tobytes(order="C")
            index.append({"name": f"{prefix}.{name}", "shape": list(arr.shape),
                          "dtype": "<f4", "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    meta = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "generator_config": asdict(model.generator_config),
        "discriminator_config": asdict(model.discriminator_config),
        "train_config": asdict(model.train_config),
        "history": model.history,
        "parameters": index,
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "checkpoint.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        _zip_write(zf, "parameters.bin", b"".join(blobs))
    return path


def load_checkpoint(path: str | Path) -> GanModel:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("checkpoint.json"))
            payload = zf.read("parameters.bin")
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: not a valid checkpoint ({exc})") from exc
    if meta.get("format") != CKPT_FORMAT:
        raise DataError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
    model = GanModel.create(
        GeneratorConfig(**meta["generator_config"]),
        DiscriminatorConfig(**meta["discriminator_config"]),
        TrainConfig(**meta["train_config"]),
    )
    states = {"generator": {}, "discriminator": {}}
    for entry in meta["parameters"]:
        prefix, name = entry["name"].split(".", 1)
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
        states[prefix][name] = torch.from_numpy(arr.astype(np.float32))
    model.generator.load_state_dict(states["generator"])
    model.discriminator.load_state_dict(states["discriminator"])
    model.history = list(meta.get("history", []))
    return model
