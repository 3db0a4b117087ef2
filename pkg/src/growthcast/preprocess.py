"""Image loading, square padding, resizing and paired augmentation.

Images live in memory as float32 ``H x W x 3`` arrays scaled to [-1, 1]
(the range of the generator's tanh head).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, ImageFormatError, ShapeError

CROP_SCALE = (0.8, 1.0)


def validate_image(x: np.ndarray, name: str = "image") -> np.ndarray:
    """Check the ImageTensor contract and return ``x`` as float32."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"{name}: expected H x W x 3, got shape {x.shape}")
    x = x.astype(np.float32, copy=False)
    if not np.all(np.isfinite(x)) or x.min() < -1.0 or x.max() > 1.0:
        raise ImageFormatError(f"{name}: values must lie in [-1, 1]")
    return x


def bytes_to_tensor(arr: np.ndarray) -> np.ndarray:
    """Map uint8 values linearly onto [-1, 1] (0 -> -1, 255 -> +1)."""
    return (np.asarray(arr, dtype=np.float32) / np.float32(127.5)) - np.float32(1.0)


def tensor_to_bytes(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`bytes_to_tensor`, rounding half away from zero."""
    v = (np.asarray(x, dtype=np.float64) + 1.0) * 127.5
    v = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def pad_to_square(x: np.ndarray, fill: float = -1.0) -> np.ndarray:
    """Add equal borders so height == width.

    Landscape images get top/bottom bands; portrait images get left/right
    bands. An odd remainder goes to the bottom (or right) band.
    """
    h, w = x.shape[:2]
    if h == w:
        return x
    extra = abs(w - h)
    before, after = extra // 2, extra - extra // 2
    if w > h:
        pad = ((before, after), (0, 0), (0, 0))
    else:
        pad = ((0, 0), (before, after), (0, 0))
    return np.pad(x, pad, mode="constant", constant_values=fill)


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise ImageFormatError(f"{path}: expected 8-bit RGB, got mode {im.mode!r}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    return bytes_to_tensor(arr)


def load_and_pad(path: str | Path) -> np.ndarray:
    return pad_to_square(load_image(path))


def save_image(x: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(tensor_to_bytes(x), mode="RGB").save(path)
    return path


def resize(x: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize of one H x W x C image (antialiased when shrinking)."""
    if isinstance(size, int):
        size = (size, size)
    if tuple(x.shape[:2]) == tuple(size):
        return x
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).permute(2, 0, 1)[None]
    shrinking = size[0] < x.shape[0] or size[1] < x.shape[1]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=shrinking)
    return out[0].permute(1, 2, 0).numpy()


@dataclass(frozen=True)
class AugmentConfig:
    target_size: int = 256
    random_crop: bool = True
    flips: frozenset = field(default=frozenset({"horizontal", "vertical"}))
    rotations_deg: frozenset = field(default=frozenset({0, 180}))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "flips", frozenset(self.flips))
        object.__setattr__(self, "rotations_deg", frozenset(int(r) for r in self.rotations_deg))
        if self.target_size <= 0:
            raise ConfigError("target_size must be > 0")
        # 90/270 would turn the vertical plant rows sideways.
        if not self.rotations_deg <= {0, 180}:
            raise ConfigError(f"rotations_deg must be a subset of {{0, 180}}, got {set(self.rotations_deg)}")
        unknown = self.flips - {"horizontal", "vertical"}
        if unknown:
            raise ConfigError(f"unknown flip option(s) {sorted(unknown)}")

    @classmethod
    def disabled(cls, target_size: int = 256, seed: int = 0) -> "AugmentConfig":
        return cls(target_size=target_size, random_crop=False, flips=frozenset(),
                   rotations_deg=frozenset({0}), seed=seed)


@dataclass(frozen=True)
class PairTransform:
    """One sampled geometric transform, applied identically to both domains."""

    crop: tuple[int, int, int] | None  # (top, left, side)
    hflip: bool
    vflip: bool
    rotation: int

    def apply(self, x: np.ndarray, target_size: int) -> np.ndarray:
        if self.crop is not None:
            top, left, side = self.crop
            x = x[top:top + side, left:left + side]
        x = resize(x, target_size)
        if self.hflip:
            x = x[:, ::-1]
        if self.vflip:
            x = x[::-1, :]
        if self.rotation == 180:
            x = x[::-1, ::-1]
        return np.clip(np.ascontiguousarray(x), -1.0, 1.0)


def sample_transform(
    side: int, config: AugmentConfig, rng: np.random.Generator
) -> PairTransform:
    crop = None
    if config.random_crop:
        scale = rng.uniform(*CROP_SCALE)
        crop_side = max(1, min(side, int(round(scale * side))))
        top = int(rng.integers(0, side - crop_side + 1))
        left = int(rng.integers(0, side - crop_side + 1))
        crop = (top, left, crop_side)
    hflip = "horizontal" in config.flips and bool(rng.random() < 0.5)
    vflip = "vertical" in config.flips and bool(rng.random() < 0.5)
    rotations = sorted(config.rotations_deg)
    rotation = int(rotations[rng.integers(len(rotations))]) if len(rotations) > 1 else rotations[0]
    return PairTransform(crop=crop, hflip=hflip, vflip=vflip, rotation=rotation)


def augment_pair(
    a: np.ndarray,
    b: np.ndarray,
    config: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one randomly drawn transform to both images of a pair.

    Inputs are padded to square first. The crop window is drawn on the
    padded source; output is ``target_size`` square.
    """
    if a.shape != b.shape:
        raise ShapeError(f"pair shapes differ: {a.shape} vs {b.shape}")
    a, b = pad_to_square(a), pad_to_square(b)
    side = a.shape[0]
    if config.target_size > side:
        raise ConfigError(
            f"target_size {config.target_size} exceeds padded source size {side}"
        )
    t = sample_transform(side, config, rng)
    return t.apply(a, config.target_size), t.apply(b, config.target_size)


def worker_rng(seed: int, worker_index: int = 0) -> np.random.Generator:
    """Independent RNG stream per data-loading worker."""
    return np.random.default_rng([seed, worker_index])
