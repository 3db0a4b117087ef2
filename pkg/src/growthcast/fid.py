"""Fréchet Inception Distance between embedded image sets.

The distance between N(mu_a, S_a) and N(mu_b, S_b) is

    |mu_a - mu_b|^2 + Tr(S_a) + Tr(S_b) - 2 Tr((S_a^1/2 S_b S_a^1/2)^1/2)

where the last trace equals Tr((S_a S_b)^1/2) but only involves square
roots of symmetric PSD matrices, taken by eigendecomposition.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import EmbeddingLoadError, NumericError, ShapeError
from .preprocess import resize

SINGULAR_EIGENVALUE = 1e-10
REGULARIZATION = 1e-6
NEGATIVE_TOLERANCE = 1e-6
MODEL_ENV_VAR = "GROWTHCAST_FID_MODEL"


class EmbeddingProvider(Protocol):
    feature_dim: int
    input_size: int
    value_range: tuple[float, float]

    def embed_batch(self, batch: np.ndarray) -> np.ndarray:
        """Map an ``N x S x S x 3`` float batch to ``N x feature_dim``."""


class RandomProjectionProvider:
    """Deterministic stand-in for a pretrained embedding network.

    Flattens each resized image and multiplies by a fixed Gaussian matrix
    drawn from ``seed``.
    """

    value_range = (-1.0, 1.0)

    def __init__(self, feature_dim: int = 64, input_size: int = 32, seed: int = 0):
        self.feature_dim = feature_dim
        self.input_size = input_size
        self.seed = seed
        rng = np.random.default_rng(seed)
        n_in = input_size * input_size * 3
        self._weights = rng.standard_normal((n_in, feature_dim)) / np.sqrt(n_in)

    def embed_batch(self, batch: np.ndarray) -> np.ndarray:
        flat = np.asarray(batch, dtype=np.float64).reshape(len(batch), -1)
        # row by row so a feature vector never depends on its batch mates
        return np.stack([row @ self._weights for row in flat])

    def __repr__(self):
        return (f"random-projection:dim={self.feature_dim},"
                f"size={self.input_size},seed={self.seed}")


class TorchScriptProvider:
    """Pretrained network serialized with TorchScript.

    The module must take an ``N x 3 x S x S`` tensor in ``value_range`` and
    return ``N x feature_dim`` pooled features (2048 for Inception).
    """

    def __init__(self, model_source: str | Path, feature_dim: int = 2048,
                 input_size: int = 299, value_range=(-1.0, 1.0)):
        import torch

        path = Path(model_source)
        if not path.is_file():
            raise EmbeddingLoadError(f"embedding model {path} not found")
        try:
            self._module = torch.jit.load(str(path), map_location="cpu").eval()
        except Exception as exc:  # torch raises assorted RuntimeErrors
            raise EmbeddingLoadError(f"cannot load embedding model {path}: {exc}") from exc
        self.model_source = str(path)
        self.feature_dim = feature_dim
        self.input_size = input_size
        self.value_range = tuple(value_range)

    def embed_batch(self, batch: np.ndarray) -> np.ndarray:
        import torch

        x = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32)).permute(0, 3, 1, 2)
        with torch.no_grad():
            out = self._module(x)
        out = out.reshape(out.shape[0], -1).double().numpy()
        if out.shape[1] != self.feature_dim:
            raise EmbeddingLoadError(
                f"embedding model returned {out.shape[1]} features, expected {self.feature_dim}"
            )
        return out


def provider_from_source(source: str | None = None) -> EmbeddingProvider:
    """Build a provider from a path or a ``random-projection[:k=v,...]`` spec.

    Falls back to the ``GROWTHCAST_FID_MODEL`` environment variable.
    """
    source = source or os.environ.get(MODEL_ENV_VAR)
    if not source:
        raise EmbeddingLoadError(
            f"no embedding model configured (set fid.model_source or {MODEL_ENV_VAR})"
        )
    m = re.fullmatch(r"random-projection(?::(.*))?", source)
    if m:
        kwargs = {}
        for item in filter(None, (m.group(1) or "").split(",")):
            key, _, value = item.partition("=")
            names = {"dim": "feature_dim", "size": "input_size", "seed": "seed"}
            if key not in names:
                raise EmbeddingLoadError(f"unknown random-projection option {key!r}")
            kwargs[names[key]] = int(value)
        return RandomProjectionProvider(**kwargs)
    return TorchScriptProvider(source)


def embed(
    provider: EmbeddingProvider, images: Sequence[np.ndarray], batch_size: int = 32
) -> np.ndarray:
    """Embed images in order; returns an ``n x feature_dim`` float64 matrix."""
    if len(images) == 0:
        raise ShapeError("embed needs at least one image")
    lo_v, hi_v = provider.value_range
    rows = []
    for lo in range(0, len(images), batch_size):
        batch = []
        for im in images[lo:lo + batch_size]:
            x = resize(np.asarray(im, dtype=np.float32), provider.input_size)
            batch.append((x + 1.0) * 0.5 * (hi_v - lo_v) + lo_v)
        rows.append(np.asarray(provider.embed_batch(np.stack(batch)), dtype=np.float64))
    return np.concatenate(rows, axis=0)


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("GaussianStats needs n >= 2")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.cov))):
            raise NumericError("Gaussian statistics contain non-finite values")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-8):
            raise ValueError("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be n x d, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"covariance needs at least 2 samples, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) / 2
    return GaussianStats(mean, cov, n)


def _psd_sqrt_eigs(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{what} contains non-finite entries")
    try:
        w, v = np.linalg.eigh((m + m.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition of {what} did not converge: {exc}") from exc
    return np.clip(w, 0.0, None), v


@dataclass(frozen=True)
class FrechetResult:
    distance: float
    regularized: bool
    mean_term: float
    trace_term: float


def frechet(a: GaussianStats, b: GaussianStats) -> FrechetResult:
    if a.dim != b.dim:
        raise ShapeError(f"feature dims differ: {a.dim} vs {b.dim}")
    sa, sb = a.cov, b.cov
    regularized = False
    min_eig = min(np.linalg.eigvalsh(sa).min(), np.linalg.eigvalsh(sb).min())
    if min_eig < SINGULAR_EIGENVALUE:
        eye = np.eye(a.dim) * REGULARIZATION
        sa, sb = sa + eye, sb + eye
        regularized = True

    w, v = _psd_sqrt_eigs(sa, "covariance A")
    sqrt_a = (v * np.sqrt(w)) @ v.T
    inner = sqrt_a @ sb @ sqrt_a
    w_inner, _ = _psd_sqrt_eigs(inner, "product covariance")
    tr_covmean = float(np.sqrt(w_inner).sum())

    diff = a.mean - b.mean
    mean_term = float(diff @ diff)
    trace_term = float(np.trace(sa) + np.trace(sb) - 2.0 * tr_covmean)
    d = mean_term + trace_term
    if not np.isfinite(d):
        raise NumericError(f"Fréchet distance is not finite (mean {mean_term}, trace {trace_term})")
    if d < 0:
        if d < -NEGATIVE_TOLERANCE:
            raise NumericError(
                f"Fréchet distance {d:.3e} is negative beyond tolerance "
                f"(mean term {mean_term:.3e}, trace term {trace_term:.3e})"
            )
        d = 0.0
    return FrechetResult(d, regularized, mean_term, trace_term)


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    return frechet(a, b).distance


@dataclass(frozen=True)
class FidTriple:
    """FID(reference_test, generated), FID(reference_test, reference_train),
    FID(generated, reference_train)."""

    fid_rg: float
    fid_rt: float
    fid_gt: float
    n_r: int = 0
    n_g: int = 0
    n_t: int = 0
    regularized: bool = False

    def to_dict(self) -> dict:
        return {
            "fid_rg": self.fid_rg, "fid_rt": self.fid_rt, "fid_gt": self.fid_gt,
            "n_r": self.n_r, "n_g": self.n_g, "n_t": self.n_t,
            "regularized": self.regularized,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "FidTriple":
        return cls(**{k: d[k] for k in ("fid_rg", "fid_rt", "fid_gt")},
                   n_r=d.get("n_r", 0), n_g=d.get("n_g", 0), n_t=d.get("n_t", 0),
                   regularized=d.get("regularized", False))

    def verdict(self) -> str:
        if self.fid_rg < self.fid_rt:
            return ("FID(r,g) < FID(r,t): generated distribution closer to "
                    "test-reference than training is")
        return ("FID(r,g) >= FID(r,t): training-reference distribution at least "
                "as close to test-reference as generated is")


def fid_protocol(
    provider: EmbeddingProvider,
    reference_test: Sequence[np.ndarray],
    generated: Sequence[np.ndarray],
    reference_train: Sequence[np.ndarray],
) -> FidTriple:
    for name, imgs in (("reference_test", reference_test), ("generated", generated),
                       ("reference_train", reference_train)):
        if len(imgs) < 2:
            raise ValueError(f"{name} needs at least 2 images, got {len(imgs)}")
    r = fit_gaussian(embed(provider, reference_test))
    g = fit_gaussian(embed(provider, generated))
    t = fit_gaussian(embed(provider, reference_train))
    rg, rt, gt = frechet(r, g), frechet(r, t), frechet(g, t)
    return FidTriple(
        fid_rg=rg.distance, fid_rt=rt.distance, fid_gt=gt.distance,
        n_r=r.n, n_g=g.n, n_t=t.n,
        regularized=rg.regularized or rt.regularized or gt.regularized,
    )
