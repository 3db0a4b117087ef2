"""Adversarial and L1 objectives.

Expectations over the patch grid are arithmetic means. Both terms are
computed from logits through softplus, which is the stable form of
-log(sigmoid(x)) = softplus(-x) and -log(1 - sigmoid(x)) = softplus(x).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from ..errors import NumericError, ShapeError

ROLES = ("generator", "discriminator")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_finite(name: str, x: torch.Tensor) -> None:
    if not torch.isfinite(x.detach()).all():
        raise NumericError(f"{name} logits contain non-finite values")


def loss_cgan(d_real_logits, d_fake_logits, role: str) -> torch.Tensor:
    """Conditional adversarial loss, as a quantity to minimize.

    discriminator: -(E[log D(x, y)] + E[log(1 - D(x, G(x)))])
    generator:     -E[log D(x, G(x))]   (non-saturating form)

    ``d_real_logits`` is ignored for the generator role and may be None.
    """
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    fake = _as_tensor(d_fake_logits)
    _check_finite("fake", fake)
    if role == "generator":
        return F.softplus(-fake).mean()
    real = _as_tensor(d_real_logits)
    _check_finite("real", real)
    return F.softplus(-real).mean() + F.softplus(fake).mean()


def loss_l1(y, y_hat) -> torch.Tensor:
    y, y_hat = _as_tensor(y), _as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ShapeError(f"L1 operands differ in shape: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    return (y - y_hat).abs().mean()


def generator_objective(d_fake_logits, y, y_hat, lambda_l1: float):
    """Return (total, adversarial, l1) with total = adversarial + lambda * l1."""
    adv = loss_cgan(None, d_fake_logits, "generator")
    l1 = loss_l1(y, y_hat)
    return adv + lambda_l1 * l1, adv, l1
