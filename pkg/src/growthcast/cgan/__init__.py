"""Conditional GAN for image-to-image growth prediction."""

from .losses import generator_objective, loss_cgan, loss_l1
from .model import (
    GanModel,
    PatchScores,
    TrainConfig,
    discriminator_forward,
    generator_forward,
    learning_rate_at,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
    write_history,
)
from .networks import (
    DiscriminatorConfig,
    GeneratorConfig,
    PatchDiscriminator,
    UnetGenerator,
    patch_grid_size,
)

__all__ = [
    "DiscriminatorConfig", "GanModel", "GeneratorConfig", "PatchDiscriminator",
    "PatchScores", "TrainConfig", "UnetGenerator", "discriminator_forward",
    "generator_forward", "generator_objective", "learning_rate_at",
    "load_checkpoint", "loss_cgan", "loss_l1", "patch_grid_size", "predict",
    "save_checkpoint", "train", "write_history",
]
