"""Toy instance-discrimination data: clustered latents with noisy views.

Instances are Gaussian perturbations of class centers, so distinct
instances of one class collide in latent space; the contrastive trainer
never sees the labels, only the linear probe does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SeededRng
from .validation import as_float_matrix


@dataclass
class AugmentedVectors:
    """Minimal training source: raw latents plus an augmentation scale."""

    latents: np.ndarray
    aug_noise_std: float

    def __post_init__(self):
        self.latents = as_float_matrix(self.latents, "latents")
        if self.aug_noise_std < 0.0:
            raise ValueError("aug_noise_std must be >= 0")


@dataclass
class ToyInstanceDataset:
    """Labeled toy dataset; exposes the AugmentedVectors training surface."""

    latents: np.ndarray  # (n, latent_dim)
    labels: np.ndarray  # (n,) int class ids, probe-only
    class_centers: np.ndarray  # (n_classes, latent_dim)
    aug_noise_std: float

    @property
    def n_instances(self) -> int:
        return self.latents.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.latents.shape[1]

    @property
    def n_classes(self) -> int:
        return self.class_centers.shape[0]


@dataclass(frozen=True)
class DatasetConfig:
    """Generation parameters for the default toy dataset.

    The defaults put the task in the regime where contrastive pressure is
    measurable: many classes packed at center scale comparable to the
    within-class spread (so a random encoder is far from the probe
    ceiling, and same-class negatives stay rare), with augmentation noise
    as large as the spread (so instance discrimination must rely on
    class-bearing directions).
    """

    n_classes: int = 128
    n_instances: int = 10000
    latent_dim: int = 16
    center_scale: float = 1.2
    center_spread: float = 1.0
    aug_noise_std: float = 1.0

    def __post_init__(self):
        if self.n_classes < 1 or self.n_instances < 1 or self.latent_dim < 1:
            raise ValueError("n_classes, n_instances and latent_dim must be positive")
        if self.center_spread < 0.0 or self.aug_noise_std < 0.0 or self.center_scale < 0.0:
            raise ValueError("scales must be >= 0")


def make_toy_dataset(rng: SeededRng, config: DatasetConfig = DatasetConfig()) -> ToyInstanceDataset:
    """Sample class centers and instance latents; labels stay balanced."""
    centers = rng.standard_normal((config.n_classes, config.latent_dim)) * config.center_scale
    labels = np.arange(config.n_instances, dtype=np.int64) % config.n_classes
    noise = rng.standard_normal((config.n_instances, config.latent_dim))
    latents = centers[labels] + config.center_spread * noise
    return ToyInstanceDataset(
        latents=latents,
        labels=labels,
        class_centers=centers,
        aug_noise_std=config.aug_noise_std,
    )


def make_views(latents, aug_noise_std: float, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """Two independent Gaussian perturbations of each latent row."""
    if aug_noise_std < 0.0:
        raise ValueError("aug_noise_std must be >= 0")
    x = as_float_matrix(latents, "latents")
    if aug_noise_std == 0.0:
        return x.copy(), x.copy()
    view_a = x + aug_noise_std * rng.standard_normal(x.shape)
    view_b = x + aug_noise_std * rng.standard_normal(x.shape)
    return view_a, view_b
