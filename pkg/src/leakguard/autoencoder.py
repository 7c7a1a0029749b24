"""Encoder/decoder pair that defines the latent space and the reconstruction signal."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import DomainError, ShapeError
from .numeric import as_matrix, as_vector, make_rng


def default_latent_dim(k: int) -> int:
    return max(2, math.ceil(k / 8))


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-2
    seed: int = 0
    hidden: tuple = (64,)
    latent_dim: int | None = None
    optimizer: str = "sgd"
    l2: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise DomainError("epochs must be >= 0")
        if self.batch_size < 1:
            raise DomainError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be positive")
        if any(w < 1 for w in self.hidden):
            raise DomainError("hidden widths must be positive")
        self.hidden = tuple(int(w) for w in self.hidden)


@dataclass
class Autoencoder:
    encoder: list
    decoder: list
    input_dim: int
    latent_dim: int
    loss_trace: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.latent_dim < self.input_dim:
            raise DomainError(
                f"latent_dim must be below input_dim, got m={self.latent_dim}, k={self.input_dim}"
            )
        nn.check_chain(self.encoder, self.input_dim)
        if self.encoder[-1].fan_out != self.latent_dim:
            raise DomainError("encoder output width differs from latent_dim")
        nn.check_chain(self.decoder, self.latent_dim)
        if self.decoder[-1].fan_out != self.input_dim:
            raise DomainError("decoder output width differs from input_dim")
        for layer in (*self.encoder, *self.decoder):
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise DomainError("autoencoder weights must be finite")

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != (self.input_dim,) or x.ndim not in (1, 2):
            raise ShapeError(f"expected query of length {self.input_dim}, got shape {x.shape}")
        return x

    def encode(self, x) -> np.ndarray:
        """Latent code for a single query or a batch of rows."""
        return nn.forward(self.encoder, self._check(x))

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1:] != (self.latent_dim,):
            raise ShapeError(f"expected latent of length {self.latent_dim}, got shape {z.shape}")
        return nn.forward(self.decoder, z)

    def reconstruct(self, x) -> np.ndarray:
        return self.decode(self.encode(x))

    def reconstruction_mse(self, x):
        """(1/k)·Σ(x - x̂)²; a float for one query, an array for a batch."""
        x = self._check(x)
        diff = x - self.reconstruct(x)
        return np.sum(diff * diff, axis=-1) / self.input_dim if x.ndim == 2 else float(
            np.sum(diff * diff) / self.input_dim
        )

    @property
    def layers(self):
        return [*self.encoder, *self.decoder]


def init_autoencoder(input_dim: int, cfg: TrainConfig) -> Autoencoder:
    m = cfg.latent_dim or default_latent_dim(input_dim)
    rng = make_rng(cfg.seed, 0xAE)
    widths = (input_dim, *cfg.hidden, m)
    encoder = nn.build_stack(rng, widths)
    decoder = nn.build_stack(rng, widths[::-1])
    return Autoencoder(encoder, decoder, input_dim, m)


def train_autoencoder(features, cfg: TrainConfig | None = None) -> Autoencoder:
    """Fit the encoder/decoder to minimise mean reconstruction MSE on ``features``."""
    cfg = cfg or TrainConfig()
    x = as_matrix(features, "features")
    n, k = x.shape
    if n < 2:
        raise DomainError(f"need at least 2 samples, got {n}")
    if np.any(np.abs(x) > 1.0):
        raise DomainError("features must lie in [-1, 1]")
    if cfg.batch_size > n:
        raise DomainError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    model = init_autoencoder(k, cfg)
    layers = model.layers
    opt = nn.Optimizer(cfg.optimizer, cfg.learning_rate)
    model.loss_trace = nn.fit(
        layers, x, x, loss="mse", epochs=cfg.epochs, batch_size=cfg.batch_size,
        optimizer=opt, rng=make_rng(cfg.seed, 0xAE, 1), l2=cfg.l2,
    )
    return model


def encode(model: Autoencoder, x) -> np.ndarray:
    return model.encode(as_vector(x, model.input_dim, "query"))


def reconstruct(model: Autoencoder, x) -> np.ndarray:
    return model.reconstruct(as_vector(x, model.input_dim, "query"))


def reconstruction_mse(model: Autoencoder, x) -> float:
    return model.reconstruction_mse(as_vector(x, model.input_dim, "query"))
