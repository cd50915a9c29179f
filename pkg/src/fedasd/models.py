"""AutoEncoder and VAE built from dense stacks, scored by reconstruction error."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import nn
from .errors import EmptyDatasetError, NumericError, ShapeError
from .nn import Activation, LayerSpec, ModelParams


@dataclass(frozen=True)
class AutoEncoderSpec:
    input_dim: int
    hidden_dim: int = 64
    dropout: float = 0.2
    decoder_dropout: bool = True

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ShapeError("input_dim and hidden_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def encoder(self) -> tuple[LayerSpec, ...]:
        return (
            LayerSpec(self.input_dim, self.hidden_dim, Activation.RELU, self.dropout),
            LayerSpec(self.hidden_dim, self.hidden_dim, Activation.RELU),
        )

    @property
    def decoder(self) -> tuple[LayerSpec, ...]:
        p = self.dropout if self.decoder_dropout else 0.0
        return (
            LayerSpec(self.hidden_dim, self.hidden_dim, Activation.RELU, p),
            LayerSpec(self.hidden_dim, self.input_dim, Activation.SIGMOID),
        )

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        return self.encoder + self.decoder


@dataclass(frozen=True)
class VAESpec:
    input_dim: int
    hidden_dim: int = 64
    dropout: float = 0.2
    decoder_dropout: bool = True
    latent_dim: int = 64
    kl_weight: float = 1.0

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.latent_dim) < 1:
            raise ShapeError("dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")

    @property
    def encoder(self) -> tuple[LayerSpec, ...]:
        return (
            LayerSpec(self.input_dim, self.hidden_dim, Activation.RELU, self.dropout),
            LayerSpec(self.hidden_dim, self.hidden_dim, Activation.RELU),
        )

    @property
    def mu_head(self) -> tuple[LayerSpec, ...]:
        return (LayerSpec(self.hidden_dim, self.latent_dim),)

    @property
    def logvar_head(self) -> tuple[LayerSpec, ...]:
        return (LayerSpec(self.hidden_dim, self.latent_dim),)

    @property
    def decoder(self) -> tuple[LayerSpec, ...]:
        p = self.dropout if self.decoder_dropout else 0.0
        return (
            LayerSpec(self.latent_dim, self.hidden_dim, Activation.RELU, p),
            LayerSpec(self.hidden_dim, self.input_dim, Activation.SIGMOID),
        )

    @property
    def blocks(self) -> tuple[tuple[LayerSpec, ...], ...]:
        return (self.encoder, self.mu_head, self.logvar_head, self.decoder)


ModelSpec = Union[AutoEncoderSpec, VAESpec]


def init_model(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    if isinstance(spec, AutoEncoderSpec):
        return nn.init_params(spec.layers, rng)
    return ModelParams.concat([nn.init_params(block, rng) for block in spec.blocks])


def zero_model(spec: ModelSpec) -> ModelParams:
    if isinstance(spec, AutoEncoderSpec):
        return nn.zero_params(spec.layers)
    return ModelParams.concat([nn.zero_params(block) for block in spec.blocks])


def _vae_parts(params: ModelParams, spec: VAESpec) -> list[ModelParams]:
    return params.split([len(b) for b in spec.blocks])


def _as_batch(x, input_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ShapeError(f"expected feature vectors of length {input_dim}, got shape {x.shape}")
    return x


def reconstruct(params: ModelParams, spec: ModelSpec, x) -> np.ndarray:
    """Evaluation-mode reconstruction; the VAE decodes its mean code."""
    x = _as_batch(x, spec.input_dim)
    if isinstance(spec, AutoEncoderSpec):
        out, _ = nn.forward(params, spec.layers, x)
        return out
    enc, mu_p, _, dec = _vae_parts(params, spec)
    h, _ = nn.forward(enc, spec.encoder, x)
    mu, _ = nn.forward(mu_p, spec.mu_head, h)
    out, _ = nn.forward(dec, spec.decoder, mu)
    return out


def sample_scores(params: ModelParams, spec: ModelSpec, x) -> np.ndarray:
    """Per-row mean squared reconstruction error."""
    x = _as_batch(x, spec.input_dim)
    return np.mean((reconstruct(params, spec, x) - x) ** 2, axis=1)


def ae_reconstruction_loss(params: ModelParams, spec: ModelSpec, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("expected a single feature vector")
    return float(sample_scores(params, spec, x)[0])


def kl_gaussian(mu, logvar) -> float:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over dimensions."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ShapeError("mu and logvar must be aligned")
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(logvar))):
        raise NumericError("non-finite mu/logvar")
    return float(-0.5 * np.sum(1.0 + logvar - mu**2 - np.exp(logvar)))


@dataclass
class _VAEPass:
    total: float
    recon: float
    kl: float
    grad: np.ndarray | None


def _vae_pass(params, spec: VAESpec, x, rng, training, eps, want_grad) -> _VAEPass:
    x = _as_batch(x, spec.input_dim)
    n = x.shape[0]
    enc, mu_p, lv_p, dec = _vae_parts(params, spec)
    h, c_enc = nn.forward(enc, spec.encoder, x, training, rng)
    mu, c_mu = nn.forward(mu_p, spec.mu_head, h)
    logvar, c_lv = nn.forward(lv_p, spec.logvar_head, h)
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), mu.shape)
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * eps
    out, c_dec = nn.forward(dec, spec.decoder, z, training, rng)

    recon = nn.mse_loss(out, x)
    kl = kl_gaussian(mu, logvar) / n
    total = recon + spec.kl_weight * kl
    if not want_grad:
        return _VAEPass(total, recon, kl, None)

    g_dec, dz = nn.backward(c_dec, nn.mse_grad(out, x), return_input_grad=True)
    dmu = dz + spec.kl_weight * mu / n
    dlv = dz * eps * 0.5 * sigma + spec.kl_weight * 0.5 * (np.exp(logvar) - 1.0) / n
    g_mu, dh_mu = nn.backward(c_mu, dmu, return_input_grad=True)
    g_lv, dh_lv = nn.backward(c_lv, dlv, return_input_grad=True)
    g_enc = nn.backward(c_enc, dh_mu + dh_lv)
    return _VAEPass(total, recon, kl, np.concatenate([g_enc, g_mu, g_lv, g_dec]))


def vae_loss(
    params: ModelParams,
    spec: VAESpec,
    x,
    rng: np.random.Generator | None = None,
    eps=None,
    training: bool = False,
) -> tuple[float, float, float]:
    """Return ``(total, recon, kl)`` where kl is averaged over the batch rows.

    ``eps`` overrides the reparameterization noise; otherwise it is drawn
    from ``rng``.
    """
    if eps is None and rng is None:
        raise ValueError("vae_loss needs an rng or explicit eps")
    p = _vae_pass(params, spec, x, rng, training, eps, want_grad=False)
    return p.total, p.recon, p.kl


def loss_and_grad(
    params: ModelParams,
    spec: ModelSpec,
    batch,
    rng: np.random.Generator | None,
    training: bool = True,
    eps=None,
) -> tuple[float, np.ndarray]:
    """Training objective and its gradient for either model family."""
    if isinstance(spec, AutoEncoderSpec):
        x = _as_batch(batch, spec.input_dim)
        out, cache = nn.forward(params, spec.layers, x, training, rng)
        return nn.mse_loss(out, x), nn.backward(cache, nn.mse_grad(out, x))
    p = _vae_pass(params, spec, batch, rng, training, eps, want_grad=True)
    return p.total, p.grad


def score_dataset(params: ModelParams, spec: ModelSpec, cases: Sequence) -> list[tuple[str, float]]:
    if len(cases) == 0:
        raise EmptyDatasetError("cannot score an empty case list")
    x = np.stack([c.features for c in cases])
    scores = sample_scores(params, spec, x)
    return [(c.case_id, float(s)) for c, s in zip(cases, scores)]
