"""Stochastic layer algebra for variational volumetric convolutions.

Three sampling schemes share the dilated convolution core:

* ``bernoulli_dropout``: multiply activations elementwise by Bern(p_l) draws
  with no inverse scaling, at both train and test time.
* ``ffg_conv_local_reparam``: a fully-factorized-Gaussian posterior over
  kernel weights, sampled in output space. The convolution of Gaussian
  weights with a fixed input is itself Gaussian per output voxel with

      mu*[f,v]      = sum_t mu[f,t]    * h[v - l*t]
      sigma*[f,v]^2 = sum_t sigma[f,t]^2 * h[v - l*t]^2

  so one conv for the mean, one conv of squared inputs against squared
  sigmas for the variance, and a single N(0,1) draw per output element
  replace per-weight sampling (the moved-noise trick).
* ``spike_slab_conv``: scales each filter's Gaussian output map by a
  concrete-relaxed Bernoulli gate b_f, giving w_f = b_f * g_f; the
  deterministic bias is added after scaling.

KL terms against the spike-and-slab prior come in closed form; both are
zero exactly when the variational parameters sit on the prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import tensor as T
from .conv3d import ConvSpec, dilated_conv3d
from .tensor import Tensor

__all__ = [
    "SpikeSlabPrior",
    "BernoulliDropoutConfig",
    "SpikeSlabConvParams",
    "bernoulli_dropout",
    "concrete_sample",
    "ffg_conv_local_reparam",
    "spike_slab_conv",
    "kl_bernoulli",
    "kl_gaussian",
    "layer_kl",
    "inverse_softplus",
]

CONCRETE_TEMPERATURE = 0.02
_U_CLAMP = 1e-7
_VAR_FLOOR = 1e-16  # keeps sqrt differentiable when sigma* underflows to 0


@dataclass(frozen=True)
class SpikeSlabPrior:
    """Factorized prior: Bern(p_prior) spikes times N(mu_prior, sigma_prior^2) slabs."""

    p_prior: float = 0.5
    mu_prior: float = 0.0
    sigma_prior: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.p_prior < 1.0:
            raise ValueError(f"SpikeSlabPrior: p_prior must lie in (0,1), got {self.p_prior}")
        if self.sigma_prior <= 0.0:
            raise ValueError(f"SpikeSlabPrior: sigma_prior must be positive, got {self.sigma_prior}")


@dataclass(frozen=True)
class BernoulliDropoutConfig:
    """Fixed keep probability for MC Bernoulli dropout (not learned)."""

    keep_prob: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"BernoulliDropoutConfig: keep_prob must lie in (0,1], got {self.keep_prob}")


def inverse_softplus(y: float) -> float:
    """Return r with softplus(r) as close to y as float64 allows (y > 0)."""
    if y <= 0:
        raise ValueError(f"inverse_softplus: requires y > 0, got {y}")
    r = float(np.log(np.expm1(y)))
    for _ in range(4):  # Newton polish; softplus slope < 1 limits attainable accuracy
        f = float(np.logaddexp(0.0, r)) - y
        if f == 0.0:
            break
        r -= f / float(expit(r))
    return r


class SpikeSlabConvParams:
    """Variational parameters of one spike-and-slab convolution layer.

    ``sigma_raw`` stores sigma through a softplus so sigma > 0 without
    constraints; ``dropout_logit`` stores p_f through a sigmoid likewise.
    The bias is a deterministic point estimate outside the posterior.
    """

    def __init__(
        self,
        spec: ConvSpec,
        mu: Tensor,
        sigma_raw: Tensor,
        dropout_logit: Tensor,
        bias: Tensor,
        temperature: float = CONCRETE_TEMPERATURE,
    ):
        wshape = spec.weight_shape()
        if mu.data.shape != wshape:
            raise T.ShapeMismatchError("SpikeSlabConvParams mu", mu.data.shape, wshape)
        if sigma_raw.data.shape != wshape:
            raise T.ShapeMismatchError("SpikeSlabConvParams sigma_raw", sigma_raw.data.shape, wshape)
        if dropout_logit.data.shape != (spec.out_channels,):
            raise T.ShapeMismatchError(
                "SpikeSlabConvParams dropout_logit", dropout_logit.data.shape, (spec.out_channels,)
            )
        if bias.data.shape != (spec.out_channels,):
            raise T.ShapeMismatchError("SpikeSlabConvParams bias", bias.data.shape, (spec.out_channels,))
        if temperature <= 0:
            raise ValueError(f"SpikeSlabConvParams: temperature must be positive, got {temperature}")
        self.spec = spec
        self.mu = mu
        self.sigma_raw = sigma_raw
        self.dropout_logit = dropout_logit
        self.bias = bias
        self.temperature = float(temperature)

    @classmethod
    def initialize(
        cls,
        spec: ConvSpec,
        rng: np.random.Generator,
        dtype=np.float64,
        sigma_init: float = 0.05,
        keep_init: float = 0.9,
        temperature: float = CONCRETE_TEMPERATURE,
    ) -> "SpikeSlabConvParams":
        """Fan-in-scaled random means, small constant sigma, keep_init gates."""
        fan_in = spec.in_channels * spec.taps
        mu = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=spec.weight_shape())
        raw = inverse_softplus(sigma_init)
        logit = math.log(keep_init) - math.log1p(-keep_init)
        return cls(
            spec,
            mu=Tensor(mu.astype(dtype), requires_grad=True),
            sigma_raw=Tensor(np.full(spec.weight_shape(), raw, dtype=dtype), requires_grad=True),
            dropout_logit=Tensor(np.full(spec.out_channels, logit, dtype=dtype), requires_grad=True),
            bias=Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True),
            temperature=temperature,
        )

    @classmethod
    def at_prior(cls, spec: ConvSpec, prior: SpikeSlabPrior, dtype=np.float64) -> "SpikeSlabConvParams":
        """Parameters sitting on the prior, up to softplus representation."""
        raw = inverse_softplus(prior.sigma_prior)
        logit = math.log(prior.p_prior) - math.log1p(-prior.p_prior)
        return cls(
            spec,
            mu=Tensor(np.full(spec.weight_shape(), prior.mu_prior, dtype=dtype), requires_grad=True),
            sigma_raw=Tensor(np.full(spec.weight_shape(), raw, dtype=dtype), requires_grad=True),
            dropout_logit=Tensor(np.full(spec.out_channels, logit, dtype=dtype), requires_grad=True),
            bias=Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True),
        )

    def sigma(self) -> Tensor:
        return T.softplus(self.sigma_raw)

    def keep_prob(self) -> np.ndarray:
        """Current p_f values as a plain array (inspection only)."""
        return expit(self.dropout_logit.data)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("mu", self.mu),
            ("sigma_raw", self.sigma_raw),
            ("dropout_logit", self.dropout_logit),
            ("bias", self.bias),
        ]


def bernoulli_dropout(h: Tensor, p_l: float, rng: np.random.Generator) -> Tensor:
    """Elementwise Bern(p_l) mask, no inverse scaling, fresh draw per call."""
    if p_l <= 0.0 or p_l > 1.0:
        raise ValueError(f"bernoulli_dropout: keep probability must lie in (0,1], got {p_l}")
    if p_l == 1.0:
        return h
    mask = (rng.random(h.data.shape) < p_l).astype(h.data.dtype)
    return h * Tensor(mask)


def concrete_sample(p_f, t: float, u) -> np.ndarray:
    """Relaxed Bernoulli draw sigmoid((logit p_f + logit u)/t); u clamped away from {0,1}."""
    p = np.asarray(p_f, dtype=np.float64)
    uc = np.clip(np.asarray(u, dtype=np.float64), _U_CLAMP, 1.0 - _U_CLAMP)
    z = np.log(p) - np.log1p(-p) + np.log(uc) - np.log1p(-uc)
    return expit(z / t)


def _gauss_conv(h: Tensor, params: SpikeSlabConvParams, rng: np.random.Generator, with_bias: bool) -> Tensor:
    spec = params.spec
    mu_star = dilated_conv3d(h, params.mu, params.bias if with_bias else None, spec)
    sig = T.softplus(params.sigma_raw)
    var_star = dilated_conv3d(T.square(h), T.square(sig), None, spec)
    sigma_star = T.sqrt(var_star + _VAR_FLOOR)
    eps = rng.standard_normal(mu_star.data.shape).astype(h.data.dtype, copy=False)
    return mu_star + sigma_star * Tensor(eps)


def ffg_conv_local_reparam(h: Tensor, params: SpikeSlabConvParams, rng: np.random.Generator) -> Tensor:
    """Sample the Gaussian-posterior convolution in output space (plus bias)."""
    return _gauss_conv(h, params, rng, with_bias=True)


def spike_slab_conv(h: Tensor, params: SpikeSlabConvParams, rng: np.random.Generator) -> Tensor:
    """Gate each filter map with a concrete draw: out = b_f * (g_f * h) + bias_f."""
    core = _gauss_conv(h, params, rng, with_bias=False)
    u = np.clip(rng.random(params.spec.out_channels), _U_CLAMP, 1.0 - _U_CLAMP)
    logit_u = Tensor((np.log(u) - np.log1p(-u)).astype(h.data.dtype, copy=False))
    gate = T.sigmoid((params.dropout_logit + logit_u) * (1.0 / params.temperature))
    return T.add_channel_bias(T.scale_channels(core, gate), params.bias)


def kl_bernoulli(p_f: float, p_prior: float) -> float:
    """KL(Bern(p_f) || Bern(p_prior)); zero exactly at p_f == p_prior."""
    if not (0.0 < p_f < 1.0 and 0.0 < p_prior < 1.0):
        raise ValueError(f"kl_bernoulli: probabilities must lie in (0,1), got {p_f}, {p_prior}")
    return p_f * math.log(p_f / p_prior) + (1.0 - p_f) * math.log((1.0 - p_f) / (1.0 - p_prior))


def kl_gaussian(mu: float, sigma: float, mu_prior: float, sigma_prior: float) -> float:
    """KL(N(mu, sigma^2) || N(mu_prior, sigma_prior^2)); zero at identical parameters."""
    if sigma <= 0.0 or sigma_prior <= 0.0:
        raise ValueError(f"kl_gaussian: sigmas must be positive, got {sigma}, {sigma_prior}")
    return (
        math.log(sigma_prior / sigma)
        + (sigma * sigma + (mu - mu_prior) ** 2) / (2.0 * sigma_prior * sigma_prior)
        - 0.5
    )


def layer_kl(params: SpikeSlabConvParams, prior: SpikeSlabPrior) -> Tensor:
    """Differentiable KL of one layer: Bernoulli per filter plus Gaussian per weight.

    Log-probabilities of both posterior and prior gates go through the same
    softplus-of-logit expression, so at matching parameters the Bernoulli part
    cancels bitwise; the Gaussian part uses the ratio forms log(sigma_prior/sigma)
    and sigma^2/(2 sigma_prior^2), exact when sigma matches the prior bit for bit.
    """
    x = params.dropout_logit
    p = T.sigmoid(x)
    log_p = -T.softplus(-x)
    log_1mp = -T.softplus(x)
    x0 = math.log(prior.p_prior) - math.log1p(-prior.p_prior)
    log_p0 = -float(np.logaddexp(0.0, -x0))
    log_1mp0 = -float(np.logaddexp(0.0, x0))
    kl_b = T.tsum(p * (log_p - log_p0) + (1.0 - p) * (log_1mp - log_1mp0))

    sig = T.softplus(params.sigma_raw)
    quad = (T.square(sig) + T.square(params.mu - prior.mu_prior)) / (
        2.0 * prior.sigma_prior * prior.sigma_prior
    )
    kl_g = T.tsum(T.log(prior.sigma_prior / sig) + quad - 0.5)
    return kl_b + kl_g
