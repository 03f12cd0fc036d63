"""Training objectives: MAP loss and the SGVB approximation of the ELBO.

Both objectives are written as quantities to minimize. The likelihood part
sums per-example cross-entropies over the minibatch and rescales by N/M so
its magnitude matches a full pass over the dataset; the prior enters either
as an L2 penalty (MAP, and Bernoulli dropout which keeps the same weight
prior) or as the summed per-layer KL terms (spike-and-slab).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .bayes_layers import SpikeSlabPrior
from .tensor import Tensor

__all__ = ["ObjectiveConfig", "map_loss", "elbo_loss", "minibatch_cross_entropy"]

METHODS = ("map", "bd", "ssd")


@dataclass(frozen=True)
class ObjectiveConfig:
    """Which objective to build and the N/M likelihood scaling it uses.

    ``dataset_size`` counts training subvolumes, the unit actually fed to
    the optimizer. ``prior`` is only consulted by the spike-and-slab path;
    MAP and BD use a fixed unit-Gaussian weight prior.
    """

    method: str
    dataset_size: int
    minibatch_size: int
    prior: SpikeSlabPrior | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"ObjectiveConfig: method must be one of {METHODS}, got {self.method!r}")
        if not self.dataset_size >= self.minibatch_size >= 1:
            raise ValueError(
                f"ObjectiveConfig: need dataset_size >= minibatch_size >= 1, "
                f"got {self.dataset_size}, {self.minibatch_size}"
            )

    @property
    def likelihood_scale(self) -> float:
        return self.dataset_size / self.minibatch_size


def _as_list(logits, labels):
    if isinstance(logits, Tensor):
        logits = [logits]
        labels = [labels]
    if len(logits) != len(labels):
        raise ValueError(f"objectives: {len(logits)} logit tensors but {len(labels)} label arrays")
    if not logits:
        raise ValueError("objectives: empty minibatch")
    return logits, labels


def minibatch_cross_entropy(logits, labels) -> Tensor:
    """Sum of per-example mean cross-entropies; logits are (C, ...) per example."""
    logits, labels = _as_list(logits, labels)
    total = None
    for z, y in zip(logits, labels):
        flat = T.reshape(z, (z.data.shape[0], -1))
        ce = T.softmax_cross_entropy(flat, np.asarray(y).reshape(-1))
        total = ce if total is None else total + ce
    return total


def map_loss(logits, labels, weights: Sequence[Tensor], cfg: ObjectiveConfig) -> Tensor:
    """(N/M) * sum_m CE_m + 1/2 * sum w^2, the negated log-posterior up to constants."""
    if cfg.method not in ("map", "bd"):
        raise ValueError(f"map_loss: expects method map or bd, got {cfg.method!r}")
    loss = minibatch_cross_entropy(logits, labels) * cfg.likelihood_scale
    for w in weights:
        loss = loss + 0.5 * T.tsum(T.square(w))
    return loss


def elbo_loss(logits, labels, layer_kls: Sequence[Tensor], cfg: ObjectiveConfig) -> Tensor:
    """(N/M) * sum_m CE_m + sum of layer KLs: the negative SGVB ELBO estimate."""
    if cfg.method != "ssd":
        raise ValueError(f"elbo_loss: expects method ssd, got {cfg.method!r}")
    loss = minibatch_cross_entropy(logits, labels) * cfg.likelihood_scale
    for kl in layer_kls:
        loss = loss + kl
    return loss
