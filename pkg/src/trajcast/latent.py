"""Discrete latent behavior variable: prior/recognition heads, KL divergence,
batch mutual information, and outcome selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import DenseParams, dense

PROB_EPS = 1e-12  # floor applied to probabilities inside logarithms


@dataclass
class DiscreteDistribution:
    """Probability vector over the latent behavior classes."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    @property
    def n(self) -> int:
        return len(self.logits)

    @property
    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        e = np.exp(z)
        return e / e.sum()

    @property
    def log_probs(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        return z - np.log(np.exp(z).sum())

    def entropy(self) -> float:
        p = self.probs
        return float(-(p * np.log(np.maximum(p, PROB_EPS))).sum())


def prior_logits(e_x: Tensor, head: DenseParams) -> Tensor:
    """Latent logits conditioned on the backbone encoding alone."""
    return dense(e_x, head)


def recognition_logits(e_x: Tensor, e_y: Tensor, head: DenseParams) -> Tensor:
    """Latent logits conditioned on the backbone and the encoded true future."""
    return dense(ad.concat([e_x, e_y], axis=-1), head)


def kl_discrete(q: np.ndarray, p: np.ndarray, eps: float = PROB_EPS) -> float:
    """KL(q || p) in nats with the 0 log 0 = 0 convention and an eps floor on p."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape:
        raise ValueError(f"dimension mismatch: {q.shape} vs {p.shape}")
    p = np.maximum(p, eps)
    mask = q > 0
    return float((q[mask] * (np.log(q[mask]) - np.log(p[mask]))).sum())


def kl_discrete_t(log_q: Tensor, log_p: Tensor) -> Tensor:
    """Differentiable batched KL from log-probabilities: [B, K] -> [B]."""
    return ad.tsum(ad.mul(ad.exp(log_q), ad.sub(log_q, log_p)), axis=1)


def mutual_information(dists: list[DiscreteDistribution] | np.ndarray) -> float:
    """I(x; z) estimated from a batch of per-instance latent distributions.

    Marginalizing the inputs over the batch gives the unconditional latent
    distribution; the estimate is H(mean of p) - mean of H(p), in nats.
    """
    if isinstance(dists, np.ndarray):
        probs = np.asarray(dists, dtype=np.float64)
    else:
        if len(dists) == 0:
            raise ValueError("mutual_information requires a non-empty batch")
        probs = np.stack([d.probs for d in dists])
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("expected a non-empty [B, K] batch of distributions")

    def entropy(p):
        return -(p * np.log(np.maximum(p, PROB_EPS))).sum(axis=-1)

    marginal = probs.mean(axis=0)
    return float(entropy(marginal) - entropy(probs).mean())


def mutual_information_t(log_p: Tensor) -> Tensor:
    """Differentiable batch mutual information from [B, K] log-probabilities."""
    p = ad.exp(log_p)
    marginal = ad.tmean(p, axis=0)
    h_marginal = ad.neg(ad.tsum(ad.mul(marginal, ad.log(ad.add(marginal, PROB_EPS)))))
    h_each = ad.neg(ad.tsum(ad.mul(p, log_p), axis=1))
    return ad.sub(h_marginal, ad.tmean(h_each))


def z_select(dist: DiscreteDistribution, scheme: str, rng: np.random.Generator | None = None,
             n: int = 1):
    """Pick latent outcomes.

    ``sample`` draws from the distribution's probabilities (seeded stream),
    ``mode`` returns the argmax (ties break to the lowest index), and
    ``enumerate`` yields every class with its probability.
    """
    if scheme == "mode":
        return int(np.argmax(dist.probs))
    if scheme == "sample":
        if rng is None:
            raise ValueError("sampling requires an explicit random generator")
        draws = rng.choice(dist.n, size=n, p=dist.probs)
        return draws if n > 1 else int(draws[0])
    if scheme == "enumerate":
        return [(k, float(p)) for k, p in enumerate(dist.probs)]
    raise ValueError(f"unknown selection scheme {scheme!r}")
