"""Autoregressive mixture-density decoder.

A GRU conditioned on the backbone encoding and a one-hot latent class emits
one bivariate Gaussian mixture over velocity per future step; velocities
integrate to positions under point-mass single-integrator dynamics. Three
output schemes are supported: fully sampled, sampled under the most likely
latent class, and a deterministic mode-of-modes trajectory.

Mixture parameters are produced by construction-safe transforms: softmax
weights, sigma = sigma_min + exp(s), rho = rho_max * tanh(r), so the
validity invariants cannot be violated by any parameter setting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .layers import DenseParams, GruParams, dense, gru_step, init_dense, init_gru

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class Gmm2D:
    """Bivariate Gaussian mixture; leading axes are batch dimensions."""

    weights: np.ndarray  # [..., K]
    means: np.ndarray  # [..., K, 2]
    sigmas: np.ndarray  # [..., K, 2]
    corr: np.ndarray  # [..., K]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        self.corr = np.asarray(self.corr, dtype=np.float64)
        if not np.allclose(self.weights.sum(axis=-1), 1.0, atol=1e-9):
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.sigmas <= 0):
            raise ValueError("sigmas must be positive")
        if np.any(np.abs(self.corr) >= 1):
            raise ValueError("|corr| must be < 1")

    @property
    def n_components(self) -> int:
        return self.weights.shape[-1]

    def component_log_density(self, v: np.ndarray) -> np.ndarray:
        """Per-component log density at v; v broadcasts against batch dims."""
        v = np.asarray(v, dtype=np.float64)
        dx = (v[..., None, 0] - self.means[..., 0]) / self.sigmas[..., 0]
        dy = (v[..., None, 1] - self.means[..., 1]) / self.sigmas[..., 1]
        omr2 = 1.0 - self.corr**2
        quad = (dx * dx - 2.0 * self.corr * dx * dy + dy * dy) / omr2
        log_norm = -(LOG_2PI + np.log(self.sigmas[..., 0]) + np.log(self.sigmas[..., 1])
                     + 0.5 * np.log(omr2))
        return log_norm - 0.5 * quad

    def log_prob(self, v: np.ndarray) -> np.ndarray:
        """Log mixture density at v (log-sum-exp over components)."""
        comp = np.log(np.maximum(self.weights, 1e-300)) + self.component_log_density(v)
        m = comp.max(axis=-1, keepdims=True)
        return (m + np.log(np.exp(comp - m).sum(axis=-1, keepdims=True)))[..., 0]

    def density_grad(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(density, gradient of density) at v, for mode search."""
        comp_ld = self.component_log_density(v)
        comp_d = self.weights * np.exp(comp_ld)
        dx = v[..., None, 0] - self.means[..., 0]
        dy = v[..., None, 1] - self.means[..., 1]
        sx, sy = self.sigmas[..., 0], self.sigmas[..., 1]
        omr2 = 1.0 - self.corr**2
        # inverse-covariance action on (dx, dy)
        gx = (dx / sx**2 - self.corr * dy / (sx * sy)) / omr2
        gy = (dy / sy**2 - self.corr * dx / (sx * sy)) / omr2
        grad = -np.stack([(comp_d * gx).sum(-1), (comp_d * gy).sum(-1)], axis=-1)
        return comp_d.sum(-1), grad

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One draw per batch row: pick a component, then a correlated normal."""
        cum = np.cumsum(self.weights, axis=-1)
        u = rng.random(self.weights.shape[:-1] + (1,))
        idx = (u > cum).sum(axis=-1)
        mu = np.take_along_axis(self.means, idx[..., None, None], axis=-2)[..., 0, :]
        sg = np.take_along_axis(self.sigmas, idx[..., None, None], axis=-2)[..., 0, :]
        rho = np.take_along_axis(self.corr, idx[..., None], axis=-1)[..., 0]
        z = rng.standard_normal(mu.shape)
        out = np.empty_like(mu)
        out[..., 0] = mu[..., 0] + sg[..., 0] * z[..., 0]
        out[..., 1] = mu[..., 1] + sg[..., 1] * (
            rho * z[..., 0] + np.sqrt(1.0 - rho**2) * z[..., 1]
        )
        return out

    def mean(self) -> np.ndarray:
        return (self.weights[..., None] * self.means).sum(axis=-2)


def mode_velocity(gmm: Gmm2D, ascent_steps: int = 10) -> np.ndarray:
    """Approximate argmax of a single (unbatched) mixture density.

    Starts a short monotone gradient ascent from every component mean and
    returns the best point found; the raw means stay in the candidate set,
    so the result is never worse than the best component mean.
    """
    if gmm.weights.ndim != 1:
        raise ValueError("mode_velocity expects an unbatched mixture")
    candidates = [m.copy() for m in gmm.means]
    base_step = 0.5 * float(gmm.sigmas.min()) ** 2
    refined = []
    for x in candidates:
        x = x.copy()
        p, g = gmm.density_grad(x)
        for _ in range(ascent_steps):
            step = base_step
            moved = False
            for _ in range(8):
                x_new = x + step * g / max(p, 1e-300)
                p_new, g_new = gmm.density_grad(x_new)
                if p_new > p:
                    x, p, g = x_new, p_new, g_new
                    moved = True
                    break
                step *= 0.5
            if not moved:
                break
        refined.append((p, x))
    for m in gmm.means:
        refined.append((float(gmm.density_grad(m)[0]), m))
    return max(refined, key=lambda t: t[0])[1]


def integrate(velocities: np.ndarray, p_t: np.ndarray, dt: float) -> np.ndarray:
    """Forward-Euler single integrator: positions over the T future steps."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    velocities = np.asarray(velocities, dtype=np.float64)
    p_t = np.asarray(p_t, dtype=np.float64)
    return p_t[..., None, :] + dt * np.cumsum(velocities, axis=-2)


@dataclass
class GmmSequence:
    """Per-step velocity mixtures for one rollout, plus integration anchors."""

    steps: list[Gmm2D]
    dt: float
    initial_position: np.ndarray

    def __len__(self):
        return len(self.steps)


@dataclass
class PredictionOutput:
    scheme: str
    trajectories: np.ndarray  # [n, T, 2]
    latent_classes: np.ndarray  # [n]
    latent_probs: np.ndarray  # [K]
    velocities: np.ndarray  # [n, T, 2]
    gmm_sequences: Optional[list[GmmSequence]] = None

    def __post_init__(self):
        if self.scheme == "mm" and len(self.trajectories) != 1:
            raise ValueError("mode-mode output must contain exactly one trajectory")
        if not np.all(np.isfinite(self.trajectories)):
            raise ValueError("trajectories contain non-finite positions")


@dataclass
class DecoderParams:
    init: DenseParams  # (e_x, z) -> initial hidden
    gru: GruParams
    head: DenseParams  # hidden -> 6 * components


def init_decoder(store: dict[str, Tensor], config: ModelConfig,
                 rng: np.random.Generator) -> DecoderParams:
    x_width = config.backbone_width
    k = config.latent_classes
    init = init_dense(store, "psi/init", x_width + k, config.gru_hidden, rng)
    gru = init_gru(store, "psi/gru", x_width + k + 2, config.gru_hidden, rng)
    head = init_dense(store, "psi/head", config.gru_hidden, 6 * config.gmm_components, rng)
    return DecoderParams(init, gru, head)


@dataclass
class GmmHead:
    """Tensor-valued mixture parameters for one decoding step."""

    log_weights: Tensor  # [R, K]
    means: Tensor  # [R, K, 2]
    sigmas: Tensor  # [R, K, 2]
    corr: Tensor  # [R, K]

    def to_numpy(self) -> Gmm2D:
        return Gmm2D(
            weights=np.exp(self.log_weights.data),
            means=self.means.data,
            sigmas=self.sigmas.data,
            corr=self.corr.data,
        )


def split_gmm_head(raw: Tensor, n_components: int, sigma_min: float, rho_max: float) -> GmmHead:
    k = n_components
    rows = raw.shape[0]
    log_w = ad.log_softmax(raw[:, 0:k], axis=1)
    means = ad.reshape(raw[:, k : 3 * k], (rows, k, 2))
    sigmas = ad.add(ad.exp(ad.reshape(raw[:, 3 * k : 5 * k], (rows, k, 2))), sigma_min)
    corr = ad.mul(ad.tanh(raw[:, 5 * k : 6 * k]), rho_max)
    return GmmHead(log_w, means, sigmas, corr)


def gmm_log_prob_t(head: GmmHead, v: Tensor | np.ndarray) -> Tensor:
    """Differentiable log mixture density of velocities v [R, 2] -> [R]."""
    v = ad.as_tensor(v)
    rows, k = head.log_weights.shape
    vx = ad.reshape(v[:, 0], (rows, 1))
    vy = ad.reshape(v[:, 1], (rows, 1))
    sx = head.sigmas[:, :, 0]
    sy = head.sigmas[:, :, 1]
    dx = ad.div(ad.sub(vx, head.means[:, :, 0]), sx)
    dy = ad.div(ad.sub(vy, head.means[:, :, 1]), sy)
    omr2 = ad.sub(1.0, ad.mul(head.corr, head.corr))
    quad = ad.div(
        ad.add(ad.sub(ad.mul(dx, dx), ad.mul(2.0, ad.mul(ad.mul(head.corr, dx), dy))),
               ad.mul(dy, dy)),
        omr2,
    )
    log_norm = ad.neg(ad.add(ad.add(ad.add(ad.log(sx), ad.log(sy)),
                                    ad.mul(0.5, ad.log(omr2))), LOG_2PI))
    comp = ad.add(head.log_weights, ad.sub(log_norm, ad.mul(0.5, quad)))
    return ad.logsumexp(comp, axis=1)


def rollout_heads(
    dec: DecoderParams,
    config: ModelConfig,
    e_x: Tensor,
    z_onehot: np.ndarray,
    velocity_inputs: np.ndarray,
) -> list[GmmHead]:
    """Unrolled decoding with a fixed (teacher-forced) velocity input stream.

    ``velocity_inputs`` is [R, T, 2] standardized: the current velocity at
    step 1 followed by the ground-truth velocities of steps 1..T-1.
    """
    z = Tensor(z_onehot)
    cond = ad.concat([e_x, z], axis=-1)
    h = dense(cond, dec.init, activation="tanh")
    heads = []
    for t in range(velocity_inputs.shape[1]):
        inp = ad.concat([cond, Tensor(velocity_inputs[:, t, :])], axis=-1)
        h = gru_step(inp, h, dec.gru)
        heads.append(split_gmm_head(dense(h, dec.head), config.gmm_components,
                                    config.sigma_min, config.rho_max))
    return heads


def rollout_heads_sampled(
    dec: DecoderParams,
    config: ModelConfig,
    e_x: Tensor,
    z_onehot: np.ndarray,
    first_velocity_std: np.ndarray,
    horizon: int,
    rng: np.random.Generator,
    vel_mean: np.ndarray,
    vel_std: np.ndarray,
) -> list[GmmHead]:
    """Differentiable unroll whose velocity feedback is sampled per step.

    The feedback stream is detached (sampling is not differentiated), but
    gradients still flow through the recurrent state, so the heads learn
    to stay consistent with their own rollouts instead of leaning on
    ground-truth inputs.
    """
    z = Tensor(z_onehot)
    cond = ad.concat([e_x, z], axis=-1)
    h = dense(cond, dec.init, activation="tanh")
    heads = []
    vel_in = np.asarray(first_velocity_std, dtype=np.float64)
    for _ in range(horizon):
        inp = ad.concat([cond, Tensor(vel_in)], axis=-1)
        h = gru_step(inp, h, dec.gru)
        head = split_gmm_head(dense(h, dec.head), config.gmm_components,
                              config.sigma_min, config.rho_max)
        heads.append(head)
        v = head.to_numpy().sample(rng)
        vel_in = (v - vel_mean) / vel_std
    return heads


def rollout_generative(
    dec: DecoderParams,
    config: ModelConfig,
    e_x_rows: np.ndarray,
    z_onehot: np.ndarray,
    first_velocity_std: np.ndarray,
    horizon: int,
    rng: np.random.Generator,
    standardize_velocity,
    mode_flag: bool = False,
) -> tuple[np.ndarray, list[Gmm2D]]:
    """Sampled (or mode-followed) rollout returning physical velocities.

    Feedback at each step is the chosen velocity of the previous step,
    standardized before re-entering the cell. Returns ([R, T, 2] velocities,
    per-step batched mixtures).
    """
    with ad.no_grad():
        rows = e_x_rows.shape[0]
        cond = Tensor(np.concatenate([e_x_rows, z_onehot], axis=1))
        h = dense(cond, dec.init, activation="tanh")
        vel_in = np.asarray(first_velocity_std, dtype=np.float64)
        velocities = np.zeros((rows, horizon, 2))
        mixtures: list[Gmm2D] = []
        for t in range(horizon):
            inp = ad.concat([cond, Tensor(vel_in)], axis=-1)
            h = gru_step(inp, h, dec.gru)
            head = split_gmm_head(dense(h, dec.head), config.gmm_components,
                                  config.sigma_min, config.rho_max)
            gmm = head.to_numpy()
            mixtures.append(gmm)
            if mode_flag:
                v = np.stack([
                    mode_velocity(Gmm2D(gmm.weights[r], gmm.means[r], gmm.sigmas[r], gmm.corr[r]))
                    for r in range(rows)
                ])
            else:
                v = gmm.sample(rng)
            velocities[:, t, :] = v
            vel_in = standardize_velocity(v)
    return velocities, mixtures


def predict(model, instance, scheme: str, n_samples: int, seed: int) -> PredictionOutput:
    """Forecast one instance under a named output scheme.

    ``full``: latent classes sampled from the conditional prior, then sampled
    rollouts. ``zmode``: every sample shares the argmax latent class.
    ``mm``: the argmax latent class plus a mode-velocity rollout; exactly one
    trajectory regardless of ``n_samples``.
    """
    scheme = scheme.lower()
    if scheme not in ("full", "zmode", "mm"):
        raise ValueError(f"unknown output scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    with ad.no_grad():
        prior = model.prior_distribution(instance)
    k = prior.n
    if scheme == "full":
        classes = np.asarray(rng.choice(k, size=n_samples, p=prior.probs))
    elif scheme == "zmode":
        classes = np.full(n_samples, int(np.argmax(prior.probs)))
    else:
        classes = np.array([int(np.argmax(prior.probs))])
    z_onehot = np.eye(k)[classes]
    velocities, mixtures = model.rollout_instance(
        instance, z_onehot, rng, mode_flag=(scheme == "mm")
    )
    trajectories = integrate(velocities, instance.current_position, instance.dt)
    sequences = None
    if scheme == "mm":
        sequences = [GmmSequence(
            steps=[Gmm2D(m.weights[0], m.means[0], m.sigmas[0], m.corr[0]) for m in mixtures],
            dt=instance.dt,
            initial_position=np.array(instance.current_position),
        )]
    return PredictionOutput(
        scheme=scheme,
        trajectories=trajectories,
        latent_classes=classes,
        latent_probs=prior.probs,
        velocities=velocities,
        gmm_sequences=sequences,
    )


def enumerate_mode_sequences(model, instance) -> list[tuple[float, GmmSequence, np.ndarray]]:
    """Per-latent-class mode rollouts: (prior probability, mixtures, trajectory)."""
    with ad.no_grad():
        prior = model.prior_distribution(instance)
    out = []
    for z in range(prior.n):
        onehot = np.eye(prior.n)[[z]]
        rng = np.random.default_rng(0)  # unused by mode rollouts
        velocities, mixtures = model.rollout_instance(instance, onehot, rng, mode_flag=True)
        traj = integrate(velocities, instance.current_position, instance.dt)[0]
        seq = GmmSequence(
            steps=[Gmm2D(m.weights[0], m.means[0], m.sigmas[0], m.corr[0]) for m in mixtures],
            dt=instance.dt,
            initial_position=np.array(instance.current_position),
        )
        out.append((float(prior.probs[z]), seq, traj))
    return out
