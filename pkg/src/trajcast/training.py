"""Training objective, annealing schedule, map-CNN pre-training, and the
train/evaluate loops.

The objective (maximized) is

    E_{z ~ q}[log p(y | x, z)] - beta * KL(q || p) + alpha * I(x; z)

with the expectation over the discrete latent computed by exact enumeration
(the latent space is small, so gradients are deterministic and finite-
difference checkable). The KL weight anneals along an increasing sigmoid;
the mutual-information weight stays constant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, ResolvedBetaSchedule, TrainConfig
from .checkpoint import Checkpoint
from .data_io import compute_stats
from .decoder import (gmm_log_prob_t, predict, rollout_heads,
                      rollout_heads_sampled, split_gmm_head)
from .latent import kl_discrete_t, mutual_information_t
from .layers import dense, init_dense
from .metrics import MetricsReport, best_of_n, displacement_errors, kde_nll, violation_rate
from .model import Batch, ForecastModel
from .optim import Adam, AdamConfig
from .scene import PredictionInstance


@dataclass
class LossReport:
    """One iteration's objective terms, all in nats (total is maximized)."""

    iteration: int
    total: float
    reconstruction: float
    kl: float
    mutual_information: float
    beta: float
    alpha: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class TrainingDiverged(RuntimeError):
    pass


def beta_schedule(iteration: int, schedule: ResolvedBetaSchedule) -> float:
    """Increasing-sigmoid annealing of the KL weight."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    z = schedule.rate * (iteration - schedule.midpoint)
    sig = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
    return schedule.beta_min + (schedule.beta_max - schedule.beta_min) * sig


def elbo_loss(model: ForecastModel, batch: Batch, beta: float, alpha: float,
              iteration: int = 0, teacher_forcing: bool = True,
              rng: Optional[np.random.Generator] = None) -> tuple[Tensor, LossReport]:
    """Differentiable objective for a batch of ground-truth-bearing instances.

    The expectation over the latent is an exact weighted sum over all
    classes. With teacher forcing the decoder feedback is the ground-truth
    velocity stream (fully deterministic, finite-difference checkable);
    without it the feedback is sampled from each step's own mixture, which
    keeps the latent load-bearing instead of letting the per-step mixtures
    absorb all multimodality. Returns (loss to minimize, report).
    """
    if batch.gt_velocities is None:
        raise ValueError("every training instance must carry a ground-truth future")
    cfg = model.config
    k = cfg.latent_classes
    bsz = batch.size

    e_x = model.encode_batch(batch)
    e_y = model.encode_future_batch(batch)
    log_p = ad.log_softmax(model.prior_logits_batch(e_x), axis=1)
    log_q = ad.log_softmax(model.recognition_logits_batch(e_x, e_y), axis=1)

    kl = ad.tmean(kl_discrete_t(log_q, log_p))
    mi = mutual_information_t(log_p)

    e_x_rows = ad.repeat_rows(e_x, k)
    z_rows = np.tile(np.eye(k), (bsz, 1))
    gt_rows = np.repeat(batch.gt_velocities, k, axis=0)
    if teacher_forcing:
        teacher_rows = np.repeat(batch.teacher_inputs, k, axis=0)
        heads = rollout_heads(model.decoder, cfg, e_x_rows, z_rows, teacher_rows)
    else:
        if rng is None:
            raise ValueError("sampled-feedback training requires a random generator")
        heads = rollout_heads_sampled(
            model.decoder, cfg, e_x_rows, z_rows,
            np.repeat(batch.current_velocity_std, k, axis=0),
            batch.horizon, rng,
            np.repeat(batch.velocity_mean, k, axis=0),
            np.repeat(batch.velocity_std, k, axis=0),
        )
    step_ll = None
    for t, head in enumerate(heads):
        ll = gmm_log_prob_t(head, gt_rows[:, t, :])
        step_ll = ll if step_ll is None else ad.add(step_ll, ll)
    ll_by_z = ad.reshape(step_ll, (bsz, k))
    recon = ad.tmean(ad.tsum(ad.mul(ad.exp(log_q), ll_by_z), axis=1))

    total = ad.add(ad.sub(recon, ad.mul(beta, kl)), ad.mul(alpha, mi))
    loss = ad.neg(total)
    report = LossReport(
        iteration=iteration,
        total=total.item(),
        reconstruction=recon.item(),
        kl=kl.item(),
        mutual_information=mi.item(),
        beta=beta,
        alpha=alpha,
    )
    return loss, report


def pretrain_map_cnn(model: ForecastModel, instances: Sequence[PredictionInstance],
                     iterations: int, learning_rate: float = 1e-3,
                     batch_size: int = 32,
                     seed: int = 0) -> tuple[dict[str, np.ndarray], list[float]]:
    """Warm up the map CNN by decoding futures from map features alone.

    A throwaway dense head maps the CNN feature straight to per-step mixture
    parameters; only the CNN parameter group survives. The predictions made
    here are expected to be poor; the point is to move the filters off their
    random initialisation before joint training.
    """
    cfg = model.config
    if not cfg.map_encoding:
        raise ValueError("map encoding is disabled; nothing to pre-train")
    usable = [i for i in instances if i.map_crop is not None and i.gt_future is not None]
    if not usable:
        raise ValueError("no map-bearing instances with ground truth available")
    horizon = cfg.classes[usable[0].class_name].prediction_horizon

    rng = np.random.default_rng(seed)
    head_store: dict[str, Tensor] = {}
    head = init_dense(head_store, "pretrain/head", cfg.map_dense,
                      horizon * 6 * cfg.gmm_components, rng)
    cnn_names = [n for n in model.params if n.startswith("theta/map/")]
    trainable = {n: model.params[n] for n in cnn_names}
    trainable.update(head_store)
    opt = Adam(trainable, AdamConfig(lr=learning_rate))

    losses = []
    for _ in range(iterations):
        idx = rng.choice(len(usable), size=min(batch_size, len(usable)), replace=False)
        batch = model.prepare_batch([usable[i] for i in idx], require_gt=True)
        from .encoder import encode_map  # local import keeps module deps one-way

        feat = encode_map(model.encoder, batch.map_crops, cfg.map_strides)
        raw = dense(feat, head)
        rows = batch.size
        step_ll = None
        for t in range(horizon):
            raw_t = raw[:, t * 6 * cfg.gmm_components : (t + 1) * 6 * cfg.gmm_components]
            h = split_gmm_head(raw_t, cfg.gmm_components, cfg.sigma_min, cfg.rho_max)
            ll = gmm_log_prob_t(h, batch.gt_velocities[:, t, :])
            step_ll = ll if step_ll is None else ad.add(step_ll, ll)
        loss = ad.neg(ad.tmean(step_ll))
        grads = ad.gradients(loss, trainable)
        opt.step(grads)
        losses.append(loss.item())
    return {n: model.params[n].data.copy() for n in cnn_names}, losses


@dataclass
class TrainResult:
    model: ForecastModel
    checkpoint: Checkpoint
    reports: list[LossReport]
    diverged: bool = False


def _strata(instances: Sequence[PredictionInstance], config: ModelConfig):
    groups: dict[tuple, list[int]] = {}
    for i, inst in enumerate(instances):
        key = (round(inst.dt, 9), config.classes[inst.class_name].prediction_horizon)
        groups.setdefault(key, []).append(i)
    return list(groups.values())


def train(
    instances: Sequence[PredictionInstance],
    model_config: ModelConfig,
    train_config: TrainConfig,
    checkpoint_path: Optional[str] = None,
    log_path: Optional[str] = None,
    progress: bool = False,
) -> TrainResult:
    """Train a fresh model on prepared instances.

    Deterministic given (instances, configs): all sampling flows from the
    configured seed, and parameter updates are single-threaded. On a
    non-finite loss the last good parameters are restored and returned.
    """
    usable = [i for i in instances if i.gt_future is not None]
    if not usable:
        raise ValueError("training requires instances with ground-truth futures")
    stats = compute_stats(usable, center=model_config.center_inputs)
    model = ForecastModel.initialize(model_config, seed=train_config.seed, stats=stats)

    if model_config.map_encoding and train_config.pretrain_iterations > 0:
        pretrain_map_cnn(
            model, usable, train_config.pretrain_iterations,
            learning_rate=train_config.pretrain_learning_rate,
            batch_size=train_config.batch_size, seed=train_config.seed + 1,
        )

    schedule = train_config.resolved(model_config.map_encoding)
    opt = Adam(model.params, AdamConfig(lr=train_config.learning_rate,
                                        grad_clip=train_config.grad_clip))
    rng = np.random.default_rng(train_config.seed)
    strata = _strata(usable, model_config)
    weights = np.array([len(s) for s in strata], dtype=float)
    weights /= weights.sum()

    reports: list[LossReport] = []
    log_lines: list[str] = []
    last_good = model.param_arrays()
    diverged = False
    ln_k = math.log(model_config.latent_classes)

    for it in range(train_config.iterations):
        stratum = strata[int(rng.choice(len(strata), p=weights))] if len(strata) > 1 else strata[0]
        take = min(train_config.batch_size, len(stratum))
        idx = rng.choice(len(stratum), size=take, replace=False)
        picked = [usable[stratum[i]] for i in idx]
        batch = model.prepare_batch(picked, require_gt=True)
        beta = beta_schedule(it, schedule)
        try:
            loss, report = elbo_loss(model, batch, beta, train_config.alpha, iteration=it,
                                     teacher_forcing=train_config.teacher_forcing, rng=rng)
            if not math.isfinite(report.total):
                raise TrainingDiverged(f"non-finite loss at iteration {it}")
            grads = ad.gradients(loss, model.params)
        except (TrainingDiverged, ad.GradientError):
            model.load_arrays(last_good)
            diverged = True
            break
        if report.kl < -1e-9 or not -1e-9 <= report.mutual_information <= ln_k + 1e-9:
            raise AssertionError(
                f"objective invariant violated at iteration {it}: "
                f"kl={report.kl}, mi={report.mutual_information}"
            )
        opt.step(grads)
        last_good = model.param_arrays()
        reports.append(report)
        log_lines.append(report.to_json())
        model.iteration = it + 1
        if progress and (it + 1) % max(1, train_config.iterations // 20) == 0:
            print(f"iter {it + 1}/{train_config.iterations} "
                  f"total={report.total:.3f} recon={report.reconstruction:.3f} "
                  f"kl={report.kl:.3f} mi={report.mutual_information:.3f} beta={beta:.3f}")
        if (checkpoint_path and train_config.checkpoint_every > 0
                and (it + 1) % train_config.checkpoint_every == 0):
            from .checkpoint import save_checkpoint

            save_checkpoint(checkpoint_path, model.to_checkpoint(seed=train_config.seed))

    ckpt = model.to_checkpoint(seed=train_config.seed)
    ckpt.extra["train_config"] = train_config.to_dict()
    if checkpoint_path:
        from .checkpoint import save_checkpoint

        save_checkpoint(checkpoint_path, ckpt)
    if log_path:
        with open(log_path, "w", encoding="utf-8") as f:
            f.write("\n".join(log_lines) + ("\n" if log_lines else ""))
    return TrainResult(model=model, checkpoint=ckpt, reports=reports, diverged=diverged)


def evaluate_run(
    model: ForecastModel,
    instances: Sequence[PredictionInstance],
    schemes: Sequence[str] = ("mm", "zmode", "full"),
    n_samples: int = 200,
    seed: int = 0,
    best_of: int = 20,
    map_raster=None,
    horizons_sec: Optional[Sequence[float]] = None,
) -> dict[str, MetricsReport]:
    """Predict every instance under each scheme and aggregate all metrics.

    Generative schemes report mean-sample displacement errors, best-of-N,
    and the KDE log-likelihood; the deterministic scheme reports plain
    displacement errors only. Obstacle violations are included when a map
    raster is supplied.
    """
    out: dict[str, MetricsReport] = {}
    for scheme in schemes:
        scheme = scheme.lower()
        gen = scheme in ("full", "zmode")
        ades, fdes, nlls, bon_a, bon_f, viols = [], [], [], [], [], []
        at_ade: dict[str, list[float]] = {}
        at_fde: dict[str, list[float]] = {}
        at_nll: dict[str, list[float]] = {}
        horizon_keys: list[float] = []
        used_samples = 0
        for i, inst in enumerate(instances):
            if inst.gt_future is None:
                continue
            n = n_samples if gen else 1
            output = predict(model, inst, scheme, n, seed=seed + 7919 * i)
            used_samples = len(output.trajectories)
            gt = np.asarray(inst.gt_future)
            horizon = len(gt)
            if horizons_sec is None:
                secs = [s for s in (1.0, 2.0, 3.0, 4.0) if round(s / inst.dt) <= horizon]
            else:
                secs = [s for s in horizons_sec if round(s / inst.dt) <= horizon]
            horizon_keys = secs
            if gen:
                errs = [displacement_errors(tr, gt) for tr in output.trajectories]
                ades.append(float(np.mean([e[0] for e in errs])))
                fdes.append(float(np.mean([e[1] for e in errs])))
                if len(output.trajectories) >= 2:
                    nlls.append(kde_nll(output.trajectories, gt))
                if len(output.trajectories) >= best_of:
                    a, f = best_of_n(output.trajectories, gt, best_of)
                    bon_a.append(a)
                    bon_f.append(f)
                if map_raster is not None:
                    viols.append(violation_rate(output.trajectories, map_raster))
                for s in secs:
                    k = int(round(s / inst.dt))
                    key = f"{s:g}s"
                    d = np.linalg.norm(output.trajectories[:, :k, :] - gt[None, :k, :], axis=-1)
                    at_ade.setdefault(key, []).append(float(d.mean()))
                    at_fde.setdefault(key, []).append(float(d[:, -1].mean()))
                    if len(output.trajectories) >= 2:
                        at_nll.setdefault(key, []).append(
                            kde_nll(output.trajectories[:, :k, :], gt[:k])
                        )
            else:
                a, f = displacement_errors(output.trajectories[0], gt)
                ades.append(a)
                fdes.append(f)
                if map_raster is not None:
                    viols.append(violation_rate(output.trajectories, map_raster))
                for s in secs:
                    k = int(round(s / inst.dt))
                    key = f"{s:g}s"
                    d = np.linalg.norm(output.trajectories[0, :k, :] - gt[:k], axis=-1)
                    at_ade.setdefault(key, []).append(float(d.mean()))
                    at_fde.setdefault(key, []).append(float(d[-1]))
        mean = lambda xs: float(np.mean(xs)) if xs else None
        out[scheme] = MetricsReport(
            scheme=scheme,
            n_instances=len(ades),
            n_samples=used_samples,
            ade=mean(ades),
            fde=mean(fdes),
            kde_nll=mean(nlls),
            best_of_n_ade=mean(bon_a),
            best_of_n_fde=mean(bon_f),
            best_of=best_of if bon_a else None,
            violation_rate=mean(viols),
            horizon_seconds=list(horizon_keys),
            ade_at={k: float(np.mean(v)) for k, v in at_ade.items()},
            fde_at={k: float(np.mean(v)) for k, v in at_fde.items()},
            kde_nll_at={k: float(np.mean(v)) for k, v in at_nll.items()},
            per_instance={"ade": ades, "fde": fdes},
        )
    return out


def report_to_json(reports: dict[str, MetricsReport]) -> str:
    return json.dumps({k: v.to_dict() for k, v in reports.items()}, sort_keys=True, indent=2)


def report_to_text(reports: dict[str, MetricsReport]) -> str:
    lines = []
    for scheme in sorted(reports):
        lines.extend(reports[scheme].to_text_rows())
    return "\n".join(lines) + "\n"
