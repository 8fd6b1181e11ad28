"""Forecast-quality metrics for deterministic and generative outputs.

The kernel-density log-likelihood fits an axis-aligned Gaussian product
kernel per future timestep (Scott's factor n^(-1/6) on the per-dimension
deviation, floored at 1e-3 m) and evaluates the ground truth under it;
log densities below the clip floor are truncated so a single far outlier
cannot dominate a mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .maps import MapRaster

KDE_BANDWIDTH_FLOOR = 1e-3  # meters
KDE_LOG_DENSITY_FLOOR = -20.0  # nats


def displacement_errors(predicted: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """(ADE, FDE): mean and final Euclidean distance between trajectories."""
    predicted = np.asarray(predicted, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if predicted.shape != gt.shape or predicted.ndim != 2 or predicted.shape[0] < 1:
        raise ValueError(f"trajectory shape mismatch: {predicted.shape} vs {gt.shape}")
    dists = np.linalg.norm(predicted - gt, axis=-1)
    return float(dists.mean()), float(dists[-1])


def kde_nll(samples: np.ndarray, gt: np.ndarray,
            log_density_floor: float = KDE_LOG_DENSITY_FLOOR) -> float:
    """Mean per-timestep negative log likelihood of gt under a sample KDE (nats)."""
    samples = np.asarray(samples, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[0] < 2:
        raise ValueError("kde_nll needs at least two sample trajectories [n, T, 2]")
    n, horizon, _ = samples.shape
    if gt.shape != (horizon, 2):
        raise ValueError(f"gt shape {gt.shape} does not match horizon {horizon}")
    factor = n ** (-1.0 / 6.0)  # Scott's rule, d = 2
    total = 0.0
    for t in range(horizon):
        pts = samples[:, t, :]
        bw = np.maximum(factor * pts.std(axis=0, ddof=1), KDE_BANDWIDTH_FLOOR)
        z = (gt[t] - pts) / bw
        log_kernel = -0.5 * (z * z).sum(axis=1) - np.log(2.0 * np.pi * bw[0] * bw[1])
        m = log_kernel.max()
        log_density = m + np.log(np.exp(log_kernel - m).sum()) - np.log(n)
        total += -max(log_density, log_density_floor)
    return total / horizon


def best_of_n(samples: np.ndarray, gt: np.ndarray, n: int) -> tuple[float, float]:
    """Minimum ADE and FDE over the first n samples, minimized independently."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or len(samples) < n:
        raise ValueError(f"need at least {n} samples, got {samples.shape}")
    errors = [displacement_errors(samples[i], gt) for i in range(n)]
    return min(e[0] for e in errors), min(e[1] for e in errors)


def violation_rate(samples: np.ndarray, raster: MapRaster, occupied_channel: int = 0,
                   threshold: float = 0.5, outside_is_violation: bool = True) -> float:
    """Fraction of trajectories that enter an occupied map cell.

    Consecutive positions are linearly interpolated at half-cell spacing so
    a wall thinner than one step's displacement still registers.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3:
        raise ValueError(f"samples must be [n, T, 2], got {samples.shape}")
    occ = raster.values[:, :, occupied_channel]
    violations = 0
    for traj in samples:
        points = _densify(traj, raster.resolution * 0.5)
        rows, cols = raster.world_to_cell(points)
        inside = raster.in_bounds(rows, cols)
        hit = bool(np.any(occ[rows[inside], cols[inside]] >= threshold))
        if outside_is_violation and not inside.all():
            hit = True
        violations += hit
    return violations / len(samples)


def _densify(traj: np.ndarray, spacing: float) -> np.ndarray:
    points = [traj[0]]
    for a, b in zip(traj[:-1], traj[1:]):
        dist = float(np.linalg.norm(b - a))
        n_extra = int(dist / spacing)
        for k in range(1, n_extra + 1):
            points.append(a + (b - a) * (k / (n_extra + 1)))
        points.append(b)
    return np.asarray(points)


@dataclass
class MetricsReport:
    """Aggregated forecast metrics for one output scheme over a dataset split."""

    scheme: str
    n_instances: int = 0
    n_samples: int = 0
    ade: Optional[float] = None
    fde: Optional[float] = None
    kde_nll: Optional[float] = None
    best_of_n_ade: Optional[float] = None
    best_of_n_fde: Optional[float] = None
    best_of: Optional[int] = None
    violation_rate: Optional[float] = None
    horizon_seconds: list[float] = field(default_factory=list)
    ade_at: dict[str, float] = field(default_factory=dict)
    fde_at: dict[str, float] = field(default_factory=dict)
    kde_nll_at: dict[str, float] = field(default_factory=dict)
    per_instance: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.violation_rate is not None and not 0.0 <= self.violation_rate <= 1.0:
            raise ValueError("violation rate must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "n_instances": self.n_instances,
            "n_samples": self.n_samples,
            "ade": self.ade,
            "fde": self.fde,
            "kde_nll": self.kde_nll,
            "best_of_n_ade": self.best_of_n_ade,
            "best_of_n_fde": self.best_of_n_fde,
            "best_of": self.best_of,
            "violation_rate": self.violation_rate,
            "horizon_seconds": self.horizon_seconds,
            "ade_at": self.ade_at,
            "fde_at": self.fde_at,
            "kde_nll_at": self.kde_nll_at,
        }

    def to_text_rows(self) -> list[str]:
        rows = [f"scheme={self.scheme} instances={self.n_instances} samples={self.n_samples}"]
        for name in ("ade", "fde", "kde_nll", "best_of_n_ade", "best_of_n_fde", "violation_rate"):
            value = getattr(self, name)
            if value is not None:
                rows.append(f"  {name:>15s} = {value:.4f}")
        for sec in self.horizon_seconds:
            key = f"{sec:g}s"
            parts = [f"@{key}"]
            if key in self.ade_at:
                parts.append(f"ade={self.ade_at[key]:.4f}")
            if key in self.fde_at:
                parts.append(f"fde={self.fde_at[key]:.4f}")
            if key in self.kde_nll_at:
                parts.append(f"kde_nll={self.kde_nll_at[key]:.4f}")
            rows.append("  " + " ".join(parts))
        return rows
