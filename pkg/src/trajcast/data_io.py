"""Trajectory text ingestion and per-class input standardization.

Two row layouts are accepted, both whitespace-separated with one
observation per row:

* ``canonical``: ``frame id class x y``
* ``classic``:   ``frame id x y`` (every agent becomes a Pedestrian)

Frames may be sparse (e.g. every tenth video frame); the loader maps the
sorted set of distinct frame values onto contiguous timesteps. Short
observation gaps inside a track are linearly interpolated; longer gaps
split the track into separate agents.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .scene import STATE_DIM, AgentNode, Scene

FORMATS = ("canonical", "classic")
MAX_INTERP_GAP = 2  # missing steps; longer gaps split the track


class TrajectoryFormatError(ValueError):
    pass


def _parse_rows(path: str, format_tag: str):
    if format_tag not in FORMATS:
        raise ValueError(f"unknown format {format_tag!r}, expected one of {FORMATS}")
    expected = 5 if format_tag == "canonical" else 4
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != expected:
                raise TrajectoryFormatError(
                    f"{path}:{lineno}: expected {expected} fields, got {len(parts)}"
                )
            try:
                frame = int(float(parts[0]))
                agent_id = parts[1]
                if format_tag == "canonical":
                    cls, x, y = parts[2], float(parts[3]), float(parts[4])
                else:
                    cls, x, y = "Pedestrian", float(parts[2]), float(parts[3])
            except ValueError as err:
                raise TrajectoryFormatError(f"{path}:{lineno}: {err}") from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise TrajectoryFormatError(f"{path}:{lineno}: non-finite position")
            rows.append((frame, agent_id, cls, x, y, lineno))
    return rows


def load_trajectory_text(path: str, format_tag: str = "canonical", dt: float = 0.4) -> Scene:
    """Parse a trajectory text file into a Scene with derived dynamic states."""
    rows = _parse_rows(path, format_tag)
    if not rows:
        raise TrajectoryFormatError(f"{path}: no data rows")

    frame_index = {f: i for i, f in enumerate(sorted({r[0] for r in rows}))}
    tracks: dict[str, dict] = {}
    for frame, agent_id, cls, x, y, lineno in rows:
        tr = tracks.setdefault(agent_id, {"cls": cls, "steps": [], "pos": [], "last": None})
        if tr["cls"] != cls:
            raise TrajectoryFormatError(
                f"{path}:{lineno}: agent {agent_id!r} changes class {tr['cls']!r} -> {cls!r}"
            )
        if tr["last"] is not None and frame <= tr["last"]:
            raise TrajectoryFormatError(
                f"{path}:{lineno}: non-monotone frame {frame} for agent {agent_id!r}"
            )
        tr["last"] = frame
        tr["steps"].append(frame_index[frame])
        tr["pos"].append((x, y))

    agents = []
    for agent_id, tr in tracks.items():
        segments = _fill_gaps(np.array(tr["steps"]), np.array(tr["pos"], dtype=np.float64))
        for k, (start, positions) in enumerate(segments):
            suffix = "" if len(segments) == 1 else f"#{k}"
            agents.append(
                AgentNode.from_positions(agent_id + suffix, tr["cls"], start, positions, dt)
            )
    return Scene(agents=agents, dt=dt)


def _fill_gaps(steps: np.ndarray, positions: np.ndarray):
    """Linearly interpolate runs of <= MAX_INTERP_GAP missing steps, split otherwise."""
    segments = []
    seg_steps = [int(steps[0])]
    seg_pos = [positions[0]]
    for s, p in zip(steps[1:], positions[1:]):
        gap = int(s) - seg_steps[-1] - 1
        if gap == 0:
            pass
        elif gap <= MAX_INTERP_GAP:
            prev = seg_pos[-1]
            for k in range(1, gap + 1):
                frac = k / (gap + 1)
                seg_steps.append(seg_steps[-1] + 1)
                seg_pos.append(prev + frac * (p - prev))
        else:
            segments.append((seg_steps[0], np.stack(seg_pos)))
            seg_steps, seg_pos = [], []
        seg_steps.append(int(s))
        seg_pos.append(p)
    segments.append((seg_steps[0], np.stack(seg_pos)))
    return segments


def save_trajectory_text(path: str, scene: Scene) -> None:
    """Write a Scene in the canonical 5-column layout (atomic replace)."""
    lines = []
    for t in range(scene.first_timestep, scene.last_timestep + 1):
        for a in scene.agents_at(t):
            x, y = a.position_at(t)
            lines.append(f"{t} {a.agent_id} {a.class_name} {x!r} {y!r}\n")
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        f.writelines(lines)
    os.replace(tmp, path)


@dataclass
class StandardizationStats:
    """Per-class, per-dimension mean and deviation for 6-D state vectors."""

    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]
    eps: float = 1e-8

    @classmethod
    def from_arrays(cls, per_class: dict[str, np.ndarray], eps: float = 1e-8) -> "StandardizationStats":
        mean, std = {}, {}
        for name, arr in per_class.items():
            arr = np.asarray(arr, dtype=np.float64).reshape(-1, arr.shape[-1])
            mean[name] = arr.mean(axis=0)
            std[name] = np.maximum(arr.std(axis=0), eps)
        return cls(mean, std, eps)

    def apply(self, x: np.ndarray, class_name: str, dims: slice | None = None) -> np.ndarray:
        m, s = self.mean[class_name], self.std[class_name]
        if dims is not None:
            m, s = m[dims], s[dims]
        return (np.asarray(x, dtype=np.float64) - m) / s

    def invert(self, x: np.ndarray, class_name: str, dims: slice | None = None) -> np.ndarray:
        m, s = self.mean[class_name], self.std[class_name]
        if dims is not None:
            m, s = m[dims], s[dims]
        return np.asarray(x, dtype=np.float64) * s + m

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.mean:
            out[f"stats/{name}/mean"] = self.mean[name]
            out[f"stats/{name}/std"] = self.std[name]
        return out

    @classmethod
    def from_named_arrays(cls, arrays: dict[str, np.ndarray]) -> "StandardizationStats":
        mean, std = {}, {}
        for key, arr in arrays.items():
            if not key.startswith("stats/"):
                continue
            _, name, which = key.split("/")
            (mean if which == "mean" else std)[name] = np.asarray(arr, dtype=np.float64)
        return cls(mean, std)


def compute_stats(instances, eps: float = 1e-8, center: bool = True) -> StandardizationStats:
    """Stats over instance history states, optionally after centering positions
    at each instance's current position (training split only)."""
    per_class: dict[str, list[np.ndarray]] = {}
    for inst in instances:
        states = inst.history.copy()
        if center:
            states[:, 0:2] -= inst.current_position
        per_class.setdefault(inst.class_name, []).append(states)
        if inst.ego_future is not None and inst.ego_class is not None:
            ego = inst.ego_future.copy()
            if center:
                ego[:, 0:2] -= inst.current_position
            per_class.setdefault(inst.ego_class, []).append(ego)
    stacked = {k: np.concatenate(v, axis=0) for k, v in per_class.items()}
    return StandardizationStats.from_arrays(stacked, eps)


def standardize_instance(inst, stats: StandardizationStats):
    """Copy of the instance with all numeric state fields standardized."""
    from .scene import PredictionInstance  # local import to avoid cycle

    edge_src = lambda key: key.split("->")[0]
    return PredictionInstance(
        agent_id=inst.agent_id,
        class_name=inst.class_name,
        t=inst.t,
        dt=inst.dt,
        history=stats.apply(inst.history, inst.class_name),
        neighbors_by_edge_type={
            key: [stats.apply(n, edge_src(key)) for n in lst]
            for key, lst in inst.neighbors_by_edge_type.items()
        },
        map_crop=None if inst.map_crop is None else inst.map_crop.copy(),
        ego_future=None if inst.ego_future is None
        else stats.apply(inst.ego_future, inst.ego_class),
        ego_class=inst.ego_class,
        gt_future=None if inst.gt_future is None
        else stats.apply(inst.gt_future, inst.class_name, dims=slice(0, 2)),
    )


def unstandardize_instance(inst, stats: StandardizationStats):
    from .scene import PredictionInstance  # local import to avoid cycle

    edge_src = lambda key: key.split("->")[0]
    return PredictionInstance(
        agent_id=inst.agent_id,
        class_name=inst.class_name,
        t=inst.t,
        dt=inst.dt,
        history=stats.invert(inst.history, inst.class_name),
        neighbors_by_edge_type={
            key: [stats.invert(n, edge_src(key)) for n in lst]
            for key, lst in inst.neighbors_by_edge_type.items()
        },
        map_crop=None if inst.map_crop is None else inst.map_crop.copy(),
        ego_future=None if inst.ego_future is None
        else stats.invert(inst.ego_future, inst.ego_class),
        ego_class=inst.ego_class,
        gt_future=None if inst.gt_future is None
        else stats.invert(inst.gt_future, inst.class_name, dims=slice(0, 2)),
    )
