"""Scene abstraction: agents, directed interaction edges, and per-timestep
prediction instances.

Agents carry time-indexed kinematic states [px, py, vx, vy, ax, ay] derived
from positions by finite differences. An edge runs from agent i to agent j
when i sits inside the perception range of j's semantic class, so influence
is asymmetric: a car "sees" a distant pedestrian long before the pedestrian
reacts to the car.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .maps import CropSpec, MapRaster, crop_rotate_map

STATE_DIM = 6
POS, VEL, ACC = slice(0, 2), slice(2, 4), slice(4, 6)


@dataclass(frozen=True)
class SemanticClass:
    """Agent category with its perception range and forecast horizons."""

    name: str
    perception_range: float  # meters
    history_horizon: int  # timesteps of history fed to the model
    prediction_horizon: int  # timesteps predicted into the future

    def __post_init__(self):
        if self.perception_range <= 0:
            raise ValueError(f"perception_range must be > 0, got {self.perception_range}")
        if self.history_horizon < 1 or self.prediction_horizon < 1:
            raise ValueError("horizons must be >= 1")


def default_class_table() -> dict[str, SemanticClass]:
    """Pedestrians get 3.2 s / 4.8 s horizons at dt=0.4; vehicles 2 s / 3 s at dt=0.5."""
    return {
        "Pedestrian": SemanticClass("Pedestrian", 5.0, 8, 12),
        "Car": SemanticClass("Car", 30.0, 4, 6),
        "Bus": SemanticClass("Bus", 30.0, 4, 6),
        "Truck": SemanticClass("Truck", 30.0, 4, 6),
    }


def derive_states(positions: np.ndarray, dt: float) -> np.ndarray:
    """Build [p, v, a] state rows from 2-D positions by finite differences.

    Central differences at interior points, one-sided at the ends; the
    first-frame velocity is backfilled from the first forward difference so
    no future information beyond one frame leaks into the sequence start.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 2:
        raise ValueError(f"positions must be [L, 2], got {positions.shape}")
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    bad = np.argwhere(~np.isfinite(positions))
    if bad.size:
        i, j = bad[0]
        raise ValueError(f"non-finite position at index {i} (component {j})")

    def diff(x: np.ndarray) -> np.ndarray:
        n = len(x)
        if n == 1:
            return np.zeros_like(x)
        d = np.empty_like(x)
        d[0] = (x[1] - x[0]) / dt
        d[-1] = (x[-1] - x[-2]) / dt
        if n > 2:
            d[1:-1] = (x[2:] - x[:-2]) / (2.0 * dt)
        return d

    vel = diff(positions)
    acc = diff(vel)
    return np.concatenate([positions, vel, acc], axis=1)


@dataclass
class AgentNode:
    """One tracked agent: a contiguous block of states starting at first_timestep."""

    agent_id: str
    class_name: str
    first_timestep: int
    states: np.ndarray  # [L, 6]

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[1] != STATE_DIM:
            raise ValueError(f"states must be [L, {STATE_DIM}], got {self.states.shape}")
        if not np.all(np.isfinite(self.states)):
            raise ValueError(f"agent {self.agent_id!r} has non-finite states")

    @classmethod
    def from_positions(cls, agent_id: str, class_name: str, first_timestep: int,
                       positions: np.ndarray, dt: float) -> "AgentNode":
        return cls(agent_id, class_name, first_timestep, derive_states(positions, dt))

    @property
    def last_timestep(self) -> int:
        return self.first_timestep + len(self.states) - 1

    def alive_at(self, t: int) -> bool:
        return self.first_timestep <= t <= self.last_timestep

    def state_at(self, t: int) -> np.ndarray:
        if not self.alive_at(t):
            raise KeyError(f"agent {self.agent_id!r} has no state at t={t}")
        return self.states[t - self.first_timestep]

    def position_at(self, t: int) -> np.ndarray:
        return self.state_at(t)[POS]

    def states_between(self, t0: int, t1: int) -> np.ndarray:
        """States on [t0, t1] with NaN rows where the agent does not exist."""
        out = np.full((t1 - t0 + 1, STATE_DIM), np.nan)
        lo = max(t0, self.first_timestep)
        hi = min(t1, self.last_timestep)
        if lo <= hi:
            out[lo - t0 : hi - t0 + 1] = self.states[lo - self.first_timestep : hi - self.first_timestep + 1]
        return out


@dataclass
class Scene:
    agents: list[AgentNode]
    dt: float
    map: Optional[MapRaster] = None
    ego_id: Optional[str] = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        if self.ego_id is not None and self.ego_id not in ids:
            raise ValueError(f"ego_id {self.ego_id!r} is not an agent in the scene")

    @property
    def first_timestep(self) -> int:
        return min(a.first_timestep for a in self.agents)

    @property
    def last_timestep(self) -> int:
        return max(a.last_timestep for a in self.agents)

    def agents_at(self, t: int) -> list[AgentNode]:
        return [a for a in self.agents if a.alive_at(t)]

    def agent(self, agent_id: str) -> AgentNode:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)


@dataclass(frozen=True)
class DirectedEdge:
    """source influences target; the range test uses the *target's* class."""

    source: str
    target: str
    edge_type: tuple[str, str]  # (source class, target class)


def edge_type_name(edge_type: tuple[str, str]) -> str:
    return f"{edge_type[0]}->{edge_type[1]}"


def build_edges(scene: Scene, t: int, classes: dict[str, SemanticClass]) -> set[DirectedEdge]:
    """All directed edges at timestep t under the per-class perception ranges."""
    alive = scene.agents_at(t)
    if len(alive) < 2:
        return set()
    pos = np.stack([a.position_at(t) for a in alive])
    ranges = np.array([classes[a.class_name].perception_range for a in alive])
    delta = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((delta * delta).sum(axis=-1))
    within = dist <= ranges[None, :]  # within[i, j]: i is inside j's range
    np.fill_diagonal(within, False)
    edges = set()
    for i, j in np.argwhere(within):
        src, dst = alive[i], alive[j]
        edges.add(DirectedEdge(src.agent_id, dst.agent_id, (src.class_name, dst.class_name)))
    return edges


@dataclass
class PredictionInstance:
    """Everything the model needs to forecast one agent at one timestep.

    ``history`` covers [t - h, t] for the longest available h <= H. Neighbor
    histories are aligned to the same window, with NaN rows marking steps
    where a neighbor did not exist yet.
    """

    agent_id: str
    class_name: str
    t: int
    dt: float
    history: np.ndarray  # [L, 6]
    neighbors_by_edge_type: dict[str, list[np.ndarray]] = field(default_factory=dict)
    map_crop: Optional[np.ndarray] = None  # [S, S, C]
    ego_future: Optional[np.ndarray] = None  # [T, 6]
    ego_class: Optional[str] = None
    gt_future: Optional[np.ndarray] = None  # [T, 2] positions

    @property
    def current_state(self) -> np.ndarray:
        return self.history[-1]

    @property
    def current_position(self) -> np.ndarray:
        return self.history[-1, POS]

    @property
    def current_velocity(self) -> np.ndarray:
        return self.history[-1, VEL]

    def to_payload(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "agent_id": self.agent_id,
            "class_name": self.class_name,
            "t": self.t,
            "dt": self.dt,
            "history": arr(self.history),
            "neighbors_by_edge_type": {
                k: [arr(n) for n in v] for k, v in self.neighbors_by_edge_type.items()
            },
            "map_crop": arr(self.map_crop),
            "ego_future": arr(self.ego_future),
            "ego_class": self.ego_class,
            "gt_future": arr(self.gt_future),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "PredictionInstance":
        def arr(a):
            return None if a is None else np.asarray(a, dtype=np.float64)

        return cls(
            agent_id=str(payload["agent_id"]),
            class_name=str(payload["class_name"]),
            t=int(payload["t"]),
            dt=float(payload["dt"]),
            history=arr(payload["history"]),
            neighbors_by_edge_type={
                k: [arr(n) for n in v]
                for k, v in payload.get("neighbors_by_edge_type", {}).items()
            },
            map_crop=arr(payload.get("map_crop")),
            ego_future=arr(payload.get("ego_future")),
            ego_class=payload.get("ego_class"),
            gt_future=arr(payload.get("gt_future")),
        )


def heading_from_state(state: np.ndarray) -> float:
    vx, vy = state[VEL]
    if np.hypot(vx, vy) < 1e-6:
        return 0.0
    return float(np.arctan2(vy, vx))


def slice_instances(
    scene: Scene,
    t: int,
    classes: dict[str, SemanticClass],
    require_gt: bool = False,
    min_history: int = 2,
    crop_spec: Optional[CropSpec] = None,
) -> list[PredictionInstance]:
    """One instance per modelable agent alive at t.

    Agents need at least ``min_history`` states up to and including t; the
    designated ego agent is never modeled (its plan is an input, not a
    target). Ground-truth futures are attached only when the agent survives
    the full horizon; with ``require_gt`` set, shorter-lived agents are
    dropped. A present ego contributes its future plan to every instance,
    and a present map contributes a heading-aligned local crop.
    """
    edges = build_edges(scene, t, classes)
    incoming: dict[str, list[DirectedEdge]] = {}
    for e in edges:
        incoming.setdefault(e.target, []).append(e)

    ego = scene.agent(scene.ego_id) if scene.ego_id is not None else None
    instances = []
    for agent in scene.agents_at(t):
        if ego is not None and agent.agent_id == ego.agent_id:
            continue
        cls = classes[agent.class_name]
        h_steps = min(cls.history_horizon, t - agent.first_timestep)
        if h_steps + 1 < min_history:
            continue
        t0 = t - h_steps
        horizon = cls.prediction_horizon

        gt_future = None
        if agent.last_timestep >= t + horizon:
            gt_future = agent.states[
                t + 1 - agent.first_timestep : t + horizon + 1 - agent.first_timestep, POS
            ].copy()
        elif require_gt:
            continue

        neighbors: dict[str, list[np.ndarray]] = {}
        for e in incoming.get(agent.agent_id, []):
            nbr = scene.agent(e.source)
            neighbors.setdefault(edge_type_name(e.edge_type), []).append(
                nbr.states_between(t0, t)
            )

        ego_future = ego_class = None
        if ego is not None and ego.last_timestep >= t + horizon:
            ego_future = ego.states[
                t + 1 - ego.first_timestep : t + horizon + 1 - ego.first_timestep
            ].copy()
            ego_class = ego.class_name

        map_crop = None
        if scene.map is not None and crop_spec is not None:
            state = agent.state_at(t)
            map_crop = crop_rotate_map(
                scene.map, state[POS], heading_from_state(state), crop_spec
            )

        instances.append(
            PredictionInstance(
                agent_id=agent.agent_id,
                class_name=agent.class_name,
                t=t,
                dt=scene.dt,
                history=agent.states[t0 - agent.first_timestep : t + 1 - agent.first_timestep].copy(),
                neighbors_by_edge_type=neighbors,
                map_crop=map_crop,
                ego_future=ego_future,
                ego_class=ego_class,
                gt_future=gt_future,
            )
        )
    return instances


def slice_all_instances(
    scenes: Iterable[Scene],
    classes: dict[str, SemanticClass],
    require_gt: bool = True,
    min_history: int = 2,
    crop_spec: Optional[CropSpec] = None,
) -> list[PredictionInstance]:
    """Instances at every valid timestep of every scene."""
    out: list[PredictionInstance] = []
    for scene in scenes:
        for t in range(scene.first_timestep, scene.last_timestep + 1):
            out.extend(
                slice_instances(scene, t, classes, require_gt=require_gt,
                                min_history=min_history, crop_spec=crop_spec)
            )
    return out
