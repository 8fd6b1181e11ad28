"""Deterministic synthetic scenario generators for training and evaluation.

Each generator is a pure function of (kind, seed, parameters):

* ``two_mode_fork`` — walkers head +x, then turn 45 degrees left or right
  with equal probability. Histories before the fork are indistinguishable,
  so a forecaster must keep both futures alive.
* ``corridor_with_walls`` — bounce-walkers in a walled corridor plus a
  matching occupancy raster. Where the walls are is only visible through
  the map: trajectories are centered before encoding.
* ``car_following`` — an ego lead car with a varying speed profile and a
  follower that tracks the leader's speed at a gap.
* ``crossing`` — two pedestrian streams intersecting at right angles.
"""

from __future__ import annotations

import numpy as np

from .maps import MapRaster, corridor_occupancy
from .scene import AgentNode, Scene

KINDS = ("two_mode_fork", "corridor_with_walls", "car_following", "crossing")


def generate_synthetic(kind: str, seed: int, **params) -> Scene:
    if kind == "two_mode_fork":
        return two_mode_fork(seed, **params)
    if kind == "corridor_with_walls":
        return corridor_with_walls(seed, **params)
    if kind == "car_following":
        return car_following(seed, **params)
    if kind == "crossing":
        return crossing(seed, **params)
    raise ValueError(f"unknown synthetic scenario {kind!r}, expected one of {KINDS}")


def two_mode_fork(seed: int, n_agents: int = 100, dt: float = 0.4,
                  straight_steps: int = 8, future_steps: int = 12,
                  turn_deg: float = 45.0, noise: float = 0.01) -> Scene:
    """Agents walk straight then fork left/right 50/50.

    Each agent occupies its own time block, so there are no interactions;
    the scenario isolates multimodality. The decision point of agent k is
    timestep ``k * block + straight_steps``; the turn itself begins two
    steps later so that centered finite differences over the history window
    cannot see it coming.
    """
    rng = np.random.default_rng(seed)
    block = straight_steps + future_steps + 4
    agents = []
    for k in range(n_agents):
        speed = rng.uniform(1.1, 1.3)
        left = rng.random() < 0.5
        angle = np.deg2rad(turn_deg) * (1.0 if left else -1.0)
        start = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)])
        headings = np.concatenate([
            np.zeros(straight_steps + 2),
            np.full(future_steps, angle),
        ])
        steps = speed * dt * np.stack([np.cos(headings), np.sin(headings)], axis=1)
        positions = start + np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
        positions += rng.normal(0.0, noise, size=positions.shape)
        agents.append(AgentNode.from_positions(
            f"walker{k}", "Pedestrian", k * block, positions, dt))
    return Scene(agents=agents, dt=dt)


def fork_decision_timestep(agent: AgentNode, straight_steps: int = 8) -> int:
    return agent.first_timestep + straight_steps


def fork_turn_labels(scene: Scene) -> list[bool]:
    """True for agents that fork left (final y above start y)."""
    return [bool(a.states[-1, 1] > a.states[0, 1]) for a in scene.agents]


def corridor_with_walls(seed: int, n_agents: int = 80, dt: float = 0.4,
                        half_width: float = 2.5,
                        margin_range: tuple[float, float] = (0.55, 1.25),
                        track_steps: int = 24, resolution: float = 0.25,
                        lateral_speed_range: tuple[float, float] = (0.3, 0.6),
                        noise: float = 0.01) -> Scene:
    """Bounce-walkers in a corridor along +x with an occupancy raster.

    Walkers keep a constant forward speed and a constant lateral speed whose
    sign flips near a wall; the turn-away distance and lateral speed vary
    per agent, so a history window alone cannot tell how far the wall is.
    Close to a wall the ground truth turns away while naive extrapolation
    runs into it, which is what the local map lets a forecaster avoid.
    """
    rng = np.random.default_rng(seed)
    agents = []
    block = track_steps + 2
    max_x = 0.0
    for k in range(n_agents):
        speed = rng.uniform(1.0, 1.3)
        margin = rng.uniform(*margin_range)
        vy = rng.uniform(*lateral_speed_range) * (1.0 if rng.random() < 0.5 else -1.0)
        x = rng.uniform(0.0, 2.0)
        y = rng.uniform(-half_width + 0.3, half_width - 0.3)
        pos = [(x, y)]
        for _ in range(track_steps):
            if (y >= half_width - margin and vy > 0) or (y <= -half_width + margin and vy < 0):
                vy = -vy
            x += speed * dt
            y += vy * dt
            pos.append((x, y))
        positions = np.array(pos) + rng.normal(0.0, noise, size=(len(pos), 2))
        positions[:, 1] = np.clip(positions[:, 1], -half_width + 0.05, half_width - 0.05)
        max_x = max(max_x, positions[:, 0].max())
        agents.append(AgentNode.from_positions(
            f"walker{k}", "Pedestrian", k * block, positions, dt))
    raster = corridor_occupancy(
        x_range=(-4.0, max_x + 6.0),
        y_range=(-half_width - 3.0, half_width + 3.0),
        half_width=half_width,
        resolution=resolution,
    )
    return Scene(agents=agents, dt=dt, map=raster)


def car_following(seed: int, n_steps: int = 300, dt: float = 0.5,
                  slow_speed: float = 2.0, fast_speed: float = 8.0,
                  accel_limit: float = 2.0, gap_target: float = 8.0,
                  headway: float = 0.6, noise: float = 0.02) -> Scene:
    """Ego lead car with alternating slow/fast phases and a gap-keeping follower."""
    rng = np.random.default_rng(seed)
    lead_v = np.empty(n_steps)
    v = slow_speed
    target = fast_speed
    phase_left = int(rng.integers(12, 20))
    for i in range(n_steps):
        if phase_left == 0:
            target = slow_speed if target == fast_speed else fast_speed
            phase_left = int(rng.integers(12, 20))
        dv = np.clip(target - v, -accel_limit * dt, accel_limit * dt)
        v += dv
        lead_v[i] = v
        phase_left -= 1
    lead_x = np.concatenate([[0.0], np.cumsum(lead_v * dt)])

    fol_x = np.empty(n_steps + 1)
    fol_v = lead_v[0]
    fol_x[0] = lead_x[0] - gap_target - headway * fol_v
    for i in range(n_steps):
        gap = lead_x[i] - fol_x[i]
        want = gap_target + headway * fol_v
        accel = 0.9 * (lead_v[i] - fol_v) + 0.35 * (gap - want)
        accel = np.clip(accel, -accel_limit, accel_limit)
        fol_v = max(fol_v + accel * dt, 0.0)
        fol_x[i + 1] = fol_x[i] + fol_v * dt

    lead_pos = np.stack([lead_x, np.zeros_like(lead_x)], axis=1)
    fol_pos = np.stack([fol_x, np.zeros_like(fol_x)], axis=1)
    fol_pos += rng.normal(0.0, noise, size=fol_pos.shape)
    agents = [
        AgentNode.from_positions("lead", "Car", 0, lead_pos, dt),
        AgentNode.from_positions("follower", "Car", 0, fol_pos, dt),
    ]
    return Scene(agents=agents, dt=dt, ego_id="lead")


def make_ego_plan(current_state: np.ndarray, target_speed: float, horizon: int,
                  dt: float, accel_limit: float = 2.0) -> np.ndarray:
    """Constant-heading ego plan ramping toward a target speed.

    Returns [T, 6] states over (t, t+T], matching the planned-future layout
    instances carry. Used to pose what-if queries against a trained model.
    """
    pos = np.array(current_state[0:2], dtype=np.float64)
    vel = np.array(current_state[2:4], dtype=np.float64)
    speed = float(np.hypot(*vel))
    heading = vel / speed if speed > 1e-6 else np.array([1.0, 0.0])
    out = np.zeros((horizon, 6))
    for i in range(horizon):
        dv = np.clip(target_speed - speed, -accel_limit * dt, accel_limit * dt)
        accel = dv / dt
        speed += dv
        pos = pos + heading * speed * dt
        out[i, 0:2] = pos
        out[i, 2:4] = heading * speed
        out[i, 4:6] = heading * accel
    return out


def crossing(seed: int, n_agents: int = 40, dt: float = 0.4,
             arm: float = 8.0, stagger: int = 3, noise: float = 0.02) -> Scene:
    """Two pedestrian streams crossing at a right angle near the origin."""
    rng = np.random.default_rng(seed)
    steps = int(round(2 * arm / (1.2 * dt)))
    agents = []
    for k in range(n_agents):
        along_x = k % 2 == 0
        speed = rng.uniform(1.0, 1.4)
        offset = rng.uniform(-0.6, 0.6)
        span = speed * dt * np.arange(steps + 1) - arm
        if along_x:
            positions = np.stack([span, np.full_like(span, offset)], axis=1)
        else:
            positions = np.stack([np.full_like(span, offset), span], axis=1)
        positions = positions + rng.normal(0.0, noise, size=positions.shape)
        agents.append(AgentNode.from_positions(
            f"ped{k}", "Pedestrian", k * stagger, positions, dt))
    return Scene(agents=agents, dt=dt)
