"""Small deterministic continuous-control tasks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    max_episode_steps: int
    dt: float


def wrap_angle(x: float) -> float:
    return ((x + math.pi) % (2.0 * math.pi)) - math.pi


class Pendulum:
    """Torque-limited swing-up; theta = 0 is upright."""

    g = 10.0
    m = 1.0
    l = 1.0
    dt = 0.05
    max_speed = 8.0
    max_torque = 2.0

    spec = EnvSpec(3, 1, (-2.0,), (2.0,), 200, 0.05)

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.state = np.zeros(2)
        self.t = 0

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = np.array([self.rng.uniform(-math.pi, math.pi), self.rng.uniform(-1.0, 1.0)])
        self.t = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        th, thdot = self.state
        return np.array([math.cos(th), math.sin(th), thdot])

    def step(self, action):
        th, thdot = float(self.state[0]), float(self.state[1])
        u = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0],
                          -self.max_torque, self.max_torque))
        cost = wrap_angle(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2
        thddot = 3.0 * self.g / (2.0 * self.l) * math.sin(th) + 3.0 / (self.m * self.l ** 2) * u
        thdot = min(max(thdot + thddot * self.dt, -self.max_speed), self.max_speed)
        th = wrap_angle(th + thdot * self.dt)
        self.state = np.array([th, thdot])
        self.t += 1
        return self.observe(), -cost, False, self.t >= self.spec.max_episode_steps

    def get_state(self) -> dict:
        return {"state": self.state.tolist(), "t": self.t, "rng": self.rng.bit_generator.state}

    def set_state(self, d: dict) -> None:
        self.state = np.array(d["state"], dtype=np.float64)
        self.t = int(d["t"])
        self.rng.bit_generator.state = d["rng"]


class PointMass:
    """2-D double integrator driven toward a random goal."""

    dt = 0.05
    max_speed = 2.0
    arena = 1.0
    goal_radius = 0.05

    spec = EnvSpec(6, 2, (-1.0, -1.0), (1.0, 1.0), 200, 0.05)

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.state = np.zeros(6)
        self.t = 0

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        pos = self.rng.uniform(-self.arena, self.arena, 2)
        goal = self.rng.uniform(-self.arena, self.arena, 2)
        self.state = np.concatenate([pos, np.zeros(2), goal])
        self.t = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        return self.state.copy()

    def distance(self) -> float:
        return float(np.linalg.norm(self.state[:2] - self.state[4:6]))

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[:2], -1.0, 1.0)
        pos, vel, goal = self.state[:2], self.state[2:4], self.state[4:6]
        vel = np.clip(vel + a * self.dt, -self.max_speed, self.max_speed)
        pos = np.clip(pos + vel * self.dt, -self.arena, self.arena)
        self.state = np.concatenate([pos, vel, goal])
        self.t += 1
        d = self.distance()
        terminal = d < self.goal_radius
        return self.observe(), -d * d, terminal, (not terminal) and self.t >= self.spec.max_episode_steps

    def get_state(self) -> dict:
        return {"state": self.state.tolist(), "t": self.t, "rng": self.rng.bit_generator.state}

    def set_state(self, d: dict) -> None:
        self.state = np.array(d["state"], dtype=np.float64)
        self.t = int(d["t"])
        self.rng.bit_generator.state = d["rng"]


TASKS = {"pendulum": Pendulum, "pointmass": PointMass}


def make_env(task: str, seed: int = 0):
    try:
        return TASKS[task](seed)
    except KeyError:
        raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}") from None
