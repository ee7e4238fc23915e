"""Trajectory chunking, affine primitive controllers, and distance functions.

Indexing follows the 1-based convention t_h = (h-1) * tau_chunk + 1 for
h = 1..H with H = T / tau_chunk. For each h:

* the observation chunk ends at t_h (tau_obs states, tau_obs - 1 inputs,
  zero-padded in front when h = 1),
* the composite action covers steps t_h .. t_{h+1} - 1, and
* the trajectory chunk returned alongside it is the segment the action
  generates, i.e. states t_h .. t_{h+1} with the matching inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import DynamicsModel, Trajectory, step
from .linalg import opnorm
from .riccati import GainSequence


@dataclass(frozen=True)
class ExtReal:
    """Nonnegative extended real; ``finite is None`` encodes +infinity."""

    finite: float | None

    @property
    def is_infinite(self) -> bool:
        return self.finite is None

    def __le__(self, other: float) -> bool:
        return (not self.is_infinite) and self.finite <= other

    def __float__(self) -> float:
        if self.is_infinite:
            raise OverflowError("infinite extended real")
        return self.finite


INFINITE = ExtReal(finite=None)


@dataclass(frozen=True)
class PrimitiveController:
    """Affine feedback law x -> u_bar + K_bar (x - x_bar)."""

    u_bar: np.ndarray
    x_bar: np.ndarray
    K_bar: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.u_bar + self.K_bar @ (np.asarray(x, dtype=float) - self.x_bar)


def apply_controller(kappa: PrimitiveController, x: np.ndarray) -> np.ndarray:
    return kappa(x)


@dataclass(frozen=True)
class CompositeAction:
    """A fixed-length run of primitive controllers, executed in order."""

    controllers: tuple

    def __len__(self) -> int:
        return len(self.controllers)

    def __getitem__(self, i: int) -> PrimitiveController:
        return self.controllers[i]


@dataclass(frozen=True)
class ChunkConfig:
    tau_chunk: int
    tau_obs: int
    T: int

    def __post_init__(self):
        if self.tau_chunk < 1 or self.tau_obs < 1:
            raise ValueError("chunk and observation lengths must be positive")
        if self.tau_obs > self.tau_chunk:
            raise ValueError("tau_obs must not exceed tau_chunk")
        if self.T % self.tau_chunk != 0:
            raise ValueError(f"horizon T={self.T} not divisible by tau_chunk={self.tau_chunk}")

    @property
    def H(self) -> int:
        return self.T // self.tau_chunk

    def t_start(self, h: int) -> int:
        """0-based index of the state the h-th composite action starts from."""
        return (h - 1) * self.tau_chunk


@dataclass(frozen=True)
class ObservationChunk:
    """Trailing window of tau_obs states and tau_obs - 1 inputs."""

    states: np.ndarray
    inputs: np.ndarray

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.states.ravel(), self.inputs.ravel()])

    @staticmethod
    def dim(tau_obs: int, dx: int, du: int) -> int:
        return tau_obs * dx + (tau_obs - 1) * du

    @staticmethod
    def from_flat(vec: np.ndarray, tau_obs: int, dx: int, du: int) -> "ObservationChunk":
        vec = np.asarray(vec, dtype=float)
        ns = tau_obs * dx
        return ObservationChunk(
            states=vec[:ns].reshape(tau_obs, dx),
            inputs=vec[ns:].reshape(tau_obs - 1, du),
        )


@dataclass(frozen=True)
class TrajectoryChunk:
    """Contiguous slice (states, inputs) of a rollout."""

    states: np.ndarray
    inputs: np.ndarray


def observation_at(states: np.ndarray, inputs: np.ndarray, end: int, tau_obs: int) -> ObservationChunk:
    """Observation window ending at 0-based state index ``end``.

    Missing history (only possible when end == 0, i.e. h = 1) is padded
    with zeros placed before the available entries.
    """
    dx = states.shape[1]
    du = inputs.shape[1] if inputs.ndim == 2 and inputs.shape[1] else 0
    obs_states = np.zeros((tau_obs, dx))
    obs_inputs = np.zeros((max(tau_obs - 1, 0), du))
    for i in range(tau_obs):
        t = end - (tau_obs - 1) + i
        if t >= 0:
            obs_states[i] = states[t]
    for i in range(tau_obs - 1):
        t = end - (tau_obs - 1) + i
        if 0 <= t < len(inputs):
            obs_inputs[i] = inputs[t]
    return ObservationChunk(states=obs_states, inputs=obs_inputs)


def controllers_from_gains(traj: Trajectory, gains: GainSequence) -> list:
    """Consistent controllers (u_t, x_t, K_t) along a trajectory."""
    if len(gains) != traj.horizon:
        raise ValueError("gain sequence length does not match trajectory")
    return [
        PrimitiveController(
            u_bar=traj.inputs[t].copy(), x_bar=traj.states[t].copy(), K_bar=np.asarray(gains[t], dtype=float)
        )
        for t in range(traj.horizon)
    ]


def segment(traj: Trajectory, gains: GainSequence, cfg: ChunkConfig):
    """Cut one trajectory into H (observation, chunk, composite action) tuples."""
    if traj.horizon != cfg.T:
        raise ValueError(f"trajectory horizon {traj.horizon} != configured T {cfg.T}")
    kappas = controllers_from_gains(traj, gains)
    out = []
    for h in range(1, cfg.H + 1):
        start = cfg.t_start(h)
        obs = observation_at(traj.states, traj.inputs, start, cfg.tau_obs)
        action = CompositeAction(controllers=tuple(kappas[start : start + cfg.tau_chunk]))
        chunk = TrajectoryChunk(
            states=traj.states[start : start + cfg.tau_chunk + 1].copy(),
            inputs=traj.inputs[start : start + cfg.tau_chunk].copy(),
        )
        out.append((obs, chunk, action))
    return out


def reassemble(chunks) -> Trajectory:
    """Invert :func:`segment`: concatenate executed chunks into one trajectory."""
    states = [chunks[0].states]
    inputs = [chunks[0].inputs]
    for chunk in chunks[1:]:
        states.append(chunk.states[1:])
        inputs.append(chunk.inputs)
    return Trajectory(states=np.vstack(states), inputs=np.vstack(inputs))


def rollout_chunking_policy(
    policy: Callable[[ObservationChunk, int, np.random.Generator], CompositeAction],
    model: DynamicsModel,
    x1: np.ndarray,
    cfg: ChunkConfig,
    rng: np.random.Generator,
):
    """Roll a chunking policy: sample a_h from the observation ending at t_h,
    then execute its controllers for tau_chunk steps."""
    dx, du = model.state_dim, model.input_dim
    states = np.zeros((cfg.T + 1, dx))
    inputs = np.zeros((cfg.T, du))
    states[0] = np.asarray(x1, dtype=float)
    actions = []
    for h in range(1, cfg.H + 1):
        start = cfg.t_start(h)
        obs = observation_at(states[: start + 1], inputs[:start], start, cfg.tau_obs)
        action = policy(obs, h, rng)
        actions.append(action)
        for i in range(cfg.tau_chunk):
            t = start + i
            inputs[t] = action[i](states[t])
            states[t + 1] = step(model, states[t], inputs[t])
    return Trajectory(states=states, inputs=inputs), actions


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


def _pair_distance(states_a, inputs_a, states_b, inputs_b) -> float:
    ds = max((float(np.linalg.norm(a - b)) for a, b in zip(states_a, states_b)), default=0.0)
    du = max((float(np.linalg.norm(a - b)) for a, b in zip(inputs_a, inputs_b)), default=0.0)
    return max(ds, du)


def d_traj(rho: Trajectory, rho_prime: Trajectory) -> float:
    """max over per-step state/input Euclidean distances."""
    if rho.states.shape != rho_prime.states.shape or rho.inputs.shape != rho_prime.inputs.shape:
        raise ValueError("trajectories must have matching shapes")
    return _pair_distance(rho.states, rho.inputs, rho_prime.states, rho_prime.inputs)


def d_max(a: CompositeAction, a_prime: CompositeAction) -> float:
    """max_k ( |u_k - u'_k| + |x_k - x'_k| + ||K_k - K'_k||_op )."""
    if len(a) != len(a_prime):
        raise ValueError("composite actions must have equal length")
    best = 0.0
    for k1, k2 in zip(a.controllers, a_prime.controllers):
        val = (
            float(np.linalg.norm(k1.u_bar - k2.u_bar))
            + float(np.linalg.norm(k1.x_bar - k2.x_bar))
            + opnorm(k1.K_bar - k2.K_bar)
        )
        best = max(best, val)
    return best


def d_action(a: CompositeAction, a_prime: CompositeAction, c1: float, c2: float) -> ExtReal:
    """c1 * d_max, or infinite once the controllers are farther than c2 apart.

    The boundary d_max == c2 is inclusive (finite).
    """
    base = d_max(a, a_prime)
    if base > c2:
        return INFINITE
    return ExtReal(finite=c1 * base)


def d_S(chunk: TrajectoryChunk, chunk_prime: TrajectoryChunk) -> float:
    """Distance over the full sub-trajectory."""
    return _pair_distance(chunk.states, chunk.inputs, chunk_prime.states, chunk_prime.inputs)


def d_tvc(chunk: TrajectoryChunk, chunk_prime: TrajectoryChunk, tau_obs: int) -> float:
    """Distance over the last tau_obs states and tau_obs - 1 inputs."""
    return _pair_distance(
        chunk.states[-tau_obs:],
        chunk.inputs[-(tau_obs - 1):] if tau_obs > 1 else chunk.inputs[:0],
        chunk_prime.states[-tau_obs:],
        chunk_prime.inputs[-(tau_obs - 1):] if tau_obs > 1 else chunk_prime.inputs[:0],
    )


def d_ips(chunk: TrajectoryChunk, chunk_prime: TrajectoryChunk) -> float:
    """Distance between final states only."""
    return float(np.linalg.norm(chunk.states[-1] - chunk_prime.states[-1]))
