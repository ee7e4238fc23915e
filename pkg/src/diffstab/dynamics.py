"""Discrete-time nonlinear dynamics: forward-Euler models, Jacobians, rollouts.

A model holds a continuous-time drift ``f(x, u)`` and a step size ``eta``;
the discrete transition is ``x' = x + eta * f(x, u)``. The planar quadcopter
testbed (mass, gravity, inertia) lives here together with a small registry of
named models for the CLI.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

FD_STEP = 1e-5  # central finite-difference step for Jacobian fallback


@dataclass(frozen=True)
class Linearization:
    """Drift Jacobians A = df/dx (n x n) and B = df/du (n x m)."""

    A: np.ndarray
    B: np.ndarray


@dataclass(frozen=True)
class DynamicsModel:
    """Deterministic control system ``x' = x + eta * drift(x, u)``."""

    name: str
    state_dim: int
    input_dim: int
    eta: float
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    drift_jacobian: Optional[Callable[[np.ndarray, np.ndarray], Linearization]] = None

    def __post_init__(self):
        if self.state_dim <= 0 or self.input_dim <= 0:
            raise ValueError("state_dim and input_dim must be positive")
        if self.eta < 0:
            raise ValueError("step size eta must be nonnegative")


@dataclass(frozen=True)
class QuadcopterParams:
    """Planar quadcopter constants: mass, gravity, inertia, step size."""

    m: float = 0.8
    g: float = 9.8
    I_xx: float = 0.5
    eta: float = 0.01

    def __post_init__(self):
        if min(self.m, self.g, self.I_xx, self.eta) <= 0:
            raise ValueError("quadcopter parameters must be positive")

    @property
    def hover_input(self) -> np.ndarray:
        """Input (m*g, 0) holding the origin state fixed."""
        return np.array([self.m * self.g, 0.0])


@dataclass
class Trajectory:
    """States x_{1:T+1} (rows) and inputs u_{1:T} (rows) of one rollout."""

    states: np.ndarray
    inputs: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.inputs.size == 0:
            self.inputs = self.inputs.reshape(0, 0)
        self.inputs = np.atleast_2d(self.inputs)
        if len(self.states) != len(self.inputs) + 1:
            raise ValueError("need exactly one more state than inputs")

    @property
    def horizon(self) -> int:
        return len(self.inputs)

    def feasibility_gap(self, model: DynamicsModel) -> float:
        """max_t ||states[t+1] - step(states[t], inputs[t])||."""
        gap = 0.0
        for t in range(self.horizon):
            pred = step(model, self.states[t], self.inputs[t])
            gap = max(gap, float(np.linalg.norm(self.states[t + 1] - pred)))
        return gap

    def to_json(self, model_name: str, eta: float) -> str:
        return json.dumps(
            {
                "states": self.states.tolist(),
                "inputs": self.inputs.tolist(),
                "eta": eta,
                "model": model_name,
            }
        )

    @staticmethod
    def from_json(text: str) -> tuple["Trajectory", dict]:
        obj = json.loads(text)
        traj = Trajectory(np.array(obj["states"]), np.array(obj["inputs"]))
        meta = {"eta": obj.get("eta"), "model": obj.get("model")}
        return traj, meta


def step(model: DynamicsModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One forward-Euler step ``x + eta * drift(x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (model.state_dim,):
        raise ValueError(f"state has shape {x.shape}, expected ({model.state_dim},)")
    if u.shape != (model.input_dim,):
        raise ValueError(f"input has shape {u.shape}, expected ({model.input_dim},)")
    return x + model.eta * np.asarray(model.drift(x, u), dtype=float)


def jacobian(model: DynamicsModel, x: np.ndarray, u: np.ndarray) -> Linearization:
    """Drift Jacobians at (x, u): analytic if the model supplies them."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if model.drift_jacobian is not None:
        return model.drift_jacobian(x, u)
    return finite_difference_jacobian(model, x, u)


def finite_difference_jacobian(
    model: DynamicsModel, x: np.ndarray, u: np.ndarray, h: float = FD_STEP
) -> Linearization:
    """Central-difference Jacobians of the drift."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    A = np.zeros((model.state_dim, model.state_dim))
    B = np.zeros((model.state_dim, model.input_dim))
    for i in range(model.state_dim):
        e = np.zeros(model.state_dim)
        e[i] = h
        A[:, i] = (model.drift(x + e, u) - model.drift(x - e, u)) / (2 * h)
    for i in range(model.input_dim):
        e = np.zeros(model.input_dim)
        e[i] = h
        B[:, i] = (np.asarray(model.drift(x, u + e)) - np.asarray(model.drift(x, u - e))) / (2 * h)
    return Linearization(A=A, B=B)


def quadcopter_drift(p: QuadcopterParams, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Drift of the planar quadcopter with state (x, z, phi, xd, zd, phid)."""
    phi = x[2]
    return np.array(
        [
            x[3],
            x[4],
            x[5],
            -u[0] * np.sin(phi) / p.m,
            u[0] * np.cos(phi) / p.m - p.g,
            u[1] / p.I_xx,
        ]
    )


def quadcopter_jacobian(p: QuadcopterParams, x: np.ndarray, u: np.ndarray) -> Linearization:
    """Analytic drift Jacobians of the planar quadcopter."""
    phi = x[2]
    A = np.zeros((6, 6))
    A[0, 3] = 1.0
    A[1, 4] = 1.0
    A[2, 5] = 1.0
    A[3, 2] = -u[0] * np.cos(phi) / p.m
    A[4, 2] = -u[0] * np.sin(phi) / p.m
    B = np.zeros((6, 2))
    B[3, 0] = -np.sin(phi) / p.m
    B[4, 0] = np.cos(phi) / p.m
    B[5, 1] = 1.0 / p.I_xx
    return Linearization(A=A, B=B)


def make_quadcopter(params: QuadcopterParams | None = None) -> DynamicsModel:
    p = params or QuadcopterParams()
    return DynamicsModel(
        name="quadcopter2d",
        state_dim=6,
        input_dim=2,
        eta=p.eta,
        drift=lambda x, u: quadcopter_drift(p, x, u),
        drift_jacobian=lambda x, u: quadcopter_jacobian(p, x, u),
    )


def make_linear(A0: np.ndarray, B0: np.ndarray, eta: float, name: str = "linear") -> DynamicsModel:
    """Model with drift ``A0 x + B0 u`` (Jacobian is constant)."""
    A0 = np.atleast_2d(np.asarray(A0, dtype=float))
    B0 = np.atleast_2d(np.asarray(B0, dtype=float))
    lin = Linearization(A=A0, B=B0)
    return DynamicsModel(
        name=name,
        state_dim=A0.shape[0],
        input_dim=B0.shape[1],
        eta=eta,
        drift=lambda x, u: A0 @ x + B0 @ u,
        drift_jacobian=lambda x, u: lin,
    )


def make_scalar_toy(rate: float = -1.0, eta: float = 0.1) -> DynamicsModel:
    """Scalar contraction ``x' = x + eta * (rate * x + u)``."""
    return make_linear(np.array([[rate]]), np.array([[1.0]]), eta, name="scalar-toy")


MODEL_REGISTRY: dict[str, Callable[[], DynamicsModel]] = {
    "quadcopter2d": make_quadcopter,
    "linear": lambda: make_linear(np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]]), eta=0.05),
    "scalar-toy": make_scalar_toy,
}


def get_model(name: str) -> DynamicsModel:
    if name not in MODEL_REGISTRY:
        raise KeyError(f"unknown model {name!r}; known: {sorted(MODEL_REGISTRY)}")
    return MODEL_REGISTRY[name]()


def rollout_open_loop(model: DynamicsModel, x1: np.ndarray, u_seq) -> Trajectory:
    """Roll the model forward under a fixed input sequence."""
    x1 = np.asarray(x1, dtype=float)
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.size == 0:
        u_seq = np.zeros((0, model.input_dim))
    u_seq = np.atleast_2d(u_seq)
    states = np.zeros((len(u_seq) + 1, model.state_dim))
    states[0] = x1
    for t in range(len(u_seq)):
        states[t + 1] = step(model, states[t], u_seq[t])
    return Trajectory(states=states, inputs=u_seq)
