"""Gain synthesis along trajectories: time-varying Riccati recursions, the
infinite-horizon DARE, stabilizability values, and exponential-stability
certificates for the closed-loop linearization.

Conventions. Gains are stored "as applied": a controller is
``u = u_bar + K (x - x_bar)`` and the closed-loop drift Jacobian is
``A_cl = A + B K``. The time-varying recursion on a length-K trajectory is

    P_{K+1} = I
    K_k  = -(I + eta B_k^T P_{k+1} B_k)^{-1} (B_k^T P_{k+1}) (I + eta A_k)
    P_k  = (I + eta A_cl,k)^T P_{k+1} (I + eta A_cl,k) + eta (I + K_k^T K_k)

which is finite-horizon LQR with stage cost eta(|x|^2 + |u|^2) and unit
terminal cost on the Euler-discretized linearization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DynamicsModel, Trajectory, jacobian
from .linalg import opnorm, symmetrize


class ConvergenceError(RuntimeError):
    """DARE fixed-point iteration failed to reach the residual tolerance."""

    def __init__(self, residual: float, iterations: int):
        super().__init__(f"DARE residual {residual:.3e} after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


@dataclass
class GainSequence:
    """Feedback gains K_{1:K}, one input_dim x state_dim matrix per step."""

    gains: list

    def __len__(self) -> int:
        return len(self.gains)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.gains[k]

    def max_norm(self) -> float:
        return max((opnorm(K) for K in self.gains), default=0.0)


@dataclass
class RiccatiCertificate:
    """Exponential-decay certificate for closed-loop transition products.

    ``max_violation`` is the largest excess of ||Phi_cl(k, j)|| over
    B_stab (1 - eta/L_stab)^(k-j), or of max_k ||K_k|| over R_K; the
    certificate is valid iff it is <= 0.
    """

    B_stab: float
    L_stab: float
    R_K: float
    max_violation: float
    phi_violation: float
    gain_excess: float

    @property
    def valid(self) -> bool:
        return self.max_violation <= 0.0


def trajectory_linearizations(traj: Trajectory, model: DynamicsModel):
    """Drift Jacobians (A_k, B_k) along the trajectory, k = 1..K."""
    As, Bs = [], []
    for t in range(traj.horizon):
        lin = jacobian(model, traj.states[t], traj.inputs[t])
        As.append(lin.A)
        Bs.append(lin.B)
    return As, Bs


def synthesize_tv_gains(traj: Trajectory, model: DynamicsModel):
    """Backward Riccati pass along a trajectory.

    Returns (GainSequence, [P_1, ..., P_{K+1}]). Gains are computed from
    P_{k+1} first, then P_k from the closed loop they induce.
    """
    As, Bs = trajectory_linearizations(traj, model)
    return tv_gains_from_linearizations(As, Bs, model.eta)


def tv_gains_from_linearizations(As, Bs, eta: float):
    """Riccati pass on explicit Jacobian sequences (A_k, B_k)."""
    K_steps = len(As)
    dx = As[0].shape[0] if K_steps else 0
    P = np.eye(dx) if K_steps else np.eye(1)
    if K_steps == 0:
        return GainSequence(gains=[]), [P]
    Ps = [P]
    gains: list = [None] * K_steps
    for k in range(K_steps - 1, -1, -1):
        A, B = As[k], Bs[k]
        M = np.eye(B.shape[1]) + eta * B.T @ P @ B  # SPD whenever P >= 0
        K = -np.linalg.solve(M, B.T @ P @ (np.eye(dx) + eta * A))
        X = np.eye(dx) + eta * (A + B @ K)
        P = symmetrize(X.T @ P @ X + eta * (np.eye(dx) + K.T @ K))
        gains[k] = K
        Ps.append(P)
    Ps.reverse()
    return GainSequence(gains=gains), Ps


def stabilizability_value(traj: Trajectory, model: DynamicsModel, k: int) -> float:
    """Worst-case optimal LQ cost-to-go from a unit state at step k.

    Computed by the completed-square dynamic-programming recursion on the
    discretized linearization (a separate code path from the closed-loop
    form used in :func:`synthesize_tv_gains`): with Abar = I + eta A,
    Bbar = eta B, Qbar = Rbar = eta I and unit terminal cost,

        M_{K+1} = I
        M_k = Qbar + Abar^T M Abar
              - Abar^T M Bbar (Rbar + Bbar^T M Bbar)^{-1} Bbar^T M Abar

    and the value is max over unit directions of xi^T M_k xi = ||M_k||.
    """
    K_steps = traj.horizon
    if not 1 <= k <= K_steps + 1:
        raise ValueError(f"chunk index {k} outside 1..{K_steps + 1}")
    As, Bs = trajectory_linearizations(traj, model)
    dx = model.state_dim
    eta = model.eta
    M = np.eye(dx)
    for j in range(K_steps - 1, k - 2, -1):
        Abar = np.eye(dx) + eta * As[j]
        Bbar = eta * Bs[j]
        G = eta * np.eye(Bbar.shape[1]) + Bbar.T @ M @ Bbar
        cross = Abar.T @ M @ Bbar
        M = symmetrize(
            eta * np.eye(dx) + Abar.T @ M @ Abar - cross @ np.linalg.solve(G, cross.T)
        )
    return opnorm(M)


def dare_map(P: np.ndarray, A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
    """One application of the discrete algebraic Riccati operator."""
    G = R + B.T @ P @ B
    cross = A.T @ P @ B
    return symmetrize(A.T @ P @ A - cross @ np.linalg.solve(G, cross.T) + Q)


def solve_dare(A, B, Q, R, tol: float = 1e-9, max_iter: int = 10_000, P0=None) -> np.ndarray:
    """Fixed-point iteration of the DARE starting from P = Q (or a warm
    start ``P0``, e.g. the solution at a neighboring linearization).

    Raises ConvergenceError with the final residual if the max-abs residual
    ||P - dare_map(P)|| does not fall below ``tol`` within ``max_iter``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy() if P0 is None else np.atleast_2d(np.asarray(P0, dtype=float)).copy()
    for _ in range(max_iter):
        P_next = dare_map(P, A, B, Q, R)
        if np.max(np.abs(P_next - P)) < tol:
            return P_next
        P = P_next
    residual = float(np.max(np.abs(dare_map(P, A, B, Q, R) - P)))
    if residual < tol:
        return P
    raise ConvergenceError(residual, max_iter)


def gain_from_dare(P, A, B, R) -> np.ndarray:
    """Infinite-horizon gain K = -(R + B^T P B)^{-1} B^T P A."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def lqr_gain_finite_horizon(A, B, Q, R, horizon: int) -> np.ndarray:
    """Gain of a horizon-limited time-invariant LQR (DARE map iterated)."""
    P = np.atleast_2d(np.asarray(Q, dtype=float)).copy()
    for _ in range(horizon):
        P = dare_map(P, A, B, Q, R)
    return gain_from_dare(P, A, B, R)


def closed_loop_factors(traj: Trajectory, model: DynamicsModel, gains: GainSequence):
    """Per-step transition factors I + eta (A_k + B_k K_k)."""
    As, Bs = trajectory_linearizations(traj, model)
    dx = model.state_dim
    return [np.eye(dx) + model.eta * (As[k] + Bs[k] @ gains[k]) for k in range(traj.horizon)]


def check_jacobian_stability(
    traj: Trajectory,
    model: DynamicsModel,
    gains: GainSequence,
    R_K: float,
    B_stab: float,
    L_stab: float,
) -> RiccatiCertificate:
    """Check ||Phi_cl(k, j)|| <= B_stab (1 - eta/L_stab)^(k-j) for all j <= k,
    together with the gain bound max_k ||K_k|| <= R_K.

    Violations are reported in the certificate, never raised.
    """
    if len(gains) != traj.horizon:
        raise ValueError("gain sequence length does not match trajectory")
    factors = closed_loop_factors(traj, model, gains)
    decay = 1.0 - model.eta / L_stab
    K_steps = len(factors)
    dx = model.state_dim
    phi_violation = -np.inf
    # products Phi(k, j) accumulate forward in k for each starting index j
    for j in range(1, K_steps + 2):
        Phi = np.eye(dx)
        phi_violation = max(phi_violation, opnorm(Phi) - B_stab)
        for k in range(j, K_steps + 1):
            Phi = factors[k - 1] @ Phi
            bound = B_stab * decay ** (k + 1 - j)
            phi_violation = max(phi_violation, opnorm(Phi) - bound)
    gain_excess = gains.max_norm() - R_K
    return RiccatiCertificate(
        B_stab=B_stab,
        L_stab=L_stab,
        R_K=R_K,
        max_violation=max(phi_violation, gain_excess),
        phi_violation=phi_violation,
        gain_excess=gain_excess,
    )


def stabilizability_bound(traj: Trajectory, model: DynamicsModel) -> float:
    """max_k V_k along the trajectory, via one backward value recursion."""
    _, Ps = synthesize_tv_gains(traj, model)
    return max(opnorm(P) for P in Ps)
