"""Incremental-stability verification and the supporting scalar/matrix
recursion checkers.

The closed loop under an affine controller kappa is
``x_{i+1} = f(x_i, kappa(x_i) + du_i)``. A run of controllers is
incrementally input-to-state stable with moduli (gamma, beta) when two
rollouts started at xi and xi' with input perturbations du satisfy

    ||x_i(0, xi) - x_i(du, xi')|| <= beta(||xi - xi'||, i) + gamma(max_s ||du_s||)

with beta(u, k) = cbeta * exp(-(k-1) * L_beta) * u and gamma(u) = cgamma * u.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chunking import PrimitiveController
from .dynamics import DynamicsModel, Trajectory, jacobian
from .linalg import opnorm
from .riccati import GainSequence

HYPOTHESIS_SLACK = 1e-12  # additive slack when certifying exact inequalities


class HypothesisViolation(ValueError):
    """The supplied sequence does not satisfy a lemma's hypothesis."""


@dataclass(frozen=True)
class IssModuli:
    cbeta: float
    cgamma: float
    L_beta: float
    c_gamma_radius: float
    c_xi_radius: float

    def __post_init__(self):
        if min(self.cbeta, self.cgamma, self.L_beta, self.c_gamma_radius, self.c_xi_radius) <= 0:
            raise ValueError("all moduli must be positive")
        if self.L_beta > 1.0:
            raise ValueError("decay exponent L_beta must lie in (0, 1]")

    def beta(self, u: float, k: int) -> float:
        return self.cbeta * math.exp(-(k - 1) * self.L_beta) * u

    def gamma(self, u: float) -> float:
        return self.cgamma * u


@dataclass(frozen=True)
class RegularityParams:
    R_dyn: float
    L_dyn: float
    M_dyn: float
    R_K: float
    B_stab: float
    L_stab: float
    eta: float

    def __post_init__(self):
        if min(self.R_K, self.B_stab, self.L_stab) < 1.0:
            raise ValueError("R_K, B_stab, L_stab must be >= 1")
        if self.eta > self.L_stab / 2:
            raise ValueError("step size must satisfy eta <= L_stab / 2")


def iss_constants(p: RegularityParams) -> IssModuli:
    """Incremental-stability moduli of affine gains on a regular,
    Jacobian-stable trajectory (exact formula evaluation)."""
    c_xi1 = (1.0 / (4 * p.R_K * p.B_stab)) * min(
        1.0, 1.0 / (4 * p.L_stab * p.M_dyn * p.R_K * p.B_stab)
    )
    c_xi2 = min(1.0 / (96 * p.B_stab * p.M_dyn * p.R_K**2), p.R_dyn / (32 * p.R_K))
    c_gamma = min(1.0 / (48 * p.B_stab * p.M_dyn * p.R_K**2), p.R_dyn / (16 * p.L_stab * p.R_K))
    return IssModuli(
        cbeta=16 * p.B_stab,
        cgamma=8 * p.L_stab * p.B_stab * p.L_dyn,
        L_beta=-math.log(1 - p.eta / p.L_stab),
        c_gamma_radius=c_gamma,
        c_xi_radius=min(c_xi1, c_xi2 / 2),
    )


def c_xi1_radius(p: RegularityParams) -> float:
    """Initial-condition radius for the state-perturbation bound."""
    return (1.0 / (4 * p.R_K * p.B_stab)) * min(
        1.0, 1.0 / (4 * p.L_stab * p.M_dyn * p.R_K * p.B_stab)
    )


@dataclass(frozen=True)
class IpsConstants:
    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    alpha: float


def ips_constants(
    moduli: IssModuli,
    R_dyn: float,
    R_K: float,
    L_stab: float,
    proof_variant: bool = False,
) -> IpsConstants:
    """Constants tying incremental stability to the chunked process.

    The published statement multiplies alpha by L_stab inside c1 while the
    derivation multiplies by the gain radius R_K; the statement is the
    default and ``proof_variant=True`` selects the other reading.
    """
    cb, cg = moduli.cbeta, moduli.cgamma
    alpha = cb * (4 * cg * min(moduli.c_gamma_radius, moduli.c_xi_radius / (4 * cg)) + moduli.c_xi_radius)
    scale = R_K if proof_variant else L_stab
    c1 = 4 * cg * cb * (2 + alpha * scale + 2 * R_dyn)
    c2 = min(moduli.c_gamma_radius, moduli.c_xi_radius / (2 * cg)) / max(1.0, c1)
    c3 = math.log(2 * math.e * cb) / moduli.L_beta
    return IpsConstants(c1=c1, c2=c2, c3=c3, c4=moduli.c_xi_radius / 2, c5=2 * cb, alpha=alpha)


# ---------------------------------------------------------------------------
# Closed-loop rollouts and t-ISS verification
# ---------------------------------------------------------------------------


def rollout_closed_loop(
    model: DynamicsModel,
    controllers,
    xi: np.ndarray,
    du_seq: np.ndarray | None = None,
) -> np.ndarray:
    """States of x_{i+1} = f(x_i, kappa_i(x_i) + du_i), x_1 = xi."""
    n = len(controllers)
    states = np.zeros((n + 1, model.state_dim))
    states[0] = np.asarray(xi, dtype=float)
    for i in range(n):
        u = controllers[i](states[i])
        if du_seq is not None:
            u = u + du_seq[i]
        states[i + 1] = states[i] + model.eta * model.drift(states[i], u)
    return states


@dataclass
class TissReport:
    slacks: np.ndarray
    max_deviations: np.ndarray
    trials: int

    @property
    def min_slack(self) -> float:
        return float(np.min(self.slacks)) if len(self.slacks) else 0.0

    @property
    def passed(self) -> bool:
        return self.min_slack >= 0.0


def verify_tiss(
    model: DynamicsModel,
    controllers,
    xi0: np.ndarray,
    moduli: IssModuli,
    trials: int,
    rng: np.random.Generator,
) -> TissReport:
    """Monte-Carlo check of the incremental-stability bound around xi0.

    Draws xi, xi' in the ball of radius c_xi around xi0 and perturbation
    sequences with max norm <= c_gamma, rolls nominal and perturbed loops,
    and records per-trial slack (bound minus deviation, minimized over i).
    """
    xi0 = np.asarray(xi0, dtype=float)
    n = len(controllers)
    dx, du_dim = model.state_dim, model.input_dim
    slacks = np.zeros(trials)
    max_devs = np.zeros(trials)
    for trial in range(trials):
        xi = xi0 + _ball_sample(rng, dx, moduli.c_xi_radius)
        xi_p = xi0 + _ball_sample(rng, dx, moduli.c_xi_radius)
        du_scale = rng.uniform(0, moduli.c_gamma_radius)
        du_seq = np.stack([_ball_sample(rng, du_dim, du_scale) for _ in range(n)])
        nominal = rollout_closed_loop(model, controllers, xi)
        perturbed = rollout_closed_loop(model, controllers, xi_p, du_seq)
        du_max = float(np.max(np.linalg.norm(du_seq, axis=1))) if n else 0.0
        xi_gap = float(np.linalg.norm(xi - xi_p))
        worst = np.inf
        for i in range(1, n + 2):
            dev = float(np.linalg.norm(nominal[i - 1] - perturbed[i - 1]))
            bound = moduli.beta(xi_gap, i) + moduli.gamma(du_max)
            worst = min(worst, bound - dev)
        slacks[trial] = worst
        max_devs[trial] = float(np.max(np.linalg.norm(nominal - perturbed, axis=1)))
    return TissReport(slacks=slacks, max_deviations=max_devs, trials=trials)


def _ball_sample(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    direction = rng.normal(size=dim)
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        return np.zeros(dim)
    return direction / norm * radius * rng.uniform() ** (1.0 / dim)


def deviation_decay_slope(
    model: DynamicsModel,
    controllers,
    xi0: np.ndarray,
    delta: np.ndarray,
    fit_start: int = 0,
) -> float:
    """Least-squares slope of log ||x_i - x'_i|| per step, for the closed
    loop started at xi0 versus xi0 + delta with no input perturbation."""
    nominal = rollout_closed_loop(model, controllers, xi0)
    perturbed = rollout_closed_loop(model, controllers, np.asarray(xi0) + np.asarray(delta))
    devs = np.linalg.norm(nominal - perturbed, axis=1)
    ks = np.arange(len(devs))
    keep = (ks >= fit_start) & (devs > 0)
    coeffs = np.polyfit(ks[keep], np.log(devs[keep]), 1)
    return float(coeffs[0])


def state_perturbation_check(
    traj: Trajectory,
    gains: GainSequence,
    model: DynamicsModel,
    p: RegularityParams,
    x1_perturbed: np.ndarray,
) -> bool:
    """Exponential tracking of a Jacobian-stable trajectory from a nearby
    start: ||x_{k+1} - xbar_{k+1}|| <= 2 B_stab ||x1' - xbar_1|| (1 - eta/L_stab)^k."""
    x1_perturbed = np.asarray(x1_perturbed, dtype=float)
    eps1 = float(np.linalg.norm(x1_perturbed - traj.states[0]))
    if eps1 > c_xi1_radius(p) + HYPOTHESIS_SLACK:
        raise HypothesisViolation("initial perturbation exceeds the admissible radius")
    decay = 1.0 - p.eta / p.L_stab
    x = x1_perturbed
    for k in range(traj.horizon):
        u = traj.inputs[k] + np.asarray(gains[k]) @ (x - traj.states[k])
        x = x + model.eta * model.drift(x, u)
        bound = 2 * p.B_stab * eps1 * decay ** (k + 1)
        if float(np.linalg.norm(x - traj.states[k + 1])) > bound + HYPOTHESIS_SLACK:
            return False
    return True


# ---------------------------------------------------------------------------
# Recursion lemma checkers
# ---------------------------------------------------------------------------


def recursion1_precondition(C1: float, beta: float, eta: float) -> bool:
    return C1 <= beta * (1 - beta) / (2 * eta)


def recursion1_check(C1, C2, beta, eta, eps1_bar, seq) -> bool:
    """Quadratic-forcing recursion: hypothesis
    eps_{k+1} <= C2 beta^k eps1_bar + C1 eta sum_j beta^(k-j) eps_j^2,
    conclusion eps_k <= 2 C2 beta^(k-1) eps1_bar."""
    seq = np.asarray(seq, dtype=float)
    if seq[0] > eps1_bar + HYPOTHESIS_SLACK:
        raise HypothesisViolation("eps_1 exceeds eps1_bar")
    for k in range(1, len(seq)):
        rhs = C2 * beta**k * eps1_bar + C1 * eta * sum(
            beta ** (k - j) * seq[j - 1] ** 2 for j in range(1, k + 1)
        )
        if seq[k] > rhs + HYPOTHESIS_SLACK * max(1.0, rhs):
            raise HypothesisViolation(f"recursion hypothesis fails at k={k + 1}")
    return all(
        seq[k - 1] <= 2 * C2 * beta ** (k - 1) * eps1_bar * (1 + HYPOTHESIS_SLACK) + HYPOTHESIS_SLACK
        for k in range(1, len(seq) + 1)
    )


def recursion2_precondition(c: float, Delta: float, beta: float, eta: float) -> bool:
    return Delta <= beta * (1 - beta) / (2 * c * eta)


def recursion2_check(c, Delta, beta, eta, seq) -> bool:
    """Linear-forcing recursion: hypothesis eps_1 <= c and
    eps_{k+1} <= c beta^k + c eta Delta beta^(k-1) sum_j eps_j,
    conclusion eps_{k+1} <= 2 c beta^k."""
    seq = np.asarray(seq, dtype=float)
    if seq[0] > c + HYPOTHESIS_SLACK:
        raise HypothesisViolation("eps_1 exceeds c")
    partial = 0.0
    for k in range(1, len(seq)):
        partial += seq[k - 1]
        rhs = c * beta**k + c * eta * Delta * beta ** (k - 1) * partial
        if seq[k] > rhs + HYPOTHESIS_SLACK * max(1.0, rhs):
            raise HypothesisViolation(f"recursion hypothesis fails at k={k + 1}")
    return all(
        seq[k] <= 2 * c * beta**k * (1 + HYPOTHESIS_SLACK) + HYPOTHESIS_SLACK
        for k in range(1, len(seq))
    )


def recursion3_check(C, C_prime, Delta1, Delta2, eta, L, seq) -> bool:
    """Mixed recursion with decay base beta = 1 - eta/L: hypothesis
    eps_{t+1} <= eta sum_s beta^(t-s) (Delta2 + C eps_s^2) + beta^t Delta1
    (checked wherever the running max stays below C_prime), conclusion
    eps_t <= 4 Delta1 beta^(t-1) + 2 L Delta2."""
    seq = np.asarray(seq, dtype=float)
    beta = 1.0 - eta / L
    if seq[0] > Delta1 + HYPOTHESIS_SLACK:
        raise HypothesisViolation("eps_1 exceeds Delta1")
    running_max = seq[0]
    for t in range(1, len(seq)):
        if running_max <= C_prime:
            rhs = beta**t * Delta1 + eta * sum(
                beta ** (t - s) * (Delta2 + C * seq[s - 1] ** 2) for s in range(1, t + 1)
            )
            if seq[t] > rhs + HYPOTHESIS_SLACK * max(1.0, rhs):
                raise HypothesisViolation(f"recursion hypothesis fails at t={t + 1}")
        running_max = max(running_max, seq[t])
    return all(
        seq[t - 1] <= (4 * Delta1 * beta ** (t - 1) + 2 * L * Delta2) * (1 + HYPOTHESIS_SLACK)
        + HYPOTHESIS_SLACK
        for t in range(1, len(seq) + 1)
    )


def matrix_product_perturbation_check(X_seq, X_prime_seq, c, Delta, beta, eta) -> bool:
    """Perturbed transition products: if the nominal products satisfy
    ||Phi(k, j)|| <= c beta^(k-j), the factor perturbations satisfy
    ||X_j - X'_j|| <= eta Delta beta^(j-1), and Delta is below the ceiling
    beta(1-beta)/(2 c eta), then every perturbed product obeys the doubled
    bound ||Phi'(k, j)|| <= 2 c beta^(k-j)."""
    X_seq = [np.atleast_2d(np.asarray(X, dtype=float)) for X in X_seq]
    X_prime_seq = [np.atleast_2d(np.asarray(X, dtype=float)) for X in X_prime_seq]
    if len(X_seq) != len(X_prime_seq):
        raise ValueError("factor sequences must have equal length")
    n = len(X_seq)
    if Delta > beta * (1 - beta) / (2 * c * eta) + HYPOTHESIS_SLACK:
        raise HypothesisViolation("Delta exceeds its ceiling")
    for j, (X, Xp) in enumerate(zip(X_seq, X_prime_seq), start=1):
        gap = opnorm(X - Xp)
        if gap > eta * Delta * beta ** (j - 1) + HYPOTHESIS_SLACK:
            raise HypothesisViolation(f"factor perturbation too large at j={j}")
    dim = X_seq[0].shape[0]
    for j in range(1, n + 2):
        Phi = np.eye(dim)
        Phi_p = np.eye(dim)
        for k in range(j, n + 1):
            Phi = X_seq[k - 1] @ Phi
            Phi_p = X_prime_seq[k - 1] @ Phi_p
            if opnorm(Phi) > c * beta ** (k + 1 - j) * (1 + HYPOTHESIS_SLACK) + HYPOTHESIS_SLACK:
                raise HypothesisViolation(f"nominal product bound fails at (k={k + 1}, j={j})")
            if opnorm(Phi_p) > 2 * c * beta ** (k + 1 - j) * (1 + HYPOTHESIS_SLACK) + HYPOTHESIS_SLACK:
                return False
    return True


# ---------------------------------------------------------------------------
# Numerical regularity estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegularityEstimate:
    R_dyn: float
    L_dyn: float
    M_dyn: float


def estimate_regularity(
    model: DynamicsModel,
    traj: Trajectory,
    R_dyn: float,
    rng: np.random.Generator,
    samples_per_step: int = 8,
    margin: float = 1.05,
) -> RegularityEstimate:
    """Sampled bounds on the drift Jacobian norm (L_dyn) and directional
    second-derivative norm (M_dyn) within radius R_dyn of the trajectory.
    Maxima are inflated by a small safety margin."""
    h = 1e-3
    L = 0.0
    M = 0.0
    dx, du = model.state_dim, model.input_dim
    for t in range(traj.horizon):
        base = np.concatenate([traj.states[t], traj.inputs[t]])
        for s in range(samples_per_step):
            z = base if s == 0 else base + np.concatenate(
                [_ball_sample(rng, dx, R_dyn), _ball_sample(rng, du, R_dyn)]
            )
            lin = jacobian(model, z[:dx], z[dx:])
            L = max(L, opnorm(np.hstack([lin.A, lin.B])))
            v = rng.normal(size=dx + du)
            v /= np.linalg.norm(v)
            fp = model.drift(z[:dx] + h * v[:dx], z[dx:] + h * v[dx:])
            fm = model.drift(z[:dx] - h * v[:dx], z[dx:] - h * v[dx:])
            f0 = model.drift(z[:dx], z[dx:])
            M = max(M, float(np.linalg.norm(fp - 2 * f0 + fm)) / h**2)
    return RegularityEstimate(R_dyn=R_dyn, L_dyn=margin * L, M_dyn=margin * M)
