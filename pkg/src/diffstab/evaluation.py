"""Imitation-quality estimation and the synthetic lower-bound chains.

The empirical imitation loss couples equal-size expert and imitator sample
sets through maximum bipartite matchings: at each step t, samples are
matched when both the step-t+1 states and step-t inputs are within epsilon,
and the loss is the unmatched fraction. Matchings over equal-weight
empirical measures upper-bound the coupling infimum and are exact for 0/1
costs.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import QuadcopterParams, Trajectory
from .smoothing import DiscreteDistribution, GaussianNoise, discrete_deconvolution, replica_kernel_discrete


# ---------------------------------------------------------------------------
# Maximum bipartite matching (Hopcroft-Karp)
# ---------------------------------------------------------------------------


def hopcroft_karp(adjacency: list, n_right: int) -> int:
    """Maximum matching size for a bipartite graph given as left-side
    adjacency lists over right vertices 0..n_right-1."""
    INF = float("inf")
    n_left = len(adjacency)
    match_left = [-1] * n_left
    match_right = [-1] * n_right
    dist = [0.0] * n_left

    def bfs() -> bool:
        queue = deque()
        for u in range(n_left):
            if match_left[u] == -1:
                dist[u] = 0.0
                queue.append(u)
            else:
                dist[u] = INF
        found = False
        while queue:
            u = queue.popleft()
            for v in adjacency[u]:
                w = match_right[v]
                if w == -1:
                    found = True
                elif dist[w] == INF:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return found

    def dfs(u: int) -> bool:
        for v in adjacency[u]:
            w = match_right[v]
            if w == -1 or (dist[w] == dist[u] + 1 and dfs(w)):
                match_left[u] = v
                match_right[v] = u
                return True
        dist[u] = INF
        return False

    size = 0
    while bfs():
        for u in range(n_left):
            if match_left[u] == -1 and dfs(u):
                size += 1
    return size


def matched_fraction(cost_ok: np.ndarray) -> float:
    """Maximum fraction of rows matchable to distinct columns through the
    boolean feasibility matrix."""
    n = cost_ok.shape[0]
    adjacency = [list(np.where(cost_ok[i])[0]) for i in range(n)]
    return hopcroft_karp(adjacency, cost_ok.shape[1]) / n


@dataclass
class EmpiricalLossReport:
    """Matched-fraction imitation losses at tolerance epsilon."""

    per_step: np.ndarray
    joint: float
    final_state: float
    epsilon: float
    n_samples: int

    @property
    def marginal(self) -> float:
        return float(np.max(self.per_step)) if len(self.per_step) else 0.0


def empirical_marginal_loss(expert_rollouts, policy_rollouts, epsilon: float) -> EmpiricalLossReport:
    """Per-timestep, joint, and final-state matching losses between two
    equal-size rollout sets sharing initial states index-wise."""
    if len(expert_rollouts) != len(policy_rollouts):
        raise ValueError("expert and policy sample counts must match")
    n = len(expert_rollouts)
    if n == 0:
        raise ValueError("need at least one rollout")
    T = expert_rollouts[0].horizon
    exp_states = np.stack([r.states for r in expert_rollouts])
    exp_inputs = np.stack([r.inputs for r in expert_rollouts])
    pol_states = np.stack([r.states for r in policy_rollouts])
    pol_inputs = np.stack([r.inputs for r in policy_rollouts])

    # pairwise per-step deviation max(|dx_{t+1}|, |du_t|), shape (n, n, T)
    state_gap = np.linalg.norm(exp_states[:, None, 1:, :] - pol_states[None, :, 1:, :], axis=3)
    input_gap = np.linalg.norm(exp_inputs[:, None, :, :] - pol_inputs[None, :, :, :], axis=3)
    step_gap = np.maximum(state_gap, input_gap)

    per_step = np.array([1.0 - matched_fraction(step_gap[:, :, t] <= epsilon) for t in range(T)])
    joint = 1.0 - matched_fraction(step_gap.max(axis=2) <= epsilon)
    final_gap = np.linalg.norm(exp_states[:, None, -1, :] - pol_states[None, :, -1, :], axis=2)
    final_loss = 1.0 - matched_fraction(final_gap <= epsilon)
    return EmpiricalLossReport(per_step=per_step, joint=joint, final_state=final_loss, epsilon=epsilon, n_samples=n)


# ---------------------------------------------------------------------------
# Discrete total variation
# ---------------------------------------------------------------------------


def tv_discrete(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """(1/2) sum |p_i - q_i| over a shared atom set."""
    if len(p) != len(q):
        raise ValueError("distributions must share their atom set")
    if not np.allclose(p.atoms, q.atoms, atol=1e-12):
        raise ValueError("distributions must share their atom set")
    return 0.5 * float(np.abs(p.weights - q.weights).sum())


# ---------------------------------------------------------------------------
# Quadcopter reward
# ---------------------------------------------------------------------------


def quadcopter_cost(x: np.ndarray, u: np.ndarray, params: QuadcopterParams) -> float:
    hover = params.m * params.g
    return float(np.dot(x, x) + 0.5 * (u[0] - hover) ** 2 + 0.1 * u[1] ** 2)


def quadcopter_reward(traj: Trajectory, params: QuadcopterParams | None = None) -> float:
    """Mean per-step reward exp(-cost) along a trajectory."""
    params = params or QuadcopterParams()
    rewards = [
        math.exp(-quadcopter_cost(traj.states[t], traj.inputs[t], params)) for t in range(traj.horizon)
    ]
    return float(np.mean(rewards))


# ---------------------------------------------------------------------------
# Lower-bound chains on the scalar composite MDP with dynamics F(s, a) = a
# ---------------------------------------------------------------------------


@dataclass
class ToyMdp:
    """Scalar composite MDP: the next state equals the chosen action."""

    policy: Callable[[float, np.random.Generator], float]
    smoother: Callable[[float, np.random.Generator], float]
    horizon: int
    init: Callable[[np.random.Generator], float]

    def rollout(self, rng: np.random.Generator) -> np.ndarray:
        s = self.init(rng)
        states = [s]
        for _ in range(self.horizon):
            s_tilde = self.smoother(s, rng)
            s = self.policy(s_tilde, rng)
            states.append(s)
        return np.array(states)


@dataclass
class SharpnessResult:
    exact: float
    estimate: float
    trials: int

    @property
    def std_error(self) -> float:
        return math.sqrt(max(self.exact * (1 - self.exact), 1e-12) / self.trials)


def sharpness_absorption_exact(eps: float, p: float, sigma: float, H: int) -> float:
    """Absorption probability of the two-state chain: from the low state the
    policy escapes to the absorbing high state with rate
    eta(eps) = p + (1 - p) eps / sigma per step after the first."""
    eta = p + (1 - p) * eps / sigma
    return 1.0 - (1.0 - p) * (1.0 - eta) ** (H - 1)


def simulate_sharpness_lb(
    eps: float, p: float, sigma: float, H: int, trials: int, rng: np.random.Generator
) -> SharpnessResult:
    """Monte-Carlo absorption frequency of the piecewise smoothing kernel /
    two-mode policy chain, next to its exact forward recursion."""
    if not 0 < eps < sigma:
        raise ValueError("need 0 < eps < sigma")
    if not 0 < p <= 1:
        raise ValueError("need p in (0, 1]")

    def smoother(s: float, rng: np.random.Generator) -> float:
        if s <= 0:
            return 0.0
        if s >= sigma:
            return sigma
        return sigma if rng.uniform() < s / sigma else 0.0

    def policy(s_tilde: float, rng: np.random.Generator) -> float:
        if s_tilde <= eps / 2:
            return sigma if rng.uniform() < p else eps
        return sigma

    mdp = ToyMdp(policy=policy, smoother=smoother, horizon=H, init=lambda rng: 0.0)
    hits = sum(1 for _ in range(trials) if mdp.rollout(rng)[-1] >= sigma)
    return SharpnessResult(exact=sharpness_absorption_exact(eps, p, sigma, H), estimate=hits / trials, trials=trials)


@dataclass
class ReplicaJointResult:
    flip_estimate: float
    flip_bound: float
    marginal_tv: np.ndarray
    flip_prob_single: float
    trials: int

    @property
    def std_error(self) -> float:
        return math.sqrt(max(self.flip_estimate * (1 - self.flip_estimate), 1e-12) / self.trials)


def simulate_replica_joint_gap(
    eps: float, sigma: float, H: int, trials: int, rng: np.random.Generator
) -> ReplicaJointResult:
    """Replica-policy rollouts on the two-point prior (+-eps, 1/2 each) with
    Gaussian smoothing: estimates the probability of at least one mode flip
    over H steps and the per-step marginal drift from (1/2, 1/2)."""
    if eps > sigma:
        raise ValueError("need eps <= sigma")
    prior = DiscreteDistribution(atoms=[eps, -eps], weights=[0.5, 0.5])
    noise = GaussianNoise(sigma=sigma)
    q_flip = float(replica_kernel_discrete(prior, noise)[0, 1])

    minus_counts = np.zeros(H + 1)
    flips = 0
    for _ in range(trials):
        s = eps if rng.uniform() < 0.5 else -eps
        minus_counts[0] += s < 0
        flipped = False
        for h in range(1, H + 1):
            s_tilde = s + sigma * rng.standard_normal()
            post = discrete_deconvolution(prior, noise.density, s_tilde)
            a = prior.atoms[0] if rng.uniform() < post.weights[0] else prior.atoms[1]
            if a == -s:
                flipped = True
            s = a
            minus_counts[h] += s < 0
        flips += flipped
    marginal_tv = np.abs(minus_counts / trials - 0.5)
    return ReplicaJointResult(
        flip_estimate=flips / trials,
        flip_bound=1.0 - (1.0 - q_flip) ** H,
        marginal_tv=marginal_tv,
        flip_prob_single=q_flip,
        trials=trials,
    )
