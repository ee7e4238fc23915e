"""Gaussian observation smoothing, its total-variation and concentration
bounds, and exact finite-support deconvolution / replica kernels.

The smoothing kernel adds N(0, sigma^2 I) to observation-chunk coordinates
only. Deconvolution is the Bayes posterior of a clean atom given a noised
observation; the replica kernel is smoothing followed by deconvolution and
preserves the prior's marginals exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .chunking import ObservationChunk

GH_POINTS = 128  # Gauss-Hermite order for replica integrals over Gaussian noise


@dataclass(frozen=True)
class GaussianSmoother:
    """Additive N(0, sigma^2 I) noise on the observation coordinates."""

    sigma: float
    obs_dim: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise scale must be nonnegative")

    def smooth_flat(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        if self.sigma == 0.0:
            return obs.copy()
        return obs + self.sigma * rng.standard_normal(obs.shape)


def smooth_obs(o: ObservationChunk, sigma: float, rng: np.random.Generator) -> ObservationChunk:
    """Noised copy of an observation chunk; sigma = 0 returns it unchanged."""
    if sigma < 0:
        raise ValueError("noise scale must be nonnegative")
    if sigma == 0.0:
        return ObservationChunk(states=o.states.copy(), inputs=o.inputs.copy())
    return ObservationChunk(
        states=o.states + sigma * rng.standard_normal(o.states.shape),
        inputs=o.inputs + sigma * rng.standard_normal(o.inputs.shape),
    )


def tvc_bound(u: float, sigma: float, tau_obs: int) -> float:
    """Total-variation continuity modulus u * sqrt(2 tau_obs - 1) / (2 sigma)
    of the smoothing kernel; infinite when sigma = 0 and u > 0."""
    if u < 0:
        raise ValueError("distance must be nonnegative")
    if sigma == 0.0:
        return 0.0 if u == 0.0 else math.inf
    return u * math.sqrt(2 * tau_obs - 1) / (2 * sigma)


def gaussian_norm_quantile(d: int, sigma: float, p: float) -> float:
    """Radius 2 sigma sqrt(5 d + 2 log(1/p)) exceeded with probability <= p
    by an N(0, sigma^2 I_d) vector."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    return 2 * sigma * math.sqrt(5 * d + 2 * math.log(1.0 / p))


def gaussian_tv_1d(u: float, sigma: float) -> float:
    """Exact TV between N(0, sigma^2) and N(u, sigma^2): erf(u / (2 sqrt(2) sigma))."""
    return math.erf(abs(u) / (2 * math.sqrt(2) * sigma))


# ---------------------------------------------------------------------------
# Finite-support distributions and kernels
# ---------------------------------------------------------------------------


@dataclass
class DiscreteDistribution:
    """Finite support: atoms (scalars or row vectors) with probabilities."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.atoms) != len(self.weights):
            raise ValueError("atoms and weights must have equal length")
        if np.any(self.weights < -1e-15):
            raise ValueError("weights must be nonnegative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")

    def __len__(self) -> int:
        return len(self.atoms)

    def weight_at(self, atom, tol: float = 1e-12) -> float:
        diffs = self.atoms - atom
        dist = np.abs(diffs) if diffs.ndim == 1 else np.linalg.norm(diffs, axis=1)
        hits = np.where(dist <= tol)[0]
        return float(self.weights[hits].sum())


class DegenerateInputError(ValueError):
    """Observation has zero likelihood under every atom of the prior."""


@dataclass(frozen=True)
class GaussianNoise:
    """Additive N(0, sigma^2) observation noise (one-dimensional)."""

    sigma: float

    def density(self, diff: float) -> float:
        if self.sigma == 0.0:
            return 1.0 if diff == 0.0 else 0.0
        z = diff / self.sigma
        return math.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi))


@dataclass
class DiscreteNoise:
    """Additive noise with a finite pmf over offsets."""

    offsets: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=float)
        self.probs = np.asarray(self.probs, dtype=float)
        if abs(float(self.probs.sum()) - 1.0) > 1e-12:
            raise ValueError("offset probabilities must sum to 1")

    def density(self, diff: float, tol: float = 1e-9) -> float:
        hits = np.where(np.abs(self.offsets - diff) <= tol)[0]
        return float(self.probs[hits].sum())


def _density_fn(noise) -> Callable[[np.ndarray], float]:
    """Accept either a noise object exposing ``density`` or a bare
    likelihood-of-difference callable."""
    return noise.density if hasattr(noise, "density") else noise


def discrete_deconvolution(
    prior: DiscreteDistribution,
    noise_density: Callable[[np.ndarray], float],
    s_observed,
) -> DiscreteDistribution:
    """Bayes posterior over the prior's atoms given a noised observation:
    weights proportional to w_i * q(s_observed - x_i)."""
    s_observed = np.asarray(s_observed, dtype=float)
    likelihoods = np.array(
        [noise_density(s_observed - atom) for atom in prior.atoms], dtype=float
    )
    evidence = float(np.dot(prior.weights, likelihoods))
    if evidence <= 0.0:
        raise DegenerateInputError("observation has zero evidence under the prior")
    return DiscreteDistribution(atoms=prior.atoms.copy(), weights=prior.weights * likelihoods / evidence)


def deconvolution_matrix(prior: DiscreteDistribution, noise) -> np.ndarray:
    """Row-stochastic matrix Q_dec[i, j] = posterior of atom j given that the
    observed value equals atom i (posterior taken against ``prior``)."""
    k = len(prior)
    density = _density_fn(noise)
    Q = np.zeros((k, k))
    for i in range(k):
        Q[i] = discrete_deconvolution(prior, density, prior.atoms[i]).weights
    return Q


def replica_kernel_discrete(prior: DiscreteDistribution, noise) -> np.ndarray:
    """Transition matrix of smoothing followed by deconvolution:
    Q_rep[i, j] = E over noised observations of atom i of the posterior mass
    on atom j. Gaussian noise is integrated with Gauss-Hermite quadrature;
    finite noise is summed exactly."""
    k = len(prior)
    Q = np.zeros((k, k))
    if isinstance(noise, GaussianNoise):
        if prior.atoms.ndim != 1:
            raise ValueError("Gaussian replica integrals support scalar atoms only")
        if noise.sigma == 0.0:
            return np.eye(k)
        nodes, gh_weights = np.polynomial.hermite.hermgauss(GH_POINTS)
        zs = math.sqrt(2.0) * noise.sigma * nodes
        ws = gh_weights / math.sqrt(math.pi)
        for i in range(k):
            for z, w in zip(zs, ws):
                post = discrete_deconvolution(prior, noise.density, prior.atoms[i] + z)
                Q[i] += w * post.weights
    elif isinstance(noise, DiscreteNoise):
        for i in range(k):
            for offset, p_off in zip(noise.offsets, noise.probs):
                if p_off == 0.0:
                    continue
                post = discrete_deconvolution(prior, noise.density, prior.atoms[i] + offset)
                Q[i] += p_off * post.weights
    else:
        raise TypeError(f"unsupported noise model {type(noise).__name__}")
    # guard quadrature drift: rows must be stochastic
    row_sums = Q.sum(axis=1)
    if np.max(np.abs(row_sums - 1.0)) > 1e-6:
        raise RuntimeError(f"replica rows deviate from stochasticity by {np.max(np.abs(row_sums - 1.0)):.2e}")
    return Q / row_sums[:, None]


def deconvolution_chain(prior: DiscreteDistribution, noise, H: int):
    """Marginals of repeatedly acting with the deconvolution kernel (no
    re-noising): P_1 = prior, P_{h+1} = P_h Q_dec. Returns [P_1, ..., P_H]."""
    if H < 1:
        raise ValueError("chain length must be >= 1")
    Q = deconvolution_matrix(prior, noise)
    out = [DiscreteDistribution(atoms=prior.atoms.copy(), weights=prior.weights.copy())]
    w = prior.weights.copy()
    for _ in range(H - 1):
        w = w @ Q
        out.append(DiscreteDistribution(atoms=prior.atoms.copy(), weights=w.copy()))
    return out
