"""Conditional denoising diffusion model built from scratch.

Forward process: Ornstein-Uhlenbeck interpolation
``a_t = exp(-t) a_0 + sqrt(1 - exp(-2t)) gamma`` with standard normal gamma.
The score estimator is a fully-connected tanh network taking the noised
action, the flattened conditioning observation, and a 64-dimensional
sinusoidal embedding of the diffusion step. Training minimizes

    sum ||gamma - s_theta(exp(-alpha j) a + sqrt(1 - exp(-2 alpha j)) gamma, o, j)||^2

with exact manual backpropagation. Sampling runs the Euler-Maruyama
discretization of the reverse SDE  da = (a + 2 grad log q) dt + sqrt(2) dB:

    a^j = a^{j-1} + alpha (a^{j-1} + 2 s_theta(a^{j-1}, o, J-j+1)) + sqrt(2 alpha) zeta.

A literal single-display variant of the update (negated score with
2 N(0, alpha^2 I) noise) is available behind a flag for comparison.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .rng import make_rng, seed_stream

TIME_EMBED_DIM = 64
DEFAULT_HIDDEN = (128, 128, 64, 64)
CHECKPOINT_MAGIC = b"DSTB"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class ScoreNetwork:
    """MLP estimator s_theta(action, observation, step).

    The training loss fits the network to the unit noise gamma, so its raw
    output is a noise prediction; the corresponding score of the noised
    marginal at OU time t is -output / sqrt(1 - exp(-2t)). The sampler
    applies that conversion whenever ``predicts_noise`` is set.
    """

    action_dim: int
    obs_dim: int
    weights: list
    biases: list
    time_dim: int = TIME_EMBED_DIM
    predicts_noise: bool = True

    @property
    def input_dim(self) -> int:
        return self.action_dim + self.obs_dim + self.time_dim

    def parameters(self):
        return self.weights + self.biases

    def copy(self) -> "ScoreNetwork":
        return ScoreNetwork(
            action_dim=self.action_dim,
            obs_dim=self.obs_dim,
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
            time_dim=self.time_dim,
            predicts_noise=self.predicts_noise,
        )

    def score(self, actions: np.ndarray, obs: np.ndarray, step: int, t: float) -> np.ndarray:
        """Score estimate at OU time t, converting from noise prediction."""
        out = self.forward(actions, obs, step)
        if self.predicts_noise:
            return -out / max(math.sqrt(1.0 - math.exp(-2.0 * t)), 1e-6)
        return out

    def forward(self, actions: np.ndarray, obs: np.ndarray, steps) -> np.ndarray:
        """Score estimates for a batch; ``steps`` may be scalar or per-item."""
        z = _assemble_inputs(self, actions, obs, steps)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            z = np.tanh(z @ W.T + b)
        return z @ self.weights[-1].T + self.biases[-1]


def time_embedding(steps, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal positional encoding of diffusion step indices."""
    steps = np.atleast_1d(np.asarray(steps, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / max(half - 1, 1))
    angles = steps[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _assemble_inputs(net: ScoreNetwork, actions, obs, steps) -> np.ndarray:
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    n = len(actions)
    emb = time_embedding(np.broadcast_to(np.asarray(steps, dtype=float), (n,)), net.time_dim)
    parts = [actions]
    if net.obs_dim > 0:
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if obs.shape != (n, net.obs_dim):
            obs = np.broadcast_to(obs, (n, net.obs_dim))
        parts.append(obs)
    parts.append(emb)
    return np.concatenate(parts, axis=1)


def init_network(
    action_dim: int,
    obs_dim: int,
    hidden=DEFAULT_HIDDEN,
    time_dim: int = TIME_EMBED_DIM,
    seed: int = 0,
) -> ScoreNetwork:
    """Glorot-uniform initialization, deterministic in the seed."""
    rng = make_rng(seed)
    sizes = [action_dim + obs_dim + time_dim, *hidden, action_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ScoreNetwork(action_dim=action_dim, obs_dim=obs_dim, weights=weights, biases=biases, time_dim=time_dim)


@dataclass(frozen=True)
class NoiseSchedule:
    """Diffusion-time grid t_1 < ... < t_J.

    ``uniform-alpha`` uses t_j = alpha * j. ``squared-cosine`` maps the
    standard clamped cos^2 signal-fraction profile abar_j onto OU time via
    exp(-2 t_j) = abar_j, i.e. t_j = -log(abar_j) / 2.
    """

    mode: str = "uniform-alpha"
    J: int = 100
    alpha: float = 0.04

    def __post_init__(self):
        if self.J < 1:
            raise ValueError("schedule needs at least one step")
        if self.mode not in ("uniform-alpha", "squared-cosine"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "uniform-alpha" and self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def times(self) -> np.ndarray:
        js = np.arange(1, self.J + 1, dtype=float)
        if self.mode == "uniform-alpha":
            return self.alpha * js
        s = 0.008
        abar = np.cos((js / self.J + s) / (1 + s) * math.pi / 2) ** 2
        abar = np.clip(abar / math.cos(s / (1 + s) * math.pi / 2) ** 2, 1e-9, 1.0)
        return -0.5 * np.log(abar)

    def step_sizes(self) -> np.ndarray:
        t = self.times
        return np.diff(np.concatenate([[0.0], t]))


def ou_forward(a0: np.ndarray, t: float, gamma: np.ndarray) -> np.ndarray:
    """Forward noising exp(-t) a0 + sqrt(1 - exp(-2t)) gamma."""
    if t < 0:
        raise ValueError("diffusion time must be nonnegative")
    return math.exp(-t) * np.asarray(a0, dtype=float) + math.sqrt(1.0 - math.exp(-2.0 * t)) * np.asarray(gamma, dtype=float)


def _noised_batch(net: ScoreNetwork, schedule: NoiseSchedule, actions, obs, steps, gammas):
    """Inputs of the training loss: noised actions at the per-item times."""
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    gammas = np.atleast_2d(np.asarray(gammas, dtype=float))
    times = schedule.times[np.asarray(steps, dtype=int) - 1]
    scale = np.exp(-times)[:, None]
    spread = np.sqrt(1.0 - np.exp(-2.0 * times))[:, None]
    return scale * actions + spread * gammas


def ddpm_loss(net: ScoreNetwork, schedule: NoiseSchedule, actions, obs, steps, gammas) -> float:
    """Sum of squared residuals between gamma and the score prediction."""
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    if len(actions) == 0:
        raise ValueError("batch must be nonempty")
    noised = _noised_batch(net, schedule, actions, obs, steps, gammas)
    preds = net.forward(noised, obs, steps)
    return float(np.sum((np.atleast_2d(gammas) - preds) ** 2))


def loss_gradient(net: ScoreNetwork, schedule: NoiseSchedule, actions, obs, steps, gammas):
    """Exact gradient of :func:`ddpm_loss` in the network parameters.

    Returns (loss, weight grads, bias grads).
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    gammas = np.atleast_2d(np.asarray(gammas, dtype=float))
    noised = _noised_batch(net, schedule, actions, obs, steps, gammas)
    z = _assemble_inputs(net, noised, obs, steps)

    activations = [z]
    pre = None
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        pre = activations[-1] @ W.T + b
        activations.append(np.tanh(pre))
    out = activations[-1] @ net.weights[-1].T + net.biases[-1]
    loss = float(np.sum((gammas - out) ** 2))

    grad_W = [np.zeros_like(W) for W in net.weights]
    grad_b = [np.zeros_like(b) for b in net.biases]
    delta = 2.0 * (out - gammas)
    grad_W[-1] = delta.T @ activations[-1]
    grad_b[-1] = delta.sum(axis=0)
    for layer in range(len(net.weights) - 2, -1, -1):
        delta = (delta @ net.weights[layer + 1]) * (1.0 - activations[layer + 1] ** 2)
        grad_W[layer] = delta.T @ activations[layer]
        grad_b[layer] = delta.sum(axis=0)
    return loss, grad_W, grad_b


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    warmup_steps: int = 500
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    optimizer: str = "adam"  # "adam" or "momentum"

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.epochs) <= 0:
            raise ValueError("training configuration values must be positive")
        if self.optimizer not in ("adam", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def _lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    tail = max(total_steps - cfg.warmup_steps, 1)
    progress = min(max(step - cfg.warmup_steps, 0) / tail, 1.0)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def train(
    actions: np.ndarray,
    observations: Optional[np.ndarray],
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    net: Optional[ScoreNetwork] = None,
    hidden=DEFAULT_HIDDEN,
    observation_resampler=None,
) -> ScoreNetwork:
    """Fit the score network to (action, observation) pairs.

    Each epoch draws fresh diffusion steps j ~ Unif{1..J} and fresh unit
    Gaussians per item, shuffles, and applies momentum gradient descent
    with linear warmup followed by cosine decay. Deterministic in the seed.

    ``observation_resampler(rng)``, when given, supplies that epoch's
    conditioning observations (fresh noise augmentation per epoch).
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    n, action_dim = actions.shape
    if n == 0:
        raise ValueError("dataset must be nonempty")
    if observations is None:
        observations = np.zeros((n, 0))
    observations = np.atleast_2d(np.asarray(observations, dtype=float))
    obs_dim = observations.shape[1]
    if net is None:
        net = init_network(action_dim, obs_dim, hidden=hidden, seed=seed_stream(cfg.seed, "init"))
    else:
        net = net.copy()
    rng = make_rng(seed_stream(cfg.seed, "train"))
    params = net.weights + net.biases
    vel = [np.zeros_like(p) for p in params]
    second = [np.zeros_like(p) for p in params]
    batches_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * batches_per_epoch
    step = 0
    for _ in range(cfg.epochs):
        if observation_resampler is not None:
            observations = np.atleast_2d(np.asarray(observation_resampler(rng), dtype=float))
        order = rng.permutation(n)
        steps_epoch = rng.integers(1, schedule.J + 1, size=n)
        gammas_epoch = rng.standard_normal((n, action_dim))
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, gW, gb = loss_gradient(
                net,
                schedule,
                actions[idx],
                observations[idx],
                steps_epoch[idx],
                gammas_epoch[idx],
            )
            if not math.isfinite(loss):
                raise TrainingError(f"loss became non-finite at update {step}")
            lr = _lr_at(cfg, step, total_steps)
            # normalize per item and output coordinate so the step size is
            # comparable across action dimensions
            scale = 1.0 / (len(idx) * action_dim)
            grads = [g * scale for g in gW + gb]
            if cfg.optimizer == "adam":
                b1, b2, eps = 0.9, 0.999, 1e-8
                for i, p in enumerate(params):
                    vel[i] = b1 * vel[i] + (1 - b1) * grads[i]
                    second[i] = b2 * second[i] + (1 - b2) * grads[i] ** 2
                    m_hat = vel[i] / (1 - b1 ** (step + 1))
                    v_hat = second[i] / (1 - b2 ** (step + 1))
                    p -= lr * m_hat / (np.sqrt(v_hat) + eps)
            else:
                for i, p in enumerate(params):
                    vel[i] = cfg.momentum * vel[i] - lr * grads[i]
                    p += vel[i]
            step += 1
    return net


def sample(
    net: ScoreNetwork,
    obs: Optional[np.ndarray],
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    n_samples: int = 1,
    literal_update: bool = False,
    score_fn=None,
) -> np.ndarray:
    """Draw actions by denoising from a standard Gaussian.

    ``score_fn(a, j)`` overrides the network (used to inject analytic
    scores); ``literal_update`` selects the alternative printed update
    a^j = a^{j-1} - alpha s(a^{j-1}, o, j) + 2 N(0, alpha^2 I).
    """
    dim = net.action_dim
    obs_row = None
    if net.obs_dim > 0:
        obs_row = np.broadcast_to(np.asarray(obs, dtype=float), (n_samples, net.obs_dim))
    a = rng.standard_normal((n_samples, dim))
    alphas = schedule.step_sizes()
    times = schedule.times
    for j in range(1, schedule.J + 1):
        if literal_update:
            step_idx = j
            alpha = alphas[j - 1]
        else:
            step_idx = schedule.J - j + 1
            alpha = alphas[step_idx - 1]
        if score_fn is not None:
            score = score_fn(a, step_idx)
        else:
            score = net.score(a, obs_row, step_idx, times[step_idx - 1])
        zeta = rng.standard_normal((n_samples, dim))
        if literal_update:
            a = a - alpha * score + 2.0 * alpha * zeta
        else:
            a = a + alpha * (a + 2.0 * score) + math.sqrt(2.0 * alpha) * zeta
    return a if n_samples > 1 else a[0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, net: ScoreNetwork, config: dict, seed: int) -> None:
    """Versioned binary checkpoint plus a JSON sidecar with config and seed."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<IIII", net.action_dim, net.obs_dim, net.time_dim, int(net.predicts_noise)))
        fh.write(struct.pack("<I", len(net.weights)))
        for W in net.weights:
            fh.write(struct.pack("<II", *W.shape))
        for W, b in zip(net.weights, net.biases):
            fh.write(W.astype("<f8").tobytes())
            fh.write(b.astype("<f8").tobytes())
    with open(path + ".json", "w") as fh:
        json.dump({"config": config, "seed": seed, "version": CHECKPOINT_VERSION}, fh, indent=2)


def load_checkpoint(path: str) -> tuple[ScoreNetwork, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a score-network checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        action_dim, obs_dim, time_dim, predicts_noise = struct.unpack("<IIII", fh.read(16))
        (n_layers,) = struct.unpack("<I", fh.read(4))
        shapes = [struct.unpack("<II", fh.read(8)) for _ in range(n_layers)]
        weights, biases = [], []
        for rows, cols in shapes:
            weights.append(np.frombuffer(fh.read(8 * rows * cols), dtype="<f8").reshape(rows, cols).copy())
            biases.append(np.frombuffer(fh.read(8 * rows), dtype="<f8").copy())
    try:
        with open(path + ".json") as fh:
            sidecar = json.load(fh)
    except FileNotFoundError:
        sidecar = {}
    net = ScoreNetwork(
        action_dim=action_dim,
        obs_dim=obs_dim,
        weights=weights,
        biases=biases,
        time_dim=time_dim,
        predicts_noise=bool(predicts_noise),
    )
    return net, sidecar
