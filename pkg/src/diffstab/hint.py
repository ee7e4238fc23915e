"""End-to-end imitation pipeline: expert data generation, gain synthesis,
noise augmentation, diffusion training on (noised observation, composite
action) pairs, and the noise-injecting inference policy.

Stage order per trajectory: roll the expert, synthesize consistent
stabilizing controllers, segment into observation chunks and composite
actions, normalize all coordinates to [-1, 1], then add Gaussian noise to
the (normalized) observations only. The trained policy noises observations
with the same sigma at inference time before conditioning the sampler;
sigma = 0 reduces it to the base policy exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import ddpm
from .chunking import ChunkConfig, CompositeAction, ObservationChunk, PrimitiveController, observation_at, segment
from .dynamics import DynamicsModel, QuadcopterParams, Trajectory, jacobian, make_quadcopter, step
from .riccati import GainSequence, gain_from_dare, lqr_gain_finite_horizon, solve_dare, synthesize_tv_gains
from .rng import make_rng, seed_stream

DATASET_MAGIC = b"DSDS"
DATASET_VERSION = 1


class GenerationError(RuntimeError):
    """Expert rollout diverged."""


# ---------------------------------------------------------------------------
# Quadcopter MPC expert and gain synthesis
# ---------------------------------------------------------------------------


@dataclass
class QuadcopterMpcExpert:
    """Receding-horizon LQR driving the quadcopter to the origin.

    At every step the dynamics are linearized at the current state with
    hover input, and a horizon-limited time-invariant LQR (state weights 1,
    input weights 0.5 and 0.1 about the hover thrust) gives the feedback.
    """

    params: QuadcopterParams = field(default_factory=QuadcopterParams)
    horizon: int = 25

    def __post_init__(self):
        self._model = make_quadcopter(self.params)
        self._R = np.diag([0.5, 0.1])
        self._Q = np.eye(6)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        lin = jacobian(self._model, x, self.params.hover_input)
        eta = self.params.eta
        A_d = np.eye(6) + eta * lin.A
        B_d = eta * lin.B
        K = lqr_gain_finite_horizon(A_d, B_d, self._Q, self._R, self.horizon)
        return self.params.hover_input + K @ x


def synthesize_dare_gains(traj: Trajectory, model: DynamicsModel) -> GainSequence:
    """Infinite-horizon LQR gain at each (x_t, u_t) with unit Q, R."""
    eta = model.eta
    gains = []
    dx = model.state_dim
    P_prev = None  # consecutive linearizations are close; warm-start each solve
    for t in range(traj.horizon):
        lin = jacobian(model, traj.states[t], traj.inputs[t])
        A_d = np.eye(dx) + eta * lin.A
        B_d = eta * lin.B
        P_prev = solve_dare(A_d, B_d, np.eye(dx), np.eye(model.input_dim), P0=P_prev)
        gains.append(gain_from_dare(P_prev, A_d, B_d, np.eye(model.input_dim)))
    return GainSequence(gains=gains)


def generate_expert_data(
    env: DynamicsModel,
    expert: Callable[[np.ndarray], np.ndarray],
    n_exp: int,
    cfg: ChunkConfig,
    rng: np.random.Generator,
    init_halfwidth: float = 1.0,
    gain_mode: str = "dare",
    divergence_norm: float = 1e6,
):
    """Roll ``n_exp`` expert trajectories and synthesize consistent gains.

    Initial states are uniform in a box of the given half-width. Gains come
    from per-step infinite-horizon LQR ("dare") or a backward Riccati pass
    along the whole trajectory ("tv").
    """
    trajectories, gain_sequences = [], []
    for _ in range(n_exp):
        x = rng.uniform(-init_halfwidth, init_halfwidth, size=env.state_dim)
        states = np.zeros((cfg.T + 1, env.state_dim))
        inputs = np.zeros((cfg.T, env.input_dim))
        states[0] = x
        for t in range(cfg.T):
            inputs[t] = expert(states[t])
            states[t + 1] = step(env, states[t], inputs[t])
            if np.linalg.norm(states[t + 1]) > divergence_norm:
                raise GenerationError(f"expert rollout diverged at step {t + 1}")
        traj = Trajectory(states=states, inputs=inputs)
        if gain_mode == "dare":
            gains = synthesize_dare_gains(traj, env)
        elif gain_mode == "tv":
            gains, _ = synthesize_tv_gains(traj, env)
        else:
            raise ValueError(f"unknown gain mode {gain_mode!r}")
        trajectories.append(traj)
        gain_sequences.append(gains)
    return trajectories, gain_sequences


# ---------------------------------------------------------------------------
# Action encoding and normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionCodec:
    """Flattens composite actions to vectors and back.

    With gains, each step contributes (u_bar, x_bar, K_bar row-major) for a
    total of tau_chunk * (du + dx + du * dx) coordinates; without gains only
    the raw inputs are encoded and decoding yields zero-gain (open-loop)
    controllers.
    """

    tau_chunk: int
    state_dim: int
    input_dim: int
    gains: bool

    @property
    def step_dim(self) -> int:
        du, dx = self.input_dim, self.state_dim
        return du + dx + du * dx if self.gains else du

    @property
    def dim(self) -> int:
        return self.tau_chunk * self.step_dim

    def encode(self, action: CompositeAction) -> np.ndarray:
        parts = []
        for kappa in action.controllers:
            if self.gains:
                parts.extend([kappa.u_bar, kappa.x_bar, kappa.K_bar.ravel()])
            else:
                parts.append(kappa.u_bar)
        return np.concatenate(parts)

    def decode(self, vec: np.ndarray) -> CompositeAction:
        vec = np.asarray(vec, dtype=float)
        du, dx = self.input_dim, self.state_dim
        controllers = []
        for k in range(self.tau_chunk):
            chunk = vec[k * self.step_dim : (k + 1) * self.step_dim]
            if self.gains:
                controllers.append(
                    PrimitiveController(
                        u_bar=chunk[:du].copy(),
                        x_bar=chunk[du : du + dx].copy(),
                        K_bar=chunk[du + dx :].reshape(du, dx).copy(),
                    )
                )
            else:
                controllers.append(
                    PrimitiveController(u_bar=chunk.copy(), x_bar=np.zeros(dx), K_bar=np.zeros((du, dx)))
                )
        return CompositeAction(controllers=tuple(controllers))


@dataclass
class Normalizer:
    """Per-coordinate affine map onto [-1, 1] fitted from data ranges."""

    lo: np.ndarray
    hi: np.ndarray

    @staticmethod
    def fit(data: np.ndarray) -> "Normalizer":
        data = np.atleast_2d(np.asarray(data, dtype=float))
        return Normalizer(lo=data.min(axis=0), hi=data.max(axis=0))

    def _span(self) -> np.ndarray:
        span = self.hi - self.lo
        return np.where(span < 1e-12, 1.0, span)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(x, dtype=float) - self.lo) / self._span() - 1.0

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) + 1.0) * self._span() / 2.0 + self.lo

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @staticmethod
    def from_dict(obj: dict) -> "Normalizer":
        return Normalizer(lo=np.array(obj["lo"]), hi=np.array(obj["hi"]))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class ExpertDataset:
    """Chunked training records in normalized coordinates.

    ``obs`` rows are observation chunks (noised after augmentation),
    ``actions`` rows are encoded composite actions (never noised),
    ``chunk_index`` and ``traj_id`` track provenance.
    """

    obs: np.ndarray
    actions: np.ndarray
    chunk_index: np.ndarray
    traj_id: np.ndarray
    obs_normalizer: Normalizer
    act_normalizer: Normalizer
    codec: ActionCodec
    cfg: ChunkConfig
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.obs)


def build_dataset(
    trajectories,
    gain_sequences,
    cfg: ChunkConfig,
    gains_mode: bool,
    meta: Optional[dict] = None,
) -> ExpertDataset:
    """Segment expert trajectories into normalized (observation, action) rows."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    dx = trajectories[0].states.shape[1]
    du = trajectories[0].inputs.shape[1]
    codec = ActionCodec(tau_chunk=cfg.tau_chunk, state_dim=dx, input_dim=du, gains=gains_mode)
    obs_rows, act_rows, hs, ids = [], [], [], []
    for tid, (traj, gains) in enumerate(zip(trajectories, gain_sequences)):
        for h, (o, _chunk, action) in enumerate(segment(traj, gains, cfg), start=1):
            obs_rows.append(o.flatten())
            act_rows.append(codec.encode(action))
            hs.append(h)
            ids.append(tid)
    obs = np.array(obs_rows)
    acts = np.array(act_rows)
    obs_norm = Normalizer.fit(obs)
    act_norm = Normalizer.fit(acts)
    return ExpertDataset(
        obs=np.array([obs_norm.normalize(o) for o in obs]),
        actions=np.array([act_norm.normalize(a) for a in acts]),
        chunk_index=np.array(hs, dtype=int),
        traj_id=np.array(ids, dtype=int),
        obs_normalizer=obs_norm,
        act_normalizer=act_norm,
        codec=codec,
        cfg=cfg,
        meta=dict(meta or {}, sigma=0.0, n_aug=1, n_exp=len(trajectories)),
    )


def augment(dataset: ExpertDataset, sigma: float, n_aug: int, rng: np.random.Generator) -> ExpertDataset:
    """Materialize ``n_aug`` noised copies of every record.

    Noise of scale sigma is added to the normalized observation coordinates
    only; action labels are copied bit-exactly.
    """
    if sigma < 0 or n_aug < 1:
        raise ValueError("sigma must be nonnegative and n_aug positive")
    reps = np.repeat(np.arange(len(dataset)), n_aug)
    obs = dataset.obs[reps]
    if sigma > 0:
        obs = obs + sigma * rng.standard_normal(obs.shape)
    return ExpertDataset(
        obs=obs,
        actions=dataset.actions[reps].copy(),
        chunk_index=dataset.chunk_index[reps].copy(),
        traj_id=dataset.traj_id[reps].copy(),
        obs_normalizer=dataset.obs_normalizer,
        act_normalizer=dataset.act_normalizer,
        codec=dataset.codec,
        cfg=dataset.cfg,
        meta=dict(dataset.meta, sigma=sigma, n_aug=n_aug),
    )


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


@dataclass
class SmoothedPolicy:
    """Diffusion policy that re-noises observations at inference time.

    ``sigma`` acts on normalized observation coordinates; zero makes the
    policy identical to the base sampler.
    """

    net: ddpm.ScoreNetwork
    schedule: ddpm.NoiseSchedule
    codec: ActionCodec
    obs_normalizer: Normalizer
    act_normalizer: Normalizer
    cfg: ChunkConfig
    sigma: float

    def with_sigma(self, sigma: float) -> "SmoothedPolicy":
        return replace(self, sigma=sigma)

    def act(self, o: ObservationChunk, h: int, rng: np.random.Generator) -> CompositeAction:
        obs = self.obs_normalizer.normalize(o.flatten())
        if self.sigma > 0:
            obs = obs + self.sigma * rng.standard_normal(obs.shape)
        vec = ddpm.sample(self.net, obs, self.schedule, rng)
        return self.codec.decode(self.act_normalizer.denormalize(vec))

    def __call__(self, o: ObservationChunk, h: int, rng: np.random.Generator) -> CompositeAction:
        return self.act(o, h, rng)


def smoothed_policy_act(policy: SmoothedPolicy, o: ObservationChunk, h: int, rng: np.random.Generator) -> CompositeAction:
    return policy.act(o, h, rng)


def hint_train(
    dataset: ExpertDataset,
    train_cfg: ddpm.TrainConfig,
    schedule: ddpm.NoiseSchedule,
    hidden=ddpm.DEFAULT_HIDDEN,
    fresh_noise_sigma: Optional[float] = None,
) -> SmoothedPolicy:
    """Fit the conditional diffusion model and wrap it as a smoothed policy.

    ``fresh_noise_sigma`` switches to resampling observation noise every
    epoch instead of using the materialized copies in the dataset.
    """
    resampler = None
    if fresh_noise_sigma is not None:
        base = dataset.obs.copy()
        resampler = lambda rng: base + fresh_noise_sigma * rng.standard_normal(base.shape)
    net = ddpm.train(
        dataset.actions,
        dataset.obs,
        train_cfg,
        schedule,
        hidden=hidden,
        observation_resampler=resampler,
    )
    sigma = fresh_noise_sigma if fresh_noise_sigma is not None else float(dataset.meta.get("sigma", 0.0))
    return SmoothedPolicy(
        net=net,
        schedule=schedule,
        codec=dataset.codec,
        obs_normalizer=dataset.obs_normalizer,
        act_normalizer=dataset.act_normalizer,
        cfg=dataset.cfg,
        sigma=sigma,
    )


@dataclass
class NearestNeighborPolicy:
    """Returns the stored action of the closest training observation;
    used as a memorizing baseline in replay checks."""

    dataset: ExpertDataset

    def __call__(self, o: ObservationChunk, h: int, rng: np.random.Generator) -> CompositeAction:
        obs = self.dataset.obs_normalizer.normalize(o.flatten())
        mask = self.dataset.chunk_index == h
        candidates = np.where(mask)[0] if mask.any() else np.arange(len(self.dataset))
        dists = np.linalg.norm(self.dataset.obs[candidates] - obs, axis=1)
        best = candidates[int(np.argmin(dists))]
        return self.dataset.codec.decode(self.dataset.act_normalizer.denormalize(self.dataset.actions[best]))


def expert_replay_policy(trajectories, gain_sequences, cfg: ChunkConfig, traj_index: int = 0):
    """Policy that replays the recorded composite actions of one trajectory."""
    chunks = segment(trajectories[traj_index], gain_sequences[traj_index], cfg)

    def policy(o: ObservationChunk, h: int, rng: np.random.Generator) -> CompositeAction:
        return chunks[h - 1][2]

    return policy


def save_policy(path: str, policy: SmoothedPolicy, seed: int = 0) -> None:
    """Binary score-network checkpoint; the JSON sidecar carries the codec,
    normalizers, chunking, schedule, and inference noise."""
    config = {
        "schedule": {"mode": policy.schedule.mode, "J": policy.schedule.J, "alpha": policy.schedule.alpha},
        "codec": {
            "tau_chunk": policy.codec.tau_chunk,
            "state_dim": policy.codec.state_dim,
            "input_dim": policy.codec.input_dim,
            "gains": policy.codec.gains,
        },
        "chunk": {"tau_chunk": policy.cfg.tau_chunk, "tau_obs": policy.cfg.tau_obs, "T": policy.cfg.T},
        "obs_normalizer": policy.obs_normalizer.to_dict(),
        "act_normalizer": policy.act_normalizer.to_dict(),
        "sigma": policy.sigma,
    }
    ddpm.save_checkpoint(path, policy.net, config, seed)


def load_policy(path: str) -> SmoothedPolicy:
    net, sidecar = ddpm.load_checkpoint(path)
    config = sidecar["config"]
    return SmoothedPolicy(
        net=net,
        schedule=ddpm.NoiseSchedule(**config["schedule"]),
        codec=ActionCodec(**config["codec"]),
        obs_normalizer=Normalizer.from_dict(config["obs_normalizer"]),
        act_normalizer=Normalizer.from_dict(config["act_normalizer"]),
        cfg=ChunkConfig(**config["chunk"]),
        sigma=config["sigma"],
    )


# ---------------------------------------------------------------------------
# Dataset file format: JSON header + binary f64 record block
# ---------------------------------------------------------------------------


def save_dataset(path: str, dataset: ExpertDataset) -> None:
    header = {
        "version": DATASET_VERSION,
        "count": len(dataset),
        "obs_dim": int(dataset.obs.shape[1]),
        "action_dim": int(dataset.actions.shape[1]),
        "chunk": {"tau_chunk": dataset.cfg.tau_chunk, "tau_obs": dataset.cfg.tau_obs, "T": dataset.cfg.T},
        "codec": {
            "tau_chunk": dataset.codec.tau_chunk,
            "state_dim": dataset.codec.state_dim,
            "input_dim": dataset.codec.input_dim,
            "gains": dataset.codec.gains,
        },
        "obs_normalizer": dataset.obs_normalizer.to_dict(),
        "act_normalizer": dataset.act_normalizer.to_dict(),
        "meta": dataset.meta,
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(blob)))
        fh.write(blob)
        for i in range(len(dataset)):
            obs = dataset.obs[i].astype("<f8")
            act = dataset.actions[i].astype("<f8")
            fh.write(struct.pack("<IIII", len(obs), len(act), int(dataset.chunk_index[i]), int(dataset.traj_id[i])))
            fh.write(obs.tobytes())
            fh.write(act.tobytes())


def load_dataset(path: str) -> ExpertDataset:
    with open(path, "rb") as fh:
        if fh.read(4) != DATASET_MAGIC:
            raise ValueError("not a chunked dataset file")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        header = json.loads(fh.read(header_len).decode())
        obs_rows, act_rows, hs, ids = [], [], [], []
        for _ in range(header["count"]):
            no, na, h, tid = struct.unpack("<IIII", fh.read(16))
            obs_rows.append(np.frombuffer(fh.read(8 * no), dtype="<f8").copy())
            act_rows.append(np.frombuffer(fh.read(8 * na), dtype="<f8").copy())
            hs.append(h)
            ids.append(tid)
    cfg = ChunkConfig(**header["chunk"])
    codec = ActionCodec(**header["codec"])
    return ExpertDataset(
        obs=np.array(obs_rows),
        actions=np.array(act_rows),
        chunk_index=np.array(hs, dtype=int),
        traj_id=np.array(ids, dtype=int),
        obs_normalizer=Normalizer.from_dict(header["obs_normalizer"]),
        act_normalizer=Normalizer.from_dict(header["act_normalizer"]),
        codec=codec,
        cfg=cfg,
        meta=header["meta"],
    )
