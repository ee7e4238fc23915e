"""Command-line entry point tying data generation, gain synthesis, training,
rollouts, evaluation, and the verification suites into reproducible runs.

Every run derives its per-stage random streams from one master seed, and
writes a manifest (config hash, per-stage seeds, wall-clock, artifacts)
atomically next to its outputs. Exit codes: 0 success, 2 validation /
usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import tempfile
import time

import numpy as np

from . import __version__, ddpm, evaluation, hint, smoothing
from .chunking import ChunkConfig, observation_at, rollout_chunking_policy
from .dynamics import Trajectory, get_model, make_quadcopter
from .riccati import GainSequence, check_jacobian_stability, synthesize_tv_gains
from .rng import make_rng, seed_stream
from .stability import RegularityParams, estimate_regularity, iss_constants, verify_tiss


class ValidationError(ValueError):
    pass


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def write_json_atomic(path: str, payload) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_manifest(out_dir: str, config, stage_seeds: dict, started: float, artifacts: list) -> None:
    write_json_atomic(
        os.path.join(out_dir, "manifest.json"),
        {
            "config_hash": config_hash(config),
            "version": __version__,
            "stage_seeds": stage_seeds,
            "wall_clock_s": time.time() - started,
            "artifacts": sorted(artifacts),
        },
    )


def _chunk_config(args) -> ChunkConfig:
    return ChunkConfig(tau_chunk=args.tau_chunk, tau_obs=args.tau_obs, T=args.horizon)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = time.time()
    cfg = _chunk_config(args)
    env = make_quadcopter()
    expert = hint.QuadcopterMpcExpert()
    seed = seed_stream(args.seed, "gen-data")
    trajs, gains = hint.generate_expert_data(
        env, expert, args.n_exp, cfg, make_rng(seed), init_halfwidth=args.init_halfwidth
    )
    dataset = hint.build_dataset(trajs, gains, cfg, gains_mode=args.gains == "on")
    dataset = hint.augment(dataset, args.sigma, args.n_aug, make_rng(seed_stream(args.seed, "augment")))
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    hint.save_dataset(args.out, dataset)
    trajs_path = args.out + ".trajs.json"
    with open(trajs_path, "w") as fh:
        json.dump([json.loads(t.to_json("quadcopter2d", env.eta)) for t in trajs], fh)
    write_manifest(out_dir, vars(args), {"gen-data": seed}, started, [args.out, trajs_path])
    print(f"wrote {len(dataset)} records to {args.out}")
    return 0


def cmd_synth_gains(args) -> int:
    started = time.time()
    with open(args.traj) as fh:
        traj, meta = Trajectory.from_json(fh.read())
    model = get_model(meta["model"])
    if args.mode == "tv":
        gains, _ = synthesize_tv_gains(traj, model)
    else:
        gains = hint.synthesize_dare_gains(traj, model)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    write_json_atomic(args.out, [np.asarray(K).tolist() for K in gains.gains])
    write_manifest(out_dir, vars(args), {}, started, [args.out])
    print(f"wrote {len(gains)} gains to {args.out}")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    dataset = hint.load_dataset(args.data)
    schedule = ddpm.NoiseSchedule(mode=args.schedule, J=args.steps, alpha=args.alpha)
    train_cfg = ddpm.TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        warmup_steps=args.warmup,
        seed=seed_stream(args.seed, "train"),
    )
    policy = hint.hint_train(dataset, train_cfg, schedule)
    if args.sigma is not None:
        policy = policy.with_sigma(args.sigma)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    hint.save_policy(args.out, policy, seed=args.seed)
    write_manifest(out_dir, vars(args), {"train": train_cfg.seed}, started, [args.out, args.out + ".json"])
    print(f"trained policy saved to {args.out}")
    return 0


def cmd_rollout(args) -> int:
    started = time.time()
    policy = hint.load_policy(args.policy)
    if args.sigma is not None:
        policy = policy.with_sigma(args.sigma)
    env = make_quadcopter()
    rewards = []
    rows = []
    for i in range(args.n):
        rng = make_rng(seed_stream(args.seed, f"rollout-{i}"))
        x1 = rng.uniform(-args.init_halfwidth, args.init_halfwidth, size=env.state_dim)
        traj, _ = rollout_chunking_policy(policy, env, x1, policy.cfg, rng)
        reward = evaluation.quadcopter_reward(traj)
        rewards.append(reward)
        rows.append({"rollout": i, "reward": reward})
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    write_json_atomic(args.out, {"rewards": rows, "mean_reward": float(np.mean(rewards)), "std": float(np.std(rewards))})
    write_manifest(out_dir, vars(args), {"rollout": args.seed}, started, [args.out])
    print(f"mean reward {np.mean(rewards):.4f} over {args.n} rollouts")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    dataset = hint.load_dataset(args.expert)
    policy = hint.load_policy(args.policy)
    env = make_quadcopter()
    expert = hint.QuadcopterMpcExpert()
    cfg = policy.cfg
    expert_rollouts, policy_rollouts = [], []
    for i in range(args.n):
        rng = make_rng(seed_stream(args.seed, f"eval-init-{i}"))
        x1 = rng.uniform(-1.0, 1.0, size=env.state_dim)
        exp_trajs, _ = hint.generate_expert_data(
            env, expert, 1, cfg, make_rng(seed_stream(args.seed, f"eval-exp-{i}")), init_halfwidth=0.0
        )
        exp_traj = exp_trajs[0]
        # matched initial states: re-roll the expert from the shared x1
        states = np.zeros_like(exp_traj.states)
        inputs = np.zeros_like(exp_traj.inputs)
        states[0] = x1
        for t in range(cfg.T):
            inputs[t] = expert(states[t])
            states[t + 1] = states[t] + env.eta * env.drift(states[t], inputs[t])
        expert_rollouts.append(Trajectory(states=states, inputs=inputs))
        traj, _ = rollout_chunking_policy(policy, env, x1, cfg, make_rng(seed_stream(args.seed, f"eval-pol-{i}")))
        policy_rollouts.append(traj)
    report = evaluation.empirical_marginal_loss(expert_rollouts, policy_rollouts, args.eps)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    write_json_atomic(
        args.out,
        {
            "epsilon": report.epsilon,
            "marginal": report.marginal,
            "joint": report.joint,
            "final_state": report.final_state,
            "per_step": report.per_step.tolist(),
            "n": report.n_samples,
            "dataset_records": len(dataset),
        },
    )
    write_manifest(out_dir, vars(args), {"eval": args.seed}, started, [args.out])
    print(f"marginal loss {report.marginal:.4f} joint {report.joint:.4f}")
    return 0


def cmd_verify_stability(args) -> int:
    started = time.time()
    model = get_model(args.model)
    if model.name != "quadcopter2d":
        raise ValidationError("stability verification currently targets quadcopter2d")
    cfg = ChunkConfig(tau_chunk=args.horizon, tau_obs=1, T=args.horizon)
    expert = hint.QuadcopterMpcExpert()
    rng = make_rng(seed_stream(args.seed, "verify-traj"))
    trajs, _ = hint.generate_expert_data(model, expert, 1, cfg, rng, init_halfwidth=0.5, gain_mode="tv")
    traj = trajs[0]
    gains, Ps = synthesize_tv_gains(traj, model)
    from .linalg import opnorm
    from .chunking import controllers_from_gains

    L_fp = max(opnorm(P) for P in Ps)
    reg = estimate_regularity(model, traj, R_dyn=0.5, rng=make_rng(seed_stream(args.seed, "verify-reg")))
    B_stab = math.sqrt(5) * reg.L_dyn * L_fp
    L_stab = 2 * L_fp
    R_K = 4.0 / 3.0 * L_fp * reg.L_dyn
    cert = check_jacobian_stability(traj, model, gains, R_K=R_K, B_stab=B_stab, L_stab=L_stab)
    params = RegularityParams(
        R_dyn=reg.R_dyn, L_dyn=reg.L_dyn, M_dyn=reg.M_dyn, R_K=R_K, B_stab=B_stab, L_stab=L_stab, eta=model.eta
    )
    moduli = iss_constants(params)
    report = verify_tiss(
        model,
        controllers_from_gains(traj, gains),
        traj.states[0],
        moduli,
        trials=args.trials,
        rng=make_rng(seed_stream(args.seed, "verify-tiss")),
    )
    payload = {
        "certificate": {
            "B_stab": cert.B_stab,
            "L_stab": cert.L_stab,
            "R_K": cert.R_K,
            "max_violation": cert.max_violation,
            "valid": cert.valid,
        },
        "tiss": {"trials": report.trials, "min_slack": report.min_slack, "passed": report.passed},
        "estimates": {"L_dyn": reg.L_dyn, "M_dyn": reg.M_dyn, "L_fp": L_fp},
    }
    out_dir = os.path.dirname(os.path.abspath(args.report)) or "."
    write_json_atomic(args.report, payload)
    write_manifest(out_dir, vars(args), {"verify": args.seed}, started, [args.report])
    print(f"certificate valid: {cert.valid}; t-ISS pass: {report.passed} (min slack {report.min_slack:.3e})")
    return 0


def cmd_replica_check(args) -> int:
    started = time.time()
    rng = make_rng(seed_stream(args.seed, f"replica-{args.case}"))
    if args.case == "dec-chain":
        payload = _dec_chain_report()
    elif args.case == "fixed-point":
        gaps = []
        for i in range(20):
            k = int(rng.integers(2, 6))
            atoms = np.sort(rng.uniform(-1, 1, size=k))
            w = rng.uniform(0.1, 1.0, size=k)
            prior = smoothing.DiscreteDistribution(atoms=atoms, weights=w / w.sum())
            Q = smoothing.replica_kernel_discrete(prior, smoothing.GaussianNoise(sigma=float(rng.uniform(0.3, 1.5))))
            gaps.append(float(np.abs(prior.weights @ Q - prior.weights).sum()))
        payload = {"max_l1_gap": max(gaps), "passed": max(gaps) < 1e-6}
    elif args.case == "tvc":
        grid = np.linspace(0.1, 3.0, 30)
        rows = [
            {"u_over_sigma": float(r), "exact_tv": smoothing.gaussian_tv_1d(r, 1.0), "bound": smoothing.tvc_bound(r, 1.0, 1)}
            for r in grid
        ]
        payload = {"rows": rows, "passed": all(row["exact_tv"] <= row["bound"] for row in rows)}
    else:  # concentration
        rows = []
        for d in (1, 6, 20):
            for p in (0.1, 0.01):
                radius = smoothing.gaussian_norm_quantile(d, 1.0, p)
                draws = rng.standard_normal((200_000, d))
                rate = float(np.mean(np.linalg.norm(draws, axis=1) > radius))
                rows.append({"d": d, "p": p, "radius": radius, "exceedance": rate, "ok": rate <= p})
        payload = {"rows": rows, "passed": all(r["ok"] for r in rows)}
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    write_json_atomic(args.out, payload)
    write_manifest(out_dir, vars(args), {"replica-check": args.seed}, started, [args.out])
    print(f"{args.case}: {'ok' if payload.get('passed', True) else 'FAILED'}")
    return 0


def _dec_chain_report() -> dict:
    sigma = 1.0
    prior = smoothing.DiscreteDistribution(atoms=[sigma, -sigma], weights=[0.75, 0.25])

    def likelihood(diff):
        d = abs(float(diff))
        if d < 1e-9:
            return 0.75
        if abs(d - 2 * sigma) < 1e-9:
            return 0.25
        return 0.0

    q_plus = smoothing.discrete_deconvolution(prior, likelihood, sigma).weights[0]
    q_minus = smoothing.discrete_deconvolution(prior, likelihood, -sigma).weights[0]
    chain = smoothing.deconvolution_chain(prior, likelihood, 30)
    return {
        "posterior_plus_given_plus": float(q_plus),
        "posterior_plus_given_minus": float(q_minus),
        "chain_minus_mass": [float(d.weights[1]) for d in chain],
        "limit_minus_mass": float(chain[-1].weights[1]),
    }


def cmd_lowerbounds(args) -> int:
    started = time.time()
    rng = make_rng(seed_stream(args.seed, f"lowerbounds-{args.case}"))
    if args.case == "sharpness":
        rows = []
        for ratio in (0.1, 0.3, 0.6):
            for p in (0.05, 0.2, 0.5):
                for H in (2, 5, 10):
                    res = evaluation.simulate_sharpness_lb(ratio, p, 1.0, H, args.trials, rng)
                    rows.append(
                        {"eps_over_sigma": ratio, "p": p, "H": H, "exact": res.exact, "estimate": res.estimate}
                    )
        payload = {"rows": rows}
    elif args.case == "joint":
        res = evaluation.simulate_replica_joint_gap(0.5, 1.0, args.horizon, args.trials, rng)
        payload = {
            "flip_estimate": res.flip_estimate,
            "flip_bound": res.flip_bound,
            "single_step_flip": res.flip_prob_single,
            "max_marginal_tv": float(res.marginal_tv.max()),
        }
    else:  # dec-chain
        payload = _dec_chain_report()
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    write_json_atomic(args.out, payload)
    write_manifest(out_dir, vars(args), {"lowerbounds": args.seed}, started, [args.out])
    print(f"lowerbounds {args.case} written to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    started = time.time()
    with open(args.config) as fh:
        config = json.load(fh)
    sigmas = config.get("sigmas", [0.0, 0.05])
    n_exps = config.get("n_exps", [3])
    gains_options = config.get("gains", [True, False])
    seeds = config.get("seeds", [0, 1, 2])
    cfg = ChunkConfig(
        tau_chunk=config.get("tau_chunk", 4),
        tau_obs=config.get("tau_obs", 2),
        T=config.get("horizon", 40),
    )
    train_overrides = config.get("train", {})
    n_eval = config.get("n_eval", 5)
    env = make_quadcopter()
    expert = hint.QuadcopterMpcExpert()
    schedule = ddpm.NoiseSchedule(J=config.get("ddpm_steps", 100), alpha=config.get("ddpm_alpha", 0.04))
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for sigma in sigmas:
        for n_exp in n_exps:
            for gains_mode in gains_options:
                rewards = []
                for seed in seeds:
                    master = seed_stream(args.seed, f"sweep-{sigma}-{n_exp}-{gains_mode}-{seed}")
                    trajs, gains = hint.generate_expert_data(
                        env, expert, n_exp, cfg, make_rng(seed_stream(master, "gen"))
                    )
                    dataset = hint.build_dataset(trajs, gains, cfg, gains_mode=gains_mode)
                    dataset = hint.augment(
                        dataset, sigma, config.get("n_aug", 10 if sigma > 0 else 1), make_rng(seed_stream(master, "aug"))
                    )
                    train_cfg = ddpm.TrainConfig(seed=seed_stream(master, "train"), **train_overrides)
                    policy = hint.hint_train(dataset, train_cfg, schedule)
                    for i in range(n_eval):
                        rng = make_rng(seed_stream(master, f"eval-{i}"))
                        x1 = rng.uniform(-1, 1, size=env.state_dim)
                        traj, _ = rollout_chunking_policy(policy, env, x1, cfg, rng)
                        rewards.append(evaluation.quadcopter_reward(traj))
                rows.append(
                    {
                        "sigma": sigma,
                        "n_exp": n_exp,
                        "gains": gains_mode,
                        "mean_reward": float(np.mean(rewards)),
                        "std": float(np.std(rewards)),
                    }
                )
                print(f"sigma={sigma} n_exp={n_exp} gains={gains_mode}: reward {rows[-1]['mean_reward']:.4f}")
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["sigma", "n_exp", "gains", "mean_reward", "std"])
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(out_dir, {"config": config, "seed": args.seed}, {"sweep": args.seed}, started, [args.out])
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffstab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="roll the MPC expert and build a chunked dataset")
    p.add_argument("--n-exp", type=int, default=3)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--n-aug", type=int, default=1)
    p.add_argument("--gains", choices=["on", "off"], default="on")
    p.add_argument("--tau-chunk", type=int, default=4)
    p.add_argument("--tau-obs", type=int, default=2)
    p.add_argument("--horizon", type=int, default=40)
    p.add_argument("--init-halfwidth", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("synth-gains", help="synthesize stabilizing gains along a trajectory")
    p.add_argument("--traj", required=True)
    p.add_argument("--mode", choices=["tv", "dare"], default="tv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gains)

    p = sub.add_parser("train", help="train the diffusion policy on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--warmup", type=int, default=500)
    p.add_argument("--schedule", choices=["uniform-alpha", "squared-cosine"], default="uniform-alpha")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--alpha", type=float, default=0.04)
    p.add_argument("--sigma", type=float, default=None, help="override inference noise")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="roll a trained policy and score rewards")
    p.add_argument("--policy", required=True)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--init-halfwidth", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="empirical imitation loss of a policy against the expert")
    p.add_argument("--expert", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-stability", help="stability certificate + incremental-stability check")
    p.add_argument("--model", default="quadcopter2d")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--horizon", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_verify_stability)

    p = sub.add_parser("replica-check", help="deconvolution/replica kernel checks")
    p.add_argument("--case", choices=["dec-chain", "fixed-point", "tvc", "concentration"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replica_check)

    p = sub.add_parser("lowerbounds", help="lower-bound chain simulations")
    p.add_argument("--case", choices=["sharpness", "joint", "dec-chain"], required=True)
    p.add_argument("--trials", type=int, default=20_000)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lowerbounds)

    p = sub.add_parser("sweep", help="sigma x N grid of training runs, CSV summary")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValidationError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
