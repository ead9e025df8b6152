"""Deployment-efficient loop and offline mode."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import ExperimentConfig
from .dataset import Dataset, append_batch, collect
from .dynamics import DynamicsEnsemble, EnsembleConfig, imaginary_rollout, train_ensemble
from .envs import Env, make_env
from .policy import (GaussianMlpPolicy, act, behavior_clone, init_target_policy, mean_kl,
                     random_policy)
from .trust_region import (TrpoConfig, compute_gae, explicit_kl_advantage, fit_value_fn,
                           gaussian_tv_shared, normalize, trpo_step)

# stream tags for per-purpose random generators
_COLLECT, _DYNAMICS, _BC, _INIT, _ROLLOUT, _EVAL = range(1, 7)


class DeploymentError(RuntimeError):
    def __init__(self, deployment: int, cause: Exception):
        super().__init__(f"deployment {deployment}: {type(cause).__name__}: {cause}")
        self.deployment = deployment
        self.cause = cause


def stream(seed: int, deployment: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(deployment), int(tag)])


def evaluate_policy(env: Env, policy, episodes: int, seed) -> tuple[float, float]:
    """Undiscounted returns of the deterministic mean-action policy."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    s = env.reset_batch(episodes, seed)
    returns = np.zeros(episodes)
    alive = np.arange(episodes)
    for _ in range(env.horizon):
        a = np.atleast_2d(policy.mean_action(s))
        s_next, r, term = env.step_batch(s, a)
        returns[alive] += r
        keep = ~term
        s, alive = s_next[keep], alive[keep]
        if alive.size == 0:
            break
    return float(returns.mean()), float(returns.std())


@dataclass
class DeploymentRecord:
    deployment: int
    collection_policy_hash: str
    cumulative_samples: int
    eval_mean: float
    eval_std: float
    dynamics_train_mse: list
    dynamics_val_mse: list
    bc_loss: float | None
    bc_epochs: int | None
    bc_val_mse: float | None
    trpo: list
    kl_to_deployed: float
    cumulative_tv: float
    imagined_return: float
    rollout_incidents: int


@dataclass
class DeploymentReport:
    run_id: str
    config: dict
    initial_eval: tuple
    records: list = field(default_factory=list)
    collection_steps: int = 0
    eval_steps: int = 0
    optimization_env_steps: int = 0
    policy: GaussianMlpPolicy | None = None
    ensemble: DynamicsEnsemble | None = None
    bc_net: object = None
    dataset: Dataset | None = None

    @property
    def deployments(self) -> int:
        return len(self.records)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "initial_eval": list(self.initial_eval),
            "collection_steps": self.collection_steps,
            "eval_steps": self.eval_steps,
            "optimization_env_steps": self.optimization_env_steps,
            "records": [asdict(r) for r in self.records],
        }


def run_id_for(cfg: ExperimentConfig) -> str:
    return f"{cfg.env}-{cfg.mode}-seed{cfg.seed}"


def _ensemble_cfg(cfg, env):
    return EnsembleConfig(k=cfg.ensemble_size, hidden=tuple(cfg.dynamics_hidden), lr=cfg.dynamics_lr,
                          batch_size=cfg.dynamics_batch, max_epochs=cfg.dynamics_max_epochs,
                          patience=cfg.dynamics_patience, periodic_dims=tuple(env.periodic_dims))


def _trpo_cfg(cfg):
    return TrpoConfig(cg_iters=cfg.cg_iters, cg_damping=cfg.cg_damping,
                      backtrack_factor=cfg.backtrack_factor, max_backtracks=cfg.max_backtracks,
                      kl_slack=cfg.kl_slack, enforce_sup_tv=cfg.enforce_sup_tv,
                      fvp_max_states=cfg.fvp_max_states)


class _Emitter:
    def __init__(self, cfg, emit):
        self.emit = emit
        self.run_id = run_id_for(cfg)
        self.clock = cfg.record_wall_clock
        self.t0 = time.perf_counter()

    def __call__(self, deployment, iteration, scalars):
        if self.emit is None:
            return
        self.emit({
            "run_id": self.run_id,
            "deployment": deployment,
            "iteration": iteration,
            "wall_clock": round(time.perf_counter() - self.t0, 3) if self.clock else None,
            "scalars": scalars,
        })


def _offline_phase(env, model_data: Dataset, bc_data: Dataset, cfg: ExperimentConfig,
                   deployment: int, deployed: GaussianMlpPolicy | None,
                   init_ensemble: DynamicsEnsemble | None, emitter: _Emitter):
    """Model fit, behaviour cloning, (re)initialisation and T trust-region steps."""
    ens = train_ensemble(model_data, _ensemble_cfg(cfg, env), seed=stream(cfg.seed, deployment, _DYNAMICS).integers(2**63),
                         init=init_ensemble if cfg.warm_start_dynamics else None)
    bc_net, bc_rep = None, None
    if cfg.mode in ("bremen", "explicit_kl"):
        bc_net, bc_rep = behavior_clone(
            bc_data, hidden=cfg.policy_hidden, lr=cfg.bc_lr, batch_size=cfg.bc_batch,
            max_epochs=cfg.bc_max_epochs, patience=cfg.bc_patience,
            seed=stream(cfg.seed, deployment, _BC).integers(2**63))
    if cfg.mode == "bremen":
        policy = init_target_policy(bc_net, cfg.sigma_init)
    else:
        policy = random_policy(model_data.state_dim, model_data.action_dim, cfg.policy_hidden,
                               cfg.sigma_init, stream(cfg.seed, deployment, _INIT))
    bc_policy = GaussianMlpPolicy(bc_net, cfg.sigma) if bc_net is not None else None
    policy0 = policy
    trpo_cfg = _trpo_cfg(cfg)
    rng = stream(cfg.seed, deployment, _ROLLOUT)
    reports = []
    incidents = 0
    imagined = float("nan")
    for k in range(1, cfg.iterations + 1):
        rollouts = imaginary_rollout(ens, policy, model_data.s, cfg.rollout_length, env, rng,
                                     min_steps=cfg.policy_batch)
        incidents += rollouts.n_incidents
        imagined = float(np.mean(rollouts.trajectory_returns(cfg.gamma)))
        vf = fit_value_fn(rollouts, cfg.gamma)
        adv = compute_gae(rollouts, vf, cfg.gamma, cfg.lam)
        a = adv.advantages
        if cfg.mode == "explicit_kl":
            a = normalize(explicit_kl_advantage(adv.raw, policy, bc_policy, rollouts.obs, cfg.kl_alpha))
        policy, rep = trpo_step(policy, rollouts, a, cfg.delta, trpo_cfg)
        reports.append(rep)
        emitter(deployment, k, {
            "imagined_return": imagined,
            "kl": rep.mean_kl,
            "max_tv": rep.max_tv,
            "surrogate_improvement": rep.surrogate_improvement,
            "backtracks": rep.backtracks,
            "cg_residual": rep.cg_residual,
            "accepted": int(rep.accepted),
        })
    states = bc_data.s
    kl_dep = mean_kl(policy, deployed, states) if deployed is not None else float("nan")
    drift = float(np.max(gaussian_tv_shared(policy.mean_action(states), policy0.mean_action(states),
                                            policy.sigma)))
    return policy, ens, bc_net, bc_rep, reports, kl_dep, drift, imagined, incidents


def _record(deployment, hash_, samples, ev, ens, bc_rep, reports, kl_dep, drift, imagined, inc):
    return DeploymentRecord(
        deployment, hash_, samples, ev[0], ev[1], list(ens.train_mse), list(ens.val_mse),
        None if bc_rep is None else bc_rep.loss, None if bc_rep is None else bc_rep.epochs,
        None if bc_rep is None else bc_rep.val_mse, [asdict(r) for r in reports],
        kl_dep, drift, imagined, inc)


def _summary_scalars(rec: DeploymentRecord) -> dict:
    return {
        "eval_return": rec.eval_mean,
        "eval_std": rec.eval_std,
        "samples": rec.cumulative_samples,
        "dynamics_val_mse": float(np.mean(rec.dynamics_val_mse)),
        "bc_loss": rec.bc_loss,
        "kl_to_deployed": rec.kl_to_deployed,
        "cumulative_tv": rec.cumulative_tv,
        "accept_rate": float(np.mean([r["accepted"] for r in rec.trpo])) if rec.trpo else None,
    }


def run_deployment_loop(cfg: ExperimentConfig, emit=None, env: Env | None = None) -> DeploymentReport:
    """Algorithm-1 style loop: I deployments of B real transitions each."""
    cfg.validate()
    env = env or make_env(cfg.env, horizon=cfg.horizon)
    emitter = _Emitter(cfg, emit)
    eval_seed = stream(cfg.seed, 0, _EVAL).integers(2**63)
    policy = random_policy(env.state_dim, env.action_dim, cfg.policy_hidden, cfg.sigma,
                           stream(cfg.seed, 0, _INIT))
    steps0 = env.n_steps
    init_eval = evaluate_policy(env, policy, cfg.eval_episodes, eval_seed)
    report = DeploymentReport(run_id_for(cfg), cfg.to_dict(), init_eval)
    report.eval_steps += env.n_steps - steps0
    emitter(0, 0, {"eval_return": init_eval[0], "eval_std": init_eval[1], "samples": 0})

    d_all = Dataset.empty(env.state_dim, env.action_dim, env.env_id)
    ensemble = None
    for i in range(1, cfg.deployments + 1):
        try:
            deployed = policy
            before = env.n_steps
            batch = collect(env, lambda s, rng, t: act(deployed, s, rng)[0], cfg.batch_size,
                            stream(cfg.seed, i, _COLLECT), deployment_index=i,
                            metadata={"policy_hash": deployed.param_hash(), "seed": cfg.seed})
            report.collection_steps += env.n_steps - before
            d_all, d = append_batch(d_all, batch)
            bc_data = d if cfg.bc_data == "latest" else d_all
            before = env.n_steps
            policy, ensemble, bc_net, bc_rep, reports, kl_dep, drift, imagined, inc = _offline_phase(
                env, d_all, bc_data, cfg, i, deployed, ensemble, emitter)
            report.optimization_env_steps += env.n_steps - before
            before = env.n_steps
            ev = evaluate_policy(env, policy, cfg.eval_episodes, eval_seed)
            report.eval_steps += env.n_steps - before
        except Exception as exc:
            raise DeploymentError(i, exc) from exc
        rec = _record(i, deployed.param_hash(), len(d_all), ev, ensemble, bc_rep, reports,
                      kl_dep, drift, imagined, inc)
        report.records.append(rec)
        emitter(i, cfg.iterations + 1, _summary_scalars(rec))
    report.policy, report.ensemble, report.bc_net = policy, ensemble, bc_net
    report.dataset = d_all
    return report


def run_offline(dataset: Dataset, cfg: ExperimentConfig, emit=None, env: Env | None = None,
                bc_dataset: Dataset | None = None, init_ensemble: DynamicsEnsemble | None = None,
                deployment: int = 1, deployed: GaussianMlpPolicy | None = None) -> DeploymentReport:
    """Single offline pass on a fixed dataset.

    ``bc_dataset`` and ``init_ensemble`` let a caller chain offline passes
    exactly the way the deployment loop does.
    """
    if len(dataset) == 0:
        raise ValueError("offline mode needs a non-empty dataset")
    cfg.validate()
    env = env or make_env(cfg.env, horizon=cfg.horizon)
    emitter = _Emitter(cfg, emit)
    bc_data = dataset if bc_dataset is None else bc_dataset
    before = env.n_steps
    try:
        policy, ens, bc_net, bc_rep, reports, kl_dep, drift, imagined, inc = _offline_phase(
            env, dataset, bc_data, cfg, deployment, deployed, init_ensemble, emitter)
    except Exception as exc:
        raise DeploymentError(deployment, exc) from exc
    opt_steps = env.n_steps - before
    eval_seed = stream(cfg.seed, 0, _EVAL).integers(2**63)
    before = env.n_steps
    ev = evaluate_policy(env, policy, cfg.eval_episodes, eval_seed)
    report = DeploymentReport(run_id_for(cfg), cfg.to_dict(), (float("nan"), float("nan")))
    report.eval_steps = env.n_steps - before
    report.optimization_env_steps = opt_steps
    rec = _record(deployment, dataset.metadata.get("policy_hash", "offline"), len(dataset), ev, ens,
                  bc_rep, reports, kl_dep, drift, imagined, inc)
    report.records.append(rec)
    emitter(deployment, cfg.iterations + 1, _summary_scalars(rec))
    report.policy, report.ensemble, report.bc_net = policy, ens, bc_net
    report.dataset = dataset
    return report


def deployment_efficiency_report(report: DeploymentReport) -> dict:
    curve = [(0, report.initial_eval[0])] + [
        (r.cumulative_samples, r.eval_mean) for r in report.records
    ]
    return {
        "run_id": report.run_id,
        "deployments": report.deployments,
        "distinct_collection_policies": len({r.collection_policy_hash for r in report.records}),
        "total_samples": report.records[-1].cumulative_samples if report.records else 0,
        "final_return": report.records[-1].eval_mean if report.records else report.initial_eval[0],
        "curve": curve,
    }
