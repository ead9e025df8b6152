"""Command-line entry point: ``bremen {collect|offline|loop|eval|check-theory|plot}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from .autodiff import load_mlp, mlp_forward, save_mlp
from .config import ConfigError, ExperimentConfig, _coerce, parse_config
from .dynamics import load_ensemble, prediction_error, save_ensemble
from .envs import make_env, mediocre_policy
from .metrics import MetricsWriter, _clean, emit_all_plots, emit_plot
from .orchestrator import (deployment_efficiency_report, evaluate_policy, run_deployment_loop,
                           run_offline)
from .policy import load_policy, save_policy
from .theory import build_bound_report, gaussian_entropy
from .trust_region import gaussian_tv_shared

VERBS = ("collect", "offline", "loop", "eval", "check-theory", "plot")


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "env", None):
        out["env"] = args.env
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    defaults = ExperimentConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (x.strip() for x in item.split("=", 1))
        if not hasattr(defaults, k):
            raise ConfigError(f"unknown config keys: {k}")
        out[k] = _coerce(k, v, getattr(defaults, k))
    return out


def _config(args):
    return parse_config(args.config, profile=args.profile, overrides=_overrides(args))


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else ds.default_data_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _save_run(out: Path, report) -> None:
    _write_json(out / "report.json", report.to_dict())
    _write_json(out / "summary.json", deployment_efficiency_report(report))
    save_policy(out / "policy.ckpt", report.policy)
    save_ensemble(out / "ensemble.ckpt", report.ensemble)
    if report.bc_net is not None:
        save_mlp(out / "bc.ckpt", report.bc_net)
    ds.save(report.dataset, out / "dataset.brds")


def cmd_collect(args) -> int:
    cfg = _config(args)
    env = make_env(cfg.env, horizon=cfg.horizon)
    behavior = mediocre_policy(env, sigma=cfg.sigma)
    if args.scheme == "behavior":
        d = ds.collect(env, lambda s, rng, t: behavior.sample(s, rng), args.size,
                       np.random.default_rng(cfg.seed),
                       metadata={"scheme": "behavior", "behavior_sigma": behavior.sigma})
    else:
        d = ds.synthesize_noisy_dataset(env, behavior, args.scheme, args.size, seed=cfg.seed)
    path = _out_dir(args) / f"{cfg.env}-{args.scheme}-seed{cfg.seed}.brds"
    ds.save(d, path)
    mean, _ = evaluate_policy(make_env(cfg.env, horizon=cfg.horizon), behavior, cfg.eval_episodes, cfg.seed)
    print(json.dumps({"dataset": str(path), "transitions": len(d), "behavior_eval_return": mean}))
    return 0


def cmd_loop(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    with MetricsWriter(out / "metrics.jsonl") as w:
        report = run_deployment_loop(cfg, emit=w)
    _save_run(out, report)
    print(json.dumps(deployment_efficiency_report(report)))
    return 0


def cmd_offline(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    data = ds.load(args.dataset)
    if data.env_id and data.env_id != cfg.env:
        raise ConfigError(f"env: dataset was collected on {data.env_id!r}, config says {cfg.env!r}")
    with MetricsWriter(out / "metrics.jsonl") as w:
        report = run_offline(data, cfg, emit=w)
    _save_run(out, report)
    print(json.dumps(deployment_efficiency_report(report)))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    policy = load_policy(args.policy)
    mean, std = evaluate_policy(make_env(cfg.env, horizon=cfg.horizon), policy, cfg.eval_episodes, cfg.seed)
    print(json.dumps({"mean_return": mean, "std_return": std, "episodes": cfg.eval_episodes}))
    return 0


def cmd_check_theory(args) -> int:
    run = Path(args.run)
    report = json.loads((run / "report.json").read_text())
    cfg = report["config"]
    data = ds.load(run / "dataset.brds")
    if not (run / "bc.ckpt").exists():
        raise FileNotFoundError(f"{run / 'bc.ckpt'}: run has no behaviour-cloned policy (mode without BC)")
    bc_net = load_mlp(run / "bc.ckpt")
    ens = load_ensemble(run / "ensemble.ckpt")
    policy = load_policy(run / "policy.ckpt")
    sigma = data.metadata.get("behavior_sigma")
    h_b = gaussian_entropy(np.full(data.action_dim, sigma)) if sigma is not None else None
    last = report["records"][-1]
    # unit-variance Gaussians around the model and the truth: TV = erf(d / (2*sqrt 2))
    zeros = np.zeros_like(data.s_next)
    model_tv = max(float(np.max(gaussian_tv_shared(prediction_error(ens, i, data.s, data.a, data.s_next),
                                                   zeros, 1.0)))
                   for i in range(ens.k))
    bc_means = np.tanh(mlp_forward(bc_net, data.s))
    policy_tv = float(np.max(gaussian_tv_shared(policy.mean_action(data.s), bc_means, policy.sigma)))
    r_max = float(np.max(np.abs(data.r)))
    bounds = build_bound_report(
        data, bc_net, ens, T=cfg["iterations"], delta=cfg["delta"], gamma=cfg["gamma"],
        r_max=r_max, eta_hat=last["imagined_return"], behavior_entropy=h_b,
        measured_policy_tv=policy_tv, measured_model_tv=model_tv)
    out = bounds.to_dict()
    out["r_max_source"] = "max |reward| in dataset"
    _write_json(run / "bounds.json", out)
    print(json.dumps({"bounds": str(run / "bounds.json"), "eps_pi_bound": bounds.eps_pi_bound,
                      "eps_m_bound": bounds.eps_m_bound}))
    return 0


def cmd_plot(args) -> int:
    out = _out_dir(args)
    if args.scalar:
        paths = [emit_plot(args.metrics, args.scalar, out / f"{args.scalar}.svg")]
    else:
        paths = emit_all_plots(args.metrics, out)
    print(json.dumps({"plots": [str(p) for p in paths]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bremen", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", help="output directory (default: $BREMEN_DATA_DIR or ./data)")
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--seed", type=int)
            sp.add_argument("--profile", choices=("desk", "paper"), default="desk")
            sp.add_argument("--env", choices=("pointmass", "pendulum", "gatewalker"))
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override a single config key (repeatable)")
        return sp

    sp = common(sub.add_parser("collect", help="write an offline dataset"))
    sp.add_argument("--scheme", default="behavior", choices=("behavior",) + ds.NOISE_SCHEMES)
    sp.add_argument("--size", type=int, default=5000)
    sp.set_defaults(func=cmd_collect)

    sp = common(sub.add_parser("offline", help="single offline pass on a dataset file"))
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(func=cmd_offline)

    sp = common(sub.add_parser("loop", help="deployment-efficient loop"))
    sp.set_defaults(func=cmd_loop)

    sp = common(sub.add_parser("eval", help="evaluate a saved policy"))
    sp.add_argument("--policy", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("check-theory", help="bound report for a finished run"), config=False)
    sp.add_argument("--run", required=True, help="directory written by offline or loop")
    sp.set_defaults(func=cmd_check_theory)

    sp = common(sub.add_parser("plot", help="SVG line charts from a metrics file"), config=False)
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--scalar")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # nonzero exit on any module error
        print(f"bremen {args.verb}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
