"""Experiment configuration: desk defaults, paper profile, key=value files."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

MODES = ("bremen", "metrpo_offline", "explicit_kl")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    env: str = "pointmass"
    mode: str = "bremen"
    kl_alpha: float = 0.3
    seed: int = 0
    deployments: int = 5          # I
    batch_size: int = 2000        # B
    iterations: int = 200         # T
    delta: float = 0.05
    gamma: float = 0.99
    lam: float = 0.95
    ensemble_size: int = 5        # K
    sigma: float = 0.1
    sigma_init: float = 0.1
    rollout_length: int = 50      # L
    policy_batch: int = 5000
    horizon: int = 200
    policy_hidden: tuple = (64, 64)
    dynamics_hidden: tuple = (128, 128)
    dynamics_lr: float = 1e-3
    dynamics_batch: int = 256
    dynamics_max_epochs: int = 30
    dynamics_patience: int = 5
    warm_start_dynamics: bool = True
    bc_lr: float = 5e-4
    bc_batch: int = 256
    bc_max_epochs: int = 200
    bc_patience: int = 10
    bc_data: str = "latest"       # "latest" (D) or "all" (D_all)
    eval_episodes: int = 10
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_factor: float = 0.8
    max_backtracks: int = 10
    kl_slack: float = 1.5
    enforce_sup_tv: bool = True
    fvp_max_states: int = 1000
    record_wall_clock: bool = False

    def validate(self) -> "ExperimentConfig":
        from .envs import ENVS

        problems = []

        def need(cond, key, msg):
            if not cond:
                problems.append(f"{key}: {msg} (got {getattr(self, key)!r})")

        need(self.env in ENVS, "env", f"must be one of {sorted(ENVS)}")
        need(self.mode in MODES, "mode", f"must be one of {MODES}")
        need(self.deployments >= 1, "deployments", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.iterations >= 0, "iterations", "must be >= 0")
        need(self.delta > 0, "delta", "must be > 0")
        need(0 < self.gamma < 1, "gamma", "must be in (0, 1)")
        need(0 <= self.lam <= 1, "lam", "must be in [0, 1]")
        need(self.ensemble_size >= 1, "ensemble_size", "must be >= 1")
        need(self.sigma > 0, "sigma", "must be > 0")
        need(self.sigma_init > 0, "sigma_init", "must be > 0")
        need(self.kl_alpha >= 0, "kl_alpha", "must be >= 0")
        need(self.rollout_length >= 1, "rollout_length", "must be >= 1")
        need(self.policy_batch >= 1, "policy_batch", "must be >= 1")
        need(self.horizon >= 1, "horizon", "must be >= 1")
        need(self.eval_episodes >= 1, "eval_episodes", "must be >= 1")
        need(self.bc_data in ("latest", "all"), "bc_data", "must be 'latest' or 'all'")
        need(self.kl_slack >= 1, "kl_slack", "must be >= 1")
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))
        return self

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Large-scale hyperparameter columns, mapped onto the analytic stand-ins.
PAPER_COLUMNS = {
    "pointmass": dict(iterations=2000, deployments=5, rollout_length=250, delta=0.05, lam=0.97),
    "pendulum": dict(iterations=2000, deployments=5, rollout_length=250, delta=0.1, lam=0.95),
    "gatewalker": dict(iterations=2000, deployments=10, rollout_length=1000, delta=0.05, lam=0.95),
}
PAPER_COMMON = dict(
    gamma=0.99, sigma=0.1, sigma_init=0.1, ensemble_size=5, policy_batch=50_000,
    policy_hidden=(200, 200), dynamics_hidden=(1024, 1024), batch_size=200_000,
    horizon=1000, dynamics_lr=1e-3, bc_lr=5e-4,
)


def profile_defaults(profile: str, env: str) -> dict:
    if profile == "desk":
        return {}
    if profile == "paper":
        if env not in PAPER_COLUMNS:
            raise ConfigError(f"env: no paper profile for {env!r}")
        return {**PAPER_COMMON, **PAPER_COLUMNS[env]}
    raise ConfigError(f"profile: unknown profile {profile!r} (desk|paper)")


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw.replace("_", ""))
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace("(", "").replace(")", "").split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` pairs; ``[section]`` headers are allowed and ignored."""
    cp = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    values = {}
    for section in cp.sections():
        for key, val in cp.items(section):
            if key in values:
                raise ConfigError(f"{key}: given more than once")
            values[key] = val
    return values


def parse_config(path=None, profile: str = "desk", overrides: dict | None = None) -> ExperimentConfig:
    """Build a validated config from an optional file, a profile and overrides.

    Precedence: overrides > file > profile > desk defaults. Unknown keys are
    rejected.
    """
    known = {f.name: f for f in fields(ExperimentConfig)}
    defaults = ExperimentConfig()
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = parse_config_text(fh.read())
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    parsed = {k: _coerce(k, v, getattr(defaults, k)) for k, v in raw.items()}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = sorted(set(overrides) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    env = overrides.get("env", parsed.get("env", defaults.env))
    merged = {**profile_defaults(profile, env), **parsed, **overrides}
    return ExperimentConfig(**merged).validate()
