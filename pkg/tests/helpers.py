"""Shared builders for hand-made rollout batches."""
import numpy as np

from bremen.dynamics import RolloutBatch


def make_batch(obs, actions, rewards, ends, terminals=None, policy=None, next_obs=None, timesteps=None):
    n = len(rewards)
    obs = np.asarray(obs, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    ends = np.asarray(ends, dtype=bool)
    if timesteps is None:
        timesteps = np.zeros(n, np.int64)
        for i in range(1, n):
            timesteps[i] = 0 if ends[i - 1] else timesteps[i - 1] + 1
    if policy is not None:
        means = policy.mean_action(obs)
        logp = policy.log_prob(obs, actions)
    else:
        means = np.zeros_like(actions)
        logp = np.zeros(n)
    return RolloutBatch(
        obs=obs, actions=actions, rewards=np.asarray(rewards, dtype=np.float64),
        next_obs=obs.copy() if next_obs is None else np.asarray(next_obs, dtype=np.float64),
        terminals=np.zeros(n, bool) if terminals is None else np.asarray(terminals, dtype=bool),
        ends=ends, timesteps=np.asarray(timesteps), model_idx=np.zeros(n, np.int64),
        log_probs=logp, means=means)


def random_batch(policy, rng, n=64, state_dim=None):
    state_dim = state_dim or policy.net.sizes[0]
    obs = rng.normal(size=(n, state_dim))
    actions = policy.mean_action(obs) + policy.sigma * rng.normal(size=(n, policy.action_dim))
    ends = rng.random(n) < 0.1
    ends[-1] = True
    return make_batch(obs, actions, rng.normal(size=n), ends, policy=policy)
