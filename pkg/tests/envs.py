"""Synthetic environments whose optimal action is known by construction."""
from __future__ import annotations

import numpy as np

from clutterlab.agent import EpisodeLog, Patch, TrainConfig, Transition, train_loop

BEST_DIRECTION = 5


def bandit_patch(rng: np.random.Generator) -> Patch:
    return Patch(rng.uniform(0.0, 1.0, (4, 32, 32)), (0, 0), (64, 64))


def bandit_episode(policy, rng: np.random.Generator) -> EpisodeLog:
    """One push; +1 exactly when the chosen direction is ``BEST_DIRECTION``."""
    patch = bandit_patch(rng)
    choice = policy(patch, rng)
    r = 1 if choice.direction_index == BEST_DIRECTION else -1
    ep = EpisodeLog(operations=1, success=r > 0)
    ep.records.append({"step": 0, "reward": r})
    ep.transitions.append(Transition(patch.data, choice, r, np.zeros_like(patch.data), True))
    return ep


def train_bandit(episodes: int = 400, seed: int = 0):
    cfg = TrainConfig(episodes=episodes, seed=seed, target_sync_interval=50)
    return train_loop(cfg, lambda _, policy, rng: bandit_episode(policy, rng), episodes)


def greedy_hit_rate(net, trials: int = 200, seed: int = 123) -> float:
    from clutterlab.agent import GreedyPolicy
    policy = GreedyPolicy(net, 0.0)
    rng = np.random.default_rng(seed)
    hits = sum(policy(bandit_patch(rng), rng).direction_index == BEST_DIRECTION
               for _ in range(trials))
    return hits / trials
