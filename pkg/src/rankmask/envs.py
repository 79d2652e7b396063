"""Generalized XOR game and the evaluation harness.

The game is a single step: n players pick among k actions and the team gets
reward 1 iff all picks are pairwise distinct. Observations carry no
distinguishing information (a constant feature per agent); all behavioral
differentiation must come from the broadcast random scalars.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from . import tensor as tc
from .attention import PolicyNet
from .protocol import xor_reward

EVAL_CSV_HEADER = "n_train,k_train,n_eval,k_eval,mode,episodes,success_rate,seed"
EVAL_MODES = ("greedy", "sampled")


@dataclass(frozen=True)
class EvalReport:
    n_train: int
    k_train: int
    n_eval: int
    k_eval: int
    mode: str
    episodes: int
    success_rate: float
    seed: int

    def csv_row(self) -> str:
        return (f"{self.n_train},{self.k_train},{self.n_eval},{self.k_eval},"
                f"{self.mode},{self.episodes},{self.success_rate:.6f},{self.seed}")


class XorEnv:
    """n players, k actions, episode length 1, team reward shared by all."""

    def __init__(self, n: int, k: int, k_max: int = 8):
        if n < 1 or k < 1:
            raise ValueError("need n >= 1 players and k >= 1 actions")
        if k > k_max:
            raise ValueError(f"k={k} exceeds the one-hot task width k_max={k_max}")
        self.n = n
        self.k = k
        self.k_max = k_max

    def agent_features(self) -> np.ndarray:
        return np.ones((self.n, 1), dtype=np.float32)

    def task_features(self) -> np.ndarray:
        return np.eye(self.k_max, dtype=np.float32)[: self.k]

    def step(self, actions) -> tuple[float, bool]:
        return float(xor_reward(actions, self.k)), True


class Policy(Protocol):
    def action_logits(self, env: XorEnv, r: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray: ...


class PolicyNetPolicy:
    """Evaluation adapter around a PolicyNet.

    strip_scalars zeroes the broadcast scalars before the forward pass,
    which turns any variant into a fully deterministic symmetric policy
    (the behavior of a shared policy with no randomness source).
    """

    def __init__(self, net: PolicyNet, strip_scalars: bool = False):
        self.net = net
        self.strip_scalars = strip_scalars

    def action_logits(self, env: XorEnv, r: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if env.k_max != self.net.config.task_feat_dim:
            raise tc.ShapeError(
                f"task feature width mismatch: env k_max={env.k_max}, "
                f"network expects {self.net.config.task_feat_dim}"
            )
        rr = np.zeros_like(r) if self.strip_scalars else r
        with tc.no_grad():
            logits, _ = self.net.forward(env.agent_features(), env.task_features(), rr,
                                         rng=rng, include_value=False)
        return logits.data


class UniformRandomPolicy:
    def action_logits(self, env: XorEnv, r: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.zeros((env.n, env.k), dtype=np.float32)


class RankOraclePolicy:
    """action_i = rank of r_i among the broadcast scalars; the one-round
    protocol realized directly, so it wins whenever n <= k and all scalars
    are distinct."""

    def action_logits(self, env: XorEnv, r: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        ranks = np.sum(r[None, :] < r[:, None], axis=1)
        logits = np.zeros((env.n, env.k), dtype=np.float32)
        logits[np.arange(env.n), np.minimum(ranks, env.k - 1)] = 50.0
        return logits


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sample_categorical_rows(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    probs = _softmax_rows(logits.astype(np.float64))
    cum = np.cumsum(probs, axis=1)
    u = rng.random((logits.shape[0], 1))
    return np.minimum((cum < u).sum(axis=1), logits.shape[1] - 1)


def greedy_rows(logits: np.ndarray) -> np.ndarray:
    return logits.argmax(axis=1)


def evaluate(policy: Policy, env: XorEnv, mode: str, episodes: int, seed: int,
             n_train: Optional[int] = None, k_train: Optional[int] = None) -> EvalReport:
    """Run fresh single-step episodes; greedy takes per-agent argmax,
    sampled draws from the per-agent categorical. Deterministic given seed."""
    if mode not in EVAL_MODES:
        raise ValueError(f"mode must be one of {EVAL_MODES}")
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    wins = 0.0
    for _ in range(episodes):
        r = rng.random(env.n)
        logits = policy.action_logits(env, r, rng)
        if mode == "greedy":
            actions = greedy_rows(logits)
        else:
            actions = sample_categorical_rows(logits, rng)
        reward, _ = env.step(actions)
        wins += reward
    return EvalReport(
        n_train=env.n if n_train is None else n_train,
        k_train=env.k if k_train is None else k_train,
        n_eval=env.n, k_eval=env.k, mode=mode, episodes=episodes,
        success_rate=wins / episodes, seed=seed,
    )


def cross_config_evaluate(policy: Policy, n_train: int, k_train: int, env_eval: XorEnv,
                          mode: str, episodes: int, seed: int) -> EvalReport:
    """Evaluate a policy trained at (n_train, k_train) on a different
    configuration without retraining; the shared one-hot task scheme must
    cover k_eval."""
    return evaluate(policy, env_eval, mode, episodes, seed, n_train=n_train, k_train=k_train)
