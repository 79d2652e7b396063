"""Minimal PPO-clip trainer: shared policy, common critic, team reward.

Episodes are single-step, so returns equal rewards and there is no
bootstrapping; the rollout stores each transition's broadcast scalars and
drawn open-column sets so the update recomputes log-probs under exactly the
behavior policy's masks (ratio is 1 on the first pass).
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as tc
from .attention import VARIANTS, PolicyConfig, PolicyNet, open_columns_for
from .checkpoint import save_checkpoint
from .envs import PolicyNetPolicy, XorEnv, evaluate

RUNLOG_CSV_HEADER = ("update,timesteps,mean_reward,policy_loss,value_loss,"
                     "entropy,approx_kl,grad_norm,eval_greedy,eval_sampled")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    n: int
    k: int
    variant: str = "structured"
    seed: int = 0
    num_envs: int = 64
    n_steps: int = 2
    batch_size: int = 128
    n_epochs: int = 1
    gamma: float = 0.99
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    target_kl: float = 0.25
    max_grad_norm: float = 10.0
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    total_timesteps: int = 50000
    clip_eps: float = 0.2
    d: int = 64
    n_blocks: int = 3
    p_drop: float = 0.5
    k_max: int = 8
    head_scale: float = 1.0
    detach_critic_trunk: bool = True
    eval_every: int = 50
    eval_episodes: int = 2000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got '{self.variant}'")
        for name in ("n", "k", "num_envs", "n_steps", "batch_size", "n_epochs",
                     "total_timesteps", "d", "n_blocks", "k_max", "eval_every",
                     "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"config key '{name}' must be >= 1")
        if self.rollout_size % self.batch_size != 0:
            raise ConfigError(
                f"batch_size={self.batch_size} must divide num_envs*n_steps={self.rollout_size}"
            )
        if self.k > self.k_max:
            raise ConfigError(f"k={self.k} exceeds k_max={self.k_max}")

    @property
    def rollout_size(self) -> int:
        return self.num_envs * self.n_steps

    def to_text(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self))


def parse_config(text: str) -> TrainConfig:
    """Parse a plain `key = value` file; keys are TrainConfig field names."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    seen: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in fields:
            raise ConfigError(f"unknown config key '{key}'")
        if key in seen:
            raise ConfigError(f"duplicate config key '{key}'")
        try:
            if fields[key] in ("int", int):
                seen[key] = int(value)
            elif fields[key] in ("float", float):
                seen[key] = float(value)
            elif fields[key] in ("bool", bool):
                if value.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(value)
                seen[key] = value.lower() in ("true", "1")
            else:
                seen[key] = value
        except ValueError as exc:
            raise ConfigError(f"config key '{key}': cannot parse '{value}'") from exc
    for required in ("n", "k"):
        if required not in seen:
            raise ConfigError(f"missing required config key '{required}'")
    return TrainConfig(**seen)


def load_config(path: str) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


@dataclass
class RolloutBuffer:
    r_scalars: np.ndarray     # (T, n) float32
    open_cols: np.ndarray     # (T, n, n) bool
    actions: np.ndarray       # (T, n) int64
    log_probs: np.ndarray     # (T, n) float32
    rewards: np.ndarray       # (T,) float32
    values: np.ndarray        # (T,) float32
    returns: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.rewards.shape[0]


@dataclass
class RunRecord:
    update: int
    timesteps: int
    mean_reward: float
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    grad_norm: float
    eval_greedy: Optional[float] = None
    eval_sampled: Optional[float] = None

    def csv_row(self) -> str:
        def opt(v):
            return "" if v is None else f"{v:.6f}"
        return (f"{self.update},{self.timesteps},{self.mean_reward:.6f},"
                f"{self.policy_loss:.6f},{self.value_loss:.6f},{self.entropy:.6f},"
                f"{self.approx_kl:.6f},{self.grad_norm:.6f},{opt(self.eval_greedy)},"
                f"{opt(self.eval_sampled)}")


@dataclass
class RunLog:
    records: list[RunRecord] = field(default_factory=list)

    def append(self, rec: RunRecord) -> None:
        if self.records and rec.update <= self.records[-1].update:
            raise ValueError("update index must be strictly increasing")
        self.records.append(rec)

    def write_csv(self, path: str, header_comment: str = "") -> None:
        with open(path, "w", encoding="utf-8") as f:
            for line in header_comment.splitlines():
                f.write(f"# {line}\n")
            f.write(RUNLOG_CSV_HEADER + "\n")
            for rec in self.records:
                f.write(rec.csv_row() + "\n")


def _log_prob_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def collect_rollouts(net: PolicyNet, env: XorEnv, config: TrainConfig,
                     env_rngs: list[np.random.Generator]) -> RolloutBuffer:
    """num_envs x n_steps single-step episodes; each env owns an independent
    derived stream, so any scheduling of the env loop yields the same data."""
    n, total = env.n, config.rollout_size
    r_scalars = np.zeros((total, n), dtype=np.float32)
    open_cols = np.zeros((total, n, n), dtype=bool)
    actions = np.zeros((total, n), dtype=np.int64)
    log_probs = np.zeros((total, n), dtype=np.float32)
    rewards = np.zeros(total, dtype=np.float32)

    agent_feats = env.agent_features()
    task_feats = env.task_features()
    with tc.no_grad():
        # observation is state-independent, so one critic pass covers the batch
        value = float(net.critic_value(agent_feats, task_feats).item())
        t = 0
        for _ in range(config.n_steps):
            for e in range(config.num_envs):
                rng = env_rngs[e]
                r = rng.random(n)
                cols = open_columns_for(config.variant, r, rng, config.p_drop)
                logits, _ = net.forward(agent_feats, task_feats, r,
                                        open_cols=cols, include_value=False)
                logp_all = _log_prob_rows(logits.data.astype(np.float64))
                probs = np.exp(logp_all)
                cum = np.cumsum(probs, axis=1)
                u = rng.random((n, 1))
                acts = np.minimum((cum < u).sum(axis=1), env.k - 1)
                reward, _ = env.step(acts)
                r_scalars[t] = r
                open_cols[t] = cols
                actions[t] = acts
                log_probs[t] = logp_all[np.arange(n), acts]
                rewards[t] = reward
                t += 1
    values = np.full(total, value, dtype=np.float32)
    return RolloutBuffer(r_scalars=r_scalars, open_cols=open_cols, actions=actions,
                         log_probs=log_probs, rewards=rewards, values=values)


def compute_advantages(buffer: RolloutBuffer, gamma: float) -> None:
    """Single-step terminal episodes: return = reward, advantage = reward - V.
    gamma is accepted for interface parity but cannot matter (no bootstrap)."""
    if len(buffer) == 0:
        raise ValueError("empty rollout buffer")
    buffer.returns = buffer.rewards.copy()
    buffer.advantages = buffer.returns - buffer.values


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Zero-mean unit-variance per batch; a zero-variance batch maps to zeros."""
    centered = adv - adv.mean()
    return centered / (adv.std() + eps)


def _const(data) -> tc.Tensor:
    return tc.Tensor(np.asarray(data, dtype=np.float32))


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    grad_norm: float
    minibatches: int
    early_stopped: bool


def ppo_update(net: PolicyNet, optimizer: tc.Adam, env: XorEnv, buffer: RolloutBuffer,
               config: TrainConfig, shuffle_rng: np.random.Generator) -> UpdateStats:
    if buffer.advantages is None:
        raise ValueError("compute_advantages must run before ppo_update")
    agent_feats = env.agent_features()
    task_feats = env.task_features()
    n = env.n
    total = len(buffer)
    clip_lo, clip_hi = 1.0 - config.clip_eps, 1.0 + config.clip_eps

    last = UpdateStats(0.0, 0.0, 0.0, 0.0, 0.0, 0, False)
    done = False
    for _ in range(config.n_epochs):
        if done:
            break
        perm = shuffle_rng.permutation(total)
        for start in range(0, total, config.batch_size):
            mb = perm[start : start + config.batch_size]
            adv = normalize_advantages(buffer.advantages[mb])

            # observation is state-independent: one critic node serves the batch
            value = net.critic_value(agent_feats, task_feats, detach_trunk=config.detach_critic_trunk)
            policy_sum = None
            entropy_sum = None
            value_sq_sum = None
            kl_terms = []
            for j, t in enumerate(mb):
                logits, _ = net.forward(agent_feats, task_feats, buffer.r_scalars[t],
                                        open_cols=buffer.open_cols[t], include_value=False)
                logp_all = tc.log_softmax(logits, axis=1)
                logp = tc.gather_rows(logp_all, buffer.actions[t])
                ratio = tc.exp(logp - _const(buffer.log_probs[t]))
                surr1 = tc.mul_scalar(ratio, float(adv[j]))
                surr2 = tc.mul_scalar(tc.clamp(ratio, clip_lo, clip_hi), float(adv[j]))
                pol_t = tc.tsum(tc.minimum(surr1, surr2))  # summed over agents
                ent_t = tc.mul_scalar(tc.tsum(tc.mul(tc.exp(logp_all), logp_all)), -1.0)
                err = value - _const(np.float32(buffer.returns[t]).reshape(1, 1))
                val_t = tc.tsum(tc.mul(err, err))
                policy_sum = pol_t if policy_sum is None else policy_sum + pol_t
                entropy_sum = ent_t if entropy_sum is None else entropy_sum + ent_t
                value_sq_sum = val_t if value_sq_sum is None else value_sq_sum + val_t
                rat = ratio.data.astype(np.float64)
                kl_terms.append(np.mean((rat - 1.0) - np.log(rat)))

            inv = 1.0 / len(mb)
            policy_loss = tc.mul_scalar(policy_sum, -inv)
            value_loss = tc.mul_scalar(value_sq_sum, inv)
            entropy_mean = tc.mul_scalar(entropy_sum, inv)
            loss = policy_loss + tc.mul_scalar(value_loss, config.vf_coef)
            if config.ent_coef != 0.0:
                loss = loss + tc.mul_scalar(entropy_mean, -config.ent_coef)

            if not math.isfinite(loss.item()):
                raise RuntimeError(
                    f"NaN/Inf loss in PPO update (policy={policy_loss.item()}, "
                    f"value={value_loss.item()}); aborting"
                )
            tc.backward(loss)
            grad_norm = tc.clip_grad_norm(net.parameters(), config.max_grad_norm)
            optimizer.step()

            approx_kl = float(np.mean(kl_terms))
            last = UpdateStats(
                policy_loss=policy_loss.item(), value_loss=value_loss.item(),
                entropy=entropy_mean.item() / n, approx_kl=approx_kl,
                grad_norm=grad_norm, minibatches=last.minibatches + 1,
                early_stopped=False,
            )
            if approx_kl > config.target_kl:
                last.early_stopped = True
                done = True
                break
    return last


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=tuple(key)).generate_state(1)[0])


@dataclass
class TrainResult:
    net: PolicyNet
    runlog: RunLog
    best_state: dict
    best_greedy: float
    config: TrainConfig

    def best_net(self) -> PolicyNet:
        net = PolicyNet(self.net.config, np.random.default_rng(0))
        net.load_state_dict(self.best_state)
        return net


def train(config: TrainConfig, run_dir: Optional[str] = None,
          progress: Optional[Callable[[RunRecord], None]] = None) -> TrainResult:
    """Collect/advantage/update loop until total_timesteps, with periodic
    greedy+sampled evaluation and best-checkpoint tracking by greedy score."""
    env = XorEnv(config.n, config.k, config.k_max)
    init_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    env_rngs = [
        np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1, e)))
        for e in range(config.num_envs)
    ]
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(2,)))

    net_cfg = PolicyConfig(d=config.d, n_blocks=config.n_blocks, agent_feat_dim=1,
                           task_feat_dim=config.k_max, variant=config.variant,
                           p_drop=config.p_drop, head_scale=config.head_scale)
    net = PolicyNet(net_cfg, init_rng)
    optimizer = tc.Adam(net.parameters(), lr=config.lr,
                        beta1=config.adam_beta1, beta2=config.adam_beta2)
    runlog = RunLog()
    best_state = net.state_dict()
    best_greedy = -1.0

    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.txt"), "w", encoding="utf-8") as f:
            f.write(config.to_text() + "\n")

    timesteps = 0
    update = 0
    n_updates = math.ceil(config.total_timesteps / config.rollout_size)
    while timesteps < config.total_timesteps:
        buffer = collect_rollouts(net, env, config, env_rngs)
        compute_advantages(buffer, config.gamma)
        stats = ppo_update(net, optimizer, env, buffer, config, shuffle_rng)
        timesteps += config.rollout_size
        update += 1

        eval_greedy = eval_sampled = None
        if update % config.eval_every == 0 or update == n_updates:
            policy = PolicyNetPolicy(net)
            eval_greedy = evaluate(policy, env, "greedy", config.eval_episodes,
                                   _derived_seed(config.seed, 3, update)).success_rate
            eval_sampled = evaluate(policy, env, "sampled", config.eval_episodes,
                                    _derived_seed(config.seed, 4, update)).success_rate
            if eval_greedy > best_greedy:
                best_greedy = eval_greedy
                best_state = net.state_dict()
                if run_dir is not None:
                    _save(net, os.path.join(run_dir, "checkpoint_best.bin"), config)

        rec = RunRecord(
            update=update, timesteps=timesteps, mean_reward=float(buffer.rewards.mean()),
            policy_loss=stats.policy_loss, value_loss=stats.value_loss,
            entropy=stats.entropy, approx_kl=stats.approx_kl, grad_norm=stats.grad_norm,
            eval_greedy=eval_greedy, eval_sampled=eval_sampled,
        )
        runlog.append(rec)
        if progress is not None:
            progress(rec)

    if run_dir is not None:
        _save(net, os.path.join(run_dir, "checkpoint_final.bin"), config)
        runlog.write_csv(os.path.join(run_dir, "runlog.csv"),
                         header_comment=config.to_text())
    return TrainResult(net=net, runlog=runlog, best_state=best_state,
                       best_greedy=best_greedy, config=config)


def _save(net: PolicyNet, path: str, config: TrainConfig) -> None:
    save_checkpoint(net, path, n_train=config.n, k_train=config.k)
