"""Rank-mask construction, diamond attention, and the shared policy network.

Every agent broadcasts a uniform random scalar per step; the scalars induce a
transient rank order, and each agent masks all strictly lower-ranked peers
out of its agent-to-agent attention while task attention stays fully open.
All agents share every parameter, and no parameter shape depends on the
number of agents or tasks, so one trained network evaluates at any team size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tc
from .tensor import NEG_INF, Parameter, Tensor

VARIANTS = ("structured", "no_mask", "dropout")


@dataclass(frozen=True)
class PolicyConfig:
    d: int = 64
    n_blocks: int = 3
    agent_feat_dim: int = 1  # raw width, before the appended random scalar
    task_feat_dim: int = 8
    variant: str = "structured"
    p_drop: float = 0.5
    head_scale: float = 1.0  # action-head dot products are scaled by head_scale/sqrt(d)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}' (expected one of {VARIANTS})")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError("p_drop must lie in [0, 1)")
        if min(self.d, self.n_blocks, self.agent_feat_dim, self.task_feat_dim) < 1:
            raise ValueError("d, n_blocks and feature widths must be >= 1")


# ---------------------------------------------------------------------------
# mask construction


def rank_open_columns(r: np.ndarray) -> np.ndarray:
    """Boolean (n, n) matrix: row i keeps agent-key column k iff r_k >= r_i.

    Equal scalars stay mutually open, so the self column is always open and
    no attention row can end up fully masked.
    """
    r = np.asarray(r, dtype=np.float64)
    return r[None, :] >= r[:, None]


def dropout_open_columns(n: int, p_drop: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. column masking: each non-self column closed with prob p_drop."""
    open_cols = rng.random((n, n)) >= p_drop
    np.fill_diagonal(open_cols, True)
    return open_cols


def open_columns_for(variant: str, r: np.ndarray, rng: Optional[np.random.Generator],
                     p_drop: float) -> np.ndarray:
    n = len(r)
    if variant == "structured":
        return rank_open_columns(r)
    if variant == "no_mask":
        return np.ones((n, n), dtype=bool)
    if variant == "dropout":
        if rng is None:
            raise ValueError("dropout variant needs an rng to draw masks")
        return dropout_open_columns(n, p_drop, rng)
    raise ValueError(f"unknown variant '{variant}'")


def mask_from_open(open_row: np.ndarray, num_tasks: int) -> np.ndarray:
    """Expand one agent's open-column row to an additive (m, n) mask."""
    row = np.where(open_row, np.float32(0.0), NEG_INF).astype(np.float32)
    return np.broadcast_to(row, (num_tasks, len(row))).copy()


def build_mask(r: np.ndarray, num_tasks: int) -> np.ndarray:
    """Per-agent additive masks, shape (n, num_tasks, n): entry [i, t, k] is
    0 if r_k >= r_i else NEG_INF, constant down each key column."""
    open_cols = rank_open_columns(r)
    return np.stack([mask_from_open(open_cols[i], num_tasks) for i in range(len(r))])


# ---------------------------------------------------------------------------
# network building blocks


# SiLU roughly halves activation scale at init; compensate so signals keep
# O(1) magnitude through the stacked MLPs instead of vanishing with depth.
_SILU_GAIN = math.sqrt(2.0)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
            gain: float = 1.0) -> np.ndarray:
    lim = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(np.float32)


class Mlp:
    """Two-layer MLP with SiLU between the layers."""

    def __init__(self, prefix: str, d_in: int, d_hidden: int, d_out: int,
                 rng: np.random.Generator):
        self.w1 = Parameter(_glorot(rng, d_in, d_hidden, _SILU_GAIN), f"{prefix}.w1")
        self.b1 = Parameter(np.zeros(d_hidden, dtype=np.float32), f"{prefix}.b1")
        self.w2 = Parameter(_glorot(rng, d_hidden, d_out, _SILU_GAIN), f"{prefix}.w2")
        self.b2 = Parameter(np.zeros(d_out, dtype=np.float32), f"{prefix}.b2")

    def __call__(self, x: Tensor) -> Tensor:
        return tc.linear(tc.silu(tc.linear(x, self.w1, self.b1)), self.w2, self.b2)

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


def diamond_attention(agents: Tensor, tasks: Tensor, mask: np.ndarray,
                      w_a: Parameter, w_t: Parameter,
                      agent_index: Optional[int] = None) -> tuple[Tensor, Tensor]:
    """Two-way cross-attention between an agent set and a task set.

    One softmax over the agent axis of the (task x agent) score matrix is
    shared by both directions: task rows aggregate projected agent values,
    agent columns aggregate projected task values, and each side is
    concatenated with its own input embedding.

    Returns (task_out: m x 2d, agent_out: n x 2d), or agent_out restricted
    to a single 1 x 2d row when agent_index is given.
    """
    if agents.ndim != 2 or tasks.ndim != 2 or agents.shape[1] != tasks.shape[1]:
        raise tc.ShapeError(
            f"diamond_attention: embedding widths differ, agents {agents.shape} vs tasks {tasks.shape}"
        )
    d = agents.shape[1]
    scale = 1.0 / math.sqrt(d)
    scores = tc.mul_scalar(tc.matmul(tasks, tc.transpose(agents)), scale)
    weights = tc.masked_softmax(scores, mask, axis=1)
    task_out = tc.concat_features(tc.matmul(weights, tc.matmul(agents, tc.transpose(w_a))), tasks)
    agent_vals = tc.matmul(tc.transpose(weights), tc.matmul(tasks, tc.transpose(w_t)))
    if agent_index is None:
        agent_out = tc.concat_features(agent_vals, agents)
    else:
        agent_out = tc.concat_features(
            tc.take_row(agent_vals, agent_index), tc.take_row(agents, agent_index)
        )
    return task_out, agent_out


class DiamondBlock:
    def __init__(self, prefix: str, d: int, rng: np.random.Generator):
        self.w_a = Parameter(_glorot(rng, d, d), f"{prefix}.w_a")
        self.w_t = Parameter(_glorot(rng, d, d), f"{prefix}.w_t")
        self.proj_task = Mlp(f"{prefix}.proj_task", 2 * d, d, d, rng)
        self.proj_agent = Mlp(f"{prefix}.proj_agent", 2 * d, d, d, rng)

    def parameters(self) -> list[Parameter]:
        return [self.w_a, self.w_t] + self.proj_task.parameters() + self.proj_agent.parameters()


class PolicyNet:
    """Shared-parameter policy: (agent set, task set, random scalars) ->
    per-agent action logits over tasks, plus one team value.

    Each agent runs the block stack under its own mask, carrying its own
    1 x d agent token and its own m x d view of the task set; the agent-token
    matrix fed to the next block stacks every agent's own masked result. The
    value head re-runs the stack with all masks open and the scalar slot
    zeroed, mean-pools the agent tokens, and is therefore symmetric in the
    agents and independent of the broadcast scalars.
    """

    def __init__(self, config: PolicyConfig, rng: np.random.Generator):
        self.config = config
        d = config.d
        self.agent_embed = Mlp("agent_embed", config.agent_feat_dim + 1, d, d, rng)
        self.task_embed = Mlp("task_embed", config.task_feat_dim, d, d, rng)
        self.blocks = [DiamondBlock(f"block{i}", d, rng) for i in range(config.n_blocks)]
        self.value_head = Mlp("value_head", d, d, 1, rng)
        self._params = (
            self.agent_embed.parameters()
            + self.task_embed.parameters()
            + [p for b in self.blocks for p in b.parameters()]
            + self.value_head.parameters()
        )
        names = [p.name for p in self._params]
        assert len(set(names)) == len(names)

    def parameters(self) -> list[Parameter]:
        return self._params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self._params}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {p.name: p for p in self._params}
        if set(state) != set(own):
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            raise ValueError(f"parameter name mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, arr in state.items():
            if own[name].data.shape != arr.shape:
                raise ValueError(f"shape mismatch for '{name}': {own[name].data.shape} vs {arr.shape}")
            own[name].data = np.array(arr, dtype=np.float32)

    # -- forward passes -----------------------------------------------------

    def _check_inputs(self, agent_feats: np.ndarray, task_feats: np.ndarray) -> None:
        if agent_feats.ndim != 2 or agent_feats.shape[1] != self.config.agent_feat_dim:
            raise tc.ShapeError(
                f"agent features must be (n, {self.config.agent_feat_dim}), got {agent_feats.shape}"
            )
        if task_feats.ndim != 2 or task_feats.shape[1] != self.config.task_feat_dim:
            raise tc.ShapeError(
                f"task features must be (m, {self.config.task_feat_dim}), got {task_feats.shape}"
            )

    def forward(self, agent_feats: np.ndarray, task_feats: np.ndarray, r: np.ndarray,
                open_cols: Optional[np.ndarray] = None,
                rng: Optional[np.random.Generator] = None,
                include_value: bool = True) -> tuple[Tensor, Optional[Tensor]]:
        agent_feats = np.asarray(agent_feats, dtype=np.float32)
        task_feats = np.asarray(task_feats, dtype=np.float32)
        r = np.asarray(r, dtype=np.float32).reshape(-1)
        self._check_inputs(agent_feats, task_feats)
        n = agent_feats.shape[0]
        m = task_feats.shape[0]
        if len(r) != n:
            raise tc.ShapeError(f"need one random scalar per agent, got {len(r)} for {n} agents")
        if open_cols is None:
            open_cols = open_columns_for(self.config.variant, r, rng, self.config.p_drop)

        agent_in = Tensor(np.concatenate([agent_feats, r[:, None]], axis=1))
        agent_tokens = self.agent_embed(agent_in)
        task_base = self.task_embed(Tensor(task_feats))
        views = [task_base] * n

        masks = [mask_from_open(open_cols[i], m) for i in range(n)]
        for block in self.blocks:
            new_rows = []
            new_views = []
            for i in range(n):
                t_out, a_out = diamond_attention(
                    agent_tokens, views[i], masks[i], block.w_a, block.w_t, agent_index=i
                )
                new_views.append(block.proj_task(t_out))
                new_rows.append(block.proj_agent(a_out))
            agent_tokens = tc.concat_rows(new_rows)
            views = new_views

        scale = self.config.head_scale / math.sqrt(self.config.d)
        logits = tc.concat_rows([
            tc.mul_scalar(tc.matmul(tc.take_row(agent_tokens, i), tc.transpose(views[i])), scale)
            for i in range(n)
        ])
        value = self.critic_value(agent_feats, task_feats) if include_value else None
        return logits, value

    def critic_value(self, agent_feats: np.ndarray, task_feats: np.ndarray,
                     detach_trunk: bool = False) -> Tensor:
        """Team value: mask-free stack, scalar slot zeroed, agent mean-pool.

        detach_trunk stops value-loss gradients at the pooled embeddings, so
        the shared trunk is trained by the policy objective alone (the value
        head still fits); the forward value is identical either way.
        """
        agent_feats = np.asarray(agent_feats, dtype=np.float32)
        task_feats = np.asarray(task_feats, dtype=np.float32)
        self._check_inputs(agent_feats, task_feats)
        n = agent_feats.shape[0]
        m = task_feats.shape[0]
        agent_in = Tensor(np.concatenate([agent_feats, np.zeros((n, 1), dtype=np.float32)], axis=1))
        agents = self.agent_embed(agent_in)
        tasks = self.task_embed(Tensor(task_feats))
        zero_mask = np.zeros((m, n), dtype=np.float32)
        for block in self.blocks:
            t_out, a_out = diamond_attention(agents, tasks, zero_mask, block.w_a, block.w_t)
            tasks = block.proj_task(t_out)
            agents = block.proj_agent(a_out)
        pooled = tc.tmean(agents, axis=0, keepdims=True)
        if detach_trunk:
            pooled = Tensor(pooled.data.copy())
        return self.value_head(pooled)


# Spec-level entry points: the structured forward and its two ablations share
# one implementation and differ only in how the open-column sets are drawn.


def forward_policy(net: PolicyNet, agent_feats: np.ndarray, task_feats: np.ndarray,
                   r: np.ndarray) -> tuple[Tensor, Tensor]:
    n = np.asarray(agent_feats).shape[0]
    open_cols = rank_open_columns(np.asarray(r, dtype=np.float64).reshape(n))
    return net.forward(agent_feats, task_feats, r, open_cols=open_cols)


def ablation_no_mask(net: PolicyNet, agent_feats: np.ndarray, task_feats: np.ndarray,
                     r: np.ndarray) -> tuple[Tensor, Tensor]:
    n = np.asarray(agent_feats).shape[0]
    return net.forward(agent_feats, task_feats, r, open_cols=np.ones((n, n), dtype=bool))


def ablation_dropout(net: PolicyNet, agent_feats: np.ndarray, task_feats: np.ndarray,
                     r: np.ndarray, rng: np.random.Generator,
                     p_drop: Optional[float] = None) -> tuple[Tensor, Tensor]:
    n = np.asarray(agent_feats).shape[0]
    p = net.config.p_drop if p_drop is None else p_drop
    return net.forward(agent_feats, task_feats, r, open_cols=dropout_open_columns(n, p, rng))
