"""Central finite-difference verification of every differentiable op.

The oracle only ever calls forward passes, so it stays independent of the
backward rules it checks. Data is drawn at O(1) scale and nudged away from
the kinks of clamp/minimum so the two-sided difference is well posed at
h = 1e-3 in float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .attention import PolicyConfig, PolicyNet, build_mask
from .tensor import NEG_INF, Tensor

DEFAULT_H = 1e-3
DEFAULT_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < DEFAULT_TOL


def finite_diff_grads(build_loss: Callable[[], Tensor], wrt: Sequence[Tensor],
                      h: float = DEFAULT_H) -> list[np.ndarray]:
    grads = []
    for t in wrt:
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + np.float32(h)
            fp = build_loss().item()
            flat[i] = orig - np.float32(h)
            fm = build_loss().item()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(t.data.shape))
    return grads


def compare(build_loss: Callable[[], Tensor], wrt: Sequence[Tensor],
            h: float = DEFAULT_H) -> float:
    """Max relative error between tape gradients and central differences."""
    for t in wrt:
        t.grad = None
    loss = build_loss()
    tc.backward(loss)
    analytic = [np.zeros_like(t.data, dtype=np.float64) if t.grad is None
                else t.grad.astype(np.float64) for t in wrt]
    numeric = finite_diff_grads(build_loss, wrt, h=h)
    worst = 0.0
    for a, f in zip(analytic, numeric):
        scale = max(1.0, float(np.abs(f).max(initial=0.0)))
        worst = max(worst, float(np.abs(a - f).max(initial=0.0)) / scale)
    return worst


def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    return tc.tsum(tc.mul(t, Tensor(w)))


def _rand(rng, *shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape).astype(np.float32), requires_grad=True)


# Each case returns (build_loss, params); build_loss must be re-invocable.


def _case_matmul(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    w = rng.standard_normal((3, 2)).astype(np.float32)
    return lambda: _weighted_sum(tc.matmul(a, b), w), [a, b]


def _case_linear(rng):
    x, wgt = _rand(rng, 4, 3), _rand(rng, 3, 5)
    b = _rand(rng, 5)
    w = rng.standard_normal((4, 5)).astype(np.float32)
    return lambda: _weighted_sum(tc.linear(x, wgt, b), w), [x, wgt, b]


def _case_add(rng):
    a, b = _rand(rng, 3, 5), _rand(rng, 3, 5)
    w = rng.standard_normal((3, 5)).astype(np.float32)
    return lambda: _weighted_sum(tc.add(a, b), w), [a, b]


def _case_add_bias(rng):
    a, b = _rand(rng, 4, 3), _rand(rng, 3)
    w = rng.standard_normal((4, 3)).astype(np.float32)
    return lambda: _weighted_sum(tc.add(a, b), w), [a, b]


def _case_mul(rng):
    a, b = _rand(rng, 2, 6), _rand(rng, 2, 6)
    w = rng.standard_normal((2, 6)).astype(np.float32)
    return lambda: _weighted_sum(tc.mul(a, b), w), [a, b]


def _case_mul_scalar(rng):
    a = _rand(rng, 3, 3)
    w = rng.standard_normal((3, 3)).astype(np.float32)
    return lambda: _weighted_sum(tc.mul_scalar(a, 1.7), w), [a]


def _case_exp(rng):
    a = _rand(rng, 3, 4)
    w = rng.standard_normal((3, 4)).astype(np.float32)
    return lambda: _weighted_sum(tc.exp(a), w), [a]


def _case_silu(rng):
    a = _rand(rng, 4, 4)
    w = rng.standard_normal((4, 4)).astype(np.float32)
    return lambda: _weighted_sum(tc.silu(a), w), [a]


def _case_clamp(rng):
    a = _rand(rng, 4, 4)
    # keep every point clear of the clamp kinks
    a.data[np.abs(np.abs(a.data) - 0.5) < 0.05] = 0.0
    w = rng.standard_normal((4, 4)).astype(np.float32)
    return lambda: _weighted_sum(tc.clamp(a, -0.5, 0.5), w), [a]


def _case_minimum(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    close = np.abs(a.data - b.data) < 0.05
    b.data[close] += 0.2
    w = rng.standard_normal((3, 4)).astype(np.float32)
    return lambda: _weighted_sum(tc.minimum(a, b), w), [a, b]


def _case_transpose(rng):
    a = _rand(rng, 3, 5)
    w = rng.standard_normal((5, 3)).astype(np.float32)
    return lambda: _weighted_sum(tc.transpose(a), w), [a]


def _case_concat_features(rng):
    a, b = _rand(rng, 3, 2), _rand(rng, 3, 4)
    w = rng.standard_normal((3, 6)).astype(np.float32)
    return lambda: _weighted_sum(tc.concat_features(a, b), w), [a, b]


def _case_concat_rows(rng):
    a, b = _rand(rng, 2, 3), _rand(rng, 4, 3)
    w = rng.standard_normal((6, 3)).astype(np.float32)
    return lambda: _weighted_sum(tc.concat_rows([a, b]), w), [a, b]


def _case_take_row(rng):
    a = _rand(rng, 5, 3)
    w = rng.standard_normal((1, 3)).astype(np.float32)
    return lambda: _weighted_sum(tc.take_row(a, 2), w), [a]


def _case_sum_axis(rng):
    a = _rand(rng, 3, 4)
    w = rng.standard_normal((3, 1)).astype(np.float32)
    return lambda: _weighted_sum(tc.tsum(a, axis=1, keepdims=True), w), [a]


def _case_mean_full(rng):
    a = _rand(rng, 3, 4)
    return lambda: tc.mul_scalar(tc.tmean(a), 3.0), [a]


def _case_mean_axis(rng):
    a = _rand(rng, 4, 3)
    w = rng.standard_normal((1, 3)).astype(np.float32)
    return lambda: _weighted_sum(tc.tmean(a, axis=0, keepdims=True), w), [a]


def _case_masked_softmax(rng):
    a = _rand(rng, 3, 5)
    mask = np.where(rng.random((3, 5)) < 0.4, NEG_INF, np.float32(0.0)).astype(np.float32)
    mask[np.arange(3), rng.integers(0, 5, size=3)] = 0.0  # keep each row open
    w = rng.standard_normal((3, 5)).astype(np.float32)
    return lambda: _weighted_sum(tc.masked_softmax(a, mask, axis=1), w), [a]


def _case_log_softmax(rng):
    a = _rand(rng, 3, 5)
    w = rng.standard_normal((3, 5)).astype(np.float32)
    return lambda: _weighted_sum(tc.log_softmax(a, axis=1), w), [a]


def _case_gather_rows(rng):
    a = _rand(rng, 4, 5)
    idx = rng.integers(0, 5, size=4)
    w = rng.standard_normal(4).astype(np.float32)
    return lambda: _weighted_sum(tc.gather_rows(a, idx), w), [a]


OP_CASES = {
    "matmul": _case_matmul,
    "linear": _case_linear,
    "add": _case_add,
    "add_bias": _case_add_bias,
    "mul": _case_mul,
    "mul_scalar": _case_mul_scalar,
    "exp": _case_exp,
    "silu": _case_silu,
    "clamp": _case_clamp,
    "minimum": _case_minimum,
    "transpose": _case_transpose,
    "concat_features": _case_concat_features,
    "concat_rows": _case_concat_rows,
    "take_row": _case_take_row,
    "sum_axis": _case_sum_axis,
    "mean_full": _case_mean_full,
    "mean_axis": _case_mean_axis,
    "masked_softmax": _case_masked_softmax,
    "log_softmax": _case_log_softmax,
    "gather_rows": _case_gather_rows,
}


def check_op(name: str, instances: int = 10, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        build_loss, params = OP_CASES[name](rng)
        worst = max(worst, compare(build_loss, params))
    return CheckResult(name, worst)


def check_policy_end_to_end(d: int = 8, n: int = 2, m: int = 2, seed: int = 0) -> CheckResult:
    """FD over every parameter of a small policy network, through logits
    and value jointly."""
    rng = np.random.default_rng(seed)
    cfg = PolicyConfig(d=d, n_blocks=3, agent_feat_dim=1, task_feat_dim=m)
    net = PolicyNet(cfg, rng)
    agent_feats = np.ones((n, 1), dtype=np.float32)
    task_feats = np.eye(m, dtype=np.float32)
    r = rng.random(n)
    w_logits = rng.standard_normal((n, m)).astype(np.float32)

    def build_loss():
        logits, value = net.forward(agent_feats, task_feats, r)
        return _weighted_sum(logits, w_logits) + tc.mul_scalar(tc.tsum(value), 0.5)

    worst = compare(build_loss, net.parameters())
    return CheckResult("policy_end_to_end", worst)


def run_all(instances: int = 10, seed: int = 0, include_policy: bool = True) -> list[CheckResult]:
    results = [check_op(name, instances=instances, seed=seed) for name in OP_CASES]
    if include_policy:
        results.append(check_policy_end_to_end(seed=seed))
    return results
