"""Anonymous-broadcast rank protocol and its success-probability analysis.

n homogeneous players each sample k uniform random bits, broadcast them once
over a source-anonymous channel, and act on the rank of their own string
under a fixed strict order (unsigned-integer value, first bit most
significant, ascending). All strings distinct <=> every player gets a unique
rank <=> the team wins the generalized XOR game.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import total_ordering
from typing import Iterable, Sequence

import numpy as np

from .rng import BitStream, ProtocolRng


@total_ordering
@dataclass(frozen=True)
class BitString:
    """One player's sampled bits; ordered by unsigned-integer value."""

    bits: tuple[bool, ...]

    @property
    def k(self) -> int:
        return len(self.bits)

    @property
    def value(self) -> int:
        v = 0
        for b in self.bits:
            v = (v << 1) | int(b)
        return v

    def __lt__(self, other: "BitString") -> bool:
        if self.k != other.k:
            raise ValueError("cannot order bit strings of different length")
        return self.value < other.value


@dataclass(frozen=True)
class BroadcastRound:
    """One source-anonymous broadcast: every player receives this multiset."""

    messages: tuple[BitString, ...]

    def __post_init__(self):
        # Canonical sorted storage: the channel erases sender identity.
        object.__setattr__(self, "messages", tuple(sorted(self.messages, key=lambda s: s.value)))

    @property
    def n(self) -> int:
        return len(self.messages)

    def multiplicity(self, s: BitString) -> int:
        return sum(1 for m in self.messages if m.value == s.value)

    def rank(self, s: BitString) -> int:
        """Lowest rank of s's tied block: count of strictly smaller strings."""
        return sum(1 for m in self.messages if m.value < s.value)


@dataclass(frozen=True)
class ProtocolOutcome:
    actions: tuple[int, ...]
    collided: bool
    success: bool


@dataclass(frozen=True)
class TheoremReport:
    """Monte-Carlo success vs. the closed-form no-collision probability."""

    n: int
    k: int
    trials: int
    empirical: float
    exact: float
    z: float

    def csv_row(self) -> str:
        return f"{self.n},{self.k},{self.trials},{self.empirical:.6f},{self.exact:.12g},{self.z:.4f}"


def sample_bitstring(stream: BitStream, k: int) -> BitString:
    """Draw k uniform bits from the stream (consumes exactly k)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    return BitString(stream.take(k))


def xor_reward(actions: Sequence[int], k: int) -> int:
    """1 iff all actions are pairwise distinct, 0 otherwise."""
    acts = list(actions)
    for a in acts:
        if not 0 <= a < k:
            raise ValueError(f"action {a} out of range [0, {k})")
    return int(len(set(acts)) == len(acts))


def rank_actions(strings: Sequence[BitString]) -> tuple[int, ...]:
    """Each player's action: its rank in the broadcast multiset.

    Tied players share the lowest rank of their block, so any duplicate
    string forces an action collision.
    """
    rnd = BroadcastRound(tuple(strings))
    return tuple(rnd.rank(s) for s in strings)


def run_rank_protocol(n: int, k: int, rng: ProtocolRng, trial: int = 0) -> ProtocolOutcome:
    """One full protocol execution: sample, broadcast, rank, act."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if k < 0:
        raise ValueError("k must be >= 0")
    strings = [sample_bitstring(rng.player_stream(trial, p, n), k) for p in range(n)]
    rnd = BroadcastRound(tuple(strings))
    actions = tuple(rnd.rank(s) for s in strings)
    collided = any(rnd.multiplicity(s) > 1 for s in strings)
    success = bool(xor_reward(actions, n)) if not collided else False
    return ProtocolOutcome(actions=actions, collided=collided, success=success)


def p_no_collision_fraction(n: int, k: int) -> Fraction:
    """Exact probability that n independent k-bit strings are all distinct."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if k < 0:
        raise ValueError("k must be >= 0")
    space = 1 << k
    if n > space:
        return Fraction(0)
    return Fraction(math.comb(space, n) * math.factorial(n), space**n)


def p_no_collision_exact(n: int, k: int) -> float:
    """Float view of `p_no_collision_fraction` (exact rationals internally,
    so no intermediate overflow for any n, k)."""
    return float(p_no_collision_fraction(n, k))


def random_play_floor_fraction(n: int) -> Fraction:
    """Exact n!/n^n: success probability of uniform random distinct picks."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return Fraction(math.factorial(n), n**n)


def random_play_floor(n: int) -> float:
    return float(random_play_floor_fraction(n))


def _success_frequency(n: int, k: int, trials: int, rng: ProtocolRng) -> float:
    """Vectorized Monte Carlo; bit-identical to looping run_rank_protocol."""
    codes = rng.trial_codes(trials, n, k)
    if n == 1:
        return 1.0
    codes = np.sort(codes, axis=1)
    distinct = np.all(codes[:, 1:] != codes[:, :-1], axis=1)
    return float(np.mean(distinct))


def verify_theorem1(n: int, k: int, trials: int, seed: int) -> TheoremReport:
    """Compare Monte-Carlo protocol success against the exact formula.

    z is the deviation in binomial standard errors; for degenerate p in
    {0, 1} it is 0 when the empirical rate matches exactly, else +/-inf.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = ProtocolRng(seed)
    empirical = _success_frequency(n, k, trials, rng)
    exact = p_no_collision_exact(n, k)
    var = exact * (1.0 - exact)
    if var == 0.0:
        z = 0.0 if empirical == exact else math.copysign(math.inf, empirical - exact)
    else:
        z = (empirical - exact) / math.sqrt(var / trials)
    return TheoremReport(n=n, k=k, trials=trials, empirical=empirical, exact=exact, z=z)


def brute_force_no_collision(n: int, k: int) -> Fraction:
    """Independent oracle: enumerate all 2^(nk) joint bit assignments."""
    total_bits = n * k
    if total_bits > 20:
        raise ValueError("enumeration limited to n*k <= 20")
    space = 1 << k
    mask = space - 1
    hits = 0
    for joint in range(1 << total_bits):
        codes = [(joint >> (k * p)) & mask for p in range(n)]
        if len(set(codes)) == n:
            hits += 1
    return Fraction(hits, 1 << total_bits)


PROTOCOL_CSV_HEADER = "n,k,trials,empirical,exact,z"


def format_report_text(reports: Iterable[TheoremReport]) -> str:
    lines = [f"{'n':>3} {'k':>3} {'trials':>9} {'empirical':>10} {'exact':>12} {'z':>8}"]
    for r in reports:
        lines.append(
            f"{r.n:>3} {r.k:>3} {r.trials:>9} {r.empirical:>10.6f} {r.exact:>12.8f} {r.z:>8.3f}"
        )
    return "\n".join(lines)
