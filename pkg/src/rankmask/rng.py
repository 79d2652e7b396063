"""Counter-based splittable random streams.

Every random bit consumed by the broadcast protocol is a pure function of
(master seed, stream index, bit index), so Monte-Carlo trials can be computed
in any order -- or vectorized -- and stay bit-identical to a sequential run.
Stream indices are assigned per (trial, player).
"""

from __future__ import annotations

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U_GOLDEN = np.uint64(_GOLDEN)
_U_MIX1 = np.uint64(_MIX1)
_U_MIX2 = np.uint64(_MIX2)


def _mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int (wrapping 64-bit)."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _mix64_np(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _U_MIX1
    z = (z ^ (z >> np.uint64(27))) * _U_MIX2
    return z ^ (z >> np.uint64(31))


def stream_word(master_seed: int, stream: int, word: int) -> int:
    """64-bit word `word` of stream `stream` under `master_seed`."""
    key = _mix64((master_seed + _GOLDEN * (stream + 1)) & _MASK64)
    return _mix64((key + _GOLDEN * (word + 1)) & _MASK64)


def stream_words(master_seed: int, streams: np.ndarray, word: int) -> np.ndarray:
    """Vectorized `stream_word` over an array of stream indices."""
    s = np.asarray(streams, dtype=np.uint64)
    key = _mix64_np(np.uint64(master_seed & _MASK64) + _U_GOLDEN * (s + np.uint64(1)))
    return _mix64_np(key + _U_GOLDEN * np.uint64((word + 1) & _MASK64))


class BitStream:
    """Sequential view of one derived stream; consumes bits left to right.

    Bit i of the stream is bit (i mod 64) of word (i // 64), so any prefix
    is reproducible from (master_seed, stream) alone.
    """

    def __init__(self, master_seed: int, stream: int):
        self.master_seed = master_seed & _MASK64
        self.stream = stream
        self._cursor = 0

    def take(self, count: int) -> tuple[bool, ...]:
        if count < 0:
            raise ValueError("bit count must be >= 0")
        out = []
        for _ in range(count):
            w, b = divmod(self._cursor, 64)
            word = stream_word(self.master_seed, self.stream, w)
            out.append(bool((word >> b) & 1))
            self._cursor += 1
        return tuple(out)

    @property
    def bits_consumed(self) -> int:
        return self._cursor


class ProtocolRng:
    """Per-run RNG root: hands out one independent stream per (trial, player)."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed) & _MASK64

    def player_stream(self, trial: int, player: int, n_players: int) -> BitStream:
        return BitStream(self.master_seed, trial * n_players + player)

    def trial_codes(self, trials: int, n_players: int, k: int) -> np.ndarray:
        """All players' k-bit strings as integers, shape (trials, n_players).

        Code (t, p) equals the unsigned-integer value (first sampled bit most
        significant) of the string BitStream(t*n+p).take(k) would yield, so
        the vectorized Monte Carlo is bit-identical to the sequential
        protocol; requires k <= 64.
        """
        if k > 64:
            raise ValueError("vectorized path supports k <= 64")
        sids = np.arange(trials * n_players, dtype=np.uint64)
        if k == 0:
            return np.zeros((trials, n_players), dtype=np.uint64)
        word = stream_words(self.master_seed, sids, 0)
        codes = np.zeros_like(word)
        one = np.uint64(1)
        for i in range(k):
            codes = (codes << one) | ((word >> np.uint64(i)) & one)
        return codes.reshape(trials, n_players)
