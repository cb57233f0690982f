"""Uniform-sampling quantile estimation and the compacting buffer.

The doubling algorithm merges equal-weight buffers each round; once a
buffer would exceed its capacity it is compacted: sorted ascending and
thinned to the 1-indexed even positions while its weight doubles. The
rank error this introduces is deterministic: over T = log2(n') + 1 rounds
on n' effective samples it never exceeds (n'/2k) * log2(n'/k).

Buffers are value-like: merging consumes both inputs. Elements are stored
as int64 keys (distinct totally-ordered ids; duplicate raw values get
distinct keys upstream via tiebreaks).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .engine import BudgetExceededError, RoundEngine
from .schedules import compaction_error_bound


@dataclass(frozen=True)
class CompactedBuffer:
    """Sorted weighted sample: each element stands for ``weight`` copies."""

    elements: np.ndarray      # sorted int64 keys
    weight: int               # power of two
    capacity: int             # power of two

    def __post_init__(self):
        object.__setattr__(
            self, "elements", np.asarray(self.elements, dtype=np.int64)
        )

    @property
    def weighted_size(self) -> int:
        return self.weight * len(self.elements)

    @staticmethod
    def singleton(key: int, capacity: int) -> "CompactedBuffer":
        return CompactedBuffer(np.array([key], dtype=np.int64), 1, capacity)


def compact(elements, k: int) -> np.ndarray:
    """Sort ascending and keep the 1-indexed even positions if over k.

    Unchanged when the input already fits; the caller doubles the weight
    exactly when thinning happened.
    """
    arr = np.sort(np.asarray(elements, dtype=np.int64))
    if len(arr) <= k:
        return arr
    if len(arr) > 2 * k:
        raise ValueError("compact input may not exceed 2k elements")
    return arr[1::2]


def doubling_update(buf_a: CompactedBuffer, buf_b: CompactedBuffer) -> CompactedBuffer:
    """Merge two equal-weight buffers, compacting once if over capacity."""
    if buf_a.weight != buf_b.weight:
        raise ValueError("equal-round merge requires equal weights")
    if buf_a.capacity != buf_b.capacity:
        raise ValueError("buffers must share a capacity")
    k = buf_a.capacity
    merged = np.concatenate([buf_a.elements, buf_b.elements])
    merged.sort()
    if len(merged) <= k:
        return CompactedBuffer(merged, buf_a.weight, k)
    return CompactedBuffer(merged[1::2], buf_a.weight * 2, k)


def rank_query(buffer: CompactedBuffer, z) -> int:
    """Weighted count of buffer elements at or below z."""
    if len(buffer.elements) == 0:
        raise ValueError("rank query on an empty buffer")
    return buffer.weight * int(
        np.searchsorted(buffer.elements, z, side="right")
    )


def quantile_query(buffer: CompactedBuffer, z) -> float:
    """rank_query normalised by the buffer's weighted size."""
    return rank_query(buffer, z) / buffer.weighted_size


# ---------------------------------------------------------------------------
# serialization: little-endian int64s, length-prefixed element list


def serialize_buffer(buffer: CompactedBuffer) -> bytes:
    head = struct.pack("<q", len(buffer.elements))
    body = buffer.elements.astype("<i8").tobytes()
    tail = struct.pack("<qq", buffer.weight, buffer.capacity)
    return head + body + tail


def deserialize_buffer(data: bytes) -> CompactedBuffer:
    (count,) = struct.unpack_from("<q", data, 0)
    elements = np.frombuffer(data, dtype="<i8", count=count, offset=8).copy()
    weight, capacity = struct.unpack_from("<qq", data, 8 + 8 * count)
    return CompactedBuffer(elements, weight, capacity)


# ---------------------------------------------------------------------------
# uniform sampling estimator


def sample_size(n: int, eps: float, c: float = 8.0) -> int:
    """Per-node sample count: ceil(c * ln(n) / eps^2)."""
    return int(math.ceil(c * math.log(n) / (eps * eps)))


def uniform_sample_quantile(
    phi: float,
    eps: float,
    engine: RoundEngine,
    ids: np.ndarray,
    *,
    c: float = 8.0,
    exhaustive: bool = False,
    node_chunk: int = 2048,
) -> np.ndarray:
    """Every node samples s uniform values over s rounds and outputs the
    sample element whose in-sample quantile is nearest phi.

    The in-sample quantile of the i-th smallest of s elements is i/s;
    ties between two candidates resolve to the larger index. In
    ``exhaustive`` mode each node's sample is replaced by one copy of
    every value (a degenerate oracle mode for tests: the output is then
    the exact quantile whenever phi * n is integral).
    """
    n = engine.n
    ids = np.asarray(ids)
    if exhaustive:
        pool = np.sort(ids)
        idx = _nearest_quantile_index(len(pool), phi)
        return np.full(n, pool[idx], dtype=ids.dtype)
    s = sample_size(n, eps, c)
    if engine.rounds + s > engine.config.max_rounds:
        raise BudgetExceededError("sample size exceeds the round budget")
    idx = _nearest_quantile_index(s, phi)
    out = np.empty(n, dtype=ids.dtype)
    # nodes draw their samples round by round; materialised in node blocks
    draws = np.empty((s, n), dtype=np.int64)
    for j in range(s):
        rd = engine.next_round()
        peers = rd.peers()
        if rd.failed is not None:
            own = np.arange(n)
            peers = np.where(rd.failed, own, peers)
        draws[j] = peers
    for start in range(0, n, node_chunk):
        stop = min(n, start + node_chunk)
        block = ids[draws[:, start:stop]]
        part = np.partition(block, idx, axis=0)
        out[start:stop] = part[idx]
    return out


def _nearest_quantile_index(s: int, phi: float) -> int:
    """0-based index i minimising |(i+1)/s - phi|, ties to the larger i."""
    target = phi * s
    lo = int(math.floor(target))
    candidates = [i for i in (lo - 1, lo, lo + 1) if 0 <= i < s]
    best = min(candidates, key=lambda i: (abs((i + 1) / s - phi), -i))
    return best


# ---------------------------------------------------------------------------
# deterministic error-bound checking (synchronous merge tree)


def _tree_levels(data: np.ndarray, k: int | None):
    """Run the synchronous pairwise doubling schedule over ``data``.

    Level j holds n'/2^j buffers of equal size; rows stay sorted. With a
    capacity every merge beyond size k compacts once, doubling the level
    weight. Returns (final sorted elements, final weight).
    """
    n_prime = len(data)
    level = np.sort(np.asarray(data, dtype=np.int64).reshape(n_prime, 1), axis=1)
    weight = 1
    while level.shape[0] > 1:
        half = level.shape[0] // 2
        merged = np.concatenate([level[0::2], level[1::2]], axis=1)
        merged.sort(axis=1)
        if k is not None and merged.shape[1] > k:
            merged = merged[:, 1::2]
            weight *= 2
        level = merged
    return level[0], weight


def compaction_error_check(
    n_prime: int,
    k: int,
    data: np.ndarray,
    *,
    z_values: np.ndarray | None = None,
) -> int:
    """Max weighted-rank error between the uncompacted and compacted runs
    of one merge tree, asserted against the deterministic bound.

    Both runs traverse the identical tree; the sweep defaults to every
    data element.
    """
    data = np.asarray(data, dtype=np.int64)
    if len(data) != n_prime:
        raise ValueError("data length must equal n_prime")
    bound = compaction_error_bound(n_prime, k)
    full, w_full = _tree_levels(data, None)
    tilde, w_tilde = _tree_levels(data, k)
    if w_full != 1:
        raise AssertionError("uncompacted run must keep weight 1")
    if len(tilde) * w_tilde != n_prime:
        raise AssertionError("weighted size was not conserved")
    zs = data if z_values is None else np.asarray(z_values, dtype=np.int64)
    r_full = np.searchsorted(full, zs, side="right")
    r_tilde = w_tilde * np.searchsorted(tilde, zs, side="right")
    err = int(np.abs(r_full - r_tilde).max())
    if err > bound:
        raise AssertionError(
            f"compaction error {err} exceeded deterministic bound {bound}"
        )
    return err


def doubling_gossip_estimate(
    engine: RoundEngine,
    ids: np.ndarray,
    n_prime: int,
    k: int,
    *,
    dtype=np.int32,
) -> tuple[np.ndarray, int]:
    """Population-level doubling with compaction: every node's buffer after
    T = log2(n') + 1 rounds.

    Round 0 seeds each node's buffer with one uniformly sampled value;
    each later round merges in the contacted node's buffer (compacting at
    capacity k). Returns (buffers sorted row-wise, weight); all buffers
    share one size and weight on the synchronous schedule.
    """
    n = engine.n
    if n_prime < 2 or n_prime & (n_prime - 1):
        raise ValueError("n_prime must be a power of two >= 2")
    rounds = int(math.log2(n_prime)) + 1
    rd = engine.next_round()
    seed_peers = rd.peers()
    buffers = np.asarray(ids, dtype=dtype)[seed_peers].reshape(n, 1)
    weight = 1
    scratch = None
    for _ in range(rounds - 1):
        rd = engine.next_round()
        size = buffers.shape[1]
        peers = rd.peers(message_weight=size)
        if 2 * size > k:
            # steady state: merge into a reused scratch block, compact back
            if scratch is None or scratch.shape[1] != 2 * size:
                scratch = np.empty((n, 2 * size), dtype=dtype)
            scratch[:, :size] = buffers
            scratch[:, size:] = buffers[peers]
            scratch.sort(axis=1)
            if size == k:
                np.copyto(buffers, scratch[:, 1::2])
            else:
                buffers = scratch[:, 1::2].copy()
            weight *= 2
        else:
            merged = np.concatenate([buffers, buffers[peers]], axis=1)
            merged.sort(axis=1)
            buffers = merged
    return buffers, weight
