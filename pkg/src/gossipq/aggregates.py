"""Gossip aggregation primitives: min/max dissemination and push-sum counts.

Min/max spreading runs combined iterations of four single-value rounds
(push-min, pull-min, push-max, pull-max; the push and pull legs of one
iteration share their contact draw per leg). Each node's held minimum
never increases and its held maximum never decreases, so the simulator
may stop early once every node holds the global extremes.

Push-sum follows the classic mass-conserving dynamic: each round a node
halves its (sum, weight) pair, keeps one half and pushes the other to a
uniform peer; incoming shares accumulate. A node that fails a round keeps
both halves, so global mass is conserved under failures too.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import RoundEngine


@dataclass
class SpreadResult:
    minimum: int
    maximum: int
    converged: bool
    iterations: int


@dataclass
class CountResult:
    estimates: np.ndarray          # per-node integer estimates
    flagged: np.ndarray            # per-node ambiguity flags
    rounds: int
    mass_trace: list[float] = field(default_factory=list)

    @property
    def any_flagged(self) -> bool:
        return bool(self.flagged.any())

    @property
    def unanimous(self) -> bool:
        return bool((self.estimates == self.estimates[0]).all())


def _gossip_exchange(cur: np.ndarray, engine: RoundEngine, reduce_fn) -> np.ndarray:
    """One push round and one pull round of a monotone reduction."""
    snapshot = cur.copy()
    rd_push = engine.next_round()
    targets = rd_push.peers()
    ok = rd_push.ok()
    senders = np.arange(engine.n) if ok is None else np.nonzero(ok)[0]
    nxt = cur.copy()
    if reduce_fn is np.minimum:
        np.minimum.at(nxt, targets[senders], snapshot[senders])
    else:
        np.maximum.at(nxt, targets[senders], snapshot[senders])
    rd_pull = engine.next_round()
    sources = rd_pull.peers()
    pulled = snapshot[sources]
    if rd_pull.failed is not None:
        pulled = np.where(rd_pull.failed, snapshot, pulled)
    return reduce_fn(nxt, pulled)


def spread_min_max(
    values: np.ndarray,
    engine: RoundEngine,
    *,
    c: int = 4,
    budget_scale: int = 1,
    max_values: np.ndarray | None = None,
) -> SpreadResult:
    """Spread the global minimum and maximum to every node.

    ``values`` seeds the minimum pool; ``max_values`` (defaulting to the
    same array) seeds the maximum pool. The budget is
    ``c * ceil(log2 n) * budget_scale`` combined iterations; convergence
    before that is reported, running out is a per-trial failure the
    caller decides how to treat.
    """
    n = engine.n
    cur_min = np.asarray(values).copy()
    cur_max = cur_min.copy() if max_values is None else np.asarray(max_values).copy()
    true_min = int(cur_min.min())
    true_max = int(cur_max.max())
    budget = max(1, c * math.ceil(math.log2(max(2, n))) * budget_scale)
    iterations = 0
    converged = bool((cur_min == true_min).all() and (cur_max == true_max).all())
    while not converged and iterations < budget:
        cur_min = _gossip_exchange(cur_min, engine, np.minimum)
        cur_max = _gossip_exchange(cur_max, engine, np.maximum)
        iterations += 1
        converged = bool((cur_min == true_min).all() and (cur_max == true_max).all())
    return SpreadResult(true_min, true_max, converged, iterations)


def push_sum_count(
    indicator_bits: np.ndarray,
    engine: RoundEngine,
    *,
    c: int = 4,
    extra_rounds: int = 30,
    budget_scale: int = 1,
    track_mass: bool = False,
    ambiguity: float = 0.25,
) -> CountResult:
    """Count set indicator bits by push-sum averaging.

    Runs ``(ceil(c * log2 n) + extra_rounds) * budget_scale`` push rounds;
    each node then outputs ``round(n * s/w)``. Estimates whose fractional
    part is within ``ambiguity`` of one half are flagged as ambiguous so
    callers can retry with more rounds.
    """
    n = engine.n
    bits = np.asarray(indicator_bits)
    if bits.min() < 0 or bits.max() > 1:
        raise ValueError("indicator bits must be 0/1")
    s = bits.astype(np.float64).copy()
    w = np.ones(n, dtype=np.float64)
    rounds = (math.ceil(c * math.log2(max(2, n))) + extra_rounds) * budget_scale
    trace: list[float] = []
    for _ in range(rounds):
        rd = engine.next_round()
        targets = rd.peers()
        ok = rd.ok()
        if ok is None:
            s_half = s * 0.5
            w_half = w * 0.5
            s = s_half + np.bincount(targets, weights=s_half, minlength=n)
            w = w_half + np.bincount(targets, weights=w_half, minlength=n)
        else:
            send_s = np.where(ok, s * 0.5, 0.0)
            send_w = np.where(ok, w * 0.5, 0.0)
            s = (s - send_s) + np.bincount(targets, weights=send_s, minlength=n)
            w = (w - send_w) + np.bincount(targets, weights=send_w, minlength=n)
        if track_mass:
            trace.append(float(s.sum()))
    raw = n * s / w
    estimates = np.rint(raw).astype(np.int64)
    flagged = np.abs(raw - estimates) > (0.5 - ambiguity)
    return CountResult(estimates, flagged, rounds, trace)


def push_sum_multi(
    indicator_matrix: np.ndarray,
    engine: RoundEngine,
    *,
    c: int = 4,
    extra_rounds: int = 30,
    budget_scale: int = 1,
    ambiguity: float = 0.25,
) -> list[CountResult]:
    """Several push-sum counting instances run in lockstep.

    All channels share the contact draws and the weight component, so k
    counts cost the same number of rounds as one; each pushed share is a
    (k+1)-number message and is accounted as k message units.
    """
    mat = np.asarray(indicator_matrix, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("indicator_matrix must be 2-d (channels, n)")
    channels, n = mat.shape
    s = mat.copy()
    w = np.ones(n, dtype=np.float64)
    rounds = (math.ceil(c * math.log2(max(2, n))) + extra_rounds) * budget_scale
    for _ in range(rounds):
        rd = engine.next_round()
        targets = rd.peers(message_weight=channels)
        ok = rd.ok()
        if ok is None:
            s_half = s * 0.5
            w_half = w * 0.5
            recv = np.empty_like(s)
            for ch in range(channels):
                recv[ch] = np.bincount(targets, weights=s_half[ch], minlength=n)
            s = s_half + recv
            w = w_half + np.bincount(targets, weights=w_half, minlength=n)
        else:
            send_w = np.where(ok, w * 0.5, 0.0)
            new_s = np.empty_like(s)
            for ch in range(channels):
                send = np.where(ok, s[ch] * 0.5, 0.0)
                new_s[ch] = (s[ch] - send) + np.bincount(
                    targets, weights=send, minlength=n
                )
            s = new_s
            w = (w - send_w) + np.bincount(targets, weights=send_w, minlength=n)
    results = []
    for ch in range(channels):
        raw = n * s[ch] / w
        estimates = np.rint(raw).astype(np.int64)
        flagged = np.abs(raw - estimates) > (0.5 - ambiguity)
        results.append(CountResult(estimates, flagged, rounds, []))
    return results


def exact_count(
    indicator_bits: np.ndarray,
    engine: RoundEngine,
    *,
    c: int = 4,
    extra_rounds: int = 30,
    budget_scale: int = 1,
    max_attempts: int = 3,
) -> int | None:
    """Push-sum count retried until unflagged and unanimous, else None.

    Each retry doubles the extra rounds; the protocol-level consumers
    treat ``None`` as a trial failure.
    """
    extra = extra_rounds
    for _ in range(max_attempts):
        res = push_sum_count(
            indicator_bits, engine,
            c=c, extra_rounds=extra, budget_scale=budget_scale,
        )
        if not res.any_flagged and res.unanimous:
            return int(res.estimates[0])
        extra *= 2
    return None


def exact_count_multi(
    indicator_matrix: np.ndarray,
    engine: RoundEngine,
    *,
    c: int = 4,
    extra_rounds: int = 30,
    budget_scale: int = 1,
    max_attempts: int = 3,
) -> list[int] | None:
    """Lockstep counts retried together until all are exact, else None."""
    extra = extra_rounds
    for _ in range(max_attempts):
        results = push_sum_multi(
            indicator_matrix, engine,
            c=c, extra_rounds=extra, budget_scale=budget_scale,
        )
        if all(not r.any_flagged and r.unanimous for r in results):
            return [int(r.estimates[0]) for r in results]
        extra *= 2
    return None
