"""Tournament protocols for approximate quantile computation.

Phase I shifts the quantiles around the target to the median: each node
pulls two uniform peers and keeps the smaller (or larger) of their
previous-iteration values, performing the step only with probability
``delta`` in the last iteration. Phase II amplifies the median: each node
pulls three peers and keeps the median value. A final round of K pulls
lets every node output the median of a uniform sample.

The failure-robust variants pull from a larger batch per iteration and
use the first "good" pulls, a pull being good when it neither failed nor
contacted a node that was bad at the end of the previous iteration. With
``mu == 0`` the batch collapses to the exact number of pulls the plain
protocol makes, so both variants consume identical randomness and produce
identical trials.

States are vectors of canonical key ids (see ``engine.canonical_ids``);
all comparisons are id comparisons.
"""
from __future__ import annotations

import math

import numpy as np

from .engine import (
    RoundEngine,
    SimConfig,
    TrialReport,
    canonical_ids,
)
from .schedules import (
    SHRINK_HIGH,
    three_tournament_schedule,
    two_tournament_schedule,
)

# ---------------------------------------------------------------------------
# quantile-region bookkeeping


def quantile_cuts(n: int, lo_q: float, hi_q: float) -> tuple[int, int]:
    """Integer id cuts for the regions L (< lo_q), M, H (> hi_q).

    A key of 0-based id r has quantile (r + 1) / n. Returns
    ``(lo_cut, hi_start)``: ids below ``lo_cut`` are L, ids at or above
    ``hi_start`` are H.
    """
    lo_cut = max(0, min(n, math.ceil(lo_q * n - 1e-9) - 1))
    hi_start = max(0, min(n, math.floor(hi_q * n + 1e-9)))
    return lo_cut, max(hi_start, lo_cut)


def lmh_counts(ids: np.ndarray, lo_cut: int, hi_start: int) -> tuple[int, int, int]:
    low = int(np.count_nonzero(ids < lo_cut))
    high = int(np.count_nonzero(ids >= hi_start))
    return low, ids.shape[0] - low - high, high


# ---------------------------------------------------------------------------
# pure combining steps (forced-contact testable)


def phase1_step(
    v_first: np.ndarray,
    v_second: np.ndarray,
    direction: str,
    do_tournament: np.ndarray | None = None,
) -> np.ndarray:
    """Combine two pulled values: min (shrink-high) or max (shrink-low).

    Nodes with ``do_tournament`` False copy their first pull instead.
    """
    two = np.minimum(v_first, v_second) if direction == SHRINK_HIGH else np.maximum(v_first, v_second)
    if do_tournament is None:
        return two
    return np.where(do_tournament, two, v_first)


def phase2_step(v1: np.ndarray, v2: np.ndarray, v3: np.ndarray) -> np.ndarray:
    """Median of three pulled values."""
    return v1 + v2 + v3 - np.minimum(np.minimum(v1, v2), v3) - np.maximum(np.maximum(v1, v2), v3)


# ---------------------------------------------------------------------------
# plain (failure-oblivious) iterations
#
# Under failures the plain protocols substitute the puller's own previous
# value for each failed pull; the robust variants below are the ones meant
# to run with failures enabled.


def _pull_values(values: np.ndarray, engine: RoundEngine) -> tuple[np.ndarray, "object"]:
    rd = engine.next_round()
    peers = rd.peers()
    pulled = values[peers]
    if rd.failed is not None:
        pulled = np.where(rd.failed, values, pulled)
    return pulled, rd


def phase1_iteration(
    values: np.ndarray,
    delta: float,
    direction: str,
    engine: RoundEngine,
) -> np.ndarray:
    """One two-pull iteration; costs 2 rounds regardless of the branch."""
    v1, rd1 = _pull_values(values, engine)
    do_t = None
    if delta < 1.0:
        do_t = rd1.rng.random(engine.n) < delta
    v2, _ = _pull_values(values, engine)
    return phase1_step(v1, v2, direction, do_t)


def phase2_iteration(values: np.ndarray, engine: RoundEngine) -> np.ndarray:
    """One three-pull median iteration; costs 3 rounds."""
    v1, _ = _pull_values(values, engine)
    v2, _ = _pull_values(values, engine)
    v3, _ = _pull_values(values, engine)
    return phase2_step(v1, v2, v3)


def _odd(k: int) -> int:
    return k if k % 2 == 1 else k + 1


def final_median_sample(values: np.ndarray, k_sample: int, engine: RoundEngine) -> np.ndarray:
    """Each node pulls K peers over K rounds and outputs their median.

    K is rounded up to the next odd number so the median is an element.
    """
    k = _odd(max(1, k_sample))
    picked = np.empty((k, engine.n), dtype=values.dtype)
    for j in range(k):
        picked[j], _ = _pull_values(values, engine)
    return np.partition(picked, k // 2, axis=0)[k // 2]


# ---------------------------------------------------------------------------
# failure-robust machinery


def phase_batch_size(mu: float) -> int:
    """Pulls per robust tournament iteration: ceil((4/(1-mu)) * log2(4/(1-mu))) + 1.

    Collapses to the plain protocol's pull count when mu == 0 (batch
    sizing is inflated only when failures are possible).
    """
    if mu <= 0.0:
        return 0  # caller substitutes the required pull count
    base = 4.0 / (1.0 - mu)
    return int(math.ceil(base * math.log2(base))) + 1


def sample_batch_size(mu: float, k_sample: int) -> int:
    """Pulls backing the final K-sample under failures: ceil(4K/(1-mu)) + 1."""
    if mu <= 0.0:
        return k_sample
    return int(math.ceil(4.0 * k_sample / (1.0 - mu))) + 1


def robust_pull_batch(
    values: np.ndarray,
    good_prev: np.ndarray,
    need: int,
    batch: int,
    engine: RoundEngine,
    first_round_hook=None,
) -> tuple[np.ndarray, np.ndarray, object]:
    """Collect each node's first ``need`` good pulls out of ``batch`` rounds.

    Returns ``(picked, counts, hook_result)`` where ``picked[j, v]`` is
    the value of node v's (j+1)-th good pull (undefined past ``counts[v]``)
    and ``counts[v]`` is v's total number of good pulls in the batch.
    """
    n = engine.n
    picked = np.zeros((need, n), dtype=values.dtype)
    counts = np.zeros(n, dtype=np.int64)
    hook_result = None
    satisfied = False
    for j in range(batch):
        rd = engine.next_round()
        if satisfied and j > 0:
            # every node already has its pulls; the remaining batch rounds
            # still happen (round/message accounting) but cannot change
            # state, so their draws are skipped (rounds key their own
            # substreams, leaving all other draws untouched)
            performed = n if rd.failed is None else int(n - rd.failed.sum())
            rd.count_messages(performed)
            continue
        peers = rd.peers()
        if j == 0 and first_round_hook is not None:
            hook_result = first_round_hook(rd)
        good_pull = good_prev[peers]
        if rd.failed is not None:
            good_pull = good_pull & ~rd.failed
        sel = good_pull & (counts < need)
        if np.any(sel):
            nodes = np.nonzero(sel)[0]
            picked[counts[nodes], nodes] = values[peers[nodes]]
        counts[good_pull] += 1
        if not satisfied:
            satisfied = bool((counts >= need).all())
    return picked, counts, hook_result


def robust_phase1_iteration(
    values: np.ndarray,
    good_prev: np.ndarray,
    delta: float,
    direction: str,
    batch: int,
    engine: RoundEngine,
) -> tuple[np.ndarray, np.ndarray]:
    """Robust two-pull iteration; returns (new values, new good flags).

    A node needs two good pulls for the tournament branch and one for the
    copy branch; with fewer it keeps its value and turns bad.
    """
    n = engine.n
    hook = None
    if delta < 1.0:
        hook = lambda rd: rd.rng.random(n) < delta  # noqa: E731
    picked, counts, do_t = robust_pull_batch(
        values, good_prev, 2, max(batch, 2), engine, first_round_hook=hook
    )
    required = np.full(n, 2) if do_t is None else np.where(do_t, 2, 1)
    good = counts >= required
    stepped = phase1_step(picked[0], picked[1], direction, do_t)
    return np.where(good, stepped, values), good


def robust_phase2_iteration(
    values: np.ndarray,
    good_prev: np.ndarray,
    batch: int,
    engine: RoundEngine,
) -> tuple[np.ndarray, np.ndarray]:
    """Robust three-pull median iteration."""
    picked, counts, _ = robust_pull_batch(values, good_prev, 3, max(batch, 3), engine)
    good = counts >= 3
    stepped = phase2_step(picked[0], picked[1], picked[2])
    return np.where(good, stepped, values), good


def robust_final_median_sample(
    values: np.ndarray,
    good_prev: np.ndarray,
    k_sample: int,
    batch: int,
    engine: RoundEngine,
) -> tuple[np.ndarray, np.ndarray]:
    """Robust K-sample: nodes with K good pulls output the median of the
    first K, the rest output nothing (returned mask False)."""
    k = _odd(max(1, k_sample))
    picked, counts, _ = robust_pull_batch(values, good_prev, k, max(batch, k), engine)
    has_output = counts >= k
    medians = np.partition(picked, k // 2, axis=0)[k // 2]
    return medians, has_output


def adoption_rounds(
    outputs: np.ndarray,
    has_output: np.ndarray,
    t_extra: int,
    engine: RoundEngine,
) -> tuple[np.ndarray, np.ndarray]:
    """Let answer-less nodes pull for t_extra rounds and adopt any answer.

    Rounds where no node lacks an answer are skipped entirely (nothing
    would be transmitted), so a failure-free robust trial consumes exactly
    the plain trial's rounds.
    """
    outputs = outputs.copy()
    has_output = has_output.copy()
    for _ in range(t_extra):
        if bool(has_output.all()):
            break
        rd = engine.next_round()
        missing = ~has_output
        peers = rd.peers(actors=missing)
        can = missing & has_output[peers]
        if rd.failed is not None:
            can &= ~rd.failed
        outputs[can] = outputs[peers[can]]
        has_output |= can
    return outputs, has_output


# ---------------------------------------------------------------------------
# full protocol runs


def _tournament_core(
    ids: np.ndarray,
    target_rank: int,
    eps: float,
    engine: RoundEngine,
    k_sample: int,
    *,
    phase2_eps_factor: float = 4.0,
    robust: bool = False,
    record_lmh: bool = False,
):
    """Run Phase I + Phase II + final sample over an id state.

    Returns ``(outputs, has_output, info)`` with per-node output ids.
    ``robust`` switches every pull to the good-pull batch machinery, with
    batch sizes derived from the engine's failure bound mu.
    """
    n = engine.n
    phi_eff = target_rank / n
    sched1 = two_tournament_schedule(phi_eff, eps)
    sched2 = three_tournament_schedule(eps / phase2_eps_factor, n, k_sample)
    mu = engine.config.failure.mu if engine.config.failure.active else 0.0
    batch = phase_batch_size(mu)
    values = ids
    good = np.ones(n, dtype=bool)
    good_trace: list[int] = []
    lmh1: list[tuple[int, int, int]] = []
    lo_cut, hi_start = quantile_cuts(n, phi_eff - eps, phi_eff + eps)
    for delta in sched1.delta:
        if robust:
            values, good = robust_phase1_iteration(
                values, good, delta, sched1.direction, batch, engine
            )
            good_trace.append(int(good.sum()))
        else:
            values = phase1_iteration(values, delta, sched1.direction, engine)
        if record_lmh:
            lmh1.append(lmh_counts(values, lo_cut, hi_start))
    lmh2: list[tuple[int, int, int]] = []
    if record_lmh:
        entry_sorted = np.sort(values)
        lo2, hi2 = quantile_cuts(n, 0.5 - sched2.eps, 0.5 + sched2.eps)
        lo_val = entry_sorted[lo2] if lo2 < n else n
        hi_val = entry_sorted[hi2] if hi2 < n else n
    for _ in range(sched2.t):
        if robust:
            values, good = robust_phase2_iteration(values, good, batch, engine)
            good_trace.append(int(good.sum()))
        else:
            values = phase2_iteration(values, engine)
        if record_lmh:
            low = int(np.count_nonzero(values < lo_val))
            high = int(np.count_nonzero(values >= hi_val))
            lmh2.append((low, n - low - high, high))
    if robust:
        sample_batch = sample_batch_size(mu, _odd(max(1, k_sample)))
        outputs, has_output = robust_final_median_sample(
            values, good, k_sample, sample_batch, engine
        )
    else:
        outputs = final_median_sample(values, k_sample, engine)
        has_output = np.ones(n, dtype=bool)
    info = {
        "phase1_iterations": sched1.t,
        "phase2_iterations": sched2.t,
        "lmh_phase1": lmh1,
        "lmh_phase2": lmh2,
        "direction": sched1.direction,
        "good_trace": good_trace,
    }
    return outputs, has_output, info


def _clamped_rank(phi: float, n: int) -> int:
    return max(1, min(n, math.ceil(phi * n - 1e-9)))


def _make_state(config: SimConfig, values):
    engine = RoundEngine(config)
    if values is None:
        values = engine.values_rng().permutation(config.n)
    else:
        values = np.asarray(values)
        if values.shape[0] != config.n:
            raise ValueError("values length must equal config.n")
    ids, value_by_rank = canonical_ids(values)
    return engine, ids, value_by_rank


def _finish_report(
    engine: RoundEngine,
    report: TrialReport,
    outputs_ids: np.ndarray,
    has_output: np.ndarray,
    value_by_rank: np.ndarray,
    target_rank: int,
) -> TrialReport:
    out_vals = np.where(has_output, value_by_rank[outputs_ids].astype(float), np.nan)
    ranks = np.where(has_output, outputs_ids + 1, 0)
    report.rounds = engine.rounds
    report.messages = engine.messages
    report.outputs = out_vals
    report.output_ranks = ranks
    if has_output.any():
        report.max_rank_error = int(np.abs(ranks[has_output] - target_rank).max())
    report.details["target_rank"] = target_rank
    report.details["missing_outputs"] = int(np.count_nonzero(~has_output))
    return report


def approx_quantile(
    phi: float,
    eps: float,
    config: SimConfig,
    values=None,
    *,
    k_sample: int = 30,
    record_lmh: bool = True,
) -> TrialReport:
    """The epsilon-approximate phi-quantile protocol, one full trial.

    Every node ends up holding an output whose initial rank should lie in
    [(phi - eps) n, (phi + eps) n]. Input values default to a seeded
    permutation; pass an array to run on specific data.
    """
    engine, ids, value_by_rank = _make_state(config, values)
    n = config.n
    target_rank = _clamped_rank(phi, n)
    report = TrialReport()
    if n == 1:
        return _finish_report(
            engine, report, np.zeros(1, dtype=np.int64), np.ones(1, dtype=bool),
            value_by_rank, target_rank,
        )
    outputs, has_output, info = _tournament_core(
        ids, target_rank, eps, engine, k_sample, record_lmh=record_lmh
    )
    report.phase1_iterations = info["phase1_iterations"]
    report.phase2_iterations = info["phase2_iterations"]
    report.per_iteration_lmh = info["lmh_phase1"] + info["lmh_phase2"]
    report.details["lmh_phase1"] = info["lmh_phase1"]
    report.details["lmh_phase2"] = info["lmh_phase2"]
    return _finish_report(engine, report, outputs, has_output, value_by_rank, target_rank)


def robust_approx_quantile(
    phi: float,
    eps: float,
    t_extra: int,
    config: SimConfig,
    values=None,
    *,
    k_sample: int = 30,
    record_lmh: bool = False,
) -> TrialReport:
    """Failure-robust approximate quantile with t_extra adoption rounds.

    With mu == 0 this reproduces :func:`approx_quantile` bit for bit given
    the same config.
    """
    engine, ids, value_by_rank = _make_state(config, values)
    n = config.n
    target_rank = _clamped_rank(phi, n)
    report = TrialReport()
    if n == 1:
        return _finish_report(
            engine, report, np.zeros(1, dtype=np.int64), np.ones(1, dtype=bool),
            value_by_rank, target_rank,
        )
    outputs, has_output, info = _tournament_core(
        ids, target_rank, eps, engine, k_sample, robust=True, record_lmh=record_lmh
    )
    report.details["missing_before_adoption"] = int(np.count_nonzero(~has_output))
    report.details["good_trace"] = info["good_trace"]
    outputs, has_output = adoption_rounds(outputs, has_output, t_extra, engine)
    report.phase1_iterations = info["phase1_iterations"]
    report.phase2_iterations = info["phase2_iterations"]
    report.per_iteration_lmh = info["lmh_phase1"] + info["lmh_phase2"]
    return _finish_report(engine, report, outputs, has_output, value_by_rank, target_rank)
