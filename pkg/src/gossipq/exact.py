"""Exact quantile computation by repeated approximate narrowing.

Each iteration brackets the answer with two approximate quantile runs,
spreads the global extremes of those approximations, filters every value
outside the bracket, duplicates the survivors onto valueless nodes via
weight-halving tokens and re-targets the rank accordingly. Once enough
copies of the answer exist, one last approximate run pins it down.

Internally a trial's value multiset is always a permutation of the key
ids ``0..n-1`` (valueless nodes hold dedicated top-ranked sentinel ids
standing for the infinity values the filter assigns), so every pulled or
pushed key is a single id.

The book-keeping quantities (current rank ``k``, rank-of-minimum ``R``,
valued count, duplication factor ``m``) are global values every node
derives from the same broadcast counts, so the per-iteration consistency
checks below are node-computable: an iteration whose counts show the
bracket missed the target rank is simply re-run with fresh randomness.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .aggregates import exact_count_multi, spread_min_max
from .engine import RoundEngine, SimConfig, canonical_ids
from .tournament import _tournament_core, adoption_rounds


class TrialFailure(RuntimeError):
    """A subroutine failed in a way the trial cannot recover from."""


class InvariantViolation(RuntimeError):
    """A book-keeping identity that should always hold was broken."""


@dataclass(frozen=True)
class ExactParams:
    """Desk-scale knobs of the exact algorithm.

    ``eps`` defaults to min(0.08, n^-0.05 / 2): the asymptotic rule capped
    so the inner tournaments (run at accuracies eps/2 and eps/3) stay
    inside their validity range and the duplication windows stay well
    below the fill cap.

    ``fill_cap`` bounds the duplicated population m * V to a fraction of
    n. Token relocation settles a copy only on an empty node, so its
    drain rate per phase is the vacancy fraction; at desk scale the
    duplication factor must be capped to keep that fraction bounded away
    from zero (asymptotically the occupied fraction n^-0.01 vanishes on
    its own).
    """

    eps: float | None = None
    max_iterations: int = 25
    k_sample: int = 30
    spread_c: int = 4
    pushsum_c: int = 4
    pushsum_extra: int = 30
    split_cap_c: int = 4
    fill_cap: float = 0.7
    tokens_per_node_cap: int = 3000
    verify: bool = True
    max_retries: int = 12
    final_t_extra: int | None = None  # robust mode; None -> ceil(log2 n)

    def effective_eps(self, n: int) -> float:
        if self.eps is not None:
            return self.eps
        return min(0.08, n ** -0.05 / 2.0)

    def capped_m(self, n: int, valued_count: int) -> int:
        """compute_m limited so m * valued_count <= fill_cap * n."""
        m = compute_m(n, valued_count)
        limit = self.fill_cap * n / valued_count
        while m > 1 and m > limit:
            m //= 2
        return m


@dataclass
class ExactResult:
    value: float
    rounds: int
    messages: int
    iterations: int
    rank: int
    details: dict = field(default_factory=dict)


def compute_m(n: int, valued_count: int) -> int:
    """Smallest power of two strictly above (n^0.99 / 2) / valued_count.

    Never below 1; equal to 1 whenever the ratio is below 1 (enough
    valued nodes already exist).
    """
    if valued_count < 1:
        raise ValueError("valued_count must be >= 1")
    ratio = (n ** 0.99 / 2.0) / valued_count
    m = 1
    while m <= ratio:
        m *= 2
    return m


def rank_update(k_prev: int, r_min: int, m: int) -> int:
    """New target rank after filtering and m-fold duplication."""
    if r_min < 1:
        raise InvariantViolation("rank of minimum must be >= 1")
    if r_min > k_prev:
        raise InvariantViolation("minimum landed above the target rank")
    return m * (k_prev - r_min + 1)


def filter_range(ids: np.ndarray, min_id: int, max_id: int, real_count: int) -> np.ndarray:
    """Valued mask after bracketing: inside [min, max] and not a sentinel.

    Filtering only ever turns nodes valueless; a sentinel (id at or above
    ``real_count``) never becomes valued even when the bracket's upper
    end is itself a sentinel key.
    """
    return (ids >= min_id) & (ids <= max_id) & (ids < real_count)


# ---------------------------------------------------------------------------
# token distribution


@dataclass
class TokenDistribution:
    key_index: np.ndarray      # per node: index of the valued key held, -1 none
    copy_rank: np.ndarray      # per node: copy index in [0, m), -1 none
    split_phases: int
    relocate_phases: int
    phi_trace: list[float]
    max_tokens_per_node: int


def _push_token_rounds(holders, engine):
    """Draw the per-round peer/failure vectors a token phase needs.

    Tokens at one node are pushed in consecutive rounds; the j-th token a
    node pushes uses round j's draws, so failures stay per (node, round).
    Returns per-token targets and failure bits.
    """
    order = np.argsort(holders, kind="stable")
    pos = np.empty(len(holders), dtype=np.int64)
    # position of each token within its holder's pushing sequence
    sorted_holders = holders[order]
    boundaries = np.empty(len(holders), dtype=bool)
    if len(holders):
        boundaries[0] = True
        boundaries[1:] = sorted_holders[1:] != sorted_holders[:-1]
        idx = np.arange(len(holders))
        start = np.maximum.accumulate(np.where(boundaries, idx, 0))
        pos[order] = idx - start
    n_rounds = int(pos.max()) + 1 if len(holders) else 0
    targets = np.empty(len(holders), dtype=np.int64)
    failed = np.zeros(len(holders), dtype=bool)
    for j in range(n_rounds):
        sub = pos == j
        acting = np.zeros(engine.n, dtype=bool)
        acting[holders[sub]] = True
        rd = engine.next_round()
        peer_vec = rd.peers(actors=acting)
        targets[sub] = peer_vec[holders[sub]]
        if rd.failed is not None:
            failed[sub] = rd.failed[holders[sub]]
    return targets, failed, n_rounds


def distribute_tokens(
    origin_holders: np.ndarray,
    m: int,
    engine: RoundEngine,
    *,
    split_cap_c: int = 4,
    tokens_per_node_cap: int = 3000,
    track_phi: bool = False,
) -> TokenDistribution:
    """Duplicate each origin value onto m distinct nodes.

    ``origin_holders[c]`` is the node currently holding the c-th valued
    key. Tokens start as (key c, weight m) pairs; splitting phases halve
    weights, pushing the lower copy-rank half to a uniform node, until
    all weights are 1; relocation phases then push every token but one
    off multi-token nodes until each token sits alone. A failed push
    leaves the token merged at its holder (weights are conserved per
    origin throughout). With m == 1 this is the identity and costs no
    rounds.

    Copy ranks order duplicates below their original: the original
    holder's retained token ends with copy rank m - 1.
    """
    v_count = len(origin_holders)
    n = engine.n
    key_index = np.full(n, -1, dtype=np.int64)
    copy_rank = np.full(n, -1, dtype=np.int64)
    if m == 1:
        key_index[origin_holders] = np.arange(v_count)
        copy_rank[origin_holders] = 0
        return TokenDistribution(key_index, copy_rank, 0, 0, [], 1)
    if m * v_count > n:
        raise TrialFailure("cannot place m copies per value on n nodes")

    holder = np.asarray(origin_holders, dtype=np.int64).copy()
    key = np.arange(v_count, dtype=np.int64)
    weight = np.full(v_count, m, dtype=np.int64)
    offset = np.zeros(v_count, dtype=np.int64)

    mu = engine.config.failure.mu if engine.config.failure.active else 0.0
    scale = 1.0 if mu == 0.0 else 2.0 / (1.0 - mu)
    cap = max(
        int(math.ceil(math.log2(m))),
        int(math.ceil(split_cap_c * scale * math.log2(max(2, n)))),
    )
    phi_trace: list[float] = []
    max_tokens = 1

    def record_phi():
        heavy = weight >= 2
        phi_trace.append(float(np.sum(weight[heavy].astype(np.float64) ** 2)))

    if track_phi:
        record_phi()

    split_phases = 0
    while bool((weight > 1).any()):
        if split_phases >= cap:
            raise TrialFailure("token splitting exceeded its phase cap")
        split = np.nonzero(weight > 1)[0]
        targets, failed, _ = _push_token_rounds(holder[split], engine)
        done = split[~failed]
        if len(done):
            half = weight[done] // 2
            # retained halves keep the upper copy-rank block
            new_key = key[done]
            new_weight = half
            new_offset = offset[done]
            weight[done] = half
            offset[done] = offset[done] + half
            holder_new = targets[~failed]
            key = np.concatenate([key, new_key])
            weight = np.concatenate([weight, new_weight])
            offset = np.concatenate([offset, new_offset])
            holder = np.concatenate([holder, holder_new])
        split_phases += 1
        if track_phi:
            record_phi()
        per_node = np.bincount(holder, minlength=n)
        max_tokens = max(max_tokens, int(per_node.max()))
        if max_tokens > tokens_per_node_cap:
            raise TrialFailure("per-node token pile exceeded its cap")

    relocate_phases = 0
    reloc_cap = 2 * int(math.ceil(split_cap_c * scale * math.log2(max(2, n))))
    while True:
        counts = np.bincount(holder, minlength=n)
        if int(counts.max()) <= 1:
            break
        if relocate_phases >= reloc_cap:
            raise TrialFailure("token relocation exceeded its phase cap")
        order = np.argsort(holder, kind="stable")
        sorted_holders = holder[order]
        first_of_group = np.empty(len(holder), dtype=bool)
        first_of_group[0] = True
        first_of_group[1:] = sorted_holders[1:] != sorted_holders[:-1]
        movers = order[~first_of_group]
        targets, failed, _ = _push_token_rounds(holder[movers], engine)
        holder[movers[~failed]] = targets[~failed]
        relocate_phases += 1

    key_index[holder] = key
    copy_rank[holder] = offset
    return TokenDistribution(
        key_index, copy_rank, split_phases, relocate_phases, phi_trace, max_tokens
    )


def robust_distribute_tokens(
    origin_holders: np.ndarray,
    m: int,
    engine: RoundEngine,
    *,
    split_cap_c: int = 4,
    tokens_per_node_cap: int = 3000,
    track_phi: bool = True,
) -> TokenDistribution:
    """Failure-aware token distribution (same process, merge-back on fail).

    With mu == 0 this is :func:`distribute_tokens` draw for draw.
    """
    return distribute_tokens(
        origin_holders, m, engine,
        split_cap_c=split_cap_c,
        tokens_per_node_cap=tokens_per_node_cap,
        track_phi=track_phi,
    )


# ---------------------------------------------------------------------------
# the full exact algorithm


@dataclass
class _State:
    ids: np.ndarray              # per-node current key id (permutation of 0..n-1)
    value_by_id: np.ndarray      # ascending; sentinels hold +inf
    real_count: int              # ids below this are actual values


def _run_bracket_tournament(state, target_rank, eps_run, engine, params, robust):
    outputs, has_output, _ = _tournament_core(
        state.ids, target_rank, eps_run, engine,
        params.k_sample, robust=robust, record_lmh=False,
    )
    return outputs, has_output


def narrow_window(
    state: _State,
    k: int,
    eps: float,
    engine: RoundEngine,
    params: ExactParams,
    robust: bool,
    scale: int,
) -> tuple[int, int, int, int, int]:
    """Bracket the target rank: approximate both window ends, spread their
    extremes, count the rank of each end among the current values.

    The bracket's containment margin is zero by construction (the lower
    end's promise window tops out exactly at rank k), so a single attempt
    misses with noticeable probability at small n. Every node knows k and
    both counted ranks, so a miss is detectable by all nodes at once;
    the window is then re-approximated and pooled with the previous
    attempts (extremes only improve), squaring the miss probability per
    retry. Returns ``(min_id, max_id, r_min, r_max, attempts)``.
    """
    n = engine.n
    lo_rank = max(1, min(n, int(math.ceil(k - eps / 2.0 * n - 1e-9))))
    hi_rank = max(1, min(n, int(math.ceil(k + eps / 2.0 * n - 1e-9))))
    # a window end whose target quantile degenerates past the edge of the
    # valued population is bracketed by the population extreme itself
    # (each valued node contributes its own key to the spread); the
    # extreme is trivially an eps/2-approximation of the clamped quantile
    lo_degenerate = k - eps / 2.0 * n <= 2.0
    hi_degenerate = k + eps / 2.0 * n >= state.real_count - 1
    valued_now = state.ids < state.real_count
    best_min, best_max = n, -1
    for attempt in range(params.max_retries + 1):
        if lo_degenerate:
            min_pool = np.where(valued_now, state.ids, n)
        else:
            lo_out, lo_has, _ = _tournament_core(
                state.ids, lo_rank, eps / 2.0, engine, params.k_sample,
                robust=robust,
            )
            min_pool = np.where(lo_has, lo_out, n)
        if hi_degenerate:
            max_pool = np.where(valued_now, state.ids, -1)
        else:
            hi_out, hi_has, _ = _tournament_core(
                state.ids, hi_rank, eps / 2.0, engine, params.k_sample,
                robust=robust,
            )
            max_pool = np.where(hi_has, hi_out, -1)
        spread = spread_min_max(
            min_pool, engine, c=params.spread_c, budget_scale=scale,
            max_values=max_pool,
        )
        if not spread.converged:
            raise TrialFailure("min/max spreading did not converge in budget")
        best_min = min(best_min, spread.minimum)
        best_max = max(best_max, spread.maximum)
        if best_min >= n or best_max < 0:
            raise TrialFailure("no tournament outputs to bracket with")
        counts = exact_count_multi(
            np.stack([state.ids <= best_min, state.ids <= best_max]),
            engine,
            c=params.pushsum_c, extra_rounds=params.pushsum_extra,
            budget_scale=scale,
        )
        if counts is None:
            raise TrialFailure("rank counting stayed ambiguous after retries")
        r_min, r_max = counts
        if not params.verify or (r_min <= k <= r_max):
            return best_min, best_max, r_min, r_max, attempt + 1
    raise TrialFailure("bracket repeatedly missed the target rank")


def _rebuild_state(state: _State, min_id: int, v_count: int, m: int,
                   dist: TokenDistribution) -> _State:
    """Re-canonicalise ids after filtering + duplication.

    The c-th surviving key's copies become ids c*m .. c*m + m - 1 (copy
    ranks below the original); valueless nodes receive fresh sentinel ids
    above the real range, in node order.
    """
    n = len(state.ids)
    real = m * v_count
    new_ids = np.empty(n, dtype=np.int64)
    holds = dist.key_index >= 0
    new_ids[holds] = dist.key_index[holds] * m + dist.copy_rank[holds]
    new_ids[~holds] = real + np.arange(n - real, dtype=np.int64)
    value_by_id = np.full(n, np.inf)
    value_by_id[:real] = np.repeat(
        state.value_by_id[min_id:min_id + v_count], m
    )
    return _State(new_ids, value_by_id, real)


def exact_quantile(
    phi: float,
    config: SimConfig,
    values=None,
    params: ExactParams | None = None,
    iteration_callback=None,
) -> ExactResult:
    """Compute the value of rank ceil(phi * n) exactly.

    Raises :class:`TrialFailure` when a subroutine fails unrecoverably
    (never observed at the tested scales with default parameters).
    ``iteration_callback(state, k, copies)`` is a diagnostics hook called
    after each narrowing iteration.
    """
    params = params or ExactParams()
    n = config.n
    k0 = max(1, min(n, int(math.ceil(phi * n - 1e-9))))
    engine = RoundEngine(config)
    if values is None:
        values = engine.values_rng().permutation(n)
    else:
        values = np.asarray(values)
        if values.shape[0] != n:
            raise ValueError("values length must equal config.n")
    ids, value_by_id = canonical_ids(values)
    if n == 1:
        return ExactResult(float(values[0]), 0, 0, 0, 1)
    state = _State(ids, value_by_id.astype(float), n)
    robust = config.failure.active
    mu = config.failure.mu if robust else 0.0
    scale = 1 if mu == 0.0 else int(math.ceil(1.0 / (1.0 - mu)))
    eps = params.effective_eps(n)

    k = k0
    copies = 1            # certified surviving duplicates of the answer
    m_product = 1
    iterations = 0
    retries_used = 0
    details: dict = {"k_trace": [k0], "m_trace": [], "v_trace": [],
                     "copies_trace": [], "attempts_trace": []}
    # the closing approximate run needs an answer block of ~eps*n ranks;
    # when eps*n is tiny the loop instead narrows until one value is left
    final_route = eps * n >= 2.0

    while iterations < params.max_iterations:
        lo_val = state.value_by_id[0]
        hi_val = state.value_by_id[state.real_count - 1]
        if lo_val == hi_val:
            details["exit"] = "all-equal"
            ans = float(lo_val)
            return ExactResult(
                ans, engine.rounds, engine.messages, iterations, k0,
                details | {"retries": retries_used, "copies": copies,
                           "m_product": m_product},
            )
        if final_route and copies >= eps * n:
            break

        min_id, max_id, r_min, r_max, attempts = narrow_window(
            state, k, eps, engine, params, robust, scale
        )
        retries_used += attempts - 1

        valued = filter_range(state.ids, min_id, max_id, state.real_count)
        count = exact_count_multi(
            valued[np.newaxis, :], engine,
            c=params.pushsum_c, extra_rounds=params.pushsum_extra,
            budget_scale=scale,
        )
        if count is None:
            raise TrialFailure("valued-count stayed ambiguous after retries")
        v_count = count[0]
        if v_count < 1:
            raise TrialFailure("no valued nodes survived the filter")
        m = params.capped_m(n, v_count)
        surviving = k - r_min + 1
        copies = m * min(copies, surviving)
        k = rank_update(k, r_min, m)
        m_product *= m

        holder_of_id = np.empty(n, dtype=np.int64)
        holder_of_id[state.ids] = np.arange(n)
        origin_holders = holder_of_id[min_id:min_id + v_count]
        dist = (robust_distribute_tokens if robust else distribute_tokens)(
            origin_holders, m, engine,
            split_cap_c=params.split_cap_c,
            tokens_per_node_cap=params.tokens_per_node_cap,
            track_phi=False,
        )
        state = _rebuild_state(state, min_id, v_count, m, dist)
        iterations += 1
        details["k_trace"].append(k)
        details["m_trace"].append(m)
        details["v_trace"].append(v_count)
        details["copies_trace"].append(copies)
        details["attempts_trace"].append(attempts)
        if iteration_callback is not None:
            iteration_callback(state, k, copies)

    # final approximate run: the answer now owns every rank in an
    # eps*n-wide window below (and including) k
    attempt = 0
    while True:
        final_rank = max(1, min(n, int(math.ceil(k - eps / 2.0 * n - 1e-9))))
        outputs, has_output, _ = _tournament_core(
            state.ids, final_rank, eps / 3.0, engine, params.k_sample,
            robust=robust,
        )
        if not has_output.any():
            raise TrialFailure("final run produced no outputs")
        answered = outputs[has_output]
        candidate_values = state.value_by_id[answered]
        consistent = bool((candidate_values == candidate_values[0]).all())
        verified = True
        if params.verify:
            z = int(answered[0])
            count = exact_count_multi(
                (state.ids <= z)[np.newaxis, :], engine,
                c=params.pushsum_c, extra_rounds=params.pushsum_extra,
                budget_scale=scale,
            )
            r_z = None if count is None else count[0]
            verified = (
                consistent and r_z is not None and (k - copies) < r_z <= k
            )
        else:
            verified = consistent
        if verified:
            break
        attempt += 1
        retries_used += 1
        if attempt > params.max_retries:
            raise TrialFailure("final output failed rank verification")

    if robust:
        t_extra = params.final_t_extra
        if t_extra is None:
            t_extra = int(math.ceil(math.log2(max(2, n))))
        outputs, has_output = adoption_rounds(outputs, has_output, t_extra, engine)
        details["nodes_with_answer"] = int(np.count_nonzero(has_output))
    ans = float(candidate_values[0])
    return ExactResult(
        ans, engine.rounds, engine.messages, iterations, k0,
        details | {"retries": retries_used, "copies": copies,
                   "m_product": m_product, "exit": "final-run"},
    )
