"""Seeded experiment harness: trial runners, oracle checks, reports.

Success columns are always computed from the sort-based rank oracle (the
initial canonical ranking), never from protocol-internal state. Re-running
a command with the same config and seeds reproduces byte-identical CSV
data rows; seed-level parallelism (env ``GOSSIPQ_THREADS``) does not
affect row content or order.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .engine import FailureModel, RoundEngine, SimConfig
from .exact import ExactParams, TrialFailure, exact_quantile
from .schedules import three_tournament_schedule, two_tournament_schedule
from .sketch import compaction_error_check
from .tournament import approx_quantile, robust_approx_quantile

CSV_COLUMNS = (
    "experiment", "n", "phi", "eps", "mu", "seed",
    "rounds", "messages", "max_rank_error", "success",
)


def rank_window(n: int, phi: float, eps: float) -> tuple[int, int]:
    """Inclusive 1-based rank bounds of an acceptable output."""
    lo = max(1, int(math.ceil((phi - eps) * n - 1e-9)))
    hi = min(n, int(math.floor((phi + eps) * n + 1e-9)))
    return lo, hi


def _failure(mu: float, seed: int) -> FailureModel:
    if mu <= 0:
        return FailureModel()
    return FailureModel(mode="uniform", mu=mu, seed=seed)


# ---------------------------------------------------------------------------
# trial runners (one CSV row each)


def run_approx_trial(n, phi, eps, seed, mu=0.0, k_sample=30):
    config = SimConfig(n=n, seed=seed, failure=_failure(mu, seed))
    report = approx_quantile(phi, eps, config, k_sample=k_sample)
    lo, hi = rank_window(n, phi, eps)
    ranks = report.output_ranks
    ok = bool(((ranks >= lo) & (ranks <= hi)).all())
    return {
        "experiment": "approx", "n": n, "phi": phi, "eps": eps, "mu": mu,
        "seed": seed, "rounds": report.rounds, "messages": report.messages,
        "max_rank_error": report.max_rank_error, "success": int(ok),
    }


def run_robust_trial(n, phi, eps, seed, mu, t_extra, k_sample=30):
    config = SimConfig(n=n, seed=seed, failure=_failure(mu, seed))
    report = robust_approx_quantile(phi, eps, t_extra, config, k_sample=k_sample)
    lo, hi = rank_window(n, phi, eps)
    ranks = report.output_ranks
    answered = ranks > 0
    correct = answered & (ranks >= lo) & (ranks <= hi)
    bad = int(np.count_nonzero(~correct))
    ok = bad <= n / 2 ** t_extra
    return {
        "experiment": "robust", "n": n, "phi": phi, "eps": eps, "mu": mu,
        "seed": seed, "rounds": report.rounds, "messages": report.messages,
        "max_rank_error": report.max_rank_error, "success": int(ok),
        "_nodes_without_answer": bad,
    }


def run_exact_trial(n, phi, seed, mu=0.0, params: ExactParams | None = None):
    config = SimConfig(n=n, seed=seed, failure=_failure(mu, seed))
    engine_probe = RoundEngine(config)
    values = engine_probe.values_rng().permutation(n)
    k0 = max(1, min(n, int(math.ceil(phi * n - 1e-9))))
    oracle = float(np.sort(values)[k0 - 1])
    row = {
        "experiment": "exact", "n": n, "phi": phi,
        "eps": (params or ExactParams()).effective_eps(n), "mu": mu,
        "seed": seed, "rounds": 0, "messages": 0,
        "max_rank_error": 0, "success": 0,
    }
    try:
        result = exact_quantile(phi, config, values=values, params=params)
    except TrialFailure:
        row["max_rank_error"] = n
        return row
    row["rounds"] = result.rounds
    row["messages"] = result.messages
    row["success"] = int(result.value == oracle)
    if not row["success"]:
        rank = int(np.searchsorted(np.sort(values), result.value) + 1)
        row["max_rank_error"] = abs(rank - k0)
    return row


def run_sketch_trial(n_prime, k, seed):
    rng = np.random.default_rng(seed)
    data = rng.permutation(n_prime).astype(np.int64)
    err = compaction_error_check(n_prime, k, data)
    return {
        "experiment": "sketch", "n": n_prime, "phi": "", "eps": "",
        "mu": 0.0, "seed": seed,
        "rounds": int(math.log2(n_prime)) + 1, "messages": 0,
        "max_rank_error": err, "success": 1,
    }


def spread_experiment(n: int, eps: float, seed: int) -> int:
    """Rounds until an initial 2*floor(2 eps n) good set covers everyone.

    Each round every node pushes to one uniform peer and pulls from one
    uniform peer; a bad node turns good on contact with a good one.
    """
    if not 0 < eps < 0.125:
        raise ValueError("eps must lie in (0, 1/8)")
    config = SimConfig(n=n, seed=seed)
    engine = RoundEngine(config)
    initial = 2 * int(2 * eps * n)
    good = np.zeros(n, dtype=bool)
    good[engine.values_rng().choice(n, size=min(n, initial), replace=False)] = True
    rounds = 0
    while not bool(good.all()):
        snapshot = good
        rd = engine.next_round()
        pull_src = rd.peers()
        rd2 = engine.next_round()
        push_dst = rd2.peers()
        new_good = snapshot | snapshot[pull_src]
        pushed = np.zeros(n, dtype=bool)
        pushed[push_dst[snapshot]] = True
        good = new_good | pushed
        rounds += 1
    return rounds


def run_spread_trial(n, eps, seed):
    rounds = spread_experiment(n, eps, seed)
    threshold = math.ceil(math.log(8.0 / eps, 4.0))
    return {
        "experiment": "spread", "n": n, "phi": "", "eps": eps, "mu": 0.0,
        "seed": seed, "rounds": rounds, "messages": 2 * n * rounds,
        "max_rank_error": 0, "success": int(rounds >= threshold),
    }


def self_quantile(eps: float, config: SimConfig, values=None, *, k_sample=30):
    """Every node estimates its own value's quantile to within 2 eps.

    Runs the approximate protocol at the grid quantiles j*eps with
    accuracy eps/2; a node's estimate is eps times the number of grid
    answers strictly below its own key.
    """
    if not 0 < eps < 0.125:
        raise ValueError("eps must lie in (0, 1/8)")
    n = config.n
    engine = RoundEngine(config)
    if values is None:
        values = engine.values_rng().permutation(n)
    values = np.asarray(values)
    from .engine import canonical_ids
    ids, _ = canonical_ids(values)
    grid = [j * eps for j in range(1, math.ceil(1.0 / eps))]
    below = np.zeros(n, dtype=np.int64)
    total_rounds = 0
    total_messages = 0
    for j, phi_j in enumerate(grid):
        sub = SimConfig(
            n=n, seed=config.seed * 1_000_003 + j + 1, failure=config.failure,
            max_rounds=config.max_rounds,
        )
        report = approx_quantile(phi_j, eps / 2.0, sub, values=values,
                                 k_sample=k_sample, record_lmh=False)
        total_rounds += report.rounds
        total_messages += report.messages
        grid_rank = report.output_ranks  # 1-based per node
        below += (grid_rank - 1 < ids).astype(np.int64)
    estimates = eps * below
    return estimates, ids, total_rounds, total_messages


def run_selfq_trial(n, eps, seed, k_sample=30):
    config = SimConfig(n=n, seed=seed)
    estimates, ids, rounds, messages = self_quantile(
        eps, config, k_sample=k_sample
    )
    true_q = (ids + 1) / n
    worst = float(np.abs(estimates - true_q).max())
    return {
        "experiment": "selfq", "n": n, "phi": "", "eps": eps, "mu": 0.0,
        "seed": seed, "rounds": rounds, "messages": messages,
        "max_rank_error": int(round(worst * n)),
        "success": int(worst <= 2 * eps + 1e-12),
    }


# ---------------------------------------------------------------------------
# batch execution and reporting


def _worker(task):
    fn, kwargs = task
    return fn(**kwargs)


def run_batch(fn, tasks, threads: int | None = None):
    """Run one trial function over many kwargs dicts, seed-parallel."""
    if threads is None:
        threads = int(os.environ.get("GOSSIPQ_THREADS", "0")) or min(
            4, os.cpu_count() or 1
        )
    if threads <= 1 or len(tasks) <= 1:
        return [fn(**t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_worker, [(fn, t) for t in tasks], chunksize=1))


def fit_round_constant(rows) -> float | None:
    """Least-squares slope of rounds against log2 log2 n + log2(1/eps)."""
    xs, ys = [], []
    for row in rows:
        eps = row.get("eps")
        n = row.get("n")
        if not eps or not n or n < 4:
            continue
        xs.append(math.log2(math.log2(n)) + math.log2(1.0 / eps))
        ys.append(row["rounds"])
    if not xs:
        return None
    x = np.asarray(xs)
    y = np.asarray(ys, dtype=float)
    denom = float((x * x).sum())
    if denom == 0:
        return None
    return float((x * y).sum() / denom)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def summarize(rows, config_echo: dict) -> dict:
    by_exp: dict[str, list] = {}
    for row in rows:
        by_exp.setdefault(row["experiment"], []).append(row)
    experiments = {}
    for name, sub in by_exp.items():
        successes = sum(r["success"] for r in sub)
        rounds = [r["rounds"] for r in sub]
        experiments[name] = {
            "trials": len(sub),
            "successes": successes,
            "success_rate": successes / len(sub),
            "rounds_mean": float(np.mean(rounds)),
            "rounds_max": int(np.max(rounds)),
            "messages_mean": float(np.mean([r["messages"] for r in sub])),
            "max_rank_error_max": int(np.max([r["max_rank_error"] for r in sub])),
            "fitted_round_constant": (
                fit_round_constant(sub)
                if name in ("approx", "robust", "selfq") else None
            ),
        }
    return {"config": config_echo, "experiments": experiments}


def emit_report(rows, csv_path=None, json_path=None, config_echo=None) -> dict:
    """Write CSV rows and a JSON summary; returns the summary dict."""
    summary = summarize(rows, config_echo or {})
    if csv_path:
        with open(csv_path, "w") as fh:
            fh.write(rows_to_csv(rows))
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return summary


def schedule_text(phi: float, eps: float, n: int | None = None) -> str:
    """Human-readable schedule dump used by the CLI."""
    sched = two_tournament_schedule(phi, eps)
    lines = [
        f"phase-1 direction={sched.direction} T={sched.threshold!r}",
        "h=[" + ", ".join(repr(h) for h in sched.h) + "]",
        "delta=[" + ", ".join(repr(d) for d in sched.delta) + "]",
        f"t={sched.t}",
    ]
    if n is not None:
        s2 = three_tournament_schedule(eps, n)
        lines += [
            f"phase-2 T2={s2.threshold!r}",
            "l=[" + ", ".join(repr(v) for v in s2.l) + "]",
            f"t2={s2.t}",
        ]
    return "\n".join(lines)
