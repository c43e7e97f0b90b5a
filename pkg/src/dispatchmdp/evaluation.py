"""Policy performance: exact hypercube analysis and discrete-event simulation."""

from __future__ import annotations

import bisect
import heapq
import math
import random
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import stats

from ._linalg import DENSE_LIMIT, NumericalError, stationary_distribution
from .exact_mdp import GuardError
from .instance import Instance, Policy, full_mask, mask_bits

MAX_HYPERCUBE_UNITS = 20
WARMUP_FRACTION = 0.05


@dataclass
class EvalReport:
    mean_response_time: float
    loss_fraction: float
    utilization: np.ndarray
    method: str                            # "exact" or "simulated"
    ci_halfwidth: float | None = None
    horizon: int | None = None
    replications: int | None = None


def check_budget(inst: Instance, override: bool = False) -> None:
    if inst.N > MAX_HYPERCUBE_UNITS and not override:
        raise GuardError(f"hypercube model needs 2^{inst.N} states (limit N <= {MAX_HYPERCUBE_UNITS})")


def generator_matrix(inst: Instance, policy: Policy) -> sp.csr_matrix:
    """CTMC generator over busy masks: dispatches at rate lambda_j, completions at mu_l."""
    M = inst.n_masks
    masks = np.arange(M)
    acts = policy.actions
    ok = acts >= 0
    j_idx, x_idx = np.nonzero(ok)
    rows = [x_idx]
    cols = [x_idx | (1 << acts[ok])]
    vals = [inst.lam[j_idx]]
    for l in range(inst.N):
        busy = masks[(masks >> l) & 1 == 1]
        rows.append(busy)
        cols.append(busy & ~(1 << l))
        vals.append(np.full(busy.size, inst.mu[l]))
    Q = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(M, M))
    out = np.asarray(Q.sum(axis=1)).ravel()
    return (Q - sp.diags(out)).tocsr()


def hypercube_stationary(inst: Instance, policy: Policy, override: bool = False) -> np.ndarray:
    """Stationary probability of each busy mask, from global balance."""
    check_budget(inst, override)
    policy.check(inst)
    Q = generator_matrix(inst, policy)
    M = inst.n_masks
    if M > DENSE_LIMIT:
        rate = float(np.max(-Q.diagonal()))
        p = stationary_distribution(sp.identity(M, format="csr") + Q / rate)
    else:
        p = _balance_direct(Q)
    if np.min(p) < -1e-12:
        raise NumericalError("negative stationary probability")
    p = np.clip(p, 0.0, None)
    p /= p.sum()
    res = float(np.max(np.abs(Q.T @ p)))
    if res > 1e-10 * max(1.0, float(np.max(np.abs(Q.diagonal())))):
        raise NumericalError(f"balance residual {res:.3e} too large")
    return p


def _balance_direct(Q: sp.csr_matrix) -> np.ndarray:
    M = Q.shape[0]
    A = Q.T.tolil()
    A[0, :] = np.ones((1, M))
    b = np.zeros(M)
    b[0] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            p = np.atleast_1d(spla.spsolve(A.tocsc(), b))
        except spla.MatrixRankWarning as exc:
            raise NumericalError("balance equations are singular") from exc
    return p


def mean_response_time_exact(inst: Instance, policy: Policy, override: bool = False) -> EvalReport:
    p = hypercube_stationary(inst, policy, override)
    full = full_mask(inst.N)
    acts = policy.actions
    node = np.arange(inst.J)[:, None]
    per_call = np.where(acts >= 0, inst.t[np.maximum(acts, 0), node], 0.0)   # (J, M)
    served_rate = inst.total_rate * (1.0 - p[full])
    mean = float((p @ (inst.lam @ per_call)) / served_rate)
    util = mask_bits(inst.N).T.astype(float) @ p
    return EvalReport(
        mean_response_time=mean,
        loss_fraction=float(p[full]),
        utilization=util,
        method="exact",
    )


def erlang_b(servers: int, load: float) -> float:
    """Blocking probability of an M/M/c/c system with offered load ``load``."""
    b = 1.0
    for k in range(1, servers + 1):
        b = load * b / (k + load * b)
    return b


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass
class _Replication:
    mean: float
    responses: np.ndarray | None
    loss_fraction: float
    utilization: np.ndarray


def _simulate_once(inst: Instance, acts: list[list[int]], horizon: int, rng: random.Random,
                   keep_responses: bool) -> _Replication:
    N = inst.N
    full = full_mask(N)
    lam_total = inst.total_rate
    cum_lam = np.cumsum(inst.lam).tolist()
    last = inst.J - 1
    tt = inst.t.tolist()
    mu = inst.mu.tolist()
    warm = int(WARMUP_FRACTION * horizon)

    now = 0.0
    mask = 0
    pending: list[tuple[float, int]] = []       # (completion time, unit)
    started = [0.0] * N
    busy_time = [0.0] * N
    window_start = 0.0
    next_arrival = rng.expovariate(lam_total)
    served = lost = 0
    total = 0.0
    responses = [] if keep_responses else None

    while served < horizon:
        if pending and pending[0][0] <= next_arrival:
            now, i = heapq.heappop(pending)
            mask &= ~(1 << i)
            busy_time[i] += now - max(started[i], window_start)
            continue
        now = next_arrival
        next_arrival = now + rng.expovariate(lam_total)
        j = min(bisect.bisect_right(cum_lam, rng.random() * lam_total), last)
        if mask == full:
            if served >= warm:
                lost += 1
            continue
        i = acts[j][mask]
        mask |= 1 << i
        started[i] = now
        heapq.heappush(pending, (now + rng.expovariate(mu[i]), i))
        served += 1
        if served == warm:
            # measurement window opens; count only the busy time that falls inside it
            window_start = now
            busy_time = [0.0] * N
        elif served > warm:
            total += tt[i][j]
            if responses is not None:
                responses.append(tt[i][j])
    for _, i in pending:
        busy_time[i] += now - max(started[i], window_start)
    measured = horizon - warm
    span = now - window_start
    util = np.array(busy_time) / span if span > 0 else np.zeros(N)
    return _Replication(
        mean=total / measured,
        responses=np.array(responses) if responses is not None else None,
        loss_fraction=lost / (lost + measured),
        utilization=util,
    )


def simulate(
    inst: Instance,
    policy: Policy,
    horizon: int = 100_000,
    replications: int = 10,
    seed: int = 0,
    confidence: float = 0.95,
) -> EvalReport:
    """Event-driven simulation of the loss system under ``policy``.

    ``horizon`` counts served calls per replication; the first 5% of them are
    a warm-up and are dropped.  The confidence interval uses the spread of
    replication means (Student t), or 20 batch means of a single replication.
    """
    if horizon < 1 or replications < 1:
        raise ValueError("horizon and replications must be >= 1")
    policy.check(inst)
    acts = policy.actions.tolist()
    streams = np.random.SeedSequence(seed).spawn(replications)
    reps = [
        _simulate_once(inst, acts, horizon, random.Random(int(s.generate_state(1)[0])), replications == 1)
        for s in streams
    ]
    if replications > 1:
        means = np.array([r.mean for r in reps])
        mean = float(means.mean())
        half = float(stats.t.ppf(0.5 + confidence / 2, replications - 1) * means.std(ddof=1) / math.sqrt(replications))
    else:
        resp = reps[0].responses
        mean = reps[0].mean
        if resp.size >= 40:
            batches = np.array([b.mean() for b in np.array_split(resp, 20)])
            half = float(stats.t.ppf(0.5 + confidence / 2, 19) * batches.std(ddof=1) / math.sqrt(20))
        else:
            half = float("nan")
    return EvalReport(
        mean_response_time=mean,
        loss_fraction=float(np.mean([r.loss_fraction for r in reps])),
        utilization=np.mean([r.utilization for r in reps], axis=0),
        method="simulated",
        ci_halfwidth=half,
        horizon=horizon,
        replications=replications,
    )


@dataclass
class ComparisonRow:
    policy_name: str
    method: str
    mean_response: float
    loss_fraction: float
    ci_halfwidth: float | None


def evaluate(inst: Instance, policy: Policy, method: str = "auto", horizon: int = 100_000,
             replications: int = 10, seed: int = 0) -> EvalReport:
    if method == "auto":
        method = "exact" if inst.N <= MAX_HYPERCUBE_UNITS else "sim"
    if method == "exact":
        return mean_response_time_exact(inst, policy)
    if method == "sim":
        return simulate(inst, policy, horizon, replications, seed)
    raise ValueError(f"unknown evaluation method '{method}'")


def compare_policies(inst: Instance, policies: dict[str, Policy], method: str = "auto",
                     horizon: int = 100_000, replications: int = 10, seed: int = 0) -> list[ComparisonRow]:
    """Evaluate each named policy; simulated runs share the seed (common random numbers)."""
    if len(policies) < 2:
        raise ValueError("need at least two policies to compare")
    rows = []
    for name, policy in policies.items():
        rep = evaluate(inst, policy, method, horizon, replications, seed)
        rows.append(ComparisonRow(name, rep.method, rep.mean_response_time, rep.loss_fraction, rep.ci_halfwidth))
    return rows
