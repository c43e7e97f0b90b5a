"""Policy iteration over post-decision states (busy masks only).

The post-decision mask is the busy set right after a dispatch and before the
next event.  Under a fixed policy the masks form a Markov chain of size
``2**N``; its value table carries the same average cost as the augmented
formulation and is a weighted average of the augmented values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph

from . import exact_mdp
from ._linalg import bellman_residual, solve_average_cost
from .exact_mdp import GuardError, IterationRecord
from .instance import Instance, Policy, full_mask, greedy_policy, myopic_policy

MAX_PD_UNITS = 25


@dataclass(frozen=True, eq=False)
class PdValueTable:
    Jv: np.ndarray       # value per busy mask, Jv[0] = 0
    mu_x: float


@dataclass
class EquivalenceReport:
    mu_gap: float            # |mu_x - mu|
    value_violation: float   # max over masks of the anchored value-identity error
    mu: float
    mu_x: float

    def ok(self, tol: float = 1e-9) -> bool:
        return self.mu_gap <= tol and self.value_violation <= tol


def check_budget(inst: Instance, override: bool = False) -> None:
    if inst.N > MAX_PD_UNITS and not override:
        raise GuardError(f"post-decision solve needs 2^{inst.N} states (limit N <= {MAX_PD_UNITS})")


def dispatch_regions(inst: Instance, policy: Policy, s_x: int) -> dict[int, frozenset[int]]:
    """Nodes whose calls go to each unit when the busy mask is ``s_x``."""
    regions: dict[int, set[int]] = {l: set() for l in range(inst.N)}
    if s_x != full_mask(inst.N):
        for j in range(inst.J):
            regions[policy(j, s_x)].add(j)
    return {l: frozenset(nodes) for l, nodes in regions.items()}


def region_rates(inst: Instance, policy: Policy) -> np.ndarray:
    """(2**N, N) total call rate routed to unit l from mask x."""
    M = inst.n_masks
    rates = np.zeros((M, inst.N))
    acts = policy.actions
    ok = acts >= 0
    j_idx, x_idx = np.nonzero(ok)
    np.add.at(rates, (x_idx, acts[ok]), inst.lam[j_idx])
    return rates


def pd_transition_probs(inst: Instance, policy: Policy, s_x: int) -> dict[int, float]:
    D = inst.total_rate + sum(inst.mu[k] for k in range(inst.N) if s_x >> k & 1)
    row: dict[int, float] = {}
    if s_x == full_mask(inst.N):
        row[s_x] = inst.total_rate / D
    else:
        for l, nodes in dispatch_regions(inst, policy, s_x).items():
            if nodes:
                row[s_x | (1 << l)] = float(sum(inst.lam[j] for j in nodes) / D)
    for l in range(inst.N):
        if s_x >> l & 1:
            row[s_x & ~(1 << l)] = float(inst.mu[l] / D)
    return row


def pd_cost(inst: Instance, policy: Policy, s_x: int) -> float:
    if s_x == full_mask(inst.N):
        return 0.0
    D = inst.total_rate + sum(inst.mu[k] for k in range(inst.N) if s_x >> k & 1)
    total = sum(inst.lam[j] * inst.t[l, j]
                for l, nodes in dispatch_regions(inst, policy, s_x).items() for j in nodes)
    return float(total / D)


def pd_unit_costs(inst: Instance, policy: Policy, s_x: int) -> dict[int, float]:
    """Expected response time given that unit l is the one dispatched from ``s_x``."""
    out = {}
    for l, nodes in dispatch_regions(inst, policy, s_x).items():
        if nodes:
            rate = sum(inst.lam[j] for j in nodes)
            out[l] = float(sum(inst.lam[j] * inst.t[l, j] for j in nodes) / rate)
    return out


def pd_cost_vector(inst: Instance, policy: Policy) -> np.ndarray:
    acts = policy.actions
    node = np.arange(inst.J)[:, None]
    per_call = np.where(acts >= 0, inst.t[np.maximum(acts, 0), node], 0.0)
    return (inst.lam @ per_call) / inst.event_rate()


def pd_transition_matrix(inst: Instance, policy: Policy) -> sp.csr_matrix:
    N, M = inst.N, inst.n_masks
    D = inst.event_rate()
    masks = np.arange(M)
    rates = region_rates(inst, policy)
    rows, cols, vals = [], [], []
    for l in range(N):
        src = np.flatnonzero(rates[:, l] > 0)
        rows.append(src)
        cols.append(src | (1 << l))
        vals.append(rates[src, l] / D[src])
        busy = masks[(masks >> l) & 1 == 1]
        rows.append(busy)
        cols.append(busy & ~(1 << l))
        vals.append(inst.mu[l] / D[busy])
    full = full_mask(N)
    rows.append(np.array([full]))
    cols.append(np.array([full]))
    vals.append(np.array([inst.total_rate / D[full]]))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(M, M)
    )


def is_irreducible(inst: Instance, policy: Policy) -> bool:
    n, _ = csgraph.connected_components(pd_transition_matrix(inst, policy), directed=True, connection="strong")
    return n == 1


def evaluate_policy_pd(inst: Instance, policy: Policy, override: bool = False) -> PdValueTable:
    check_budget(inst, override)
    policy.check(inst)
    Jv, mu_x = solve_average_cost(pd_transition_matrix(inst, policy), pd_cost_vector(inst, policy), anchor=0)
    return PdValueTable(Jv=Jv, mu_x=mu_x)


def pd_residual(inst: Instance, policy: Policy, table: PdValueTable) -> float:
    return bellman_residual(
        pd_transition_matrix(inst, policy), pd_cost_vector(inst, policy), table.Jv, table.mu_x
    )


def pd_improve_policy(inst: Instance, table: PdValueTable) -> Policy:
    return greedy_policy(inst, table.Jv)


def pd_policy_iteration(
    inst: Instance,
    initial: Policy | None = None,
    max_iters: int = 100,
    override: bool = False,
) -> tuple[Policy, PdValueTable, list[IterationRecord]]:
    check_budget(inst, override)
    policy = initial if initial is not None else myopic_policy(inst)
    trace: list[IterationRecord] = []
    for k in range(max_iters):
        table = evaluate_policy_pd(inst, policy, override=True)
        new = pd_improve_policy(inst, table)
        changes = new.changes(policy)
        trace.append(IterationRecord(k + 1, table.mu_x, changes))
        if changes == 0:
            break
        policy = new
    else:
        table = evaluate_policy_pd(inst, policy, override=True)
    return policy, table, trace


def values_from_augmented(inst: Instance, V: np.ndarray) -> np.ndarray:
    """Mask values implied by augmented values: rate-weighted average over the next event."""
    return exact_mdp.completion_matrix(inst) @ V


def equivalence_violation(inst: Instance, V: np.ndarray, Jv: np.ndarray) -> float:
    """Max error of the value identity after pinning both tables at the empty mask."""
    implied = values_from_augmented(inst, V)
    return float(np.max(np.abs((implied - implied[0]) - (Jv - Jv[0]))))


def check_equivalence(inst: Instance, policy: Policy, override: bool = False) -> EquivalenceReport:
    full = exact_mdp.evaluate_policy_exact(inst, policy, override=override)
    pd = evaluate_policy_pd(inst, policy, override=override)
    return EquivalenceReport(
        mu_gap=abs(pd.mu_x - full.mu),
        value_violation=equivalence_violation(inst, full.V, pd.Jv),
        mu=full.mu,
        mu_x=pd.mu_x,
    )
