"""Exact policy iteration on the augmented (call, busy-mask) state space.

Augmented states are ``(call, B)`` where ``call`` is a node index or ``None``
for the no-call state entered after a service completion.  They are numbered
``slot * 2**N + B`` with slot 0 for ``None`` and slot ``j + 1`` for node
``j``, giving ``(J + 1) * 2**N`` states.

Every transition out of a state depends only on the busy mask right after
the action (the post-decision mask), so the full matrix is assembled as
``P = A_pi @ Q``: ``A_pi`` maps each state to its post-decision mask and
``Q`` holds the exponential-race successors of each mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from ._linalg import bellman_residual, solve_average_cost
from .instance import Instance, Policy, full_mask, greedy_policy, myopic_policy

MAX_EXACT_STATES = 131_072
MAX_EXACT_UNITS = 20


class GuardError(RuntimeError):
    """Problem is too large for the requested exact method."""


class AugmentedState(NamedTuple):
    call: int | None
    mask: int


@dataclass(frozen=True, eq=False)
class ValueTable:
    V: np.ndarray        # differential value per augmented state, V[anchor] = 0
    mu: float            # average cost; mu / 2 is the mean cost per transition

    def value(self, s: AugmentedState, n_units: int) -> float:
        return float(self.V[state_index(s, n_units)])


@dataclass
class IterationRecord:
    iter: int
    mu: float
    policy_changes: int


def n_states(inst: Instance) -> int:
    return (inst.J + 1) * inst.n_masks


def state_index(s: AugmentedState, n_units: int) -> int:
    slot = 0 if s.call is None else s.call + 1
    return (slot << n_units) + s.mask


def state_of(index: int, n_units: int) -> AugmentedState:
    slot, mask = divmod(index, 1 << n_units)
    return AugmentedState(None if slot == 0 else slot - 1, mask)


ANCHOR = AugmentedState(None, 0)


def check_budget(inst: Instance, override: bool = False) -> None:
    if override:
        return
    if inst.N > MAX_EXACT_UNITS or n_states(inst) > MAX_EXACT_STATES:
        raise GuardError(
            f"exact MDP has {n_states(inst):,} augmented states (limit "
            f"{MAX_EXACT_STATES:,}, N <= {MAX_EXACT_UNITS}); use the post-decision "
            "solver or TD training instead"
        )


def _check_action(inst: Instance, s: AugmentedState, a: int | None) -> None:
    full = full_mask(inst.N)
    if s.call is None or s.mask == full:
        if a is not None:
            raise ValueError(f"no action is allowed in state {s}")
        return
    if a is None or not 0 <= a < inst.N:
        raise ValueError(f"state {s} needs a unit to dispatch")
    if s.mask >> a & 1:
        raise ValueError(f"unit {a} is busy in state {s}")


def post_mask(s: AugmentedState, a: int | None) -> int:
    return s.mask if a is None else s.mask | (1 << a)


def state_cost(inst: Instance, s: AugmentedState, a: int | None) -> float:
    _check_action(inst, s, a)
    if a is None:
        return 0.0
    return float(inst.t[a, s.call])


def transition_probs(inst: Instance, s: AugmentedState, a: int | None) -> dict[AugmentedState, float]:
    """Successor distribution of ``s`` under action ``a`` (one exponential race)."""
    _check_action(inst, s, a)
    x = post_mask(s, a)
    D = inst.total_rate + sum(inst.mu[k] for k in range(inst.N) if x >> k & 1)
    row = {AugmentedState(j, x): float(inst.lam[j] / D) for j in range(inst.J)}
    for k in range(inst.N):
        if x >> k & 1:
            row[AugmentedState(None, x & ~(1 << k))] = float(inst.mu[k] / D)
    return row


def completion_matrix(inst: Instance) -> sp.csr_matrix:
    """Q: (2**N, n_states) successor law from each post-decision mask."""
    N, J, M = inst.N, inst.J, inst.n_masks
    D = inst.event_rate()
    masks = np.arange(M)
    rows, cols, vals = [], [], []
    for j in range(J):
        rows.append(masks)
        cols.append(((j + 1) << N) + masks)
        vals.append(inst.lam[j] / D)
    for k in range(N):
        busy = masks[(masks >> k) & 1 == 1]
        rows.append(busy)
        cols.append(busy & ~(1 << k))
        vals.append(inst.mu[k] / D[busy])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(M, n_states(inst)),
    )


def post_masks(inst: Instance, policy: Policy) -> np.ndarray:
    """Post-decision mask of every augmented state under ``policy``."""
    M = inst.n_masks
    masks = np.arange(M)
    acts = policy.actions                       # (J, M)
    after = np.where(acts >= 0, masks[None, :] | (1 << np.maximum(acts, 0)), masks[None, :])
    return np.concatenate([masks, after.ravel()])


def cost_vector(inst: Instance, policy: Policy) -> np.ndarray:
    acts = policy.actions
    node = np.arange(inst.J)[:, None]
    c = np.where(acts >= 0, inst.t[np.maximum(acts, 0), node], 0.0)
    return np.concatenate([np.zeros(inst.n_masks), c.ravel()])


def transition_matrix(inst: Instance, policy: Policy) -> sp.csr_matrix:
    S = n_states(inst)
    x = post_masks(inst, policy)
    A = sp.csr_matrix((np.ones(S), (np.arange(S), x)), shape=(S, inst.n_masks))
    return (A @ completion_matrix(inst)).tocsr()


def evaluate_policy_exact(inst: Instance, policy: Policy, override: bool = False) -> ValueTable:
    check_budget(inst, override)
    policy.check(inst)
    P = transition_matrix(inst, policy)
    c = cost_vector(inst, policy)
    V, mu = solve_average_cost(P, c, anchor=state_index(ANCHOR, inst.N))
    return ValueTable(V=V, mu=mu)


def residual(inst: Instance, policy: Policy, table: ValueTable) -> float:
    P = transition_matrix(inst, policy)
    return bellman_residual(P, cost_vector(inst, policy), table.V, table.mu)


def improve_policy(inst: Instance, table: ValueTable) -> Policy:
    """Greedy one-step lookahead: argmin over free a of t[a, j] + E[V(next) | a]."""
    lookahead = completion_matrix(inst) @ table.V
    return greedy_policy(inst, lookahead)


def policy_iteration(
    inst: Instance,
    initial: Policy | None = None,
    max_iters: int = 100,
    override: bool = False,
) -> tuple[Policy, ValueTable, list[IterationRecord]]:
    check_budget(inst, override)
    policy = initial if initial is not None else myopic_policy(inst)
    trace: list[IterationRecord] = []
    for k in range(max_iters):
        table = evaluate_policy_exact(inst, policy, override=True)
        new = improve_policy(inst, table)
        changes = new.changes(policy)
        trace.append(IterationRecord(k + 1, table.mu, changes))
        if changes == 0:
            break
        policy = new
    else:
        table = evaluate_policy_exact(inst, policy, override=True)
    return policy, table, trace
