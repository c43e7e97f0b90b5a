"""Average-cost TD(0) over post-decision states, inside approximate policy iteration.

The approximation is ``J(x) ~ r . phi(x)`` with the tabular (one-hot) basis,
so ``r`` has one entry per busy mask.  Each outer iteration rolls the
post-decision chain forward under the current policy, updates ``r`` and the
running average-cost estimate from the temporal differences, and then acts
greedily on ``t[a, j] + r[B | a]``.
"""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .instance import Instance, Policy, full_mask, greedy_policy, myopic_policy
from .post_decision import pd_cost_vector, pd_transition_probs


@dataclass(frozen=True)
class TabularBasis:
    n_units: int

    @property
    def P(self) -> int:
        return 1 << self.n_units

    def phi(self, s_x: int) -> np.ndarray:
        out = np.zeros(self.P)
        out[s_x] = 1.0
        return out

    def matrix(self) -> np.ndarray:
        """Phi, one row per mask and one column per feature."""
        return np.eye(self.P)


def approx_value(basis: TabularBasis, r: np.ndarray, s_x: int) -> float:
    return float(np.dot(r, basis.phi(s_x)))


@dataclass(frozen=True, eq=False)
class LearnerState:
    r: np.ndarray
    mu: float = 0.0
    t: int = 0
    a: float = 1000.0

    def __post_init__(self) -> None:
        if self.a < 1:
            raise ValueError("step-size parameter a must be >= 1")

    @property
    def step_size(self) -> float:
        return self.a / (self.a + self.t)

    @classmethod
    def zeros(cls, basis: TabularBasis, a: float = 1000.0) -> LearnerState:
        return cls(r=np.zeros(basis.P), a=a)


def td_step(state: LearnerState, basis: TabularBasis, c_t: float, x_t: int, x_next: int) -> LearnerState:
    """One temporal-difference update of ``r`` and the average-cost estimate."""
    g = state.step_size
    phi_t = basis.phi(x_t)
    d = c_t - state.mu / 2.0 + approx_value(basis, state.r, x_next) - approx_value(basis, state.r, x_t)
    return replace(
        state,
        r=state.r + g * d * phi_t,
        mu=(1.0 - g) * state.mu + 2.0 * g * c_t,
        t=state.t + 1,
    )


def sample_next(inst: Instance, policy: Policy, s_x: int, rng: np.random.Generator, size: int | None = None):
    """Draw the next post-decision mask(s) from the chain's transition row."""
    row = pd_transition_probs(inst, policy, s_x)
    targets = np.array(sorted(row))
    probs = np.array([row[x] for x in targets])
    draw = rng.choice(targets, p=probs / probs.sum(), size=size)
    return int(draw) if size is None else draw


@dataclass
class Rollout:
    masks: np.ndarray            # x_0 .. x_T
    dispatches: int
    response_sum: float
    lost: int

    @property
    def mean_response(self) -> float:
        return self.response_sum / self.dispatches if self.dispatches else float("nan")


class _ChainSampler:
    """Event-level sampler of the post-decision chain.

    Draws arrival-vs-completion, the call node and the completing unit from
    a single uniform per step, which also exposes the response time of
    every dispatch.
    """

    def __init__(self, inst: Instance, policy: Policy):
        N = inst.N
        self.full = full_mask(N)
        self.D = inst.event_rate().tolist()
        self.lam_total = inst.total_rate
        self.cum_lam = np.cumsum(inst.lam).tolist()
        self.last_node = inst.J - 1
        self.acts = policy.actions.T.tolist()        # acts[x][j]
        self.t = inst.t.tolist()
        mu = inst.mu.tolist()
        self.busy = []
        for x in range(inst.n_masks):
            units = [k for k in range(N) if x >> k & 1]
            self.busy.append((units, list(itertools.accumulate(mu[k] for k in units))))

    def run(self, x0: int, uniforms: np.ndarray) -> Rollout:
        D, lam_total, cum_lam, last = self.D, self.lam_total, self.cum_lam, self.last_node
        acts, tt, busy, full = self.acts, self.t, self.busy, self.full
        xs = [x0]
        x = x0
        n = lost = 0
        total = 0.0
        for u in uniforms.tolist():
            u *= D[x]
            if u < lam_total:
                if x == full:
                    lost += 1
                else:
                    j = min(bisect.bisect_right(cum_lam, u), last)
                    i = acts[x][j]
                    total += tt[i][j]
                    n += 1
                    x |= 1 << i
            else:
                units, cum = busy[x]
                k = min(bisect.bisect_right(cum, u - lam_total), len(units) - 1)
                x &= ~(1 << units[k])
            xs.append(x)
        return Rollout(np.array(xs, dtype=np.int64), n, total, lost)


def rollout(inst: Instance, policy: Policy, T: int, rng: np.random.Generator, x0: int | None = None) -> Rollout:
    """Simulate ``T`` transitions of the post-decision chain; ``x0`` defaults to a uniform mask."""
    if x0 is None:
        x0 = int(rng.integers(inst.n_masks))
    return _ChainSampler(inst, policy).run(x0, rng.random(T))


@dataclass
class TDResult:
    r: np.ndarray
    mu: float
    steps: int
    rollout: Rollout
    visits: np.ndarray
    history: list[tuple[int, np.ndarray]] = field(default_factory=list)


def td_learn(
    costs: np.ndarray,
    masks: np.ndarray,
    a: float,
    r0: np.ndarray | None = None,
    mu0: float = 0.0,
    record_every: int = 0,
) -> tuple[np.ndarray, float, list[tuple[int, np.ndarray]]]:
    """Run the tabular TD updates along a fixed trajectory ``masks``."""
    if a < 1:
        raise ValueError("step-size parameter a must be >= 1")
    c = costs.tolist()
    r = np.zeros(costs.size).tolist() if r0 is None else np.asarray(r0, dtype=float).tolist()
    mu = float(mu0)
    xs = masks.tolist()
    history = []
    if record_every:
        history.append((0, np.array(r)))
    for t in range(len(xs) - 1):
        x, y = xs[t], xs[t + 1]
        g = a / (a + t)
        cx = c[x]
        d = cx - mu / 2.0 + r[y] - r[x]
        r[x] += g * d
        mu = (1.0 - g) * mu + 2.0 * g * cx
        if record_every and (t + 1) % record_every == 0:
            history.append((t + 1, np.array(r)))
    return np.array(r), mu, history


def td_evaluate(
    inst: Instance,
    policy: Policy,
    T: int,
    a: float = 1000.0,
    seed: int | np.random.Generator = 0,
    r0: np.ndarray | None = None,
    mu0: float = 0.0,
    record_every: int = 0,
) -> TDResult:
    if T < 0:
        raise ValueError("T must be >= 0")
    policy.check(inst)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    path = rollout(inst, policy, T, rng)
    r, mu, history = td_learn(pd_cost_vector(inst, policy), path.masks, a, r0, mu0, record_every)
    visits = np.bincount(path.masks[:-1], minlength=inst.n_masks) if T else np.zeros(inst.n_masks, int)
    return TDResult(r=r, mu=mu, steps=T, rollout=path, visits=visits, history=history)


@dataclass
class TDIterationRecord:
    iter: int
    sample_mean_response: float
    mu_estimate: float
    policy_changes: int


def td_policy_iteration(
    inst: Instance,
    K: int,
    T: int,
    a: float = 1000.0,
    seed: int = 0,
    initial: Policy | None = None,
    warm_start: bool = False,
    record_every: int = 0,
) -> tuple[Policy, list[TDIterationRecord], TDResult]:
    """Approximate policy iteration driven by TD rollouts.

    Iteration ``k`` uses the generator seeded with ``(seed, k)``, so runs are
    reproducible and iterations use independent streams.  The learner is
    reset to zero every iteration unless ``warm_start`` carries ``r`` over.
    Returns the final policy, one trace record per iteration and the last
    iteration's learner output.
    """
    if K < 1 or T < 1:
        raise ValueError("K and T must be >= 1")
    policy = initial if initial is not None else myopic_policy(inst)
    trace: list[TDIterationRecord] = []
    result = None
    for k in range(K):
        rng = np.random.default_rng([seed, k])
        r0 = result.r if (warm_start and result is not None) else None
        result = td_evaluate(inst, policy, T, a, rng, r0=r0, record_every=record_every)
        new = greedy_policy(inst, result.r)
        trace.append(TDIterationRecord(k + 1, result.rollout.mean_response, result.mu, new.changes(policy)))
        policy = new
    return policy, trace, result
