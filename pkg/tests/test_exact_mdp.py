import bisect
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dispatchmdp import exact_mdp as em
from dispatchmdp._linalg import NumericalError, solve_average_cost
from dispatchmdp.exact_mdp import AugmentedState as S
from dispatchmdp.instance import (
    Instance,
    Policy,
    all_policies,
    generate_instance,
    myopic_policy,
    random_policy,
)


def test_state_cost_examples():
    inst = Instance(lam=[1.0, 1.0], mu=[1.0, 1.0], t=[[1.0, 4.2], [2.0, 2.0]])
    assert em.state_cost(inst, S(1, 0), 0) == 4.2
    assert em.state_cost(inst, S(None, 0b10), None) == 0.0
    assert em.state_cost(inst, S(0, 0b11), None) == 0.0


@pytest.mark.parametrize("s,a", [
    (S(0, 0b01), 0),        # busy unit
    (S(0, 0b00), None),     # call needs a unit
    (S(None, 0b00), 1),     # nothing to dispatch
    (S(0, 0b11), 0),        # full: no action
])
def test_infeasible_actions_raise(s, a):
    inst = Instance(lam=[1.0], mu=[1.0, 1.0], t=[[1.0], [2.0]])
    with pytest.raises(ValueError):
        em.state_cost(inst, s, a)
    with pytest.raises(ValueError):
        em.transition_probs(inst, s, a)


def test_transition_row_against_exponential_race(two_by_two):
    row = em.transition_probs(two_by_two, S(0, 0), 0)
    assert row == pytest.approx({S(0, 0b01): 1 / 3, S(1, 0b01): 1 / 3, S(None, 0): 1 / 3}, abs=1e-15)

    # oracle: competing exponential clocks after unit 0 leaves
    rng = np.random.default_rng(0)
    n = 10**6
    arrival = rng.exponential(1 / 2.0, n)             # total call rate 2
    done = rng.exponential(1.0, n)                    # unit 0 completes at rate 1
    node = rng.random(n) < 0.5
    outcomes = {
        S(0, 0b01): np.mean((arrival < done) & node),
        S(1, 0b01): np.mean((arrival < done) & ~node),
        S(None, 0): np.mean(done <= arrival),
    }
    for s, freq in outcomes.items():
        p = row[s]
        assert abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_single_unit_completion_row():
    inst = Instance(lam=[2.0], mu=[3.0], t=[[1.0]])
    row = em.transition_probs(inst, S(None, 1), None)
    assert row == pytest.approx({S(0, 1): 2 / 5, S(None, 0): 3 / 5})


def test_all_rows_stochastic(small_random):
    pol = random_policy(small_random, np.random.default_rng(2))
    P = em.transition_matrix(small_random, pol)
    assert P.min() >= 0
    np.testing.assert_allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    # the sparse matrix agrees with the per-state rows
    for idx in range(P.shape[0]):
        s = em.state_of(idx, small_random.N)
        a = None if s.call is None else pol(s.call, s.mask)
        row = em.transition_probs(small_random, s, a)
        dense = {em.state_index(k, small_random.N): v for k, v in row.items()}
        got = P.getrow(idx)
        assert dict(zip(got.indices.tolist(), got.data.tolist())) == pytest.approx(dense, abs=1e-15)


def test_state_indexing_round_trip():
    for idx in range(3 * 8):
        assert em.state_index(em.state_of(idx, 3), 3) == idx
    assert em.state_index(em.ANCHOR, 3) == 0


def test_single_unit_hand_solution(single_unit):
    tau = 3.0
    pol = myopic_policy(single_unit)
    table = em.evaluate_policy_exact(single_unit, pol)
    assert table.mu == pytest.approx(2 * tau / 3, abs=1e-12)

    # stationary weights of (0,{}), (0,{0}), (none,{}) are 1/3 each; (none,{0}) is never entered
    P = em.transition_matrix(single_unit, pol).toarray()
    w, vecs = np.linalg.eig(P.T)
    pi = np.real(vecs[:, np.argmin(abs(w - 1))])
    pi /= pi.sum()
    idx = {s: em.state_index(s, 1) for s in (S(0, 0), S(0, 1), S(None, 0), S(None, 1))}
    assert pi[idx[S(0, 0)]] == pytest.approx(1 / 3)
    assert pi[idx[S(0, 1)]] == pytest.approx(1 / 3)
    assert pi[idx[S(None, 0)]] == pytest.approx(1 / 3)
    assert pi[idx[S(None, 1)]] == pytest.approx(0, abs=1e-12)
    c = em.cost_vector(single_unit, pol)
    assert table.mu == pytest.approx(2 * pi @ c)
    # hand-solved differential values
    assert table.value(S(0, 0), 1) == pytest.approx(tau / 3)
    assert table.value(S(0, 1), 1) == pytest.approx(-2 * tau / 3)


def test_value_shift_family(small_random):
    pol = myopic_policy(small_random)
    table = em.evaluate_policy_exact(small_random, pol)
    assert em.residual(small_random, pol, table) <= 1e-9
    shifted = em.ValueTable(V=table.V + 17.5, mu=table.mu)
    assert em.residual(small_random, pol, shifted) <= 1e-9


def test_average_cost_matches_chain_simulation():
    inst = generate_instance(21, 3, 2)
    pol = myopic_policy(inst)
    table = em.evaluate_policy_exact(inst, pol)
    P = em.transition_matrix(inst, pol)
    c = em.cost_vector(inst, pol)
    succ = [P.getrow(i).indices.tolist() for i in range(P.shape[0])]
    cum = [np.cumsum(P.getrow(i).data).tolist() for i in range(P.shape[0])]
    rng = np.random.default_rng(5)
    steps = 10**6
    costs = np.empty(steps)
    s = 0
    for k, u in enumerate(rng.random(steps).tolist()):
        costs[k] = c[s]
        s = succ[s][min(bisect.bisect_right(cum[s], u), len(succ[s]) - 1)]
    batches = 2 * costs.reshape(100, -1).mean(axis=1)
    sigma = batches.std(ddof=1) / np.sqrt(batches.size)
    assert abs(batches.mean() - table.mu) <= 3 * sigma


# -- improvement ------------------------------------------------------------------

def test_improve_with_zero_values_is_myopic(small_random):
    zero = em.ValueTable(V=np.zeros(em.n_states(small_random)), mu=0.0)
    assert em.improve_policy(small_random, zero) == myopic_policy(small_random)


def test_improve_forced_when_one_unit_free(small_random):
    rng = np.random.default_rng(0)
    table = em.ValueTable(V=rng.normal(size=em.n_states(small_random)) * 100, mu=0.0)
    pol = em.improve_policy(small_random, table)
    for mask in (0b011, 0b101, 0b110):
        free = [i for i in range(3) if not mask >> i & 1][0]
        assert all(pol(j, mask) == free for j in range(small_random.J))


@settings(max_examples=20, deadline=None)
@given(shift=st.floats(-1e3, 1e3), seed=st.integers(0, 1000))
def test_improve_shift_invariant(shift, seed):
    inst = generate_instance(seed, 3, 3)
    table = em.evaluate_policy_exact(inst, random_policy(inst, np.random.default_rng(seed)))
    a = em.improve_policy(inst, table)
    b = em.improve_policy(inst, em.ValueTable(V=table.V + shift, mu=table.mu))
    assert a == b


def test_improvement_can_beat_closest_unit():
    # grid search: unit 0 closest everywhere, node 0 busy and far from unit 1
    found = None
    for lam0, t01, t11 in itertools.product([1, 3, 9], [2, 4, 6], [3, 5, 8]):
        inst = Instance(lam=[lam0, 1.0], mu=[1.0, 1.0], t=[[1.0, t01], [30.0, t11]])
        myo = myopic_policy(inst)
        improved = em.improve_policy(inst, em.evaluate_policy_exact(inst, myo))
        if improved != myo:
            found = inst
            break
    assert found is not None


# -- policy iteration ---------------------------------------------------------------

def test_single_unit_converges_immediately(single_unit):
    policy, table, trace = em.policy_iteration(single_unit)
    assert len(trace) == 1 and trace[0].policy_changes == 0
    assert table.mu == pytest.approx(2.0)


def test_pi_matches_brute_force(two_by_two):
    best = min(em.evaluate_policy_exact(two_by_two, p).mu for p in all_policies(two_by_two))
    _, table, _ = em.policy_iteration(two_by_two)
    assert abs(table.mu - best) <= 1e-9


def test_pi_matches_brute_force_three_units():
    inst = generate_instance(8, 2, 3)
    best = min(em.evaluate_policy_exact(inst, p).mu for p in all_policies(inst))
    _, table, trace = em.policy_iteration(inst)
    assert abs(table.mu - best) <= 1e-9
    mus = [r.mu for r in trace]
    assert all(b <= a + 1e-9 for a, b in zip(mus, mus[1:]))


def test_pi_start_independent():
    inst = generate_instance(3, 4, 3)
    _, a, _ = em.policy_iteration(inst, myopic_policy(inst))
    _, b, _ = em.policy_iteration(inst, random_policy(inst, np.random.default_rng(9)))
    assert abs(a.mu - b.mu) <= 1e-9


def test_guard_refuses_full_size():
    inst = generate_instance(1, 30, 15)
    with pytest.raises(em.GuardError):
        em.policy_iteration(inst)
    with pytest.raises(em.GuardError):
        em.evaluate_policy_exact(inst, myopic_policy(inst))


# -- solver fallback -------------------------------------------------------------------

def test_fallback_handles_transient_states():
    # state 2 is transient and feeds the recurrent pair {0, 1}
    P = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.5, 0.0]])
    c = np.array([0.0, 2.0, 5.0])
    from dispatchmdp._linalg import _solve_by_classes
    v, avg = _solve_by_classes(P, c, 0)
    v2, avg2 = solve_average_cost(P, c, 0)
    assert avg == pytest.approx(2.0) and avg2 == pytest.approx(2.0)
    np.testing.assert_allclose(v, v2, atol=1e-12)


def test_multichain_is_a_numerical_error_not_a_crash():
    P = np.array([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(NumericalError):
        solve_average_cost(P, np.array([1.0, 2.0]), 0)


def test_iterative_path_agrees_with_direct():
    from dispatchmdp import _linalg
    inst = generate_instance(4, 4, 4)
    pol = random_policy(inst, np.random.default_rng(4))
    P = em.transition_matrix(inst, pol)
    c = em.cost_vector(inst, pol)
    v, avg = solve_average_cost(P, c, 0)
    v2, avg2 = _linalg._solve_iteratively(P.tocsr(), c, 0, 1e-10)
    assert abs(avg - avg2) <= 1e-10
    np.testing.assert_allclose(v, v2, atol=1e-8)
