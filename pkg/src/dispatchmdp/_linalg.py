"""Average-cost policy evaluation for a fixed transition matrix."""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

# Systems up to this size are solved densely; larger ones iteratively.
DENSE_LIMIT = 4096
MAX_SWEEPS = 200_000


class NumericalError(RuntimeError):
    """A linear solve failed or missed its residual tolerance."""


def bellman_residual(P, c: np.ndarray, values: np.ndarray, avg_cost: float) -> float:
    """max |c - avg/2 + P v - v|, the per-transition average-cost Bellman residual."""
    return float(np.max(np.abs(c - avg_cost / 2.0 + P @ values - values)))


def _direct_solve(A, b: np.ndarray) -> np.ndarray:
    if sp.issparse(A):
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            try:
                x = spla.spsolve(A.tocsc(), b)
            except spla.MatrixRankWarning as exc:
                raise np.linalg.LinAlgError(str(exc)) from exc
    else:
        with warnings.catch_warnings(), np.errstate(divide="ignore", invalid="ignore"):
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            try:
                x = scipy.linalg.solve(A, b)
            except scipy.linalg.LinAlgWarning as exc:
                raise np.linalg.LinAlgError(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("non-finite solution")
    return x


def _anchored_system(P, anchor: int):
    n = P.shape[0]
    if sp.issparse(P):
        keep = np.ones(n)
        keep[anchor] = 0.0
        col = sp.csc_matrix((np.full(n, 0.5), (np.arange(n), np.full(n, anchor))), shape=(n, n))
        return ((sp.identity(n, format="csc") - P.tocsc()) @ sp.diags(keep) + col).tocsc()
    A = np.eye(n) - P
    A[:, anchor] = 0.5
    return A


def solve_average_cost(P, c: np.ndarray, anchor: int = 0, tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Solve ``v = c - (avg/2) e + P v`` with ``v[anchor] = 0``.

    Small systems are solved directly: the anchor's unknown is replaced by
    the average cost, so every Bellman row stays in the system.  Large ones
    use power iteration for the stationary law (hence the average cost) and
    then relative value iteration on the lazy chain ``(I + P) / 2``.  If that system is singular (states that never
    reach the anchor's class), the recurrent class holding the anchor is
    solved first and the remaining states are filled in from their own rows.
    Returns ``(v, avg)``.
    """
    n = P.shape[0]
    c = np.asarray(c, dtype=float)
    if n > DENSE_LIMIT:
        P = sp.csr_matrix(P)
        v, avg = _solve_iteratively(P, c, anchor, tol)
        res = bellman_residual(P, c, v, avg)
        if not res <= tol:
            raise NumericalError(f"Bellman residual {res:.3e} exceeds tolerance")
        return v, avg
    if sp.issparse(P):
        P = P.toarray()
    try:
        z = _direct_solve(_anchored_system(P, anchor), c)
        avg = float(z[anchor])
        v = z.copy()
        v[anchor] = 0.0
    except np.linalg.LinAlgError:
        v, avg = _solve_by_classes(P, c, anchor)
    res = bellman_residual(P, c, v, avg)
    if not res <= tol * max(1.0, float(np.max(np.abs(v)))):
        raise NumericalError(f"Bellman residual {res:.3e} exceeds tolerance")
    return v, avg


def _solve_by_classes(P, c: np.ndarray, anchor: int) -> tuple[np.ndarray, float]:
    Ps = sp.csr_matrix(P)
    n = Ps.shape[0]
    _, labels = csgraph.connected_components(Ps, directed=True, connection="strong")
    cls = np.flatnonzero(labels == labels[anchor])
    # the anchor's class must be closed for it to be recurrent
    leak = np.asarray(Ps[cls][:, np.setdiff1d(np.arange(n), cls)].sum(axis=1)).ravel()
    if cls.size == 0 or np.any(leak > 1e-12):
        raise NumericalError("anchor state is not recurrent under this policy")
    sub = Ps[cls][:, cls]
    local_anchor = int(np.searchsorted(cls, anchor))
    try:
        z = _direct_solve(_anchored_system(sub if cls.size > DENSE_LIMIT else sub.toarray(), local_anchor), c[cls])
    except np.linalg.LinAlgError as exc:
        raise NumericalError("recurrent class system is singular") from exc
    avg = float(z[local_anchor])
    v = np.zeros(n)
    v[cls] = z
    v[anchor] = 0.0
    rest = np.setdiff1d(np.arange(n), cls)
    if rest.size:
        # v_T = c_T - avg/2 + P_TT v_T + P_TR v_R
        P_tt = Ps[rest][:, rest]
        rhs = c[rest] - avg / 2.0 + Ps[rest][:, cls] @ v[cls]
        A = sp.identity(rest.size, format="csc") - P_tt.tocsc()
        try:
            v[rest] = _direct_solve(A if rest.size > DENSE_LIMIT else A.toarray(), rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("states outside the anchor class do not drain into it") from exc
    return v, avg


def stationary_distribution(P, tol: float = 1e-15, max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    """Stationary law of a unichain stochastic matrix by power iteration on (I + P) / 2."""
    n = P.shape[0]
    PT = sp.csr_matrix(P).T.tocsr()
    nu = np.full(n, 1.0 / n)
    for sweep in range(1, max_sweeps + 1):
        new = 0.5 * (nu + PT @ nu)
        if sweep % 25 == 0 and np.max(np.abs(new - nu)) <= tol * np.max(new):
            return new / new.sum()
        nu = new
    raise NumericalError("power iteration did not converge")


def _solve_iteratively(P, c: np.ndarray, anchor: int, tol: float) -> tuple[np.ndarray, float]:
    nu = stationary_distribution(P)
    avg = 2.0 * float(nu @ c)
    h = c - avg / 2.0
    v = np.zeros(P.shape[0])
    for sweep in range(1, MAX_SWEEPS + 1):
        # lazy fixed-point step; same fixed point as v = h + P v
        step = h + P @ v - v
        v = v + 0.5 * step
        if sweep % 25 == 0 and np.max(np.abs(step)) <= 0.1 * tol:
            return v - v[anchor], avg
    raise NumericalError("relative value iteration did not converge")
