"""Problem data for the ambulance dispatch model.

An :class:`Instance` holds J demand nodes, N units, per-node call rates,
per-unit service rates and the N x J matrix of mean response times.  Busy
units are encoded as an N-bit integer mask (bit ``i`` set means unit ``i``
is busy), so masks double as indices ``0 .. 2**N - 1``.

Indices are 0-based everywhere in Python.  Files and CLI output are 1-based
for nodes and units; masks are written as plain unsigned integers whose bit
``i - 1`` belongs to unit ``i``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np


class InstanceFormatError(ValueError):
    """A file could not be parsed into an instance or policy."""


class InstanceValidationError(ValueError):
    """Parsed data violates a model invariant."""


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def full_mask(n_units: int) -> int:
    return (1 << n_units) - 1


def mask_bits(n_units: int) -> np.ndarray:
    """(2**N, N) 0/1 matrix; row ``x`` lists which units are busy in mask ``x``."""
    masks = np.arange(1 << n_units, dtype=np.int64)
    return ((masks[:, None] >> np.arange(n_units)) & 1).astype(np.int8)


def busy_units(mask: int, n_units: int) -> list[int]:
    return [i for i in range(n_units) if mask >> i & 1]


def free_units(mask: int, n_units: int) -> list[int]:
    return [i for i in range(n_units) if not mask >> i & 1]


# ---------------------------------------------------------------------------
# Instance
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Instance:
    lam: np.ndarray          # (J,) call rate per node
    mu: np.ndarray           # (N,) service rate per unit
    t: np.ndarray            # (N, J) mean response time, unit i to node j
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        lam = np.array(self.lam, dtype=float)
        mu = np.array(self.mu, dtype=float)
        t = np.array(self.t, dtype=float)
        if lam.ndim != 1 or mu.ndim != 1:
            raise InstanceValidationError("lambda and mu must be vectors")
        if t.shape != (mu.size, lam.size):
            raise InstanceValidationError(
                f"t must have shape (N, J) = ({mu.size}, {lam.size}), got {t.shape}"
            )
        if lam.size < 1 or mu.size < 1:
            raise InstanceValidationError("need at least one node and one unit")
        if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise InstanceValidationError("all lambda_j must be finite and > 0")
        if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
            raise InstanceValidationError("all mu_i must be finite and > 0")
        if not np.all(np.isfinite(t)) or np.any(t < 0):
            raise InstanceValidationError("all t_ij must be finite and >= 0")
        for arr in (lam, mu, t):
            arr.setflags(write=False)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "t", t)

    @property
    def J(self) -> int:
        return self.lam.size

    @property
    def N(self) -> int:
        return self.mu.size

    @property
    def n_masks(self) -> int:
        return 1 << self.N

    @property
    def total_rate(self) -> float:
        return float(self.lam.sum())

    @property
    def utilization(self) -> float:
        """Offered load per unit, lambda / sum(mu)."""
        return self.total_rate / float(self.mu.sum())

    def busy_rate(self) -> np.ndarray:
        """Total completion rate of the busy units, for every mask."""
        return mask_bits(self.N) @ self.mu

    def event_rate(self) -> np.ndarray:
        """lambda + sum of busy mu, for every mask."""
        return self.total_rate + self.busy_rate()

    def same_as(self, other: Instance) -> bool:
        return (
            np.array_equal(self.lam, other.lam)
            and np.array_equal(self.mu, other.mu)
            and np.array_equal(self.t, other.t)
            and self.meta == other.meta
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "J": self.J,
            "N": self.N,
            "lambda": self.lam.tolist(),
            "mu": self.mu.tolist(),
            "t": self.t.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: Any) -> Instance:
        if not isinstance(data, dict):
            raise InstanceFormatError("instance file must hold a JSON object")
        for key in ("J", "N", "lambda", "mu", "t"):
            if key not in data:
                raise InstanceFormatError(f"missing field '{key}'")
        J, N = data["J"], data["N"]
        for key, val in (("J", J), ("N", N)):
            if not isinstance(val, int) or isinstance(val, bool):
                raise InstanceFormatError(f"field '{key}' must be an integer")
            if val < 1:
                raise InstanceValidationError(f"field '{key}' must be >= 1")
        lam = _float_vector(data["lambda"], "lambda", J)
        mu = _float_vector(data["mu"], "mu", N)
        rows = data["t"]
        if not isinstance(rows, list) or len(rows) != N:
            raise InstanceFormatError(f"field 't' must be a list of N={N} rows")
        t = [_float_vector(row, f"t[{i}]", J) for i, row in enumerate(rows)]
        meta = data.get("meta", {})
        if not isinstance(meta, dict):
            raise InstanceFormatError("field 'meta' must be an object")
        return cls(lam=np.array(lam), mu=np.array(mu), t=np.array(t), meta=meta)


def _float_vector(raw: Any, name: str, size: int) -> list[float]:
    if not isinstance(raw, list):
        raise InstanceFormatError(f"field '{name}' must be a list")
    if len(raw) != size:
        raise InstanceFormatError(f"field '{name}' must have length {size}, got {len(raw)}")
    out = []
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise InstanceFormatError(f"field '{name}' must contain numbers")
        out.append(float(v))
    return out


def save_instance(inst: Instance, path: str | Path) -> None:
    Path(path).write_text(json.dumps(inst.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_instance(path: str | Path) -> Instance:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"{path}: not valid JSON ({exc})") from exc
    return Instance.from_dict(data)


# ---------------------------------------------------------------------------
# Random instances
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    """Settings for :func:`generate_instance`.

    Response times are ``scale * distance + turnout`` on the unit square
    (scale in minutes per unit length).  Call rates are drawn from
    ``lambda_range`` and then rescaled so that ``lambda / sum(mu)`` equals
    ``target_utilization``; set it to ``None`` to keep the raw draws.
    """

    scale: float = 60.0
    turnout: float = 1.0
    lambda_range: tuple[float, float] = (0.5, 1.5)
    mu_range: tuple[float, float] = (0.8, 1.2)
    target_utilization: float | None = 0.5

    def validate(self) -> None:
        if self.scale <= 0:
            raise InstanceValidationError("scale must be > 0")
        if self.turnout < 0:
            raise InstanceValidationError("turnout must be >= 0")
        for name, (lo, hi) in (("lambda_range", self.lambda_range), ("mu_range", self.mu_range)):
            if lo <= 0 or hi < lo:
                raise InstanceValidationError(f"{name} must satisfy 0 < low <= high")
        if self.target_utilization is not None and self.target_utilization <= 0:
            raise InstanceValidationError("target_utilization must be > 0")


def generate_instance(seed: int, J: int, N: int, config: GeneratorConfig | None = None) -> Instance:
    config = config or GeneratorConfig()
    config.validate()
    if J < 1 or N < 1:
        raise InstanceValidationError("J and N must be >= 1")
    rng = np.random.default_rng(seed)
    nodes = rng.random((J, 2))
    bases = rng.random((N, 2))
    dist = np.linalg.norm(bases[:, None, :] - nodes[None, :, :], axis=2)
    t = config.scale * dist + config.turnout
    lam = rng.uniform(*config.lambda_range, size=J)
    mu = rng.uniform(*config.mu_range, size=N)
    if config.target_utilization is not None:
        lam = lam * (config.target_utilization * mu.sum() / lam.sum())
    meta = {
        "seed": seed,
        "generator": {
            "scale": config.scale,
            "turnout": config.turnout,
            "lambda_range": list(config.lambda_range),
            "mu_range": list(config.mu_range),
            "target_utilization": config.target_utilization,
        },
        "nodes": nodes.tolist(),
        "bases": bases.tolist(),
    }
    return Instance(lam=lam, mu=mu, t=t, meta=meta)


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Policy:
    """Dispatch rule as a (J, 2**N) table of unit indices.

    ``actions[j, B]`` is the unit sent to a call at node ``j`` when the busy
    mask is ``B``.  Entries for the full mask are ``-1`` (call is lost).
    """

    actions: np.ndarray

    def __post_init__(self) -> None:
        acts = np.array(self.actions, dtype=np.int64)
        acts.setflags(write=False)
        object.__setattr__(self, "actions", acts)

    @property
    def J(self) -> int:
        return self.actions.shape[0]

    @property
    def N(self) -> int:
        return int(self.actions.shape[1]).bit_length() - 1

    def __call__(self, j: int, mask: int) -> int | None:
        a = int(self.actions[j, mask])
        return None if a < 0 else a

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Policy):
            return NotImplemented
        return np.array_equal(self.actions, other.actions)

    def __hash__(self) -> int:
        return hash(self.actions.tobytes())

    def changes(self, other: Policy) -> int:
        """Number of decision states where the two policies differ."""
        return int(np.count_nonzero(self.actions != other.actions))

    def check(self, inst: Instance) -> None:
        """Raise InstanceValidationError unless the policy is total and feasible."""
        if self.actions.shape != (inst.J, inst.n_masks):
            raise InstanceValidationError(
                f"policy shape {self.actions.shape} does not match instance "
                f"(J={inst.J}, 2^N={inst.n_masks})"
            )
        full = full_mask(inst.N)
        acts = self.actions
        if np.any(acts[:, full] != -1):
            raise InstanceValidationError("full-mask entries must be empty")
        body = np.delete(acts, full, axis=1)
        masks = np.delete(np.arange(inst.n_masks), full)
        if np.any(body < 0) or np.any(body >= inst.N):
            raise InstanceValidationError("policy is not total over non-full masks")
        if np.any((masks[None, :] >> body) & 1):
            raise InstanceValidationError("policy dispatches a busy unit")

    def to_dict(self) -> dict[str, Any]:
        J, M = self.actions.shape
        full = M - 1
        acts = self.actions.tolist()
        entries = {
            f"{j + 1},{mask}": acts[j][mask] + 1
            for j in range(J)
            for mask in range(M)
            if mask != full
        }
        return {"J": J, "N": self.N, "actions": entries}

    @classmethod
    def from_dict(cls, data: Any) -> Policy:
        if not isinstance(data, dict) or not isinstance(data.get("actions"), dict):
            raise InstanceFormatError("policy file must hold an object with an 'actions' map")
        J, N = data.get("J"), data.get("N")
        if not isinstance(J, int) or not isinstance(N, int) or J < 1 or N < 1:
            raise InstanceFormatError("policy file needs positive integer fields 'J' and 'N'")
        M = 1 << N
        acts = np.full((J, M), -1, dtype=np.int64)
        for key, unit in data["actions"].items():
            try:
                j_str, mask_str = key.split(",")
                j, mask = int(j_str) - 1, int(mask_str)
            except ValueError as exc:
                raise InstanceFormatError(f"bad action key '{key}'") from exc
            if not (0 <= j < J and 0 <= mask < M - 1):
                raise InstanceFormatError(f"action key '{key}' out of range")
            if not isinstance(unit, int) or not 1 <= unit <= N:
                raise InstanceFormatError(f"action '{key}' must be a unit in 1..{N}")
            acts[j, mask] = unit - 1
        if np.any(acts[:, : M - 1] < 0):
            raise InstanceFormatError("policy file is missing entries for some decision states")
        return cls(acts)


def save_policy(policy: Policy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(policy.to_dict()) + "\n", encoding="utf-8")


def load_policy(path: str | Path) -> Policy:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"{path}: not valid JSON ({exc})") from exc
    return Policy.from_dict(data)


def greedy_policy(inst: Instance, post_values: np.ndarray, tol: float = 1e-9) -> Policy:
    """Dispatch to the free unit minimising ``t[a, j] + post_values[B | a]``.

    Candidates within ``tol * (1 + |best|)`` of the minimum count as tied and
    the lowest unit index wins.
    """
    N, J, M = inst.N, inst.J, inst.n_masks
    post_values = np.asarray(post_values, dtype=float)
    masks = np.arange(M)
    scores = []
    for a in range(N):
        free = ((masks >> a) & 1) == 0
        after = post_values[masks | (1 << a)]
        q = inst.t[a][:, None] + after[None, :]
        scores.append(np.where(free[None, :], q, np.inf))
    best = np.min(scores, axis=0)
    finite = np.isfinite(best)
    slack = np.zeros_like(best)
    slack[finite] = tol * (1.0 + np.abs(best[finite]))
    acts = np.full((J, M), -1, dtype=np.int64)
    for a in reversed(range(N)):
        acts = np.where(scores[a] <= best + slack, a, acts)
    acts[:, full_mask(N)] = -1
    return Policy(acts)


def myopic_policy(inst: Instance) -> Policy:
    """Closest free unit; ties go to the lowest index."""
    return greedy_policy(inst, np.zeros(inst.n_masks), tol=0.0)


def random_policy(inst: Instance, rng: np.random.Generator) -> Policy:
    """Uniformly random free unit in every decision state."""
    bits = mask_bits(inst.N).astype(bool)
    acts = np.full((inst.J, inst.n_masks), -1, dtype=np.int64)
    for mask in range(inst.n_masks - 1):
        free = np.flatnonzero(~bits[mask])
        acts[:, mask] = rng.choice(free, size=inst.J)
    return Policy(acts)


def all_policies(inst: Instance):
    """Yield every deterministic stationary policy.  Only sensible for tiny instances."""
    M = inst.n_masks
    choices = [free_units(mask, inst.N) for mask in range(M - 1)]
    slots = [(j, mask) for j in range(inst.J) for mask in range(M - 1)]
    for combo in itertools.product(*(choices[mask] for _, mask in slots)):
        acts = np.full((inst.J, M), -1, dtype=np.int64)
        for (j, mask), a in zip(slots, combo):
            acts[j, mask] = a
        yield Policy(acts)
