"""Ising models on {-1, +1}^n: exact small-n inference and the clique family.

Configurations are n-bit integers with bit i set iff spin i is +1, so
configuration index order is the same everywhere (tables, CSVs, oracles).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .numerics import FiniteDistribution, RngStream, logsumexp

MAX_EXACT_N = 20


class CapacityError(ValueError):
    """An exact computation would exceed its enumeration cap."""


class AssumptionError(ValueError):
    """A precondition expressed as a model assumption does not hold."""


# ---------------------------------------------------------------------------
# configurations


def spins(bits: int, n: int) -> np.ndarray:
    return np.array([1 if (bits >> i) & 1 else -1 for i in range(n)], dtype=float)


def bits_of(x: Sequence[int]) -> int:
    out = 0
    for i, s in enumerate(x):
        if s > 0:
            out |= 1 << i
    return out


@lru_cache(maxsize=32)
def spin_table(n: int) -> np.ndarray:
    """All 2^n configurations as a read-only (2^n, n) array of +-1 in index order."""
    idx = np.arange(1 << n, dtype=np.int64)
    table = np.where((idx[:, None] >> np.arange(n)) & 1, 1.0, -1.0)
    table.setflags(write=False)
    return table


def block_mask(block: Iterable[int]) -> int:
    m = 0
    for i in block:
        m |= 1 << int(i)
    return m


def block_members(mask: int) -> tuple[int, ...]:
    out = []
    i = 0
    while mask >> i:
        if (mask >> i) & 1:
            out.append(i)
        i += 1
    return tuple(out)


def scatter_completions(x_bits: int, members: Sequence[int]) -> np.ndarray:
    """Config indices of x with the given coordinates replaced by every completion.

    Completion a (little-endian over ``members`` sorted ascending) maps to
    entry a of the returned array.
    """
    k = len(members)
    a = np.arange(1 << k, dtype=np.int64)
    base = x_bits & ~block_mask(members)
    out = np.full(1 << k, base, dtype=np.int64)
    for pos, i in enumerate(members):
        out |= ((a >> pos) & 1) << i
    return out


# ---------------------------------------------------------------------------
# model


def pair_index(n: int) -> list[tuple[int, int]]:
    return list(combinations(range(n), 2))


def n_params(n: int) -> int:
    return n + n * (n - 1) // 2


@dataclass(frozen=True, eq=False)
class IsingModel:
    """Fields ``h`` and couplings ``J`` (dense, symmetric, zero diagonal).

    ``clique``/``J_clique`` are set only for models built from
    :class:`CliqueParams`; samplers use them for structured block updates.
    """

    n: int
    h: np.ndarray
    J: np.ndarray
    clique: tuple[int, ...] | None = field(default=None, compare=False)
    J_clique: float | None = field(default=None, compare=False)

    def __post_init__(self):
        n = int(self.n)
        if n < 1:
            raise ValueError("need at least one spin")
        h = np.array(self.h, dtype=float).reshape(-1)
        J = np.array(self.J, dtype=float)
        if h.shape != (n,) or J.shape != (n, n):
            raise ValueError(f"shape mismatch: h {h.shape}, J {J.shape} for n={n}")
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(J))):
            raise ValueError("model parameters must be finite")
        if np.any(np.diag(J) != 0):
            raise ValueError("couplings may not contain self-loops")
        if np.any(J != J.T):
            raise ValueError("coupling matrix must be symmetric")
        h.setflags(write=False)
        J.setflags(write=False)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "J", J)

    def __eq__(self, other) -> bool:
        if not isinstance(other, IsingModel):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.h, other.h) and np.array_equal(self.J, other.J)

    def __hash__(self) -> int:
        return hash((self.n, self.h.tobytes(), self.J.tobytes()))

    @classmethod
    def from_couplings(cls, n: int, h, couplings: Iterable[Sequence[float]]) -> "IsingModel":
        J = np.zeros((n, n))
        seen = set()
        for i, j, v in couplings:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop at {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"coupling ({i}, {j}) outside [0, {n})")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"pair {key} listed twice")
            seen.add(key)
            J[i, j] = J[j, i] = float(v)
        return cls(n, np.asarray(h, dtype=float), J)

    @classmethod
    def from_theta(cls, n: int, theta) -> "IsingModel":
        theta = np.asarray(theta, dtype=float)
        if theta.size != n_params(n):
            raise ValueError(f"theta has {theta.size} entries, expected {n_params(n)}")
        J = np.zeros((n, n))
        for v, (i, j) in zip(theta[n:], pair_index(n)):
            J[i, j] = J[j, i] = v
        return cls(n, theta[:n], J)

    @property
    def theta(self) -> np.ndarray:
        """Canonical parameter vector: all fields, then J_ij for i < j in row order."""
        iu, ju = np.triu_indices(self.n, 1)
        return np.concatenate([self.h, self.J[iu, ju]])

    @property
    def couplings(self) -> list[tuple[int, int, float]]:
        return [(i, j, float(self.J[i, j])) for i, j in pair_index(self.n) if self.J[i, j] != 0]

    def to_dict(self) -> dict:
        out = {"n": self.n, "h": [float(v) for v in self.h], "J": [list(c) for c in self.couplings]}
        if self.clique is not None:
            out["clique"] = list(self.clique)
            out["J_clique"] = self.J_clique
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "IsingModel":
        n = int(d["n"])
        model = cls.from_couplings(n, d["h"], d.get("J", []))
        if "clique" in d:
            clique = tuple(sorted(int(c) for c in d["clique"]))
            expected = build_clique_ising(CliqueParams(n, clique, float(d["J_clique"]), model.h))
            # block samplers trust the clique metadata, so it must describe J exactly
            if not np.array_equal(expected.J, model.J):
                raise ValueError("couplings do not match the declared clique and J_clique")
            object.__setattr__(model, "clique", clique)
            object.__setattr__(model, "J_clique", float(d["J_clique"]))
        return model

    @classmethod
    def load(cls, path) -> "IsingModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class CliqueParams:
    """A clique of strongly coupled spins plus isolated vertices."""

    n: int
    clique: tuple[int, ...]
    J: float
    h: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "clique", tuple(sorted(int(c) for c in self.clique)))
        h = tuple(float(v) for v in np.broadcast_to(np.asarray(self.h, dtype=float), (self.n,)))
        object.__setattr__(self, "h", h)
        if len(set(self.clique)) != len(self.clique):
            raise ValueError("clique indices repeat")
        if any(not 0 <= c < self.n for c in self.clique):
            raise ValueError(f"clique index outside [0, {self.n})")

    @property
    def size(self) -> int:
        return len(self.clique)

    @property
    def outside(self) -> tuple[int, ...]:
        members = set(self.clique)
        return tuple(i for i in range(self.n) if i not in members)


def build_clique_ising(p: CliqueParams) -> IsingModel:
    if p.size < 2:
        raise ValueError("the clique needs at least two members")
    if not p.J > 0:
        raise ValueError("clique coupling must be positive")
    J = np.zeros((p.n, p.n))
    for i, j in combinations(p.clique, 2):
        J[i, j] = J[j, i] = p.J
    return IsingModel(p.n, np.asarray(p.h), J, clique=p.clique, J_clique=float(p.J))


# ---------------------------------------------------------------------------
# exact inference


def _require_exact(n: int) -> None:
    if n > MAX_EXACT_N:
        raise CapacityError(f"exact enumeration needs n <= {MAX_EXACT_N}, got n={n}")


def log_weight(m: IsingModel, x: int) -> float:
    s = spins(x, m.n)
    return float(m.h @ s + 0.5 * s @ m.J @ s)


def log_weights(m: IsingModel) -> np.ndarray:
    """Unnormalised log-probabilities of every configuration, in index order."""
    _require_exact(m.n)
    S = spin_table(m.n)
    return S @ m.h + 0.5 * np.einsum("ci,ij,cj->c", S, m.J, S)


def partition_function_log(m: IsingModel) -> float:
    return logsumexp(log_weights(m))


def joint_table(m: IsingModel) -> FiniteDistribution:
    return FiniteDistribution.from_log_weights(log_weights(m))


def _block_log_weights(m: IsingModel, x: int, members: Sequence[int]) -> np.ndarray:
    k = len(members)
    members = list(members)
    A = spin_table(k)
    s = spins(x, m.n)
    inside = np.zeros(m.n, dtype=bool)
    inside[members] = True
    field_eff = m.h[members] + m.J[np.ix_(members, np.flatnonzero(~inside))] @ s[~inside]
    Jb = m.J[np.ix_(members, members)]
    return A @ field_eff + 0.5 * np.einsum("ai,ij,aj->a", A, Jb, A)


def block_conditional(m: IsingModel, x: int, block: Iterable[int]) -> FiniteDistribution:
    """p(x_K = a | x_-K) over completions a of the sorted block."""
    members = sorted(set(int(i) for i in block))
    if any(not 0 <= i < m.n for i in members):
        raise ValueError(f"block {members} is not a subset of [0, {m.n})")
    if len(members) > MAX_EXACT_N:
        raise CapacityError(f"block of size {len(members)} exceeds {MAX_EXACT_N}")
    return FiniteDistribution.from_log_weights(_block_log_weights(m, x, members))


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def local_field(m: IsingModel, x: int, i: int) -> float:
    s = spins(x, m.n)
    return float(m.h[i] + m.J[i] @ s)


def single_site_conditional(m: IsingModel, x: int, i: int) -> float:
    """Probability that spin i is +1 given the others."""
    if not 0 <= i < m.n:
        raise ValueError(f"coordinate {i} outside [0, {m.n})")
    return sigmoid(2.0 * local_field(m, x, i))


def exact_sample(m: IsingModel, rng: RngStream, size: int | None = None):
    """Inverse-CDF draw(s) from the joint table in configuration-index order."""
    cdf = np.cumsum(joint_table(m).probs)
    if size is None:
        return rng.choice_index(cdf)
    u = rng.random_array(size) * cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1).astype(np.int64)


# ---------------------------------------------------------------------------
# modes and assumptions


class Region(enum.Enum):
    R_PLUS = "R_plus"
    R_MINUS = "R_minus"
    NEITHER = "Neither"


def mode_region(x: int, clique: Iterable[int]) -> Region:
    cm = block_mask(clique)
    if x & cm == cm:
        return Region.R_PLUS
    if x & cm == 0:
        return Region.R_MINUS
    return Region.NEITHER


@dataclass
class AssumptionReport:
    holds: bool
    h_G: float
    J_0: float
    margins: dict[str, float] = field(default_factory=dict)

    def failing(self) -> list[str]:
        return [k for k, v in self.margins.items() if not v > 0 and not (k.endswith("(>=)") and v == 0)]


def check_strongly_ferromagnetic(p: CliqueParams) -> AssumptionReport:
    h = np.asarray(p.h)
    h_G = float(sum(h[i] for i in p.clique))
    h_out = float(sum(abs(h[i]) for i in p.outside))
    J_0 = float(p.J - np.sum(np.abs(h)))
    margins = {"h_G - sum_outside|h|": h_G - h_out, "J_0": J_0}
    return AssumptionReport(h_G > h_out and J_0 > 0, h_G, J_0, margins)


def check_strong_interactions(p: CliqueParams, delta: float, M: int) -> AssumptionReport:
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if M < 1:
        raise ValueError("M must be a positive integer")
    base = check_strongly_ferromagnetic(p)
    need_size = 8.0 * (1.0 + math.log(4.0 * M / delta))
    need_hG = 0.5 * math.log(2.0 * (4.0 - delta) / delta)
    need_J0 = 0.5 * p.size * math.log(2.0)
    margins = {
        "|C_G| - 8(1+ln(4M/delta)) (>=)": p.size - need_size,
        "h_G - ln(2(4-delta)/delta)/2 (>=)": base.h_G - need_hG,
        "J_0 - |C_G| ln2 / 2 (>=)": base.J_0 - need_J0,
    }
    holds = p.size >= need_size and base.h_G >= need_hG and base.J_0 >= need_J0
    return AssumptionReport(holds, base.h_G, base.J_0, margins)


def large_k_threshold(p: CliqueParams, delta: float) -> float:
    n, c = p.n, p.size
    return max(float(c), n - delta * (n + 1) / ((4.0 - delta) * c + delta))


def check_large_k(p: CliqueParams, k: int, delta: float) -> AssumptionReport:
    if k > p.n:
        raise ValueError(f"k={k} exceeds n={p.n}")
    base = check_strongly_ferromagnetic(p)
    thr = large_k_threshold(p, delta)
    return AssumptionReport(k >= thr, base.h_G, base.J_0, {"k - threshold (>=)": k - thr})


@dataclass
class ModeOrderingReport:
    holds: bool
    min_log_plus: float
    max_log_minus: float
    min_log_minus: float
    max_log_rest: float
    J_0: float
    h_G: float
    max_ratio_error: float
    involution_ok: bool

    @property
    def plus_minus_margin(self) -> float:
        return self.min_log_plus - self.max_log_minus

    @property
    def minus_rest_margin(self) -> float:
        return self.min_log_minus - (2.0 * self.J_0 + self.max_log_rest)


def clique_flip(x: int, clique: Iterable[int]) -> int:
    """The bijection R_plus -> R_minus: clear clique bits, keep the rest."""
    return x & ~block_mask(clique)


def verify_mode_ordering(p: CliqueParams, require_assumption: bool = True) -> ModeOrderingReport:
    """Check the two-mode structure of a clique model by full enumeration.

    Part 1: every R_plus config beats every R_minus config, which in turn
    beats e^{2 J_0} times every config outside both modes. Part 2: clearing
    the clique bits maps R_plus onto R_minus with probability ratio e^{2 h_G}.
    """
    if p.n > 16:
        raise CapacityError(f"mode verification enumerates 2^n configs; n={p.n} > 16")
    rep = check_strongly_ferromagnetic(p)
    if require_assumption and not rep.holds:
        raise AssumptionError(f"strongly ferromagnetic assumption fails: {rep.margins}")
    m = build_clique_ising(p)
    lw = log_weights(m)
    idx = np.arange(1 << p.n)
    cm = block_mask(p.clique)
    plus = (idx & cm) == cm
    minus = (idx & cm) == 0
    rest = ~(plus | minus)
    max_rest = float(lw[rest].max()) if rest.any() else -math.inf
    plus_idx = idx[plus]
    flipped = plus_idx & ~cm
    involution_ok = bool(np.all(minus[flipped])) and bool(
        np.all((flipped | cm) == plus_idx)
    )
    ratio_err = float(np.max(np.abs(np.expm1(lw[plus_idx] - lw[flipped] - 2.0 * rep.h_G))))
    out = ModeOrderingReport(
        holds=False,
        min_log_plus=float(lw[plus].min()),
        max_log_minus=float(lw[minus].max()),
        min_log_minus=float(lw[minus].min()),
        max_log_rest=max_rest,
        J_0=rep.J_0,
        h_G=rep.h_G,
        max_ratio_error=ratio_err,
        involution_ok=involution_ok,
    )
    out.holds = (
        out.plus_minus_margin > 0
        and out.minus_rest_margin > 0
        and ratio_err <= 1e-9
        and involution_ok
    )
    return out
