"""Dense linear algebra, SplitMix64 randomness and distribution distances.

Everything here works on small dense problems: Hessians with at most a few
hundred parameters and transition matrices over a few thousand states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

PSD_RTOL = 1e-8


class ConvergenceError(ArithmeticError):
    """Raised when an iterative routine stops before meeting its tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class SingularMatrixError(ArithmeticError):
    def __init__(self, eigmin: float):
        super().__init__(f"matrix is not safely positive definite: eigmin={eigmin:.3e}")
        self.eigmin = eigmin


class SupportError(ValueError):
    def __init__(self, index: int):
        super().__init__(f"q vanishes where p is positive at index {index}")
        self.index = index


# ---------------------------------------------------------------------------
# symmetric matrices


def sym_matrix(a) -> np.ndarray:
    """Return a float copy of ``a`` with exactly symmetric storage.

    Raises ValueError when ``a`` is not square or is visibly asymmetric.
    """
    a = np.array(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"expected a non-empty square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > 1e-9 * scale:
        raise ValueError("matrix is not symmetric")
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # orthonormal columns
    sweeps: int = 0

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def jacobi_eigen(a, tol: float = 1e-13, max_sweeps: int = 100) -> EigenDecomposition:
    """Eigen-decompose a symmetric matrix with cyclic Jacobi rotations.

    Sweeps over all (p, q) pairs in row order until the off-diagonal
    Frobenius norm drops to ``tol * ||A||_F``.
    """
    a = sym_matrix(a)
    n = a.shape[0]
    if n > 8192:
        raise ValueError(f"dimension {n} exceeds the 8192 cap")
    v = np.eye(n)
    norm = float(np.linalg.norm(a))
    target = tol * norm
    sweeps = 0
    off = _off_norm(a)
    while off > target:
        if sweeps >= max_sweeps:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps", off)
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app, aqq = a[p, p], a[q, q]
                # skip rotations below the representable level of the diagonal
                if abs(apq) < 1e-300 or (
                    sweeps > 4 and abs(apq) * 1e18 < min(abs(app), abs(aqq))
                ):
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        off = _off_norm(a)
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return EigenDecomposition(w[order], v[:, order], sweeps)


def eigvalsh(a) -> np.ndarray:
    return jacobi_eigen(a).eigenvalues


def invert_spd(a, min_eig: float = 1e-10) -> np.ndarray:
    """Invert a symmetric positive definite matrix through its eigenbasis."""
    dec = jacobi_eigen(a)
    eigmin = float(dec.eigenvalues[-1])
    if not eigmin > min_eig:
        raise SingularMatrixError(eigmin)
    v = dec.eigenvectors
    inv = (v / dec.eigenvalues) @ v.T
    return 0.5 * (inv + inv.T)


def psd_gap(a) -> float:
    """Smallest eigenvalue of ``a``; the caller decides what counts as PSD."""
    return float(jacobi_eigen(a).eigenvalues[-1])


def psd_tolerance(a) -> float:
    """Admissible negative slack for a PSD verdict on ``a``."""
    radius = float(np.max(np.abs(eigvalsh(a))))
    return PSD_RTOL * max(1.0, radius)


def is_psd(a) -> bool:
    dec = jacobi_eigen(a)
    radius = float(np.max(np.abs(dec.eigenvalues)))
    return bool(dec.eigenvalues[-1] >= -PSD_RTOL * max(1.0, radius))


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], theta: Sequence[float], step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step {step} outside [1e-7, 1e-3]")
    theta = np.array(theta, dtype=float)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        down = theta.copy()
        up[i] += step
        down[i] -= step
        fu, fd = float(f(up)), float(f(down))
        if not (math.isfinite(fu) and math.isfinite(fd)):
            raise ArithmeticError(f"non-finite function value along coordinate {i}")
        grad[i] = (fu - fd) / (2.0 * step)
    return grad


def logsumexp(a, axis=None):
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


# ---------------------------------------------------------------------------
# finite distributions


@dataclass(frozen=True)
class FiniteDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probabilities must be a non-empty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and nonnegative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def normalized(cls, weights) -> "FiniteDistribution":
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum())

    @classmethod
    def from_log_weights(cls, logw) -> "FiniteDistribution":
        logw = np.asarray(logw, dtype=float)
        w = np.exp(logw - logsumexp(logw))
        return cls(w / w.sum())

    def __len__(self) -> int:
        return self.probs.size

    def __getitem__(self, i):
        return self.probs[i]


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = p.probs if isinstance(p, FiniteDistribution) else np.asarray(p, dtype=float)
    q = q.probs if isinstance(q, FiniteDistribution) else np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"support sizes differ: {p.size} vs {q.size}")
    return p, q


def tv_distance(p, q) -> float:
    p, q = _pair(p, q)
    return float(min(1.0, 0.5 * np.sum(np.abs(p - q))))


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats, with 0 log 0 = 0."""
    p, q = _pair(p, q)
    bad = np.flatnonzero((p > 0) & (q <= 0))
    if bad.size:
        raise SupportError(int(bad[0]))
    mask = p > 0
    return float(max(0.0, np.sum(p[mask] * np.log(p[mask] / q[mask]))))


# ---------------------------------------------------------------------------
# randomness


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *indices: int) -> int:
    """Hash a seed and a path of indices into a fresh 64-bit stream state."""
    s = mix64(seed & MASK64)
    for idx in indices:
        s = mix64(s ^ mix64((idx + 1) * GOLDEN_GAMMA))
    return s


def _mix64_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


class RngStream:
    """SplitMix64 generator; the state is a Weyl counter so bulk draws vectorize.

    A stream has a single owner. Use :meth:`derive` to hand out independent
    streams per trial.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    @classmethod
    def derive(cls, seed: int, *indices: int) -> "RngStream":
        return cls(derive_seed(seed, *indices))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def u64_array(self, size: int) -> np.ndarray:
        steps = np.arange(1, size + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
        self.state = (self.state + size * GOLDEN_GAMMA) & MASK64
        return _mix64_array(states)

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def random_array(self, size: int) -> np.ndarray:
        return (self.u64_array(size) >> np.uint64(11)).astype(float) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def choice_index(self, cdf: np.ndarray) -> int:
        """Inverse-CDF draw from a cumulative probability vector."""
        u = self.random() * cdf[-1]
        return min(int(np.searchsorted(cdf, u, side="right")), cdf.size - 1)

    def subset(self, n: int, k: int) -> list[int]:
        """Uniform size-k subset of range(n) via a Fisher-Yates prefix, sorted."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} of {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return sorted(pool[:k])
