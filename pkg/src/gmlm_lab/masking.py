"""Mask laws, masked pseudolikelihood losses and the gradient-descent fitter.

Blocks (masks) are bitmask integers over coordinates, like configurations.
The loss for a (configuration, mask) pair is -log p_theta(x_K | x_-K), or the
mask-aware conditional p_theta(x_K | x_-K, K) when the mask law depends on x.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .ising import (
    CapacityError,
    IsingModel,
    MAX_EXACT_N,
    block_mask,
    block_members,
    exact_sample,
    n_params,
    scatter_completions,
)
from .numerics import FiniteDistribution, RngStream, logsumexp

POPULATION_MASK_LIMIT = 4096


# ---------------------------------------------------------------------------
# mask distributions


def _as_mask(block) -> int:
    if isinstance(block, (int, np.integer)):
        return int(block)
    return block_mask(block)


class MaskDistribution:
    """Base class. ``blocks`` lists masks; ``probs(x)`` gives their law at x."""

    n: int
    adaptive = False

    @property
    def blocks(self) -> tuple[int, ...]:
        raise NotImplementedError

    def probs(self, x: int) -> np.ndarray:
        raise NotImplementedError

    def block_index(self, block) -> int:
        mask = _as_mask(block)
        try:
            return self._index[mask]
        except KeyError:
            raise ValueError(f"block {block_members(mask)} is not in this mask family") from None

    def _check_cover(self, blocks: Sequence[int]) -> None:
        cover = 0
        for b in blocks:
            if b <= 0 or b >> self.n:
                raise ValueError(f"block {block_members(b)} is empty or outside [0, {self.n})")
            cover |= b
        if cover != (1 << self.n) - 1:
            raise ValueError("blocks do not cover every coordinate")

    def to_dict(self) -> dict:
        raise NotImplementedError


class UniformK(MaskDistribution):
    """Uniform law over all size-k subsets (the k-pseudolikelihood masks)."""

    def __init__(self, n: int, k: int):
        if not 1 <= k <= n:
            raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
        self.n, self.k = n, k
        self._blocks: tuple[int, ...] | None = None

    @property
    def blocks(self) -> tuple[int, ...]:
        if self._blocks is None:
            if math.comb(self.n, self.k) > 1 << 20:
                raise CapacityError(f"C({self.n},{self.k}) blocks is too many to enumerate")
            self._blocks = tuple(block_mask(c) for c in combinations(range(self.n), self.k))
            self._index = {b: i for i, b in enumerate(self._blocks)}
        return self._blocks

    def block_index(self, block) -> int:
        self.blocks
        return super().block_index(block)

    def probs(self, x: int) -> np.ndarray:
        nb = len(self.blocks)
        return np.full(nb, 1.0 / nb)

    def to_dict(self) -> dict:
        return {"type": "uniform", "n": self.n, "k": self.k}

    def __repr__(self) -> str:
        return f"UniformK(n={self.n}, k={self.k})"


class Weighted(MaskDistribution):
    def __init__(self, n: int, blocks: Iterable, probs: Sequence[float]):
        self.n = n
        self._blocks = tuple(_as_mask(b) for b in blocks)
        self._index = {b: i for i, b in enumerate(self._blocks)}
        if len(self._index) != len(self._blocks):
            raise ValueError("duplicate blocks")
        self._probs = FiniteDistribution(np.asarray(probs, dtype=float)).probs
        if self._probs.size != len(self._blocks):
            raise ValueError("one probability per block is required")
        self._check_cover(self._blocks)

    @property
    def blocks(self) -> tuple[int, ...]:
        return self._blocks

    def probs(self, x: int) -> np.ndarray:
        return self._probs

    def to_dict(self) -> dict:
        return {
            "type": "weighted",
            "n": self.n,
            "blocks": [list(block_members(b)) for b in self._blocks],
            "probs": [float(p) for p in self._probs],
        }


class Adaptive(MaskDistribution):
    """Mask law p(K | X) stored as an explicit (2^n, n_blocks) table."""

    adaptive = True

    def __init__(self, n: int, blocks: Iterable, table):
        if n > 12:
            raise CapacityError("adaptive tables are explicit per configuration; n <= 12")
        self.n = n
        self._blocks = tuple(_as_mask(b) for b in blocks)
        self._index = {b: i for i, b in enumerate(self._blocks)}
        if len(self._index) != len(self._blocks):
            raise ValueError("duplicate blocks")
        t = np.array(table, dtype=float)
        if t.shape != (1 << n, len(self._blocks)):
            raise ValueError(f"table shape {t.shape} != {(1 << n, len(self._blocks))}")
        if np.any(t < 0) or np.max(np.abs(t.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("each row of the mask table must be a distribution")
        t.setflags(write=False)
        self.table = t
        self._check_cover(self._blocks)

    @property
    def blocks(self) -> tuple[int, ...]:
        return self._blocks

    def probs(self, x: int) -> np.ndarray:
        return self.table[x]

    def to_dict(self) -> dict:
        return {
            "type": "adaptive",
            "n": self.n,
            "blocks": [list(block_members(b)) for b in self._blocks],
            "table": self.table.tolist(),
        }


def mask_from_dict(d: dict) -> MaskDistribution:
    kind = d.get("type")
    if kind == "uniform":
        return UniformK(int(d["n"]), int(d["k"]))
    if kind == "weighted":
        return Weighted(int(d["n"]), d["blocks"], d["probs"])
    if kind == "adaptive":
        return Adaptive(int(d["n"]), d["blocks"], d["table"])
    raise ValueError(f"unknown mask distribution type {kind!r}")


def load_mask(path) -> MaskDistribution:
    with open(path, encoding="utf-8") as fh:
        return mask_from_dict(json.load(fh))


def random_adaptive(n: int, rng: RngStream, n_blocks: int | None = None) -> Adaptive:
    """Adaptive law over singletons plus random extra blocks, all probabilities positive."""
    blocks = [1 << i for i in range(n)]
    extra = n_blocks - n if n_blocks is not None else 1 + rng.randbelow(n)
    pool = [b for b in range(1, 1 << n) if b not in blocks]
    for _ in range(min(extra, len(pool))):
        blocks.append(pool.pop(rng.randbelow(len(pool))))
    raw = 0.1 + rng.random_array((1 << n) * len(blocks)).reshape(1 << n, len(blocks))
    return Adaptive(n, blocks, raw / raw.sum(axis=1, keepdims=True))


def sample_mask(d: MaskDistribution, x: int, rng: RngStream) -> int:
    if isinstance(d, UniformK):
        if d.k == d.n:
            return (1 << d.n) - 1
        return block_mask(rng.subset(d.n, d.k))
    cdf = np.cumsum(d.probs(x))
    return d.blocks[rng.choice_index(cdf)]


# ---------------------------------------------------------------------------
# mask-aware conditionals


def adaptive_conditional(
    joint, d: MaskDistribution, x: int, block, resample=None
) -> FiniteDistribution:
    """p(x_R | x_-R, K) proportional to p(x) p(K | x), R = ``resample`` (default K).

    Completions of R are indexed little-endian over its sorted members. The
    default R = K is the mask-aware conditional used by the adaptive loss.
    """
    probs = joint.probs if isinstance(joint, FiniteDistribution) else np.asarray(joint)
    kb = d.block_index(block)
    members = block_members(_as_mask(block) if resample is None else _as_mask(resample))
    ys = scatter_completions(x, members)
    if isinstance(d, Adaptive):
        w = probs[ys] * d.table[ys, kb]
    else:
        w = probs[ys] * d.probs(x)[kb]
    total = w.sum()
    if not total > 0:
        raise ZeroDivisionError(
            f"state/mask pair unreachable: x={x}, block={block_members(_as_mask(block))}"
        )
    return FiniteDistribution(w / total)


def marginalization_identity_check(joint, d: MaskDistribution) -> float:
    """Max |p(x_K|x_-K) - E_{K'~p(.|x_-K)} p(x_K|x_-K,K')| over x and K in the family."""
    p = joint.probs if isinstance(joint, FiniteDistribution) else np.asarray(joint)
    n = d.n
    if n > 12:
        raise CapacityError("identity check enumerates every configuration; n <= 12")
    size = 1 << n
    idx = np.arange(size)
    table = d.table if isinstance(d, Adaptive) else np.tile(d.probs(0), (size, 1))
    pxk = p[:, None] * table  # p(x, K')
    worst = 0.0
    for K in d.blocks:
        key = idx & ~K
        marg = np.zeros(size)
        np.add.at(marg, key, p)  # p(x_-K)
        marg_k = np.zeros((size, table.shape[1]))
        np.add.at(marg_k, key, pxk)  # p(x_-K, K')
        den = marg[key]
        live = den > 0
        lhs = np.where(live, p / np.where(live, den, 1.0), 0.0)
        mk = marg_k[key]
        weight = mk / np.where(live, den, 1.0)[:, None]  # p(K' | x_-K)
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = np.where(mk > 0, pxk / np.where(mk > 0, mk, 1.0), 0.0)  # p(x_K | x_-K, K')
        rhs = np.sum(weight * cond, axis=1)
        gap = np.abs(lhs - rhs)[live]
        if gap.size:
            worst = max(worst, float(gap.max()))
    return worst


# ---------------------------------------------------------------------------
# datasets


@dataclass
class MaskedDataset:
    """Sequences (config bits) with m recorded masks each."""

    n: int
    configs: np.ndarray  # (n_sequences,)
    masks: np.ndarray  # (n_sequences, m)

    def __post_init__(self):
        self.configs = np.asarray(self.configs, dtype=np.int64).reshape(-1)
        self.masks = np.asarray(self.masks, dtype=np.int64).reshape(self.configs.size, -1)

    @property
    def n_sequences(self) -> int:
        return self.configs.size

    @property
    def m_masks(self) -> int:
        return self.masks.shape[1]

    def pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = np.repeat(self.configs, self.m_masks)
        k = self.masks.reshape(-1)
        return x, k, np.ones(x.size)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["seq_index", "config_bits", "mask_bits"])
            for s, (x, ms) in enumerate(zip(self.configs, self.masks)):
                for mk in ms:
                    w.writerow([s, int(x), int(mk)])

    @classmethod
    def read_csv(cls, path, n: int) -> "MaskedDataset":
        rows: dict[int, tuple[int, list[int]]] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                s, x, mk = int(rec["seq_index"]), int(rec["config_bits"]), int(rec["mask_bits"])
                if s in rows and rows[s][0] != x:
                    raise ValueError(f"sequence {s} has conflicting configurations")
                rows.setdefault(s, (x, []))[1].append(mk)
        order = sorted(rows)
        m = {len(rows[s][1]) for s in order}
        if len(m) != 1:
            raise ValueError("every sequence needs the same number of masks")
        return cls(n, [rows[s][0] for s in order], [rows[s][1] for s in order])


def make_dataset(
    model: IsingModel,
    d: MaskDistribution,
    n_sequences: int,
    m: int,
    data_rng: RngStream,
    mask_rng: RngStream,
) -> MaskedDataset:
    configs = exact_sample(model, data_rng, n_sequences)
    masks = np.array(
        [[sample_mask(d, int(x), mask_rng) for _ in range(m)] for x in configs], dtype=np.int64
    ).reshape(n_sequences, m)
    return MaskedDataset(model.n, configs, masks)


# ---------------------------------------------------------------------------
# loss machinery


def features(config_idx: np.ndarray, n: int) -> np.ndarray:
    """Sufficient statistics (x_i, then x_i x_j for i<j) for an array of config indices."""
    s = np.where((config_idx[..., None] >> np.arange(n)) & 1, 1.0, -1.0)
    iu, ju = np.triu_indices(n, 1)
    return np.concatenate([s, s[..., iu] * s[..., ju]], axis=-1)


@dataclass
class _Group:
    mask: int
    weights: np.ndarray  # (r,)
    feats: np.ndarray  # (r, 2^k, d)
    offsets: np.ndarray  # (r, 2^k) log p(K | y), zeros when non-adaptive
    observed: np.ndarray  # (r,) completion index of the observed x


@dataclass
class LossDesign:
    """Weighted (config, mask) pairs compiled into per-mask feature tensors."""

    n: int
    groups: list[_Group]
    total_weight: float
    pairs: tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False)

    @property
    def dim(self) -> int:
        return n_params(self.n)


def compile_design(n: int, configs, masks, weights, d: MaskDistribution | None = None) -> LossDesign:
    """Aggregate duplicate (config, mask) pairs and precompute completions."""
    configs = np.asarray(configs, dtype=np.int64)
    masks = np.asarray(masks, dtype=np.int64)
    weights = np.asarray(weights, dtype=float)
    keep = weights > 0
    configs, masks, weights = configs[keep], masks[keep], weights[keep]
    if configs.size == 0:
        raise ValueError("empty dataset")
    if np.any(masks <= 0) or np.any(masks >> n):
        raise ValueError("mask outside [0, n)")
    adaptive = d is not None and d.adaptive
    groups = []
    for mk in np.unique(masks):
        sel = masks == mk
        ux, inv = np.unique(configs[sel], return_inverse=True)
        w = np.bincount(inv, weights=weights[sel], minlength=ux.size)
        members = block_members(int(mk))
        if len(members) > MAX_EXACT_N:
            raise CapacityError(f"mask of size {len(members)} is too large to enumerate")
        comp = scatter_completions(0, members)
        ys = (ux[:, None] & ~int(mk)) | comp[None, :]
        observed = np.zeros(ux.size, dtype=np.int64)
        for pos, i in enumerate(members):
            observed |= ((ux >> i) & 1) << pos
        if adaptive:
            with np.errstate(divide="ignore"):
                offsets = np.log(d.table[ys, d.block_index(int(mk))])
        else:
            offsets = np.zeros(ys.shape)
        groups.append(_Group(int(mk), w, features(ys, n), offsets, observed))
    return LossDesign(n, groups, float(weights.sum()), (configs, masks, weights))


def design_from_dataset(data: MaskedDataset, d: MaskDistribution | None = None) -> LossDesign:
    x, k, w = data.pairs()
    return compile_design(data.n, x, k, w, d)


def population_mask_design(data: MaskedDataset, d: UniformK) -> LossDesign:
    """Every sequence paired with all C(n,k) masks at equal weight."""
    blocks = d.blocks
    if len(blocks) > POPULATION_MASK_LIMIT:
        raise CapacityError(f"{len(blocks)} masks exceed the population-mask limit")
    x = np.repeat(data.configs, len(blocks))
    k = np.tile(np.asarray(blocks, dtype=np.int64), data.n_sequences)
    return compile_design(data.n, x, k, np.full(x.size, 1.0 / len(blocks)), d)


def _as_design(data, d) -> LossDesign:
    if isinstance(data, LossDesign):
        return data
    return design_from_dataset(data, d)


def _group_terms(g: _Group, theta: np.ndarray):
    logits = g.feats @ theta + g.offsets
    lse = logsumexp(logits, axis=1)
    q = np.exp(logits - lse[:, None])
    logp_obs = logits[np.arange(logits.shape[0]), g.observed] - lse
    return q, logp_obs


def _check_theta(theta, design: LossDesign) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (design.dim,):
        raise ValueError(f"theta must have {design.dim} entries, got {theta.shape}")
    return theta


def mple_loss(theta, data, d: MaskDistribution | None = None) -> float:
    """Mean negative log (mask-aware) conditional over recorded (sequence, mask) pairs."""
    design = _as_design(data, d)
    theta = _check_theta(theta, design)
    total = 0.0
    for g in design.groups:
        _, logp = _group_terms(g, theta)
        total -= float(g.weights @ logp)
    loss = total / design.total_weight
    if not math.isfinite(loss):
        raise ArithmeticError("non-finite pseudolikelihood loss")
    return loss


def mple_loss_and_gradient(theta, data, d: MaskDistribution | None = None):
    design = _as_design(data, d)
    theta = _check_theta(theta, design)
    total = 0.0
    grad = np.zeros(design.dim)
    for g in design.groups:
        q, logp = _group_terms(g, theta)
        rows = np.arange(q.shape[0])
        expected = np.einsum("ra,rad->rd", q, g.feats)
        obs = g.feats[rows, g.observed]
        total -= float(g.weights @ logp)
        grad -= g.weights @ (obs - expected)
    loss = total / design.total_weight
    if not math.isfinite(loss):
        raise ArithmeticError("non-finite pseudolikelihood loss")
    return loss, grad / design.total_weight


def mple_gradient(theta, data, d: MaskDistribution | None = None) -> np.ndarray:
    return mple_loss_and_gradient(theta, data, d)[1]


def pair_gradients(theta, design: LossDesign) -> tuple[np.ndarray, np.ndarray]:
    """Per unique pair: gradient of -log p(x_K | x_-K[, K]) and its weight."""
    theta = _check_theta(theta, design)
    grads, weights = [], []
    for g in design.groups:
        q, _ = _group_terms(g, theta)
        rows = np.arange(q.shape[0])
        expected = np.einsum("ra,rad->rd", q, g.feats)
        grads.append(expected - g.feats[rows, g.observed])
        weights.append(g.weights)
    return np.concatenate(grads), np.concatenate(weights)


def loss_hessian(theta, data, d: MaskDistribution | None = None) -> np.ndarray:
    """Weighted mean of conditional covariances of the sufficient statistics."""
    design = _as_design(data, d)
    if design.dim > 120:
        raise CapacityError(f"{design.dim} parameters exceeds the Hessian cap of 120")
    theta = _check_theta(theta, design)
    H = np.zeros((design.dim, design.dim))
    for g in design.groups:
        q, _ = _group_terms(g, theta)
        mean = np.einsum("ra,rad->rd", q, g.feats)
        second = np.einsum("r,ra,rad,rae->de", g.weights, q, g.feats, g.feats)
        H += second - np.einsum("r,rd,re->de", g.weights, mean, mean)
    H /= design.total_weight
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class FitOptions:
    step_size: float = 0.1
    max_iters: int = 50000
    grad_tol: float = 1e-8
    max_halvings: int = 30

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")


@dataclass
class FitResult:
    theta_hat: np.ndarray
    loss: float
    grad_norm: float
    iterations: int
    converged: bool

    def to_dict(self) -> dict:
        return {
            "theta_hat": [float(v) for v in self.theta_hat],
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def fit_mple(data, d: MaskDistribution | None = None, opts: FitOptions = FitOptions()) -> FitResult:
    """Full-batch gradient descent from zero; the step halves whenever the loss rises."""
    design = _as_design(data, d)
    theta = np.zeros(design.dim)
    loss, grad = mple_loss_and_gradient(theta, design)
    step = opts.step_size
    it = 0
    while it < opts.max_iters:
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= opts.grad_tol:
            return FitResult(theta, loss, gnorm, it, True)
        it += 1
        # near the optimum the decrease falls below one ulp of the loss
        slack = 8.0 * np.finfo(float).eps * abs(loss)
        for _ in range(opts.max_halvings + 1):
            cand = theta - step * grad
            cand_loss, cand_grad = mple_loss_and_gradient(cand, design)
            if cand_loss <= loss + slack:
                break
            step *= 0.5
        else:
            # no decrease at any admissible step: numerically stationary
            return FitResult(theta, loss, gnorm, it, gnorm <= opts.grad_tol)
        theta, loss, grad = cand, cand_loss, cand_grad
        step = min(opts.step_size, 2.0 * step)
    gnorm = float(np.linalg.norm(grad))
    return FitResult(theta, loss, gnorm, it, gnorm <= opts.grad_tol)
