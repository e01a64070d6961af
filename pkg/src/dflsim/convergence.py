"""Executable check of the contraction-plus-noise-floor convergence bound.

The lab instantiates M strongly convex quadratic clients, runs gradient
descent with step 1/L on their weighted average objective plus injected
Gaussian gradient noise, and compares the empirical optimality gap per
round against (1 - mu/L)^r * gap_0 + sigma^2 / (mu * M).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(eq=False)
class QuadraticProblem:
    """Per-client quadratics f_m(w) = 1/2 w'A_m w - b_m'w with shared bounds.

    Every A_m must have its spectrum inside [mu, L]; alphas are the
    aggregation weights of the averaged objective F = sum alpha_m f_m.
    """

    a_mats: list[np.ndarray]
    b_vecs: list[np.ndarray]
    alphas: np.ndarray
    mu: float
    L: float
    sigma: float = 0.0

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if not 0 < self.mu <= self.L:
            raise ValueError("need 0 < mu <= L")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if len(self.a_mats) != len(self.b_vecs) or len(self.a_mats) != len(self.alphas):
            raise ValueError("client lists must have equal length")
        if abs(self.alphas.sum() - 1.0) > 1e-12:
            raise ValueError("alphas must sum to 1")
        tol = 1e-9
        for k, a in enumerate(self.a_mats):
            if not np.allclose(a, a.T, atol=1e-12):
                raise ValueError(f"A_{k} is not symmetric")
            eigs = np.linalg.eigvalsh(a)
            if eigs.min() < self.mu - tol or eigs.max() > self.L + tol:
                raise ValueError(
                    f"A_{k} spectrum [{eigs.min():.6g}, {eigs.max():.6g}] "
                    f"outside [{self.mu}, {self.L}]"
                )

    @property
    def n_clients(self) -> int:
        return len(self.a_mats)

    @property
    def dim(self) -> int:
        return self.a_mats[0].shape[0]

    def mean_a(self) -> np.ndarray:
        return sum(al * a for al, a in zip(self.alphas, self.a_mats))

    def mean_b(self) -> np.ndarray:
        return sum(al * b for al, b in zip(self.alphas, self.b_vecs))


def gen_quadratic_clients(
    m: int, dim: int, mu: float, L: float, heterogeneity: float, seed, sigma: float = 0.0
) -> QuadraticProblem:
    """Seeded quadratic clients with spectra in [mu, L].

    Each A_m is Q diag(u) Q' with u uniform in [mu, L] and Q a random
    rotation. Client minimizers are a shared seeded point plus
    ``heterogeneity`` times a per-client Gaussian offset, so zero
    heterogeneity gives every client the same optimum.
    """
    if m < 1 or dim < 1:
        raise ValueError("m and dim must be positive")
    if not 0 < mu <= L:
        raise ValueError("need 0 < mu <= L")
    if heterogeneity < 0:
        raise ValueError("heterogeneity must be >= 0")
    rng = np.random.default_rng(seed)
    base_opt = rng.normal(size=dim)
    a_mats, b_vecs = [], []
    for _ in range(m):
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        eigs = rng.uniform(mu, L, size=dim)
        a = (q * eigs) @ q.T
        a = 0.5 * (a + a.T)
        opt = base_opt + heterogeneity * rng.normal(size=dim)
        a_mats.append(a)
        b_vecs.append(a @ opt)
    return QuadraticProblem(a_mats, b_vecs, np.full(m, 1.0 / m), mu, L, sigma)


def global_optimum(problem: QuadraticProblem) -> np.ndarray:
    """Closed-form minimizer of the averaged objective."""
    a_bar = problem.mean_a()
    b_bar = problem.mean_b()
    w_star = np.linalg.solve(a_bar, b_bar)
    residual = np.linalg.norm(a_bar @ w_star - b_bar)
    if residual > 1e-10:
        raise ArithmeticError(f"optimum solve residual {residual:.3g} too large")
    return w_star


def optimality_gap(problem: QuadraticProblem, w: np.ndarray, w_star: np.ndarray) -> float:
    """F(w) - F(w*), evaluated as a quadratic form in the error."""
    e = w - w_star
    return 0.5 * float(e @ problem.mean_a() @ e)


@dataclass
class TrajectoryRecord:
    """Empirical gaps and the theory bound, indexed by round (0..R)."""

    gaps: np.ndarray
    bounds: np.ndarray

    def __post_init__(self):
        self.gaps = np.asarray(self.gaps, dtype=np.float64)
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        if self.gaps.shape != self.bounds.shape:
            raise ValueError("gaps and bounds must align")
        if self.gaps.min() < -1e-12:
            raise ValueError("optimality gaps must be non-negative")


def bound_values(problem: QuadraticProblem, gap0: float, rounds: int) -> np.ndarray:
    """Theory curve: contraction of the initial gap plus the noise floor."""
    r = np.arange(rounds + 1)
    contraction = (1.0 - problem.mu / problem.L) ** r
    floor = problem.sigma**2 / (problem.mu * problem.n_clients)
    return contraction * gap0 + floor


def run_bound_check(
    problem: QuadraticProblem, rounds: int, seed, w0: np.ndarray | None = None
) -> TrajectoryRecord:
    """Simulate w <- w - (1/L) grad F(w) + (1/L) noise for R rounds.

    The injected noise is Gaussian with total variance sigma^2 / M spread
    evenly over coordinates. Returns the per-round empirical gap alongside
    the theory bound anchored at the same initial gap.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    rng = np.random.default_rng(seed)
    a_bar = problem.mean_a()
    b_bar = problem.mean_b()
    w_star = global_optimum(problem)
    w = np.zeros(problem.dim) if w0 is None else np.asarray(w0, dtype=np.float64).copy()
    eta = 1.0 / problem.L
    noise_std = (
        problem.sigma / np.sqrt(problem.n_clients * problem.dim)
        if problem.sigma > 0
        else 0.0
    )
    gaps = [optimality_gap(problem, w, w_star)]
    for _ in range(rounds):
        grad = a_bar @ w - b_bar
        w = w - eta * grad
        if noise_std > 0:
            w = w + eta * rng.normal(0.0, noise_std, size=problem.dim)
        gaps.append(optimality_gap(problem, w, w_star))
    gaps = np.array(gaps)
    return TrajectoryRecord(gaps, bound_values(problem, gaps[0], rounds))


def mean_gap_trajectory(
    problem: QuadraticProblem, rounds: int, n_seeds: int, seed0: int = 0
) -> TrajectoryRecord:
    """Average the empirical gap over seeded noise realizations."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    acc = None
    bounds = None
    for s in range(n_seeds):
        rec = run_bound_check(problem, rounds, seed=[seed0, s])
        acc = rec.gaps if acc is None else acc + rec.gaps
        bounds = rec.bounds
    return TrajectoryRecord(acc / n_seeds, bounds)
