"""Matrix-form LLRR decomposition: ``X ~ D1 L + D2 S`` with L low-rank, S sparse.

The solver runs a fixed number of shrinkage steps

    Z_t = h_theta(mu D^T X + (lam3_hat I - mu D^T D) Z_{t-1}),

with ``D = (D1, D2)``, ``lam3_hat = 1 - lam3`` and a two-block threshold
vector ``theta = mu (lam1 * 1_{m1}; lam2 * 1_{m2})``.  The coefficient matrix
``Z`` stacks the low-rank block ``L`` (first ``m1`` rows) over the sparse
block ``S``.  Factors ``A``, ``B`` with ``L = A B`` are never formed; the
penalty on them is evaluated through the nuclear norm of ``L``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContractError, DivergenceError, ShapeError

DIVERGENCE_GROWTH = 1e6


def soft_threshold(x: np.ndarray, theta) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - theta, 0.0)


@dataclass
class DictionaryPair:
    """Base dictionary ``D1`` (n x m1) and salient dictionary ``D2`` (n x m2)."""

    D1: np.ndarray
    D2: np.ndarray

    def __post_init__(self):
        self.D1 = np.atleast_2d(np.asarray(self.D1, dtype=np.float64))
        self.D2 = np.atleast_2d(np.asarray(self.D2, dtype=np.float64))
        if self.D1.shape[0] != self.D2.shape[0]:
            raise ShapeError(f"dictionaries disagree on patch dimension: {self.D1.shape} vs {self.D2.shape}")
        if not (np.isfinite(self.D1).all() and np.isfinite(self.D2).all()):
            raise ContractError("dictionary entries must be finite")

    @property
    def n(self) -> int:
        return self.D1.shape[0]

    @property
    def m1(self) -> int:
        return self.D1.shape[1]

    @property
    def m2(self) -> int:
        return self.D2.shape[1]

    @property
    def D(self) -> np.ndarray:
        return np.hstack([self.D1, self.D2])


@dataclass
class LlrrProblem:
    """Data and regularization for one decomposition run.

    ``mu=None`` selects ``0.9 / ||D^T D||_2`` at solve time.
    """

    X: np.ndarray
    lam1: float = 0.1
    lam2: float = 0.1
    lam3: float = 0.1
    mu: Optional[float] = None
    T: int = 10

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if min(self.lam1, self.lam2, self.lam3) < 0:
            raise ContractError("regularization weights must be nonnegative")
        if not 0 < self.lam3_hat <= 1:
            raise ContractError(f"1 - lam3 must lie in (0, 1], got {self.lam3_hat}")
        if self.mu is not None and self.mu <= 0:
            raise ContractError(f"step size must be positive, got {self.mu}")
        if self.T < 1:
            raise ContractError(f"T must be at least 1, got {self.T}")

    @property
    def lam3_hat(self) -> float:
        return 1.0 - self.lam3


@dataclass
class CoefficientSplit:
    """Stacked coefficients ``Z = (L; S)`` with the split row fixed by ``m1``."""

    Z: np.ndarray
    m1: int

    @property
    def L(self) -> np.ndarray:
        return self.Z[: self.m1]

    @property
    def S(self) -> np.ndarray:
        return self.Z[self.m1 :]

    @classmethod
    def from_blocks(cls, L, S) -> "CoefficientSplit":
        return cls(np.vstack([L, S]), L.shape[0])


def gram_spectral_norm(D: np.ndarray, n_iter: int = 50) -> float:
    """``||D^T D||_2`` by power iteration from a fixed start vector."""
    G = D.T @ D
    v = np.ones(G.shape[0]) / np.sqrt(G.shape[0])
    lam = 0.0
    for _ in range(n_iter):
        w = G @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
        lam = float(v @ G @ v)
    # the Rayleigh quotient approaches from below; pad by the eigen-residual
    # so the returned bound errs on the safe side
    return lam + float(np.linalg.norm(G @ v - lam * v))


def default_step(D: np.ndarray) -> float:
    return 0.9 / gram_spectral_norm(D)


def threshold_vector(dictionary: DictionaryPair, lam1: float, lam2: float, mu: float) -> np.ndarray:
    """Column of per-row thresholds ``mu * (lam1 ...; lam2 ...)``."""
    return mu * np.concatenate([np.full(dictionary.m1, lam1), np.full(dictionary.m2, lam2)])[:, None]


def lista_matrices(problem: LlrrProblem, dictionary: DictionaryPair):
    """Return ``(mu, W_e, H, theta)`` set exactly as in the fixed-dictionary algorithm."""
    D = dictionary.D
    mu = problem.mu if problem.mu is not None else default_step(D)
    W_e = mu * D.T
    H = problem.lam3_hat * np.eye(D.shape[1]) - mu * (D.T @ D)
    theta = threshold_vector(dictionary, problem.lam1, problem.lam2, mu)
    return mu, W_e, H, theta


def lista_step(Z_prev: np.ndarray, B: np.ndarray, H: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """One shrinkage step ``h_theta(B + H Z_prev)``."""
    if H.shape[0] != H.shape[1] or H.shape[1] != Z_prev.shape[0] or B.shape != Z_prev.shape:
        raise ShapeError(f"lista_step: incompatible shapes Z={Z_prev.shape}, B={B.shape}, H={H.shape}")
    theta = np.asarray(theta)
    if theta.ndim == 1:
        theta = theta[:, None]
    if theta.shape[0] != Z_prev.shape[0]:
        raise ShapeError(f"lista_step: {theta.shape[0]} thresholds for {Z_prev.shape[0]} rows")
    return soft_threshold(B + H @ Z_prev, theta)


def objective_value(X, dictionary: DictionaryPair, split: CoefficientSplit, lam1, lam2, lam3) -> float:
    """Model objective with the factor penalty evaluated as ``lam1 ||L||_*``."""
    if split.m1 != dictionary.m1 or split.Z.shape[0] != dictionary.m1 + dictionary.m2:
        raise ShapeError("coefficient split does not match the dictionary pair")
    resid = X - dictionary.D @ split.Z
    fit = 0.5 * np.sum(resid * resid)
    dict_pen = lam3 * (np.sum(dictionary.D1**2) + np.sum(dictionary.D2**2))
    nuclear = np.sum(np.linalg.svd(split.L, compute_uv=False)) if split.L.size else 0.0
    return float(fit + dict_pen + lam1 * nuclear + lam2 * np.sum(np.abs(split.S)))


def surrogate_objective(X, dictionary: DictionaryPair, split: CoefficientSplit, lam1, lam2, lam3, mu) -> float:
    """The functional the shrinkage iteration actually descends.

    The ``lam3_hat`` residual weight acts as a ridge of strength ``lam3 / mu``
    and the low-rank block is shrunk entrywise, so the iterates minimize

        0.5 ||X - D Z||^2 + lam3/(2 mu) ||Z||^2 + lam1 ||L||_1 + lam2 ||S||_1

    (plus the constant dictionary penalty).  Descent is guaranteed when
    ``mu ||D^T D||_2 <= 1 - lam3``.
    """
    resid = X - dictionary.D @ split.Z
    return float(
        0.5 * np.sum(resid * resid)
        + lam3 * (np.sum(dictionary.D1**2) + np.sum(dictionary.D2**2))
        + lam3 / (2.0 * mu) * np.sum(split.Z**2)
        + lam1 * np.sum(np.abs(split.L))
        + lam2 * np.sum(np.abs(split.S))
    )


def _check_divergence(Z, value, start, t):
    if not np.isfinite(Z).all() or not np.isfinite(value):
        raise DivergenceError(f"non-finite coefficients at iteration {t}", iteration=t)
    if value > DIVERGENCE_GROWTH * max(abs(start), 1e-300):
        raise DivergenceError(
            f"objective grew from {start:.3e} to {value:.3e} by iteration {t}", iteration=t
        )


def llrr_decompose_matrix(problem: LlrrProblem, dictionary: DictionaryPair, history: Optional[list] = None):
    """Run ``T`` shrinkage steps and return ``(P_l, P_s, split)``.

    If ``history`` is a list, one diagnostics dict per iterate (including
    the initialization, index 0) is appended to it.

    Raises
    ------
    DivergenceError
        On a non-finite iterate or objective growth beyond ``1e6`` times the
        initial value.
    """
    if problem.X.shape[0] != dictionary.n:
        raise ShapeError(f"data has {problem.X.shape[0]} rows, dictionary expects {dictionary.n}")
    mu, W_e, H, theta = lista_matrices(problem, dictionary)
    B = W_e @ problem.X
    Z = soft_threshold(B, theta)

    def record(t, Z):
        split = CoefficientSplit(Z, dictionary.m1)
        value = objective_value(problem.X, dictionary, split, problem.lam1, problem.lam2, problem.lam3)
        if history is not None:
            history.append({"iteration": t, "objective": value, "nonzeros": int(np.count_nonzero(Z))})
        return value

    start = record(0, Z)
    _check_divergence(Z, start, start, 0)
    for t in range(1, problem.T + 1):
        Z = lista_step(Z, B, H, theta)
        _check_divergence(Z, record(t, Z), start, t)

    split = CoefficientSplit(Z, dictionary.m1)
    return dictionary.D1 @ split.L, dictionary.D2 @ split.S, split


def ista_reference(problem: LlrrProblem, dictionary: DictionaryPair, iterates: Optional[list] = None) -> CoefficientSplit:
    """Classical proximal-gradient run with operators rebuilt from ``D`` each step.

    Each step takes a gradient step of size ``mu`` on ``0.5 ||X - D Z||^2``,
    applies the ``lam3_hat`` residual weight, and shrinks.  With the same
    ``mu`` this reproduces the learned iteration when its matrices are set
    from ``D``.  ``iterates`` collects ``Z_0 .. Z_T`` when given.
    """
    D = dictionary.D
    X = problem.X
    mu = problem.mu if problem.mu is not None else default_step(D)
    theta = threshold_vector(dictionary, problem.lam1, problem.lam2, mu)
    Z = soft_threshold(mu * (D.T @ X), theta)
    if iterates is not None:
        iterates.append(Z)
    start = objective_value(X, dictionary, CoefficientSplit(Z, dictionary.m1), problem.lam1, problem.lam2, problem.lam3)
    for t in range(1, problem.T + 1):
        Z = soft_threshold(problem.lam3_hat * Z + mu * (D.T @ (X - D @ Z)), theta)
        if iterates is not None:
            iterates.append(Z)
        if not np.isfinite(Z).all():
            raise DivergenceError(f"non-finite coefficients at iteration {t}", iteration=t)
        value = objective_value(X, dictionary, CoefficientSplit(Z, dictionary.m1), problem.lam1, problem.lam2, problem.lam3)
        _check_divergence(Z, value, start, t)
    return CoefficientSplit(Z, dictionary.m1)


class FactorizationResult(NamedTuple):
    value: float
    converged: bool
    iterations: int
    residual: float


def nuclear_norm_via_factorization(L, r: Optional[int] = None, iters: int = 500, step: float = 1.0, tol: float = 1e-10) -> FactorizationResult:
    """Minimize ``0.5 ||A||_F^2 + 0.5 ||B||_F^2`` subject to ``A B = L``.

    Uses the method of multipliers: exact alternating ridge solves for ``A``
    and ``B`` followed by a dual ascent on the constraint, with the penalty
    starting at ``step`` and growing 5% per iteration.  At the optimum the
    value equals the nuclear norm of ``L``.  No singular value decomposition
    is involved.
    """
    L = np.atleast_2d(np.asarray(L, dtype=np.float64))
    m, n = L.shape
    r = min(m, n) if r is None else int(r)
    if r < 1 or iters < 1:
        raise ContractError("factor rank and iteration count must be positive")
    Q = np.eye(n, r)
    A = L @ Q
    B = Q.T.copy()
    Y = np.zeros_like(L)
    rho = float(step)
    eye = np.eye(r)
    scale = max(1.0, float(np.linalg.norm(L)))
    best = None
    prev = np.inf
    for it in range(1, iters + 1):
        target = Y + rho * L
        A = np.linalg.solve(eye + rho * (B @ B.T), B @ target.T).T
        B = np.linalg.solve(eye + rho * (A.T @ A), A.T @ target)
        R = L - A @ B
        Y += rho * R
        rho = min(rho * 1.05, 1e8)
        value = 0.5 * (np.sum(A * A) + np.sum(B * B))
        res = float(np.linalg.norm(R))
        if res <= 1e-6 * scale and (best is None or value < best[0]):
            best = (value, res)
        if res <= tol * scale and abs(prev - value) <= tol * max(1.0, value):
            return FactorizationResult(float(value), True, it, res)
        prev = value
    if best is None:
        best = (value, res)
    return FactorizationResult(float(best[0]), False, iters, float(best[1]))


# -- dictionaries ----------------------------------------------------------


def dct_dictionary(patch_size: int = 8, m1: Optional[int] = None) -> DictionaryPair:
    """Orthonormal 2-D DCT atoms split by frequency.

    Atoms are ordered by total frequency ``i + j`` (ties by ``i``); the
    ``m1`` lowest form ``D1`` and the rest form ``D2``.  The default
    ``m1 = patch_size`` keeps the smoothest atoms as the base dictionary.
    """
    from scipy.fft import dct

    p = patch_size
    if p < 2:
        raise ContractError("patch_size must be at least 2")
    m1 = p if m1 is None else m1
    if not 1 <= m1 < p * p:
        raise ContractError(f"m1 must lie in [1, {p * p - 1}], got {m1}")
    C = dct(np.eye(p), norm="ortho", axis=0)  # rows are 1-D basis vectors
    order = sorted(((i, j) for i in range(p) for j in range(p)), key=lambda ij: (ij[0] + ij[1], ij[0]))
    atoms = np.stack([np.outer(C[i], C[j]).ravel() for i, j in order], axis=1)
    return DictionaryPair(atoms[:, :m1], atoms[:, m1:])


def save_dictionary(path, dictionary: DictionaryPair, patch_size: int) -> None:
    from . import lrrw

    if patch_size * patch_size != dictionary.n:
        raise ShapeError(f"patch {patch_size}x{patch_size} does not match dictionary rows {dictionary.n}")
    lrrw.save(path, {"D1": dictionary.D1, "D2": dictionary.D2}, {"kind": "llrr-dictionary", "patch_size": patch_size})


def load_dictionary(path):
    """Return ``(DictionaryPair, patch_size)`` from an LRRW dictionary container."""
    from . import lrrw
    from .errors import ManifestError

    arrays, meta = lrrw.load(path)
    if meta.get("kind") != "llrr-dictionary":
        raise ManifestError(f"container holds {meta.get('kind')!r}, not an llrr-dictionary")
    if set(arrays) != {"D1", "D2"}:
        raise ManifestError(f"dictionary container must hold exactly D1 and D2, found {sorted(arrays)}")
    d = DictionaryPair(arrays["D1"], arrays["D2"])
    p = int(meta.get("patch_size", 0))
    if p * p != d.n:
        raise ManifestError(f"patch_size {p} does not match dictionary rows {d.n}")
    return d, p
