"""Weighted linear-algebra kernels for the linearised mixed model.

All metrics are diagonal and passed as 1-D weight vectors.  The random-effect
design ``U`` (one indicator column per group) is never formed densely: it is
applied through ``group_of`` with ``np.bincount`` accumulation.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .exceptions import CollinearityError, DataError, HendersonError, VarianceCollapseError

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-8
STANDARDISE_TOL = 1e-6
JITTER = 1e-10


@dataclass(frozen=True)
class GroupDesign:
    """Assignment of ``n`` observations to ``N`` non-empty groups."""

    group_of: np.ndarray
    n_groups: int

    def __post_init__(self):
        g = np.asarray(self.group_of)
        if g.ndim != 1:
            raise DataError("group_of must be a 1-D integer vector")
        if g.size and not np.issubdtype(g.dtype, np.integer):
            if not np.all(g == np.round(g)):
                raise DataError("group_of must contain integers")
        g = g.astype(np.intp)
        if g.size and (g.min() < 0 or g.max() >= self.n_groups):
            raise DataError(f"group indices must lie in [0, {self.n_groups})")
        counts = np.bincount(g, minlength=self.n_groups)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise DataError(f"group {int(empty[0])} has no observations")
        object.__setattr__(self, "group_of", g)

    @classmethod
    def from_labels(cls, labels):
        """Map arbitrary labels to contiguous indices in order of first appearance.

        Returns the design and the list of labels indexed by group.
        """
        index = {}
        group_of = np.empty(len(labels), dtype=np.intp)
        for i, lab in enumerate(labels):
            group_of[i] = index.setdefault(lab, len(index))
        return cls(group_of, len(index)), list(index)

    @classmethod
    def balanced(cls, n_groups, per_group):
        """``U = I_N kron 1_R``."""
        return cls(np.repeat(np.arange(n_groups), per_group), n_groups)

    @property
    def n(self):
        return self.group_of.shape[0]

    @property
    def sizes(self):
        return np.bincount(self.group_of, minlength=self.n_groups)

    def subset(self, idx):
        """Design restricted to rows ``idx``; group numbering is kept."""
        return GroupDesign(self.group_of[idx], self.n_groups)

    def expand(self, xi):
        """``U @ xi``."""
        return np.asarray(xi)[self.group_of]

    def aggregate(self, v):
        """``U.T @ v`` for a vector or an ``n x m`` matrix."""
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            return np.bincount(self.group_of, weights=v, minlength=self.n_groups)
        out = np.zeros((self.n_groups, v.shape[1]))
        np.add.at(out, self.group_of, v)
        return out

    def dense(self):
        if self.n * self.n_groups > 10**6:
            raise MemoryError("refusing to densify a large random-effect design")
        U = np.zeros((self.n, self.n_groups))
        U[np.arange(self.n), self.group_of] = 1.0
        return U


def _as_matrix(a, n):
    if a is None:
        return np.zeros((n, 0))
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return a


PIVOT_TOL = 1e-10


def _cholesky_with_jitter(G, what):
    """Cholesky factor of ``G``, adding jitter of last resort if it fails.

    A factorisation whose smallest squared pivot is below ``PIVOT_TOL`` times
    the largest counts as failed: the matrix is numerically singular.
    """
    try:
        factor = linalg.cho_factor(G, lower=True, check_finite=False)
        d = np.diag(factor[0]) ** 2
        if d.size == 0 or d.min() > PIVOT_TOL * d.max():
            return factor, False
    except linalg.LinAlgError:
        pass
    jitter = JITTER * max(float(np.mean(np.diag(G))), np.finfo(float).tiny)
    log.warning("%s: factorisation failed, adding jitter %.3g", what, jitter)
    try:
        return linalg.cho_factor(G + jitter * np.eye(G.shape[0]), lower=True, check_finite=False), True
    except linalg.LinAlgError:
        return None, True


def collinear_columns(basis, w):
    """Indices of columns that are (numerically) dependent on earlier ones."""
    B = np.sqrt(w)[:, None] * basis
    if B.shape[1] == 0:
        return []
    _, R, piv = linalg.qr(B, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = max(B.shape) * np.finfo(float).eps * (d[0] if d.size else 0.0) * 1e3
    rank = int(np.sum(d > tol))
    return sorted(int(j) for j in piv[rank:])


def weighted_projection(basis, w, target):
    """W-orthogonal projection of ``target`` onto the span of ``basis``.

    Returns ``(coefficients, projection)`` solving the weighted normal
    equations ``B'WB c = B'W t``.
    """
    target = np.asarray(target, dtype=float)
    basis = _as_matrix(basis, target.shape[0])
    w = np.asarray(w, dtype=float)
    if basis.shape[1] == 0:
        return np.zeros(0), np.zeros_like(target)
    BW = basis.T * w
    G = BW @ basis
    factor, jittered = _cholesky_with_jitter(G, "weighted_projection")
    if factor is None:
        cols = collinear_columns(basis, w)
        raise CollinearityError(f"basis is rank deficient (dependent columns {cols})", cols)
    coef = linalg.cho_solve(factor, BW @ target, check_finite=False)
    if jittered:
        cols = collinear_columns(basis, w)
        if cols:
            raise CollinearityError(f"basis is rank deficient (dependent columns {cols})", cols)
    return coef, basis @ coef


@dataclass
class HendersonSolution:
    gamma: np.ndarray  # coefficients on the component column(s)
    delta: np.ndarray  # coefficients on A
    xi: np.ndarray  # predicted group effects
    trace_T: float  # Trace[(U'WU + D^{-1})^{-1}]


def solve_henderson(f, A, design, w, d_inv, z):
    """Solve the mixed-model (Henderson) equations for one response.

    The system is

        [B'WB   B'WU        ] [beta]   [B'Wz]
        [U'WB   U'WU + d_inv] [xi  ] = [U'Wz]

    with ``B = [f | A]`` and ``D^{-1} = d_inv * I_N``.  Because ``U'WU`` is
    diagonal the group block is eliminated exactly (Schur complement) and the
    reduced fixed-effect block is Cholesky factorised.

    ``f`` may be a single column, an ``n x h`` matrix or ``None``.
    """
    z = np.asarray(z, dtype=float)
    n = z.shape[0]
    w = np.asarray(w, dtype=float)
    fm = _as_matrix(f, n)
    Am = _as_matrix(A, n)
    B = np.hstack([fm, Am])
    m = B.shape[1]
    if d_inv < 0 or not np.isfinite(d_inv):
        raise HendersonError(f"invalid precision D^-1 = {d_inv}")

    s = design.aggregate(w) + d_inv  # diag of U'WU + D^{-1}
    if np.any(s <= 0):
        raise HendersonError("group block U'WU + D^-1 is singular", np.inf)
    wz = w * z
    uwz = design.aggregate(wz)
    if m:
        WB = w[:, None] * B
        uwb = design.aggregate(WB)  # N x m
        G = B.T @ WB - uwb.T @ (uwb / s[:, None])
        rhs = B.T @ wz - uwb.T @ (uwz / s)
        factor, jittered = _cholesky_with_jitter(G, "solve_henderson")
        cond = None
        if jittered:
            ev = np.linalg.eigvalsh(G)
            cond = np.inf if ev[0] <= 0 else ev[-1] / ev[0]
        if factor is None or (cond is not None and cond > 1e12):
            raise HendersonError(
                f"Henderson system is singular (condition number {cond:.3g})", cond
            )
        beta = linalg.cho_solve(factor, rhs, check_finite=False)
        xi = (uwz - uwb @ beta) / s
    else:
        beta = np.zeros(0)
        xi = uwz / s
    h = fm.shape[1]
    gamma = beta[:h]
    if f is not None and np.ndim(f) == 1:
        gamma = float(gamma[0])
    return HendersonSolution(gamma, beta[h:], xi, float(np.sum(1.0 / s)))


def group_trace(design, w, sigma2):
    """``Trace[(U'WU + I/sigma2)^{-1}]``."""
    return float(np.sum(1.0 / (design.aggregate(w) + 1.0 / sigma2)))


def effective_random_df(design, w, sigma2):
    """``N - Trace[(U'WU + D^{-1})^{-1}] / sigma2``: effective number of group effects."""
    return design.n_groups - group_trace(design, w, sigma2) / sigma2


def update_variance(xi_hat, sigma2_old, design, w):
    """Fixed-point update of the group variance component.

    ``sigma2 <- xi'xi / (N - Trace[(U'WU + D^{-1})^{-1}] / sigma2_old)``,
    floored at ``VARIANCE_FLOOR``.
    """
    if not sigma2_old > 0:
        raise DataError("sigma2_old must be positive")
    xi_hat = np.asarray(xi_hat, dtype=float)
    denom = effective_random_df(design, w, sigma2_old)
    if not denom > 0:
        raise VarianceCollapseError(
            f"variance update denominator {denom:.3g} <= 0 (sigma2 = {sigma2_old:.3g})"
        )
    return max(float(xi_hat @ xi_hat) / denom, VARIANCE_FLOOR)


@dataclass
class PcaReduction:
    V: np.ndarray  # p x r, orthonormal columns
    eigenvalues: np.ndarray  # r, decreasing
    C: np.ndarray  # n x r scores, C = X V
    all_eigenvalues: np.ndarray = None  # every eigenvalue of X'PX, decreasing

    @property
    def rank(self):
        return self.V.shape[1]

    def loadings(self, u):
        """Minimum-norm original-space loadings ``V u``."""
        return self.V @ u


def check_standardised(X, pw, tol=STANDARDISE_TOL):
    """Raise unless every column of X has P-mean 0 and P-variance 1."""
    X = np.asarray(X, dtype=float)
    pw = np.asarray(pw, dtype=float) / np.sum(pw)
    mean = pw @ X
    var = pw @ (X - mean) ** 2
    zero = np.flatnonzero(var <= tol)
    if zero.size:
        raise DataError(f"column {int(zero[0])} of X has zero variance")
    bad = np.flatnonzero((np.abs(mean) > tol) | (np.abs(var - 1.0) > tol))
    if bad.size:
        raise DataError(f"column {int(bad[0])} of X is not standardised")


def pca_reduce(X, pw=None, check=True):
    """Principal-component reduction of a standardised ``X`` under metric ``P``.

    Keeps the leading eigenpairs of ``X'PX`` while each retained eigenvalue
    satisfies ``lambda_j / sum_{i<=j} lambda_i > 1/p``.  Exact ties at the
    threshold (e.g. ``X'PX = I``) are retained.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    pw = np.full(n, 1.0 / n) if pw is None else np.asarray(pw, dtype=float)
    if check:
        check_standardised(X, pw)
    G = X.T @ (pw[:, None] * X)
    lam, vec = linalg.eigh(G)
    order = np.argsort(lam)[::-1]
    lam, vec = lam[order], vec[:, order]
    lam_pos = np.where(lam > lam[0] * 1e-12, lam, 0.0)
    ratio = lam_pos / np.cumsum(lam_pos)
    keep = ratio > (1.0 / p) * (1.0 - 1e-9)
    r = int(np.argmin(keep)) if not np.all(keep) else p
    r = max(1, min(r, n - 1, p))
    V = _align_degenerate(vec[:, :r], lam[:r])
    # deterministic signs: largest |entry| of each eigenvector positive
    sgn = np.sign(V[np.argmax(np.abs(V), axis=0), np.arange(r)])
    V = V * np.where(sgn == 0, 1.0, sgn)
    return PcaReduction(V, lam[:r].copy(), X @ V, lam.copy())


def _align_degenerate(V, lam, tol=1e-8):
    """Fix the basis of each repeated-eigenvalue cluster deterministically.

    Within a cluster any rotation is an eigenbasis; the one closest to the
    coordinate axes with the largest weight in the cluster is chosen (polar
    factor of the selected rows), so that e.g. ``X'PX = I`` yields a
    permutation of the identity.
    """
    V = V.copy()
    start = 0
    r = V.shape[1]
    while start < r:
        stop = start + 1
        while stop < r and abs(lam[stop] - lam[start]) <= tol * max(abs(lam[start]), 1e-300):
            stop += 1
        if stop - start > 1:
            block = V[:, start:stop]
            _, _, piv = linalg.qr(block.T, pivoting=True)
            rows = np.sort(piv[: stop - start])
            u, _, vt = linalg.svd(block[rows].T)
            V[:, start:stop] = block @ (u @ vt)
        start = stop
    return V


def identity_reduction(X):
    """No reduction: ``C = X`` with ``V = I``."""
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    return PcaReduction(np.eye(p), np.full(p, np.nan), X.copy(), None)
