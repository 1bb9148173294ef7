"""Component criterion: structural relevance, goodness of fit and trade-off.

For a loading vector ``u`` (in the coordinates of the reduced regressors
``C``) the component is ``f = C u`` and

* structural relevance (variable-powered inertia)
  ``phi(u) = [sum_j omega_j (<f, x_j>_P^2)^l]^(1/l)``;
* goodness of fit
  ``psi(u) = sum_k ||proj_{span(f, A_h)}^{W_k} z_k||^2_{W_k}``;
* trade-off ``J(u) = s log phi(u) + (1 - s) log psi(u)``.

Goodness of fit is evaluated in closed form.  Partialling ``A_h`` out of
each response once gives, with ``C~`` and ``z~`` the W-residuals on
``A_h``,

    psi_k(u) = ||Q z_k||^2 + (u'c_k)^2 / (u'H_k u),
    c_k = C'W_k z~_k,   H_k = C~'W_k C~,

so each evaluation costs ``O(q r^2 + p r)`` and the gradient is exact.
:func:`goodness_of_fit` keeps the literal projection route for checking.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import CollinearityError, CriterionError, DataError
from .linmix import weighted_projection


@dataclass
class CriterionContext:
    """Everything the criterion needs besides ``u``.

    Parameters
    ----------
    C : (n, r) array
        Reduced regressors; the component is ``C @ u``.
    X : (n, p) array
        Original standardised columns used inside ``phi``.
    responses : list of (z, w)
        Working variable and working-weight diagonal per response.
    A : (n, m) array, optional
        Extra covariates ``A_h`` (previous components and additional
        variables).
    pw : (n,) array, optional
        Observation weights, the diagonal of ``P``.  Defaults to ``1/n``.
    omega : (p,) array, optional
        Variable weights, normalised to sum to one.  Defaults to ``1/p``.
    l : float
        Locality, ``>= 1``.
    s : float
        Trade-off in ``[0, 1]``.
    """

    C: np.ndarray
    X: np.ndarray
    responses: list = field(default_factory=list)
    A: np.ndarray = None
    pw: np.ndarray = None
    omega: np.ndarray = None
    l: float = 1.0
    s: float = 0.5

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        n, p = self.X.shape
        if self.C.shape[0] != n:
            raise DataError("C and X must have the same number of rows")
        if self.A is None:
            self.A = np.zeros((n, 0))
        self.A = np.asarray(self.A, dtype=float).reshape(n, -1)
        self.pw = np.full(n, 1.0 / n) if self.pw is None else np.asarray(self.pw, dtype=float)
        omega = np.full(p, 1.0 / p) if self.omega is None else np.asarray(self.omega, dtype=float)
        if omega.shape != (p,) or np.any(omega < 0) or omega.sum() <= 0:
            raise DataError("omega must be p nonnegative weights with positive sum")
        self.omega = omega / omega.sum()
        if not self.l >= 1:
            raise DataError(f"locality l must be >= 1, got {self.l}")
        if not 0.0 <= self.s <= 1.0:
            raise DataError(f"trade-off s must lie in [0, 1], got {self.s}")
        self.responses = [(np.asarray(z, float), np.asarray(w, float)) for z, w in self.responses]

    @property
    def r(self):
        return self.C.shape[1]

    @cached_property
    def metric_inv(self):
        """``M^{-1} = C'PC``."""
        return self.C.T @ (self.pw[:, None] * self.C)

    @cached_property
    def criterion(self):
        return Criterion(self)


class Criterion:
    """Precomputed evaluator of ``phi``, ``psi`` and ``J`` with gradients."""

    def __init__(self, ctx):
        self.ctx = ctx
        self.s = float(ctx.s)
        self.l = float(ctx.l)
        self.omega = ctx.omega
        # columns j of G hold C'P x_j, so <Cu, x_j>_P = (G'u)_j
        self.G = ctx.C.T @ (ctx.pw[:, None] * ctx.X)
        self.base = 0.0
        self.cs, self.Hs = [], []
        A = ctx.A
        for z, w in ctx.responses:
            if A.shape[1]:
                coef_z, pz = weighted_projection(A, w, z)
                zt = z - pz
                AW = A.T * w
                coef_c = np.linalg.solve(AW @ A, AW @ ctx.C)
                Ct = ctx.C - A @ coef_c
                self.base += float(np.sum(w * pz**2))
            else:
                zt, Ct = z, ctx.C
            self.cs.append(Ct.T @ (w * zt))
            self.Hs.append(Ct.T @ (w[:, None] * Ct))
        self.cs = np.array(self.cs).reshape(len(self.cs), ctx.r)
        self.Hs = np.array(self.Hs).reshape(len(self.Hs), ctx.r, ctx.r)

    # -- structural relevance ----------------------------------------------

    def _phi_parts(self, u):
        a = self.G.T @ u
        m = float(np.max(np.abs(a))) if a.size else 0.0
        if m == 0.0:
            return a, 0.0, None, None
        b = a / m
        b2l = np.abs(b) ** (2.0 * self.l)
        S = float(self.omega @ b2l)
        return a, m, b, S

    def log_phi(self, u):
        _, m, _, S = self._phi_parts(u)
        if m == 0.0 or S <= 0.0:
            return -np.inf
        return 2.0 * np.log(m) + np.log(S) / self.l

    def phi(self, u):
        return float(np.exp(self.log_phi(u)))

    def grad_log_phi(self, u):
        _, m, b, S = self._phi_parts(u)
        if m == 0.0 or S <= 0.0:
            raise CriterionError("structural relevance is zero at this direction")
        db = np.sign(b) * np.abs(b) ** (2.0 * self.l - 1.0)
        return (2.0 / (m * S)) * (self.G @ (self.omega * db))

    # -- goodness of fit -----------------------------------------------------

    def _psi_parts(self, u):
        uc = self.cs @ u  # (q,)
        Hu = self.Hs @ u  # (q, r)
        uHu = Hu @ u
        return uc, Hu, uHu

    def psi(self, u):
        uc, _, uHu = self._psi_parts(u)
        if np.any(uHu <= 0):
            raise CollinearityError("component lies in the span of the extra covariates")
        return self.base + float(np.sum(uc**2 / uHu))

    def grad_psi(self, u):
        uc, Hu, uHu = self._psi_parts(u)
        if np.any(uHu <= 0):
            raise CollinearityError("component lies in the span of the extra covariates")
        g = 2.0 * (uc / uHu) @ self.cs - 2.0 * (uc**2 / uHu**2) @ Hu
        return g

    # -- trade-off -----------------------------------------------------------

    def value(self, u):
        u = np.asarray(u, dtype=float)
        J = 0.0
        if self.s > 0:
            lp = self.log_phi(u)
            if not np.isfinite(lp):
                raise CriterionError("structural relevance is zero at this direction")
            J += self.s * lp
        if self.s < 1:
            ps = self.psi(u)
            if not ps > 0:
                raise CriterionError("goodness of fit is zero at this direction")
            J += (1.0 - self.s) * np.log(ps)
        return float(J)

    def gradient(self, u):
        u = np.asarray(u, dtype=float)
        g = np.zeros(u.shape[0])
        if self.s > 0:
            g += self.s * self.grad_log_phi(u)
        if self.s < 1:
            ps = self.psi(u)
            if not ps > 0:
                raise CriterionError("goodness of fit is zero at this direction")
            g += (1.0 - self.s) * self.grad_psi(u) / ps
        return g

    def __call__(self, u):
        return self.value(u), self.gradient(u)


def structural_relevance(u, ctx):
    """Variable-powered inertia ``phi(u)``; 0 for a degenerate direction."""
    return ctx.criterion.phi(np.asarray(u, dtype=float))


def goodness_of_fit(u, ctx):
    """``psi(u)`` through explicit W-projections on ``[C u | A_h]``."""
    f = ctx.C @ np.asarray(u, dtype=float)
    basis = np.column_stack([f, ctx.A])
    total = 0.0
    for z, w in ctx.responses:
        _, proj = weighted_projection(basis, w, z)
        total += float(np.sum(w * proj**2))
    return total


def combined_criterion(u, ctx):
    """``s log phi(u) + (1 - s) log psi(u)``."""
    return ctx.criterion.value(u)


def criterion_gradient(u, ctx):
    """Analytic gradient of :func:`combined_criterion` with respect to ``u``."""
    return ctx.criterion.gradient(u)
