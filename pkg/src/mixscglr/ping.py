"""Projected Iterated Normed Gradient (PING).

Maximises a smooth criterion ``J(u)`` subject to ``u' M^{-1} u = 1`` and
``Delta' u = 0``.  The change of variable ``v = M^{-1/2} u`` turns this into
a program on the unit sphere with constraints ``B' v = 0``, ``B = M^{1/2}
Delta``.  Each iteration moves towards the normalised projected gradient
``Pi grad G(v) / ||Pi grad G(v)||`` and a line search on the arc between
the current point and that target guarantees ascent.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .exceptions import CollinearityError, CriterionError, DataError

log = logging.getLogger(__name__)

MAX_HALVINGS = 60
MAX_NEWTON = 10


def orthogonality_projector(B, r=None):
    """``I - B (B'B)^{-1} B'``, the projector onto ``span(B)^perp``.

    Rank-deficient ``B`` has its dependent directions dropped (with a warning).
    """
    if B is None or np.size(B) == 0:
        if r is None:
            raise DataError("dimension r is required for an empty constraint matrix")
        return np.eye(r)
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    r = B.shape[0]
    if B.shape[1] == 0:
        return np.eye(r)
    Uq, sv, _ = linalg.svd(B, full_matrices=False)
    tol = max(B.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0) * 1e3
    rank = int(np.sum(sv > tol))
    if rank < B.shape[1]:
        warnings.warn(
            f"constraint matrix has rank {rank} < {B.shape[1]}; dropping dependent columns",
            RuntimeWarning,
            stacklevel=2,
        )
    Q = Uq[:, :rank]
    Pi = np.eye(r) - Q @ Q.T
    return 0.5 * (Pi + Pi.T)


def metric_roots(M_inv):
    """Symmetric ``M^{1/2}`` and ``M^{-1/2}`` from ``M^{-1}`` (positive definite)."""
    lam, vec = linalg.eigh(M_inv)
    if lam[0] <= 0:
        raise CollinearityError("metric C'PC is not positive definite")
    M_half = (vec / np.sqrt(lam)) @ vec.T
    M_half_inv = (vec * np.sqrt(lam)) @ vec.T
    return M_half, M_half_inv


@dataclass
class SphereProgram:
    """Maximise ``criterion`` on ``{u : u'M^{-1}u = 1, Delta'u = 0}``.

    ``criterion(u)`` must return ``(J, grad_u J)``; ``value(u)``, if given,
    returns ``J`` alone and is used by the line search.
    """

    criterion: callable
    M_half: np.ndarray
    M_half_inv: np.ndarray
    init: np.ndarray
    Delta: np.ndarray = None
    value: callable = None
    max_iter: int = 200
    tol: float = 1e-6
    line_search: str = "halving"
    max_restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.line_search not in ("halving", "newton"):
            raise DataError(f"unknown line search {self.line_search!r}")
        r = self.M_half.shape[0]
        if self.Delta is None:
            self.Delta = np.zeros((r, 0))
        self.Delta = np.asarray(self.Delta, dtype=float).reshape(r, -1)
        if self.Delta.shape[1] >= r:
            raise DataError("constraints leave no feasible direction")


@dataclass
class PingResult:
    u: np.ndarray
    v: np.ndarray
    J: float
    converged: bool
    n_iter: int
    trace: list = field(default_factory=list)
    restarts: int = 0


def _normalise(v):
    nv = np.linalg.norm(v)
    if nv == 0 or not np.isfinite(nv):
        raise CriterionError("cannot normalise a zero direction")
    return v / nv


def _arc_newton(G, Gamma, v, J, m):
    """Unidimensional Newton search for the maximum of G on the arc (v, m)."""
    w = m - (m @ v) * v
    nw = np.linalg.norm(w)
    if nw < 1e-14:
        return m, G(m), 0
    w = w / nw
    theta_k = float(np.arctan2(m @ w, m @ v))

    def point(t):
        return np.cos(t) * v + np.sin(t) * w

    def dh(t):
        _, g = Gamma(point(t))
        return float(g @ (-np.sin(t) * v + np.cos(t) * w))

    best_t, best_J = 0.0, J
    t = theta_k
    eps = 1e-6
    for it in range(MAX_NEWTON):
        Jt = G(point(t))
        if Jt > best_J:
            best_t, best_J = t, Jt
        d1 = dh(t)
        d2 = (dh(t + eps) - dh(t - eps)) / (2 * eps)
        if not np.isfinite(d2) or d2 >= 0:
            break
        t_new = float(np.clip(t - d1 / d2, 0.0, np.pi / 2))
        if abs(t_new - t) < 1e-12:
            break
        t = t_new
    return point(best_t), best_J, it + 1


def _run(program, init):
    Mh = program.M_half
    r = Mh.shape[0]
    Pi = orthogonality_projector(Mh @ program.Delta, r)
    crit = program.criterion
    val = program.value or (lambda u: crit(u)[0])

    def G(v):
        return val(Mh @ v)

    def Gamma(v):
        J, g = crit(Mh @ v)
        return J, Mh @ g

    v = _normalise(Pi @ (program.M_half_inv @ init))
    J, g = Gamma(v)
    trace = []
    converged = False
    it = 0
    for it in range(1, program.max_iter + 1):
        d = Pi @ g
        nd = np.linalg.norm(d)
        if nd == 0:
            converged = True
            break
        m = d / nd
        halvings = 0
        if program.line_search == "newton":
            m, Jm, _ = _arc_newton(G, Gamma, v, J, m)
            if Jm < J:
                m, Jm = _halving(G, v, J, m)
        else:
            m, Jm, halvings = _halving_count(G, v, J, m)
        m = _normalise(Pi @ m)
        step = float(np.linalg.norm(m - v))
        J_prev = J
        if step > 0:
            v = m
            J, g = Gamma(v)
        trace.append({"iter": it, "J": J, "step": step, "halvings": halvings, "ascent": J - J_prev})
        if step <= program.tol:
            converged = True
            break
    return PingResult(Mh @ v, v, J, converged, it, trace)


def _halving_count(G, v, J, m):
    Jm = G(m)
    k = 0
    while Jm < J and k < MAX_HALVINGS:
        m = _normalise(v + m)
        Jm = G(m)
        k += 1
    if Jm < J:
        return v.copy(), J, k
    return m, Jm, k


def _halving(G, v, J, m):
    m, Jm, _ = _halving_count(G, v, J, m)
    return m, Jm


def ping_solve(program):
    """Run PING; restarts from a perturbed start if the criterion is undefined."""
    rng = np.random.default_rng(program.seed)
    init = np.asarray(program.init, dtype=float)
    last = None
    for attempt in range(program.max_restarts + 1):
        try:
            res = _run(program, init)
            res.restarts = attempt
            if not res.converged:
                log.debug("PING stopped after %d iterations without converging", res.n_iter)
            return res
        except (CriterionError, CollinearityError) as exc:
            last = exc
            log.info("PING restart %d after: %s", attempt + 1, exc)
            scale = np.linalg.norm(init) or 1.0
            init = init + 0.1 * scale * rng.standard_normal(init.shape[0]) / np.sqrt(init.shape[0])
    raise last


def pls1_init(C, responses, F_prev=None, pw=None):
    """First PLS direction of the responses on ``C`` deflated on ``F_prev``.

    Returns ``u0`` normalised so that ``u0' C'PC u0 = 1``.
    """
    C = np.asarray(C, dtype=float)
    n, r = C.shape
    pw = np.full(n, 1.0 / n) if pw is None else np.asarray(pw, dtype=float)
    if not responses:
        raise DataError("pls1_init needs at least one response")
    Cd = C
    if F_prev is not None and np.size(F_prev):
        F = np.asarray(F_prev, dtype=float).reshape(n, -1)
        FP = F.T * pw
        Cd = C - F @ np.linalg.solve(FP @ F, FP @ C)
    g = np.zeros(r)
    scale = 0.0
    for z, w in responses:
        z = np.asarray(z, dtype=float)
        w = np.asarray(w, dtype=float)
        g += Cd.T @ (w * z)
        scale += np.sqrt(np.sum(w[:, None] * Cd**2) * np.sum(w * z**2))
    if not np.linalg.norm(g) > 1e-10 * max(scale, np.finfo(float).tiny):
        warnings.warn("zero covariance with the responses; using the first principal axis", RuntimeWarning,
                      stacklevel=2)
        lam, vec = linalg.eigh(Cd.T @ (pw[:, None] * Cd))
        g = vec[:, -1]
    norm = np.sqrt(g @ (C.T @ (pw[:, None] * C)) @ g)
    return g / norm
