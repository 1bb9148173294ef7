"""Mixed supervised-component GLMM fitting.

The model for response ``k`` is

    eta_k = sum_j (X u_j) gamma_kj + A delta_k + U xi_k,   xi_k ~ N(0, sigma2_k I).

Components are extracted one at a time.  For each one, the model is
linearised around the current predictor (working variables ``z_k`` and
weights ``W_k``), the loading vector is obtained by maximising the
trade-off criterion with PING, the fixed and random effects are updated by
Henderson's equations, the variance components by Schall's fixed point, and
the linearisation is refreshed.  After the last component all coefficients
are refitted jointly on ``[F | A]``.
"""

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import DataError, VarianceCollapseError
from .families import ResponseFamily, estimate_dispersion
from .linmix import (
    VARIANCE_FLOOR,
    GroupDesign,
    identity_reduction,
    pca_reduce,
    solve_henderson,
    update_variance,
    weighted_projection,
)
from .ping import SphereProgram, metric_roots, ping_solve, pls1_init
from .relevance import CriterionContext

log = logging.getLogger(__name__)

SCHEMA = "scglr-mix/1"


# ---------------------------------------------------------------------------
# data and configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelData:
    """Responses, covariates and grouping for one fit.

    ``X`` is stored standardised (P-mean 0, P-variance 1 with ``P = I/n``);
    ``x_mean`` and ``x_scale`` map it back to the raw columns.  ``A`` carries
    the intercept column first when ``intercept`` is set.
    """

    Y: np.ndarray
    families: list
    X: np.ndarray
    A: np.ndarray
    groups: GroupDesign
    x_mean: np.ndarray
    x_scale: np.ndarray
    intercept: bool = True
    standardised: bool = True
    y_names: list = None
    x_names: list = None
    a_names: list = None
    group_labels: list = None

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def q(self):
        return self.Y.shape[1]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def X_raw(self):
        return self.X * self.x_scale + self.x_mean

    @property
    def A_extra(self):
        """``A`` without the intercept column."""
        return self.A[:, 1:] if self.intercept else self.A

    def subset(self, idx):
        """Rows ``idx``, with X re-standardised on those rows."""
        idx = np.asarray(idx)
        return make_model_data(
            self.Y[idx],
            [fam.subset(idx) for fam in self.families],
            self.X_raw[idx],
            self.groups.subset(idx),
            A=self.A_extra[idx],
            standardise=self.standardised,
            intercept=self.intercept,
            y_names=self.y_names,
            x_names=self.x_names,
            a_names=self.a_names,
            group_labels=self.group_labels,
        )


def standardise_columns(X, names=None):
    """Centre and scale columns to unit population variance."""
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    const = np.flatnonzero(scale <= 1e-12 * np.maximum(1.0, np.abs(mean)))
    if const.size:
        j = int(const[0])
        label = names[j] if names is not None else f"column {j}"
        raise DataError(f"X column {label!r} is constant (zero variance)")
    return (X - mean) / scale, mean, scale


def make_model_data(Y, families, X, groups, A=None, standardise=True, intercept=True,
                    y_names=None, x_names=None, a_names=None, group_labels=None):
    """Validate inputs and assemble a :class:`ModelData`."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    X = np.asarray(X, dtype=float)
    n = Y.shape[0]
    if isinstance(families, (str, ResponseFamily)):
        families = [families]
    families = [ResponseFamily(f) if isinstance(f, str) else f for f in families]
    if len(families) != Y.shape[1]:
        raise DataError(f"{Y.shape[1]} responses but {len(families)} families")
    if not isinstance(groups, GroupDesign):
        groups, labels = GroupDesign.from_labels(list(groups))
        group_labels = group_labels or labels
    if X.ndim != 2 or X.shape[0] != n or groups.n != n:
        raise DataError("Y, X and groups must have the same number of rows")
    A = np.zeros((n, 0)) if A is None else np.asarray(A, dtype=float).reshape(n, -1)
    for arr, what in ((Y, "Y"), (X, "X"), (A, "A")):
        if not np.all(np.isfinite(arr)):
            raise DataError(f"{what} contains missing or non-finite values")
    y_names = list(y_names) if y_names is not None else [f"y{k + 1}" for k in range(Y.shape[1])]
    x_names = list(x_names) if x_names is not None else [f"x{j + 1}" for j in range(X.shape[1])]
    a_names = list(a_names) if a_names is not None else [f"a{j + 1}" for j in range(A.shape[1])]
    for k, fam in enumerate(families):
        fam.validate(Y[:, k], y_names[k])
    if standardise:
        Xs, mean, scale = standardise_columns(X, x_names)
    else:
        Xs, mean, scale = X.copy(), np.zeros(X.shape[1]), np.ones(X.shape[1])
    if intercept:
        A = np.column_stack([np.ones(n), A])
    return ModelData(Y, families, Xs, A, groups, mean, scale, intercept, standardise,
                     y_names, x_names, a_names, group_labels)


@dataclass
class Hyperparams:
    """Tuning and convergence settings.

    ``pw`` is the diagonal of the observation metric ``P`` (default ``1/n``)
    and ``omega`` the variable weights (default ``1/p``).  ``reduce`` selects
    the principal-component reduction of X: ``"auto"`` applies it only when
    ``X'PX`` is singular or ``p >= n``.
    """

    K: int = 1
    s: float = 0.5
    l: float = 1.0
    omega: np.ndarray = None
    pw: np.ndarray = None
    outer_tol: float = 1e-5
    outer_max_iter: int = 100
    ping_tol: float = 1e-6
    ping_max_iter: int = 200
    line_search: str = "halving"
    reduce: str = "auto"
    psi_gain_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.K < 0:
            raise DataError("K must be >= 0")
        if not 0.0 <= self.s <= 1.0:
            raise DataError("s must lie in [0, 1]")
        if not self.l >= 1:
            raise DataError("l must be >= 1")
        if self.reduce not in ("auto", "always", "never"):
            raise DataError(f"unknown reduce mode {self.reduce!r}")

    def obs_weights(self, n):
        return np.full(n, 1.0 / n) if self.pw is None else np.asarray(self.pw, dtype=float)


@dataclass
class ResponseState:
    """Linearisation state of one response."""

    family: ResponseFamily
    y: np.ndarray
    eta: np.ndarray
    z: np.ndarray
    w: np.ndarray
    xi: np.ndarray
    sigma2: float
    coef: np.ndarray = None

    @property
    def dispersion(self):
        return self.family.dispersion


def initial_states(data, mixed=True):
    states = []
    for k, fam in enumerate(data.families):
        y = data.Y[:, k]
        if fam.kind == "gaussian":
            fam = fam.with_dispersion(max(float(np.var(y)), 1e-8))
        eta = fam.initial_eta(y)
        states.append(ResponseState(fam, y, eta, fam.working_variable(y, eta), fam.working_weights(eta),
                                    np.zeros(data.groups.n_groups), 1.0 if mixed else 0.0))
    return states


def _rel_change(new, old):
    new = np.atleast_1d(np.asarray(new, dtype=float))
    old = np.atleast_1d(np.asarray(old, dtype=float))
    if new.shape != old.shape:
        return np.inf
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(old), 1e-8))


def _sigma2_change(new, old, design, w):
    # measured against the sampling variance of a group mean of the working residual
    noise = 1.0 / float(np.mean(design.aggregate(w)))
    return abs(new - old) / (old + noise)


class VarianceAccelerator:
    """Aitken extrapolation of a geometrically converging variance sequence.

    Near the boundary ``sigma2 -> 0`` the fixed-point update contracts by a
    ratio close to one and needs hundreds of passes.  Once the last three
    successive ratios agree, the sequence is moved to its extrapolated
    limit (floored); the fixed point itself is unchanged.
    """

    RATIO_TOL = 0.02

    def __init__(self, q):
        self.history = [[] for _ in range(q)]

    def __call__(self, k, sigma2):
        h = self.history[k]
        h.append(sigma2)
        if len(h) < 4:
            return sigma2
        d = np.diff(h[-4:])
        if np.any(d == 0) or np.any(d[1:] * d[:-1] <= 0):
            return sigma2
        rho = d[1:] / d[:-1]
        if not (np.all((rho > 0) & (rho < 1)) and abs(rho[1] - rho[0]) < self.RATIO_TOL):
            return sigma2
        limit = max(sigma2 + d[-1] * rho[1] / (1.0 - rho[1]), VARIANCE_FLOOR)
        h.clear()
        h.append(limit)
        return limit


def _accelerate(states, accel):
    out = []
    for k, st in enumerate(states):
        s2 = accel(k, st.sigma2)
        out.append(st if s2 == st.sigma2 else replace(st, sigma2=s2))
    return out


def schall_update(st, F, A, design, mixed=True):
    """One Henderson / variance / linearisation step for a single response.

    ``F`` holds the component column(s) (or ``None``); returns the new state
    and the coefficients on ``F``.
    """
    n = st.y.shape[0]
    Fm = np.zeros((n, 0)) if F is None else np.asarray(F, dtype=float).reshape(n, -1)
    B = np.column_stack([Fm, A])
    if mixed:
        sol = solve_henderson(Fm, A, design, st.w, 1.0 / st.sigma2, st.z)
        coef = np.concatenate([np.atleast_1d(sol.gamma), sol.delta])
        xi = sol.xi
        df = design.n_groups - sol.trace_T / st.sigma2
        try:
            sigma2 = update_variance(xi, st.sigma2, design, st.w)
        except VarianceCollapseError:
            log.warning("variance component collapsed; restarting at the floor")
            sigma2 = VARIANCE_FLOOR
        eta = B @ coef + design.expand(xi)
    else:
        coef, eta = weighted_projection(B, st.w, st.z)
        xi = np.zeros(design.n_groups)
        sigma2 = 0.0
        df = 0.0
    fam = st.family
    if fam.kind == "gaussian":
        fam = fam.with_dispersion(estimate_dispersion(fam, st.z, eta, np.ones(n), df))
    new = ResponseState(fam, st.y, eta, fam.working_variable(st.y, eta), fam.working_weights(eta),
                        xi, sigma2, coef)
    return new


def _canonical_sign(u, V):
    ut = V @ u
    j = int(np.argmax(np.abs(ut)))
    return -u if ut[j] < 0 else u


def choose_reduction(X, hp):
    n, p = X.shape
    pw = hp.obs_weights(n)
    if hp.reduce == "always":
        return pca_reduce(X, pw)
    if hp.reduce == "auto":
        if p >= n:
            return pca_reduce(X, pw)
        ev = np.linalg.eigvalsh(X.T @ (pw[:, None] * X))
        if ev[0] <= 1e-10 * ev[-1]:
            return pca_reduce(X, pw)
    return identity_reduction(X)


# ---------------------------------------------------------------------------
# single component
# ---------------------------------------------------------------------------


@dataclass
class ComponentFit:
    u: np.ndarray  # loadings on the reduced regressors C
    f: np.ndarray  # component C u
    states: list
    converged: bool
    n_iter: int
    psi_gain: float
    history: list = field(default_factory=list)


def fit_single_component(data, hp, reduction, A_h, Delta_h, states, F_prev=None, mixed=True):
    """Alternated estimation of one component and the per-response effects.

    Each iteration: (1) PING maximisation of the trade-off criterion with the
    current linearisation, (2) Henderson solve per response, (3) variance
    update, (4) refresh of predictors, working variables and weights.
    Iterates until the largest relative change over ``u``, ``gamma``,
    ``delta`` and ``sigma2`` drops below ``hp.outer_tol``.
    """
    C, V = reduction.C, reduction.V
    n = data.n
    pw = hp.obs_weights(n)
    Mh, Mhi = metric_roots(C.T @ (pw[:, None] * C))
    u = pls1_init(C, [(st.z, st.w) for st in states], F_prev, pw)
    if Delta_h is not None and Delta_h.shape[1] == 0:
        Delta_h = None
    history = []
    converged = False
    accel = VarianceAccelerator(len(states))
    t = 0
    for t in range(1, hp.outer_max_iter + 1):
        ctx = CriterionContext(C, data.X, [(st.z, st.w) for st in states], A=A_h, pw=pw,
                               omega=hp.omega, l=hp.l, s=hp.s)
        crit = ctx.criterion
        prog = SphereProgram(crit, Mh, Mhi, init=u, Delta=Delta_h, value=crit.value,
                             max_iter=hp.ping_max_iter, tol=hp.ping_tol,
                             line_search=hp.line_search, seed=hp.seed + t)
        res = ping_solve(prog)
        u_new = _canonical_sign(res.u, V)
        f = C @ u_new
        new_states = [schall_update(st, f, A_h, data.groups, mixed) for st in states]
        if mixed:
            new_states = _accelerate(new_states, accel)
        change = _rel_change(u_new, u)
        for st, old in zip(new_states, states):
            if old.coef is not None:
                change = max(change, _rel_change(st.coef, old.coef))
            else:
                change = np.inf
            if mixed:
                change = max(change, _sigma2_change(st.sigma2, old.sigma2, data.groups, old.w))
        history.append({"iter": t, "J": res.J, "change": change, "ping_iter": res.n_iter})
        u, states = u_new, new_states
        if change < hp.outer_tol:
            converged = True
            break
    if not converged:
        log.warning("component did not converge in %d iterations", hp.outer_max_iter)
    # gain in fit brought by the component over A_h alone, relative to sum ||z||^2
    crit = CriterionContext(C, data.X, [(st.z, st.w) for st in states], A=A_h, pw=pw,
                            omega=hp.omega, l=hp.l, s=hp.s).criterion
    total = sum(float(np.sum(st.w * st.z**2)) for st in states)
    gain = (crit.psi(u) - crit.base) / max(total, np.finfo(float).tiny)
    return ComponentFit(u, C @ u, states, converged, t, gain, history)


# ---------------------------------------------------------------------------
# fixed-basis GLMM (Schall) and multi-component extraction
# ---------------------------------------------------------------------------


def fit_glmm(data, F=None, hp=None, states=None, mixed=True):
    """Schall's algorithm on the fixed basis ``[F | A]``.

    Returns ``(states, converged, n_iter)``; ``states[k].coef`` holds the
    coefficients on ``F`` followed by those on ``A``.
    """
    hp = hp or Hyperparams()
    states = states if states is not None else initial_states(data, mixed)
    converged = False
    accel = VarianceAccelerator(len(states))
    t = 0
    for t in range(1, hp.outer_max_iter + 1):
        new = [schall_update(st, F, data.A, data.groups, mixed) for st in states]
        if mixed:
            new = _accelerate(new, accel)
        change = 0.0
        for st, old in zip(new, states):
            change = max(change, np.inf if old.coef is None else _rel_change(st.coef, old.coef))
            if mixed:
                change = max(change, _sigma2_change(st.sigma2, old.sigma2, data.groups, old.w))
        states = new
        if change < hp.outer_tol:
            converged = True
            break
    return states, converged, t


@dataclass
class ComponentPath:
    """Sequentially extracted components, shared by every ``K`` up to its length."""

    reduction: object
    fits: list
    mixed: bool
    warnings: list = field(default_factory=list)

    @property
    def F(self):
        if not self.fits:
            return None
        return np.column_stack([cf.f for cf in self.fits])

    @property
    def U(self):
        return np.column_stack([cf.u for cf in self.fits]) if self.fits else None


def extract_path(data, hp, K=None, mixed=True):
    """Extract up to ``K`` (default ``hp.K``) components under deflation constraints.

    Component ``h+1`` uses ``A_h = [F_h | A]`` as extra covariates and the
    constraint ``(C'P F_h)' u = 0``.  Extraction stops early when the
    component improves the fit by less than ``hp.psi_gain_tol``.
    """
    K = hp.K if K is None else K
    reduction = choose_reduction(data.X, hp)
    pw = hp.obs_weights(data.n)
    path = ComponentPath(reduction, [], mixed)
    states = initial_states(data, mixed)
    C = reduction.C
    for h in range(K):
        if h >= reduction.rank:
            msg = f"only {reduction.rank} dimensions available; stopping at {h} components"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            path.warnings.append(msg)
            break
        F_h = path.F
        if F_h is None:
            A_h, Delta = data.A, None
        else:
            A_h = np.column_stack([F_h, data.A])
            Delta = C.T @ (pw[:, None] * F_h)
        cf = fit_single_component(data, hp, reduction, A_h, Delta, states, F_h, mixed)
        if h > 0 and cf.psi_gain < hp.psi_gain_tol:
            msg = f"component {h + 1} adds no fit (gain {cf.psi_gain:.2e}); stopping at {h}"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            path.warnings.append(msg)
            break
        path.fits.append(cf)
        states = [replace(st, coef=None) for st in cf.states]
    return path


def refit(data, path, K, hp=None):
    """Final joint fit on the first ``K`` components of ``path``."""
    hp = hp or Hyperparams()
    K = min(K, len(path.fits))
    F = path.F[:, :K] if K else None
    if K:
        # warm start from the linearisation reached by the K-th component
        states = [replace(st, coef=None) for st in path.fits[K - 1].states]
    else:
        states = None
    states, converged, n_iter = fit_glmm(data, F, hp, states, path.mixed)
    return _build_model(data, hp, path, K, F, states, converged, n_iter)


def extract_components(data, hp):
    """Fit the mixed model with ``hp.K`` supervised components."""
    path = extract_path(data, hp, mixed=True)
    return refit(data, path, hp.K, hp)


def fit_fixed_scglr(data, hp):
    """Same pipeline without random effects (weighted least squares steps)."""
    path = extract_path(data, hp, mixed=False)
    return refit(data, path, hp.K, hp)


def complete_path(path, data, hp):
    """Extend ``path`` to span all of ``C`` with P-orthonormal principal axes.

    The added components are the principal axes of ``C`` deflated on the
    existing components; they carry no goodness of fit of their own.
    """
    C = path.reduction.C
    r = C.shape[1]
    h = len(path.fits)
    if h >= r:
        return path
    pw = hp.obs_weights(data.n)
    G = C.T @ (pw[:, None] * C)
    if h:
        U = path.U
        Q = np.eye(r) - U @ (U.T @ G)  # deflation in reduced coordinates
    else:
        Q = np.eye(r)
    lam, vec = np.linalg.eigh(Q.T @ G @ Q)
    states = path.fits[-1].states if h else initial_states(data, path.mixed)
    V = path.reduction.V
    for j in np.argsort(lam)[::-1][:r - h]:
        u = Q @ vec[:, j]
        u = _canonical_sign(u / np.sqrt(u @ G @ u), V)
        path.fits.append(ComponentFit(u, C @ u, states, True, 0, 0.0))
    return path


def fit_unregularised(data, hp=None, mixed=True):
    """GLMM on the whole span of X: pure goodness of fit, K = rank.

    At most ``q`` components are extracted with the criterion (for Gaussian
    responses no further direction improves the fit).  The basis is then
    completed with principal axes: the final refit only depends on the
    span, which is all of ``C`` either way.
    """
    hp = replace(hp or Hyperparams(), s=0.0)
    reduction = choose_reduction(data.X, hp)
    hp = replace(hp, K=reduction.rank)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        path = extract_path(data, hp, K=min(reduction.rank, data.q), mixed=mixed)
    path.warnings = [w for w in path.warnings if "adds no fit" not in w]
    complete_path(path, data, hp)
    return refit(data, path, hp.K, hp)


# ---------------------------------------------------------------------------
# fitted model
# ---------------------------------------------------------------------------


@dataclass
class FittedModel:
    """Result of a fit.

    ``loadings`` are minimum-norm loadings on the standardised X; ``beta`` the
    implied coefficients on standardised X and ``beta_raw``/``intercept_raw``
    the same predictor expressed on the raw columns (with the intercept
    absorbing the centring).
    """

    loadings: np.ndarray  # p x K
    components: np.ndarray  # n x K
    gamma: np.ndarray  # q x K
    delta: np.ndarray  # q x r_A
    xi: np.ndarray  # q x N
    sigma2: np.ndarray  # q
    dispersion: np.ndarray  # q
    inertia_pct: np.ndarray  # K
    correlations: np.ndarray  # p x K
    beta: np.ndarray  # q x p
    beta_raw: np.ndarray  # q x p
    intercept_raw: np.ndarray  # q
    fitted_eta: np.ndarray  # n x q
    families: list
    x_mean: np.ndarray
    x_scale: np.ndarray
    intercept: bool
    mixed: bool
    hyperparams: dict
    convergence: list
    y_names: list
    x_names: list
    a_names: list
    group_labels: list
    warnings: list = field(default_factory=list)

    @property
    def K(self):
        return self.gamma.shape[1]

    @property
    def converged(self):
        return all(c.get("converged", True) for c in self.convergence)

    # -- serialisation -------------------------------------------------------

    def to_dict(self):
        def arr(a):
            return np.asarray(a, dtype=float).tolist()

        return {
            "schema": SCHEMA,
            "families": [fam.kind for fam in self.families],
            "dispersion": arr(self.dispersion),
            "mixed": self.mixed,
            "intercept": self.intercept,
            "hyperparams": self.hyperparams,
            "names": {"y": self.y_names, "x": self.x_names, "a": self.a_names,
                      "groups": [str(g) for g in self.group_labels]},
            "standardisation": {"mean": arr(self.x_mean), "scale": arr(self.x_scale)},
            "loadings": arr(self.loadings),
            "components": arr(self.components),
            "gamma": arr(self.gamma),
            "delta": arr(self.delta),
            "xi": arr(self.xi),
            "sigma2": arr(self.sigma2),
            "inertia_pct": arr(self.inertia_pct),
            "correlations": arr(self.correlations),
            "beta": arr(self.beta),
            "beta_raw": arr(self.beta_raw),
            "intercept_raw": arr(self.intercept_raw),
            "fitted_eta": arr(self.fitted_eta),
            "convergence": self.convergence,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != SCHEMA:
            raise DataError(f"unsupported model schema {d.get('schema')!r}; expected {SCHEMA!r}")
        q = len(d["families"])
        p = len(d["names"]["x"])

        def mat(key, rows, cols):
            a = np.asarray(d[key], dtype=float)
            return a.reshape(rows, cols)

        K = len(d["inertia_pct"])
        n = len(d["fitted_eta"])
        families = []
        for kind, phi in zip(d["families"], d["dispersion"]):
            if kind == "binomial":
                families.append(_BinomialSpec())
            else:
                families.append(ResponseFamily(kind, dispersion=phi if kind == "gaussian" else 1.0))
        n_groups = len(d["names"]["groups"])
        return cls(
            loadings=mat("loadings", p, K),
            components=mat("components", n, K),
            gamma=mat("gamma", q, K),
            delta=mat("delta", q, -1) if q else np.zeros((0, 0)),
            xi=mat("xi", q, n_groups),
            sigma2=np.asarray(d["sigma2"], dtype=float),
            dispersion=np.asarray(d["dispersion"], dtype=float),
            inertia_pct=np.asarray(d["inertia_pct"], dtype=float),
            correlations=mat("correlations", p, K),
            beta=mat("beta", q, p),
            beta_raw=mat("beta_raw", q, p),
            intercept_raw=np.asarray(d["intercept_raw"], dtype=float),
            fitted_eta=mat("fitted_eta", n, q),
            families=families,
            x_mean=np.asarray(d["standardisation"]["mean"], dtype=float),
            x_scale=np.asarray(d["standardisation"]["scale"], dtype=float),
            intercept=bool(d["intercept"]),
            mixed=bool(d["mixed"]),
            hyperparams=d["hyperparams"],
            convergence=d["convergence"],
            y_names=d["names"]["y"],
            x_names=d["names"]["x"],
            a_names=d["names"]["a"],
            group_labels=d["names"]["groups"],
            warnings=d.get("warnings", []),
        )


class _BinomialSpec:
    """Binomial family restored from JSON; trials are supplied at prediction time."""

    kind = "binomial"
    dispersion = 1.0


def _hp_dict(hp):
    out = {}
    for key, val in vars(hp).items():
        if isinstance(val, np.ndarray):
            val = val.tolist()
        out[key] = val
    return out


def _build_model(data, hp, path, K, F, states, converged, n_iter):
    n, q, p = data.n, data.q, data.p
    pw = hp.obs_weights(n)
    if K:
        U = path.U[:, :K]
        loadings = path.reduction.V @ U
        gamma = np.array([st.coef[:K] for st in states])
        corr = (data.X.T @ (pw[:, None] * F)) / np.sqrt(
            np.outer(np.sum(pw[:, None] * data.X**2, axis=0), np.sum(pw[:, None] * F**2, axis=0)))
        inertia = 100.0 * np.mean(corr**2, axis=0)
    else:
        loadings = np.zeros((p, 0))
        gamma = np.zeros((q, 0))
        corr = np.zeros((p, 0))
        inertia = np.zeros(0)
        F = np.zeros((n, 0))
    delta = np.array([st.coef[K:] for st in states]).reshape(q, data.A.shape[1])
    beta = gamma @ loadings.T
    beta_raw = beta / data.x_scale
    intercept_raw = -(beta_raw @ data.x_mean)
    if data.intercept:
        intercept_raw = intercept_raw + delta[:, 0]
    convergence = []
    for k, st in enumerate(states):
        convergence.append({"response": data.y_names[k], "converged": bool(converged), "iterations": n_iter})
    for h, cf in enumerate(path.fits[:K]):
        convergence.append({"component": h + 1, "converged": bool(cf.converged), "iterations": cf.n_iter})
    return FittedModel(
        loadings=loadings,
        components=F,
        gamma=gamma,
        delta=delta,
        xi=np.array([st.xi for st in states]),
        sigma2=np.array([st.sigma2 for st in states], dtype=float),
        dispersion=np.array([st.dispersion for st in states], dtype=float),
        inertia_pct=inertia,
        correlations=corr,
        beta=beta,
        beta_raw=beta_raw,
        intercept_raw=intercept_raw,
        fitted_eta=np.column_stack([st.eta for st in states]),
        families=[st.family for st in states],
        x_mean=data.x_mean.copy(),
        x_scale=data.x_scale.copy(),
        intercept=data.intercept,
        mixed=path.mixed,
        hyperparams=_hp_dict(replace(hp, K=K)),
        convergence=convergence,
        y_names=list(data.y_names),
        x_names=list(data.x_names),
        a_names=list(data.a_names),
        group_labels=list(data.group_labels) if data.group_labels is not None
        else list(range(data.groups.n_groups)),
        warnings=list(path.warnings),
    )


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def predict_eta(model, X_new, A_new=None, groups_new=None, mode="conditional"):
    """Linear predictors (n x q) for raw covariates ``X_new``.

    ``A_new`` excludes the intercept column.  ``groups_new`` are integer group
    indices of the training design, required in conditional mode.
    """
    if mode not in ("marginal", "conditional"):
        raise DataError(f"unknown prediction mode {mode!r}")
    X_new = np.asarray(X_new, dtype=float)
    n = X_new.shape[0]
    Xs = (X_new - model.x_mean) / model.x_scale
    eta = Xs @ model.beta.T
    A = np.zeros((n, 0)) if A_new is None else np.asarray(A_new, dtype=float).reshape(n, -1)
    if model.intercept:
        A = np.column_stack([np.ones(n), A])
    if A.shape[1] != model.delta.shape[1]:
        raise DataError(f"A has {A.shape[1]} columns, the model expects {model.delta.shape[1]}")
    eta = eta + A @ model.delta.T
    if mode == "conditional":
        if groups_new is None:
            raise DataError("conditional prediction needs group indices; use marginal mode otherwise")
        g = np.asarray(groups_new)
        n_groups = model.xi.shape[1]
        if g.size and (g.min() < 0 or g.max() >= n_groups or not np.all(g == np.round(g))):
            raise DataError("unseen group in conditional prediction; use mode='marginal'")
        eta = eta + model.xi[:, g.astype(np.intp)].T
    return eta


def predict(model, X_new, A_new=None, groups_new=None, mode="conditional", trials=None):
    """Predicted conditional (or marginal) means, one column per response.

    Binomial responses are returned as counts when ``trials`` (a mapping from
    response index to a trials vector) is given, probabilities otherwise.
    """
    eta = predict_eta(model, X_new, A_new, groups_new, mode)
    out = np.empty_like(eta)
    for k, fam in enumerate(model.families):
        if fam.kind == "binomial":
            t = None if trials is None else trials.get(k)
            fam_k = ResponseFamily("bernoulli") if t is None else ResponseFamily("binomial", trials=t)
        else:
            fam_k = ResponseFamily(fam.kind, dispersion=fam.dispersion if fam.kind == "gaussian" else 1.0)
        out[:, k] = fam_k.link_inverse(eta[:, k])
    return out


def group_indices(model, labels):
    """Map group labels to training indices; unseen labels raise."""
    index = {str(lab): i for i, lab in enumerate(model.group_labels)}
    out = np.empty(len(labels), dtype=np.intp)
    for i, lab in enumerate(labels):
        try:
            out[i] = index[str(lab)]
        except KeyError:
            raise DataError(f"unseen group {lab!r}; conditional prediction needs training groups, "
                            "use marginal mode") from None
    return out
