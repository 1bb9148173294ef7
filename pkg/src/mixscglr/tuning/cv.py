"""Grouped cross-validation and grid search over ``(K, s, l)``.

Folds withhold the same number of observations from every group, so each
group keeps training rows and test predictions can include the predicted
group effect (conditional prediction).

Components are extracted sequentially and do not depend on the requested
``K``, so one extraction of ``max(K_set)`` components per ``(s, l, fold)``
serves every ``K`` in the grid; only the final joint refit is repeated.
"""

import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..core import Hyperparams, extract_path, predict, refit
from ..exceptions import DataError, ScglrError

log = logging.getLogger(__name__)

JOBS_ENV = "MIXSCGLR_JOBS"


def default_jobs():
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        raise DataError(f"{JOBS_ENV} must be an integer") from None


def run_parallel(func, items, jobs=None):
    """``[func(x) for x in items]``, spread over ``jobs`` processes when > 1."""
    items = list(items)
    jobs = default_jobs() if jobs is None else jobs
    if jobs <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(func, items))


@dataclass(frozen=True)
class CvPlan:
    folds: tuple
    holdout_per_group: int
    seed: int

    @property
    def n_folds(self):
        return len(self.folds)

    @property
    def n(self):
        return sum(len(f) for f in self.folds)

    def train(self, j):
        return np.sort(np.concatenate([f for i, f in enumerate(self.folds) if i != j]))


def make_folds(groups, holdout_per_group=2, n_folds=5, seed=0):
    """Assign, within each group, a seeded permutation of its rows to folds."""
    if holdout_per_group < 1:
        raise DataError("holdout_per_group must be positive")
    if n_folds < 2:
        raise DataError("at least two folds are needed")
    need = holdout_per_group * n_folds
    smallest = int(groups.sizes.min())
    if need > smallest:
        raise DataError(f"{n_folds} folds of {holdout_per_group} per group need {need} rows per group; "
                        f"smallest group has {smallest}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(groups.n, dtype=np.intp)
    for g in range(groups.n_groups):
        rows = rng.permutation(np.flatnonzero(groups.group_of == g))
        fold_of[rows] = (np.arange(rows.size) // holdout_per_group) % n_folds
    folds = tuple(np.flatnonzero(fold_of == j) for j in range(n_folds))
    return CvPlan(folds, holdout_per_group, seed)


def predictive_variance(family, mu):
    """Family variance at the predicted mean, used to standardise errors."""
    if family.kind == "gaussian":
        return np.full_like(mu, family.dispersion)
    if family.kind == "poisson":
        return mu.copy()
    if family.kind == "bernoulli":
        return mu * (1.0 - mu)
    t = family.trials
    return mu * (1.0 - mu / t)


def fold_error(y, mu, var=None):
    """Root mean squared (optionally variance-standardised) prediction error."""
    r2 = (np.asarray(y, dtype=float) - mu) ** 2
    if var is not None:
        r2 = r2 / np.maximum(var, np.finfo(float).tiny)
    return float(np.sqrt(np.mean(r2)))


def _test_errors(data, model, test, standardised):
    test_data_fams = [fam.subset(test) for fam in data.families]
    trials = {k: fam.trials for k, fam in enumerate(test_data_fams) if fam.kind == "binomial"}
    mu = predict(model, data.X_raw[test], data.A_extra[test], data.groups.group_of[test],
                 mode="conditional", trials=trials)
    out = np.empty(data.q)
    for k, fam in enumerate(test_data_fams):
        var = None
        if standardised:
            fitted = model.families[k]
            fam_k = fam.with_dispersion(fitted.dispersion) if fam.kind == "gaussian" else fam
            var = predictive_variance(fam_k, mu[:, k])
        out[k] = fold_error(data.Y[test, k], mu[:, k], var)
    return out


@dataclass
class FoldOutcome:
    errors: dict  # K -> per-response errors, or None when the fit failed
    converged: dict  # K -> bool
    message: str = ""


def fold_outcome(data, hp, plan, j, K_values, standardised=False, mixed=True):
    """Errors on fold ``j`` for every ``K`` in ``K_values`` from one extraction."""
    train = data.subset(plan.train(j))
    test = plan.folds[j]
    K_values = sorted(set(K_values))
    errors, converged = {}, {}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            path = extract_path(train, replace(hp, K=K_values[-1]), mixed=mixed)
            for K in K_values:
                model = refit(train, path, K, hp)
                errors[K] = _test_errors(data, model, test, standardised)
                converged[K] = model.converged
    except (ScglrError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.warning("fold %d failed for s=%g l=%g: %s", j, hp.s, hp.l, exc)
        return FoldOutcome({K: errors.get(K) for K in K_values},
                           {K: converged.get(K, False) for K in K_values}, str(exc))
    return FoldOutcome(errors, converged)


@dataclass
class CvResult:
    E: float
    E_k: np.ndarray
    folds_used: int
    excluded: list = field(default_factory=list)
    failed: bool = False


def combine_folds(outcomes, K, q):
    """Average per-fold errors for one ``K``; non-converged folds are dropped."""
    per_fold, excluded = [], []
    for j, out in enumerate(outcomes):
        err = out.errors.get(K)
        if err is None:
            return CvResult(np.inf, np.full(q, np.inf), 0, [j], failed=True)
        if not out.converged.get(K, False):
            excluded.append(j)
            continue
        per_fold.append(err)
    if not per_fold:
        return CvResult(np.inf, np.full(q, np.inf), 0, excluded, failed=True)
    if excluded:
        warnings.warn(f"folds {excluded} did not converge and were excluded", RuntimeWarning, stacklevel=2)
    E_k = np.mean(per_fold, axis=0)
    return CvResult(float(np.mean(E_k)), E_k, len(per_fold), excluded)


def cv_error(data, hp, plan, standardised=False, mixed=True):
    """Cross-validation error ``E`` (mean over responses) and per-response ``E_k``."""
    outcomes = [fold_outcome(data, hp, plan, j, [hp.K], standardised, mixed) for j in range(plan.n_folds)]
    return combine_folds(outcomes, hp.K, data.q)


@dataclass
class GridResult:
    K: int
    s: float
    l: float
    E: float
    surface: list  # dicts with s, l, K, E, E_k, folds_used


def _grid_item(args):
    data, hp, plan, j, K_values, standardised, mixed = args
    return fold_outcome(data, hp, plan, j, K_values, standardised, mixed)


def grid_search(data, K_set, s_set, l_set, plan, hp=None, standardised=False, mixed=True, jobs=None):
    """Exhaustive cross-validation over ``K_set x s_set x l_set``.

    The minimiser wins; ties go to smaller ``K``, then larger ``s``, then
    smaller ``l``.  Cells whose fits fail get ``E = inf``.
    """
    K_set, s_set, l_set = sorted(set(K_set)), sorted(set(s_set)), sorted(set(l_set))
    if not (K_set and s_set and l_set):
        raise DataError("grids must be non-empty")
    hp = hp or Hyperparams()
    cells = [(s, l) for s in s_set for l in l_set]
    items = [(data, replace(hp, s=s, l=l, K=max(K_set)), plan, j, K_set, standardised, mixed)
             for s, l in cells for j in range(plan.n_folds)]
    outcomes = run_parallel(_grid_item, items, jobs)
    surface = []
    for c, (s, l) in enumerate(cells):
        outs = outcomes[c * plan.n_folds:(c + 1) * plan.n_folds]
        for K in K_set:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = combine_folds(outs, K, data.q)
            surface.append({"s": s, "l": l, "K": K, "E": res.E, "E_k": res.E_k.tolist(),
                            "folds_used": res.folds_used})
    finite = [cell for cell in surface if np.isfinite(cell["E"])]
    if not finite:
        raise ScglrError("every grid cell failed")
    best = min(finite, key=lambda c: (c["E"], c["K"], -c["s"], c["l"]))
    return GridResult(best["K"], best["s"], best["l"], best["E"], surface)
