"""Monte-Carlo replicates of the simulation studies.

Each replicate function takes one picklable tuple and returns a plain dict,
so replicates can be spread over processes by :func:`run_parallel`.
Replicate ``b`` of a study draws its sample with seed ``base_seed + b``.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from ..core import Hyperparams, extract_components, fit_unregularised
from .cv import grid_search, make_folds, run_parallel
from .metrics import latent_metrics, relative_squared_error
from .simulate import SimDesign, simulate

DEFAULT_K_SET = tuple(range(1, 9))
DEFAULT_S_SET = (0.1, 0.3, 0.5, 0.7, 0.9)
DEFAULT_L_SET = (4.0,)


@dataclass(frozen=True)
class Study:
    design: SimDesign
    K_set: tuple = DEFAULT_K_SET
    s_set: tuple = DEFAULT_S_SET
    l_set: tuple = DEFAULT_L_SET
    standardised: bool = False
    unregularised: bool = True


def _tuned_fit(study, data):
    plan = make_folds(data.groups, 2, 5, seed=study.design.seed)
    best = grid_search(data, study.K_set, study.s_set, study.l_set, plan,
                       standardised=study.standardised, jobs=1)
    model = extract_components(data, Hyperparams(K=best.K, s=best.s, l=best.l))
    return best, model


def tuned_replicate(study):
    """CV-tuned mixed fit (and optionally the unregularised path) on one sample."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        data, truths = simulate(study.design)
        best, model = _tuned_fit(study, data)
        out = {"seed": study.design.seed, "K": best.K, "s": best.s, "l": best.l, "E": best.E,
               "converged": model.converged, "beta": model.beta_raw.tolist(),
               "beta_true": [np.asarray(b).tolist() for b in truths["beta"]],
               "rse": [relative_squared_error(model.beta_raw[k], b) for k, b in enumerate(truths["beta"])]}
        if study.unregularised:
            plain = fit_unregularised(data)
            out["beta_unreg"] = plain.beta_raw.tolist()
            out["rse_unreg"] = [relative_squared_error(plain.beta_raw[k], b)
                                for k, b in enumerate(truths["beta"])]
    return out


def fixed_replicate(args):
    """Fit with fixed hyperparameters; returns errors, variance components, latent recovery."""
    design, hp = args
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        data, truths = simulate(design)
        model = extract_components(data, hp)
    out = {"seed": design.seed, "sigma2": model.sigma2.tolist(), "converged": model.converged,
           "sigma2_true": np.asarray(truths["sigma2"]).tolist(), "K": model.K}
    if "beta" in truths:
        out["beta"] = model.beta_raw.tolist()
        out["beta_true"] = [np.asarray(b).tolist() for b in truths["beta"]]
        out["rse"] = [relative_squared_error(model.beta_raw[k], b) for k, b in enumerate(truths["beta"])]
    if "latent" in truths:
        cor, err = latent_metrics(model, data.X_raw, truths["latent"], truths["targets"])
        out["cor"] = cor.tolist()
        out["err"] = err.tolist()
    return out


def replicate_designs(design, B, base_seed):
    fields = {k: getattr(design, k) for k in ("design_id", "N", "R", "tau", "stn", "p")}
    return [SimDesign(**fields, seed=base_seed + b) for b in range(B)]


def run_tuned(study, B, base_seed, jobs=None):
    studies = [Study(d, study.K_set, study.s_set, study.l_set, study.standardised, study.unregularised)
               for d in replicate_designs(study.design, B, base_seed)]
    return run_parallel(tuned_replicate, studies, jobs)


def run_fixed(design, hp, B, base_seed, jobs=None):
    return run_parallel(fixed_replicate, [(d, hp) for d in replicate_designs(design, B, base_seed)], jobs)
