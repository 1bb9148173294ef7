"""Simulation designs for the benchmark studies.

Every generator draws from a single ``numpy.random.Generator`` seeded by the
design, in a fixed order, so a seed reproduces the sample bit for bit.
Bundles of equicorrelated standard normal columns are built with one shared
factor per bundle: ``x_j = sqrt(tau) g + sqrt(1 - tau) e_j``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..core import make_model_data
from ..exceptions import DataError
from ..families import ResponseFamily
from ..linmix import GroupDesign

DESIGNS = ("gauss_bundles", "bern_pois", "binom_pois", "latent_bundle", "highdim")

# bundle sizes (X0 plays no explanatory role)
GAUSS_BUNDLES = (15, 10, 5)
HIGHDIM_BUNDLES = {150: (60, 45, 30, 15), 200: (80, 60, 40, 20)}

BETA1 = np.r_[np.zeros(15), np.full(3, 0.3), np.full(4, 0.4), np.full(3, 0.5), np.zeros(5)]
BETA2 = np.r_[np.zeros(25), 0.3, 0.3, 0.4, 0.5, 0.5]


@dataclass(frozen=True)
class SimDesign:
    """One simulation setting.

    ``tau`` drives bundle redundancy; ``stn`` is the latent signal-to-noise
    ratio of ``latent_bundle``; ``p`` selects the high-dimensional layout.
    """

    design_id: str = "gauss_bundles"
    N: int = 10
    R: int = 10
    tau: float = 0.5
    stn: float = 3.0
    p: int = 150
    seed: int = 0

    def __post_init__(self):
        if self.design_id not in DESIGNS:
            raise DataError(f"unknown design {self.design_id!r}; expected one of {DESIGNS}")
        if not 0.0 <= self.tau < 1.0:
            raise DataError(f"tau must lie in [0, 1), got {self.tau}")
        if self.N < 1 or self.R < 1:
            raise DataError("N and R must be positive")
        if self.design_id == "highdim" and self.p not in HIGHDIM_BUNDLES:
            raise DataError(f"highdim p must be one of {sorted(HIGHDIM_BUNDLES)}")
        if self.design_id == "latent_bundle" and not self.stn > 0:
            raise DataError("stn must be positive")

    @property
    def n(self):
        return self.N * self.R


def equicorrelated_bundle(rng, n, size, tau):
    """``n x size`` standard normal block with pairwise correlation ``tau``."""
    g = rng.standard_normal((n, 1))
    e = rng.standard_normal((n, size))
    return np.sqrt(tau) * g + np.sqrt(1.0 - tau) * e


def bundle_matrix(rng, n, sizes, tau):
    return np.hstack([equicorrelated_bundle(rng, n, size, tau) for size in sizes])


def _pattern(sizes, values):
    return np.concatenate([np.full(size, v, dtype=float) for size, v in zip(sizes, values)])


def simulate(design):
    """Draw one sample; returns ``(ModelData, truths)``.

    ``truths`` holds ``beta`` (true fixed effects per response, on the raw
    columns), ``sigma2`` (group variances), ``xi`` (group effects) and, when
    relevant, the latent variables and true X-parts of the predictors.
    """
    rng = np.random.default_rng(design.seed)
    gen = _GENERATORS[design.design_id]
    return gen(design, rng)


def _groups(design):
    return GroupDesign.balanced(design.N, design.R)


def _gauss_bundles(design, rng):
    n = design.n
    groups = _groups(design)
    X = bundle_matrix(rng, n, GAUSS_BUNDLES, design.tau)
    sigma2 = np.array([1.0, 1.0])
    noise = np.array([1.0, 1.0])
    betas = [BETA1, BETA2]
    Y, xis = [], []
    for k, beta in enumerate(betas):
        xi = rng.normal(0.0, np.sqrt(sigma2[k]), design.N)
        eps = rng.normal(0.0, np.sqrt(noise[k]), n)
        Y.append(X @ beta + groups.expand(xi) + eps)
        xis.append(xi)
    data = make_model_data(np.column_stack(Y), ["gaussian", "gaussian"], X, groups)
    return data, {"beta": betas, "sigma2": sigma2, "xi": xis, "dispersion": noise}


def _bern_or_binom_pois(design, rng, trials):
    n = design.n
    groups = _groups(design)
    X = bundle_matrix(rng, n, GAUSS_BUNDLES, design.tau)
    thetas = [0.1 * BETA1, BETA2]
    sigma2 = np.array([0.1, 1.0])
    xis = [rng.normal(0.0, np.sqrt(s2), design.N) for s2 in sigma2]
    eta1 = X @ thetas[0] + groups.expand(xis[0])
    eta2 = X @ thetas[1] + groups.expand(xis[1])
    if trials is None:
        y1 = rng.binomial(1, expit(eta1)).astype(float)
        fam1 = ResponseFamily("bernoulli")
    else:
        t = np.full(n, trials)
        y1 = rng.binomial(t, expit(eta1)).astype(float)
        fam1 = ResponseFamily("binomial", trials=t)
    y2 = rng.poisson(np.exp(eta2)).astype(float)
    data = make_model_data(np.column_stack([y1, y2]), [fam1, ResponseFamily("poisson")], X, groups)
    return data, {"beta": thetas, "sigma2": sigma2, "xi": xis}


def _bern_pois(design, rng):
    return _bern_or_binom_pois(design, rng, None)


def _binom_pois(design, rng):
    return _bern_or_binom_pois(design, rng, 50)


def _latent_bundle(design, rng):
    n = design.n
    groups = _groups(design)
    var_lv = design.stn / (1.0 + design.stn)
    var_noise = 1.0 - var_lv
    phi1 = rng.normal(0.0, np.sqrt(var_lv), n)
    block1 = phi1[:, None] + rng.normal(0.0, np.sqrt(var_noise), (n, 10))
    phi2 = rng.standard_normal(n)
    block3 = rng.standard_normal((n, 20))
    X = np.column_stack([block1, phi2, block3])
    alpha = np.array([2.0, 1.0, 0.5])
    sigma2 = np.array([2.0, 1.0, 0.5])
    xis = [rng.normal(0.0, np.sqrt(s2), design.N) for s2 in sigma2]
    targets = [alpha[0] * phi1, alpha[1] * phi2, alpha[2] * (phi1 + phi2)]
    y1 = targets[0] + groups.expand(xis[0]) + rng.standard_normal(n)
    y2 = rng.poisson(np.exp(targets[1] + groups.expand(xis[1]))).astype(float)
    t = np.full(n, 25)
    y3 = rng.binomial(t, expit(targets[2] + groups.expand(xis[2]))).astype(float)
    fams = [ResponseFamily("gaussian"), ResponseFamily("poisson"), ResponseFamily("binomial", trials=t)]
    data = make_model_data(np.column_stack([y1, y2, y3]), fams, X, groups)
    # beta only for the first two targets; the third is a composite of both latents
    return data, {"sigma2": sigma2, "xi": xis, "latent": [phi1, phi2], "targets": targets,
                  "alpha": alpha}


def _highdim(design, rng):
    n = design.n
    groups = _groups(design)
    sizes = HIGHDIM_BUNDLES[design.p]
    X = bundle_matrix(rng, n, sizes, design.tau)
    betas = [
        _pattern(sizes, (0.0, 0.1, 0.0, 0.0)),
        _pattern(sizes, (0.0, 0.0, 0.1, 0.0)),
        _pattern(sizes, (0.0, 0.0, 0.0, 0.05)),
        _pattern(sizes, (0.0, 0.025, 0.025, 0.0)),
    ]
    sigma2 = np.array([0.1, 0.1, 0.1, 0.05])
    xis = [rng.normal(0.0, np.sqrt(s2), design.N) for s2 in sigma2]
    etas = [X @ b + groups.expand(xi) for b, xi in zip(betas, xis)]
    t = np.full(n, 30)
    Y = np.column_stack([
        etas[0] + rng.standard_normal(n),
        rng.binomial(1, expit(etas[1])).astype(float),
        rng.binomial(t, expit(etas[2])).astype(float),
        rng.poisson(np.exp(etas[3])).astype(float),
    ])
    fams = [ResponseFamily("gaussian"), ResponseFamily("bernoulli"),
            ResponseFamily("binomial", trials=t), ResponseFamily("poisson")]
    data = make_model_data(Y, fams, X, groups)
    return data, {"beta": betas, "sigma2": sigma2, "xi": xis}


_GENERATORS = {
    "gauss_bundles": _gauss_bundles,
    "bern_pois": _bern_pois,
    "binom_pois": _binom_pois,
    "latent_bundle": _latent_bundle,
    "highdim": _highdim,
}
