"""Response families for the linearised (working-variable) model.

Each response is described by a :class:`ResponseFamily`, which supplies the
inverse link, the working variable ``z = eta + (y - mu) g'(mu)`` and the
diagonal weight ``w = 1 / (g'(mu)^2 a(phi) v(mu))`` used by every weighted
solve downstream.  Only canonical links are provided.

Binomial responses are counts in ``[0, trials]``; the linear predictor lives
on the probability scale, ``mu = trials * expit(eta)``.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .exceptions import DataError, DegenerateFitError

__all__ = [
    "ETA_CLAMP",
    "WEIGHT_FLOOR",
    "DISPERSION_FLOOR",
    "ResponseFamily",
    "estimate_dispersion",
    "parse_family",
]

ETA_CLAMP = 30.0
WEIGHT_FLOOR = 1e-10
DISPERSION_FLOOR = 1e-10

KINDS = ("gaussian", "bernoulli", "binomial", "poisson")


@dataclass(frozen=True)
class ResponseFamily:
    """Distribution, canonical link and dispersion of one response.

    Parameters
    ----------
    kind : str
        One of ``"gaussian"``, ``"bernoulli"``, ``"binomial"``, ``"poisson"``.
    trials : array_like, optional
        Per-observation number of trials; required for (and only allowed
        with) ``"binomial"``.
    dispersion : float
        ``phi``.  Estimated for Gaussian responses, fixed to 1 otherwise.
    """

    kind: str
    trials: np.ndarray = field(default=None, compare=False)
    dispersion: float = 1.0

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in KINDS:
            raise DataError(f"unknown family {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        if kind == "binomial":
            if self.trials is None:
                raise DataError("binomial family requires a trials vector")
            trials = np.asarray(self.trials, dtype=float).ravel()
            if trials.size == 0 or np.any(trials < 1) or np.any(trials != np.round(trials)):
                raise DataError("binomial trials must be integers >= 1")
            object.__setattr__(self, "trials", trials)
        elif self.trials is not None:
            raise DataError(f"{kind} family does not take a trials field")
        if not (np.isfinite(self.dispersion) and self.dispersion > 0):
            raise DataError("dispersion must be positive")
        if kind != "gaussian" and self.dispersion != 1.0:
            raise DataError(f"{kind} dispersion is fixed to 1")

    # -- helpers -----------------------------------------------------------

    def with_dispersion(self, phi):
        if self.kind != "gaussian":
            return self
        return replace(self, dispersion=float(phi))

    def subset(self, idx):
        """Family restricted to observations ``idx`` (binomial trials are per row)."""
        if self.kind != "binomial":
            return self
        return replace(self, trials=self.trials[idx])

    def _eta(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind == "gaussian":
            return eta
        return np.clip(eta, -ETA_CLAMP, ETA_CLAMP)

    def _trials_for(self, n):
        t = self.trials
        if t.shape[0] != n:
            raise DataError(f"binomial trials has length {t.shape[0]}, expected {n}")
        return t

    # -- link ----------------------------------------------------------------

    def link_inverse(self, eta):
        """Conditional mean ``mu = g^{-1}(eta)`` on the response scale."""
        eta = self._eta(eta)
        if self.kind == "gaussian":
            return eta.copy()
        if self.kind == "poisson":
            return np.exp(eta)
        prob = expit(eta)
        if self.kind == "bernoulli":
            return prob
        return self._trials_for(eta.shape[0]) * prob

    def mu_eta(self, eta):
        """Derivative ``d mu / d eta``."""
        eta = self._eta(eta)
        if self.kind == "gaussian":
            return np.ones_like(eta)
        if self.kind == "poisson":
            return np.exp(eta)
        prob = expit(eta)
        d = prob * (1.0 - prob)
        if self.kind == "binomial":
            d = self._trials_for(eta.shape[0]) * d
        return d

    def link_derivative(self, mu):
        """``g'(mu)`` evaluated on the response scale."""
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return np.ones_like(mu)
        if self.kind == "poisson":
            return 1.0 / mu
        if self.kind == "bernoulli":
            return 1.0 / (mu * (1.0 - mu))
        t = self._trials_for(mu.shape[0])
        return t / (mu * (t - mu))

    def variance(self, mu):
        """Conditional variance ``a(phi) v(mu)`` of a response with mean ``mu``."""
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return np.full_like(mu, self.dispersion)
        if self.kind == "poisson":
            return mu.copy()
        if self.kind == "bernoulli":
            return mu * (1.0 - mu)
        t = self._trials_for(mu.shape[0])
        return mu * (1.0 - mu / t)

    # -- linearisation -------------------------------------------------------

    def working_variable(self, y, eta):
        """Working variable ``z = eta + (y - mu) g'(mu)``.

        Computed as ``(y - mu) / (d mu/d eta)`` which is the same quantity but
        stays finite at the clamped boundary.
        """
        y = np.asarray(y, dtype=float)
        eta_c = self._eta(eta)
        if self.kind == "gaussian":
            return y.copy()
        mu = self.link_inverse(eta_c)
        d = np.maximum(self.mu_eta(eta_c), WEIGHT_FLOOR)
        return eta_c + (y - mu) / d

    def working_weights(self, eta):
        """Diagonal of the working weight matrix ``W``."""
        eta = self._eta(eta)
        if self.kind == "gaussian":
            w = np.full(eta.shape, 1.0 / self.dispersion)
        else:
            # for canonical links (d mu/d eta)^2 / v(mu) reduces to d mu/d eta
            w = self.mu_eta(eta)
        return np.maximum(w, WEIGHT_FLOOR)

    def initial_eta(self, y):
        """Starting linear predictor from adjusted responses."""
        y = np.asarray(y, dtype=float)
        if self.kind == "gaussian":
            return y.copy()
        if self.kind == "poisson":
            return np.log(y + 0.5)
        if self.kind == "bernoulli":
            p = (y + 0.5) / 2.0
        else:
            p = (y + 0.5) / (self._trials_for(y.shape[0]) + 1.0)
        return np.log(p / (1.0 - p))

    def validate(self, y, name="response"):
        """Raise :class:`DataError` if ``y`` falls outside the family support."""
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise DataError(f"{name}: non-finite values")
        if self.kind == "bernoulli":
            bad = np.flatnonzero((y != 0) & (y != 1))
            if bad.size:
                raise DataError(f"{name}: bernoulli values must be 0 or 1 (row {bad[0] + 1})")
        elif self.kind == "poisson":
            bad = np.flatnonzero(y < 0)
            if bad.size:
                raise DataError(f"{name}: poisson counts must be >= 0 (row {bad[0] + 1})")
        elif self.kind == "binomial":
            t = self._trials_for(y.shape[0])
            bad = np.flatnonzero((y < 0) | (y > t))
            if bad.size:
                raise DataError(f"{name}: binomial counts must lie in [0, trials] (row {bad[0] + 1})")


def estimate_dispersion(family, z, fitted_eta, w, effective_df):
    """Residual-variance update for a Gaussian dispersion.

    ``w`` are the prior weights, i.e. the working weights evaluated with unit
    dispersion.  Non-Gaussian families return 1.0 unchanged.
    """
    if family.kind != "gaussian":
        return 1.0
    z = np.asarray(z, dtype=float)
    n = z.shape[0]
    if effective_df >= n:
        raise DegenerateFitError(
            f"effective degrees of freedom {effective_df:.3f} >= n = {n}; fit is saturated"
        )
    resid = z - np.asarray(fitted_eta, dtype=float)
    phi = float(np.sum(np.asarray(w) * resid**2) / (n - effective_df))
    return max(phi, DISPERSION_FLOOR)


def parse_family(text, trials=None):
    """Build a family from its name, e.g. ``"poisson"``."""
    return ResponseFamily(text.strip().lower(), trials=trials)
