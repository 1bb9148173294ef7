"""Accuracy metrics for simulation studies."""

import numpy as np

from ..exceptions import DataError


def relative_squared_error(beta_hat, beta):
    """``||beta_hat - beta||^2 / ||beta||^2``."""
    beta = np.asarray(beta, dtype=float)
    beta_hat = np.asarray(beta_hat, dtype=float)
    if beta_hat.shape != beta.shape:
        raise DataError(f"estimate has shape {beta_hat.shape}, truth {beta.shape}")
    denom = float(beta @ beta)
    if denom == 0.0:
        raise DataError("relative error undefined for a zero truth vector")
    d = beta_hat - beta
    return float(d @ d) / denom


def mrse(beta_hats, truth):
    """Mean relative squared error over samples for one response."""
    if len(beta_hats) == 0:
        raise DataError("no estimates given")
    return float(np.mean([relative_squared_error(b, truth) for b in beta_hats]))


def murse(beta_hats, truths):
    """Mean over samples of the largest relative squared error across responses.

    ``beta_hats[b][k]`` estimates ``truths[k]``.
    """
    if len(beta_hats) == 0:
        raise DataError("no estimates given")
    per_sample = []
    for sample in beta_hats:
        if len(sample) != len(truths):
            raise DataError(f"{len(sample)} estimates for {len(truths)} responses")
        per_sample.append(max(relative_squared_error(b, t) for b, t in zip(sample, truths)))
    return float(np.mean(per_sample))


def _abs_cor(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    return 0.0 if den == 0 else float(abs(a @ b) / den)


def latent_metrics(model, X_raw, latents, targets):
    """Recovery of latent variables and of the fixed X-part of each predictor.

    Returns ``(cor, err)``: ``cor[j]`` is the largest absolute correlation
    between ``latents[j]`` and a fitted component, ``err[k]`` the relative
    squared distance between ``targets[k]`` and ``X_raw @ beta_raw[k]``.
    """
    F = np.asarray(model.components)
    cor = []
    for phi in latents:
        phi = np.asarray(phi, dtype=float)
        cor.append(max((_abs_cor(phi, F[:, h]) for h in range(F.shape[1])), default=0.0))
    err = []
    for k, target in enumerate(targets):
        target = np.asarray(target, dtype=float)
        fit = X_raw @ model.beta_raw[k]
        err.append(float(np.sum((target - fit) ** 2) / np.sum(target**2)))
    return np.array(cor), np.array(err)
