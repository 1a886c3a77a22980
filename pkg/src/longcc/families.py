"""Canonical-link exponential families used by the cluster-specific GLMMs.

Each observation contributes  (y*eta - g(eta))/phi + w(y, phi)  to the log
likelihood, where eta is the linear predictor, g the cumulant, phi the
dispersion, and w the carrier term:

    gaussian : identity link, g(eta) = eta^2/2,        phi = sigma^2,
               w = -log(2*pi*phi)/2 - y^2/(2*phi)
    poisson  : log link,      g(eta) = exp(eta),       phi = 1,
               w = -log(y!)
    binomial : logit link,    g(eta) = log(1+e^eta),   phi = 1, w = 0
               (Bernoulli observations)

The inverse link is g', and the variance function Var(y) = phi * g''(eta).
For the poisson and binomial families the linear predictor is clamped to
[-ETA_CLAMP, ETA_CLAMP] before evaluating the likelihood (both the y*eta term
and the cumulant, so the log likelihood goes flat past the clamp instead of
drifting) and inside exp/logistic evaluations so curvature stays finite.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

GAUSSIAN = "gaussian"
POISSON = "poisson"
BINOMIAL = "binomial"
FAMILIES = (GAUSSIAN, POISSON, BINOMIAL)

ETA_CLAMP = 35.0


class FamilyError(ValueError):
    """Unknown family tag or family-incompatible response."""


def _check_family(family: str) -> None:
    if family not in FAMILIES:
        raise FamilyError(f"unknown family {family!r}")


def _clamp(eta):
    return np.clip(eta, -ETA_CLAMP, ETA_CLAMP)


def inverse_link(family: str, eta):
    """Mean response mu = g'(eta)."""
    _check_family(family)
    eta = np.asarray(eta, dtype=float)
    if family == GAUSSIAN:
        return eta
    if family == POISSON:
        return np.exp(_clamp(eta))
    z = _clamp(eta)
    return 1.0 / (1.0 + np.exp(-z))


def cumulant(family: str, eta):
    """Cumulant g(eta)."""
    _check_family(family)
    eta = np.asarray(eta, dtype=float)
    if family == GAUSSIAN:
        return 0.5 * eta ** 2
    if family == POISSON:
        return np.exp(_clamp(eta))
    # log(1 + e^eta), stable on both tails
    return np.logaddexp(0.0, _clamp(eta))


def variance_function(family: str, eta, phi: float = 1.0):
    """Observation variance Var(y) = phi * g''(eta), elementwise."""
    _check_family(family)
    eta = np.asarray(eta, dtype=float)
    if family == GAUSSIAN:
        return np.full_like(eta, float(phi))
    if family == POISSON:
        return np.exp(_clamp(eta))
    p = inverse_link(BINOMIAL, eta)
    return p * (1.0 - p)


def _check_response(family: str, y: np.ndarray) -> None:
    if family == POISSON:
        if np.any(y < 0) or np.any(y != np.floor(y)):
            raise FamilyError("poisson responses must be non-negative integers")
    elif family == BINOMIAL:
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise FamilyError("binomial responses must be 0 or 1")


def log_likelihood(family: str, y, eta, phi: float = 1.0) -> float:
    """Total log likelihood sum_j [(y_j eta_j - g(eta_j))/phi + w(y_j, phi)]."""
    _check_family(family)
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    _check_response(family, y)
    if family == GAUSSIAN:
        if phi <= 0:
            raise FamilyError("gaussian dispersion must be positive")
        w = -0.5 * np.log(2.0 * np.pi * phi) - y ** 2 / (2.0 * phi)
        return float(np.sum((y * eta - cumulant(family, eta)) / phi + w))
    # evaluate y*eta and g(eta) at the same clamped point, otherwise the
    # linear term keeps growing past the clamp and saturated predictors look
    # better than they are
    z = _clamp(eta)
    if family == POISSON:
        return float(np.sum(y * z - cumulant(family, z) - gammaln(y + 1.0)))
    return float(np.sum(y * z - cumulant(family, z)))


def pointwise_log_likelihood(family: str, y, eta, phi: float = 1.0):
    """Per-observation log-likelihood contributions (no summation).

    Same terms as log_likelihood; used by the label updates, which need
    per-subject sums under several candidate clusters.
    """
    _check_family(family)
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family == GAUSSIAN:
        w = -0.5 * np.log(2.0 * np.pi * phi) - y ** 2 / (2.0 * phi)
        return (y * eta - cumulant(family, eta)) / phi + w
    z = _clamp(eta)
    if family == POISSON:
        return y * z - cumulant(family, z) - gammaln(y + 1.0)
    return y * z - cumulant(family, z)


def score_and_curvature(family: str, y, design, eta, phi: float = 1.0):
    """Gradient and negative Hessian of the log likelihood in the coefficients.

    For eta = design @ theta (+ offset), returns

        G = design^T (y - mu(eta)) / phi
        H = design^T diag(g''(eta)) design / phi

    H is the negative Hessian (observed information), positive semi-definite.

    Parameters
    ----------
    y : (n,) responses
    design : (n, d) matrix whose coefficients are differentiated
    eta : (n,) full linear predictor at the evaluation point
    phi : dispersion (gaussian only; 1 otherwise)

    Returns
    -------
    (G, H) : ((d,), (d, d)) arrays
    """
    _check_family(family)
    y = np.asarray(y, dtype=float)
    D = np.atleast_2d(np.asarray(design, dtype=float))
    eta = np.asarray(eta, dtype=float)
    mu = inverse_link(family, eta)
    G = D.T @ (y - mu) / phi
    if family == GAUSSIAN:
        H = D.T @ D / phi
    else:
        kappa = variance_function(family, eta)
        H = (D * kappa[:, None]).T @ D
    return G, H
