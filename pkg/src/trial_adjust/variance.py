"""Influence-function based variance estimation for arm means and contrasts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateSample
from .estimators import (
    EffectEstimate,
    MeansEstimate,
    nuisance_for,
    predict_counterfactual,
)
from .glm import DesignMatrix, FittedModel

__all__ = [
    "VARIANCE_MODES",
    "IfMatrix",
    "CovMatrix",
    "empirical_if",
    "theoretical_if",
    "estimator_if",
    "vcov_from_if",
    "vcov_contrast",
]

VARIANCE_MODES = ("if", "adjusted", "theoretical")


@dataclass(frozen=True, eq=False)
class IfMatrix:
    """``n x k`` matrix; column ``a`` is the estimated IF of the arm-``a`` mean."""

    values: np.ndarray
    adjusted: bool
    source: str

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class CovMatrix:
    """Covariance matrix of the vector of arm means (already on the mean scale)."""

    matrix: np.ndarray

    def __getitem__(self, idx):
        return self.matrix[idx]

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.matrix))


def empirical_if(fitted: FittedModel, means: MeansEstimate,
                 design: Optional[DesignMatrix] = None) -> IfMatrix:
    """M-estimation (sandwich) influence values of the g-computation means.

    ``psi_i^a = [n^{-1} sum_j m'_{j|a} X_{j|a}]^T psi_i^beta + m_{i|a} - mu_a``.
    """
    design = fitted.design if design is None else design
    n, k = design.n, design.k
    out = np.empty((n, k))
    for a in range(k):
        xa = design.counterfactual(a + 1)
        deriv = (xa * fitted.link.d1(xa @ fitted.beta)[:, None]).mean(axis=0)
        out[:, a] = fitted.if_beta @ deriv + means.predictions[:, a] - means.mu[a]
    return IfMatrix(out, adjusted=False, source=f"empirical:{means.kind.value}")


def theoretical_if(means: MeansEstimate, data, observed_fitted, adjust: bool = False,
                   hat=None) -> IfMatrix:
    """AIPW-form influence values, optionally leverage-adjusted.

    Entry ``(i, a)`` is
    ``(1 + adjust * h_i) I(A_i = a) / pi_a (Y_i - m*_i) + m*_{i|a} - mu_a``
    where ``m*`` are the estimator's own predictions. ``observed_fitted`` may
    be ``None``, in which case ``m*_i`` is read off ``means.predictions`` at
    each subject's own arm.
    """
    y, arm = _y_arm(data)
    pred = means.predictions
    n, k = pred.shape
    pi = np.bincount(arm, minlength=k) / n
    if observed_fitted is None:
        observed_fitted = pred[np.arange(n), arm]
    resid = y - np.asarray(observed_fitted, dtype=float)
    if adjust:
        if hat is None:
            raise ValueError("hat values are required for the adjusted IF")
        mult = 1.0 + np.asarray(hat, dtype=float)
    else:
        mult = np.ones(n)
    own = (arm[:, None] == np.arange(k)[None, :]) / pi[None, :]
    vals = (mult * resid)[:, None] * own + pred - means.mu[None, :]
    return IfMatrix(vals, adjusted=bool(adjust), source=f"theoretical:{means.kind.value}")


def _y_arm(data):
    if hasattr(data, "design"):
        return np.asarray(data.y, dtype=float), data.design.arm_index
    if hasattr(data, "arm"):
        return np.asarray(data.y, dtype=float), np.asarray(data.arm) - 1
    y, arm = data
    return np.asarray(y, dtype=float), np.asarray(arm) - 1


def estimator_if(fitted: FittedModel, means: MeansEstimate, mode: str = "if",
                 nuisance=None) -> IfMatrix:
    """The IF matrix used for inference with a given estimator.

    ``mode='if'`` gives the unadjusted variance: the sandwich form for
    g-computation and the AIPW form for the Oaxaca-Blinder estimators.
    ``mode='theoretical'`` uses the unadjusted AIPW form for every kind.
    ``mode='adjusted'`` multiplies the residual term by ``1 + h_ii``.
    Predictions on the observed arm come from the estimator's shared nuisance
    vector (``C2`` uses the shared ``C1`` vector here). ``nuisance`` may pass
    a precomputed :class:`DebiasedNuisance` for ``kind``.
    """
    kind = means.kind
    if mode not in VARIANCE_MODES:
        raise ValueError(f"unknown variance mode {mode!r}")
    if mode == "if" and not kind.is_gob:
        return empirical_if(fitted, means)
    pred = means.predictions
    if kind.level == "C2":
        nuis = nuisance_for(fitted, kind) if nuisance is None else nuisance
        pred = predict_counterfactual(fitted.design, nuis.shared, fitted.link)
        means = MeansEstimate(means.mu, kind, pred, means.pi_hat)
    arm = fitted.design.arm_index
    observed = pred[np.arange(fitted.n), arm]
    return theoretical_if(means, fitted, observed, adjust=(mode == "adjusted"),
                          hat=fitted.hat)


def vcov_from_if(ifm) -> CovMatrix:
    """``(n (n - 1))^{-1} sum_i (l_i - lbar)(l_i - lbar)^T``."""
    vals = ifm.values if isinstance(ifm, IfMatrix) else np.asarray(ifm, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    n = vals.shape[0]
    if n < 2:
        raise DegenerateSample("need at least two observations")
    centred = vals - vals.mean(axis=0)
    cov = centred.T @ centred / (n * (n - 1))
    return CovMatrix(0.5 * (cov + cov.T))


def vcov_contrast(cov, effect: EffectEstimate) -> float:
    """Delta-method variance ``g^T V g`` of a two-arm contrast."""
    mat = cov.matrix if isinstance(cov, CovMatrix) else np.asarray(cov, dtype=float)
    a, b = effect.arms
    idx = [a - 1, b - 1]
    sub = mat[np.ix_(idx, idx)]
    g = effect.gradient
    return float(max(g @ sub @ g, 0.0))
