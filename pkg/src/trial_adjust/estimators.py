"""Treatment-specific mean estimators, debiased nuisances and effect contrasts.

Two families of estimators are provided:

* g-computation (``GC_*``): average the model predictions ``m(X_{i|a} beta)``
  over all subjects;
* generalized Oaxaca-Blinder (``GOB_*``): use the observed outcome for
  subjects on arm ``a`` and a model prediction for everyone else. The
  predictions come from a nuisance vector corrected for its first-order
  effect on the mean estimate (levels ``C0``, ``C1`` and ``C2``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import SingularContrast
from .glm import DesignMatrix, FittedModel, TrialData

__all__ = [
    "EstimatorKind",
    "MeansEstimate",
    "DebiasedNuisance",
    "EffectEstimate",
    "BiasEstimate",
    "predict_counterfactual",
    "gcomp_means",
    "gob_means",
    "debias_mle",
    "debias_fc",
    "nuisance_for",
    "estimate_means",
    "estimate_effect",
    "contrast_value",
    "plugin_first_order_bias",
]


class EstimatorKind(enum.Enum):
    GC_MLE = "gc-mle"
    GC_FC = "gc-fc"
    GOB_MLE_C1 = "gob-mle-c1"
    GOB_MLE_C2 = "gob-mle-c2"
    GOB_FC_C0 = "gob-fc-c0"
    GOB_FC_C1 = "gob-fc-c1"
    GOB_FC_C2 = "gob-fc-c2"

    @classmethod
    def parse(cls, text: str) -> "EstimatorKind":
        key = text.strip().lower().replace("_", "-").replace("(", "-").replace(")", "")
        for kind in cls:
            if kind.value == key or kind.name.lower().replace("_", "-") == key:
                return kind
        raise ValueError(f"unknown estimator {text!r}")

    @property
    def method(self) -> str:
        """Nuisance fitting method: ``'mle'`` or ``'firth'``."""
        return "mle" if "MLE" in self.name else "firth"

    @property
    def is_gob(self) -> bool:
        return self.name.startswith("GOB")

    @property
    def level(self) -> Optional[str]:
        return self.name[-2:] if self.is_gob else None

    @property
    def label(self) -> str:
        if not self.is_gob:
            return f"GC-{'MLE' if self.method == 'mle' else 'FC'}"
        src = "MLE" if self.method == "mle" else "FC"
        return f"gOB-{src}({self.level})"


@dataclass(frozen=True, eq=False)
class MeansEstimate:
    """Arm means ``mu`` (arms ``1..k`` at positions ``0..k-1``).

    ``predictions[i, a]`` is the counterfactual prediction for subject ``i``
    under arm ``a + 1`` that produced the estimate.
    """

    mu: np.ndarray
    kind: EstimatorKind
    predictions: np.ndarray
    pi_hat: np.ndarray

    @property
    def k(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True, eq=False)
class DebiasedNuisance:
    """Corrected nuisance coefficients.

    ``shared`` is the common vector; for level ``C2``, ``shift[i]`` is
    ``psi_i / n`` so that the subject-specific vector is ``shared - shift[i]``.
    """

    shared: np.ndarray
    source: str
    level: str
    shift: Optional[np.ndarray] = None

    @property
    def per_obs(self) -> Optional[np.ndarray]:
        if self.shift is None:
            return None
        return self.shared[None, :] - self.shift


@dataclass(frozen=True)
class EffectEstimate:
    contrast: str
    arms: tuple
    delta: float
    gradient: np.ndarray
    mu_a: float
    mu_b: float
    log_scale: bool = False


@dataclass(frozen=True)
class BiasEstimate:
    """Plug-in first-order bias components per arm (not yet divided by ``n``)."""

    b1_1: np.ndarray
    b1_2: np.ndarray
    fc_extra: np.ndarray
    n: int

    @property
    def mle_total(self) -> np.ndarray:
        """Approximate bias of the MLE g-computation means, ``b1 / n``."""
        return (self.b1_1 + self.b1_2) / self.n

    @property
    def fc_total(self) -> np.ndarray:
        """Approximate bias of the Firth g-computation means."""
        return (self.b1_1 + self.b1_2 + self.fc_extra) / self.n


# ---------------------------------------------------------------------------
# predictions and means


def predict_counterfactual(design: DesignMatrix, beta, link, shift=None) -> np.ndarray:
    """``n x k`` matrix of ``m(X_{i|a}^T beta_i)``.

    ``beta`` is either a shared ``p``-vector or an ``n x p`` matrix of
    subject-specific vectors. ``shift`` (``n x p``) is subtracted row-wise from
    a shared ``beta``; this is how ``C2`` predictions are formed without
    materialising the per-subject coefficient vectors.
    """
    beta = np.asarray(beta, dtype=float)
    out = np.empty((design.n, design.k))
    for a in range(1, design.k + 1):
        xa = design.counterfactual(a)
        if beta.ndim == 1:
            if beta.shape[0] != design.p:
                raise ValueError(f"beta has length {beta.shape[0]}, design has {design.p} columns")
            eta = xa @ beta
        else:
            if beta.shape != (design.n, design.p):
                raise ValueError("per-subject beta must be n x p")
            eta = np.einsum("ij,ij->i", xa, beta)
        if shift is not None:
            eta = eta - np.einsum("ij,ij->i", xa, shift)
        out[:, a - 1] = link.mean(eta)
    return out


def _pi_hat(arm_index, k):
    return np.bincount(arm_index, minlength=k) / arm_index.shape[0]


def gcomp_means(fitted: FittedModel, design: Optional[DesignMatrix] = None) -> MeansEstimate:
    """g-computation means ``n^{-1} sum_i m(X_{i|a}^T beta)``."""
    design = fitted.design if design is None else design
    pred = predict_counterfactual(design, fitted.beta, fitted.link)
    kind = EstimatorKind.GC_MLE if fitted.method == "mle" else EstimatorKind.GC_FC
    return MeansEstimate(pred.mean(axis=0), kind, pred, _pi_hat(design.arm_index, design.k))


def gob_means(data, predictions, kind: EstimatorKind) -> MeansEstimate:
    """Oaxaca-Blinder means: observed outcomes on arm ``a``, predictions elsewhere.

    ``data`` is a :class:`TrialData` or a fitted model (anything exposing
    ``y`` together with ``arm`` or ``design.arm_index``).
    """
    y, arm_index = _outcome_and_arm(data)
    pred = np.asarray(predictions, dtype=float)
    k = pred.shape[1]
    own = arm_index[:, None] == np.arange(k)[None, :]
    filled = np.where(own, y[:, None], pred)
    return MeansEstimate(filled.mean(axis=0), kind, pred, _pi_hat(arm_index, k))


def _outcome_and_arm(data):
    if isinstance(data, TrialData):
        return data.y, data.arm - 1
    return np.asarray(data.y, dtype=float), data.design.arm_index


# ---------------------------------------------------------------------------
# debiased nuisances


def _leverage_shift(fitted: FittedModel) -> np.ndarray:
    """``n^{-1} sum_i h_ii psi_i``."""
    return fitted.if_beta.T @ fitted.hat / fitted.n


def _firth_shift(fitted: FittedModel) -> np.ndarray:
    """``(2n)^{-1} B^{-1} sum_i h_ii (m''/m')_i X_i``."""
    x = fitted.design.x
    ratio = fitted.link.ratio(fitted.fitted)
    return fitted.bread_inv @ (x.T @ (fitted.hat * ratio)) / (2.0 * fitted.n)


def debias_mle(fitted: FittedModel):
    """Return the ``(C1, C2)`` corrections of an MLE fit."""
    if fitted.method != "mle":
        raise ValueError("debias_mle needs an MLE fit")
    shared = fitted.beta + _leverage_shift(fitted)
    c1 = DebiasedNuisance(shared, "mle", "C1")
    c2 = DebiasedNuisance(shared, "mle", "C2", shift=fitted.if_beta / fitted.n)
    return c1, c2


def debias_fc(fitted: FittedModel):
    """Return the ``(C0, C1, C2)`` corrections of a Firth fit."""
    if fitted.method != "firth":
        raise ValueError("debias_fc needs a Firth fit")
    b0 = fitted.beta - _firth_shift(fitted)
    b1 = b0 + _leverage_shift(fitted)
    return (
        DebiasedNuisance(b0, "firth", "C0"),
        DebiasedNuisance(b1, "firth", "C1"),
        DebiasedNuisance(b1, "firth", "C2", shift=fitted.if_beta / fitted.n),
    )


def nuisance_for(fitted: FittedModel, kind: EstimatorKind) -> DebiasedNuisance:
    """The nuisance vector used by ``kind``, computed from ``fitted``."""
    if kind.method != fitted.method:
        raise ValueError(f"{kind.label} needs a {kind.method} fit, got {fitted.method}")
    if not kind.is_gob:
        return DebiasedNuisance(fitted.beta, fitted.method, "raw")
    options = debias_mle(fitted) if kind.method == "mle" else debias_fc(fitted)
    return {d.level: d for d in options}[kind.level]


def estimate_means(fitted: FittedModel, kind: EstimatorKind) -> MeansEstimate:
    """Arm means for any estimator kind from a fit of the matching method."""
    if not kind.is_gob:
        if kind.method != fitted.method:
            raise ValueError(f"{kind.label} needs a {kind.method} fit")
        return gcomp_means(fitted)
    nuis = nuisance_for(fitted, kind)
    pred = predict_counterfactual(fitted.design, nuis.shared, fitted.link, nuis.shift)
    return gob_means(fitted, pred, kind)


# ---------------------------------------------------------------------------
# contrasts


def contrast_value(mu_a, mu_b, contrast: str = "difference", log_scale: bool = False):
    """``delta(mu_a, mu_b)``; vectorised over array inputs."""
    mu_a = np.asarray(mu_a, dtype=float)
    mu_b = np.asarray(mu_b, dtype=float)
    if contrast == "difference":
        return mu_b - mu_a
    if contrast == "ratio":
        val = mu_b / mu_a
    elif contrast == "odds-ratio":
        val = (mu_b / (1.0 - mu_b)) / (mu_a / (1.0 - mu_a))
    else:
        raise ValueError(f"unknown contrast {contrast!r}")
    return np.log(val) if log_scale else val


_CONTRAST_ALIASES = {
    "difference": "difference", "diff": "difference", "rd": "difference",
    "ratio": "ratio", "rr": "ratio",
    "odds-ratio": "odds-ratio", "or": "odds-ratio", "odds_ratio": "odds-ratio",
}


def estimate_effect(means, contrast: str = "difference", arms=(1, 2),
                    log_scale: bool = False) -> EffectEstimate:
    """Treatment effect of arm ``arms[1]`` versus ``arms[0]`` with its gradient.

    ``means`` is a :class:`MeansEstimate` or a plain vector of arm means.
    The gradient is with respect to ``(mu_a, mu_b)``.
    """
    try:
        contrast = _CONTRAST_ALIASES[contrast.lower()]
    except KeyError:
        raise ValueError(f"unknown contrast {contrast!r}") from None
    a, b = arms
    if a == b:
        raise ValueError("contrast arms must differ")
    mu = means.mu if isinstance(means, MeansEstimate) else np.asarray(means, dtype=float)
    mu_a, mu_b = float(mu[a - 1]), float(mu[b - 1])

    if contrast == "difference":
        if log_scale:
            raise ValueError("log scale is not defined for a difference")
        delta = mu_b - mu_a
        grad = np.array([-1.0, 1.0])
    elif contrast == "ratio":
        if mu_a <= 1e-12 or (log_scale and mu_b <= 1e-12):
            raise SingularContrast(f"ratio undefined at mu_a={mu_a:g}, mu_b={mu_b:g}")
        if log_scale:
            delta = np.log(mu_b) - np.log(mu_a)
            grad = np.array([-1.0 / mu_a, 1.0 / mu_b])
        else:
            delta = mu_b / mu_a
            grad = np.array([-mu_b / mu_a ** 2, 1.0 / mu_a])
    else:
        for m in (mu_a, mu_b):
            if m <= 1e-12 or m >= 1.0 - 1e-12:
                raise SingularContrast(f"odds ratio undefined at mu={m:g}")
        va, vb = mu_a * (1.0 - mu_a), mu_b * (1.0 - mu_b)
        if log_scale:
            delta = np.log(mu_b / (1.0 - mu_b)) - np.log(mu_a / (1.0 - mu_a))
            grad = np.array([-1.0 / va, 1.0 / vb])
        else:
            delta = (mu_b / (1.0 - mu_b)) / (mu_a / (1.0 - mu_a))
            grad = np.array([-delta / va, delta / vb])
    return EffectEstimate(contrast, (a, b), float(delta), grad, mu_a, mu_b, log_scale)


# ---------------------------------------------------------------------------
# plug-in bias diagnostic


def plugin_first_order_bias(fitted: FittedModel, design: Optional[DesignMatrix] = None,
                            data=None) -> BiasEstimate:
    """Sample analogue of the first-order bias of the g-computation means.

    ``b1_1`` is the part carried by subjects on arm ``a``, ``b1_2`` the part
    from reusing off-arm covariates, ``fc_extra`` the additional term of the
    Firth estimator. Diagnostic only: the totals estimate ``E(mu_hat - mu)``
    up to ``O(n^{-3/2})``.
    """
    design = fitted.design if design is None else design
    y = fitted.y if data is None else np.asarray(data.y, dtype=float)
    link = fitted.link
    n, k = design.n, design.k
    arm = design.arm_index
    pi = _pi_hat(arm, k)
    binv = fitted.bread_inv
    x = design.x
    resid = y - fitted.fitted

    b11 = np.zeros(k)
    b12 = np.zeros(k)
    extra = np.zeros(k)
    for a in range(k):
        xa = design.counterfactual(a + 1)
        eta_a = xa @ fitted.beta
        d1 = link.d1(eta_a)
        d2 = link.d2(eta_a)
        own = arm == a
        quad_own = np.einsum("ij,jk,ik->i", xa, binv, xa)
        b11[a] = -(1.0 - pi[a]) * np.mean((d1 * quad_own * resid)[own])
        cross = np.einsum("ij,jk,ik->i", xa, binv, x)
        term = d1 * cross * resid
        total = 0.0
        for b in range(k):
            if b != a:
                total += pi[b] * np.mean(term[arm == b])
        b12[a] = total
        extra[a] = 0.5 * np.mean(d2 * quad_own)
    return BiasEstimate(b1_1=b11, b1_2=b12, fc_extra=extra, n=n)
