"""Wald and score tests and confidence intervals for a scalar treatment effect."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2, norm

from .errors import DegenerateN, NonPositiveVariance

__all__ = [
    "InferenceResult",
    "wald_inference",
    "score_inference",
    "infer",
    "wald_arrays",
    "score_arrays",
]


@dataclass(frozen=True)
class InferenceResult:
    delta: float
    variance: float
    method: str
    z: float
    p_value: float
    ci: tuple
    level: float
    null_value: float
    n: int | None = None
    two_sided: bool = False

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance))

    @property
    def p_one_sided(self) -> float:
        """Upper-tail p-value ``1 - Phi(z)``."""
        return float(norm.sf(self.z))

    def rejects(self, alpha: float = 0.025) -> bool:
        return self.p_value < alpha

    def covers(self, value: float) -> bool:
        return self.ci[0] <= value <= self.ci[1]


def _check(v, level):
    if not np.isfinite(v) or v <= 0.0:
        raise NonPositiveVariance(f"variance must be positive, got {v!r}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level!r}")


def _pvalue(z, two_sided):
    return float(2.0 * norm.sf(abs(z))) if two_sided else float(norm.sf(z))


def wald_inference(delta: float, v_delta: float, null: float = 0.0, level: float = 0.95,
                   two_sided: bool = False, n: int | None = None) -> InferenceResult:
    """Wald test of ``H0: delta = null`` with a symmetric normal interval.

    ``z = (delta - null) / sqrt(v)``; the p-value is one-sided, ``1 - Phi(z)``,
    unless ``two_sided`` is set.
    """
    _check(v_delta, level)
    se = np.sqrt(v_delta)
    z = (delta - null) / se
    half = norm.ppf(0.5 * (1.0 + level)) * se
    return InferenceResult(
        delta=float(delta), variance=float(v_delta), method="wald", z=float(z),
        p_value=_pvalue(z, two_sided), ci=(float(delta - half), float(delta + half)),
        level=level, null_value=float(null), n=n, two_sided=two_sided,
    )


def score_inference(delta: float, v_delta: float, n: int, null: float = 0.0,
                    level: float = 0.95, two_sided: bool = False) -> InferenceResult:
    """Score-type test and interval.

    ``z = (delta - null) / sqrt(v + (delta - null)^2 / n)`` and the interval is
    ``delta +/- sqrt(v c / (1 - c / n))`` with ``c`` the ``level`` quantile of
    chi-squared on one degree of freedom.
    """
    _check(v_delta, level)
    c = chi2.ppf(level, df=1)
    denom = 1.0 - c / n
    if denom <= 0.0:
        raise DegenerateN(f"n={n} too small for a {level:g} score interval")
    d = delta - null
    z = d / np.sqrt(v_delta + d * d / n)
    half = np.sqrt(v_delta * c / denom)
    return InferenceResult(
        delta=float(delta), variance=float(v_delta), method="score", z=float(z),
        p_value=_pvalue(z, two_sided), ci=(float(delta - half), float(delta + half)),
        level=level, null_value=float(null), n=int(n), two_sided=two_sided,
    )


def infer(method: str, delta: float, v_delta: float, n: int, null: float = 0.0,
          level: float = 0.95, two_sided: bool = False) -> InferenceResult:
    if method == "wald":
        return wald_inference(delta, v_delta, null, level, two_sided, n=n)
    if method == "score":
        return score_inference(delta, v_delta, n, null, level, two_sided)
    raise ValueError(f"unknown test {method!r}")


# ---------------------------------------------------------------------------
# vectorised forms used by the simulation summaries; entries with a
# non-positive or missing variance come back as NaN


def _masked(v):
    v = np.asarray(v, dtype=float)
    ok = np.isfinite(v) & (v > 0.0)
    return np.where(ok, v, np.nan)


def wald_arrays(delta, v_delta, null=0.0, level: float = 0.95, two_sided: bool = False):
    """Elementwise ``(z, p, lo, hi)`` of :func:`wald_inference`."""
    v = _masked(v_delta)
    delta = np.asarray(delta, dtype=float)
    se = np.sqrt(v)
    z = (delta - null) / se
    half = norm.ppf(0.5 * (1.0 + level)) * se
    p = 2.0 * norm.sf(np.abs(z)) if two_sided else norm.sf(z)
    return z, p, delta - half, delta + half


def score_arrays(delta, v_delta, n, null=0.0, level: float = 0.95, two_sided: bool = False):
    """Elementwise ``(z, p, lo, hi)`` of :func:`score_inference`."""
    c = chi2.ppf(level, df=1)
    denom = 1.0 - c / n
    if denom <= 0.0:
        raise DegenerateN(f"n={n} too small for a {level:g} score interval")
    v = _masked(v_delta)
    delta = np.asarray(delta, dtype=float)
    d = delta - null
    z = d / np.sqrt(v + d * d / n)
    half = np.sqrt(v * c / denom)
    p = 2.0 * norm.sf(np.abs(z)) if two_sided else norm.sf(z)
    return z, p, delta - half, delta + half
