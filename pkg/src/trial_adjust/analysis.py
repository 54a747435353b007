"""End-to-end analysis of one trial: fit, estimate, variance, inference."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .errors import TrialAdjustError
from .estimators import EstimatorKind, estimate_effect, estimate_means, plugin_first_order_bias
from .glm import LinkFamily, TrialData, WorkingModelSpec, build_design, fit_firth, fit_mle
from .inference import infer
from .variance import estimator_if, vcov_contrast, vcov_from_if

__all__ = ["AnalysisRequest", "analyze_trial", "unadjusted_row"]


@dataclass(frozen=True)
class AnalysisRequest:
    family: str = "logit"
    model: str = "pooled"
    estimators: tuple = tuple(k.value for k in EstimatorKind)
    variances: tuple = ("if", "adjusted")
    tests: tuple = ("wald", "score")
    contrast: str = "difference"
    log_scale: bool = False
    arms: tuple = (1, 2)
    null: float = 0.0
    level: float = 0.95
    two_sided: bool = False
    interactions: bool = False
    covariates: Optional[tuple] = None
    extra: dict = field(default_factory=dict)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _arm_moments(data: TrialData, family: str):
    """Arm sample means and the variances of those means."""
    mus, vs = [], []
    for a in range(1, data.k + 1):
        ya = data.y[data.arm == a]
        m = float(ya.mean())
        if family == "logit":
            v = m * (1.0 - m) / ya.size
        else:
            v = float(ya.var(ddof=1)) / ya.size if ya.size > 1 else float("nan")
        mus.append(m)
        vs.append(v)
    return np.array(mus), np.array(vs)


def unadjusted_row(data: TrialData, req: AnalysisRequest) -> dict:
    """Unadjusted comparator: contrast of arm sample means, closed-form variance.

    For a 0/1 outcome and the difference contrast the variance is
    ``p_b (1 - p_b) / n_b + p_a (1 - p_a) / n_a``.
    """
    mu, v = _arm_moments(data, req.family)
    row = {"estimator": "unadjusted", "variance": "closed-form", "test": req.tests[0],
           "contrast": req.contrast, "mu": mu.tolist()}
    try:
        eff = estimate_effect(mu, req.contrast, req.arms, req.log_scale)
        a, b = req.arms
        var = float(eff.gradient[0] ** 2 * v[a - 1] + eff.gradient[1] ** 2 * v[b - 1])
        res = infer(req.tests[0], eff.delta, var, data.n, req.null, req.level, req.two_sided)
    except TrialAdjustError as exc:
        row.update(status=f"error: {exc}", estimate=None, se=None)
        return row
    row.update(
        status="ok", estimate=res.delta, var_delta=res.variance, se=res.se,
        ci_lower=res.ci[0], ci_upper=res.ci[1], z=res.z, p_value=res.p_value,
        relative_efficiency=0.0,
    )
    return row


def analyze_trial(data: TrialData, req: AnalysisRequest) -> dict:
    """Run every requested (estimator, variance, test) combination.

    Fit failures and undefined contrasts are reported per row with a status
    message instead of aborting the analysis.
    """
    link = LinkFamily.from_name(req.family)
    spec = WorkingModelSpec(mode=req.model, link=link, covariates=req.covariates,
                            interactions=req.interactions)
    design = build_design(data, spec)
    kinds = [EstimatorKind.parse(k) for k in req.estimators]

    fits, fit_errors, diagnostics = {}, {}, {}
    for method in sorted({k.method for k in kinds}):
        try:
            fitter = fit_mle if method == "mle" else fit_firth
            fit = fitter(design, data.y, link)
        except TrialAdjustError as exc:
            fit_errors[method] = str(exc)
            continue
        fits[method] = fit
        bias = plugin_first_order_bias(fit)
        diagnostics[method] = {
            "converged": fit.converged, "status": fit.status, "iterations": fit.iterations,
            "separation_flagged": fit.separation.flagged,
            "max_abs_coef": fit.separation.max_abs_coef,
            "boundary_fraction": fit.separation.boundary_fraction,
            "coefficients": fit.beta.tolist(),
            "plugin_bias": {
                "b1_1": bias.b1_1.tolist(), "b1_2": bias.b1_2.tolist(),
                "fc_extra": bias.fc_extra.tolist(),
            },
        }

    unadj = unadjusted_row(data, req)
    unadj_var = unadj.get("var_delta")
    rows = []
    for kind in kinds:
        fit = fits.get(kind.method)
        for mode in req.variances:
            for test in req.tests:
                row = {"estimator": kind.value, "label": kind.label, "variance": mode,
                       "test": test, "contrast": req.contrast}
                if fit is None:
                    row["status"] = f"fit failed: {fit_errors[kind.method]}"
                    rows.append(row)
                    continue
                try:
                    means = estimate_means(fit, kind)
                    eff = estimate_effect(means, req.contrast, req.arms, req.log_scale)
                    cov = vcov_from_if(estimator_if(fit, means, mode))
                    v = vcov_contrast(cov, eff)
                    res = infer(test, eff.delta, v, data.n, req.null, req.level, req.two_sided)
                except TrialAdjustError as exc:
                    row["status"] = f"error: {exc}"
                    rows.append(row)
                    continue
                re = 1.0 - res.se ** 2 / unadj["se"] ** 2 if unadj_var else None
                row.update(
                    status="ok", mu=means.mu.tolist(), estimate=res.delta,
                    var_delta=res.variance, se=res.se, ci_lower=res.ci[0],
                    ci_upper=res.ci[1], z=res.z, p_value=res.p_value,
                    relative_efficiency=re,
                )
                rows.append(row)

    return {
        "metadata": {
            "version": __version__,
            "request_digest": req.digest(),
            "n": data.n,
            "arm_counts": data.arm_counts.tolist(),
            "arm_labels": list(data.arm_labels) if data.arm_labels else None,
            "covariates": list(data.covariate_names) if data.covariate_names else None,
            "parameters": design.p,
            "level": req.level,
            "null": req.null,
            "two_sided": req.two_sided,
            "model": req.model,
            "family": req.family,
        },
        "unadjusted": unadj,
        "rows": rows,
        "diagnostics": diagnostics,
    }
