"""Monte-Carlo harness for the operating characteristics of the estimators.

A scenario draws two-arm trials with a balanced random assignment and a
logistic outcome model, analyses every draw with a range of working models
(adjusting for the first ``c`` covariates, for each ``c`` in a sweep) and
summarises bias, standard errors, coverage, power and efficiency relative to
the unadjusted two-proportion analysis.

Replicate ``r`` draws its data from a Philox generator keyed by
``(seed, r)``, so results do not depend on how replicates are spread across
worker processes.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import EmptyCell, OddN, TrialAdjustError
from .estimators import (
    EstimatorKind,
    debias_fc,
    debias_mle,
    estimate_effect,
    gob_means,
    gcomp_means,
    plugin_first_order_bias,
    predict_counterfactual,
)
from .glm import LOGIT, TrialData, WorkingModelSpec, build_design, fit_firth, fit_mle
from .inference import score_arrays, wald_arrays
from .variance import VARIANCE_MODES, estimator_if, vcov_contrast, vcov_from_if

__all__ = [
    "SimConfig",
    "ReplicateRecord",
    "SimSummary",
    "PRESETS",
    "preset",
    "true_means",
    "generate_trial",
    "replicate_rng",
    "run_replicate",
    "run_experiment",
    "summarize_experiment",
    "separation_subset",
    "unadjusted_comparator",
]

ALL_KINDS = tuple(EstimatorKind)
TESTS = ("wald", "score")


@dataclass(frozen=True)
class SimConfig:
    """One simulation scenario.

    The outcome is ``Bernoulli(expit(beta_a[A] + W* beta_w))`` with
    ``W* ~ N(0, I_q)``. The analysis covariates are ``W* + 5`` for the first
    ``n_shifted`` columns and ``|W*| + 5`` for the rest, so every working
    model is misspecified.
    """

    name: str = "custom"
    n: int = 60
    q: int = 10
    beta_a: tuple = (-1.5836, 0.5923)
    beta_w: tuple = ()
    n_shifted: int = 4
    mu_targets: Optional[tuple] = None
    adjusted_counts: tuple = tuple(range(11))
    mode: str = "pooled"
    kinds: tuple = tuple(k.value for k in ALL_KINDS)
    variance_modes: tuple = ("if", "adjusted")
    tests: tuple = TESTS
    reps: int = 10_000
    seed: int = 20240101
    threads: int = 1
    level: float = 0.95
    alpha: float = 0.025
    null: float = 0.0
    max_iter: int = 500
    tol: float = 1e-6
    bias_diagnostic: bool = True

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if len(self.beta_w) != self.q:
            raise ValueError(f"beta_w has {len(self.beta_w)} entries, q = {self.q}")
        if len(self.beta_a) != 2:
            raise ValueError("the harness simulates two-arm trials")
        if not 0 <= self.n_shifted <= self.q:
            raise ValueError("n_shifted must lie in 0..q")
        if any(c < 0 or c > self.q for c in self.adjusted_counts):
            raise ValueError("adjusted counts must lie in 0..q")
        if self.mode not in ("pooled", "stratified"):
            raise ValueError(f"unknown working-model mode {self.mode!r}")
        for k in self.kinds:
            EstimatorKind.parse(k)
        for v in self.variance_modes:
            if v not in VARIANCE_MODES:
                raise ValueError(f"unknown variance mode {v!r}")
        for t in self.tests:
            if t not in TESTS:
                raise ValueError(f"unknown test {t!r}")

    @property
    def k(self) -> int:
        return 2

    @property
    def estimator_kinds(self) -> tuple:
        return tuple(EstimatorKind.parse(k) for k in self.kinds)

    def to_dict(self) -> dict:
        return asdict(self)


def _exp1():
    bw = [math.sqrt(0.8 * math.log(5) ** 2 / 4)] * 4 + [math.sqrt(0.2 * math.log(5) ** 2 / 6)] * 6
    return SimConfig(
        name="experiment-1", n=60, q=10, beta_a=(-1.5836, 0.5923), beta_w=tuple(bw),
        n_shifted=4, mu_targets=(0.25, 0.60), adjusted_counts=tuple(range(11)),
        mode="pooled",
    )


def _exp2():
    bw = [math.sqrt(math.log(25) ** 2 / 35)] * 35
    kinds = ("gc-mle", "gc-fc", "gob-mle-c1", "gob-fc-c0", "gob-fc-c1")
    return SimConfig(
        name="experiment-2", n=200, q=35, beta_a=(-4.7173, -2.4760), beta_w=tuple(bw),
        n_shifted=30, mu_targets=(0.10, 0.25), adjusted_counts=(10, 15, 20, 25),
        mode="stratified", kinds=kinds,
    )


PRESETS = {"experiment-1": _exp1, "experiment-2": _exp2}


def preset(name: str, **overrides) -> SimConfig:
    try:
        cfg = PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# truth and data generation


def true_means(config: SimConfig, nodes: int = 80) -> np.ndarray:
    """Population arm means ``E expit(beta_a + W* beta_w)`` by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    s = float(np.linalg.norm(config.beta_w))
    return np.array([np.sum(w * expit(b + s * x)) for b in config.beta_a])


def replicate_rng(seed: int, rep: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for replicate ``rep``."""
    ss = np.random.SeedSequence(seed, spawn_key=(rep, stream))
    return np.random.Generator(np.random.Philox(ss))


def generate_trial(config: SimConfig, rng: np.random.Generator) -> TrialData:
    """Draw one trial: covariates, then a balanced assignment, then outcomes."""
    n = config.n
    if n % 2:
        raise OddN(f"balanced assignment needs an even n, got {n}")
    wstar = rng.standard_normal((n, config.q))
    arm = rng.permutation(np.repeat(np.array([1, 2]), n // 2))
    lin = np.asarray(config.beta_a)[arm - 1] + wstar @ np.asarray(config.beta_w, dtype=float)
    y = (rng.random(n) < expit(lin)).astype(float)
    w = np.empty_like(wstar)
    s = config.n_shifted
    w[:, :s] = wstar[:, :s] + 5.0
    w[:, s:] = np.abs(wstar[:, s:]) + 5.0
    return TrialData(y=y, arm=arm, w=w, k=2)


def unadjusted_comparator(y, arm):
    """Two-proportion difference and its variance ``sum_a p_a (1 - p_a) / n_a``."""
    y = np.asarray(y, dtype=float)
    arm = np.asarray(arm)
    p1, p2 = y[arm == 1].mean(), y[arm == 2].mean()
    n1, n2 = np.sum(arm == 1), np.sum(arm == 2)
    return float(p2 - p1), float(p2 * (1 - p2) / n2 + p1 * (1 - p1) / n1)


# ---------------------------------------------------------------------------
# one replicate


@dataclass
class ReplicateRecord:
    """Per-replicate results; axes are (count, kind[, variance mode][, arm])."""

    rep: int
    delta: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    fit_ok: np.ndarray
    converged: np.ndarray
    max_abs_beta: np.ndarray
    separated: np.ndarray
    unadj_delta: float
    unadj_var: float
    ybar: np.ndarray
    bias_fc: Optional[np.ndarray] = None
    degenerate: bool = False


def _kind_means(kind, fit, nuis):
    if not kind.is_gob:
        return gcomp_means(fit)
    d = nuis[kind.level]
    pred = predict_counterfactual(fit.design, d.shared, fit.link, d.shift)
    return gob_means(fit, pred, kind)


def _kind_if(kind, fit, means, mode, nuis):
    return estimator_if(fit, means, mode, nuisance=nuis.get(kind.level))


def run_replicate(trial: TrialData, config: SimConfig, rep: int = 0) -> ReplicateRecord:
    """Analyse one simulated trial with every working model and estimator."""
    kinds = config.estimator_kinds
    counts = config.adjusted_counts
    nc, nk, nv = len(counts), len(kinds), len(config.variance_modes)
    delta = np.full((nc, nk), np.nan)
    mu = np.full((nc, nk, 2), np.nan)
    var = np.full((nc, nk, nv), np.nan)
    fit_ok = np.zeros((nc, nk), dtype=bool)
    converged = np.zeros((nc, 2), dtype=bool)
    max_abs = np.full(nc, np.nan)
    separated = np.zeros(nc, dtype=bool)
    bias_fc = np.full((nc, 2), np.nan) if config.bias_diagnostic else None
    # with a constant outcome every variance estimate is zero up to rounding;
    # leave the variance cells NaN so summaries count them as non-positive
    degenerate = bool(np.ptp(trial.y) == 0)
    need = {k.method for k in kinds}
    if config.bias_diagnostic:
        need.add("firth")

    for ci, c in enumerate(counts):
        spec = WorkingModelSpec(mode=config.mode, link=LOGIT, covariates=tuple(range(c)))
        design = build_design(trial, spec)
        fits = {}
        nuis = {}
        for method in ("mle", "firth"):
            if method not in need and method != "mle":
                continue
            try:
                fitter = fit_mle if method == "mle" else fit_firth
                f = fitter(design, trial.y, LOGIT, tol=config.tol, max_iter=config.max_iter)
            except (TrialAdjustError, np.linalg.LinAlgError, FloatingPointError):
                continue
            fits[method] = f
            converged[ci, 0 if method == "mle" else 1] = f.converged
            if method == "mle":
                c1, c2 = debias_mle(f)
                nuis[method] = {"C1": c1, "C2": c2}
            else:
                c0, c1, c2 = debias_fc(f)
                nuis[method] = {"C0": c0, "C1": c1, "C2": c2}
        if "mle" in fits:
            rep_sep = fits["mle"].separation
            max_abs[ci] = rep_sep.max_abs_coef
            separated[ci] = rep_sep.flagged
        if config.bias_diagnostic and "firth" in fits:
            b = plugin_first_order_bias(fits["firth"])
            bias_fc[ci] = b.b1_1 + b.b1_2 + b.fc_extra

        for ki, kind in enumerate(kinds):
            fit = fits.get(kind.method)
            if fit is None:
                continue
            with np.errstate(all="ignore"):
                means = _kind_means(kind, fit, nuis[kind.method])
                eff = estimate_effect(means, "difference")
                if not np.isfinite(eff.delta):
                    continue
                delta[ci, ki] = eff.delta
                mu[ci, ki] = means.mu
                fit_ok[ci, ki] = True
                if degenerate:
                    continue
                for vi, mode in enumerate(config.variance_modes):
                    ifm = _kind_if(kind, fit, means, mode, nuis[kind.method])
                    var[ci, ki, vi] = vcov_contrast(vcov_from_if(ifm), eff)

    ud, uv = unadjusted_comparator(trial.y, trial.arm)
    ybar = np.array([trial.y[trial.arm == a].mean() for a in (1, 2)])
    return ReplicateRecord(
        rep=rep, delta=delta, mu=mu, var=var, fit_ok=fit_ok, converged=converged,
        max_abs_beta=max_abs, separated=separated, unadj_delta=ud, unadj_var=uv,
        ybar=ybar, bias_fc=bias_fc, degenerate=degenerate,
    )


def _run_chunk(args):
    config, reps = args
    out = []
    for r in reps:
        trial = generate_trial(config, replicate_rng(config.seed, r))
        out.append(run_replicate(trial, config, r))
    return out


def run_experiment(config: SimConfig, threads: Optional[int] = None, progress=None):
    """Run all replicates; returns records sorted by replicate index.

    ``threads > 1`` distributes contiguous replicate chunks over worker
    processes. The records are identical for any worker count.
    """
    threads = config.threads if threads is None else threads
    threads = max(1, int(threads))
    reps = list(range(config.reps))
    if threads == 1:
        records = []
        for r in reps:
            trial = generate_trial(config, replicate_rng(config.seed, r))
            records.append(run_replicate(trial, config, r))
            if progress is not None:
                progress(r + 1, config.reps)
        return records
    size = max(1, math.ceil(len(reps) / (threads * 4)))
    chunks = [reps[i:i + size] for i in range(0, len(reps), size)]
    records = []
    with ProcessPoolExecutor(max_workers=threads) as pool:
        for part in pool.map(_run_chunk, [(config, ch) for ch in chunks]):
            records.extend(part)
            if progress is not None:
                progress(len(records), config.reps)
    records.sort(key=lambda rec: rec.rep)
    return records


# ---------------------------------------------------------------------------
# summaries


@dataclass
class SimSummary:
    """Operating characteristics per (count, estimator, variance, test) cell.

    Percentages are stored as proportions; ``rows`` is a list of flat dicts.
    """

    config: dict
    truth: dict
    rows: list
    unadjusted: dict
    separation_rows: list = field(default_factory=list)

    def cell(self, count, kind, variance="adjusted", test="wald", rows=None):
        kind = EstimatorKind.parse(kind).value if not isinstance(kind, EstimatorKind) else kind.value
        for row in self.rows if rows is None else rows:
            if (row["count"] == count and row["estimator"] == kind
                    and row["variance"] == variance and row["test"] == test):
                return row
        raise KeyError((count, kind, variance, test))

    def separation_cell(self, count, kind, variance="adjusted", test="wald"):
        return self.cell(count, kind, variance, test, rows=self.separation_rows)

    def to_dict(self) -> dict:
        return {
            "config": self.config, "truth": self.truth, "unadjusted": self.unadjusted,
            "rows": self.rows, "separation_rows": self.separation_rows,
        }


def _stack(records, name):
    return np.stack([getattr(r, name) for r in records])


def _mean(x):
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    return float(x.mean()) if x.size else float("nan")


def _test_arrays(test, delta, v, n, null, level):
    if test == "wald":
        return wald_arrays(delta, v, null, level)
    return score_arrays(delta, v, n, null, level)


def _cells(config, records, delta_true, subset=None):
    kinds = config.estimator_kinds
    delta = _stack(records, "delta")
    mu = _stack(records, "mu")
    var = _stack(records, "var")
    ok = _stack(records, "fit_ok")
    udelta = np.array([r.unadj_delta for r in records])
    uvar = np.array([r.unadj_var for r in records])
    n = config.n
    rows = []
    for ci, c in enumerate(config.adjusted_counts):
        sel = np.ones(len(records), dtype=bool) if subset is None else subset[:, ci]
        for ki, kind in enumerate(kinds):
            d = delta[sel, ci, ki]
            valid_fit = ok[sel, ci, ki]
            base = {
                "count": int(c), "estimator": kind.value, "label": kind.label,
                "n_reps": int(sel.sum()),
            }
            dv = d[valid_fit]
            if dv.size == 0:
                raise EmptyCell(f"no valid replicate for {kind.label} at {c} covariates")
            bias = float(dv.mean() - delta_true)
            emp_se = float(dv.std(ddof=1)) if dv.size > 1 else float("nan")
            mu_v = mu[sel, ci, ki][valid_fit]
            for vi, mode in enumerate(config.variance_modes):
                v = var[sel, ci, ki, vi]
                good = valid_fit & np.isfinite(v) & (v > 0)
                re = 1.0 - v[good] / uvar[sel][good]
                for test in config.tests:
                    _, p0, _, _ = _test_arrays(test, d[good], v[good], n, config.null, config.level)
                    _, pt, lo, hi = _test_arrays(test, d[good], v[good], n, delta_true, config.level)
                    cover = (lo <= delta_true) & (delta_true <= hi)
                    row = dict(base)
                    row.update({
                        "variance": mode, "test": test,
                        "n_valid": int(good.sum()),
                        "excluded": int(sel.sum() - good.sum()),
                        "mean_delta": float(dv.mean()),
                        "bias": bias,
                        "relative_bias": bias / delta_true if delta_true != 0 else float("nan"),
                        "bias_mcse": emp_se / math.sqrt(dv.size) if dv.size > 1 else float("nan"),
                        "mean_mu1": float(mu_v[:, 0].mean()),
                        "mean_mu2": float(mu_v[:, 1].mean()),
                        "empirical_se": emp_se,
                        "mean_se": _mean(np.sqrt(v[good])),
                        "coverage": _mean(cover),
                        "power": _mean(p0 < config.alpha),
                        "type1_error": _mean(pt < config.alpha),
                        "relative_efficiency": _mean(re),
                    })
                    rows.append(row)
    un = {
        "mean_delta": float(udelta.mean()),
        "bias": float(udelta.mean() - delta_true),
        "empirical_se": float(udelta.std(ddof=1)) if udelta.size > 1 else float("nan"),
        "mean_se": _mean(np.sqrt(uvar)),
    }
    good = np.isfinite(uvar) & (uvar > 0)
    for test in config.tests:
        _, p0, _, _ = _test_arrays(test, udelta[good], uvar[good], n, config.null, config.level)
        _, pt, lo, hi = _test_arrays(test, udelta[good], uvar[good], n, delta_true, config.level)
        un[f"{test}_power"] = _mean(p0 < config.alpha)
        un[f"{test}_type1_error"] = _mean(pt < config.alpha)
        un[f"{test}_coverage"] = _mean((lo <= delta_true) & (delta_true <= hi))
    return rows, un


def separation_subset(records, top_fraction: float = 0.10) -> np.ndarray:
    """Boolean mask ``(reps, counts)`` of the top ``top_fraction`` by max ``|beta|``.

    Within each adjusted count the ``ceil(top_fraction * R)`` largest values
    are kept, together with every record tied with the smallest kept value.
    """
    vals = _stack(records, "max_abs_beta")
    mask = np.zeros(vals.shape, dtype=bool)
    for ci in range(vals.shape[1]):
        col = vals[:, ci]
        finite = np.isfinite(col)
        if not finite.any():
            continue
        m = max(1, math.ceil(round(top_fraction * finite.sum(), 9)))
        threshold = np.sort(col[finite])[::-1][m - 1]
        mask[:, ci] = finite & (col >= threshold)
    return mask


def summarize_experiment(records, config: SimConfig, top_fraction: float = 0.10) -> SimSummary:
    """Aggregate replicate records; the result depends only on the records."""
    if not records:
        raise EmptyCell("no replicate records")
    records = sorted(records, key=lambda r: r.rep)
    mu_true = true_means(config)
    delta_true = float(mu_true[1] - mu_true[0])
    rows, un = _cells(config, records, delta_true)
    sep_mask = separation_subset(records, top_fraction)
    sep_rows, _ = _cells(config, records, delta_true, subset=sep_mask)
    ybar = _stack(records, "ybar")
    truth = {
        "mu1": float(mu_true[0]), "mu2": float(mu_true[1]), "delta": delta_true,
        "mean_ybar1": float(ybar[:, 0].mean()), "mean_ybar2": float(ybar[:, 1].mean()),
        "reps": len(records),
    }
    conv = _stack(records, "converged")
    sep = _stack(records, "separated")
    un["mle_nonconverged"] = [float(1 - conv[:, ci, 0].mean()) for ci in range(conv.shape[1])]
    un["firth_nonconverged"] = [float(1 - conv[:, ci, 1].mean()) for ci in range(conv.shape[1])]
    un["separation_flagged"] = [float(sep[:, ci].mean()) for ci in range(sep.shape[1])]
    if records[0].bias_fc is not None:
        bias = _stack(records, "bias_fc")
        truth["plugin_bias_fc"] = [
            [_mean(bias[:, ci, a]) for a in range(2)] for ci in range(bias.shape[1])
        ]
    return SimSummary(config=config.to_dict(), truth=truth, rows=rows, unadjusted=un,
                      separation_rows=sep_rows)


def default_threads() -> int:
    env = os.environ.get("TRIAL_ADJUST_THREADS")
    return int(env) if env else 1
