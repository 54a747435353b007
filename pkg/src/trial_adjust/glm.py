"""Canonical-link GLM machinery used by the g-computation estimators.

Design construction for pooled and stratified working models, maximum
likelihood and Firth-corrected fitting, leverages, bread/meat matrices and the
per-observation influence vectors of the nuisance coefficients.

Stratified working models are represented as a single block design
``X_i = (I(A_i=1) Z_i, ..., I(A_i=k) Z_i)``. The per-arm fits are computed
separately and stacked, which gives the same coefficients, leverages and
influence values as fitting the block design jointly; every downstream formula
can then be written once for both modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from . import _kernels
from .errors import RankDeficient

__all__ = [
    "LinkFamily",
    "LOGIT",
    "POISSON",
    "TrialData",
    "WorkingModelSpec",
    "DesignMatrix",
    "FittedModel",
    "SeparationReport",
    "build_design",
    "fit_mle",
    "fit_firth",
    "fit",
    "hat_values",
    "bread_meat",
    "influence_beta",
    "detect_separation",
    "firth_adjustment",
]


# ---------------------------------------------------------------------------
# families


@dataclass(frozen=True)
class LinkFamily:
    """Binomial-logit or Poisson-log family (canonical links only)."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("logit", "poisson"):
            raise ValueError(f"unsupported family {self.kind!r}")

    @classmethod
    def from_name(cls, name: str) -> "LinkFamily":
        key = name.strip().lower()
        aliases = {"logit": "logit", "binomial": "logit", "logistic": "logit",
                   "poisson": "poisson", "log": "poisson"}
        if key not in aliases:
            raise ValueError(f"unknown family {name!r}")
        return cls(aliases[key])

    @property
    def code(self) -> int:
        return _kernels.LOGIT if self.kind == "logit" else _kernels.POISSON

    def mean(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind == "logit":
            return expit(eta)
        return np.exp(eta)

    def d1(self, eta):
        m = self.mean(eta)
        return m * (1.0 - m) if self.kind == "logit" else m

    def d2(self, eta):
        m = self.mean(eta)
        return m * (1.0 - m) * (1.0 - 2.0 * m) if self.kind == "logit" else m

    def ratio(self, m):
        """m''/m' written in terms of the mean: ``1 - 2m`` (logit) or ``1`` (log)."""
        m = np.asarray(m, dtype=float)
        return 1.0 - 2.0 * m if self.kind == "logit" else np.ones_like(m)

    def link(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "logit":
            return np.log(mu / (1.0 - mu))
        return np.log(mu)

    def check_outcome(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise ValueError("outcome contains non-finite values")
        if self.kind == "logit" and not np.all((y == 0.0) | (y == 1.0)):
            raise ValueError("logit family needs a 0/1 outcome")
        if self.kind == "poisson" and np.any(y < 0.0):
            raise ValueError("poisson family needs non-negative counts")


LOGIT = LinkFamily("logit")
POISSON = LinkFamily("poisson")


# ---------------------------------------------------------------------------
# data and model specification


@dataclass(frozen=True, eq=False)
class TrialData:
    """Outcome, arm label (``1..k``) and baseline covariates per subject."""

    y: np.ndarray
    arm: np.ndarray
    w: np.ndarray
    k: Optional[int] = None
    covariate_names: Optional[tuple] = None
    arm_labels: Optional[tuple] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        arm = np.asarray(self.arm)
        if arm.size and not np.all(arm == np.round(arm)):
            raise ValueError("arm labels must be integers 1..k")
        arm = arm.astype(np.int64)
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w.reshape(-1, 1) if w.size else np.empty((y.shape[0], 0))
        n = y.shape[0]
        if n == 0:
            raise ValueError("empty trial")
        if arm.shape != (n,) or w.shape[0] != n:
            raise ValueError("y, arm and w must have the same number of rows")
        if np.isnan(y).any() or np.isnan(w).any():
            raise ValueError("missing values are not allowed")
        k = int(arm.max()) if self.k is None else int(self.k)
        if arm.min() < 1 or arm.max() > k:
            raise ValueError(f"arm labels must lie in 1..{k}")
        counts = np.bincount(arm, minlength=k + 1)[1:]
        if np.any(counts < 1):
            raise ValueError("every arm needs at least one subject")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "arm", arm)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "k", k)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def q(self) -> int:
        return self.w.shape[1]

    @property
    def arm_counts(self) -> np.ndarray:
        return np.bincount(self.arm, minlength=self.k + 1)[1:]

    @property
    def pi_hat(self) -> np.ndarray:
        return self.arm_counts / self.n


@dataclass(frozen=True)
class WorkingModelSpec:
    """Which working model to fit.

    ``covariates`` are column indices into ``TrialData.w`` (``None`` = all).
    ``interactions`` adds arm-by-covariate columns and is only meaningful for
    pooled models.
    """

    mode: str = "pooled"
    link: LinkFamily = LOGIT
    covariates: Optional[tuple] = None
    interactions: bool = False

    def __post_init__(self):
        if self.mode not in ("pooled", "stratified"):
            raise ValueError(f"mode must be 'pooled' or 'stratified', got {self.mode!r}")
        if self.interactions and self.mode == "stratified":
            raise ValueError("interactions only apply to pooled working models")
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(int(c) for c in self.covariates))


def _pooled_rows(arm_idx, cov, k, interactions):
    n = arm_idx.shape[0]
    ind = (arm_idx[:, None] == np.arange(1, k)[None, :]).astype(float)
    parts = [np.ones((n, 1)), ind, cov]
    if interactions:
        for j in range(k - 1):
            parts.append(ind[:, j:j + 1] * cov)
    return np.hstack(parts)


def _stratified_rows(arm_idx, z, k):
    n, pa = z.shape
    x = np.zeros((n, k * pa))
    for a in range(k):
        rows = arm_idx == a
        x[rows, a * pa:(a + 1) * pa] = z[rows]
    return x


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Model matrix plus a builder for counterfactual rows ``X_{i|a}``.

    ``arm_index`` is the zero-based arm code per row. For stratified designs
    ``blocks[a]`` is the column slice of arm ``a + 1``.
    """

    x: np.ndarray
    roles: tuple
    arm_index: np.ndarray
    k: int
    mode: str
    covariates: np.ndarray
    interactions: bool = False
    blocks: Optional[tuple] = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def p_arm(self) -> Optional[int]:
        """Columns per arm in a stratified design."""
        if self.blocks is None:
            return None
        return self.blocks[0].stop - self.blocks[0].start

    def counterfactual(self, a: int) -> np.ndarray:
        """``X_{i|a}`` for every row, with arms labelled ``1..k``."""
        if not 1 <= a <= self.k:
            raise ValueError(f"arm {a} outside 1..{self.k}")
        idx = np.full(self.n, a - 1, dtype=np.int64)
        return self._rows(idx)

    def _rows(self, arm_idx):
        if self.mode == "pooled":
            return _pooled_rows(arm_idx, self.covariates, self.k, self.interactions)
        z = np.hstack([np.ones((arm_idx.shape[0], 1)), self.covariates])
        return _stratified_rows(arm_idx, z, self.k)

    def stratum(self, a: int):
        """Row mask and per-arm design ``Z`` (intercept + covariates) of arm ``a``."""
        if self.mode != "stratified":
            raise ValueError("stratum() is only defined for stratified designs")
        rows = self.arm_index == a - 1
        return rows, self.x[rows][:, self.blocks[a - 1]]

    @property
    def intercept_columns(self) -> np.ndarray:
        return np.array([r == "intercept" for r in self.roles])


def build_design(data: TrialData, spec: WorkingModelSpec) -> DesignMatrix:
    """Build the pooled or stratified model matrix for ``data``.

    Pooled columns are an intercept, ``k - 1`` arm indicators (arm 1 is the
    reference), the selected covariates and, optionally, indicator-by-covariate
    interactions. Stratified designs stack ``1 + q_sel`` columns per arm.
    """
    sel = range(data.q) if spec.covariates is None else spec.covariates
    sel = list(sel)
    for c in sel:
        if not 0 <= c < data.q:
            raise ValueError(f"covariate index {c} outside 0..{data.q - 1}")
    cov = data.w[:, sel] if sel else np.empty((data.n, 0))
    arm_idx = data.arm - 1
    k = data.k
    qs = len(sel)
    if spec.mode == "pooled":
        x = _pooled_rows(arm_idx, cov, k, spec.interactions)
        roles = ["intercept"] + ["arm"] * (k - 1) + ["covariate"] * qs
        if spec.interactions:
            roles += ["interaction"] * (qs * (k - 1))
        blocks = None
    else:
        z = np.hstack([np.ones((data.n, 1)), cov])
        x = _stratified_rows(arm_idx, z, k)
        roles = (["intercept"] + ["covariate"] * qs) * k
        pa = 1 + qs
        blocks = tuple(slice(a * pa, (a + 1) * pa) for a in range(k))
    return DesignMatrix(
        x=x, roles=tuple(roles), arm_index=arm_idx, k=k, mode=spec.mode,
        covariates=cov, interactions=spec.interactions, blocks=blocks,
    )


# ---------------------------------------------------------------------------
# fitted model


@dataclass(frozen=True)
class SeparationReport:
    flagged: bool
    max_abs_coef: float
    boundary_fraction: float


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Nuisance fit and the byproducts the estimators need.

    ``bread`` is ``n^{-1} sum m'_i X_i X_i^T``; ``if_beta`` holds the rows
    ``bread^{-1} X_i (Y_i - m_i)``.
    """

    beta: np.ndarray
    fitted: np.ndarray
    hat: np.ndarray
    bread: np.ndarray
    bread_inv: np.ndarray
    meat: np.ndarray
    if_beta: np.ndarray
    method: str
    converged: bool
    iterations: int
    status: str
    separation: SeparationReport
    design: DesignMatrix = field(repr=False)
    y: np.ndarray = field(repr=False)
    link: LinkFamily = LOGIT

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    def eta(self, a: Optional[int] = None) -> np.ndarray:
        """Linear predictor on the observed rows, or counterfactually under arm ``a``."""
        x = self.design.x if a is None else self.design.counterfactual(a)
        return x @ self.beta


_STATUS = {
    _kernels.CONVERGED: "converged",
    _kernels.MAX_ITER: "max_iter",
    _kernels.SINGULAR: "singular",
    _kernels.DIVERGING: "diverging",
    _kernels.STALLED: "stalled",
}

# Working weights spanning more than this many orders of magnitude mean some fitted
# means sit numerically on the boundary of the outcome space: the information matrix is
# then degenerate and a finite maximiser does not exist.
WEIGHT_SPAN_LIMIT = 1e-12


def _start(x, y, link, roles):
    beta = np.zeros(x.shape[1])
    ybar = float(np.mean(y))
    if link.kind == "logit":
        start = link.link(np.clip(ybar, 1e-6, 1.0 - 1e-6))
    else:
        start = np.log(max(ybar, 1e-6))
    for j, r in enumerate(roles):
        if r == "intercept":
            beta[j] = start
    return beta


def _run_kernel(x, y, link, firth, roles, tol, max_iter):
    x = np.ascontiguousarray(x, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    beta0 = _start(x, y, link, roles)
    beta, iterations, status = _kernels.newton(
        x, y, link.code, bool(firth), beta0, float(tol), int(max_iter)
    )
    if status == _kernels.SINGULAR and iterations == 0:
        raise RankDeficient(
            f"design with {x.shape[1]} columns is rank deficient on {x.shape[0]} rows"
        )
    beta = np.asarray(beta)
    if not firth and status == _kernels.CONVERGED:
        wts = link.d1(x @ beta)
        if wts.min() < WEIGHT_SPAN_LIMIT * wts.max():
            status = _kernels.DIVERGING
    return beta, int(iterations), int(status)


def _fit(design, y, link, firth, tol, max_iter):
    y = np.asarray(y, dtype=float)
    if y.shape != (design.n,):
        raise ValueError("outcome length does not match the design")
    link.check_outcome(y)
    if design.blocks is None:
        beta, iterations, status = _run_kernel(
            design.x, y, link, firth, design.roles, tol, max_iter
        )
        statuses = [status]
    else:
        beta = np.zeros(design.p)
        iterations = 0
        statuses = []
        for a in range(1, design.k + 1):
            rows, z = design.stratum(a)
            blk = design.blocks[a - 1]
            b, it, st = _run_kernel(z, y[rows], link, firth, design.roles[blk], tol, max_iter)
            beta[blk] = b
            iterations = max(iterations, it)
            statuses.append(st)
    bad = [s for s in statuses if s != _kernels.CONVERGED]
    status = _STATUS[bad[0]] if bad else "converged"
    return _assemble(design, y, link, beta, "firth" if firth else "mle",
                     not bad, iterations, status)


def fit_mle(design: DesignMatrix, y, link: LinkFamily = LOGIT, tol: float = 1e-6,
            max_iter: int = 500) -> FittedModel:
    """Maximum-likelihood fit of the canonical GLM.

    Fits that never satisfy the coefficient-change criterion (typically
    separated binary data) are returned at the iterate where the deviance
    stalled, with ``converged=False``; no exception is raised.
    """
    return _fit(design, y, link, False, tol, max_iter)


def fit_firth(design: DesignMatrix, y, link: LinkFamily = LOGIT, tol: float = 1e-6,
              max_iter: int = 500) -> FittedModel:
    """Firth-corrected fit: solves ``sum U_i(beta) + Delta(beta) = 0``."""
    return _fit(design, y, link, True, tol, max_iter)


def fit(design: DesignMatrix, y, link: LinkFamily = LOGIT, method: str = "mle",
        **opts) -> FittedModel:
    if method == "mle":
        return fit_mle(design, y, link, **opts)
    if method == "firth":
        return fit_firth(design, y, link, **opts)
    raise ValueError(f"unknown fitting method {method!r}")


# ---------------------------------------------------------------------------
# byproducts


def _information(x, wts):
    return x.T @ (x * wts[:, None])


def _inverse(mat, blocks=None):
    if blocks is None:
        try:
            return np.linalg.inv(mat)
        except np.linalg.LinAlgError:
            return np.linalg.pinv(mat)
    out = np.zeros_like(mat)
    for blk in blocks:
        out[blk, blk] = _inverse(mat[blk, blk])
    return out


def _hat(x, wts, blocks=None):
    info = _information(x, wts)
    try:
        L = np.linalg.cholesky(info)
        q = solve_triangular(L, (x * np.sqrt(wts)[:, None]).T, lower=True,
                             check_finite=False)
        return np.sum(q * q, axis=0)
    except np.linalg.LinAlgError:
        inv = _inverse(info, blocks)
        return wts * np.einsum("ij,jk,ik->i", x, inv, x)


def hat_values(design: DesignMatrix, beta, link: LinkFamily = LOGIT) -> np.ndarray:
    """Leverages ``h_ii = m'_i X_i^T (sum_j m'_j X_j X_j^T)^{-1} X_i``."""
    beta = np.asarray(beta, dtype=float)
    wts = link.d1(design.x @ beta)
    info = _information(design.x, wts)
    if not _kernels.cholesky(np.ascontiguousarray(info), _kernels.RANK_TOL)[1]:
        raise RankDeficient("weighted information matrix is singular")
    return _hat(design.x, wts, design.blocks)


def bread_meat(design: DesignMatrix, beta, link: LinkFamily, y):
    """Return ``(B, B^{-1}, M)`` evaluated at ``beta``."""
    beta = np.asarray(beta, dtype=float)
    y = np.asarray(y, dtype=float)
    x = design.x
    n = design.n
    eta = x @ beta
    wts = link.d1(eta)
    bread = _information(x, wts) / n
    if not _kernels.cholesky(np.ascontiguousarray(bread), _kernels.RANK_TOL)[1]:
        raise RankDeficient("bread matrix is singular")
    resid = y - link.mean(eta)
    meat = _information(x, resid * resid) / n
    return bread, _inverse(bread, design.blocks), meat


def influence_beta(fitted: FittedModel, design: Optional[DesignMatrix] = None) -> np.ndarray:
    """Rows ``B^{-1} X_i (Y_i - m_i)`` of the nuisance influence matrix."""
    design = fitted.design if design is None else design
    resid = fitted.y - fitted.fitted
    return (design.x * resid[:, None]) @ fitted.bread_inv


def firth_adjustment(design: DesignMatrix, beta, link: LinkFamily = LOGIT,
                     hat: Optional[np.ndarray] = None) -> np.ndarray:
    """``Delta(beta) = 1/2 sum_i h_ii (m''/m')_i X_i``."""
    beta = np.asarray(beta, dtype=float)
    if hat is None:
        hat = hat_values(design, beta, link)
    m = link.mean(design.x @ beta)
    return 0.5 * design.x.T @ (hat * link.ratio(m))


def detect_separation(fitted, coef_cutoff: float = 10.0, prob_eps: float = 1e-8,
                      boundary_cutoff: float = 0.95) -> SeparationReport:
    """Heuristic separation check on a fit.

    The largest absolute non-intercept coefficient is compared against
    ``coef_cutoff``; for binomial fits the share of fitted means within
    ``prob_eps`` of 0 or 1 is compared against ``boundary_cutoff``. Firth fits
    always exist, so they are reported but never flagged.
    """
    beta = np.asarray(fitted.beta, dtype=float)
    roles = getattr(getattr(fitted, "design", None), "roles", None)
    if roles is not None and len(roles) == beta.shape[0]:
        keep = np.array([r != "intercept" for r in roles])
        coefs = beta[keep] if keep.any() else beta
    else:
        coefs = beta
    max_abs = float(np.max(np.abs(coefs))) if coefs.size else 0.0
    link = getattr(fitted, "link", LOGIT)
    if link.kind == "logit":
        m = np.asarray(fitted.fitted, dtype=float)
        boundary = float(np.mean((m < prob_eps) | (m > 1.0 - prob_eps)))
    else:
        boundary = 0.0
    flagged = (max_abs > coef_cutoff or boundary > boundary_cutoff)
    flagged = bool(flagged and getattr(fitted, "method", "mle") == "mle")
    return SeparationReport(flagged=flagged, max_abs_coef=max_abs, boundary_fraction=boundary)


def _assemble(design, y, link, beta, method, converged, iterations, status):
    x = design.x
    n = design.n
    eta = x @ beta
    m = link.mean(eta)
    wts = link.d1(eta)
    info = _information(x, wts)
    bread = info / n
    bread_inv = _inverse(bread, design.blocks)
    hat = _hat(x, wts, design.blocks)
    resid = y - m
    meat = _information(x, resid * resid) / n
    if_beta = (x * resid[:, None]) @ bread_inv
    partial = FittedModel(
        beta=beta, fitted=m, hat=hat, bread=bread, bread_inv=bread_inv, meat=meat,
        if_beta=if_beta, method=method, converged=converged, iterations=iterations,
        status=status, separation=SeparationReport(False, 0.0, 0.0),
        design=design, y=y, link=link,
    )
    object.__setattr__(partial, "separation", detect_separation(partial))
    return partial


def stack_arms(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Column-stack per-arm vectors into an ``n x k`` matrix."""
    return np.column_stack(arrays)
