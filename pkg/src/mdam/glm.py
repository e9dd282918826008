"""Maximum-likelihood logistic, baseline-category multinomial and linear models.

Model terms are described by :class:`DesignSpec`, which turns survey columns
into a design matrix. :class:`GLM` fits by Newton-Raphson with step halving
and exposes the inverse observed information as the coefficient covariance,
so approximate posterior draws are a single normal draw.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit, logsumexp
from sklearn.base import BaseEstimator

from .dataset import CATEGORICAL, CONTINUOUS, VariableSpec

LOGISTIC = "logistic"
MULTINOMIAL = "multinomial"
LINEAR = "linear"
FAMILIES = (LOGISTIC, MULTINOMIAL, LINEAR)

WEIGHT = "@weight"


class GlmError(RuntimeError):
    """Fitting failed (rank deficiency, non-convergence, bad input)."""


class SeparationWarning(UserWarning):
    """A coefficient diverged and a small ridge penalty was added."""


@dataclass(frozen=True)
class Term:
    """One predictor term.

    ``kind`` is one of ``main`` (value of ``var``, or m-1 level indicators
    for a categorical), ``level`` (indicator ``var == level``), ``interaction``
    (product of the indicators in ``pairs``), ``missing`` (item-missing
    indicator of ``var``) and ``weight`` (the analysis weight).
    """

    kind: str
    var: str | None = None
    level: int | None = None
    pairs: tuple[tuple[str, int], ...] = ()

    def variables(self) -> set[str]:
        if self.kind == "interaction":
            return {v for v, _ in self.pairs}
        if self.kind in ("main", "level"):
            return {self.var}
        return set()

    def __str__(self):
        if self.kind == "main":
            return self.var
        if self.kind == "level":
            return f"{self.var}={self.level}"
        if self.kind == "interaction":
            return ":".join(f"{v}={c}" for v, c in self.pairs)
        if self.kind == "missing":
            return f"R({self.var})"
        return WEIGHT


_LEVEL = re.compile(r"^\s*([^=:\s]+)\s*=\s*(-?\d+)\s*$")


def parse_term(text: str, schema: Sequence[VariableSpec] | None = None) -> list[Term]:
    """Parse the config spelling of a term.

    ``X1`` main effect, ``E=2`` level indicator, ``S=1:E=2`` interaction of
    indicators, ``S:E`` all non-base indicator products, ``R(X2)`` response
    indicator, ``@weight`` analysis weight.
    """
    text = text.strip()
    if text == WEIGHT:
        return [Term("weight")]
    m = re.fullmatch(r"R\((.+)\)", text)
    if m:
        return [Term("missing", var=m.group(1).strip())]
    if ":" in text:
        parts = [p.strip() for p in text.split(":")]
        if all(_LEVEL.match(p) for p in parts):
            pairs = tuple((_LEVEL.match(p).group(1), int(_LEVEL.match(p).group(2))) for p in parts)
            return [Term("interaction", pairs=pairs)]
        if len(parts) != 2 or schema is None:
            raise ValueError(f"cannot parse interaction {text!r}")
        specs = {v.name: v for v in schema}
        unknown = [p for p in parts if p not in specs]
        if unknown:
            raise ValueError(f"unknown variable(s) {unknown} in {text!r}")
        a, b = (specs[p] for p in parts)
        return [
            Term("interaction", pairs=((a.name, ca), (b.name, cb)))
            for ca in a.codes[1:]
            for cb in b.codes[1:]
        ]
    m = _LEVEL.match(text)
    if m:
        return [Term("level", var=m.group(1), level=int(m.group(2)))]
    if schema is not None and text not in {v.name for v in schema}:
        raise ValueError(f"unknown variable {text!r}")
    return [Term("main", var=text)]


@dataclass(frozen=True)
class DesignSpec:
    """Response variable plus predictor terms."""

    response: str
    terms: tuple[Term, ...] = ()
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))

    @classmethod
    def from_strings(cls, response, terms, schema=None, intercept=True):
        out = []
        for t in terms:
            out.extend(parse_term(t, schema) if isinstance(t, str) else [t])
        return cls(response, tuple(out), intercept)

    def predictor_variables(self) -> set[str]:
        out = set()
        for t in self.terms:
            out |= t.variables()
        return out

    def uses_missing_indicator(self, name: str) -> bool:
        return any(t.kind == "missing" and t.var == name for t in self.terms)

    def column_names(self, schema: Sequence[VariableSpec]) -> list[str]:
        specs = {v.name: v for v in schema}
        names = ["(intercept)"] if self.intercept else []
        for t in self.terms:
            if t.kind == "main" and specs[t.var].kind == CATEGORICAL:
                names.extend(f"{t.var}={c}" for c in specs[t.var].codes[1:])
            else:
                names.append(str(t))
        return names

    def validate(self, schema: Sequence[VariableSpec]) -> None:
        specs = {v.name: v for v in schema}
        if self.response not in specs:
            raise ValueError(f"unknown response {self.response!r}")
        for t in self.terms:
            names = t.variables() | ({t.var} if t.kind == "missing" else set())
            for name in names:
                if name not in specs:
                    raise ValueError(f"term {t} references unknown variable {name!r}")
            if t.kind == "level" and t.level not in specs[t.var].codes:
                raise ValueError(f"term {t}: level not in {specs[t.var].codes}")
            for v, c in t.pairs:
                if c not in specs[v].codes:
                    raise ValueError(f"term {t}: level {c} not in {specs[v].codes}")


def design_matrix(
    spec: DesignSpec,
    schema: Sequence[VariableSpec],
    values: np.ndarray,
    mask: np.ndarray | None = None,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Design matrix of ``spec`` for the rows of ``values`` (n, k)."""
    values = np.atleast_2d(values)
    n = values.shape[0]
    idx = {v.name: j for j, v in enumerate(schema)}
    cols = []
    if spec.intercept:
        cols.append(np.ones(n))
    for t in spec.terms:
        if t.kind == "main":
            var = schema[idx[t.var]]
            x = values[:, idx[t.var]]
            if var.kind == CATEGORICAL:
                cols.extend((x == c).astype(float) for c in var.codes[1:])
            else:
                cols.append(x)
        elif t.kind == "level":
            cols.append((values[:, idx[t.var]] == t.level).astype(float))
        elif t.kind == "interaction":
            col = np.ones(n)
            for v, c in t.pairs:
                col = col * (values[:, idx[v]] == c)
            cols.append(col)
        elif t.kind == "missing":
            if mask is None:
                raise ValueError(f"term {t} needs the item mask")
            cols.append(np.atleast_2d(mask)[:, idx[t.var]].astype(float))
        elif t.kind == "weight":
            if weights is None:
                raise ValueError("weight term needs weights")
            cols.append(np.broadcast_to(np.asarray(weights, dtype=float), (n,)))
        else:
            raise ValueError(f"unknown term kind {t.kind!r}")
    if not cols:
        return np.empty((n, 0))
    return np.column_stack(cols)


def family_for(var: VariableSpec) -> str:
    if var.kind == CONTINUOUS:
        return LINEAR
    return LOGISTIC if var.n_levels == 2 else MULTINOMIAL


# log-likelihood pieces; every function returns (loglik, gradient, hessian)


def _logistic_parts(X, y, beta):
    eta = X @ beta
    ll = float(np.sum(y * eta + log_expit(-eta)))
    p = expit(eta)
    grad = X.T @ (y - p)
    hess = -(X.T * (p * (1 - p))) @ X
    return ll, grad, hess


def _multinomial_parts(X, y, beta, m):
    n, p = X.shape
    B = beta.reshape(m - 1, p)
    eta = np.column_stack([np.zeros(n), X @ B.T])
    lse = logsumexp(eta, axis=1)
    ll = float(np.sum(eta[np.arange(n), y] - lse))
    P = np.exp(eta - lse[:, None])[:, 1:]
    Y = np.zeros((n, m - 1))
    rows = y > 0
    Y[np.flatnonzero(rows), y[rows] - 1] = 1.0
    grad = (X.T @ (Y - P)).T.reshape(-1)
    hess = np.empty(((m - 1) * p, (m - 1) * p))
    for e in range(m - 1):
        for f in range(e, m - 1):
            wgt = P[:, e] * ((e == f) - P[:, f])
            block = -(X.T * wgt) @ X
            hess[e * p:(e + 1) * p, f * p:(f + 1) * p] = block
            hess[f * p:(f + 1) * p, e * p:(e + 1) * p] = block.T
    return ll, grad, hess


class GLM(BaseEstimator):
    """Logistic, baseline-category multinomial, or Gaussian linear regression.

    Parameters
    ----------
    family : {"logistic", "multinomial", "linear"}
    max_iter : int
        Newton iterations before giving up.
    tol : float
        Convergence when the relative change in log-likelihood drops
        below ``tol``.
    separation_bound : float
        When any |coefficient| exceeds this during fitting, an L2 penalty of
        ``ridge`` is added and a :class:`SeparationWarning` is issued.
    ridge : float

    Attributes
    ----------
    coef_ : ndarray
        Flat coefficients. For the multinomial family the blocks for levels
        2..m are stacked, each of length ``n_features_in_``; level 1 is the
        baseline.
    covariance_ : ndarray
        Inverse observed information (OLS covariance for ``linear``).
    residual_sd_ : float
        Residual standard deviation (``linear`` only).
    n_levels_ : int
    converged_ : bool
    penalized_ : bool
    n_iter_ : int
    """

    def __init__(self, family=LOGISTIC, max_iter=50, tol=1e-9, separation_bound=15.0, ridge=1e-4):
        self.family = family
        self.max_iter = max_iter
        self.tol = tol
        self.separation_bound = separation_bound
        self.ridge = ridge

    def fit(self, X, y, n_levels=None, coef_init=None):
        """Fit on complete rows.

        ``y`` holds 0/1 for logistic, level indices ``0..m-1`` for
        multinomial, reals for linear. ``coef_init`` warm-starts Newton.
        """
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        X = np.asarray(X, dtype=float)
        y = np.asarray(y)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError("X must be (n, p) and y (n,)")
        n, p = X.shape
        if not np.all(np.isfinite(X)):
            raise GlmError("design matrix has non-finite entries")
        if n < p + 1:
            raise GlmError(f"need at least p+1 = {p + 1} rows, got {n}")
        if p and np.linalg.matrix_rank(X) < p:
            raise GlmError("rank-deficient design")
        self.n_features_in_ = p
        self.penalized_ = False
        if self.family == LINEAR:
            self._fit_linear(X, y.astype(float))
        else:
            if self.family == LOGISTIC:
                m = 2
            else:
                m = int(n_levels if n_levels is not None else y.max() + 1)
                if m < 2:
                    raise GlmError("multinomial needs at least 2 levels")
            y = y.astype(np.int64)
            if y.min() < 0 or y.max() >= m:
                raise GlmError("response outside level range")
            self.n_levels_ = m
            self._fit_newton(X, y, m, coef_init)
        return self

    def _fit_linear(self, X, y):
        n, p = X.shape
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ coef
        rss = float(resid @ resid)
        sigma2 = rss / (n - p)
        self.coef_ = coef
        self.residual_sd_ = float(np.sqrt(sigma2))
        self.covariance_ = sigma2 * np.linalg.inv(X.T @ X)
        self.n_levels_ = 0
        self.converged_ = True
        self.n_iter_ = 1
        self.loglik_ = float(-0.5 * n * np.log(2 * np.pi * max(rss / n, 1e-300)) - 0.5 * n)

    def _parts(self, X, y, m, beta, lam):
        if m == 2:
            ll, g, H = _logistic_parts(X, y, beta)
        else:
            ll, g, H = _multinomial_parts(X, y, beta, m)
        if lam:
            ll -= 0.5 * lam * float(beta @ beta)
            g = g - lam * beta
            H = H - lam * np.eye(len(beta))
        return ll, g, H

    def _fit_newton(self, X, y, m, coef_init):
        n, p = X.shape
        size = (m - 1) * p
        beta = np.zeros(size) if coef_init is None else np.array(coef_init, dtype=float)
        if beta.shape != (size,):
            raise ValueError(f"coef_init must have length {size}")
        lam = 0.0
        ll, g, H = self._parts(X, y, m, beta, lam)
        converged = False
        it = 0
        for it in range(1, self.max_iter + 1):
            try:
                step = np.linalg.solve(-H, g)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(-H, g, rcond=None)[0]
            t = 1.0
            for _ in range(40):
                cand = beta + t * step
                ll_new, g_new, H_new = self._parts(X, y, m, cand, lam)
                if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                    break
                t *= 0.5
            else:
                break
            change = abs(ll_new - ll)
            beta, ll, g, H = cand, ll_new, g_new, H_new
            if not lam and np.max(np.abs(beta)) > self.separation_bound:
                lam = self.ridge
                self.penalized_ = True
                warnings.warn(
                    f"coefficient exceeded {self.separation_bound:g}; "
                    f"adding ridge {self.ridge:g} (separation)",
                    SeparationWarning,
                    stacklevel=3,
                )
                ll, g, H = self._parts(X, y, m, beta, lam)
                continue
            if change <= self.tol * (abs(ll) + 1e-8):
                converged = True
                break
        self.n_iter_ = it
        self.converged_ = converged
        if not converged:
            raise GlmError(f"no convergence after {self.max_iter} iterations")
        self.coef_ = beta
        self.loglik_ = ll
        self.penalty_ = lam
        try:
            cov = np.linalg.inv(-H)
        except np.linalg.LinAlgError:
            cov = np.linalg.pinv(-H)
        self.covariance_ = 0.5 * (cov + cov.T)
        self.residual_sd_ = None

    # --- evaluation -------------------------------------------------------

    def coef_blocks(self, coef=None) -> np.ndarray:
        """Coefficients as (m-1, p) for multinomial, (1, p) otherwise."""
        coef = self.coef_ if coef is None else np.asarray(coef)
        return coef.reshape(-1, self.n_features_in_)

    def linear_predictor(self, X, coef=None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        B = self.coef_blocks(coef)
        eta = X @ B.T
        return eta[:, 0] if self.family != MULTINOMIAL else eta

    def predict_proba(self, X, coef=None) -> np.ndarray:
        """Logistic: P(y=1) (n,). Multinomial: (n, m) with level 1 as base."""
        eta = self.linear_predictor(X, coef)
        if self.family == LOGISTIC:
            return expit(eta)
        if self.family == MULTINOMIAL:
            full = np.column_stack([np.zeros(eta.shape[0]), eta])
            return np.exp(full - logsumexp(full, axis=1)[:, None])
        raise ValueError("predict_proba is undefined for the linear family")

    def predict(self, X, coef=None) -> np.ndarray:
        """Conditional mean: probabilities for discrete families, mean for linear."""
        if self.family == LINEAR:
            return self.linear_predictor(X, coef)
        return self.predict_proba(X, coef)

    def loglik(self, X, y, coef=None) -> float:
        """Unpenalized log-likelihood (discrete families)."""
        coef = self.coef_ if coef is None else np.asarray(coef, dtype=float)
        X = np.asarray(X, dtype=float)
        if self.family == LOGISTIC:
            return _logistic_parts(X, np.asarray(y, float), coef)[0]
        if self.family == MULTINOMIAL:
            return _multinomial_parts(X, np.asarray(y, np.int64), coef, self.n_levels_)[0]
        resid = np.asarray(y, float) - X @ coef
        s = self.residual_sd_
        return float(np.sum(-0.5 * np.log(2 * np.pi * s * s) - 0.5 * resid**2 / (s * s)))

    def score(self, X, y, coef=None) -> np.ndarray:
        """Gradient of the (penalized, if a ridge was added) log-likelihood."""
        coef = self.coef_ if coef is None else np.asarray(coef, dtype=float)
        X = np.asarray(X, dtype=float)
        if self.family == LINEAR:
            return X.T @ (np.asarray(y, float) - X @ coef)
        m = self.n_levels_
        yy = np.asarray(y, np.int64 if m > 2 else float)
        return self._parts(X, yy, m, coef, getattr(self, "penalty_", 0.0))[1]

    # --- posterior-style draws -------------------------------------------

    def _sqrt_cov(self) -> np.ndarray:
        root = getattr(self, "_root", None)
        if root is not None:
            return root
        cov = np.asarray(self.covariance_, dtype=float)
        scale = max(float(np.max(np.abs(np.diag(cov)))) if cov.size else 0.0, 1e-300)
        jitter = 0.0
        for _ in range(60):
            try:
                vals, vecs = np.linalg.eigh(cov + jitter * np.eye(len(cov)))
                if np.all(np.isfinite(vals)):
                    break
            except np.linalg.LinAlgError:
                pass
            jitter = 1e-8 * scale if jitter == 0 else jitter * 10
        else:
            raise GlmError("covariance cannot be factorized")
        vals = np.clip(vals, 0.0, None)
        if getattr(self, "penalized_", False):
            # under separation the curvature at the penalized mode is nearly
            # flat; cap the spread so draws stay on the side the data support
            vals = np.minimum(vals, (self.separation_bound / 4.0) ** 2)
        root = (vecs * np.sqrt(vals)) @ vecs.T
        self._root = root
        return root

    def draw_coefficients(self, rng) -> np.ndarray:
        """One draw from Normal(coef_, covariance_) via a symmetric square root.

        For penalized (separated) fits every eigen-direction's sd is capped
        at ``separation_bound / 4``.
        """
        if not getattr(self, "converged_", False):
            raise GlmError("model is not fitted/converged")
        z = rng.standard_normal(len(self.coef_))
        return self.coef_ + self._sqrt_cov() @ z

    def draw_sigma(self, rng, n_obs: int) -> float:
        """Residual sd draw, sigma^2 ~ RSS / chi2(n - p) (linear family)."""
        df = n_obs - self.n_features_in_
        rss = self.residual_sd_**2 * df
        return float(np.sqrt(rss / rng.chisquare(df)))


FittedGlm = GLM


def response_vector(var: VariableSpec, column: np.ndarray) -> np.ndarray:
    """Response in the form :meth:`GLM.fit` expects."""
    if var.kind == CONTINUOUS:
        return np.asarray(column, dtype=float)
    return var.code_index(column)


def fit(
    spec: DesignSpec,
    schema: Sequence[VariableSpec],
    values: np.ndarray,
    mask: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    family: str | None = None,
    coef_init=None,
    **glm_params,
) -> GLM:
    """Fit ``spec`` on the supplied complete rows."""
    idx = {v.name: j for j, v in enumerate(schema)}
    var = schema[idx[spec.response]]
    family = family or family_for(var)
    X = design_matrix(spec, schema, values, mask, weights)
    y = response_vector(var, np.atleast_2d(values)[:, idx[spec.response]])
    model = GLM(family=family, **glm_params)
    model.fit(X, y, n_levels=var.n_levels or None, coef_init=coef_init)
    model.design_ = spec
    return model


def draw_coefficients(model: GLM, rng) -> np.ndarray:
    return model.draw_coefficients(rng)


def predict(model: GLM, X, coef=None) -> np.ndarray:
    return model.predict(X, coef)
