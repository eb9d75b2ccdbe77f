"""
Ordinary least squares for the stratum models.

Fits go through a QR factorisation of the design; (X'X)^-1 is formed from
the triangular factor, never by inverting X'X.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10


class RegressionError(ValueError):
    """Regression cannot be fitted"""


class RankDeficientError(RegressionError):
    pass


class InsufficientObservationsError(RegressionError):
    pass


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    column_names: tuple

    @classmethod
    def build(cls, exposure, mediators=None, mediator_names=None):
        """Intercept, then mediator columns (if any), then the exposure indicator."""
        exposure = np.asarray(exposure, dtype=float)
        columns = [np.ones_like(exposure)]
        names = ["intercept"]
        if mediators is not None:
            mediators = np.asarray(mediators, dtype=float)
            if mediators.ndim == 1:
                mediators = mediators[:, None]
            columns.extend(mediators.T)
            names.extend(mediator_names or [f"M{k + 1}" for k in range(mediators.shape[1])])
        columns.append(exposure)
        names.append("exposure")
        return cls(values=np.column_stack(columns), column_names=tuple(names))

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def p(self):
        return self.values.shape[1]

    def index(self, name):
        return self.column_names.index(name)


@dataclass(frozen=True)
class OlsFit:
    coefficients: np.ndarray
    coef_covariance: np.ndarray
    residual_variance: float
    dof: int
    residuals: np.ndarray
    column_names: tuple

    def coef(self, name):
        return self.coefficients[self.column_names.index(name)]


@dataclass(frozen=True)
class MvOlsFit:
    """Columnwise OLS sharing one design; cov(b[i, k], b[j, l]) = xtx_inv[i, j] * residual_covariance[k, l]."""

    coefficients: np.ndarray
    residual_covariance: np.ndarray
    xtx_inv: np.ndarray
    dof: int
    residuals: np.ndarray
    column_names: tuple

    def coefficient_covariance(self, row_a, row_b=None):
        """J x J covariance between the coefficient rows ``row_a`` and ``row_b`` across responses."""
        row_b = row_a if row_b is None else row_b
        return self.xtx_inv[row_a, row_b] * self.residual_covariance


def _factorise(design):
    x = design.values
    n, p = x.shape
    if n <= p:
        raise InsufficientObservationsError(f"{n} observations for {p} coefficients")

    singular = np.linalg.svd(x, compute_uv=False)
    if singular[-1] < RANK_TOL * singular[0]:
        raise RankDeficientError(
            f"design is rank deficient (smallest/largest singular value {singular[-1] / singular[0]:.2e})"
        )

    q, r = np.linalg.qr(x)
    r_inv = solve_triangular(r, np.eye(p))
    return q, r, r_inv @ r_inv.T


def _solve(q, r, y):
    return solve_triangular(r, q.T @ y)


def ols_fit(design, response):
    response = np.asarray(response, dtype=float)
    q, r, xtx_inv = _factorise(design)

    coefficients = _solve(q, r, response)
    residuals = response - design.values @ coefficients
    dof = design.n - design.p
    s2 = float(residuals @ residuals) / dof

    cov = s2 * xtx_inv
    cov = (cov + cov.T) / 2
    return OlsFit(
        coefficients=coefficients,
        coef_covariance=cov,
        residual_variance=s2,
        dof=dof,
        residuals=residuals,
        column_names=design.column_names,
    )


def mv_ols_fit(design, responses):
    responses = np.asarray(responses, dtype=float)
    if responses.ndim == 1:
        responses = responses[:, None]
    q, r, xtx_inv = _factorise(design)

    coefficients = _solve(q, r, responses)
    residuals = responses - design.values @ coefficients
    dof = design.n - design.p
    sigma = residuals.T @ residuals / dof
    sigma = (sigma + sigma.T) / 2

    logger.debug("mv_ols_fit: n=%d, p=%d, responses=%d", design.n, design.p, responses.shape[1])
    return MvOlsFit(
        coefficients=coefficients,
        residual_covariance=sigma,
        xtx_inv=(xtx_inv + xtx_inv.T) / 2,
        dof=dof,
        residuals=residuals,
        column_names=design.column_names,
    )
