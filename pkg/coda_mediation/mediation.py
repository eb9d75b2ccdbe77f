"""
Stratified linear mediation with an ilr-transformed compositional mediator.

Within each confounder stratum h the ilr coordinates are regressed on the
exposure (multivariate model, coefficients beta) and the response on the
coordinates and the exposure (coefficients gamma1, gamma2). Effects are
pooled over strata with weights P(h):

    CIE_k = sum_h P(h) gamma_h1k beta_h1k   (default, stratum products)
    CIE_k = gamma_bar_k * beta_bar_k         (shared_gamma)
    OIE = sum_k CIE_k,  NDE = sum_h P(h) gamma_h2

Exposure is coded x* = 0, x = 1. Standard errors use the delta method; CIs
are normal-based.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from django.conf import settings
from scipy.stats import norm

from .coda import basis_from_sbp, close_counts, ilr_forward
from .regress import DesignMatrix, mv_ols_fit, ols_fit

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10


class MediationError(ValueError):
    """Mediation analysis cannot be carried out"""


class StratumTooSmallError(MediationError):
    pass


class WeightMismatchError(MediationError):
    pass


class DeltaMethodError(ValueError):
    pass


@dataclass(frozen=True)
class CohortData:
    """One row per individual. ``stratum`` holds the confounder cell label of each row."""

    counts: np.ndarray
    exposure: np.ndarray
    stratum: np.ndarray
    response: np.ndarray
    part_labels: tuple
    sample_ids: tuple = None
    confounders: np.ndarray = None
    confounder_names: tuple = None

    def __post_init__(self):
        n = self.counts.shape[0]
        for name in ("exposure", "stratum", "response"):
            if len(getattr(self, name)) != n:
                raise MediationError(f"{name} has {len(getattr(self, name))} rows, counts has {n}")
        if self.counts.shape[1] != len(self.part_labels):
            raise MediationError(f"{len(self.part_labels)} part labels for {self.counts.shape[1]} count columns")
        if np.any(self.counts < 0):
            raise MediationError("counts must be nonnegative")
        if not np.all(np.isin(self.exposure, (0, 1))):
            raise MediationError("exposure must be coded 0/1")

    @property
    def n(self):
        return self.counts.shape[0]

    @property
    def strata(self):
        return sorted(set(self.stratum.tolist()), key=str)

    def subset(self, mask):
        ids = tuple(np.asarray(self.sample_ids, dtype=object)[mask]) if self.sample_ids is not None else None
        return CohortData(
            counts=self.counts[mask],
            exposure=self.exposure[mask],
            stratum=self.stratum[mask],
            response=self.response[mask],
            part_labels=self.part_labels,
            sample_ids=ids,
            confounders=self.confounders[mask] if self.confounders is not None else None,
            confounder_names=self.confounder_names,
        )

    def stratum_rows(self, label):
        return self.subset(self.stratum == label)

    def empirical_weights(self):
        return {h: float(np.mean(self.stratum == h)) for h in self.strata}

    def check_strata(self):
        """Every stratum needs exposed and unexposed individuals."""
        for h in self.strata:
            x = self.exposure[self.stratum == h]
            if x.min() == x.max():
                raise MediationError(f"stratum {h!r} has no {'un' if x[0] == 1 else ''}exposed individuals")


@dataclass(frozen=True)
class Effect:
    point: float
    se: float
    ci_low: float
    ci_high: float

    @classmethod
    def from_point_se(cls, point, se, ci_level):
        z = norm.ppf((1 + ci_level) / 2)
        return cls(point=float(point), se=float(se), ci_low=float(point - z * se), ci_high=float(point + z * se))

    def excludes(self, value=0.0):
        return not (self.ci_low <= value <= self.ci_high)


@dataclass(frozen=True)
class StratumFit:
    stratum: object
    n_h: int
    beta0: np.ndarray
    beta1: np.ndarray
    beta1_cov: np.ndarray
    gamma0: float
    gamma1: np.ndarray
    gamma2: float
    gamma_cov: np.ndarray
    te: float
    te_var: float

    @property
    def num_balances(self):
        return len(self.beta1)

    @property
    def gamma1_cov(self):
        return self.gamma_cov[:-1, :-1]

    @property
    def gamma2_var(self):
        return float(self.gamma_cov[-1, -1])

    @property
    def cie(self):
        return self.gamma1 * self.beta1

    @property
    def oie(self):
        return float(self.gamma1 @ self.beta1)


@dataclass(frozen=True)
class MediationEstimate:
    te: Effect
    nde: Effect
    oie: Effect
    cie: list
    beta1: list
    gamma1: list
    stratum_weights: dict
    ci_level: float
    shared_gamma: bool
    balance_labels: tuple
    stratum_fits: list = field(default_factory=list, repr=False)

    @property
    def cie_points(self):
        return np.array([e.point for e in self.cie])


@dataclass(frozen=True)
class MediationOptions:
    zero_replacement: float = 0.5
    ci_level: float = 0.90
    shared_gamma: bool = False
    weights: dict = None

    @classmethod
    def from_settings(cls, **overrides):
        conf = settings.CODA_MEDIATION
        values = {
            'zero_replacement': conf['ZERO_REPLACEMENT'],
            'ci_level': conf['CI_LEVEL'],
            'shared_gamma': conf['SHARED_GAMMA'],
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def delta_se_cie(beta_k, var_beta_k, gamma_k, var_gamma_k):
    """sqrt(beta^2 var(gamma_hat) + gamma^2 var(beta_hat))"""
    if var_beta_k < 0 or var_gamma_k < 0:
        raise DeltaMethodError("variances must be nonnegative")
    return float(np.sqrt(beta_k ** 2 * var_gamma_k + gamma_k ** 2 * var_beta_k))


def _check_covariance(cov, size, name):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (size, size):
        raise DeltaMethodError(f"{name} has shape {cov.shape}, expected {(size, size)}")
    scale = max(1.0, float(np.abs(cov).max()))
    if not np.allclose(cov, cov.T, rtol=0, atol=SYMMETRY_TOL * scale):
        raise DeltaMethodError(f"{name} is not symmetric")
    return cov


def delta_se_oie(beta, beta_cov, gamma, gamma_cov):
    """
    Delta-method SE of beta'gamma with independent beta_hat and gamma_hat.

    The gradient is (gamma, beta), so the variance is
    beta' Cov(gamma_hat) beta + gamma' Cov(beta_hat) gamma.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    if beta.shape != gamma.shape:
        raise DeltaMethodError(f"beta has {beta.size} entries, gamma has {gamma.size}")
    beta_cov = _check_covariance(beta_cov, beta.size, "beta_cov")
    gamma_cov = _check_covariance(gamma_cov, gamma.size, "gamma_cov")

    variance = beta @ gamma_cov @ beta + gamma @ beta_cov @ gamma
    return float(np.sqrt(max(variance, 0.0)))


def _ilr_coordinates(counts, basis, zero_replacement):
    return ilr_forward(close_counts(counts, zero_replacement), basis).coords


def fit_stratum(stratum_rows, basis, zero_replacement=0.5, label=None):
    """Fit the mediator, response and total-effect regressions on one stratum."""
    j = basis.num_balances
    n_h = stratum_rows.n
    if n_h < j + 3:
        raise StratumTooSmallError(f"stratum {label!r} has {n_h} individuals, needs at least {j + 3}")
    x = stratum_rows.exposure.astype(float)
    if x.min() == x.max():
        raise MediationError(f"stratum {label!r} lacks one of the exposure groups")

    m = _ilr_coordinates(stratum_rows.counts, basis, zero_replacement)
    y = np.asarray(stratum_rows.response, dtype=float)

    mediator_design = DesignMatrix.build(x)
    mediator = mv_ols_fit(mediator_design, m)
    x_row = mediator_design.index("exposure")

    response_design = DesignMatrix.build(x, m, list(basis.source.balance_labels))
    response = ols_fit(response_design, y)

    total = ols_fit(mediator_design, y)

    logger.debug("stratum %s: n=%d, residual variance %.4g", label, n_h, response.residual_variance)
    return StratumFit(
        stratum=label,
        n_h=n_h,
        beta0=mediator.coefficients[0],
        beta1=mediator.coefficients[x_row],
        beta1_cov=mediator.coefficient_covariance(x_row),
        gamma0=float(response.coefficients[0]),
        gamma1=response.coefficients[1:j + 1],
        gamma2=float(response.coefficients[j + 1]),
        gamma_cov=response.coef_covariance[1:, 1:],
        te=float(total.coefficients[x_row]),
        te_var=float(total.coef_covariance[x_row, x_row]),
    )


def _resolve_weights(fits, weights):
    if weights is None:
        total = sum(f.n_h for f in fits)
        return np.array([f.n_h / total for f in fits])

    if isinstance(weights, dict):
        missing = [f.stratum for f in fits if f.stratum not in weights]
        if missing or len(weights) != len(fits):
            raise WeightMismatchError(f"weights do not match strata {[f.stratum for f in fits]}")
        w = np.array([weights[f.stratum] for f in fits], dtype=float)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(fits),):
            raise WeightMismatchError(f"{w.size} weights for {len(fits)} strata")

    if np.any(w < 0) or abs(w.sum() - 1) > 1e-8:
        raise WeightMismatchError(f"weights must be nonnegative and sum to 1, got {w.sum():.6g}")
    return w


def pool_effects(fits, weights=None, ci_level=0.90, shared_gamma=False, balance_labels=None):
    """Combine stratum fits into pooled TE, NDE, OIE and CIE_k."""
    if not fits:
        raise MediationError("no stratum fits to pool")
    j = fits[0].num_balances
    if any(f.num_balances != j for f in fits):
        raise MediationError("stratum fits disagree on the number of balances")
    w = _resolve_weights(fits, weights)
    w2 = w ** 2

    betas = np.array([f.beta1 for f in fits])
    gammas = np.array([f.gamma1 for f in fits])

    beta_bar = w @ betas
    beta_bar_cov = sum(wi * f.beta1_cov for wi, f in zip(w2, fits))
    gamma_bar = w @ gammas
    gamma_bar_cov = sum(wi * f.gamma1_cov for wi, f in zip(w2, fits))

    if shared_gamma:
        cie_points = gamma_bar * beta_bar
        cie_se = [
            delta_se_cie(beta_bar[k], beta_bar_cov[k, k], gamma_bar[k], gamma_bar_cov[k, k]) for k in range(j)
        ]
        oie_se = delta_se_oie(beta_bar, beta_bar_cov, gamma_bar, gamma_bar_cov)
    else:
        cie_points = w @ (gammas * betas)
        cie_var = np.zeros(j)
        oie_var = 0.0
        for wi, f in zip(w2, fits):
            cie_var += wi * np.array([
                delta_se_cie(f.beta1[k], f.beta1_cov[k, k], f.gamma1[k], f.gamma1_cov[k, k]) ** 2
                for k in range(j)
            ])
            oie_var += wi * delta_se_oie(f.beta1, f.beta1_cov, f.gamma1, f.gamma1_cov) ** 2
        cie_se = np.sqrt(cie_var)
        oie_se = float(np.sqrt(oie_var))

    oie_point = float(np.sum(cie_points))
    nde_point = float(w @ np.array([f.gamma2 for f in fits]))
    nde_se = float(np.sqrt(sum(wi * f.gamma2_var for wi, f in zip(w2, fits))))
    te_point = float(w @ np.array([f.te for f in fits]))
    te_se = float(np.sqrt(sum(wi * f.te_var for wi, f in zip(w2, fits))))

    labels = tuple(balance_labels) if balance_labels is not None else tuple(f"M{k + 1}" for k in range(j))
    return MediationEstimate(
        te=Effect.from_point_se(te_point, te_se, ci_level),
        nde=Effect.from_point_se(nde_point, nde_se, ci_level),
        oie=Effect.from_point_se(oie_point, oie_se, ci_level),
        cie=[Effect.from_point_se(cie_points[k], cie_se[k], ci_level) for k in range(j)],
        beta1=[Effect.from_point_se(beta_bar[k], np.sqrt(beta_bar_cov[k, k]), ci_level) for k in range(j)],
        gamma1=[Effect.from_point_se(gamma_bar[k], np.sqrt(gamma_bar_cov[k, k]), ci_level) for k in range(j)],
        stratum_weights={f.stratum: float(wi) for f, wi in zip(fits, w)},
        ci_level=ci_level,
        shared_gamma=shared_gamma,
        balance_labels=labels,
        stratum_fits=list(fits),
    )


def estimate_total_effect(data, weights=None, ci_level=0.90):
    """Stratum regressions of Y on (1, X) pooled by P(h); SE = sqrt(sum P(h)^2 var_h)."""
    data.check_strata()
    labels = data.strata
    points, variances = [], []
    for h in labels:
        rows = data.stratum_rows(h)
        if rows.n < 3:
            raise StratumTooSmallError(f"stratum {h!r} has {rows.n} individuals")
        design = DesignMatrix.build(rows.exposure)
        fit = ols_fit(design, rows.response)
        points.append(fit.coef("exposure"))
        variances.append(fit.coef_covariance[-1, -1])

    sizes = [int(np.sum(data.stratum == h)) for h in labels]
    if weights is None:
        w = np.array(sizes, dtype=float) / data.n
    elif isinstance(weights, dict):
        if set(weights) != set(labels):
            raise WeightMismatchError(f"weights do not match strata {labels}")
        w = np.array([weights[h] for h in labels], dtype=float)
    else:
        w = np.asarray(weights, dtype=float)
    if w.shape != (len(labels),) or abs(w.sum() - 1) > 1e-8:
        raise WeightMismatchError("weights must cover every stratum and sum to 1")

    point = float(w @ np.array(points))
    se = float(np.sqrt(np.sum(w ** 2 * np.array(variances))))
    return Effect.from_point_se(point, se, ci_level)


def mediate(data, sbp, options=None):
    """close -> ilr -> stratum fits -> pooled effects."""
    options = options or MediationOptions()
    if data.counts.shape[1] != sbp.num_parts:
        raise MediationError(f"counts have {data.counts.shape[1]} parts, SBP has {sbp.num_parts}")
    data.check_strata()
    basis = basis_from_sbp(sbp)

    fits = [
        fit_stratum(data.stratum_rows(h), basis, options.zero_replacement, label=h)
        for h in data.strata
    ]
    estimate = pool_effects(
        fits,
        weights=options.weights,
        ci_level=options.ci_level,
        shared_gamma=options.shared_gamma,
        balance_labels=sbp.balance_labels,
    )
    logger.debug(
        "mediate: n=%d, strata=%d, TE=%.4f, NDE=%.4f, OIE=%.4f",
        data.n, len(fits), estimate.te.point, estimate.nde.point, estimate.oie.point,
    )
    return estimate
