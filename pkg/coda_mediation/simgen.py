"""
Synthetic cohorts from the hierarchical count model.

For individual i with exposure x and binary confounders c:

    K ~ NegBin(mean mu, variance mu + theta mu^2)   (Poisson when theta == 0)
    pi ~ Dirichlet(alpha_s * p(x, c))               (fixed p when alpha_s is inf)
    counts ~ Multinomial(K, pi)

where p(x, c) = base_props[x] + sum_c c * confounder_effects[c]. The response is
linear in the ilr coordinates of the counts, the exposure and the confounders.
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from django.conf import settings

from .coda import basis_from_sbp, closure, ilr_forward, pivotal_sbp, validate_sbp
from .mediation import CohortData

logger = logging.getLogger(__name__)

SIMPLEX_SUM_TOL = 1e-12
ZERO_BETA_TOL = 1e-8


class SimulationConfigError(ValueError):
    """ConfigInvalid: the generative configuration cannot produce a cohort"""


class DivideByZeroBetaError(SimulationConfigError):
    pass


def sbp_from_dict(layout, num_parts, part_labels=None):
    """``{"pivotal_order": [...]}`` or ``{"matrix": [[...]], "parts": [...]}``; None means the identity pivot."""
    if layout is None:
        return pivotal_sbp(num_parts, labels=part_labels)
    if "pivotal_order" in layout:
        return pivotal_sbp(num_parts, order=layout["pivotal_order"], labels=layout.get("parts", part_labels))
    if "matrix" in layout:
        return validate_sbp(np.array(layout["matrix"]), labels=layout.get("parts", part_labels),
                            balance_labels=layout.get("balances"))
    raise SimulationConfigError("sbp must give either 'pivotal_order' or 'matrix'")


def sbp_to_dict(sbp):
    return {
        "parts": list(sbp.part_labels),
        "balances": list(sbp.balance_labels),
        "matrix": sbp.entries.astype(int).tolist(),
    }


@dataclass
class GenerativeConfig:
    base_props: np.ndarray
    confounder_effects: np.ndarray
    cie_targets: np.ndarray
    sbp: object
    mu: float = 10000.0
    theta: float = 0.0
    alpha_s: float = math.inf
    exposure_intercept: float = 0.25
    exposure_slopes: tuple = (0.05, 0.05)
    confounder_probs: tuple = (0.5, 0.5)
    gamma0: float = 2.0
    gamma2: float = 0.40
    gamma_c: tuple = (0.05, -0.05)
    sigma: float = 1.0
    n: int = 1000
    seed: int = 42
    zero_replacement: float = 0.5
    name: str = "custom"

    def __post_init__(self):
        self.base_props = np.asarray(self.base_props, dtype=float)
        self.confounder_effects = np.atleast_2d(np.asarray(self.confounder_effects, dtype=float))
        self.cie_targets = np.asarray(self.cie_targets, dtype=float)
        self.exposure_slopes = tuple(float(s) for s in self.exposure_slopes)
        self.confounder_probs = tuple(float(p) for p in self.confounder_probs)
        self.gamma_c = tuple(float(g) for g in self.gamma_c)

    @property
    def num_parts(self):
        return self.base_props.shape[1]

    @property
    def num_confounders(self):
        return len(self.confounder_probs)

    @property
    def part_labels(self):
        return self.sbp.part_labels

    def cells(self):
        """Every confounder combination as a tuple of 0/1, in lexicographic order."""
        q = self.num_confounders
        return [tuple((idx >> (q - 1 - b)) & 1 for b in range(q)) for idx in range(2 ** q)]

    def stratum_label(self, c):
        return "|".join(f"C{k + 1}={v}" for k, v in enumerate(c))

    def stratum_probability(self, c):
        return float(np.prod([p if v else 1 - p for p, v in zip(self.confounder_probs, c)]))

    def exposure_probability(self, c):
        return self.exposure_intercept + float(np.dot(self.exposure_slopes, c))

    def cell_proportions(self, x, c):
        p = self.base_props[int(x)] + np.asarray(c, dtype=float) @ self.confounder_effects
        if np.any(p <= 0):
            raise SimulationConfigError(f"ConfigInvalid: proportions for x={x}, c={tuple(c)} are not positive: {p}")
        return p

    def validate(self):
        d = self.num_parts
        if self.base_props.shape != (2, d):
            raise SimulationConfigError(f"base_props must be 2 x {d}, got {self.base_props.shape}")
        if np.any(self.base_props <= 0):
            raise SimulationConfigError("base_props must be strictly positive")
        sums = self.base_props.sum(axis=1)
        if np.any(np.abs(sums - 1) > SIMPLEX_SUM_TOL * 10):
            raise SimulationConfigError(f"base_props rows must sum to 1, got {sums}")
        if self.confounder_effects.shape != (self.num_confounders, d):
            raise SimulationConfigError(
                f"confounder_effects must be {self.num_confounders} x {d}, got {self.confounder_effects.shape}"
            )
        if len(self.exposure_slopes) != self.num_confounders or len(self.gamma_c) != self.num_confounders:
            raise SimulationConfigError("exposure_slopes and gamma_c need one entry per confounder")
        if self.sbp.num_parts != d:
            raise SimulationConfigError(f"sbp covers {self.sbp.num_parts} parts, proportions have {d}")
        if self.cie_targets.shape != (d - 1,):
            raise SimulationConfigError(f"cie_targets needs {d - 1} entries, got {self.cie_targets.size}")
        if not self.mu > 0:
            raise SimulationConfigError("mu must be positive")
        if self.theta < 0:
            raise SimulationConfigError("theta must be nonnegative")
        if not self.alpha_s > 0:
            raise SimulationConfigError("alpha_s must be positive")
        if not self.sigma > 0:
            raise SimulationConfigError("sigma must be positive")
        if self.n < 1:
            raise SimulationConfigError("n must be at least 1")
        for c in self.cells():
            if not 0 <= self.exposure_probability(c) <= 1:
                raise SimulationConfigError(f"P(X=1) outside [0, 1] for confounders {c}")
            for x in (0, 1):
                self.cell_proportions(x, c)
        return self

    def with_grid_point(self, alpha_s=None, theta=None, **changes):
        if alpha_s is not None:
            changes["alpha_s"] = float(alpha_s)
        if theta is not None:
            changes["theta"] = float(theta)
        return replace(self, **changes)

    def to_dict(self):
        return {
            "name": self.name,
            "mu": self.mu,
            "theta": self.theta,
            "alpha_s": "inf" if math.isinf(self.alpha_s) else self.alpha_s,
            "base_props": self.base_props.tolist(),
            "confounder_effects": self.confounder_effects.tolist(),
            "confounder_probs": list(self.confounder_probs),
            "exposure_intercept": self.exposure_intercept,
            "exposure_slopes": list(self.exposure_slopes),
            "gamma0": self.gamma0,
            "gamma2": self.gamma2,
            "gamma_c": list(self.gamma_c),
            "sigma": self.sigma,
            "cie_targets": self.cie_targets.tolist(),
            "sbp": sbp_to_dict(self.sbp),
            "n": self.n,
            "seed": self.seed,
            "zero_replacement": self.zero_replacement,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        try:
            base_props = np.asarray(data.pop("base_props"), dtype=float)
            sbp = sbp_from_dict(data.pop("sbp", None), base_props.shape[-1], data.pop("parts", None))
            alpha_s = data.pop("alpha_s", "inf")
            alpha_s = math.inf if str(alpha_s).lower() in ("inf", "infinity") else float(alpha_s)
            config = cls(base_props=base_props, sbp=sbp, alpha_s=alpha_s, **data)
        except KeyError as e:
            raise SimulationConfigError(f"missing config field {e}")
        except TypeError as e:
            raise SimulationConfigError(str(e))
        return config.validate()


def preset_names():
    return sorted(f[:-5] for f in os.listdir(settings.CODA_MEDIATION['PRESET_DIR']) if f.endswith(".json"))


def load_preset(name, **overrides):
    path = os.path.join(settings.CODA_MEDIATION['PRESET_DIR'], f"{name}.json")
    if not os.path.exists(path):
        raise SimulationConfigError(f"unknown preset {name!r}, choose from {', '.join(preset_names())}")
    with open(path) as f:
        data = json.load(f)
    data.update(overrides)
    return GenerativeConfig.from_dict(data)


def load_config(path_or_name):
    """A JSON file path, or the name of a bundled preset."""
    if os.path.exists(path_or_name):
        with open(path_or_name) as f:
            return GenerativeConfig.from_dict(json.load(f))
    return load_preset(path_or_name)


def draw_totals(config, rng, size):
    if config.theta == 0:
        return rng.poisson(config.mu, size=size)
    r = 1.0 / config.theta
    return rng.negative_binomial(r, r / (r + config.mu), size=size)


def draw_counts(config, x, confounders, rng, size):
    """``size`` individuals sharing exposure ``x`` and confounders; size x (J+1) counts."""
    p = config.cell_proportions(x, confounders)
    totals = draw_totals(config, rng, size)
    if math.isinf(config.alpha_s):
        probs = np.broadcast_to(p, (size, p.size))
    else:
        probs = rng.dirichlet(config.alpha_s * p, size=size)
    return rng.multinomial(totals, probs)


def draw_individual_counts(config, x, confounders, rng=None):
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    return draw_counts(config, x, confounders, rng, size=1)[0]


def _ilr_of_counts(counts, basis, zero_replacement):
    replaced = np.where(counts == 0, zero_replacement, counts).astype(float)
    return ilr_forward(closure(replaced), basis).coords


@dataclass(frozen=True)
class BetaCalibration:
    """Monte-Carlo truth of the exposure effects on the ilr coordinates.

    ``ilr_means`` and ``ilr_variances`` are |H| x 2 x J (stratum, exposure, coordinate).
    """

    strata: tuple
    stratum_weights: np.ndarray
    beta1_by_stratum: np.ndarray
    beta1_weighted: np.ndarray
    ilr_means: np.ndarray
    ilr_variances: np.ndarray
    mc_reps: int

    def pooled_ilr_moments(self):
        """Stratum-weighted mean and variance of each coordinate by exposure group, 2 x J each."""
        w = self.stratum_weights[:, None, None]
        means = (w * self.ilr_means).sum(axis=0)
        second = (w * (self.ilr_variances + self.ilr_means ** 2)).sum(axis=0)
        return means, second - means ** 2


@dataclass(frozen=True)
class TruePathCoefficients:
    calibration: BetaCalibration = field(repr=False)
    gamma1: np.ndarray
    cie_targets: np.ndarray

    @property
    def beta1_by_stratum(self):
        return self.calibration.beta1_by_stratum

    @property
    def beta1_weighted(self):
        return self.calibration.beta1_weighted

    @property
    def mc_reps(self):
        return self.calibration.mc_reps

    @property
    def cie(self):
        return self.gamma1 * self.beta1_weighted

    @property
    def oie(self):
        return float(np.sum(self.cie_targets))


def calibrate_true_betas(config, mc_reps=None, seed=None, rng=None):
    """beta_h1k = mean ilr_k(x=1, h) - mean ilr_k(x=0, h), averaged over mc_reps draws per cell."""
    mc_reps = mc_reps or settings.CODA_MEDIATION['MC_REPS']
    if rng is None:
        rng = np.random.default_rng(config.seed if seed is None else seed)
    basis = basis_from_sbp(config.sbp)
    cells = config.cells()
    j = basis.num_balances

    means = np.empty((len(cells), 2, j))
    variances = np.empty((len(cells), 2, j))
    for h, c in enumerate(cells):
        for x in (0, 1):
            m = _ilr_of_counts(draw_counts(config, x, c, rng, mc_reps), basis, config.zero_replacement)
            means[h, x] = m.mean(axis=0)
            variances[h, x] = m.var(axis=0, ddof=1)

    weights = np.array([config.stratum_probability(c) for c in cells])
    beta_h = means[:, 1] - means[:, 0]
    beta_bar = weights @ beta_h
    logger.info(
        "calibrated %s (alpha_s=%s, theta=%s) on %d draws per cell: beta=%s",
        config.name, config.alpha_s, config.theta, mc_reps, np.round(beta_bar, 3).tolist(),
    )
    return BetaCalibration(
        strata=tuple(config.stratum_label(c) for c in cells),
        stratum_weights=weights,
        beta1_by_stratum=beta_h,
        beta1_weighted=beta_bar,
        ilr_means=means,
        ilr_variances=variances,
        mc_reps=mc_reps,
    )


def calibrate_gammas(cie_targets, beta1_weighted):
    """gamma_k = CIE_k / beta_k, and 0 wherever the target is 0."""
    targets = np.asarray(cie_targets, dtype=float)
    beta = np.asarray(beta1_weighted, dtype=float)
    if targets.shape != beta.shape:
        raise SimulationConfigError(f"{targets.size} CIE targets for {beta.size} coefficients")

    gamma = np.zeros_like(targets)
    for k, (t, b) in enumerate(zip(targets, beta)):
        if t == 0:
            continue
        if abs(b) < ZERO_BETA_TOL:
            raise DivideByZeroBetaError(f"CIE target {t} for coordinate {k + 1} but its exposure effect is {b:.2e}")
        gamma[k] = t / b
    return gamma


def calibrate_truth(config, mc_reps=None, seed=None, rng=None):
    calibration = calibrate_true_betas(config, mc_reps=mc_reps, seed=seed, rng=rng)
    gamma = calibrate_gammas(config.cie_targets, calibration.beta1_weighted)
    return TruePathCoefficients(calibration=calibration, gamma1=gamma, cie_targets=config.cie_targets.copy())


def simulate_cohort(config, truth, seed=None, rng=None):
    """One cohort of config.n individuals. Deterministic given the seed (config.seed by default)."""
    if rng is None:
        rng = np.random.default_rng(config.seed if seed is None else seed)
    n = config.n

    confounders = (rng.random((n, config.num_confounders)) < np.array(config.confounder_probs)).astype(int)
    p_exposed = config.exposure_intercept + confounders @ np.array(config.exposure_slopes)
    exposure = (rng.random(n) < p_exposed).astype(int)

    counts = np.zeros((n, config.num_parts), dtype=np.int64)
    for c in config.cells():
        in_stratum = np.all(confounders == np.array(c), axis=1)
        for x in (0, 1):
            rows = np.flatnonzero(in_stratum & (exposure == x))
            if rows.size:
                counts[rows] = draw_counts(config, x, c, rng, rows.size)

    basis = basis_from_sbp(config.sbp)
    m = _ilr_of_counts(counts, basis, config.zero_replacement)
    response = (
        config.gamma0
        + m @ np.asarray(truth.gamma1)
        + config.gamma2 * exposure
        + confounders @ np.array(config.gamma_c)
        + config.sigma * rng.standard_normal(n)
    )

    stratum = np.array([config.stratum_label(tuple(row)) for row in confounders], dtype=object)
    return CohortData(
        counts=counts,
        exposure=exposure,
        stratum=stratum,
        response=response,
        part_labels=config.part_labels,
        sample_ids=tuple(f"s{i + 1:05d}" for i in range(n)),
        confounders=confounders,
        confounder_names=tuple(f"C{k + 1}" for k in range(config.num_confounders)),
    )


@dataclass(frozen=True)
class DispersionEstimate:
    n_samples: int
    mu: float
    theta: float
    alpha_s_by_part: dict
    alpha_s_median: float


def estimate_count_dispersion(counts, part_labels=None):
    """
    Moment estimates placing observed counts on the simulation grid.

    theta from var(K) = mu + theta mu^2. For each part, alpha_s from the
    Dirichlet-multinomial variance of the proportions at the mean depth K,
    var(p) = pi (1 - pi) / K * (K + alpha) / (1 + alpha). A part with no
    extra-multinomial variation gets alpha_s = inf.
    """
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 2 or counts.shape[0] < 2:
        raise SimulationConfigError("need an n x D count matrix with at least two samples")
    totals = counts.sum(axis=1)
    if np.any(totals <= 0):
        raise SimulationConfigError("every sample needs a positive total count")
    labels = list(part_labels) if part_labels is not None else [f"part{j + 1}" for j in range(counts.shape[1])]

    mu = float(totals.mean())
    theta = max((float(totals.var(ddof=1)) - mu) / mu ** 2, 0.0)

    props = counts / totals[:, None]
    pi = counts.sum(axis=0) / totals.sum()
    alphas = {}
    for label, p_j, pi_j in zip(labels, props.T, pi):
        if pi_j <= 0 or pi_j >= 1:
            continue
        inflation = p_j.var(ddof=1) * mu / (pi_j * (1 - pi_j))
        if inflation <= 1:
            alphas[label] = math.inf
        else:
            alphas[label] = max((mu - inflation) / (inflation - 1), 0.0)

    median = float(np.median(list(alphas.values()))) if alphas else math.nan
    logger.debug("dispersion: mu=%.1f theta=%.4g median alpha_s=%.3g", mu, theta, median)
    return DispersionEstimate(
        n_samples=counts.shape[0], mu=mu, theta=theta, alpha_s_by_part=alphas, alpha_s_median=median,
    )
