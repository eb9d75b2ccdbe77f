"""
Replication studies: simulate -> mediate, many times per grid cell.

A plan is a grid of (scenario preset, alpha_s, theta) cells. Each cell
calibrates its truth once, then runs independent replicates and summarises
every effect by bias, average SE, empirical SE, power and coverage.

Random streams are addressed by position, not drawn in sequence:
cell c calibrates from SeedSequence(seed, spawn_key=(c, 0)) and replicate r
uses SeedSequence(seed, spawn_key=(c, 1, r)). Results therefore do not depend
on the number of workers.
"""
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from django.conf import settings
from joblib import Parallel, delayed

from .coda import CompositionError
from .mediation import MediationError, MediationOptions, mediate
from .regress import RegressionError
from .simgen import calibrate_truth, load_preset, sbp_from_dict, simulate_cohort

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["Eff", "True", "Est", "Bias", "SE-hat", "SE-est", "Power", "Coverage"]


class StudyPlanError(ValueError):
    pass


def _parse_alpha(value):
    if isinstance(value, str) and value.lower() in ("inf", "infinity"):
        return math.inf
    return float(value)


def format_alpha(alpha_s):
    return "inf" if math.isinf(alpha_s) else f"{alpha_s:g}"


@dataclass(frozen=True)
class StudyCell:
    index: int
    scenario: str
    alpha_s: float
    theta: float
    config: object = field(repr=False)
    analysis_sbp: object = field(repr=False)

    @property
    def misspecified(self):
        return not self.analysis_sbp.same_partition(self.config.sbp)

    @property
    def label(self):
        return f"{self.scenario}/alpha_s={format_alpha(self.alpha_s)}/theta={self.theta:g}"


@dataclass
class StudyPlan:
    scenarios: list
    alpha_s: list = field(default_factory=lambda: [math.inf])
    theta: list = field(default_factory=lambda: [0.0])
    replicates: int = None
    n: int = None
    seed: int = None
    ci_level: float = None
    mc_reps: int = None
    shared_gamma: bool = True
    analysis_sbp: dict = None

    def __post_init__(self):
        conf = settings.CODA_MEDIATION
        if self.replicates is None:
            self.replicates = conf['REPLICATES']
        if self.n is None:
            self.n = conf['COHORT_SIZE']
        if self.seed is None:
            self.seed = conf['SEED']
        if self.ci_level is None:
            self.ci_level = conf['CI_LEVEL']
        if self.mc_reps is None:
            self.mc_reps = conf['MC_REPS']
        if isinstance(self.scenarios, str):
            self.scenarios = [self.scenarios]
        if not isinstance(self.alpha_s, (list, tuple)):
            self.alpha_s = [self.alpha_s]
        if not isinstance(self.theta, (list, tuple)):
            self.theta = [self.theta]
        self.alpha_s = [_parse_alpha(a) for a in self.alpha_s]
        self.theta = [float(t) for t in self.theta]

    def validate(self):
        if not self.scenarios:
            raise StudyPlanError("plan names no scenarios")
        if self.replicates < 1:
            raise StudyPlanError(f"replicates must be at least 1, got {self.replicates}")
        if self.n < 1:
            raise StudyPlanError(f"n must be at least 1, got {self.n}")
        if not 0 < self.ci_level < 1:
            raise StudyPlanError(f"ci_level must lie in (0, 1), got {self.ci_level}")
        if self.mc_reps < 2:
            raise StudyPlanError("mc_reps must be at least 2")
        if any(not a > 0 for a in self.alpha_s) or any(t < 0 for t in self.theta):
            raise StudyPlanError("alpha_s must be positive and theta nonnegative")
        return self

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise StudyPlanError(f"unknown plan fields: {', '.join(sorted(unknown))}")
        if "scenarios" not in data:
            raise StudyPlanError("plan needs 'scenarios'")
        try:
            return cls(**data).validate()
        except TypeError as e:
            raise StudyPlanError(f"malformed plan: {e}") from e

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise StudyPlanError(f"{path}: {e}")
        return cls.from_dict(data)

    def to_dict(self):
        return {
            "scenarios": list(self.scenarios),
            "alpha_s": [format_alpha(a) if math.isinf(a) else a for a in self.alpha_s],
            "theta": list(self.theta),
            "replicates": self.replicates,
            "n": self.n,
            "seed": self.seed,
            "ci_level": self.ci_level,
            "mc_reps": self.mc_reps,
            "shared_gamma": self.shared_gamma,
            "analysis_sbp": self.analysis_sbp,
        }

    def cells(self):
        cells = []
        for scenario in self.scenarios:
            base = load_preset(scenario)
            analysis_sbp = (
                base.sbp if self.analysis_sbp is None
                else sbp_from_dict(self.analysis_sbp, base.num_parts, base.part_labels)
            )
            if analysis_sbp.num_parts != base.num_parts:
                raise StudyPlanError(
                    f"analysis SBP covers {analysis_sbp.num_parts} parts, {scenario} has {base.num_parts}"
                )
            for alpha_s in self.alpha_s:
                for theta in self.theta:
                    config = base.with_grid_point(alpha_s=alpha_s, theta=theta, n=self.n).validate()
                    cells.append(StudyCell(
                        index=len(cells), scenario=scenario, alpha_s=alpha_s, theta=theta,
                        config=config, analysis_sbp=analysis_sbp,
                    ))
        return cells

    def options(self, zero_replacement=0.5):
        return MediationOptions(
            zero_replacement=zero_replacement, ci_level=self.ci_level, shared_gamma=self.shared_gamma,
        )


def cell_stream(seed, cell_index, replicate=None):
    key = (cell_index, 0) if replicate is None else (cell_index, 1, replicate)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _run_replicate(index, config, truth, analysis_sbp, options, seed, cell_index):
    rng = cell_stream(seed, cell_index, index)
    try:
        cohort = simulate_cohort(config, truth, rng=rng)
        estimate = mediate(cohort, analysis_sbp, options)
    except (RegressionError, MediationError, CompositionError) as e:
        return {"replicate": index, "failed": True, "error": f"{type(e).__name__}: {e}"}

    return {
        "replicate": index,
        "failed": False,
        "effects": {
            **{f"CIE{k + 1}": e for k, e in enumerate(estimate.cie)},
            "OIE": estimate.oie,
            "NDE": estimate.nde,
            "TE": estimate.te,
        },
        "beta1": np.array([e.point for e in estimate.beta1]),
        "gamma1": np.array([e.point for e in estimate.gamma1]),
    }


@dataclass(frozen=True)
class EffectSummary:
    effect: str
    true: float
    est: float
    bias: float
    se_hat: float
    se_est: float
    power: float
    coverage: float

    def as_row(self):
        return dict(zip(TABLE_COLUMNS, (
            self.effect, self.true, self.est, self.bias, self.se_hat, self.se_est, self.power, self.coverage,
        )))


@dataclass(frozen=True)
class ReplicationSummary:
    cell: StudyCell
    replicates: int
    failures: int
    effects: list
    true_beta: np.ndarray
    true_gamma: np.ndarray
    mean_beta: np.ndarray
    mean_gamma: np.ndarray
    var_beta: np.ndarray
    var_gamma: np.ndarray
    truth: object = field(repr=False)
    records: list = field(default_factory=list, repr=False)

    @property
    def misspecified(self):
        return self.cell.misspecified

    def effect(self, name):
        for e in self.effects:
            if e.effect == name:
                return e
        raise KeyError(name)


def _summarise_effect(name, effects, true_value):
    points = np.array([e.point for e in effects])
    ses = np.array([e.se for e in effects])
    low = np.array([e.ci_low for e in effects])
    high = np.array([e.ci_high for e in effects])

    est = float(points.mean())
    se_est = float(points.std(ddof=1)) if points.size > 1 else math.nan
    power = float(np.mean((low > 0) | (high < 0)))
    if true_value is None:
        true, bias, coverage = math.nan, math.nan, math.nan
    else:
        true = float(true_value)
        bias = est - true
        coverage = float(np.mean((low <= true) & (true <= high)))
    return EffectSummary(
        effect=name, true=true, est=est, bias=bias,
        se_hat=float(ses.mean()), se_est=se_est, power=power, coverage=coverage,
    )


def summarise_records(cell, truth, records):
    ok = [r for r in records if not r["failed"]]
    failures = len(records) - len(ok)
    if not ok:
        raise StudyPlanError(f"every replicate failed in cell {cell.label}: {records[0]['error']}")

    j = cell.config.num_parts - 1
    names = [f"CIE{k + 1}" for k in range(j)] + ["OIE"]
    truths = None if cell.misspecified else list(truth.cie_targets) + [truth.oie]

    effects = [
        _summarise_effect(name, [r["effects"][name] for r in ok], None if truths is None else truths[i])
        for i, name in enumerate(names)
    ]
    betas = np.array([r["beta1"] for r in ok])
    gammas = np.array([r["gamma1"] for r in ok])
    ddof = 1 if len(ok) > 1 else 0
    return ReplicationSummary(
        cell=cell,
        replicates=len(records),
        failures=failures,
        effects=effects,
        true_beta=truth.beta1_weighted,
        true_gamma=truth.gamma1,
        mean_beta=betas.mean(axis=0),
        mean_gamma=gammas.mean(axis=0),
        var_beta=betas.var(axis=0, ddof=ddof),
        var_gamma=gammas.var(axis=0, ddof=ddof),
        truth=truth,
        records=records,
    )


def run_cell(cell, plan, threads=1):
    """Calibrate the cell truth, run plan.replicates replicates and summarise them."""
    logger.info("cell %d %s: %d replicates of n=%d", cell.index, cell.label, plan.replicates, plan.n)
    truth = calibrate_truth(cell.config, mc_reps=plan.mc_reps, rng=cell_stream(plan.seed, cell.index))
    options = plan.options(cell.config.zero_replacement)

    records = Parallel(n_jobs=threads)(
        delayed(_run_replicate)(r, cell.config, truth, cell.analysis_sbp, options, plan.seed, cell.index)
        for r in range(plan.replicates)
    )
    failed = [r for r in records if r["failed"]]
    if failed:
        logger.warning(
            "cell %s: %d of %d replicates failed and were excluded (first: %s)",
            cell.label, len(failed), len(records), failed[0]["error"],
        )

    summary = summarise_records(cell, truth, records)
    logger.info("cell %d done: OIE est %.4f", cell.index, summary.effect("OIE").est)
    return summary


def run_study(plan, threads=None):
    threads = threads or settings.CODA_MEDIATION['THREADS']
    plan.validate()
    return [run_cell(cell, plan, threads=threads) for cell in plan.cells()]


def _cell_columns(summary):
    cell = summary.cell
    return {
        "cell": cell.index,
        "scenario": cell.scenario,
        "alpha_s": format_alpha(cell.alpha_s),
        "theta": cell.theta,
        "misspecified": cell.misspecified,
    }


def summary_frame(summaries):
    """One row per cell and effect, with the columns Eff, True, Est, Bias, SE-hat, SE-est, Power, Coverage."""
    rows = []
    for s in summaries:
        ids = _cell_columns(s)
        for e in s.effects:
            rows.append({**ids, **e.as_row(), "replicates": s.replicates, "failures": s.failures})
    return pd.DataFrame(rows)


def truth_frame(summaries):
    rows = []
    for s in summaries:
        row = _cell_columns(s)
        row.update({f"beta{k + 1}": b for k, b in enumerate(s.true_beta)})
        row.update({f"gamma{k + 1}": g for k, g in enumerate(s.true_gamma)})
        row["mc_reps"] = s.truth.mc_reps
        rows.append(row)
    return pd.DataFrame(rows)


def estimates_frame(summaries):
    """Average beta_hat, gamma_hat and their empirical variances per cell."""
    rows = []
    for s in summaries:
        row = _cell_columns(s)
        for k in range(len(s.mean_beta)):
            row[f"beta{k + 1}"] = s.mean_beta[k]
            row[f"var_beta{k + 1}"] = s.var_beta[k]
            row[f"gamma{k + 1}"] = s.mean_gamma[k]
            row[f"var_gamma{k + 1}"] = s.var_gamma[k]
        rows.append(row)
    return pd.DataFrame(rows)


def replicates_frame(summaries):
    rows = []
    for s in summaries:
        ids = _cell_columns(s)
        for record in s.records:
            if record["failed"]:
                rows.append({**ids, "replicate": record["replicate"], "effect": None, "error": record["error"]})
                continue
            for name, e in record["effects"].items():
                rows.append({
                    **ids,
                    "replicate": record["replicate"],
                    "effect": name,
                    "point": e.point,
                    "se": e.se,
                    "ci_low": e.ci_low,
                    "ci_high": e.ci_high,
                    "error": None,
                })
    return pd.DataFrame(rows)


def ratio_diagnostics(summaries, coordinate=0):
    """
    Squared-estimator to variance ratios for one coordinate per cell.

    var(IE) = var_beta var_gamma [(beta^2 / var_beta) + (gamma^2 / var_gamma)],
    with beta, gamma the calibrated truth and the variances taken over
    replicates. Misspecified cells have no truth and are skipped.
    """
    rows = []
    for s in summaries:
        if s.misspecified:
            continue
        k = coordinate
        beta, gamma = s.true_beta[k], s.true_gamma[k]
        var_beta, var_gamma = s.var_beta[k], s.var_gamma[k]
        product = var_beta * var_gamma
        beta_ratio = beta ** 2 / var_beta
        gamma_ratio = gamma ** 2 / var_gamma
        rows.append({
            **_cell_columns(s),
            "beta": beta,
            "gamma": gamma,
            "var_beta": var_beta,
            "var_gamma": var_gamma,
            "var_product": product,
            "beta_ratio": beta_ratio,
            "gamma_ratio": gamma_ratio,
            "var_ie": product * (beta_ratio + gamma_ratio),
        })
    return pd.DataFrame(rows)
