import logging
import os

import numpy as np
import pandas as pd

from .coda import CompositionError, filter_prevalence, validate_sbp
from .experiment import estimates_frame, ratio_diagnostics, replicates_frame, summary_frame, truth_frame
from .mediation import CohortData, MediationError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.10g'


class InputFileError(ValueError):
    pass


def _read_csv(path, **kwargs):
    if not os.path.exists(path):
        raise InputFileError(f"{path}: no such file")
    try:
        return pd.read_csv(path, encoding='utf-8', **kwargs)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputFileError(f"{path}: {e}")


def read_sbp_csv(path):
    """
    SBP matrix file: header row holds the balance names, first column the
    part labels, cells are -1, 0 or +1.
    """
    df = _read_csv(path, index_col=0)
    values = df.to_numpy()
    if values.dtype == object:
        values = df.apply(pd.to_numeric, errors='coerce').to_numpy()
    if np.isnan(values.astype(float)).any():
        raise InputFileError(f"{path}: SBP entries must be numeric")
    return validate_sbp(values, labels=df.index.astype(str), balance_labels=df.columns.astype(str))


def sbp_frame(sbp):
    return pd.DataFrame(
        sbp.entries.astype(int),
        index=pd.Index(sbp.part_labels, name='part'),
        columns=list(sbp.balance_labels),
    )


def write_sbp_csv(sbp, path_or_buf):
    sbp_frame(sbp).to_csv(path_or_buf)


def read_counts_csv(path):
    """Counts table: one row per sample, first column the sample id, one column per part."""
    df = _read_csv(path, index_col=0)
    df.index = df.index.astype(str)
    numeric = df.apply(pd.to_numeric, errors='coerce')
    if numeric.isna().any().any():
        raise InputFileError(f"{path}: counts must be numeric")
    if (numeric < 0).any().any():
        raise CompositionError("NegativeCount: counts must be nonnegative")
    return numeric


def read_metadata_csv(path):
    df = _read_csv(path, index_col=0)
    df.index = df.index.astype(str)
    return df


def align_counts(counts, part_labels):
    """Reorder count columns to ``part_labels``."""
    missing = [p for p in part_labels if p not in counts.columns]
    if missing:
        raise InputFileError(f"counts lack the parts {', '.join(missing)}")
    return counts[list(part_labels)]


def apply_prevalence_filter(counts, min_prevalence):
    if not min_prevalence:
        return counts
    values, kept = filter_prevalence(counts.to_numpy(), list(counts.columns), min_prevalence)
    return pd.DataFrame(values, index=counts.index, columns=kept)


def stratum_labels(meta, confounders):
    if not confounders:
        return np.array(['all'] * len(meta), dtype=object)
    return np.array(
        ['|'.join(f'{c}={row[c]}' for c in confounders) for _, row in meta[confounders].iterrows()],
        dtype=object,
    )


def build_cohort(counts, meta, exposure='exposure', response='response', confounders=None):
    """
    Join a counts table and a metadata table on sample id.

    ``confounders`` defaults to every metadata column other than the exposure
    and the response; their cross-classification defines the strata.
    """
    for column in (exposure, response):
        if column not in meta.columns:
            raise InputFileError(f"metadata has no column {column!r}")
    if confounders is None:
        confounders = [c for c in meta.columns if c not in (exposure, response)]
    missing = [c for c in confounders if c not in meta.columns]
    if missing:
        raise InputFileError(f"metadata has no column(s) {', '.join(missing)}")

    unmatched = counts.index.symmetric_difference(meta.index)
    if len(unmatched):
        raise MediationError(f"{len(unmatched)} sample id(s) appear in only one of counts and metadata")
    meta = meta.loc[counts.index]

    x = pd.to_numeric(meta[exposure], errors='coerce')
    y = pd.to_numeric(meta[response], errors='coerce')
    if x.isna().any() or y.isna().any():
        raise InputFileError("exposure and response must be numeric with no missing values")
    if not x.isin([0, 1]).all():
        raise InputFileError(f"exposure {exposure!r} must be coded 0 or 1")

    return CohortData(
        counts=counts.to_numpy(),
        exposure=x.to_numpy().astype(int),
        stratum=stratum_labels(meta, confounders),
        response=y.to_numpy(dtype=float),
        part_labels=tuple(counts.columns),
        sample_ids=tuple(counts.index),
        confounders=meta[confounders].to_numpy() if confounders else None,
        confounder_names=tuple(confounders),
    )


def cohort_frames(cohort):
    """Counts table and metadata table (exposure, confounders, response) of a cohort."""
    index = pd.Index(cohort.sample_ids, name='sample_id')
    counts = pd.DataFrame(cohort.counts, index=index, columns=list(cohort.part_labels))
    meta = pd.DataFrame({'exposure': cohort.exposure}, index=index)
    for k, name in enumerate(cohort.confounder_names or ()):
        meta[name] = cohort.confounders[:, k]
    meta['response'] = cohort.response
    return counts, meta


def output_paths(out):
    stem, _ = os.path.splitext(out)
    return out, f'{stem}_meta.csv', f'{stem}_sbp.csv'


def write_cohort(cohort, sbp, out):
    """``out`` gets the counts; the metadata and SBP go next to it."""
    counts_path, meta_path, sbp_path = output_paths(out)
    counts, meta = cohort_frames(cohort)
    counts.to_csv(counts_path)
    meta.to_csv(meta_path, float_format=FLOAT_FORMAT)
    write_sbp_csv(sbp, sbp_path)
    logger.info("wrote %d samples to %s", cohort.n, counts_path)
    return counts_path, meta_path, sbp_path


def write_study_outputs(summaries, out_dir, raw=False):
    os.makedirs(out_dir, exist_ok=True)
    frames = {
        'summary.csv': summary_frame(summaries),
        'truth.csv': truth_frame(summaries),
        'estimates.csv': estimates_frame(summaries),
        'ratios.csv': ratio_diagnostics(summaries),
    }
    if raw:
        frames['replicates.csv'] = replicates_frame(summaries)

    written = []
    for name, frame in frames.items():
        path = os.path.join(out_dir, name)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        written.append(path)
    logger.info("wrote %s", ", ".join(written))
    return written
