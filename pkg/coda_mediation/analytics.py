import numpy as np
import pandas as pd

from .coda import close_counts, ilr_forward


class CohortAnalytics:
    """Descriptive tables for a cohort, grouped by exposure"""

    def __init__(self, cohort, zero_replacement=0.5):
        self.cohort = cohort
        self.zero_replacement = zero_replacement
        self.df = pd.DataFrame(cohort.counts, columns=list(cohort.part_labels))
        self.df['exposure'] = cohort.exposure

    def _proportions(self):
        counts = self.df[list(self.cohort.part_labels)]
        props = counts.div(counts.sum(axis=1), axis=0)
        props['exposure'] = self.df['exposure']
        return props

    def exposure_group_summary(self):
        """
        Average counts and proportions per part by exposure group
        Returns: DataFrame indexed by part with columns
        mean_count_x0, mean_count_x1, mean_prop_x0, mean_prop_x1, prevalence
        """
        parts = list(self.cohort.part_labels)
        counts = self.df.groupby('exposure')[parts].mean()
        props = self._proportions().groupby('exposure')[parts].mean()

        result = pd.DataFrame(index=pd.Index(parts, name='part'))
        for x in (0, 1):
            result[f'mean_count_x{x}'] = counts.loc[x] if x in counts.index else np.nan
            result[f'mean_prop_x{x}'] = props.loc[x] if x in props.index else np.nan
        result['prevalence'] = (self.df[parts] > 0).mean()
        return result

    def ilr_group_summary(self, basis):
        """Mean and variance of every ilr coordinate by exposure group"""
        coords = ilr_forward(close_counts(self.cohort.counts, self.zero_replacement), basis).coords
        balances = list(basis.source.balance_labels)
        df = pd.DataFrame(coords, columns=balances)
        df['exposure'] = self.cohort.exposure

        grouped = df.groupby('exposure')[balances]
        means = grouped.mean()
        variances = grouped.var()

        result = pd.DataFrame(index=pd.Index(balances, name='balance'))
        for x in (0, 1):
            result[f'mean_x{x}'] = means.loc[x] if x in means.index else np.nan
        for x in (0, 1):
            result[f'var_x{x}'] = variances.loc[x] if x in variances.index else np.nan
        return result


def exposure_group_summary(cohort):
    return CohortAnalytics(cohort).exposure_group_summary()


def ilr_group_summary(cohort, basis, zero_replacement=0.5):
    return CohortAnalytics(cohort, zero_replacement).ilr_group_summary(basis)


def _effect_columns(effect, prefix=''):
    # 'point' for the effect itself, 'beta' / 'gamma' for the coefficients
    point = prefix.rstrip('_') or 'point'
    return {
        point: effect.point,
        f'{prefix}se': effect.se,
        f'{prefix}ci_low': effect.ci_low,
        f'{prefix}ci_high': effect.ci_high,
    }


def effects_frame(estimate):
    """
    TE, NDE, OIE and one CIE row per balance.
    CIE rows also carry the pooled exposure effect on the coordinate (beta_*)
    and the pooled response coefficient of the coordinate (gamma_*).
    """
    rows = [
        {'effect': name, 'balance': None, **_effect_columns(effect)}
        for name, effect in (('TE', estimate.te), ('NDE', estimate.nde), ('OIE', estimate.oie))
    ]
    for k, label in enumerate(estimate.balance_labels):
        rows.append({
            'effect': f'CIE{k + 1}',
            'balance': label,
            **_effect_columns(estimate.cie[k]),
            **_effect_columns(estimate.beta1[k], 'beta_'),
            **_effect_columns(estimate.gamma1[k], 'gamma_'),
        })
    return pd.DataFrame(rows)


def stratum_frame(estimate):
    """Stratum-specific TE, NDE, OIE and CIE_k"""
    rows = []
    for fit in estimate.stratum_fits:
        row = {
            'stratum': fit.stratum,
            'n': fit.n_h,
            'weight': estimate.stratum_weights[fit.stratum],
            'TE': fit.te,
            'NDE': fit.gamma2,
            'OIE': fit.oie,
        }
        row.update({f'CIE{k + 1}': c for k, c in enumerate(fit.cie)})
        rows.append(row)
    return pd.DataFrame(rows)
