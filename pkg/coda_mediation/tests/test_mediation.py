import numpy as np
from django.conf import settings
from django.test import SimpleTestCase, override_settings

from coda_mediation.coda import basis_from_sbp, ilr_inverse, pivotal_sbp, random_sbp, validate_sbp
from coda_mediation.mediation import (
    CohortData,
    DeltaMethodError,
    Effect,
    MediationError,
    MediationOptions,
    StratumFit,
    StratumTooSmallError,
    WeightMismatchError,
    delta_se_cie,
    delta_se_oie,
    estimate_total_effect,
    fit_stratum,
    mediate,
    pool_effects,
)

TAXONOMY = validate_sbp(np.array([
    [1, 0, 0, 0],
    [-1, 1, 1, 0],
    [-1, 1, -1, 0],
    [-1, -1, 0, 1],
    [-1, -1, 0, -1],
]))


def random_cohort(rng, num_parts=5, strata=("a", "b"), per_stratum=40, depth=2000):
    """Counts with an exposure shift, a response linear in the log counts and two or more strata."""
    n = per_stratum * len(strata)
    stratum = np.repeat(np.array(strata, dtype=object), per_stratum)
    exposure = np.concatenate([rng.permutation(np.arange(per_stratum) % 2) for _ in strata])
    shift = rng.normal(scale=0.5, size=num_parts)
    logits = rng.normal(size=(n, num_parts)) + np.outer(exposure, shift)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    counts = np.array([rng.multinomial(depth, p) for p in probs])
    weights = rng.normal(scale=0.3, size=num_parts)
    response = (
        1.0 + np.log(counts + 0.5) @ (weights - weights.mean()) + 0.4 * exposure
        + (stratum == strata[0]) * 0.2 + rng.normal(scale=0.5, size=n)
    )
    return CohortData(
        counts=counts, exposure=exposure, stratum=stratum, response=response,
        part_labels=tuple(f"p{j + 1}" for j in range(num_parts)),
    )


def manual_fit(beta, gamma, gamma2=0.4, n_h=100, stratum="h", var=1e-4):
    j = len(beta)
    return StratumFit(
        stratum=stratum,
        n_h=n_h,
        beta0=np.zeros(j),
        beta1=np.asarray(beta, dtype=float),
        beta1_cov=np.eye(j) * var,
        gamma0=2.0,
        gamma1=np.asarray(gamma, dtype=float),
        gamma2=gamma2,
        gamma_cov=np.eye(j + 1) * var,
        te=gamma2 + float(np.dot(beta, gamma)),
        te_var=var,
    )


class FitStratumTests(SimpleTestCase):

    def noiseless_stratum(self, b, g, g2):
        rng = np.random.default_rng(7)
        n = 40
        x = np.arange(n) % 2
        noise = rng.normal(size=(n, len(b)))
        for level in (0, 1):
            noise[x == level] -= noise[x == level].mean(axis=0)
        m = 0.3 + np.outer(x, b) + noise
        proportions = ilr_inverse(m, basis_from_sbp(TAXONOMY)).proportions
        y = 1.5 + m @ g + g2 * x
        return CohortData(
            counts=proportions, exposure=x, stratum=np.array(["h"] * n, dtype=object),
            response=y, part_labels=TAXONOMY.part_labels,
        )

    def test_noiseless_identification(self):
        b = np.array([0.5, -0.3, 0.2, 0.1])
        g = np.array([0.2, 0.0, -0.4, 0.3])
        fit = fit_stratum(self.noiseless_stratum(b, g, 0.7), basis_from_sbp(TAXONOMY), label="h")
        np.testing.assert_allclose(fit.beta1, b, atol=1e-10)
        np.testing.assert_allclose(fit.gamma1, g, atol=1e-10)
        self.assertAlmostEqual(fit.gamma2, 0.7, places=10)
        self.assertAlmostEqual(fit.gamma0, 1.5, places=9)
        np.testing.assert_allclose(fit.gamma_cov, 0, atol=1e-18)

    def test_total_effect_decomposes_exactly(self):
        rng = np.random.default_rng(21)
        basis = basis_from_sbp(TAXONOMY)
        for _ in range(1000):
            cohort = random_cohort(rng, strata=("h",), per_stratum=20, depth=200)
            fit = fit_stratum(cohort, basis)
            self.assertAlmostEqual(fit.te, fit.gamma2 + fit.oie, delta=1e-10)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        cohort = random_cohort(rng, strata=("h",))
        order = rng.permutation(cohort.n)
        basis = basis_from_sbp(TAXONOMY)
        a = fit_stratum(cohort, basis)
        b = fit_stratum(cohort.subset(order), basis)
        np.testing.assert_allclose(a.beta1, b.beta1, atol=1e-12)
        np.testing.assert_allclose(a.gamma1, b.gamma1, atol=1e-12)
        np.testing.assert_allclose(a.gamma_cov, b.gamma_cov, atol=1e-12)

    def test_covariances_symmetric_psd(self):
        fit = fit_stratum(random_cohort(np.random.default_rng(9), strata=("h",)), basis_from_sbp(TAXONOMY))
        for cov in (fit.beta1_cov, fit.gamma_cov):
            np.testing.assert_allclose(cov, cov.T, atol=1e-15)
            self.assertTrue(np.all(np.linalg.eigvalsh(cov) > -1e-12))

    def test_stratum_too_small(self):
        cohort = random_cohort(np.random.default_rng(1), strata=("h",), per_stratum=6)
        with self.assertRaises(StratumTooSmallError):
            fit_stratum(cohort, basis_from_sbp(TAXONOMY))


class PoolEffectsTests(SimpleTestCase):

    BETA = (-0.87, -1.742, 1.747, -2.031)
    GAMMA = (-0.046, -0.006, 0.017, -0.010)

    def test_products_reproduce_indirect_effects(self):
        estimate = pool_effects([manual_fit(self.BETA, self.GAMMA)])
        np.testing.assert_allclose(estimate.cie_points, [0.040, 0.010, 0.030, 0.020], atol=1e-3)
        self.assertAlmostEqual(estimate.oie.point, 0.100, delta=1e-3)
        self.assertAlmostEqual(estimate.nde.point, 0.4)

    def test_oie_is_sum_of_cie(self):
        rng = np.random.default_rng(0)
        for shared in (False, True):
            fits = [manual_fit(rng.normal(size=4), rng.normal(size=4), stratum=s) for s in "abc"]
            estimate = pool_effects(fits, shared_gamma=shared)
            total = estimate.cie_points.sum()
            self.assertLessEqual(abs(estimate.oie.point - total), 1e-12 * max(1.0, abs(total)))

    def test_zero_gamma(self):
        fits = [manual_fit(self.BETA, [0, 0, 0, 0], gamma2=g2, stratum=s) for s, g2 in (("a", 0.2), ("b", 0.6))]
        estimate = pool_effects(fits, weights={"a": 0.25, "b": 0.75})
        self.assertEqual(estimate.oie.point, 0.0)
        np.testing.assert_array_equal(estimate.cie_points, 0)
        self.assertAlmostEqual(estimate.nde.point, 0.5)

    def test_identical_strata_match_single_stratum(self):
        single = pool_effects([manual_fit(self.BETA, self.GAMMA, n_h=50)])
        double = pool_effects([
            manual_fit(self.BETA, self.GAMMA, n_h=50, stratum="a"),
            manual_fit(self.BETA, self.GAMMA, n_h=50, stratum="b"),
        ])
        np.testing.assert_allclose(double.cie_points, single.cie_points, atol=1e-15)
        self.assertAlmostEqual(double.oie.point, single.oie.point, places=15)
        self.assertAlmostEqual(double.nde.point, single.nde.point, places=15)

    def test_pooled_standard_error_shrinks_with_weights(self):
        fits = [manual_fit(self.BETA, self.GAMMA, stratum=s) for s in "ab"]
        estimate = pool_effects(fits)
        single = pool_effects(fits[:1])
        self.assertAlmostEqual(estimate.oie.se, single.oie.se / np.sqrt(2), places=12)

    def test_confidence_interval_level(self):
        estimate = pool_effects([manual_fit(self.BETA, self.GAMMA)], ci_level=0.90)
        half_width = estimate.oie.ci_high - estimate.oie.point
        self.assertAlmostEqual(half_width / estimate.oie.se, 1.6448536269514722, places=10)

    def test_weight_mismatch(self):
        fits = [manual_fit(self.BETA, self.GAMMA, stratum=s) for s in "ab"]
        with self.assertRaises(WeightMismatchError):
            pool_effects(fits, weights={"a": 1.0})
        with self.assertRaises(WeightMismatchError):
            pool_effects(fits, weights=[0.3, 0.3])

    def test_inconsistent_balances(self):
        with self.assertRaises(MediationError):
            pool_effects([manual_fit(self.BETA, self.GAMMA), manual_fit((1.0, 2.0), (0.1, 0.1), stratum="x")])


class DeltaMethodTests(SimpleTestCase):

    def test_one_sided(self):
        self.assertAlmostEqual(delta_se_cie(0.5, 0.04, -0.3, 0.0), 0.3 * 0.2)

    def test_zero_effects(self):
        self.assertEqual(delta_se_cie(0.0, 0.1, 0.0, 0.2), 0.0)

    def test_factored_form(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            beta, gamma = rng.normal(size=2)
            var_beta, var_gamma = rng.uniform(0.01, 2.0, size=2)
            factored = var_beta * var_gamma * ((beta ** 2 / var_beta) + (gamma ** 2 / var_gamma))
            self.assertAlmostEqual(delta_se_cie(beta, var_beta, gamma, var_gamma) ** 2, factored, delta=1e-12)

    def test_negative_variance(self):
        with self.assertRaises(DeltaMethodError):
            delta_se_cie(1.0, -0.1, 1.0, 0.1)

    def test_single_coordinate_reduces_to_cie(self):
        self.assertAlmostEqual(
            delta_se_oie([0.3], [[0.02]], [-0.5], [[0.05]]), delta_se_cie(0.3, 0.02, -0.5, 0.05), places=15
        )

    def test_gradient_quadratic_form(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            j = int(rng.integers(1, 8))
            beta, gamma = rng.normal(size=j), rng.normal(size=j)
            a, b = rng.normal(size=(j, j)), rng.normal(size=(j, j))
            beta_cov, gamma_cov = a @ a.T, b @ b.T
            gradient = np.concatenate([gamma, beta])
            joint = np.block([[beta_cov, np.zeros((j, j))], [np.zeros((j, j)), gamma_cov]])
            expected = np.sqrt(gradient @ joint @ gradient)
            self.assertAlmostEqual(delta_se_oie(beta, beta_cov, gamma, gamma_cov), expected,
                                   delta=1e-12 * max(1.0, expected))

    def test_gamma_zero_leaves_beta_terms_out(self):
        se = delta_se_oie([1.0, 2.0], np.eye(2) * 5.0, [0.0, 0.0], np.diag([0.1, 0.2]))
        self.assertAlmostEqual(se, np.sqrt(0.1 + 4 * 0.2))

    def test_rejects_asymmetric_covariance(self):
        with self.assertRaises(DeltaMethodError):
            delta_se_oie([1.0, 1.0], [[1.0, 0.5], [0.0, 1.0]], [1.0, 1.0], np.eye(2))

    def test_rejects_dimension_mismatch(self):
        with self.assertRaises(DeltaMethodError):
            delta_se_oie([1.0, 1.0], np.eye(3), [1.0, 1.0], np.eye(2))
        with self.assertRaises(DeltaMethodError):
            delta_se_oie([1.0], np.eye(1), [1.0, 1.0], np.eye(2))


class TotalEffectTests(SimpleTestCase):

    def test_noiseless(self):
        x = np.tile([0, 1], 10)
        stratum = np.repeat(np.array(["a", "b"], dtype=object), 10)
        y = np.where(stratum == "a", 1.0, 3.0) - 0.106 * x
        cohort = CohortData(
            counts=np.ones((20, 3)), exposure=x, stratum=stratum, response=y, part_labels=("a", "b", "c"),
        )
        te = estimate_total_effect(cohort)
        self.assertAlmostEqual(te.point, -0.106, places=12)
        self.assertAlmostEqual(te.se, 0.0, places=7)

    def test_equals_direct_plus_indirect(self):
        rng = np.random.default_rng(12)
        for _ in range(1000):
            cohort = random_cohort(rng, strata=("a", "b", "c"), per_stratum=int(rng.integers(12, 30)), depth=200)
            estimate = mediate(cohort, TAXONOMY)
            te = estimate_total_effect(cohort)
            self.assertAlmostEqual(te.point, estimate.nde.point + estimate.oie.point, delta=1e-10)
            self.assertAlmostEqual(te.point, estimate.te.point, delta=1e-12)

    def test_missing_exposure_group(self):
        cohort = CohortData(
            counts=np.ones((6, 2)), exposure=np.array([0, 0, 0, 1, 1, 1]),
            stratum=np.array(["a", "a", "a", "b", "b", "b"], dtype=object),
            response=np.arange(6.0), part_labels=("a", "b"),
        )
        with self.assertRaises(MediationError):
            estimate_total_effect(cohort)


class MediateTests(SimpleTestCase):

    def test_oie_invariant_to_basis(self):
        rng = np.random.default_rng(30)
        for _ in range(100):
            d = int(rng.integers(3, 9))
            cohort = random_cohort(rng, num_parts=d)
            first = mediate(cohort, random_sbp(d, rng))
            second = mediate(cohort, pivotal_sbp(d))
            self.assertAlmostEqual(first.oie.point, second.oie.point, delta=1e-10)

    def test_cie_depends_on_basis(self):
        cohort = random_cohort(np.random.default_rng(31))
        taxonomy = mediate(cohort, TAXONOMY)
        pivot = mediate(cohort, pivotal_sbp(5))
        self.assertAlmostEqual(taxonomy.oie.point, pivot.oie.point, delta=1e-10)
        self.assertGreater(np.max(np.abs(taxonomy.cie_points - pivot.cie_points)), 1e-6)

    def test_shared_gamma_option(self):
        cohort = random_cohort(np.random.default_rng(32))
        shared = mediate(cohort, TAXONOMY, MediationOptions(shared_gamma=True))
        np.testing.assert_allclose(
            shared.cie_points, [g.point * b.point for g, b in zip(shared.gamma1, shared.beta1)], atol=1e-15
        )
        self.assertTrue(shared.shared_gamma)

    def test_stratum_fits_kept(self):
        estimate = mediate(random_cohort(np.random.default_rng(33)), TAXONOMY)
        self.assertEqual([f.stratum for f in estimate.stratum_fits], ["a", "b"])
        self.assertEqual(estimate.stratum_weights, {"a": 0.5, "b": 0.5})
        self.assertEqual(estimate.balance_labels, ("M1", "M2", "M3", "M4"))

    def test_deterministic(self):
        cohort = random_cohort(np.random.default_rng(34))
        first, second = mediate(cohort, TAXONOMY), mediate(cohort, TAXONOMY)
        np.testing.assert_array_equal(first.cie_points, second.cie_points)
        self.assertEqual(first.oie, second.oie)
        self.assertEqual(first.te, second.te)

    def test_part_count_mismatch(self):
        cohort = random_cohort(np.random.default_rng(35), num_parts=4)
        with self.assertRaises(MediationError):
            mediate(cohort, TAXONOMY)


class EffectTests(SimpleTestCase):

    def test_interval(self):
        effect = Effect.from_point_se(0.1, 0.02, 0.95)
        self.assertAlmostEqual(effect.ci_low, 0.1 - 1.959963984540054 * 0.02, places=12)
        self.assertTrue(effect.excludes(0.0))
        self.assertFalse(effect.excludes(0.1))


class MediationOptionsTests(SimpleTestCase):

    def test_defaults_follow_settings(self):
        conf = {**settings.CODA_MEDIATION, "ZERO_REPLACEMENT": 1.0, "CI_LEVEL": 0.95, "SHARED_GAMMA": True}
        with override_settings(CODA_MEDIATION=conf):
            options = MediationOptions.from_settings()
            overridden = MediationOptions.from_settings(ci_level=0.8, zero_replacement=None)
        self.assertEqual((options.zero_replacement, options.ci_level, options.shared_gamma), (1.0, 0.95, True))
        self.assertEqual((overridden.zero_replacement, overridden.ci_level), (1.0, 0.8))
