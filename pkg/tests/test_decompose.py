"""Per-student decomposition: closed form, batching parity, identities."""

import dataclasses

import numpy as np
import pytest

from examdecomp import regress, synth
from examdecomp.decompose import (
    DEMEAN_MODES,
    SPECS,
    SkillEstimates,
    closed_form_coefficients,
    decompose_cohort,
    decompose_student,
    filter_estimates,
    implied_score,
    latent_moments,
    retest_reliability,
    shrink_skill_estimates,
)
from examdecomp.difficulty import estimate_difficulty
from examdecomp.errors import (
    DegenerateVariance,
    DimensionMismatch,
    Empty,
    MethodUnknown,
    TooFewItems,
    TooFewMatched,
    ZeroPositionVariance,
)


class TestClosedForm:
    def test_three_point_hand_solution(self):
        # positions 0, 1/2, 1 with outcomes 1, 1, 0:
        # slope -1, intercept 7/6
        alpha, beta = closed_form_coefficients([0.0, 0.5, 1.0], [1.0, 1.0, 0.0])
        assert beta == pytest.approx(-1.0, abs=1e-15)
        assert alpha == pytest.approx(7.0 / 6.0, abs=1e-15)

    def test_matches_least_squares_exactly(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            j = rng.integers(5, 60)
            p = rng.random(j)
            if np.unique(p).shape[0] < 2:
                continue
            c = (rng.random(j) < 0.5).astype(float)
            alpha, beta = closed_form_coefficients(p, c)
            x = regress.DesignMatrix(
                np.column_stack([np.ones(j), p]), ("const", "pos"), True
            )
            fit = regress.ols_fit(x, c)
            assert alpha == pytest.approx(fit.coefficients[0], abs=1e-12)
            assert beta == pytest.approx(fit.coefficients[1], abs=1e-12)

    def test_degenerate_inputs(self):
        with pytest.raises(ZeroPositionVariance):
            closed_form_coefficients([0.3, 0.3, 0.3], [1, 0, 1])
        with pytest.raises(DimensionMismatch):
            closed_form_coefficients([0.0, 1.0], [1.0])

    def test_scale_consistency_in_position_units(self):
        # rescaling the position axis by c divides the slope by c and
        # leaves the intercept (the value at position 0) alone
        rng = np.random.default_rng(13)
        p = rng.random(40)
        c = (rng.random(40) < 0.6).astype(float)
        alpha, beta = closed_form_coefficients(p, c)
        for scale in (0.5, 3.0, 89.0):
            a2, b2 = closed_form_coefficients(scale * p, c)
            assert b2 == pytest.approx(beta / scale, rel=1e-12)
            assert a2 == pytest.approx(alpha, abs=1e-12)


@pytest.fixture(scope="module")
def cohort():
    design = synth.build_design(seed=21)
    pop = synth.draw_population(synth.LatentConfig(n_students=3000), seed=21)
    truth = synth.draw_difficulty(180, sd=0.10, seed=21)
    resp = synth.simulate_responses(design, pop, truth, seed=21)
    table = estimate_difficulty(resp, method="pooled")
    return resp, pop, table


class TestCohortDecomposition:
    def test_score_identity_exact_for_single_fit_specs(self, cohort):
        resp, _, table = cohort
        observed = resp.fraction_correct()
        for spec in ("baseline", "day_fe", "subject_fe"):
            est = decompose_cohort(resp, difficulty=table, spec=spec)
            assert est.n_students == 3000
            np.testing.assert_array_equal(est.student_ids, resp.student_ids)
            gap = np.abs(implied_score(est) - observed)
            assert gap.max() < 1e-10, spec

    def test_estimates_track_latent_skills(self, cohort):
        resp, pop, table = cohort
        est = decompose_cohort(resp, difficulty=table)
        assert np.corrcoef(est.alpha_hat, pop.alpha_true)[0, 1] > 0.8
        assert np.corrcoef(est.beta_hat, pop.beta_true)[0, 1] > 0.3
        assert est.alpha_hat.mean() == pytest.approx(0.45, abs=0.01)
        assert est.beta_hat.mean() == pytest.approx(-0.058, abs=0.01)
        # estimation noise inflates the spread of the endurance estimates
        assert 0.10 < est.beta_hat.std() < 0.20
        assert np.corrcoef(est.alpha_hat, est.beta_hat)[0, 1] < -0.2

    def test_difficulty_loading_estimated_when_provided(self, cohort):
        resp, _, table = cohort
        with_diff = decompose_cohort(resp, difficulty=table)
        without = decompose_cohort(resp)
        assert with_diff.delta_hat.mean() > 0.5  # hit rate rises with easiness
        np.testing.assert_array_equal(without.delta_hat, 0.0)
        np.testing.assert_array_equal(without.mean_difficulty, 0.0)

    def test_demean_modes_agree_when_everyone_sees_all_questions(self, cohort):
        resp, _, table = cohort
        a = decompose_cohort(resp, difficulty=table, demean="per_booklet")
        b = decompose_cohort(resp, difficulty=table, demean="global")
        np.testing.assert_allclose(a.alpha_hat, b.alpha_hat, atol=1e-12)
        np.testing.assert_allclose(a.beta_hat, b.beta_hat, atol=1e-12)

    def test_unknown_spec_or_demean(self, cohort):
        resp, _, _ = cohort
        with pytest.raises(MethodUnknown):
            decompose_cohort(resp, spec="quantile")
        with pytest.raises(MethodUnknown):
            decompose_cohort(resp, demean="within_student")

    def test_single_student_matches_cohort_batch(self, cohort):
        resp, _, table = cohort
        est = decompose_cohort(resp, difficulty=table)
        for sid in (0, 117, 1504, 2999):
            row = decompose_student(resp, sid, difficulty=table)
            i = int(np.searchsorted(est.student_ids, sid))
            assert row.alpha_hat == pytest.approx(est.alpha_hat[i], abs=1e-10)
            assert row.beta_hat == pytest.approx(est.beta_hat[i], abs=1e-10)
            assert row.delta_hat == pytest.approx(est.delta_hat[i], abs=1e-10)
            assert row.se_alpha == pytest.approx(est.se_alpha[i], abs=1e-10)
            assert row.se_beta == pytest.approx(est.se_beta[i], abs=1e-10)
            assert row.mean_posnorm == pytest.approx(est.mean_posnorm[i], abs=1e-12)

    def test_per_student_se_matches_direct_fit(self, cohort):
        resp, _, table = cohort
        est = decompose_cohort(resp, difficulty=table)
        design = resp.design
        diff = table.values_for(design.question_ids)
        diff = diff - diff.mean()
        for i in (3, 42, 2717):
            posn = (resp.position[i].astype(float) - 1.0) / 89.0
            x = regress.DesignMatrix(
                np.column_stack([np.ones(180), posn, diff]),
                ("const", "pos_norm", "difficulty"),
                True,
            )
            fit = regress.ols_fit(x, resp.correct[i].astype(float))
            assert est.alpha_hat[i] == pytest.approx(fit.coefficients[0], abs=1e-10)
            assert est.beta_hat[i] == pytest.approx(fit.coefficients[1], abs=1e-10)
            assert est.se_alpha[i] == pytest.approx(fit.se_homoskedastic[0], abs=1e-10)
            assert est.se_beta[i] == pytest.approx(fit.se_homoskedastic[1], abs=1e-10)

    def test_shuffled_students_give_identical_sorted_table(self, cohort):
        resp, _, table = cohort
        perm = np.random.default_rng(9).permutation(resp.n_students)
        shuffled = dataclasses.replace(
            resp,
            student_ids=resp.student_ids[perm],
            booklet=resp.booklet[perm],
            position=resp.position[perm],
            answered=resp.answered[perm],
            correct=resp.correct[perm],
        )
        base = decompose_cohort(resp, difficulty=table)
        other = decompose_cohort(shuffled, difficulty=table)
        a = np.argsort(base.student_ids)
        b = np.argsort(other.student_ids)
        np.testing.assert_array_equal(base.student_ids[a], other.student_ids[b])
        for field in ("alpha_hat", "beta_hat", "delta_hat", "se_alpha", "se_beta"):
            np.testing.assert_array_equal(
                getattr(base, field)[a], getattr(other, field)[b], err_msg=field
            )

    def test_missing_student(self, cohort):
        resp, _, _ = cohort
        with pytest.raises(Empty):
            decompose_student(resp, 999_999)

    def test_eligibility_exclusions(self, cohort):
        resp, _, _ = cohort
        est = decompose_cohort(resp, min_items=181)
        assert est.n_students == 0
        assert len(est.excluded) == 3000
        assert {r for _, r in est.excluded} == {"too_few_items"}
        est2 = decompose_cohort(resp, min_positions=91)
        assert est2.n_students == 0
        assert {r for _, r in est2.excluded} == {"too_few_positions"}
        with pytest.raises(TooFewItems):
            decompose_student(resp, 0, min_items=181)

    def test_empty_matrix(self, cohort):
        resp, _, _ = cohort
        empty = dataclasses.replace(
            resp,
            student_ids=resp.student_ids[:0],
            booklet=resp.booklet[:0],
            position=resp.position[:0],
            answered=resp.answered[:0],
            correct=resp.correct[:0],
        )
        with pytest.raises(Empty):
            decompose_cohort(empty)


@pytest.fixture(scope="module")
def small():
    design = synth.build_design(seed=22)
    pop = synth.draw_population(synth.LatentConfig(n_students=30), seed=22)
    return synth.simulate_responses(design, pop, np.zeros(180), seed=22)


class TestSpecVariants:
    def test_per_day_avg_averages_daily_closed_forms(self, small):
        resp = small
        design = resp.design
        est = decompose_cohort(resp, spec="per_day_avg")
        for i in range(resp.n_students):
            posn = (resp.position[i].astype(float) - 1.0) / 89.0
            parts_b, parts_va, parts_vb, parts_a = [], [], [], []
            for day in range(2):
                cols = design.day_of == day
                x = regress.DesignMatrix(
                    np.column_stack([np.ones(90), posn[cols]]), ("c", "p"), True
                )
                fit = regress.ols_fit(x, resp.correct[i, cols].astype(float))
                parts_a.append(fit.coefficients[0])
                parts_b.append(fit.coefficients[1])
                parts_va.append(fit.se_homoskedastic[0] ** 2)
                parts_vb.append(fit.se_homoskedastic[1] ** 2)
            assert est.alpha_hat[i] == pytest.approx(np.mean(parts_a), abs=1e-10)
            assert est.beta_hat[i] == pytest.approx(np.mean(parts_b), abs=1e-10)
            assert est.se_beta[i] == pytest.approx(
                np.sqrt(np.sum(parts_vb)) / 2, abs=1e-10
            )

    def test_per_subject_avg_averages_subject_closed_forms(self, small):
        resp = small
        design = resp.design
        est = decompose_cohort(resp, spec="per_subject_avg")
        subjects = sorted(set(design.subject_of.tolist()))
        betas = np.zeros(resp.n_students)
        for i in range(resp.n_students):
            posn = (resp.position[i].astype(float) - 1.0) / 89.0
            parts = []
            for s in subjects:
                cols = design.subject_of == s
                _, b = closed_form_coefficients(
                    posn[cols], resp.correct[i, cols].astype(float)
                )
                parts.append(b)
            betas[i] = np.mean(parts)
        np.testing.assert_allclose(est.beta_hat, betas, atol=1e-10)

    def test_correlation_spec_is_pearson_r(self, small):
        resp = small
        est = decompose_cohort(resp, spec="correlation")
        assert (np.abs(est.beta_hat) <= 1.0).all()
        for i in (0, 7, 29):
            posn = (resp.position[i].astype(float) - 1.0) / 89.0
            r = np.corrcoef(posn, resp.correct[i].astype(float))[0, 1]
            assert est.beta_hat[i] == pytest.approx(r, abs=1e-10)
        # intercept column still reports the level fit
        base = decompose_cohort(resp, spec="baseline")
        np.testing.assert_allclose(est.alpha_hat, base.alpha_hat, atol=1e-10)

    def test_fe_specs_report_adjustment_term(self, small):
        resp = small
        est = decompose_cohort(resp, spec="day_fe")
        assert (est.fe_adjust != 0).any()
        base = decompose_cohort(resp, spec="baseline")
        np.testing.assert_array_equal(base.fe_adjust, 0.0)
        # day dummies only refine the fit; the skill readings barely move
        assert np.abs(est.beta_hat.mean() - base.beta_hat.mean()) < 0.02


class TestLatentMoments:
    def _fake_estimates(self, alpha, beta, se_a, se_b):
        n = len(alpha)
        return SkillEstimates(
            spec="baseline",
            student_ids=np.arange(n),
            alpha_hat=np.asarray(alpha, dtype=float),
            beta_hat=np.asarray(beta, dtype=float),
            delta_hat=np.zeros(n),
            se_alpha=np.asarray(se_a, dtype=float),
            se_beta=np.asarray(se_b, dtype=float),
            n_items=np.full(n, 180),
            mean_posnorm=np.full(n, 0.5),
            mean_difficulty=np.zeros(n),
            fe_adjust=np.zeros(n),
        )

    def test_noise_corrected_spread(self):
        est = self._fake_estimates(
            [0.0, 1.0, 2.0, 3.0], [0.0, -1.0, -2.0, -3.0], [1.0] * 4, [0.5] * 4
        )
        m = latent_moments(est)
        # sample variance 5/3 each; noise 1 and 0.25
        assert m.sd_alpha_raw == pytest.approx(np.sqrt(5 / 3), abs=1e-12)
        assert m.sd_alpha_latent == pytest.approx(np.sqrt(5 / 3 - 1.0), abs=1e-12)
        assert m.sd_beta_latent == pytest.approx(np.sqrt(5 / 3 - 0.25), abs=1e-12)
        assert not m.clamped_alpha and not m.clamped_beta
        assert m.corr_alpha_beta == pytest.approx(-1.0, abs=1e-12)
        assert m.n == 4

    def test_clamping_at_zero(self):
        est = self._fake_estimates(
            [0.0, 0.1, 0.2, 0.3], [0.0, -0.1, -0.2, -0.3], [5.0] * 4, [0.01] * 4
        )
        m = latent_moments(est)
        assert m.clamped_alpha
        assert m.sd_alpha_latent == 0.0
        assert not m.clamped_beta

    def test_needs_two_students(self):
        est = self._fake_estimates([0.5], [-0.1], [0.1], [0.1])
        with pytest.raises(Empty):
            latent_moments(est)

    def test_recovers_population_spread_from_noisy_estimates(self, cohort):
        resp, pop, table = cohort
        est = decompose_cohort(resp, difficulty=table)
        m = latent_moments(est)
        assert m.sd_alpha_latent == pytest.approx(pop.alpha_true.std(), abs=0.01)
        assert m.sd_beta_latent == pytest.approx(pop.beta_true.std(), abs=0.012)
        assert m.sd_beta_raw > m.sd_beta_latent  # noise inflates the raw spread


class TestShrinkage:
    def test_hand_weights(self):
        est = TestLatentMoments()._fake_estimates(
            [0.0, 1.0, 2.0, 3.0], [0.0, -1.0, -2.0, -3.0], [1.0] * 4, [0.5] * 4
        )
        shrunk = shrink_skill_estimates(est)
        # alpha: signal 2/3, weight (2/3)/(2/3+1) = 0.4, mean 1.5
        np.testing.assert_allclose(
            shrunk.alpha_hat, 0.4 * est.alpha_hat + 0.6 * 1.5, atol=1e-12
        )
        # beta: signal 5/3-1/4, weight = signal/(signal+1/4)
        w = (5 / 3 - 0.25) / (5 / 3)
        np.testing.assert_allclose(
            shrunk.beta_hat, w * est.beta_hat + (1 - w) * -1.5, atol=1e-12
        )
        assert shrunk.spec == "baseline+shrunk"

    def test_noisier_students_shrink_harder(self):
        est = TestLatentMoments()._fake_estimates(
            np.linspace(0, 4, 50),
            np.linspace(0, -4, 50),
            np.r_[np.full(25, 0.05), np.full(25, 0.50)],
            np.full(50, 0.1),
        )
        shrunk = shrink_skill_estimates(est)
        pull = np.abs(shrunk.alpha_hat - est.alpha_hat)
        assert pull[25:].mean() > pull[:25].mean()

    def test_one_clamped_skill_collapses_with_warning(self):
        est = TestLatentMoments()._fake_estimates(
            [0.0, 0.1, 0.2, 0.3], [0.0, -1.0, -2.0, -3.0], [5.0] * 4, [0.1] * 4
        )
        with pytest.warns(UserWarning, match="ability"):
            shrunk = shrink_skill_estimates(est)
        np.testing.assert_allclose(shrunk.alpha_hat, 0.15, atol=1e-12)
        assert (shrunk.beta_hat != est.beta_hat.mean()).any()

    def test_both_clamped_raises(self):
        est = TestLatentMoments()._fake_estimates(
            [0.0, 0.1, 0.2, 0.3], [0.0, -0.1, -0.2, -0.3], [5.0] * 4, [5.0] * 4
        )
        with pytest.raises(DegenerateVariance):
            shrink_skill_estimates(est)

    def test_shrinkage_moves_estimates_toward_truth(self, cohort):
        resp, pop, table = cohort
        est = decompose_cohort(resp, difficulty=table)
        shrunk = shrink_skill_estimates(est)
        mse_raw = ((est.beta_hat - pop.beta_true) ** 2).mean()
        mse_shrunk = ((shrunk.beta_hat - pop.beta_true) ** 2).mean()
        assert mse_shrunk < mse_raw
        mse_raw_a = ((est.alpha_hat - pop.alpha_true) ** 2).mean()
        mse_shrunk_a = ((shrunk.alpha_hat - pop.alpha_true) ** 2).mean()
        assert mse_shrunk_a < mse_raw_a
        # shrunk spread sits near the latent spread rather than the raw one
        assert abs(shrunk.beta_hat.std() - pop.beta_true.std()) < abs(
            est.beta_hat.std() - pop.beta_true.std()
        )


class TestRetestReliability:
    def test_identical_sittings_are_perfectly_stable(self, cohort):
        resp, _, table = cohort
        est = decompose_cohort(resp, difficulty=table)
        rel = retest_reliability(est, est, n_bins=20)
        assert rel.r_alpha == pytest.approx(1.0, abs=1e-12)
        assert rel.r_beta == pytest.approx(1.0, abs=1e-12)
        assert rel.n_matched == 3000
        for skill in ("ability", "endurance"):
            sel = rel.skill == skill
            assert rel.bin_n[sel].sum() == 3000
            assert (np.diff(rel.mean_first[sel]) >= -1e-12).all()
            np.testing.assert_allclose(
                rel.mean_first[sel], rel.mean_second[sel], atol=1e-12
            )

    def test_partial_overlap(self, cohort):
        resp, _, table = cohort
        est = decompose_cohort(resp, difficulty=table)
        first = est.subset(est.student_ids < 100)
        second = est.subset((est.student_ids >= 50) & (est.student_ids < 200))
        rel = retest_reliability(first, second)
        assert rel.n_matched == 50

    def test_too_few_matched(self, cohort):
        resp, _, table = cohort
        est = decompose_cohort(resp, difficulty=table)
        with pytest.raises(TooFewMatched):
            retest_reliability(est.subset(est.student_ids < 10), est)

    def test_transient_noise_attenuates_stability(self):
        design = synth.build_design(seed=23)
        pop = synth.draw_population(synth.LatentConfig(n_students=2000), seed=23)
        truth = synth.draw_difficulty(180, sd=0.10, seed=23)
        quiet = synth.RetestConfig(sd_alpha_transient=0.0, sd_beta_transient=0.0)
        loud = synth.RetestConfig(sd_alpha_transient=0.25, sd_beta_transient=0.25)
        out = {}
        for name, rc in (("quiet", quiet), ("loud", loud)):
            r0, r1 = synth.simulate_retest(pop, design, truth, retest_config=rc, seed=23)
            e0 = decompose_cohort(r0)
            e1 = decompose_cohort(r1)
            out[name] = retest_reliability(e0, e1)
        assert out["quiet"].r_alpha > out["loud"].r_alpha + 0.1
        assert out["quiet"].r_alpha > 0.6
        assert out["quiet"].r_beta > out["loud"].r_beta

    def test_noiseless_long_exam_is_nearly_perfectly_stable(self):
        # With transient shocks off, the only instability left is sampling
        # error in the per-student fits; 900 questions a day shrinks it
        # enough (for a wide endurance spread) that both skills should
        # correlate almost perfectly across sittings.
        design = synth.build_design(
            synth.DesignConfig(questions_per_day=900), seed=24
        )
        pop = synth.draw_population(
            synth.LatentConfig(n_students=800, sd_beta=0.25), seed=24
        )
        truth = synth.draw_difficulty(design.n_questions, sd=0.10, seed=24)
        quiet = synth.RetestConfig(sd_alpha_transient=0.0, sd_beta_transient=0.0)
        r0, r1 = synth.simulate_retest(pop, design, truth, retest_config=quiet, seed=24)
        rel = retest_reliability(decompose_cohort(r0), decompose_cohort(r1))
        assert rel.r_alpha >= 0.95
        assert rel.r_beta >= 0.95


class TestFilters:
    def _graded(self):
        n = 100
        return TestLatentMoments()._fake_estimates(
            np.arange(n, dtype=float),
            -np.arange(n, dtype=float),
            np.full(n, 0.1),
            np.full(n, 0.1),
        )

    def test_drop_tails(self):
        est = self._graded()
        dec = filter_estimates(est, drop_tails="decile")
        assert dec.n_students == 80
        assert dec.alpha_hat.min() == 10.0 and dec.alpha_hat.max() == 89.0
        quint = filter_estimates(est, drop_tails="quintile")
        assert quint.n_students == 60
        with pytest.raises(MethodUnknown):
            filter_estimates(est, drop_tails="percentile")

    def test_drop_positive_endurance(self):
        est = self._graded()
        est.beta_hat[:5] = 0.5
        kept = filter_estimates(est, drop_positive_endurance=True)
        assert kept.n_students == 95
        assert (kept.beta_hat <= 0).all()
