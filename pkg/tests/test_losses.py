import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sirl.autodiff import (
    ShapeMismatchError,
    Var,
    backward,
    finite_difference_check,
    make_rng,
)
from sirl.losses import (
    DomainTarget,
    KernelConfig,
    SubjectBatch,
    Triplet,
    classification_loss,
    combined_pretrain_loss,
    domain_loss,
    euclidean_distance,
    gradient_reversal,
    median_heuristic_bandwidth,
    mmd_pairwise,
    mmd_rbf,
    recon_loss,
    triplet_loss,
)

SIGMA_ONE = KernelConfig(bandwidth=1.0)


class TestReconLoss:
    def test_identical_signals_cost_zero(self):
        x = np.linspace(-1, 1, 12).reshape(3, 4)
        assert recon_loss(x, x.copy()).item() == 0.0

    def test_hand_computed_mse(self):
        # errors 1 and 2 over two entries -> (1 + 4) / 2
        loss = recon_loss(np.array([1.0, 2.0]), np.array([2.0, 4.0]))
        assert loss.item() == pytest.approx(2.5, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            recon_loss(np.zeros(3), np.zeros(4))

    def test_gradient_matches_finite_differences(self):
        rng = make_rng(11)
        target = rng.normal(size=(2, 6))
        point = rng.normal(size=(2, 6))
        report = finite_difference_check(lambda v: recon_loss(target, v), point)
        assert report.passed, report.max_rel_error


class TestMmdRbf:
    def test_singleton_sets_closed_form(self):
        # k(0,0) = k(r2,r2) = 1 and k(0, r2) = exp(-2/2) = 1/e,
        # so the biased estimate is 1 + 1 - 2/e.
        a = np.array([[0.0]])
        b = np.array([[math.sqrt(2.0)]])
        got = mmd_rbf(a, b, SIGMA_ONE).item()
        assert got == pytest.approx(2.0 - 2.0 * math.exp(-1.0), abs=1e-12)

    def test_identical_sets_give_zero(self):
        rng = make_rng(3)
        a = rng.normal(size=(7, 4))
        assert mmd_rbf(a, a.copy(), SIGMA_ONE).item() == 0.0

    def test_symmetric_in_arguments(self):
        rng = make_rng(5)
        a, b = rng.normal(size=(6, 3)), rng.normal(size=(9, 3))
        for cfg in (SIGMA_ONE, KernelConfig()):
            assert mmd_rbf(a, b, cfg).item() == pytest.approx(
                mmd_rbf(b, a, cfg).item(), abs=1e-12
            )

    def test_shifted_cloud_scores_higher_than_resampled_cloud(self):
        rng = make_rng(7)
        base = rng.normal(size=(40, 2))
        resampled = rng.normal(size=(40, 2))
        shifted = rng.normal(size=(40, 2)) + 3.0
        near = mmd_rbf(base, resampled, SIGMA_ONE).item()
        far = mmd_rbf(base, shifted, SIGMA_ONE).item()
        assert far > near * 5

    def test_median_heuristic_matches_explicit_sigma(self):
        rng = make_rng(9)
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(8, 3))
        sigma = median_heuristic_bandwidth(np.concatenate([a, b]))
        auto = mmd_rbf(a, b, KernelConfig()).item()
        manual = mmd_rbf(a, b, KernelConfig(bandwidth=sigma)).item()
        assert auto == manual

    def test_median_heuristic_hand_example(self):
        # squared gaps of {0, 1, 3}: 1, 9, 4 -> median 4 -> sigma = sqrt(4 / 2)
        pts = np.array([[0.0], [1.0], [3.0]])
        assert median_heuristic_bandwidth(pts) == pytest.approx(math.sqrt(2.0))

    def test_median_heuristic_degenerate_points_fall_back(self):
        assert median_heuristic_bandwidth(np.ones((4, 2))) == 1.0
        assert median_heuristic_bandwidth(np.ones((1, 2))) == 1.0

    def test_input_validation(self):
        ok = np.zeros((2, 3))
        with pytest.raises(ValueError):
            mmd_rbf(np.zeros((0, 3)), ok)
        with pytest.raises(ShapeMismatchError):
            mmd_rbf(np.zeros((2, 4)), ok)
        with pytest.raises(ShapeMismatchError):
            mmd_rbf(np.zeros(3), ok)

    def test_kernel_config_validation(self):
        with pytest.raises(ValueError):
            KernelConfig(family="laplace")
        with pytest.raises(ValueError):
            KernelConfig(bandwidth=0.0)
        with pytest.raises(ValueError):
            KernelConfig(bandwidth="mean_heuristic")

    def test_gradients_match_finite_differences(self):
        rng = make_rng(13)
        b = rng.normal(size=(4, 3))
        point = rng.normal(size=(3, 3))
        report = finite_difference_check(
            lambda v: mmd_rbf(v, b, SIGMA_ONE), point
        )
        assert report.passed, report.max_rel_error
        report = finite_difference_check(
            lambda v: mmd_rbf(b, v, SIGMA_ONE), point
        )
        assert report.passed, report.max_rel_error

    @settings(deadline=None, max_examples=40)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6))
    def test_nonnegative_for_random_sets(self, seed, m, n):
        rng = make_rng(seed)
        val = mmd_rbf(rng.normal(size=(m, 3)), rng.normal(size=(n, 3)), SIGMA_ONE)
        assert val.item() >= 0.0


class TestMmdPairwise:
    def _batches(self, rng, sizes):
        return [
            SubjectBatch(f"s{i}", rng.normal(size=(m, 4)) + i)
            for i, m in enumerate(sizes)
        ]

    def test_mean_over_unordered_pairs(self):
        rng = make_rng(21)
        batches = self._batches(rng, [5, 3, 4])
        got = mmd_pairwise(batches, SIGMA_ONE).item()
        singles = [
            mmd_rbf(batches[i].latents, batches[j].latents, SIGMA_ONE).item()
            for i, j in [(0, 1), (0, 2), (1, 2)]
        ]
        assert got == pytest.approx(sum(singles) / 3.0, rel=1e-12)

    def test_two_subjects_is_plain_mmd(self):
        rng = make_rng(22)
        batches = self._batches(rng, [4, 6])
        assert mmd_pairwise(batches, SIGMA_ONE).item() == pytest.approx(
            mmd_rbf(batches[0].latents, batches[1].latents, SIGMA_ONE).item()
        )

    def test_single_subject_contributes_zero_and_warns(self, caplog):
        batch = [SubjectBatch("solo", np.ones((3, 2)))]
        with caplog.at_level(logging.WARNING, logger="sirl.losses"):
            assert mmd_pairwise(batch, SIGMA_ONE).item() == 0.0
        assert any("1 subject" in r.message for r in caplog.records)

    def test_empty_batch_contributes_zero_and_warns(self, caplog):
        with caplog.at_level(logging.WARNING, logger="sirl.losses"):
            assert mmd_pairwise([], SIGMA_ONE).item() == 0.0
        assert len(caplog.records) == 1

    def test_gradients_reach_every_subject(self):
        rng = make_rng(23)
        latents = [Var(rng.normal(size=(3, 2)) + i) for i in range(3)]
        batches = [SubjectBatch(f"s{i}", v) for i, v in enumerate(latents)]
        backward(mmd_pairwise(batches, SIGMA_ONE))
        for v in latents:
            assert v.grad is not None
            assert np.any(v.grad != 0.0)

    def test_subject_batch_validates_shape(self):
        with pytest.raises(ShapeMismatchError):
            SubjectBatch("bad", np.zeros(4))
        with pytest.raises(ShapeMismatchError):
            SubjectBatch("empty", np.zeros((0, 4)))


class TestDomainLoss:
    def test_two_way_hand_example(self):
        loss = domain_loss(np.array([0.5, 0.5]), DomainTarget(np.array([1.0, 0.0])))
        assert loss.item() == pytest.approx(0.5, abs=1e-15)

    def test_uniform_over_three_hand_example(self):
        uniform = np.full(3, 1.0 / 3.0)
        loss = domain_loss(uniform, DomainTarget(np.array([0.0, 1.0, 0.0])))
        assert loss.item() == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_perfect_prediction_is_free(self):
        t = DomainTarget.for_subject(2, 4)
        assert domain_loss(t.one_hot.copy(), t).item() == 0.0

    def test_batched_rows_average(self):
        preds = np.array([[0.5, 0.5], [0.9, 0.1]])
        targets = np.array([[1.0, 0.0], [1.0, 0.0]])
        per_row = [
            domain_loss(preds[i], DomainTarget(targets[i])).item() for i in range(2)
        ]
        got = domain_loss(preds, targets).item()
        assert got == pytest.approx(np.mean(per_row), abs=1e-15)

    def test_one_hot_enforced(self):
        with pytest.raises(ValueError):
            DomainTarget(np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            DomainTarget(np.array([1.0, 1.0]))

    def test_for_subject_builds_expected_vector(self):
        assert np.array_equal(
            DomainTarget.for_subject(1, 3).one_hot, np.array([0.0, 1.0, 0.0])
        )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            domain_loss(np.zeros(3), DomainTarget.for_subject(0, 2))

    def test_gradient_matches_finite_differences(self):
        target = DomainTarget.for_subject(1, 4)
        point = np.array([0.2, 0.4, 0.3, 0.1])
        report = finite_difference_check(lambda v: domain_loss(v, target), point)
        assert report.passed, report.max_rel_error


class TestGradientReversal:
    def test_forward_is_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(gradient_reversal(Var(x)).value, x)

    def test_backward_flips_sign(self):
        x = Var(np.array([1.0, -2.0, 3.0]))
        y = gradient_reversal(x)
        backward((y * y).sum())
        np.testing.assert_allclose(x.grad, -2.0 * x.value)

    def test_scale_multiplies_reversed_gradient(self):
        x = Var(np.array([1.0, 2.0]))
        y = gradient_reversal(x, scale=1.5)
        backward((y * y).sum())
        np.testing.assert_allclose(x.grad, 1.5 * (-2.0 * x.value))

    def test_upstream_parameters_see_flipped_sign(self):
        # same computation with and without the reversal layer: the gradient
        # on the upstream weight must be exactly negated
        w_plain = Var(np.array([0.7, -0.3]))
        w_rev = Var(np.array([0.7, -0.3]))
        x = np.array([1.5, 2.5])
        backward(((w_plain * x) * (w_plain * x)).sum())
        h = gradient_reversal(w_rev * x)
        backward((h * h).sum())
        np.testing.assert_allclose(w_rev.grad, -w_plain.grad)


class TestTripletLoss:
    def test_equidistant_pair_costs_the_margin(self):
        t = Triplet(np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert triplet_loss(t).item() == pytest.approx(1.0, abs=1e-12)

    def test_well_separated_negative_costs_nothing(self):
        t = Triplet(np.array([0.0]), np.array([0.0]), np.array([3.0]))
        assert triplet_loss(t).item() == 0.0

    def test_inverted_geometry_hand_example(self):
        # d(a,p) = 3, d(a,n) = 1, margin 1 -> 3 - 1 + 1
        t = Triplet(np.array([0.0]), np.array([3.0]), np.array([1.0]))
        assert triplet_loss(t).item() == pytest.approx(3.0, abs=1e-12)

    def test_custom_margin(self):
        t = Triplet(
            np.array([0.0]), np.array([1.0]), np.array([2.0]), margin=2.5
        )
        # gap = 1 - 2 = -1, hinge at -1 + 2.5
        assert triplet_loss(t).item() == pytest.approx(1.5, abs=1e-12)

    def test_margin_must_be_positive(self):
        with pytest.raises(ValueError):
            Triplet(np.zeros(2), np.zeros(2), np.ones(2), margin=0.0)

    def test_distance_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            euclidean_distance(np.zeros(2), np.zeros(3))

    def test_gradient_matches_finite_differences(self):
        # anchored away from both the hinge corner and zero distance
        positive = np.array([1.0, 0.5, -0.25])
        negative = np.array([-0.5, 1.5, 0.75])
        point = np.array([0.1, -0.2, 0.3])
        report = finite_difference_check(
            lambda v: triplet_loss(Triplet(v, positive, negative)), point
        )
        assert report.passed, report.max_rel_error

    @settings(deadline=None, max_examples=40)
    @given(st.integers(0, 2**32 - 1))
    def test_never_negative(self, seed):
        rng = make_rng(seed)
        a, p, n = rng.normal(size=(3, 4))
        assert triplet_loss(Triplet(a, p, n)).item() >= 0.0


class TestClassificationLoss:
    def test_coin_flip_probability_costs_ln_two(self):
        assert classification_loss(
            np.array(0.5), np.array(1.0)
        ).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_batch_averages_per_sample_terms(self):
        probs = np.array([0.9, 0.2, 0.6])
        labels = np.array([1.0, 0.0, 1.0])
        singles = [
            classification_loss(np.array(p), np.array(y)).item()
            for p, y in zip(probs, labels)
        ]
        assert classification_loss(probs, labels).item() == pytest.approx(
            np.mean(singles), rel=1e-12
        )

    def test_confident_wrong_prediction_is_clamped_finite(self):
        worst = classification_loss(np.array(0.0), np.array(1.0)).item()
        assert math.isfinite(worst)
        assert worst == pytest.approx(-math.log(1e-7), rel=1e-9)
        assert classification_loss(np.array(1.0), np.array(0.0)).item() == pytest.approx(
            worst, rel=1e-9
        )

    def test_confident_right_prediction_is_nearly_free(self):
        assert classification_loss(np.array(1.0), np.array(1.0)).item() < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            classification_loss(np.zeros(2), np.zeros(3))

    def test_gradient_matches_finite_differences(self):
        labels = np.array([1.0, 0.0, 1.0, 0.0])
        point = np.array([0.7, 0.3, 0.45, 0.6])
        report = finite_difference_check(
            lambda v: classification_loss(v, labels), point
        )
        assert report.passed, report.max_rel_error

    @settings(deadline=None, max_examples=40)
    @given(
        st.floats(0.0, 1.0, allow_nan=False),
        st.sampled_from([0.0, 1.0]),
    )
    def test_never_negative(self, p, y):
        assert classification_loss(np.array(p), np.array(y)).item() >= 0.0


class TestCombinedPretrainLoss:
    def test_plain_mode_passes_reconstruction_through(self):
        recon = Var(1.25)
        assert combined_pretrain_loss(recon, mode="none") is recon

    def test_mmd_mode_applies_default_weight(self):
        got = combined_pretrain_loss(Var(1.0), Var(0.5), mode="mmd")
        assert got.item() == pytest.approx(1.0 + 0.2 * 0.5, abs=1e-15)

    def test_zero_weight_short_circuits_to_reconstruction(self):
        recon = Var(2.0)
        got = combined_pretrain_loss(recon, Var(123.0), mode="mmd", lambda_mmd=0.0)
        assert got is recon

    def test_dann_mode_adds_domain_term_at_unit_weight(self):
        got = combined_pretrain_loss(Var(1.0), Var(0.25), mode="dann")
        assert got.item() == pytest.approx(1.25, abs=1e-15)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            combined_pretrain_loss(Var(1.0), Var(1.0), mode="adversarial")

    def test_missing_regularizer_rejected(self):
        with pytest.raises(ValueError):
            combined_pretrain_loss(Var(1.0), mode="mmd")
