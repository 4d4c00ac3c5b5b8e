import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sirl.autodiff import Var, make_rng
from sirl.data import Dataset, Sample, SynthConfig, split_by_subject, synth_generate
from sirl.losses import KernelConfig, SubjectBatch, mmd_pairwise
from sirl.models import auto_spec, build
from sirl.training import (
    Adam,
    AggregateReport,
    Sgd,
    TrainingConfig,
    TrainingDivergedError,
    config_for_variant,
    evaluate,
    finetune,
    make_optimizer,
    metrics_records,
    person_specific,
    person_specific_trials,
    pretrain,
    run_trial,
    run_trials,
    sample_triplets,
    split_within_subject,
)

SPEC32 = auto_spec(32, latent_dim=8, n_subjects=3)


def small_cohort(shift=0.0, noise=0.05, subjects=3, per_subject=10, seed=3):
    return synth_generate(
        SynthConfig(
            n_subjects=subjects,
            samples_per_subject=per_subject,
            length=32,
            subject_shift_scale=shift,
            noise_sd=noise,
            seed=seed,
        )
    )


# -- config -------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(epochs=0),
        dict(batch_size=0),
        dict(trials=0),
        dict(learning_rate=0.0),
        dict(learning_rate=-1.0),
        dict(lambda_mmd=float("nan")),
        dict(lambda_triplet=float("inf")),
        dict(pretrain_mode="adversarial"),
        dict(triplet_margin=0.0),
        dict(optimizer="rmsprop"),
    ],
)
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        TrainingConfig(**kwargs)


def test_config_defaults_match_protocol():
    config = TrainingConfig()
    assert config.epochs == 100
    assert config.batch_size == 32
    assert config.learning_rate == 0.001
    assert config.lambda_mmd == 0.2
    assert config.lambda_triplet == 0.2
    assert config.trials == 10
    assert config.optimizer == "adam"


def test_variant_table():
    base = TrainingConfig()
    assert config_for_variant("baseline", base).pretrain_mode == "none"
    assert config_for_variant("mmd", base).pretrain_mode == "mmd"
    assert config_for_variant("dann", base).pretrain_mode == "dann"
    triplet = config_for_variant("triplet", base)
    assert triplet.pretrain_mode == "none" and triplet.finetune_triplet
    both = config_for_variant("mmd+triplet", base)
    assert both.pretrain_mode == "mmd" and both.finetune_triplet
    with pytest.raises(ValueError, match="unknown variant"):
        config_for_variant("tripplet", base)


# -- optimizers ---------------------------------------------------------------


def test_sgd_step_is_plain_descent():
    p = Var(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, 1.0])
    Sgd([p], learning_rate=0.1).step()
    assert p.value == pytest.approx([0.95, -2.1], abs=1e-15)


def test_adam_first_step_is_normalized_gradient():
    # After bias correction the first update is lr * g / (|g| + eps).
    p = Var(np.array([3.0, -1.0, 0.5]))
    g = np.array([2.0, -0.001, 0.0])
    p.grad = g.copy()
    Adam([p], learning_rate=0.01).step()
    expected = np.array([3.0, -1.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    assert p.value == pytest.approx(expected, abs=1e-12)


def test_adam_second_step_matches_reference_recurrence():
    p = Var(np.array([1.0]))
    opt = Adam([p], learning_rate=0.1)
    m = v = 0.0
    x = 1.0
    for t in (1, 2):
        g = 2.0 * x  # gradient of x^2
        p.grad = np.array([g])
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p.value[0] == pytest.approx(x, abs=1e-12)


def test_optimizers_skip_missing_gradients():
    p, q = Var(np.array([1.0])), Var(np.array([2.0]))
    q.grad = np.array([1.0])
    for opt in (Sgd([p, q], 0.1), Adam([p, q], 0.1)):
        p.grad = None
        q.grad = np.array([1.0])
        before = p.value.copy()
        opt.step()
        assert np.array_equal(p.value, before)
        assert not np.array_equal(q.value, np.array([2.0]))


def test_make_optimizer_rejects_unknown():
    with pytest.raises(ValueError, match="unknown optimizer"):
        make_optimizer("momentum", [], 0.1)


# -- pretraining --------------------------------------------------------------


def test_pretrain_converges_to_small_fraction_of_initial_loss():
    cohort = small_cohort(subjects=4, per_subject=40)
    model = build(auto_spec(32, latent_dim=16), seed=7)
    history = pretrain(model, cohort, TrainingConfig(epochs=100, seed=7))
    recon = history["recon"]
    assert len(recon) == 100
    assert recon[-1] < 0.1 * recon[0]
    assert history["regularizer"] == [0.0] * 100


def test_pretrain_improves_in_every_mode():
    cohort = small_cohort(shift=1.0, seed=4)
    for mode in ("none", "mmd", "dann"):
        model = build(SPEC32, seed=5)
        history = pretrain(model, cohort, TrainingConfig(epochs=20, seed=5, pretrain_mode=mode))
        assert history["recon"][-1] < history["recon"][0], mode


def test_pretrain_zero_lambda_matches_plain_mode_bitwise():
    cohort = small_cohort()
    histories = []
    for mode, lam in (("none", 0.2), ("mmd", 0.0)):
        model = build(SPEC32, seed=4)
        config = TrainingConfig(epochs=8, seed=4, pretrain_mode=mode, lambda_mmd=lam)
        histories.append(pretrain(model, cohort, config))
    assert histories[0]["recon"] == histories[1]["recon"]
    assert histories[1]["regularizer"] == [0.0] * 8


def _latent_subject_mmd(model, dataset):
    z = model.encode(dataset.arrays()[0])
    groups = [
        SubjectBatch(s, Var(z.value[[i for i, smp in enumerate(dataset) if smp.subject_id == s]]))
        for s in dataset.subject_ids()
    ]
    return mmd_pairwise(groups, KernelConfig()).item()


def test_mmd_pretraining_pulls_subjects_together():
    cohort = small_cohort(shift=2.0, subjects=4, seed=9)
    scores = {}
    for mode in ("none", "mmd"):
        model = build(auto_spec(32, latent_dim=8, n_subjects=4), seed=5)
        pretrain(model, cohort, TrainingConfig(epochs=30, seed=5, pretrain_mode=mode))
        scores[mode] = _latent_subject_mmd(model, cohort)
    assert scores["mmd"] < scores["none"]


def test_pretrain_history_is_deterministic():
    cohort = small_cohort()
    runs = []
    for _ in range(2):
        model = build(SPEC32, seed=11)
        runs.append(pretrain(model, cohort, TrainingConfig(epochs=5, seed=11)))
    assert runs[0] == runs[1]


def test_pretrain_mmd_needs_multiple_subjects():
    cohort = small_cohort(subjects=1)
    model = build(auto_spec(32, latent_dim=8), seed=0)
    with pytest.raises(ValueError, match=">= 2 subjects"):
        pretrain(model, cohort, TrainingConfig(epochs=1, pretrain_mode="mmd"))


def test_pretrain_dann_needs_matching_domain_head():
    cohort = small_cohort(subjects=3)
    headless = build(auto_spec(32, latent_dim=8), seed=0)
    with pytest.raises(ValueError, match="domain head"):
        pretrain(headless, cohort, TrainingConfig(epochs=1, pretrain_mode="dann"))
    wrong_width = build(auto_spec(32, latent_dim=8, n_subjects=5), seed=0)
    with pytest.raises(ValueError, match="domain head"):
        pretrain(wrong_width, cohort, TrainingConfig(epochs=1, pretrain_mode="dann"))


def test_pretrain_dann_runs_and_reports_domain_loss():
    cohort = small_cohort(subjects=3, shift=1.0)
    model = build(SPEC32, seed=2)
    history = pretrain(model, cohort, TrainingConfig(epochs=3, seed=2, pretrain_mode="dann"))
    assert all(v > 0 for v in history["regularizer"])


def test_pretrain_rejects_empty_dataset():
    model = build(SPEC32, seed=0)
    with pytest.raises(ValueError, match="nonempty"):
        pretrain(model, Dataset([]), TrainingConfig(epochs=1))


def test_divergence_error_names_epoch_and_batch():
    huge = Dataset(
        [Sample("s0", 0, np.full(32, 1.0e200)), Sample("s0", 1, np.full(32, -1.0e200))]
    )
    model = build(auto_spec(32, latent_dim=8), seed=0)
    with np.errstate(over="ignore"), pytest.raises(
        TrainingDivergedError, match="epoch 1, batch 1"
    ):
        pretrain(model, huge, TrainingConfig(epochs=1))


# -- triplet sampling ---------------------------------------------------------


def test_sample_triplets_two_singleton_classes_yield_nothing():
    assert sample_triplets([0, 1], make_rng(0)) == []


def test_sample_triplets_single_class_yields_nothing():
    assert sample_triplets([1, 1, 1], make_rng(0)) == []


def test_sample_triplets_two_by_two():
    triples = sample_triplets([0, 0, 1, 1], make_rng(0))
    assert len(triples) == 4
    assert [t[0] for t in triples] == [0, 1, 2, 3]
    labels = np.array([0, 0, 1, 1])
    for a, p, n in triples:
        assert p != a
        assert labels[p] == labels[a]
        assert labels[n] != labels[a]


@given(st.lists(st.integers(0, 1), min_size=1, max_size=20), st.integers(0, 2**31 - 1))
@settings(max_examples=50)
def test_sample_triplets_respects_pools(labels, seed):
    arr = np.array(labels)
    triples = sample_triplets(labels, make_rng(seed))
    counts = np.bincount(arr, minlength=2)
    expected = 0
    if counts[0] >= 1 and counts[1] >= 1:
        expected = (counts[0] if counts[0] >= 2 else 0) + (counts[1] if counts[1] >= 2 else 0)
    assert len(triples) == expected
    for a, p, n in triples:
        assert p != a and arr[p] == arr[a] and arr[n] != arr[a]


def test_sample_triplets_deterministic_under_seed():
    labels = [0, 1, 0, 1, 1, 0, 0, 1]
    assert sample_triplets(labels, make_rng(42)) == sample_triplets(labels, make_rng(42))


# -- fine-tuning --------------------------------------------------------------


def test_finetune_learns_separable_classes():
    cohort = small_cohort(shift=0.0, per_subject=12)
    train, test = split_by_subject(cohort, ["s0", "s1"])
    model = build(SPEC32, seed=1)
    history = finetune(model, train, TrainingConfig(epochs=150, seed=1))
    assert history["classification"][-1] < history["classification"][0]
    assert evaluate(model, test) >= 0.95


def test_finetune_zero_lambda_matches_plain_bitwise():
    cohort = small_cohort()
    histories = []
    for on, lam in ((False, 0.2), (True, 0.0)):
        model = build(SPEC32, seed=6)
        config = TrainingConfig(epochs=6, seed=6, finetune_triplet=on, lambda_triplet=lam)
        histories.append(finetune(model, cohort, config))
    assert histories[0]["classification"] == histories[1]["classification"]
    assert histories[1]["triplet"] == [0.0] * 6


def test_finetune_triplet_tightens_classes():
    cohort = small_cohort(per_subject=16)
    model = build(SPEC32, seed=8)
    config = TrainingConfig(epochs=30, seed=8, finetune_triplet=True, lambda_triplet=0.5)
    history = finetune(model, cohort, config)
    assert any(v > 0 for v in history["triplet"])
    x, y, _ = cohort.arrays()
    z = model.encode(x).value
    same = [
        np.linalg.norm(z[i] - z[j])
        for i in range(len(y))
        for j in range(i + 1, len(y))
        if y[i] == y[j]
    ]
    other = [
        np.linalg.norm(z[i] - z[j])
        for i in range(len(y))
        for j in range(i + 1, len(y))
        if y[i] != y[j]
    ]
    assert np.mean(same) < np.mean(other)


def test_finetune_single_class_batch_warns_and_skips_triplet(caplog):
    singles = Dataset(
        [Sample("s0", 1, np.sin(np.linspace(0, 4, 32)) + 0.1 * k) for k in range(4)]
    )
    model = build(auto_spec(32, latent_dim=8), seed=0)
    config = TrainingConfig(epochs=1, finetune_triplet=True)
    with caplog.at_level(logging.WARNING, logger="sirl.training"):
        history = finetune(model, singles, config)
    assert "single class" in caplog.text
    assert history["triplet"] == [0.0]


def test_finetune_freeze_encoder_keeps_encoder_fixed():
    cohort = small_cohort()
    model = build(SPEC32, seed=3)
    before = {k: v.value.copy() for k, v in model.params.items()}
    finetune(model, cohort, TrainingConfig(epochs=3, seed=3, freeze_encoder=True))
    for name, original in before.items():
        if name.startswith(("enc", "dec", "dom")):
            assert np.array_equal(model.params[name].value, original), name
        elif name.startswith("cls"):
            assert not np.array_equal(model.params[name].value, original), name


def test_evaluate_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        evaluate(build(SPEC32, seed=0), Dataset([]))


# -- trials -------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_split():
    cohort = small_cohort(shift=1.0, subjects=3, per_subject=8)
    return split_by_subject(cohort, ["s0", "s1"])


def test_run_trial_offsets_seed(tiny_split):
    train, test = tiny_split
    config = TrainingConfig(epochs=2, seed=40, trials=5)
    report, model = run_trial(train, test, SPEC32, config, trial_index=3)
    assert report.seed == 43
    assert report.trial_index == 3
    assert len(report.pretrain_history["recon"]) == 2
    assert 0.0 <= report.accuracy <= 1.0
    assert report.wall_time > 0
    assert model.spec == SPEC32


def test_run_trials_aggregates_and_is_deterministic(tiny_split):
    train, test = tiny_split
    config = TrainingConfig(epochs=2, seed=40, trials=3)
    first, models = run_trials(train, test, SPEC32, config)
    second, _ = run_trials(train, test, SPEC32, config)
    accs = [r.accuracy for r in first.trials]
    assert [r.accuracy for r in second.trials] == accs
    assert first.mean_accuracy == pytest.approx(np.mean(accs), abs=1e-15)
    assert first.sd == pytest.approx(np.std(accs), abs=1e-15)
    assert len(models) == 3
    assert [r.seed for r in first.trials] == [40, 41, 42]


def test_run_trials_single_trial_has_zero_sd(tiny_split):
    train, test = tiny_split
    agg, _ = run_trials(train, test, SPEC32, TrainingConfig(epochs=1, trials=1))
    assert agg.sd == 0.0


def test_parallel_trials_match_serial(tiny_split):
    train, test = tiny_split
    config = TrainingConfig(epochs=2, seed=17, trials=4)
    serial, _ = run_trials(train, test, SPEC32, config, n_workers=1)
    parallel, _ = run_trials(train, test, SPEC32, config, n_workers=3)
    assert [r.accuracy for r in parallel.trials] == [r.accuracy for r in serial.trials]
    assert [r.pretrain_history for r in parallel.trials] == [
        r.pretrain_history for r in serial.trials
    ]


# -- person-specific protocol ---------------------------------------------------


def test_split_within_subject_is_stratified():
    samples = [Sample("a", i % 2, np.zeros(4)) for i in range(20)]
    train, test = split_within_subject(samples, make_rng(0))
    assert len(train) == 14 and len(test) == 6
    train_labels = [s.label for s in train]
    assert train_labels.count(0) == 7 and train_labels.count(1) == 7


def test_split_within_subject_keeps_both_sides_nonempty():
    for n in range(2, 9):
        samples = [Sample("a", 0, np.zeros(4)) for _ in range(n)]
        train, test = split_within_subject(samples, make_rng(1))
        assert len(train) >= 1 and len(test) >= 1
        assert len(train) + len(test) == n


def test_split_within_subject_single_member_class_trains():
    samples = [Sample("a", 0, np.zeros(4))] * 3 + [Sample("a", 1, np.ones(4))]
    train, test = split_within_subject(samples, make_rng(2))
    assert [s.label for s in test] == [0]
    assert sorted(s.label for s in train) == [0, 0, 1]


def test_person_specific_needs_enough_samples():
    tiny = Dataset(
        [Sample("s0", 0, np.zeros(32)), Sample("s0", 1, np.ones(32))]
        + [Sample("s1", i % 2, np.full(32, float(i))) for i in range(6)]
    )
    with pytest.raises(ValueError, match="s0"):
        person_specific(tiny, auto_spec(32, latent_dim=8), TrainingConfig(epochs=1))


def test_person_specific_learns_separable_subjects():
    cohort = small_cohort(shift=0.0, subjects=2, per_subject=24, seed=6)
    mean_acc, per_subject = person_specific(
        cohort, auto_spec(32, latent_dim=8), TrainingConfig(epochs=200, seed=1)
    )
    assert set(per_subject) == {"s0", "s1"}
    assert mean_acc == pytest.approx(np.mean(list(per_subject.values())), abs=1e-15)
    assert mean_acc >= 0.9


def test_person_specific_warns_on_single_class_subject(caplog):
    cohort_samples = [Sample("s0", 0, np.sin(np.linspace(0, 3, 32)) * (1 + 0.1 * k)) for k in range(5)]
    cohort_samples += [Sample("s1", i % 2, np.cos(np.linspace(0, 3, 32)) * (1 + 0.1 * i)) for i in range(6)]
    with caplog.at_level(logging.WARNING, logger="sirl.training"):
        person_specific(
            Dataset(cohort_samples), auto_spec(32, latent_dim=8), TrainingConfig(epochs=1)
        )
    assert "single class" in caplog.text


def test_person_specific_trials_aggregate():
    cohort = small_cohort(shift=0.0, subjects=2, per_subject=8, seed=6)
    agg = person_specific_trials(
        cohort, auto_spec(32, latent_dim=8), TrainingConfig(epochs=2, trials=2, seed=5)
    )
    assert isinstance(agg, AggregateReport)
    assert len(agg.trials) == 2
    assert agg.trials[0].per_subject and set(agg.trials[0].per_subject) == {"s0", "s1"}
    assert [r.seed for r in agg.trials] == [5, 6]


# -- metrics records ------------------------------------------------------------


def test_metrics_records_layout(tiny_split):
    train, test = tiny_split
    report, _ = run_trial(train, test, SPEC32, TrainingConfig(epochs=2, seed=9), 0)
    records = list(metrics_records([report]))
    assert len(records) == 5  # 2 pretrain + 2 finetune + summary
    assert records[0] == {
        "trial": 0,
        "phase": "pretrain",
        "epoch": 1,
        "recon": report.pretrain_history["recon"][0],
        "regularizer": 0.0,
    }
    assert records[2]["phase"] == "finetune"
    assert set(records[2]) == {"trial", "phase", "epoch", "classification", "triplet"}
    summary = records[-1]
    assert summary == {"trial": 0, "seed": 9, "accuracy": report.accuracy}
    for rec in records:
        json.dumps(rec)  # every record is line-serializable


def test_metrics_records_include_per_subject_when_present():
    report = type(
        "R",
        (),
        dict(
            trial_index=1,
            seed=2,
            accuracy=0.5,
            pretrain_history={"recon": [], "regularizer": []},
            finetune_history={"classification": [], "triplet": []},
            per_subject={"s0": 1.0},
        ),
    )()
    records = list(metrics_records([report]))
    assert records == [{"trial": 1, "seed": 2, "accuracy": 0.5, "per_subject": {"s0": 1.0}}]
