import numpy as np
import pytest
from scipy.special import log_softmax, softmax

from mint_audit.services.attack_service import (
    AttackScores,
    ThresholdRule,
    calibrate_threshold,
    evaluate_attack,
    modified_entropy,
    run_attack,
    score_confidence_attack,
    score_entropy_attack,
    score_loss_attack,
)
from mint_audit.services.exceptions import ContractViolationError, NumericDomainError
from mint_audit.services.model_service import build_enhanced_model
from mint_audit.services.validation_service import MethodName, Setup
from tests.conftest import FixedLogits, indexed_records


def scores(values, membership):
    return AttackScores.build(np.arange(len(values)), values, membership)


def test_loss_scores_match_log_softmax():
    logits = np.random.default_rng(0).normal(size=(5, 4))
    labels = np.array([2, 0, 3, 3, 1])

    got = score_loss_attack(FixedLogits(logits), indexed_records(labels, roles=[1, 0, 1, 0, 1]))

    assert np.allclose(got.scores, log_softmax(logits, axis=1)[np.arange(5), labels], atol=1e-12)
    assert list(got.true_membership) == [1, 0, 1, 0, 1]


def test_confidently_correct_sample_has_zero_loss():
    got = score_loss_attack(FixedLogits([[1000.0, 0.0, 0.0]]), indexed_records([0], roles=[1]))

    assert abs(got.scores[0]) < 1e-12


def test_confidence_scores():
    uniform = score_confidence_attack(FixedLogits(np.zeros((1, 10))), indexed_records([4], roles=[0]))
    saturated = score_confidence_attack(FixedLogits([[0.0, 60.0, 0.0]]), indexed_records([0], roles=[1]))

    assert uniform.scores[0] == pytest.approx(0.1)
    assert saturated.scores[0] == pytest.approx(1.0)


def test_modified_entropy_matches_loop():
    rng = np.random.default_rng(3)
    probabilities = rng.dirichlet(np.ones(4), size=6)
    labels = rng.integers(0, 4, size=6)

    expected = []
    for p, y in zip(probabilities, labels):
        value = -(1 - p[y]) * np.log(p[y])
        value -= sum(p[i] * np.log(1 - p[i]) for i in range(4) if i != y)
        expected.append(value)

    assert np.allclose(modified_entropy(probabilities, labels), expected, atol=1e-12)
    assert modified_entropy(np.array([[0.0, 1.0, 0.0]]), np.array([1]))[0] == 0.0


def test_entropy_scores_are_negated_entropy():
    logits = np.random.default_rng(1).normal(size=(4, 3))
    labels = np.array([0, 1, 2, 0])

    got = score_entropy_attack(FixedLogits(logits), indexed_records(labels, roles=[1, 1, 0, 0]))

    assert np.allclose(got.scores, -modified_entropy(softmax(logits, axis=1), labels), atol=1e-12)


def test_scores_are_ordered_by_id():
    built = AttackScores.build([7, 2, 5], [0.7, 0.2, 0.5], [1, 0, 1])

    assert list(built.sample_ids) == [2, 5, 7]
    assert list(built.scores) == [0.2, 0.5, 0.7]
    assert [row.sample_id for row in built.rows()] == [2, 5, 7]


def test_non_finite_scores_are_rejected():
    with pytest.raises(NumericDomainError):
        scores([0.1, float("nan")], [1, 0])


def test_perfect_separation():
    calibration = scores([3.0, 4.0, 5.0, 0.0, 1.0, 2.0], [1, 1, 1, 0, 0, 0])

    rule = calibrate_threshold(calibration)

    assert rule.threshold == 2.5
    assert rule.calibration_accuracy == 1.0
    assert evaluate_attack(rule, calibration) == 1.0


def brute_force(values, membership):
    """Balanced accuracy of `score > t` for t just below the minimum and at every distinct score"""
    values, membership = np.asarray(values), np.asarray(membership)
    thresholds = np.concatenate([[values.min() - 1.0], np.unique(values)])
    best = 0.0
    for t in thresholds:
        predicted = values > t
        tpr = np.mean(predicted[membership == 1])
        tnr = np.mean(~predicted[membership == 0])
        best = max(best, (tpr + tnr) / 2)
    return best


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_calibration_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    membership = np.array([1] * 15 + [0] * 12)
    values = np.round(rng.normal(size=27) + 0.5 * membership, 1)
    calibration = scores(values, membership)

    rule = calibrate_threshold(calibration)

    assert rule.calibration_accuracy == pytest.approx(brute_force(values, membership), abs=1e-12)
    assert evaluate_attack(rule, calibration) == pytest.approx(rule.calibration_accuracy, abs=1e-12)


def test_ties_pick_the_smallest_threshold():
    # t = 0.5 and t = 2.5 both reach 0.75
    calibration = scores([0.0, 1.0, 2.0, 3.0], [0, 1, 0, 1])

    rule = calibrate_threshold(calibration)

    assert rule.threshold == 0.5
    assert rule.calibration_accuracy == 0.75


def test_degenerate_calibration():
    calibration = scores([2.0] * 6, [1, 1, 1, 0, 0, 0])

    rule = calibrate_threshold(calibration)

    assert rule.degenerate
    assert rule.threshold == 2.0
    assert rule.calibration_accuracy == 0.5
    assert evaluate_attack(rule, calibration) == 0.5


def test_calibration_needs_both_roles():
    with pytest.raises(ContractViolationError):
        calibrate_threshold(scores([0.1, 0.2], [1, 1]))


def test_empty_evaluation():
    with pytest.raises(ContractViolationError):
        evaluate_attack(ThresholdRule(threshold=0.0), scores([], []))


def test_counting_case():
    members = [0.9, 0.8, 0.7, 0.6, 0.55, 0.52, 0.51, 0.3, 0.2, 0.1]
    externals = [0.8, 0.6, 0.4, 0.3, 0.3, 0.2, 0.2, 0.1, 0.1, 0.0]
    evaluation = scores(members + externals, [1] * 10 + [0] * 10)

    # 7/10 members above 0.5, 8/10 externals at or below it
    assert evaluate_attack(ThresholdRule(threshold=0.5), evaluation) == pytest.approx(0.75)


def test_monotone_transform_keeps_decisions():
    rng = np.random.default_rng(9)
    membership = np.array([1] * 10 + [0] * 10)
    values = rng.normal(size=20) + membership
    plain = scores(values, membership)
    stretched = scores(np.exp(values), membership)

    rule, stretched_rule = calibrate_threshold(plain), calibrate_threshold(stretched)

    assert rule.calibration_accuracy == pytest.approx(stretched_rule.calibration_accuracy)
    assert np.array_equal(rule.predict(plain.scores), stretched_rule.predict(stretched.scores))


def separable_table():
    """Rows 0-3 are confidently right, rows 4-7 uniform"""
    table = np.zeros((8, 3))
    for row in range(4):
        table[row, row % 3] = 20.0
    return table


def test_run_attack_end_to_end():
    labels = np.arange(8) % 3
    roles = [1, 1, 1, 1, 0, 0, 0, 0]
    model = FixedLogits(separable_table())
    fit = indexed_records(labels, roles=roles, eval_flags=[0] * 8)
    held_out = indexed_records(labels, roles=roles, eval_flags=[1] * 8, id_offset=100)

    for method in (MethodName.MIA_LOSS, MethodName.MIA_CONF, MethodName.MIA_ENTROPY):
        result = run_attack(model, fit, held_out, method)

        assert result.accuracy == 1.0
        assert result.rule.calibration_accuracy == 1.0
        assert list(result.calibration.sample_ids) == list(range(8))
        assert list(result.evaluation.sample_ids) == list(range(100, 108))


def test_run_attack_rejects_enhanced_model(tiny_spec, tiny_head, member_records, external_records):
    model = build_enhanced_model(tiny_spec, Setup.ENTRY, tiny_head, init_seed=0, dropout_seed=0)

    with pytest.raises(ContractViolationError):
        run_attack(model, member_records.fit_records(), external_records.eval_records())


def test_run_attack_rejects_overlap_and_mint_methods():
    model = FixedLogits(separable_table())
    records = indexed_records(np.arange(8) % 3, roles=[1, 1, 1, 1, 0, 0, 0, 0])

    with pytest.raises(ContractViolationError):
        run_attack(model, records, records.take([0, 4]))
    with pytest.raises(ContractViolationError):
        run_attack(model, records, indexed_records([0, 1], roles=[1, 0], id_offset=50), MethodName.ACTIVE)
