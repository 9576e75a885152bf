"""
Attack Service
Threshold membership-inference baselines against the audited-only model:
loss threshold, confidence threshold and modified-entropy threshold, each
calibrated on FIT records and evaluated on EVAL records.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List

import numpy as np
import torch
from scipy.special import log_softmax, softmax
from sklearn.metrics import roc_curve

from .dataset_service import RecordSet
from .evaluation_service import balanced_accuracy, predict_logits
from .exceptions import ContractViolationError, InvariantViolationError, NumericDomainError
from .model_service import EnhancedModel
from .validation_service import MethodName

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-30


class Direction(str, Enum):
    SCORE_ABOVE_IS_MEMBER = "score_above_is_member"


@dataclass(frozen=True)
class AttackScore:
    sample_id: int
    score: float
    true_membership: int


@dataclass(frozen=True)
class AttackScores:
    """Per-sample attack statistics, ordered by sample id"""
    sample_ids: np.ndarray
    scores: np.ndarray
    true_membership: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.scores)):
            raise NumericDomainError("attack scores must be finite")

    def __len__(self) -> int:
        return len(self.sample_ids)

    @classmethod
    def build(cls, sample_ids, scores, true_membership) -> "AttackScores":
        order = np.argsort(np.asarray(sample_ids), kind="stable")
        return cls(
            sample_ids=np.asarray(sample_ids, dtype=np.int64)[order],
            scores=np.asarray(scores, dtype=np.float64)[order],
            true_membership=np.asarray(true_membership, dtype=np.int8)[order],
        )

    def rows(self) -> List[AttackScore]:
        return [
            AttackScore(int(i), float(s), int(m))
            for i, s, m in zip(self.sample_ids, self.scores, self.true_membership)
        ]


@dataclass(frozen=True)
class ThresholdRule:
    threshold: float
    direction: Direction = Direction.SCORE_ABOVE_IS_MEMBER
    calibration_accuracy: float = 0.5
    degenerate: bool = False

    def predict(self, scores: np.ndarray) -> np.ndarray:
        return np.asarray(scores) > self.threshold


@dataclass
class AttackResult:
    method: MethodName
    rule: ThresholdRule
    accuracy: float
    calibration: AttackScores
    evaluation: AttackScores


Scorer = Callable[[torch.nn.Module, RecordSet], AttackScores]


def _labelled(records: RecordSet, scores: np.ndarray) -> AttackScores:
    return AttackScores.build(records.ids, scores, records.membership_labels())


def _log_probabilities(model: torch.nn.Module, records: RecordSet) -> np.ndarray:
    return log_softmax(predict_logits(model, records), axis=1)


def score_loss_attack(model: torch.nn.Module, records: RecordSet) -> AttackScores:
    """Negated per-sample cross-entropy"""
    log_probs = _log_probabilities(model, records)
    return _labelled(records, log_probs[np.arange(len(records)), records.class_labels])


def score_confidence_attack(model: torch.nn.Module, records: RecordSet) -> AttackScores:
    """Maximum softmax probability"""
    probabilities = softmax(predict_logits(model, records), axis=1)
    return _labelled(records, probabilities.max(axis=1))


def modified_entropy(probabilities: np.ndarray, class_labels: np.ndarray) -> np.ndarray:
    """
    Modified prediction entropy:
    -(1 - p_y) log p_y - sum_{i != y} p_i log(1 - p_i)
    """
    rows = np.arange(len(class_labels))
    log_p = -np.log(np.maximum(probabilities, LOG_FLOOR))
    log_q = -np.log(np.maximum(1.0 - probabilities, LOG_FLOOR))
    weights = probabilities.copy()
    weights[rows, class_labels] = 1.0 - probabilities[rows, class_labels]
    logs = log_q.copy()
    logs[rows, class_labels] = log_p[rows, class_labels]
    return np.sum(weights * logs, axis=1)


def score_entropy_attack(model: torch.nn.Module, records: RecordSet) -> AttackScores:
    """Negated modified entropy"""
    probabilities = softmax(predict_logits(model, records), axis=1)
    return _labelled(records, -modified_entropy(probabilities, records.class_labels))


SCORERS: Dict[MethodName, Scorer] = {
    MethodName.MIA_LOSS: score_loss_attack,
    MethodName.MIA_CONF: score_confidence_attack,
    MethodName.MIA_ENTROPY: score_entropy_attack,
}


def _balanced_sweep(scores: np.ndarray, labels: np.ndarray, n_distinct: int) -> np.ndarray:
    """
    Balanced accuracy of every partition of the sorted distinct scores, from
    "all member" to "no member".

    roc_curve lists the same partitions from "no member" upwards; the counts
    are recovered as integers so that equal partitions compare equal.
    """
    fpr, tpr, _ = roc_curve(labels, scores, drop_intermediate=False)
    if len(tpr) != n_distinct + 1:
        raise InvariantViolationError(f"ROC sweep has {len(tpr)} points for {n_distinct} distinct scores")
    positives = int(labels.sum())
    negatives = len(labels) - positives
    true_positives = np.rint(tpr[::-1] * positives)
    false_positives = np.rint(fpr[::-1] * negatives)
    return (true_positives * negatives + (negatives - false_positives) * positives) / (2.0 * positives * negatives)


def calibrate_threshold(calibration: AttackScores) -> ThresholdRule:
    """
    Threshold maximising balanced accuracy on calibration scores.

    Candidates are one value below the minimum, every midpoint between
    consecutive distinct scores, and the maximum; the first (smallest) best
    candidate wins.
    """
    labels = np.asarray(calibration.true_membership)
    if len(calibration) == 0 or labels.min() == labels.max():
        raise ContractViolationError("calibration needs scores of both members and externals")
    distinct = np.unique(calibration.scores)
    if len(distinct) == 1:
        logger.warning(f"⚠️ Degenerate calibration: all {len(calibration)} scores equal {distinct[0]}")
        return ThresholdRule(threshold=float(distinct[0]), calibration_accuracy=0.5, degenerate=True)

    candidates = np.concatenate([
        [np.nextafter(distinct[0], -np.inf)],
        (distinct[:-1] + distinct[1:]) / 2.0,
        [distinct[-1]],
    ])
    accuracies = _balanced_sweep(calibration.scores, labels, len(distinct))
    best = int(np.argmax(accuracies))
    return ThresholdRule(threshold=float(candidates[best]), calibration_accuracy=float(accuracies[best]))


def evaluate_attack(rule: ThresholdRule, evaluation: AttackScores) -> float:
    """Balanced accuracy of the rule on EVAL scores"""
    if len(evaluation) == 0:
        raise ContractViolationError("attack evaluation set is empty")
    return balanced_accuracy(evaluation.true_membership, rule.predict(evaluation.scores))


def run_attack(
    model: torch.nn.Module,
    fit_records: RecordSet,
    eval_records: RecordSet,
    method: MethodName = MethodName.MIA_LOSS,
) -> AttackResult:
    """Score, calibrate on FIT records and evaluate on EVAL records"""
    if isinstance(model, EnhancedModel):
        raise ContractViolationError("threshold attacks target the audited-only model")
    if method not in SCORERS:
        raise ContractViolationError(f"{method} is not a threshold attack")
    if np.intersect1d(fit_records.ids, eval_records.ids).size:
        raise ContractViolationError("calibration and evaluation records overlap")

    scorer = SCORERS[method]
    calibration = scorer(model, fit_records)
    evaluation = scorer(model, eval_records)
    rule = calibrate_threshold(calibration)
    accuracy = evaluate_attack(rule, evaluation)
    logger.info(
        f"✅ {method.value}: threshold={rule.threshold:.6g} calibration={rule.calibration_accuracy:.4f} "
        f"eval={accuracy:.4f}"
    )
    return AttackResult(method=method, rule=rule, accuracy=accuracy, calibration=calibration, evaluation=evaluation)
