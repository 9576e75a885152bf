"""
Evaluation Service
MINT and audited accuracies, and the three comparison tables (setups,
Active vs Passive, MINT vs membership-inference baselines) rendered as aligned
text and CSV.
"""

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from rich import box
from rich.console import Console
from rich.table import Table
from sklearn.metrics import balanced_accuracy_score

from .dataset_service import RecordSet, SPLIT_CODES
from .exceptions import ContractViolationError
from .model_service import to_tensor
from .validation_service import MethodName, MintSplit, Setup

logger = logging.getLogger(__name__)

MINT_THRESHOLD = 0.5
NOT_APPLICABLE = "n/a"
MISSING_CELL = "—"

Predictor = Union[Callable[[torch.Tensor], torch.Tensor], torch.nn.Module]


class MetricRecord(BaseModel):
    """One results row: a method's MINT (or attack) and audited accuracy"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    method: MethodName
    setup: str = Field(..., pattern=r"^(entry|middle|output|n/a)$")
    dataset: str
    seed: int
    mint_acc: float = Field(..., ge=0.0, le=1.0)
    audited_acc: float = Field(..., ge=0.0, le=1.0)

    def sort_key(self) -> Tuple:
        return (list(MethodName).index(self.method), self.setup, self.dataset, self.seed, self.mint_acc, self.audited_acc)


@dataclass(frozen=True)
class CellSummary:
    mint_mean: float
    mint_spread: float
    audited_mean: float
    audited_spread: float
    seeds: int


@dataclass
class ExperimentReport:
    cells: Dict[Tuple[str, str, str], CellSummary]
    datasets: List[str]
    checks: Dict[str, str] = field(default_factory=dict)
    text: str = ""
    csv: str = ""


def balanced_accuracy(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Mean of the per-class recalls of a binary decision"""
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    if y_true.all() or not y_true.any():
        raise ContractViolationError("balanced accuracy needs both members and externals")
    return float(balanced_accuracy_score(y_true, y_pred))


def _membership_fn(predictor: Predictor) -> Callable[[torch.Tensor], torch.Tensor]:
    if hasattr(predictor, "membership_probability"):
        return predictor.membership_probability
    return predictor


def _batched(records: RecordSet, batch_size: int, dtype: torch.dtype):
    for start in range(0, len(records), batch_size):
        yield to_tensor(records.images[start:start + batch_size], dtype)


def predict_membership(predictor: Predictor, records: RecordSet, batch_size: int = 256) -> np.ndarray:
    """Membership probabilities in evaluation mode"""
    module = predictor if isinstance(predictor, torch.nn.Module) else None
    was_training = module.training if module is not None else False
    if module is not None:
        module.eval()
    fn = _membership_fn(predictor)
    dtype = next(module.parameters()).dtype if module is not None else torch.float32
    outputs = []
    try:
        with torch.no_grad():
            for images in _batched(records, batch_size, dtype):
                outputs.append(fn(images).reshape(-1).double().numpy())
    finally:
        if module is not None:
            module.train(was_training)
    return np.concatenate(outputs) if outputs else np.zeros(0)


def predict_logits(model: torch.nn.Module, records: RecordSet, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    forward = model.forward_audited if hasattr(model, "forward_audited") else model
    outputs = []
    try:
        with torch.no_grad():
            for images in _batched(records, batch_size, dtype):
                outputs.append(forward(images).double().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(outputs) if outputs else np.zeros((0, 0))


def mint_accuracy(predictor: Predictor, records: RecordSet, batch_size: int = 256, require_eval: bool = True) -> float:
    """Balanced accuracy of member decisions (probability >= 0.5) on held-out records"""
    if require_eval and np.any(records.mint_splits != SPLIT_CODES[MintSplit.EVAL]):
        raise ContractViolationError("MINT accuracy is measured on mint_split=EVAL records only")
    labels = records.membership_labels()
    if labels.min() == labels.max():
        raise ContractViolationError("MINT evaluation set needs both members and externals")
    probabilities = predict_membership(predictor, records, batch_size)
    return balanced_accuracy(labels, probabilities >= MINT_THRESHOLD)


def audited_accuracy(model: torch.nn.Module, records: RecordSet, batch_size: int = 256) -> float:
    """Top-1 accuracy on the official test split"""
    if len(records) == 0:
        return 0.0
    logits = predict_logits(model, records, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == records.class_labels))


# Reports

def _summarise(records: Sequence[MetricRecord]) -> CellSummary:
    mint = np.array([r.mint_acc for r in records])
    audited = np.array([r.audited_acc for r in records])
    ddof = 1 if len(records) > 1 else 0
    return CellSummary(
        mint_mean=float(mint.mean()),
        mint_spread=float(mint.std(ddof=ddof)),
        audited_mean=float(audited.mean()),
        audited_spread=float(audited.std(ddof=ddof)),
        seeds=len(records),
    )


def _format(mean: float, spread: float, seeds: int) -> str:
    return f"{mean:.3f} ± {spread:.3f} (n={seeds})"


class ReportBuilder:
    """Aggregates MetricRecords over seeds and lays out the comparison tables"""

    TABLE_WIDTH = 200

    def __init__(self, records: Sequence[MetricRecord]):
        if not records:
            raise ContractViolationError("cannot build a report from zero records")
        self.records = sorted(records, key=MetricRecord.sort_key)
        self.datasets = sorted({r.dataset for r in self.records})
        grouped: Dict[Tuple[str, str, str], List[MetricRecord]] = {}
        for record in self.records:
            grouped.setdefault((record.method.value, record.setup, record.dataset), []).append(record)
        self.cells = {key: _summarise(group) for key, group in grouped.items()}

    def cell(self, method: MethodName, setup: str, dataset: str, metric: str) -> str:
        summary = self.cells.get((method.value, setup, dataset))
        if summary is None:
            return MISSING_CELL
        if metric == "mint":
            return _format(summary.mint_mean, summary.mint_spread, summary.seeds)
        return _format(summary.audited_mean, summary.audited_spread, summary.seeds)

    def setup_table(self) -> Tuple[str, List[str], List[List[str]]]:
        columns = [f"{d} {m}" for d in self.datasets for m in ("MINT", "Aud")]
        rows = []
        for setup in Setup:
            row = [f"{setup.value.capitalize()} Setup"]
            for dataset in self.datasets:
                row += [self.cell(MethodName.ACTIVE, setup.value, dataset, "mint"),
                        self.cell(MethodName.ACTIVE, setup.value, dataset, "audited")]
            rows.append(row)
        return "Active MINT across the three setups", columns, rows

    def active_passive_table(self) -> Tuple[str, List[str], List[List[str]]]:
        columns = [f"{d} {m}" for d in self.datasets for m in ("MINT", "Aud")]
        rows = []
        for label, method in (("Active MINT", MethodName.ACTIVE), ("Passive MINT", MethodName.PASSIVE)):
            row = [label]
            for dataset in self.datasets:
                row += [self.cell(method, Setup.ENTRY.value, dataset, "mint"),
                        self.cell(method, Setup.ENTRY.value, dataset, "audited")]
            rows.append(row)
        return "Active vs Passive MINT (entry taps)", columns, rows

    def attack_table(self) -> Tuple[str, List[str], List[List[str]]]:
        columns = [f"{d} accuracy" for d in self.datasets]
        entries = [
            ("Active MINT", MethodName.ACTIVE, Setup.ENTRY.value),
            ("Loss-threshold MIA", MethodName.MIA_LOSS, NOT_APPLICABLE),
            ("Confidence-threshold MIA", MethodName.MIA_CONF, NOT_APPLICABLE),
            ("Modified-entropy MIA", MethodName.MIA_ENTROPY, NOT_APPLICABLE),
        ]
        rows = []
        for label, method, setup in entries:
            rows.append([label] + [self.cell(method, setup, d, "mint") for d in self.datasets])
        return "Active MINT vs membership inference baselines", columns, rows

    def entry_vs_output_checks(self) -> Dict[str, str]:
        checks = {}
        for dataset in self.datasets:
            entry = self.cells.get((MethodName.ACTIVE.value, Setup.ENTRY.value, dataset))
            output = self.cells.get((MethodName.ACTIVE.value, Setup.OUTPUT.value, dataset))
            if entry is None or output is None:
                checks[dataset] = "N/A"
            else:
                checks[dataset] = "PASS" if entry.audited_mean >= output.audited_mean else "FAIL"
        return checks

    def render_text(self, tables, checks: Dict[str, str]) -> str:
        buffer = io.StringIO()
        console = Console(file=buffer, width=self.TABLE_WIDTH, color_system=None, force_terminal=False, emoji=False)
        for title, columns, rows in tables:
            table = Table(title=title, box=box.ASCII, show_lines=False)
            table.add_column("")
            for column in columns:
                table.add_column(column, justify="right")
            for row in rows:
                table.add_row(*row)
            console.print(table)
            console.print()
        for dataset, verdict in checks.items():
            console.print(f"Entry >= Output audited accuracy [{dataset}]: {verdict}", markup=False)
        console.print("Notes: accuracies are balanced accuracies (MINT threshold 0.5); cells are mean ± std over seeds.")
        console.print("Notes: loss normalizers are detached running means of |loss| (momentum 0.99).")
        return buffer.getvalue()

    def render_csv(self, tables) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["table", "row", "column", "value"])
        for title, columns, rows in tables:
            for row in rows:
                for column, value in zip(columns, row[1:]):
                    writer.writerow([title, row[0], column, value])
        return buffer.getvalue()

    def build(self) -> ExperimentReport:
        tables = [self.setup_table(), self.active_passive_table(), self.attack_table()]
        checks = self.entry_vs_output_checks()
        return ExperimentReport(
            cells=self.cells,
            datasets=self.datasets,
            checks=checks,
            text=self.render_text(tables, checks),
            csv=self.render_csv(tables),
        )


def build_report(records: Sequence[MetricRecord]) -> ExperimentReport:
    report = ReportBuilder(records).build()
    logger.info(f"Built report over {len(records)} records, {len(report.cells)} cells")
    return report


def make_record(method: MethodName, setup: Optional[Setup], dataset: str, seed: int, mint_acc: float, audited_acc: float) -> MetricRecord:
    return MetricRecord(
        method=method,
        setup=setup.value if setup is not None else NOT_APPLICABLE,
        dataset=dataset,
        seed=seed,
        mint_acc=mint_acc,
        audited_acc=audited_acc,
    )
