"""
Artifact Manager for the mint-audit toolkit

Writes and reads every run artifact under one output directory: versioned
`.npz` checkpoints of named parameter arrays, CSV logs (step losses, epoch
history, split manifest, attack scores, results, report tables), and the JSON
run manifest.
"""

import csv
import io
import json
import logging
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union
from zipfile import BadZipFile

import numpy as np
import torch
from pydantic import ValidationError

from .services.attack_service import AttackScores
from .services.exceptions import CheckpointError, ContractViolationError, IntegrityError, NoResultsError
from .services.evaluation_service import ExperimentReport, MetricRecord
from .services.model_service import AuditedModel, EnhancedModel, MintHead, parameter_checksum
from .services.training_service import TrainState
from .services.validation_service import BackboneSpec, MintHeadSpec, RunManifest, TapConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mint-audit-npz"
CHECKPOINT_VERSION = 1
META_KEY = "__meta__"

RESULTS_HEADER = ["method", "setup", "dataset", "seed", "mint_acc", "audited_acc"]
STEP_LOG_COLUMNS = ["step", "audited_raw", "mint_raw", "audited_normed", "mint_normed", "reg", "total"]
HISTORY_COLUMNS = ["epoch", "mint_fit_acc", "mint_eval_acc", "audited_val_acc", "criterion"]
RESULTS_GLOB = "results*.csv"


class CheckpointKind(str, Enum):
    AUDITED = "audited"
    ENHANCED = "enhanced"
    MINT_HEAD = "mint_head"


Checkpointable = Union[AuditedModel, EnhancedModel, MintHead]


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ArtifactManager:
    """All persistence for one run directory"""

    def __init__(self, output_dir: Union[str, Path]):
        self.root = Path(output_dir).expanduser().resolve()
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, *parts: str) -> Path:
        """Resolve a path inside the output directory"""
        target = self.root.joinpath(*parts).resolve()
        if target != self.root and self.root not in target.parents:
            raise ContractViolationError(f"refusing to write outside {self.root}: {target}")
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def _write_text(self, name: str, text: str) -> Path:
        target = self.path(name)
        partial = target.with_name(target.name + ".part")
        partial.write_text(text, encoding="utf-8")
        partial.replace(target)
        return target

    def _write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
        return self._write_text(name, buffer.getvalue())

    # Checkpoints

    def save_checkpoint(
        self,
        name: str,
        module: Checkpointable,
        tap_config: Optional[TapConfig] = None,
        backbone: Optional[BackboneSpec] = None,
        held_out_ids: Optional[Sequence[int]] = None,
    ) -> Path:
        """
        Save named parameter arrays plus a `__meta__` entry describing how to
        rebuild the module. A standalone MINT head needs the tap config and
        backbone spec of the model it reads. held_out_ids lists training-pool
        members the model never trained on.
        """
        if isinstance(module, EnhancedModel):
            kind, spec, tap_config, head_spec = CheckpointKind.ENHANCED, module.spec, module.tap_config, module.head_spec
        elif isinstance(module, AuditedModel):
            kind, spec, head_spec = CheckpointKind.AUDITED, module.spec, None
        elif isinstance(module, MintHead):
            if tap_config is None or backbone is None:
                raise CheckpointError("a MINT head checkpoint needs the tap config and backbone spec")
            kind, spec, head_spec = CheckpointKind.MINT_HEAD, backbone, module.spec
        else:
            raise CheckpointError(f"cannot checkpoint {type(module).__name__}")

        arrays = {key: tensor.detach().cpu().numpy() for key, tensor in module.state_dict().items()}
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": kind.value,
            "spec": spec.model_dump(mode="json"),
            "tap_config": tap_config.model_dump(mode="json") if tap_config is not None else None,
            "head_spec": head_spec.model_dump(mode="json") if head_spec is not None else None,
            "in_channels": list(module.in_channels) if isinstance(module, MintHead) else None,
            "shapes": {key: list(array.shape) for key, array in arrays.items()},
            "dtypes": {key: str(array.dtype) for key, array in arrays.items()},
            "sha256": parameter_checksum(module),
            "held_out_ids": [int(i) for i in held_out_ids] if held_out_ids is not None else [],
            "saved_at": _utc_now(),
        }

        target = self.path(f"{name}.npz")
        partial = target.with_name(target.name + ".part")
        with open(partial, "wb") as handle:
            np.savez(handle, **arrays, **{META_KEY: np.array(json.dumps(meta, sort_keys=True))})
        partial.replace(target)
        logger.info(f"✅ Saved {kind.value} checkpoint {target.name} ({len(arrays)} arrays)")
        return target

    def load_checkpoint(self, source: Union[str, Path]) -> Tuple[Checkpointable, Dict[str, Any]]:
        """Rebuild a module from a checkpoint; returns (module, meta)"""
        target = Path(source).expanduser()
        if target.suffix != ".npz":
            target = target.with_name(target.name + ".npz")
        if not target.is_absolute():
            target = self.root / target
        if not target.is_file():
            raise CheckpointError(f"checkpoint not found: {target}")

        try:
            with np.load(target, allow_pickle=False) as data:
                if META_KEY not in data.files:
                    raise CheckpointError(f"{target.name}: missing {META_KEY} entry")
                meta = json.loads(str(data[META_KEY]))
                arrays = {key: data[key] for key in data.files if key != META_KEY}
        except (BadZipFile, OSError, ValueError) as e:
            raise CheckpointError(f"{target.name}: unreadable checkpoint ({e})")

        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{target.name}: format {meta.get('format')} v{meta.get('version')}, "
                f"expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}"
            )
        if set(arrays) != set(meta["shapes"]):
            raise CheckpointError(f"{target.name}: arrays do not match the declared parameter names")
        for key, array in arrays.items():
            if list(array.shape) != meta["shapes"][key]:
                raise CheckpointError(f"{target.name}: {key} has shape {array.shape}, declared {meta['shapes'][key]}")

        try:
            module = self._rebuild(meta)
        except ValidationError as e:
            raise CheckpointError(f"{target.name}: invalid metadata ({e.error_count()} errors)")
        state = {key: torch.from_numpy(np.array(array)) for key, array in arrays.items()}
        try:
            module.load_state_dict(state)
        except RuntimeError as e:
            raise CheckpointError(f"{target.name}: state does not fit the declared architecture ({e})")

        if parameter_checksum(module) != meta["sha256"]:
            raise IntegrityError(f"{target.name}: parameter checksum mismatch")
        logger.info(f"Loaded {meta['kind']} checkpoint {target.name}")
        return module, meta

    @staticmethod
    def _rebuild(meta: Dict[str, Any]) -> Checkpointable:
        spec = BackboneSpec.model_validate(meta["spec"])
        kind = CheckpointKind(meta["kind"])
        if kind == CheckpointKind.AUDITED:
            return AuditedModel(spec)
        head_spec = MintHeadSpec.model_validate(meta["head_spec"])
        if kind == CheckpointKind.ENHANCED:
            return EnhancedModel(spec, TapConfig.model_validate(meta["tap_config"]), head_spec)
        return MintHead(head_spec, tuple(meta["in_channels"]))

    # CSV logs

    def write_step_log(self, name: str, rows: Sequence[Dict[str, float]]) -> Path:
        columns = [c for c in STEP_LOG_COLUMNS if any(c in row for row in rows)] or STEP_LOG_COLUMNS[:1]
        return self._write_csv(name, columns, ([row.get(c) for c in columns] for row in rows))

    def write_history(self, name: str, state: TrainState) -> Path:
        loss_columns = sorted({key for record in state.history for key in record.losses})
        rows = (
            [r.epoch, r.mint_fit_acc, r.mint_eval_acc, r.audited_val_acc, r.criterion]
            + [r.losses.get(key) for key in loss_columns]
            for r in state.history
        )
        return self._write_csv(name, HISTORY_COLUMNS + loss_columns, rows)

    def write_split_manifest(self, name: str, rows: Sequence[Tuple[int, str, str]]) -> Path:
        return self._write_csv(name, ["id", "role", "mint_split"], rows)

    def read_split_manifest(self, name: str) -> List[Tuple[int, str, str]]:
        target = self.path(name)
        if not target.is_file():
            raise CheckpointError(f"split manifest not found: {target}")
        with open(target, newline="", encoding="utf-8") as handle:
            return [(int(row["id"]), row["role"], row["mint_split"]) for row in csv.DictReader(handle)]

    def write_scores(self, name: str, scores: AttackScores) -> Path:
        rows = ((row.sample_id, row.score, row.true_membership) for row in scores.rows())
        return self._write_csv(name, ["sample_id", "score", "true_membership"], rows)

    def write_results(self, name: str, records: Sequence[MetricRecord]) -> Path:
        rows = (
            [r.method.value, r.setup, r.dataset, r.seed, r.mint_acc, r.audited_acc]
            for r in sorted(records, key=MetricRecord.sort_key)
        )
        return self._write_csv(name, RESULTS_HEADER, rows)

    def write_report(self, report: ExperimentReport, stem: str = "report") -> Tuple[Path, Path]:
        return self._write_text(f"{stem}.txt", report.text), self._write_text(f"{stem}.csv", report.csv)

    # Run manifest

    def write_manifest(self, manifest: RunManifest, name: str = "manifest.json") -> Path:
        return self._write_text(name, manifest.model_dump_json(indent=2))

    def finalize_manifest(
        self, manifest: RunManifest, status: str, error: Optional[str] = None, name: str = "manifest.json"
    ) -> RunManifest:
        finished = manifest.model_copy(update={"status": status, "error": error, "finished_at": _utc_now()})
        self.write_manifest(finished, name)
        return finished

    def read_manifest(self, name: str = "manifest.json") -> RunManifest:
        return RunManifest.model_validate_json(self.path(name).read_text(encoding="utf-8"))


def read_results(results_dir: Union[str, Path]) -> List[MetricRecord]:
    """Every results file under a directory, recursively"""
    root = Path(results_dir).expanduser()
    files = sorted(root.rglob(RESULTS_GLOB)) if root.is_dir() else []
    records = []
    for path in files:
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames != RESULTS_HEADER:
                logger.warning(f"⚠️ Skipping {path}: header {reader.fieldnames}")
                continue
            for row in reader:
                records.append(MetricRecord(
                    method=row["method"],
                    setup=row["setup"],
                    dataset=row["dataset"],
                    seed=int(row["seed"]),
                    mint_acc=float(row["mint_acc"]),
                    audited_acc=float(row["audited_acc"]),
                ))
    if not records:
        raise NoResultsError(f"no results files found under {root}")
    logger.info(f"Read {len(records)} result rows from {len(files)} files")
    return records
