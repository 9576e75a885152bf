"""
Experiment Service
Runs the pipeline stages of one experiment (data preparation, Active MINT,
audited-only training, Passive MINT, threshold attacks) against an output
directory, wrapping each stage in a StageResult and keeping the run manifest
current.
"""

import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from pydantic import ValidationError

from .. import __version__
from ..artifact_manager import ArtifactManager
from ..config.settings import DatasetSources, RegimePresets, ScalePresets, settings
from .attack_service import run_attack
from .dataset_service import (
    DatasetHandle,
    RecordSet,
    compose_batches,
    load_dataset,
    make_split,
    split_manifest_rows,
    subsample,
    verify_checksums,
)
from .download_service import download_dataset
from .evaluation_service import MetricRecord, audited_accuracy, make_record, mint_accuracy
from .exceptions import CheckpointError, ConfigError, MintAuditError
from .model_service import AuditedModel, FrozenMintAuditor, build_enhanced_model, resolve_taps
from .seed_service import StageSeeds, derive_stage_seeds
from .training_service import gradient_routing_audit, train_active, train_audited_only, train_passive_mint
from .validation_service import BackboneSpec, ExperimentConfig, MethodName, RunManifest, Setup

logger = logging.getLogger(__name__)

ATTACK_METHODS = (MethodName.MIA_LOSS, MethodName.MIA_CONF, MethodName.MIA_ENTROPY)
REPRODUCE_DATASETS = ("mnist", "cifar10")


class ErrorKind(str, Enum):
    CONFIG = "config"
    RUNTIME = "runtime"


@dataclass
class StageResult:
    """Outcome envelope of one pipeline stage"""
    success: bool
    stage: str
    data: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None
    error_kind: Optional[ErrorKind] = None
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())


@dataclass
class PreparedData:
    handle: DatasetHandle
    members: RecordSet
    externals: RecordSet
    test: RecordSet
    held_out_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def mint_eval(self) -> RecordSet:
        return RecordSet.concat([self.members.eval_records(), self.externals.eval_records()])

    @property
    def attack_calibration(self) -> RecordSet:
        """FIT records the audited-only model was trained on, plus FIT externals"""
        members = self.members.fit_records().without_ids(self.held_out_ids)
        return RecordSet.concat([members, self.externals.fit_records()])


def resolve_config(config: ExperimentConfig, seed: Optional[int] = None) -> ExperimentConfig:
    """Fill unset split and training seeds from the master seed"""
    master = config.seed if seed is None else seed
    seeds = derive_stage_seeds(master)
    split = config.split if config.split.seed is not None else config.split.model_copy(update={"seed": seeds.split})
    train = config.train if config.train.seed is not None else config.train.model_copy(update={"seed": seeds.shuffle})
    return config.model_copy(update={"seed": master, "split": split, "train": train})


def configure_torch():
    torch.set_num_threads(settings.torch_threads)
    torch.use_deterministic_algorithms(True)


class ExperimentRunner:
    """Stages of one experiment sharing data, models and an output directory"""

    def __init__(self, config: ExperimentConfig, command: str, output_dir: Optional[Path] = None, seed: Optional[int] = None):
        self.config = resolve_config(config, seed)
        self.command = command
        self.seeds: StageSeeds = derive_stage_seeds(self.config.seed)
        self.artifacts = ArtifactManager(output_dir or self.config.output_dir)
        self.data: Optional[PreparedData] = None
        self.audited_model: Optional[AuditedModel] = None
        self.records: List[MetricRecord] = []
        self.manifest = RunManifest(
            command=command,
            config=self.config.model_dump(mode="json"),
            seeds={"master": self.config.seed, **self.seeds.as_dict()},
            toolkit_version=__version__,
            started_at=datetime.now(timezone.utc).isoformat(),
        )
        self.artifacts.write_manifest(self.manifest)

    @property
    def dataset_name(self) -> str:
        return self.config.dataset.name

    def run_stage(self, name: str, fn: Callable[[], Optional[Dict[str, Any]]]) -> StageResult:
        logger.info(f"▶ Stage {name}")
        start = time.perf_counter()
        try:
            result = StageResult(success=True, stage=name, data=fn() or {})
        except (ValidationError, ConfigError) as e:
            result = StageResult(success=False, stage=name, error=str(e), error_kind=ErrorKind.CONFIG)
        except (MintAuditError, OSError, RuntimeError) as e:
            result = StageResult(success=False, stage=name, error=str(e), error_kind=ErrorKind.RUNTIME)
        elapsed = time.perf_counter() - start
        self.manifest = self.manifest.model_copy(
            update={"timings": {**self.manifest.timings, name: round(elapsed, 3)}}
        )
        self.artifacts.write_manifest(self.manifest)
        if result.success:
            logger.info(f"✅ Stage {name} finished in {elapsed:.1f}s")
        else:
            logger.error(f"❌ Stage {name} failed: {result.error}")
        return result

    def run(self, stages: Sequence[tuple]) -> List[StageResult]:
        """Run (name, fn) stages in order, halting at the first failure"""
        results = []
        for name, fn in stages:
            result = self.run_stage(name, fn)
            results.append(result)
            if not result.success:
                break
        self.finish(results)
        return results

    def finish(self, results: Sequence[StageResult]):
        if self.records:
            self.artifacts.write_results("results.csv", self.records)
        failed = next((r for r in results if not r.success), None)
        if failed is None:
            self.manifest = self.artifacts.finalize_manifest(self.manifest, "completed")
        else:
            self.manifest = self.artifacts.finalize_manifest(
                self.manifest, "failed", f"{failed.stage}: {failed.error}"
            )

    # Stages

    def dataset_root(self) -> Path:
        root = self.config.dataset.root or settings.data_root / self.dataset_name
        return Path(root).expanduser()

    def prepare_data(self) -> Dict[str, Any]:
        root = self.dataset_root()
        if self.config.dataset.download or settings.allow_download:
            download_dataset(self.dataset_name, root)
        verify_checksums(self.dataset_name, root)
        handle = load_dataset(self.dataset_name, root)
        members, externals, test = make_split(handle, self.config.split)

        sizes = self.config.subsample
        if sizes.members is not None:
            members = subsample(members, sizes.members, self.seeds.subsample)
        if sizes.externals is not None:
            externals = subsample(externals, sizes.externals, self.seeds.subsample + 1)
        self.data = PreparedData(handle=handle, members=members, externals=externals, test=test)

        self.artifacts.write_split_manifest("split.csv", split_manifest_rows(members, externals))
        self.manifest = self.manifest.model_copy(update={"dataset_checksums": dict(handle.checksums)})
        return {"members": len(members), "externals": len(externals), "test": len(test)}

    def active(self, setup: Setup) -> Dict[str, Any]:
        cfg = self.config
        model = build_enhanced_model(cfg.backbone, setup, cfg.mint_head, self.seeds.init, self.seeds.dropout)
        audit_batch = next(iter(compose_batches(
            self.data.members.fit_records(), self.data.externals.fit_records(), cfg.train.batch_size, cfg.train.seed
        )), None)
        if audit_batch is not None:
            gradient_routing_audit(model, audit_batch).assert_clean()

        model, state = train_active(model, self.data.members, self.data.externals, cfg.train)
        stem = f"active_{setup.value}"
        path = self.artifacts.save_checkpoint(stem, model)
        if state.best_snapshot is not None:
            state.best_snapshot.checkpoint_path = str(path)
        self.artifacts.write_step_log(f"{stem}_steps.csv", state.step_log)
        self.artifacts.write_history(f"{stem}_history.csv", state)

        record = make_record(
            MethodName.ACTIVE, setup, self.dataset_name, cfg.seed,
            mint_accuracy(model, self.data.mint_eval, cfg.train.eval_batch_size),
            audited_accuracy(model, self.data.test, cfg.train.eval_batch_size),
        )
        self.records.append(record)
        return {"epochs": state.epoch, "mint_acc": record.mint_acc, "audited_acc": record.audited_acc}

    def audited(self) -> Dict[str, Any]:
        """Audited-only model: loaded from the configured checkpoint or trained here"""
        passive = self.config.passive
        if passive.audited_checkpoint is not None:
            model, meta = self.artifacts.load_checkpoint(Path(passive.audited_checkpoint).expanduser().resolve())
            held_out_ids = np.asarray(meta.get("held_out_ids", []), dtype=np.int64)
            if not isinstance(model, AuditedModel):
                raise CheckpointError(f"{passive.audited_checkpoint} is not an audited-only checkpoint")
            if model.spec != self.config.backbone:
                raise CheckpointError("audited checkpoint was built for a different backbone")
            source = "checkpoint"
        elif passive.auto_train_audited:
            model, state = train_audited_only(self.config.backbone, self.data.members, self.config.train, self.seeds.init)
            held_out_ids = state.held_out_ids
            path = self.artifacts.save_checkpoint("audited", model, held_out_ids=held_out_ids)
            if state.best_snapshot is not None:
                state.best_snapshot.checkpoint_path = str(path)
            self.artifacts.write_step_log("audited_steps.csv", state.step_log)
            self.artifacts.write_history("audited_history.csv", state)
            source = "trained"
        else:
            raise CheckpointError("no audited checkpoint configured and passive.auto_train_audited is disabled")
        self.audited_model = model
        self.data.held_out_ids = held_out_ids
        return {"source": source, "audited_acc": audited_accuracy(model, self.data.test, self.config.train.eval_batch_size)}

    def passive(self) -> Dict[str, Any]:
        cfg = self.config
        setup = cfg.passive.setup
        head, state = train_passive_mint(
            self.audited_model, self.data.members, self.data.externals, cfg.mint_head, cfg.train,
            setup, self.seeds.init, self.seeds.dropout, self.data.held_out_ids,
        )
        tap_config = resolve_taps(cfg.backbone, setup)
        path = self.artifacts.save_checkpoint("passive_head", head, tap_config=tap_config, backbone=cfg.backbone)
        if state.best_snapshot is not None:
            state.best_snapshot.checkpoint_path = str(path)
        self.artifacts.write_step_log("passive_steps.csv", state.step_log)
        self.artifacts.write_history("passive_history.csv", state)

        auditor = FrozenMintAuditor(self.audited_model, head, tap_config)
        record = make_record(
            MethodName.PASSIVE, setup, self.dataset_name, cfg.seed,
            mint_accuracy(auditor, self.data.mint_eval, cfg.train.eval_batch_size),
            audited_accuracy(self.audited_model, self.data.test, cfg.train.eval_batch_size),
        )
        self.records.append(record)
        return {"epochs": state.epoch, "mint_acc": record.mint_acc}

    def attacks(self, methods: Sequence[MethodName]) -> Dict[str, Any]:
        cfg = self.config
        audited_acc = audited_accuracy(self.audited_model, self.data.test, cfg.train.eval_batch_size)
        accuracies = {}
        for method in methods:
            result = run_attack(self.audited_model, self.data.attack_calibration, self.data.mint_eval, method)
            self.artifacts.write_scores(f"{method.value}_calibration_scores.csv", result.calibration)
            self.artifacts.write_scores(f"{method.value}_eval_scores.csv", result.evaluation)
            self.records.append(make_record(method, None, self.dataset_name, cfg.seed, result.accuracy, audited_acc))
            accuracies[method.value] = result.accuracy
        return accuracies

    # Pipelines

    def attack_methods(self) -> List[MethodName]:
        chosen = [m for m in self.config.methods if m in ATTACK_METHODS]
        return chosen or [MethodName.MIA_LOSS, MethodName.MIA_CONF]

    def active_pipeline(self, setups: Sequence[Setup]) -> List[tuple]:
        return [(f"train_active[{s.value}]", lambda s=s: self.active(s)) for s in setups]

    def full_pipeline(self, setups: Sequence[Setup] = tuple(Setup)) -> List[tuple]:
        methods = set(self.config.methods)
        stages = [("prepare_data", self.prepare_data)]
        if MethodName.ACTIVE in methods:
            stages += self.active_pipeline(setups)
        attack_methods = [m for m in self.config.methods if m in ATTACK_METHODS]
        if MethodName.PASSIVE in methods or attack_methods:
            stages.append(("train_audited_only", self.audited))
        if MethodName.PASSIVE in methods:
            stages.append(("train_passive", self.passive))
        if attack_methods:
            stages.append(("run_mia", lambda: self.attacks(attack_methods)))
        return stages


def reproduce_config(dataset: str, scale: str, regime: str = "e1", data_root: Optional[Path] = None, download: bool = False) -> ExperimentConfig:
    """Experiment config for one dataset at a reproduce scale"""
    scale_preset = ScalePresets.get(scale)
    regime_preset = RegimePresets.get(regime)
    height, width, channels, num_classes = DatasetSources.SHAPES[dataset]
    return ExperimentConfig.model_validate({
        "dataset": {"name": dataset, "root": str(data_root) if data_root else None, "download": download},
        "subsample": {"members": scale_preset["members"], "externals": scale_preset["externals"]},
        "backbone": BackboneSpec.desk_default((height, width, channels), num_classes).model_dump(mode="json"),
        "mint_head": regime_preset["mint_head"],
        "train": {
            "learning_rate": scale_preset["learning_rate"],
            "batch_size": scale_preset["batch_size"],
            "max_epochs": scale_preset["max_epochs"],
            "early_stop_patience": scale_preset["early_stop_patience"],
            "weights": regime_preset["weights"],
        },
        "methods": [m.value for m in MethodName],
    })


def run_reproduce_cell(config_json: Dict[str, Any], output_dir: str, seed: int, log_level: Optional[str] = None) -> List[StageResult]:
    """One (dataset, seed) cell of `reproduce`; picklable for worker processes"""
    if log_level is not None:
        settings.setup_logging(log_level)
    configure_torch()
    runner = ExperimentRunner(ExperimentConfig.model_validate(config_json), "reproduce", Path(output_dir), seed)
    return runner.run(runner.full_pipeline())
