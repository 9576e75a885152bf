import json

import numpy as np
import pytest
import torch

from mint_audit.artifact_manager import META_KEY, ArtifactManager, read_results
from mint_audit.services.attack_service import AttackScores
from mint_audit.services.evaluation_service import make_record
from mint_audit.services.exceptions import CheckpointError, ContractViolationError, IntegrityError, NoResultsError
from mint_audit.services.model_service import (
    AuditedModel,
    EnhancedModel,
    MintHead,
    build_enhanced_model,
    parameter_checksum,
    resolve_taps,
    to_tensor,
)
from mint_audit.services.seed_service import torch_generator
from mint_audit.services.training_service import EpochRecord, TrainState
from mint_audit.services.validation_service import MethodName, RunManifest, Setup


@pytest.fixture
def artifacts(tmp_path):
    return ArtifactManager(tmp_path / "run")


def rewrite(path, mutate):
    with np.load(path, allow_pickle=False) as data:
        arrays = {key: np.array(data[key]) for key in data.files}
    meta = json.loads(str(arrays.pop(META_KEY)))
    mutate(arrays, meta)
    with open(path, "wb") as handle:
        np.savez(handle, **arrays, **{META_KEY: np.array(json.dumps(meta))})


def test_enhanced_checkpoint_round_trip(artifacts, tiny_spec, tiny_head):
    model = build_enhanced_model(tiny_spec, Setup.MIDDLE, tiny_head, init_seed=3, dropout_seed=0)
    artifacts.save_checkpoint("active_middle", model)

    loaded, meta = artifacts.load_checkpoint("active_middle")

    assert isinstance(loaded, EnhancedModel)
    assert meta["kind"] == "enhanced"
    assert meta["sha256"] == parameter_checksum(model) == parameter_checksum(loaded)
    assert loaded.taps == model.taps
    images = to_tensor(np.random.default_rng(0).random((3, 8, 8, 1), dtype=np.float32))
    model.eval()
    loaded.eval()
    assert torch.equal(model.membership_probability(images), loaded.membership_probability(images))


def test_head_checkpoint_needs_its_context(artifacts, tiny_spec, tiny_head):
    head = MintHead(tiny_head, (2, 2), torch_generator(0))

    with pytest.raises(CheckpointError):
        artifacts.save_checkpoint("head", head)

    path = artifacts.save_checkpoint("head", head, resolve_taps(tiny_spec, Setup.ENTRY), tiny_spec)
    loaded, meta = artifacts.load_checkpoint(path)
    assert isinstance(loaded, MintHead)
    assert loaded.in_channels == (2, 2)
    assert meta["tap_config"]["taps"] == [[0, 0], [0, 1]]


def test_audited_checkpoint(artifacts, tiny_spec):
    model = AuditedModel(tiny_spec, torch_generator(5))
    artifacts.save_checkpoint("audited", model)

    loaded, _ = artifacts.load_checkpoint(artifacts.root / "audited.npz")

    assert isinstance(loaded, AuditedModel)
    assert parameter_checksum(loaded) == parameter_checksum(model)


def test_checkpoint_keeps_held_out_ids(artifacts, tiny_spec):
    model = AuditedModel(tiny_spec, torch_generator(0))
    artifacts.save_checkpoint("audited", model, held_out_ids=np.array([7, 3, 12]))
    artifacts.save_checkpoint("plain", model)

    _, meta = artifacts.load_checkpoint("audited")
    _, plain_meta = artifacts.load_checkpoint("plain")

    assert meta["held_out_ids"] == [7, 3, 12]
    assert plain_meta["held_out_ids"] == []


def test_tampered_checkpoint(artifacts, tiny_spec):
    path = artifacts.save_checkpoint("audited", AuditedModel(tiny_spec, torch_generator(0)))

    def bump(arrays, meta):
        arrays["classifier.bias"] = arrays["classifier.bias"] + 1.0

    rewrite(path, bump)
    with pytest.raises(IntegrityError):
        artifacts.load_checkpoint(path)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda arrays, meta: meta.update(version=2),
        lambda arrays, meta: meta.update(format="other"),
        lambda arrays, meta: arrays.pop("classifier.weight"),
        lambda arrays, meta: meta["shapes"].update({"classifier.bias": [4]}),
    ],
    ids=["version", "format", "missing-array", "shape"],
)
def test_incompatible_checkpoint(artifacts, tiny_spec, mutate):
    path = artifacts.save_checkpoint("audited", AuditedModel(tiny_spec, torch_generator(0)))
    rewrite(path, mutate)

    with pytest.raises(CheckpointError):
        artifacts.load_checkpoint(path)


def test_missing_checkpoint(artifacts):
    with pytest.raises(CheckpointError, match="not found"):
        artifacts.load_checkpoint("nothing_here")


def test_paths_stay_inside_the_run(artifacts):
    assert artifacts.path("sub", "file.csv").parent.is_dir()
    with pytest.raises(ContractViolationError):
        artifacts.path("..", "escape.csv")


def test_results_round_trip(artifacts, tmp_path):
    records = [
        make_record(MethodName.PASSIVE, Setup.ENTRY, "mnist", 1, 0.6, 0.9),
        make_record(MethodName.ACTIVE, Setup.ENTRY, "mnist", 0, 0.8, 0.95),
        make_record(MethodName.MIA_LOSS, None, "mnist", 0, 1 / 3, 0.95),
    ]
    artifacts.write_results("results.csv", records)
    ArtifactManager(tmp_path / "run" / "nested").write_results("results_extra.csv", records[:1])
    (tmp_path / "run" / "results_other.csv").write_text("unrelated,header\n1,2\n")

    loaded = read_results(tmp_path / "run")

    assert len(loaded) == 4
    assert any(r.method == MethodName.MIA_LOSS and r.mint_acc == 1 / 3 for r in loaded)
    assert sorted(loaded, key=lambda r: r.sort_key()) == sorted(records + records[:1], key=lambda r: r.sort_key())


def test_no_results(tmp_path):
    with pytest.raises(NoResultsError):
        read_results(tmp_path)
    with pytest.raises(NoResultsError):
        read_results(tmp_path / "missing")


def test_step_log_and_history(artifacts):
    rows = [{"step": 0, "mint_raw": 0.7, "reg": 0.0, "total": 0.7}]
    state = TrainState(epoch=1, history=[EpochRecord(0, 0.5, None, 0.4, 0.45, {"total": 0.7})])

    steps = artifacts.write_step_log("steps.csv", rows).read_text().splitlines()
    history = artifacts.write_history("history.csv", state).read_text().splitlines()

    assert steps == ["step,mint_raw,reg,total", "0,0.7,0.0,0.7"]
    assert history == ["epoch,mint_fit_acc,mint_eval_acc,audited_val_acc,criterion,total", "0,0.5,,0.4,0.45,0.7"]


def test_split_manifest(artifacts):
    rows = [(0, "member", "fit"), (3, "external", "eval")]
    artifacts.write_split_manifest("split.csv", rows)

    assert artifacts.read_split_manifest("split.csv") == rows
    with pytest.raises(CheckpointError):
        artifacts.read_split_manifest("absent.csv")


def test_scores_file(artifacts):
    path = artifacts.write_scores("scores.csv", AttackScores.build([4, 1], [-0.5, -0.25], [0, 1]))

    assert path.read_text().splitlines() == ["sample_id,score,true_membership", "1,-0.25,1", "4,-0.5,0"]


def test_manifest_lifecycle(artifacts):
    manifest = RunManifest(
        command="train-active", config={"a": 1}, seeds={"split": 1}, toolkit_version="1.0.0", started_at="now",
    )
    artifacts.write_manifest(manifest)
    assert artifacts.read_manifest().status == "running"

    finished = artifacts.finalize_manifest(manifest, "failed", "boom")

    assert artifacts.read_manifest() == finished
    assert finished.status == "failed" and finished.error == "boom"
    assert finished.finished_at is not None
