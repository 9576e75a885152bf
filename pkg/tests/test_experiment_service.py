import numpy as np
import pytest

from mint_audit.config.settings import RegimePresets, ScalePresets
from mint_audit.services.dataset_service import DatasetHandle
from mint_audit.services.experiment_service import PreparedData, reproduce_config
from mint_audit.services.validation_service import Role
from tests.conftest import make_records


def prepared(member_records, external_records, held_out_ids=None):
    handle = DatasetHandle(
        name="synthetic", root=None, train=member_records, test=make_records(6, Role.MEMBER, id_offset=5000), num_classes=3
    )
    data = PreparedData(handle=handle, members=member_records, externals=external_records, test=handle.test)
    if held_out_ids is not None:
        data.held_out_ids = np.asarray(held_out_ids, dtype=np.int64)
    return data


def test_attack_calibration_skips_held_out_members(member_records, external_records):
    fit_ids = member_records.fit_records().ids
    held_out = fit_ids[:4]
    calibration = prepared(member_records, external_records, held_out).attack_calibration

    assert not set(held_out) & set(calibration.ids)
    assert set(fit_ids[4:]) <= set(calibration.ids)
    assert set(external_records.fit_records().ids) <= set(calibration.ids)
    assert not set(member_records.eval_records().ids) & set(calibration.ids)


def test_attack_calibration_without_held_out_members(member_records, external_records):
    calibration = prepared(member_records, external_records).attack_calibration

    assert len(calibration) == len(member_records.fit_records()) + len(external_records.fit_records())


@pytest.mark.parametrize("regime", ["e1", "e2"])
def test_reproduce_config_takes_rates_from_the_scale(regime):
    config = reproduce_config("cifar10", "desk", regime)

    assert config.mint_head.per_path_conv_channels == RegimePresets.get(regime)["mint_head"]["per_path_conv_channels"]
    assert config.train.weights.lambda2 == RegimePresets.get(regime)["weights"]["lambda2"]
    assert config.train.learning_rate == ScalePresets.DESK["learning_rate"]
    assert config.train.batch_size == ScalePresets.DESK["batch_size"]
    assert config.backbone.input_shape == (32, 32, 3)
