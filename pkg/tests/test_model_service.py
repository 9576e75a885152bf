import numpy as np
import pytest
import torch

from mint_audit.services.exceptions import DimensionError, ResolutionError
from mint_audit.services.model_service import (
    AuditedModel,
    EnhancedModel,
    MintHead,
    build_enhanced_model,
    extract_aad,
    forward_audited,
    forward_mint,
    parameter_checksum,
    partition_parameters,
    resolve_taps,
    tap_shapes,
    to_tensor,
)
from mint_audit.services.seed_service import torch_generator
from mint_audit.services.validation_service import BackboneSpec, ConvBlockSpec, MintHeadSpec, Setup


def images(n, shape=(8, 8, 1), seed=0):
    return to_tensor(np.random.default_rng(seed).random((n, *shape), dtype=np.float32))


@pytest.fixture
def five_block_spec():
    return BackboneSpec(
        blocks=[ConvBlockSpec(channels=c, layers_per_block=3) for c in (2, 3, 4, 5, 6)],
        num_classes=4,
        input_shape=(32, 32, 1),
    )


def test_entry_and_output_taps(tiny_spec, five_block_spec):
    assert resolve_taps(tiny_spec, Setup.ENTRY).taps == ((0, 0), (0, 1))
    assert resolve_taps(tiny_spec, Setup.OUTPUT).taps == ((2, 0), (2, 1))
    assert resolve_taps(five_block_spec, Setup.ENTRY).taps == ((0, 1), (0, 2))
    assert resolve_taps(five_block_spec, Setup.OUTPUT).taps == ((4, 1), (4, 2))


def test_middle_taps(tiny_spec, five_block_spec):
    assert resolve_taps(tiny_spec, Setup.MIDDLE).taps == ((0, 1), (1, 1))
    assert resolve_taps(five_block_spec, Setup.MIDDLE).taps == ((1, 2), (3, 2))


def test_tap_shapes_are_pre_pool(tiny_spec):
    assert tap_shapes(tiny_spec, resolve_taps(tiny_spec, Setup.ENTRY)) == [(8, 8, 2), (8, 8, 2)]
    assert tap_shapes(tiny_spec, resolve_taps(tiny_spec, Setup.OUTPUT)) == [(2, 2, 2), (2, 2, 2)]


def test_spec_rejects_shallow_backbones():
    with pytest.raises(ValueError):
        BackboneSpec(blocks=[ConvBlockSpec(channels=2)] * 2, input_shape=(8, 8, 1))
    with pytest.raises(ValueError):
        BackboneSpec(blocks=[ConvBlockSpec(channels=2, layers_per_block=1)] * 3, input_shape=(8, 8, 1))
    with pytest.raises(ValueError):
        BackboneSpec(blocks=[ConvBlockSpec(channels=2)] * 4, input_shape=(8, 8, 1))


def test_tap_config_for_other_spec(tiny_spec, five_block_spec, tiny_head):
    with pytest.raises(ResolutionError):
        EnhancedModel(tiny_spec, resolve_taps(five_block_spec, Setup.ENTRY), tiny_head)


def test_wrong_input_shape(tiny_spec):
    model = AuditedModel(tiny_spec, torch_generator(0))

    with pytest.raises(DimensionError):
        model(images(2, shape=(9, 9, 1)))


def test_tiny_model_size(tiny_spec, tiny_head):
    model = build_enhanced_model(tiny_spec, Setup.ENTRY, tiny_head, init_seed=0, dropout_seed=0)

    assert sum(p.numel() for p in model.parameters()) < 1000


def test_init_is_seeded(tiny_spec):
    first = AuditedModel(tiny_spec, torch_generator(7))
    second = AuditedModel(tiny_spec, torch_generator(7))
    other = AuditedModel(tiny_spec, torch_generator(8))

    assert parameter_checksum(first) == parameter_checksum(second)
    assert parameter_checksum(first) != parameter_checksum(other)


@pytest.mark.parametrize("setup", list(Setup))
def test_aad_matches_forward_hooks(tiny_spec, tiny_head, setup):
    model = build_enhanced_model(tiny_spec, setup, tiny_head, init_seed=1, dropout_seed=0)
    captured = {}
    handles = [
        model.audited.layer(tap).register_forward_hook(
            lambda module, inputs, output, tap=tap: captured.__setitem__(tap, output.detach().clone())
        )
        for tap in model.taps
    ]
    batch = images(5)
    model.forward_audited(batch)
    for handle in handles:
        handle.remove()

    aad = extract_aad(model, batch, model.tap_config)
    first, second = model.taps
    assert torch.equal(aad.map_a, captured[first])
    assert torch.equal(aad.map_b, captured[second])


def test_routed_forward_matches_separate_paths(tiny_spec, tiny_head):
    model = build_enhanced_model(tiny_spec, Setup.MIDDLE, tiny_head, init_seed=2, dropout_seed=0)
    model.eval()
    members, externals, supplement = images(3, seed=1), images(4, seed=2), images(2, seed=3)

    out = model.forward_routed(members, externals, supplement)

    assert out.logits.shape == (5, 3)
    assert out.probabilities.shape == (7,)
    expected_logits = forward_audited(model, torch.cat([members, supplement]))
    expected_probs = model.membership_probability(torch.cat([members, externals]))
    assert torch.allclose(out.logits, expected_logits, atol=1e-6)
    assert torch.allclose(out.probabilities, expected_probs, atol=1e-6)
    assert torch.all((out.probabilities >= 0) & (out.probabilities <= 1))


def test_head_rejects_wrong_channels(tiny_spec, tiny_head):
    model = build_enhanced_model(tiny_spec, Setup.ENTRY, tiny_head, init_seed=0, dropout_seed=0)
    aad = model.extract_aad(images(2))
    head = MintHead(tiny_head, (3, 3))

    with pytest.raises(DimensionError):
        forward_mint(head, aad)


@pytest.mark.parametrize("setup, shared_blocks", [(Setup.ENTRY, {0}), (Setup.MIDDLE, {0, 1}), (Setup.OUTPUT, {0, 1, 2})])
def test_partition(tiny_spec, tiny_head, setup, shared_blocks):
    model = build_enhanced_model(tiny_spec, setup, tiny_head, init_seed=0, dropout_seed=0)
    partition = partition_parameters(model)

    names = [set(group) for group in partition.groups().values()]
    assert set.union(*names) == {name for name, _ in model.named_parameters()}
    assert sum(len(n) for n in names) == len(set.union(*names))
    assert {int(name.split(".")[2]) for name in partition.shared} == shared_blocks
    assert all(name.startswith("mint_head.") for name in partition.mint)
    assert "audited.classifier.weight" in partition.audited_only


def test_seeded_dropout_is_reproducible(tiny_spec):
    spec = MintHeadSpec(per_path_conv_channels=[2], dropout=0.5, hidden_dim=8)
    model = build_enhanced_model(tiny_spec, Setup.ENTRY, spec, init_seed=0, dropout_seed=3)
    twin = build_enhanced_model(tiny_spec, Setup.ENTRY, spec, init_seed=0, dropout_seed=3)
    batch = images(6)

    assert torch.equal(model.membership_probability(batch), twin.membership_probability(batch))
    model.eval()
    assert torch.equal(model.membership_probability(batch), model.membership_probability(batch))


def test_checksum_tracks_changes(tiny_spec):
    model = AuditedModel(tiny_spec, torch_generator(0))
    before = parameter_checksum(model)
    with torch.no_grad():
        model.classifier.bias.add_(1.0)

    assert parameter_checksum(model) != before
