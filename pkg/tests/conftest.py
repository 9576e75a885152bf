import gzip
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from mint_audit.services.dataset_service import RecordSet
from mint_audit.services.validation_service import (
    BackboneSpec,
    ConvBlockSpec,
    MintHeadSpec,
    Role,
    TrainConfig,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def write_idx(path: Path, array: np.ndarray, magic: int, compress: bool = False) -> Path:
    """IDX file: big-endian magic, big-endian dims, raw uint8 payload"""
    header = np.array([magic, *array.shape], dtype=">u4").tobytes()
    payload = header + np.ascontiguousarray(array, dtype=np.uint8).tobytes()
    if compress:
        path = path.with_name(path.name + ".gz")
        with gzip.open(path, "wb") as handle:
            handle.write(payload)
    else:
        path.write_bytes(payload)
    return path


def write_mnist(root: Path, n_train: int = 120, n_test: int = 30, seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        labels = (np.arange(n) % 10).astype(np.uint8)
        images = rng.integers(0, 64, size=(n, 28, 28), dtype=np.uint8)
        # brighter stripe per class so the task is learnable
        for i, label in enumerate(labels):
            images[i, 2 * label:2 * label + 3, :] = 255
        write_idx(root / f"{prefix}-images-idx3-ubyte", images, IDX_IMAGES_MAGIC)
        write_idx(root / f"{prefix}-labels-idx1-ubyte", labels, IDX_LABELS_MAGIC)
    return root


def write_cifar_batch(path: Path, n: int, seed: int) -> Path:
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % 10).astype(np.uint8)
    pixels = rng.integers(0, 256, size=(n, 3 * 32 * 32), dtype=np.uint8)
    path.write_bytes(np.concatenate([labels[:, None], pixels], axis=1).tobytes())
    return path


def write_cifar(root: Path, per_batch: int = 10) -> Path:
    directory = root / "cifar-10-batches-bin"
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(1, 6):
        write_cifar_batch(directory / f"data_batch_{i}.bin", per_batch, seed=i)
    write_cifar_batch(directory / "test_batch.bin", per_batch, seed=99)
    return root


@pytest.fixture
def mnist_root(tmp_path) -> Path:
    return write_mnist(tmp_path / "mnist")


@pytest.fixture
def cifar_root(tmp_path) -> Path:
    return write_cifar(tmp_path / "cifar10")


@pytest.fixture
def tiny_spec() -> BackboneSpec:
    return BackboneSpec(
        blocks=[ConvBlockSpec(channels=2) for _ in range(3)],
        num_classes=3,
        input_shape=(8, 8, 1),
    )


@pytest.fixture
def tiny_head() -> MintHeadSpec:
    return MintHeadSpec(per_path_conv_channels=[2], dropout=0.0, hidden_dim=4)


@pytest.fixture
def tiny_train() -> TrainConfig:
    return TrainConfig(
        learning_rate=1e-2,
        max_epochs=2,
        early_stop_patience=1,
        batch_size=8,
        seed=0,
        eval_batch_size=32,
    )


def make_records(
    n: int,
    role: Role,
    seed: int = 0,
    id_offset: int = 0,
    eval_fraction: float = 0.25,
    shape=(8, 8, 1),
    num_classes: int = 3,
) -> RecordSet:
    rng = np.random.default_rng(seed)
    records = RecordSet.from_arrays(
        ids=np.arange(id_offset, id_offset + n),
        images=rng.random((n, *shape), dtype=np.float32),
        class_labels=np.arange(n) % num_classes,
    )
    eval_mask = np.zeros(n, dtype=bool)
    eval_mask[: int(round(eval_fraction * n))] = True
    return records.with_assignment(role, eval_mask)


@pytest.fixture
def member_records() -> RecordSet:
    return make_records(40, Role.MEMBER, seed=1, id_offset=0)


@pytest.fixture
def external_records() -> RecordSet:
    return make_records(40, Role.EXTERNAL, seed=2, id_offset=1000)


class FixedLogits(nn.Module):
    """Returns a preset logits row per sample; the row index is stored in pixel (0, 0, 0)"""

    def __init__(self, table):
        super().__init__()
        self.table = nn.Parameter(torch.as_tensor(np.asarray(table), dtype=torch.float64))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.table[images[:, 0, 0, 0].round().long()]


def indexed_records(class_labels, roles=None, eval_flags=None, id_offset: int = 0) -> RecordSet:
    """One 1x1x1 image per record holding its row index"""
    n = len(class_labels)
    return RecordSet.from_arrays(
        ids=np.arange(id_offset, id_offset + n),
        images=np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1),
        class_labels=class_labels,
        roles=roles,
        mint_splits=eval_flags,
    )
