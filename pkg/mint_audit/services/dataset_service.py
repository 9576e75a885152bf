"""
Dataset Service
Loads MNIST (IDX) and CIFAR-10 (binary batches), splits the training pool into
members D and externals E, and composes the balanced mixed batches that route
samples to the audited and MINT loss paths.
"""

import gzip
import hashlib
import logging
import tarfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..config.settings import DatasetSources
from .exceptions import ConfigError, ContractViolationError, IngestionError, IntegrityError, SizeError
from .validation_service import MintSplit, Role, SplitPlan

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 32 * 32 * 3

# Array codes for roles and MINT split flags
UNASSIGNED = -1
ROLE_CODES = {Role.MEMBER: 1, Role.EXTERNAL: 0}
SPLIT_CODES = {MintSplit.FIT: 0, MintSplit.EVAL: 1}


@dataclass(frozen=True)
class SampleRecord:
    """One image with its class label, membership role and MINT split flag"""
    id: int
    image: np.ndarray
    class_label: int
    role: Optional[Role]
    mint_split: Optional[MintSplit]


@dataclass(frozen=True)
class RecordSet:
    """Column-oriented, read-only collection of SampleRecords"""
    ids: np.ndarray
    images: np.ndarray
    class_labels: np.ndarray
    roles: np.ndarray
    mint_splits: np.ndarray
    metadata: Dict[str, object] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = len(self.ids)
        for name in ("images", "class_labels", "roles", "mint_splits"):
            if len(getattr(self, name)) != n:
                raise ContractViolationError(f"RecordSet column {name} has {len(getattr(self, name))} rows, expected {n}")
        for name in ("ids", "images", "class_labels", "roles", "mint_splits"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def from_arrays(cls, ids, images, class_labels, roles=None, mint_splits=None, metadata=None) -> "RecordSet":
        n = len(ids)
        return cls(
            ids=np.ascontiguousarray(ids, dtype=np.int64),
            images=np.ascontiguousarray(images, dtype=np.float32),
            class_labels=np.ascontiguousarray(class_labels, dtype=np.int64),
            roles=np.full(n, UNASSIGNED, dtype=np.int8) if roles is None else np.asarray(roles, dtype=np.int8),
            mint_splits=np.full(n, UNASSIGNED, dtype=np.int8) if mint_splits is None else np.asarray(mint_splits, dtype=np.int8),
            metadata=dict(metadata or {}),
        )

    @classmethod
    def concat(cls, parts: Sequence["RecordSet"]) -> "RecordSet":
        if not parts:
            raise ContractViolationError("cannot concatenate zero record sets")
        return cls.from_arrays(
            ids=np.concatenate([p.ids for p in parts]),
            images=np.concatenate([p.images for p in parts]),
            class_labels=np.concatenate([p.class_labels for p in parts]),
            roles=np.concatenate([p.roles for p in parts]),
            mint_splits=np.concatenate([p.mint_splits for p in parts]),
        )

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[SampleRecord]:
        for i in range(len(self)):
            yield self.record(i)

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def record(self, i: int) -> SampleRecord:
        role_code, split_code = int(self.roles[i]), int(self.mint_splits[i])
        return SampleRecord(
            id=int(self.ids[i]),
            image=self.images[i],
            class_label=int(self.class_labels[i]),
            role=None if role_code == UNASSIGNED else (Role.MEMBER if role_code == 1 else Role.EXTERNAL),
            mint_split=None if split_code == UNASSIGNED else (MintSplit.EVAL if split_code == 1 else MintSplit.FIT),
        )

    def take(self, indices) -> "RecordSet":
        indices = np.asarray(indices, dtype=np.int64)
        return RecordSet.from_arrays(
            ids=self.ids[indices],
            images=self.images[indices],
            class_labels=self.class_labels[indices],
            roles=self.roles[indices],
            mint_splits=self.mint_splits[indices],
        )

    def without_ids(self, ids) -> "RecordSet":
        if ids is None or len(ids) == 0:
            return self
        return self.take(np.flatnonzero(~np.isin(self.ids, np.asarray(ids, dtype=np.int64))))

    def with_assignment(self, role: Role, eval_mask: np.ndarray) -> "RecordSet":
        """Assign role and MINT split flags; roles are immutable once set"""
        if np.any(self.roles != UNASSIGNED):
            raise ContractViolationError("records already carry a membership role")
        return RecordSet.from_arrays(
            ids=self.ids,
            images=self.images,
            class_labels=self.class_labels,
            roles=np.full(len(self), ROLE_CODES[role], dtype=np.int8),
            mint_splits=np.where(eval_mask, SPLIT_CODES[MintSplit.EVAL], SPLIT_CODES[MintSplit.FIT]).astype(np.int8),
        )

    def fit_records(self) -> "RecordSet":
        return self.take(np.flatnonzero(self.mint_splits == SPLIT_CODES[MintSplit.FIT]))

    def eval_records(self) -> "RecordSet":
        return self.take(np.flatnonzero(self.mint_splits == SPLIT_CODES[MintSplit.EVAL]))

    def membership_labels(self) -> np.ndarray:
        if np.any(self.roles == UNASSIGNED):
            raise ContractViolationError("records have no membership role")
        return self.roles.astype(np.float32)

    def class_distribution(self) -> Dict[int, int]:
        labels, counts = np.unique(self.class_labels, return_counts=True)
        return {int(k): int(v) for k, v in zip(labels, counts)}


@dataclass(frozen=True)
class DatasetHandle:
    name: str
    root: Path
    train: RecordSet
    test: RecordSet
    num_classes: int
    checksums: Dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class MixedBatch:
    """Half members (audited + MINT paths), half externals (MINT path only)"""
    member_images: np.ndarray
    member_class_labels: np.ndarray
    external_images: np.ndarray
    membership_labels: np.ndarray
    member_ids: np.ndarray
    external_ids: np.ndarray

    @property
    def size(self) -> int:
        return len(self.member_images) + len(self.external_images)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _md5(path: Path) -> str:
    digest = hashlib.md5()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class DatasetService:
    """Reads the standard binary distributions of the supported datasets"""

    def __init__(self):
        self.cache: Dict[Tuple[str, str], DatasetHandle] = {}
        self.loaders = {
            "mnist": self._load_mnist,
            "cifar10": self._load_cifar10,
        }

    def load(self, name: str, root: Path) -> DatasetHandle:
        if name not in self.loaders:
            raise IngestionError(root, f"unknown dataset '{name}'. Available: {list(self.loaders)}")
        root = Path(root).expanduser()
        cache_key = (name, str(root.resolve()))
        if cache_key in self.cache:
            logger.info(f"Cache hit for dataset {name} at {root}")
            return self.cache[cache_key]

        handle = self.loaders[name](root)
        self.cache[cache_key] = handle
        logger.info(f"✅ Loaded {name}: {len(handle.train)} train-pool records, {len(handle.test)} test records")
        return handle

    def verify_checksums(self, name: str, root: Path) -> Dict[str, bool]:
        """MD5 of every published archive present under root; raises on mismatch"""
        root = Path(root).expanduser()
        if name == "mnist":
            expected = {f"{base}.gz": md5 for base, md5 in DatasetSources.MNIST_FILES.values()}
            directories = (root, root / "mnist", root / "MNIST" / "raw")
        elif name == "cifar10":
            expected = {DatasetSources.CIFAR10_ARCHIVE: DatasetSources.CIFAR10_ARCHIVE_MD5}
            directories = (root,)
        else:
            raise IngestionError(root, f"unknown dataset '{name}'. Available: {list(self.loaders)}")

        verified = {}
        for filename, digest in expected.items():
            found = [d / filename for d in directories if (d / filename).is_file()]
            verified[filename] = bool(found)
            for path in found:
                if _md5(path) != digest:
                    raise IntegrityError(f"{path}: MD5 does not match the published digest {digest}")
        logger.info(f"Checksums for {name}: {sum(verified.values())}/{len(verified)} archives present and verified")
        return verified

    # MNIST

    def _locate_mnist_file(self, root: Path, base: str) -> Path:
        for directory in (root, root / "mnist", root / "MNIST" / "raw"):
            for candidate in (directory / base, directory / f"{base}.gz"):
                if candidate.is_file():
                    return candidate
        raise IngestionError(root / base, "MNIST file not found (raw or .gz)")

    def _read_idx(self, path: Path, expected_magic: int, expected_md5: Optional[str]) -> np.ndarray:
        if path.suffix == ".gz":
            if expected_md5 and _md5(path) != expected_md5:
                raise IntegrityError(f"{path}: MD5 does not match the published digest {expected_md5}")
            try:
                with gzip.open(path, "rb") as handle:
                    data = handle.read()
            except (OSError, EOFError) as e:
                raise IngestionError(path, f"corrupt gzip archive ({e})")
        else:
            data = path.read_bytes()

        if len(data) < 8:
            raise IngestionError(path, "truncated IDX header")
        magic = int(np.frombuffer(data, dtype=">u4", count=1)[0])
        if magic != expected_magic:
            raise IngestionError(path, f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")

        ndims = magic & 0xFF
        header_bytes = 4 + 4 * ndims
        if len(data) < header_bytes:
            raise IngestionError(path, "truncated IDX header")
        dims = tuple(int(d) for d in np.frombuffer(data, dtype=">u4", count=ndims, offset=4))
        expected_bytes = header_bytes + int(np.prod(dims))
        if len(data) != expected_bytes:
            raise IngestionError(path, f"size {len(data)} bytes, header declares {expected_bytes}")
        return np.frombuffer(data, dtype=np.uint8, offset=header_bytes).reshape(dims)

    def _load_mnist(self, root: Path) -> DatasetHandle:
        arrays, checksums = {}, {}
        for key, (base, md5) in DatasetSources.MNIST_FILES.items():
            path = self._locate_mnist_file(root, base)
            magic = IDX_IMAGES_MAGIC if key.endswith("images") else IDX_LABELS_MAGIC
            arrays[key] = self._read_idx(path, magic, md5)
            checksums[path.name] = _sha256(path)

        for split in ("train", "test"):
            if len(arrays[f"{split}_images"]) != len(arrays[f"{split}_labels"]):
                raise IngestionError(root, f"MNIST {split} images and labels disagree in count")

        train = self._to_records(arrays["train_images"][..., None], arrays["train_labels"], id_offset=0)
        test = self._to_records(arrays["test_images"][..., None], arrays["test_labels"], id_offset=len(train))
        return DatasetHandle(name="mnist", root=root, train=train, test=test, num_classes=10, checksums=checksums)

    # CIFAR-10

    def _locate_cifar_dir(self, root: Path) -> Path:
        for directory in (root / DatasetSources.CIFAR10_DIR, root):
            if (directory / DatasetSources.CIFAR10_TEST_BATCH).is_file():
                return directory

        archive = root / DatasetSources.CIFAR10_ARCHIVE
        if archive.is_file():
            if _md5(archive) != DatasetSources.CIFAR10_ARCHIVE_MD5:
                raise IntegrityError(f"{archive}: MD5 does not match the published digest")
            logger.info(f"Extracting {archive}")
            try:
                with tarfile.open(archive, "r:gz") as tar:
                    tar.extractall(root, filter="data")
            except (tarfile.TarError, OSError) as e:
                raise IngestionError(archive, f"corrupt archive ({e})")
            return root / DatasetSources.CIFAR10_DIR

        raise IngestionError(root / DatasetSources.CIFAR10_DIR / DatasetSources.CIFAR10_TEST_BATCH, "CIFAR-10 batch not found")

    def _read_cifar_batch(self, path: Path) -> Tuple[np.ndarray, np.ndarray]:
        if not path.is_file():
            raise IngestionError(path, "CIFAR-10 batch not found")
        data = np.fromfile(path, dtype=np.uint8)
        if data.size == 0 or data.size % CIFAR_RECORD_BYTES:
            raise IngestionError(path, f"size {data.size} is not a multiple of {CIFAR_RECORD_BYTES}-byte records")
        records = data.reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        if labels.max() > 9:
            raise IngestionError(path, f"label {int(labels.max())} out of range")
        images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        return images, labels

    def _load_cifar10(self, root: Path) -> DatasetHandle:
        directory = self._locate_cifar_dir(root)
        checksums = {}
        train_parts = []
        for name in DatasetSources.CIFAR10_TRAIN_BATCHES:
            path = directory / name
            train_parts.append(self._read_cifar_batch(path))
            checksums[name] = _sha256(path)
        test_path = directory / DatasetSources.CIFAR10_TEST_BATCH
        test_images, test_labels = self._read_cifar_batch(test_path)
        checksums[test_path.name] = _sha256(test_path)

        train = self._to_records(
            np.concatenate([images for images, _ in train_parts]),
            np.concatenate([labels for _, labels in train_parts]),
            id_offset=0,
        )
        test = self._to_records(test_images, test_labels, id_offset=len(train))
        return DatasetHandle(name="cifar10", root=root, train=train, test=test, num_classes=10, checksums=checksums)

    @staticmethod
    def _to_records(images: np.ndarray, labels: np.ndarray, id_offset: int) -> RecordSet:
        return RecordSet.from_arrays(
            ids=np.arange(id_offset, id_offset + len(labels)),
            images=images.astype(np.float32) / 255.0,
            class_labels=labels,
        )


# Global service instance
dataset_service = DatasetService()


def load_dataset(name: str, root: Path) -> DatasetHandle:
    """Load a dataset's train pool and official test split, pixels in [0, 1]"""
    return dataset_service.load(name, root)


def verify_checksums(name: str, root: Path) -> Dict[str, bool]:
    return dataset_service.verify_checksums(name, root)


def make_split(handle: DatasetHandle, plan: SplitPlan) -> Tuple[RecordSet, RecordSet, RecordSet]:
    """
    Split the train pool into members D and externals E.

    Assignment depends only on the record ids and the plan seed: ids are put in
    ascending order and permuted by a generator seeded with the plan. Within
    each side a mint_eval_fraction share is flagged EVAL.
    """
    if plan.seed is None:
        raise ContractViolationError("SplitPlan.seed must be resolved before splitting")
    pool = handle.train
    canonical = np.argsort(pool.ids, kind="stable")
    permutation = np.random.default_rng([plan.seed, 0]).permutation(len(pool))
    n_members = int(round(plan.member_fraction * len(pool)))

    member_idx = canonical[np.sort(permutation[:n_members])]
    external_idx = canonical[np.sort(permutation[n_members:])]

    sides = []
    for stream, (role, indices) in enumerate(((Role.MEMBER, member_idx), (Role.EXTERNAL, external_idx)), start=1):
        records = pool.take(indices)
        n_eval = int(round(plan.mint_eval_fraction * len(records)))
        eval_mask = np.zeros(len(records), dtype=bool)
        eval_mask[np.random.default_rng([plan.seed, stream]).permutation(len(records))[:n_eval]] = True
        sides.append(records.with_assignment(role, eval_mask))

    members, externals = sides
    logger.info(
        f"Split {handle.name}: |D|={len(members)} ({len(members.eval_records())} eval), "
        f"|E|={len(externals)} ({len(externals.eval_records())} eval)"
    )
    return members, externals, handle.test


def subsample(records: RecordSet, n: int, seed: int) -> RecordSet:
    """Uniform random n-subset in original order; class distribution in metadata"""
    if n < 0 or n > len(records):
        raise SizeError(f"cannot draw {n} records from a set of {len(records)}")
    chosen = np.sort(np.random.default_rng(seed).choice(len(records), size=n, replace=False))
    result = records.take(chosen)
    result.metadata["class_distribution"] = result.class_distribution()
    return result


def carve_validation(members: RecordSet, fraction: float, seed: int) -> Tuple[RecordSet, RecordSet]:
    """
    Hold out an audited-validation share of D for early stopping.

    Only FIT records are eligible so that every EVAL member stays training data
    of the audited model. Returns (remaining members, validation records).
    """
    fit_positions = np.flatnonzero(members.mint_splits == SPLIT_CODES[MintSplit.FIT])
    n_val = int(round(fraction * len(members)))
    n_val = min(n_val, len(fit_positions))
    chosen = np.random.default_rng([seed, 3]).permutation(fit_positions)[:n_val]
    keep = np.setdiff1d(np.arange(len(members)), chosen)
    return members.take(keep), members.take(np.sort(chosen))


def count_batches(members_fit: RecordSet, externals_fit: RecordSet, batch_size: int) -> int:
    half = batch_size // 2
    return min(len(members_fit), len(externals_fit)) // half


def compose_batches(
    members_fit: RecordSet,
    externals_fit: RecordSet,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    shuffle_membership: bool = False,
) -> Iterator[MixedBatch]:
    """
    Yield one epoch of balanced mixed batches.

    Each batch holds batch_size/2 members and batch_size/2 externals drawn from
    FIT records only; the trailing partial batch is dropped. The order is a
    function of (seed, epoch). With shuffle_membership the membership labels
    are permuted inside each batch (chance control).
    """
    if batch_size % 2:
        raise ConfigError("batch_size", f"must be even, got {batch_size}")
    members_fit, externals_fit = members_fit.fit_records(), externals_fit.fit_records()
    if len(members_fit) == 0 or len(externals_fit) == 0:
        raise ContractViolationError("both member and external FIT sets must be nonempty")

    half = batch_size // 2
    rng = np.random.default_rng([seed, epoch])
    member_order = rng.permutation(len(members_fit))
    external_order = rng.permutation(len(externals_fit))
    base_labels = np.concatenate([np.ones(half, dtype=np.float32), np.zeros(half, dtype=np.float32)])

    for b in range(count_batches(members_fit, externals_fit, batch_size)):
        m_idx = member_order[b * half:(b + 1) * half]
        e_idx = external_order[b * half:(b + 1) * half]
        labels = rng.permutation(base_labels) if shuffle_membership else base_labels.copy()
        yield MixedBatch(
            member_images=members_fit.images[m_idx],
            member_class_labels=members_fit.class_labels[m_idx],
            external_images=externals_fit.images[e_idx],
            membership_labels=labels,
            member_ids=members_fit.ids[m_idx],
            external_ids=externals_fit.ids[e_idx],
        )


def compose_supplements(members_eval: RecordSet, num_batches: int, seed: int, epoch: int = 0) -> List[RecordSet]:
    """
    Spread the EVAL members over the steps of an epoch.

    These records are training data of the audited model but never enter a
    MixedBatch, so each step feeds its share to the audited loss alone.
    """
    if num_batches <= 0:
        return []
    if len(members_eval) == 0:
        return [members_eval] * num_batches
    order = np.random.default_rng([seed, epoch, 7]).permutation(len(members_eval))
    return [members_eval.take(chunk) for chunk in np.array_split(order, num_batches)]


def split_manifest_rows(members: RecordSet, externals: RecordSet) -> List[Tuple[int, str, str]]:
    """Rows `id,role,mint_split` ordered by id"""
    rows = []
    for records in (members, externals):
        for record in records:
            rows.append((record.id, record.role.value, record.mint_split.value))
    return sorted(rows)


def assign_from_manifest(pool: RecordSet, rows: Sequence[Tuple[int, str, str]]) -> Tuple[RecordSet, RecordSet]:
    """Rebuild D and E from persisted split manifest rows"""
    position = {int(i): p for p, i in enumerate(pool.ids)}
    if any(int(i) not in position for i, _, _ in rows):
        raise ContractViolationError("split manifest references ids outside the pool")
    sides = {}
    for role in (Role.MEMBER, Role.EXTERNAL):
        selected = [(position[int(i)], split == MintSplit.EVAL.value) for i, r, split in rows if r == role.value]
        indices = np.array([p for p, _ in selected], dtype=np.int64)
        eval_mask = np.array([e for _, e in selected], dtype=bool)
        sides[role] = pool.take(indices).with_assignment(role, eval_mask)
    return sides[Role.MEMBER], sides[Role.EXTERNAL]
