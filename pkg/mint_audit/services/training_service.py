"""
Training Service
Active MINT joint training of the Enhanced Audited Model, the audited-only
reference training, the Passive MINT post-hoc head training, and the
gradient-routing audit that checks which parameters each loss reaches.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .dataset_service import (
    MixedBatch,
    RecordSet,
    carve_validation,
    compose_batches,
    compose_supplements,
    count_batches,
    subsample,
)
from .evaluation_service import audited_accuracy, mint_accuracy
from .exceptions import ContractViolationError, InvariantViolationError, NumericDomainError, TrainingAbortedError
from .model_service import (
    AuditedModel,
    EnhancedModel,
    FrozenMintAuditor,
    MintHead,
    parameter_checksum,
    partition_parameters,
    resolve_taps,
    tap_shapes,
    to_tensor,
)
from .objective_service import (
    LossNormalizer,
    audited_loss,
    combine,
    l2_penalty,
    mint_loss,
    scalar,
    update_normalizer,
)
from .seed_service import torch_generator
from .validation_service import BackboneSpec, MintHeadSpec, OptimizerName, Setup, StopCriterion, TapConfig, TrainConfig

logger = logging.getLogger(__name__)

GradHook = Callable[[torch.nn.Module], None]


@dataclass
class EpochRecord:
    epoch: int
    mint_fit_acc: Optional[float]
    mint_eval_acc: Optional[float]
    audited_val_acc: Optional[float]
    criterion: float
    losses: Dict[str, float] = field(default_factory=dict)


@dataclass
class BestSnapshot:
    epoch: int
    criterion: float
    state: Dict[str, torch.Tensor]
    checkpoint_path: Optional[str] = None


@dataclass
class TrainState:
    epoch: int = 0
    history: List[EpochRecord] = field(default_factory=list)
    best_snapshot: Optional[BestSnapshot] = None
    step_log: List[Dict[str, float]] = field(default_factory=list)
    held_out_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _snapshot(module: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {name: tensor.detach().clone() for name, tensor in module.state_dict().items()}


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == OptimizerName.ADAM:
        return torch.optim.Adam(params, lr=cfg.learning_rate, betas=tuple(cfg.betas), eps=cfg.eps)
    raise ContractViolationError(f"unsupported optimizer {cfg.optimizer}")


def _resolved_seed(cfg: TrainConfig) -> int:
    return 0 if cfg.seed is None else int(cfg.seed)


def zero_gradients(module: torch.nn.Module):
    """Grad hook that zeroes every gradient before the optimizer step"""
    for parameter in module.parameters():
        if parameter.grad is not None:
            parameter.grad.zero_()


class EarlyStopper:
    """Keeps the best-criterion snapshot and counts epochs without improvement"""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: Optional[BestSnapshot] = None
        self.stale_epochs = 0

    def update(self, epoch: int, criterion: float, module: torch.nn.Module) -> bool:
        """Record an epoch; returns True when training should stop"""
        if self.best is None or criterion > self.best.criterion:
            self.best = BestSnapshot(epoch=epoch, criterion=criterion, state=_snapshot(module))
            self.stale_epochs = 0
            return False
        self.stale_epochs += 1
        return self.stale_epochs >= self.patience

    def restore(self, module: torch.nn.Module):
        if self.best is not None:
            module.load_state_dict(self.best.state)


def _criterion(cfg: TrainConfig, mint_fit: Optional[float], mint_eval: Optional[float], audited_val: Optional[float]) -> float:
    if cfg.stop_criterion == StopCriterion.AUDITED_VAL:
        parts = [audited_val]
    elif cfg.stop_criterion == StopCriterion.MINT_EVAL:
        parts = [mint_eval if mint_eval is not None else mint_fit]
    else:
        parts = [mint_eval if mint_eval is not None else mint_fit, audited_val]
    parts = [p for p in parts if p is not None]
    return float(np.mean(parts)) if parts else 0.0


def _check_disjoint(members: RecordSet, externals: RecordSet):
    if np.intersect1d(members.ids, externals.ids).size:
        raise ContractViolationError("member and external sets share record ids")


def _balanced_fit_sample(members: RecordSet, externals: RecordSet, cap: int, seed: int) -> Optional[RecordSet]:
    if len(members) == 0 or len(externals) == 0:
        return None
    n = min(cap, len(members), len(externals))
    return RecordSet.concat([subsample(members, n, seed), subsample(externals, n, seed + 1)])


def _raise_if_nonfinite(terms: Dict[str, float], step: int):
    if not all(math.isfinite(v) for v in terms.values()):
        logger.error(f"❌ Non-finite loss at step {step}: {terms}")
        raise TrainingAbortedError(f"non-finite loss at step {step}", terms)


class ActiveMintTrainer:
    """Joint training of the audited and MINT tasks on mixed batches"""

    def __init__(self, model: EnhancedModel, cfg: TrainConfig, grad_hook: Optional[GradHook] = None):
        self.model = model
        self.cfg = cfg
        self.seed = _resolved_seed(cfg)
        self.grad_hook = grad_hook
        self.optimizer = _make_optimizer(model.parameters(), cfg)
        self.audited_norm = LossNormalizer(momentum=cfg.normalizer_momentum, floor=cfg.normalizer_floor)
        self.mint_norm = LossNormalizer(momentum=cfg.normalizer_momentum, floor=cfg.normalizer_floor)
        self.dtype = next(model.parameters()).dtype
        self.global_step = 0

    def step(self, batch: MixedBatch, supplement: Optional[RecordSet] = None) -> Dict[str, float]:
        """One optimizer step on w+ for a mixed batch"""
        self.model.train()
        supplement_images = None
        class_labels = batch.member_class_labels
        if supplement is not None and len(supplement):
            supplement_images = to_tensor(supplement.images, self.dtype)
            class_labels = np.concatenate([class_labels, supplement.class_labels])

        out = self.model.forward_routed(
            to_tensor(batch.member_images, self.dtype),
            to_tensor(batch.external_images, self.dtype),
            supplement_images,
        )
        audited_raw = audited_loss(out.logits, torch.tensor(class_labels, dtype=torch.long))
        _raise_if_nonfinite({"audited_raw": scalar(audited_raw)}, self.global_step)
        try:
            mint_raw = mint_loss(out.probabilities, torch.tensor(batch.membership_labels, dtype=self.dtype))
        except NumericDomainError as e:
            raise TrainingAbortedError(f"step {self.global_step}: {e}", {"audited_raw": scalar(audited_raw)})

        self.audited_norm = update_normalizer(self.audited_norm, scalar(audited_raw))
        self.mint_norm = update_normalizer(self.mint_norm, scalar(mint_raw))
        loss = combine(audited_raw, mint_raw, self.audited_norm, self.mint_norm, self.cfg.weights, self.model.parameters())
        terms = loss.as_floats()
        _raise_if_nonfinite(terms, self.global_step)

        self.optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        if self.grad_hook is not None:
            self.grad_hook(self.model)
        self.optimizer.step()

        row = {"step": self.global_step, **terms}
        self.global_step += 1
        logger.debug(f"step {row['step']}: {terms}")
        return row

    def fit(self, members: RecordSet, externals: RecordSet) -> TrainState:
        cfg = self.cfg
        _check_disjoint(members, externals)
        members_train, members_val = carve_validation(members, cfg.audited_val_fraction, self.seed)
        members_fit, members_eval = members_train.fit_records(), members_train.eval_records()
        externals_fit, externals_eval = externals.fit_records(), externals.eval_records()
        mint_eval_set = (
            RecordSet.concat([members_eval, externals_eval]) if len(members_eval) and len(externals_eval) else None
        )
        fit_sample = _balanced_fit_sample(members_fit, externals_fit, cfg.mint_fit_eval_cap, self.seed)
        n_batches = count_batches(members_fit, externals_fit, cfg.batch_size)
        if n_batches == 0:
            raise ContractViolationError("not enough FIT records for one mixed batch")

        state = TrainState(held_out_ids=members_val.ids.copy())
        stopper = EarlyStopper(cfg.early_stop_patience)
        logger.info(
            f"Active MINT: {len(members_fit)} member / {len(externals_fit)} external FIT records, "
            f"{len(members_eval)} audited-only EVAL members, {n_batches} batches per epoch"
        )

        for epoch in range(cfg.max_epochs):
            supplements = compose_supplements(members_eval, n_batches, self.seed, epoch)
            batches = compose_batches(
                members_fit, externals_fit, cfg.batch_size, self.seed, epoch, cfg.shuffle_membership
            )
            rows = [self.step(batch, supplement) for batch, supplement in zip(batches, supplements)]
            state.step_log.extend(rows)

            mint_fit = mint_accuracy(self.model, fit_sample, cfg.eval_batch_size, require_eval=False) if fit_sample else None
            mint_eval = mint_accuracy(self.model, mint_eval_set, cfg.eval_batch_size) if mint_eval_set else None
            audited_val = audited_accuracy(self.model, members_val, cfg.eval_batch_size) if len(members_val) else None
            criterion = _criterion(cfg, mint_fit, mint_eval, audited_val)
            losses = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "step"}
            state.history.append(EpochRecord(epoch, mint_fit, mint_eval, audited_val, criterion, losses))
            state.epoch = epoch + 1
            logger.info(
                f"epoch {epoch}: mint_fit={mint_fit} mint_eval={mint_eval} audited_val={audited_val} "
                f"criterion={criterion:.4f} total={losses['total']:.4f}"
            )
            if stopper.update(epoch, criterion, self.model):
                logger.info(f"Early stop after epoch {epoch} (best epoch {stopper.best.epoch})")
                break

        stopper.restore(self.model)
        state.best_snapshot = stopper.best
        return state


def train_active(
    model: EnhancedModel, members: RecordSet, externals: RecordSet, cfg: TrainConfig, grad_hook: Optional[GradHook] = None
) -> Tuple[EnhancedModel, TrainState]:
    """Active MINT; returns the model restored to its best snapshot"""
    state = ActiveMintTrainer(model, cfg, grad_hook).fit(members, externals)
    return model, state


def train_audited_only(
    spec: BackboneSpec, members: RecordSet, cfg: TrainConfig, init_seed: int = 0
) -> Tuple[AuditedModel, TrainState]:
    """Supervised training of backbone + classifier on D alone"""
    seed = _resolved_seed(cfg)
    model = AuditedModel(spec, torch_generator(init_seed))
    optimizer = _make_optimizer(model.parameters(), cfg)
    dtype = next(model.parameters()).dtype
    members_train, members_val = carve_validation(members, cfg.audited_val_fraction, seed)
    state = TrainState(held_out_ids=members_val.ids.copy())
    stopper = EarlyStopper(cfg.early_stop_patience)
    step = 0

    for epoch in range(cfg.max_epochs):
        model.train()
        order = np.random.default_rng([seed, epoch]).permutation(len(members_train))
        rows = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = members_train.take(order[start:start + cfg.batch_size])
            raw = audited_loss(model(to_tensor(chunk.images, dtype)), torch.tensor(chunk.class_labels, dtype=torch.long))
            reg = cfg.weights.l2_coeff * l2_penalty(model.parameters())
            total = raw + reg
            terms = {"audited_raw": scalar(raw), "reg": scalar(reg), "total": scalar(total)}
            _raise_if_nonfinite(terms, step)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            rows.append({"step": step, **terms})
            step += 1
        state.step_log.extend(rows)

        audited_val = audited_accuracy(model, members_val, cfg.eval_batch_size) if len(members_val) else None
        criterion = audited_val if audited_val is not None else -float(np.mean([r["total"] for r in rows]))
        losses = {k: float(np.mean([r[k] for r in rows])) for k in ("audited_raw", "reg", "total")}
        state.history.append(EpochRecord(epoch, None, None, audited_val, criterion, losses))
        state.epoch = epoch + 1
        logger.info(f"audited-only epoch {epoch}: audited_val={audited_val} loss={losses['total']:.4f}")
        if stopper.update(epoch, criterion, model):
            logger.info(f"Early stop after epoch {epoch} (best epoch {stopper.best.epoch})")
            break

    stopper.restore(model)
    state.best_snapshot = stopper.best
    model.zero_grad(set_to_none=True)
    model.eval()
    return model, state


def _guard_frozen(frozen: torch.nn.Module):
    reached = [name for name, p in frozen.named_parameters() if p.grad is not None and torch.any(p.grad != 0)]
    if reached:
        raise InvariantViolationError(f"gradient reached frozen parameters: {reached[:3]}")


def train_passive_mint(
    frozen_model: AuditedModel,
    members: RecordSet,
    externals: RecordSet,
    head_spec: MintHeadSpec,
    cfg: TrainConfig,
    setup: Setup = Setup.ENTRY,
    init_seed: int = 0,
    dropout_seed: int = 0,
    held_out_ids: Optional[Sequence[int]] = None,
) -> Tuple[MintHead, TrainState]:
    """
    Passive MINT: train a MINT head on activation maps of a frozen model.

    held_out_ids are members the frozen model never trained on (its
    audited-validation share); they are dropped from D before any batch is
    labelled. The frozen model's parameters are checked to be bit-identical
    afterwards and its requires_grad flags are restored.
    """
    _check_disjoint(members, externals)
    members = members.without_ids(held_out_ids)
    seed = _resolved_seed(cfg)
    tap_config = resolve_taps(frozen_model.spec, setup)
    checksum_before = parameter_checksum(frozen_model)
    trainable = {name: p.requires_grad for name, p in frozen_model.named_parameters()}
    frozen_model.eval()
    frozen_model.zero_grad(set_to_none=True)
    frozen_model.requires_grad_(False)
    try:
        head, state = _fit_passive_head(
            frozen_model, members, externals, head_spec, cfg, tap_config, seed, init_seed, dropout_seed
        )
    finally:
        for name, p in frozen_model.named_parameters():
            p.requires_grad_(trainable[name])
    if parameter_checksum(frozen_model) != checksum_before:
        raise InvariantViolationError("frozen audited model changed during Passive MINT training")
    return head, state


def _fit_passive_head(
    frozen_model: AuditedModel,
    members: RecordSet,
    externals: RecordSet,
    head_spec: MintHeadSpec,
    cfg: TrainConfig,
    tap_config: TapConfig,
    seed: int,
    init_seed: int,
    dropout_seed: int,
) -> Tuple[MintHead, TrainState]:
    (_, _, channels_a), (_, _, channels_b) = tap_shapes(frozen_model.spec, tap_config)
    head = MintHead(head_spec, (channels_a, channels_b), torch_generator(init_seed), dropout_seed)
    auditor = FrozenMintAuditor(frozen_model, head, tap_config)
    optimizer = _make_optimizer(head.parameters(), cfg)
    dtype = next(head.parameters()).dtype

    members_fit, externals_fit = members.fit_records(), externals.fit_records()
    members_eval, externals_eval = members.eval_records(), externals.eval_records()
    mint_eval_set = RecordSet.concat([members_eval, externals_eval]) if len(members_eval) and len(externals_eval) else None
    fit_sample = _balanced_fit_sample(members_fit, externals_fit, cfg.mint_fit_eval_cap, seed)

    state = TrainState()
    stopper = EarlyStopper(cfg.early_stop_patience)
    step = 0
    for epoch in range(cfg.max_epochs):
        head.train()
        frozen_model.eval()
        rows = []
        for batch in compose_batches(members_fit, externals_fit, cfg.batch_size, seed, epoch, cfg.shuffle_membership):
            images = to_tensor(np.concatenate([batch.member_images, batch.external_images]), dtype)
            probabilities = head(auditor.extract_aad(images))
            raw = mint_loss(probabilities, torch.tensor(batch.membership_labels, dtype=dtype))
            reg = cfg.weights.l2_coeff * l2_penalty(head.parameters())
            total = raw + reg
            terms = {"mint_raw": scalar(raw), "reg": scalar(reg), "total": scalar(total)}
            _raise_if_nonfinite(terms, step)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            _guard_frozen(frozen_model)
            optimizer.step()
            rows.append({"step": step, **terms})
            step += 1
        state.step_log.extend(rows)

        mint_fit = mint_accuracy(auditor, fit_sample, cfg.eval_batch_size, require_eval=False) if fit_sample else None
        mint_eval = mint_accuracy(auditor, mint_eval_set, cfg.eval_batch_size) if mint_eval_set else None
        criterion = mint_eval if mint_eval is not None else (mint_fit or 0.0)
        losses = {k: float(np.mean([r[k] for r in rows])) for k in ("mint_raw", "reg", "total")} if rows else {}
        state.history.append(EpochRecord(epoch, mint_fit, mint_eval, None, criterion, losses))
        state.epoch = epoch + 1
        logger.info(f"passive epoch {epoch}: mint_fit={mint_fit} mint_eval={mint_eval}")
        if stopper.update(epoch, criterion, head):
            logger.info(f"Early stop after epoch {epoch} (best epoch {stopper.best.epoch})")
            break

    stopper.restore(head)
    state.best_snapshot = stopper.best
    return head, state


@dataclass
class RoutingReport:
    """Gradient norm per parameter group for each isolated loss"""
    audited_loss_norms: Dict[str, float]
    mint_loss_norms: Dict[str, float]

    def receives(self) -> Dict[str, List[str]]:
        return {
            "audited_loss": [g for g, n in self.audited_loss_norms.items() if n > 0],
            "mint_loss": [g for g, n in self.mint_loss_norms.items() if n > 0],
        }

    def violations(self) -> List[str]:
        found = []
        if self.mint_loss_norms["audited_only"] != 0.0:
            found.append("external-sample MINT loss reached audited-only parameters")
        if self.audited_loss_norms["mint"] != 0.0:
            found.append("audited loss reached MINT-head parameters")
        return found

    def assert_clean(self):
        problems = self.violations()
        if problems:
            raise InvariantViolationError("; ".join(problems))


def gradient_routing_audit(model: EnhancedModel, batch: MixedBatch) -> RoutingReport:
    """
    Gradient norms per parameter group for (a) the audited loss on the members
    alone and (b) the MINT loss on the externals alone. Leaves .grad untouched
    and restores the dropout stream.
    """
    partition = partition_parameters(model)
    groups = partition.groups()
    names = [name for group in groups.values() for name in group]
    params = [p for group in groups.values() for p in group.values()]
    dtype = params[0].dtype
    dropout_state = model.mint_head.dropout.generator.get_state()
    was_training = model.training
    model.train()

    def norms(loss: torch.Tensor) -> Dict[str, float]:
        grads = dict(zip(names, torch.autograd.grad(loss, params, allow_unused=True)))
        result = {}
        for group_name, group in groups.items():
            squared = sum(float(grads[n].pow(2).sum()) for n in group if grads[n] is not None)
            result[group_name] = math.sqrt(squared)
        return result

    try:
        logits = model.forward_audited(to_tensor(batch.member_images, dtype))
        audited = norms(audited_loss(logits, torch.tensor(batch.member_class_labels, dtype=torch.long)))
        probabilities = model.membership_probability(to_tensor(batch.external_images, dtype))
        mint = norms(mint_loss(probabilities, torch.zeros(len(probabilities), dtype=dtype)))
    finally:
        model.train(was_training)
        model.mint_head.dropout.generator.set_state(dropout_state)

    report = RoutingReport(audited_loss_norms=audited, mint_loss_norms=mint)
    logger.info(f"Routing audit: {report.receives()}")
    return report
