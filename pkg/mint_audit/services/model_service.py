"""
Model Service
Builds the Enhanced Audited Model: a tappable convolutional backbone (the
Audited Model), tap-point resolution for the Entry/Middle/Output setups, and
the two-path MINT head that reads the tapped activation maps.
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .exceptions import DimensionError, ResolutionError
from .seed_service import torch_generator
from .validation_service import BackboneSpec, MintHeadSpec, Setup, TapConfig

logger = logging.getLogger(__name__)

Tap = Tuple[int, int]


def to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """N x H x W x C array -> N x C x H x W tensor"""
    return torch.tensor(np.asarray(images), dtype=dtype).permute(0, 3, 1, 2).contiguous()


def init_parameters(module: nn.Module, generator: Optional[torch.Generator] = None):
    """Fan-in scaled uniform weights, zero biases"""
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, (nn.Conv2d, nn.Linear)):
                fan_in = layer.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                layer.weight.uniform_(-bound, bound, generator=generator)
                if layer.bias is not None:
                    layer.bias.zero_()


@dataclass
class AADPair:
    """Auxiliary Auditable Data: the two tapped activation maps (N x C x H x W)"""
    map_a: torch.Tensor
    map_b: torch.Tensor

    def __len__(self) -> int:
        return self.map_a.shape[0]

    def select(self, rows: Union[slice, torch.Tensor]) -> "AADPair":
        if isinstance(rows, slice):
            return AADPair(self.map_a[rows], self.map_b[rows])
        return AADPair(self.map_a.index_select(0, rows), self.map_b.index_select(0, rows))

    def detach(self) -> "AADPair":
        return AADPair(self.map_a.detach(), self.map_b.detach())


@dataclass
class ParameterPartition:
    shared: Dict[str, nn.Parameter]
    audited_only: Dict[str, nn.Parameter]
    mint: Dict[str, nn.Parameter]

    def groups(self) -> Dict[str, Dict[str, nn.Parameter]]:
        return {"shared": self.shared, "audited_only": self.audited_only, "mint": self.mint}


def resolve_taps(spec: BackboneSpec, setup: Setup) -> TapConfig:
    """
    Tap points for a setup.

    ENTRY takes the last two layers of the first block, OUTPUT the last two of
    the final block. MIDDLE takes the last layer of two distinct blocks: blocks
    0 and 1 for a three-block backbone, otherwise blocks floor((B-1)/3) and
    ceil(2(B-1)/3) pulled inside [1, B-2].
    """
    setup = Setup(setup)
    num_blocks = len(spec.blocks)

    def depth(block: int) -> int:
        layers = spec.blocks[block].layers_per_block
        if layers < 2:
            raise ResolutionError(f"block {block} has {layers} layer(s); {setup.value} setup needs 2")
        return layers

    if setup == Setup.ENTRY:
        layers = depth(0)
        taps = ((0, layers - 2), (0, layers - 1))
    elif setup == Setup.OUTPUT:
        last = num_blocks - 1
        layers = depth(last)
        taps = ((last, layers - 2), (last, layers - 1))
    else:
        if num_blocks == 3:
            first, second = 0, 1
        else:
            first = max(1, (num_blocks - 1) // 3)
            second = min(num_blocks - 2, math.ceil(2 * (num_blocks - 1) / 3))
            if first >= second:
                first, second = 1, 2
        taps = ((first, depth(first) - 1), (second, depth(second) - 1))

    return TapConfig(setup=setup, taps=taps, spec_fingerprint=spec.fingerprint())


def tap_shapes(spec: BackboneSpec, tap_config: TapConfig) -> List[Tuple[int, int, int]]:
    """H x W x C of each tapped layer output, by shape arithmetic"""
    height, width, _ = spec.input_shape
    shapes = {}
    for b, block in enumerate(spec.blocks):
        for layer in range(block.layers_per_block):
            shapes[(b, layer)] = (height, width, block.channels)
        if block.pool_after_block:
            height, width = height // 2, width // 2
    try:
        return [shapes[tuple(tap)] for tap in tap_config.taps]
    except KeyError as e:
        raise ResolutionError(f"tap {e.args[0]} does not exist in this backbone")


class ConvLayer(nn.Module):
    """3x3 stride-1 convolution followed by ReLU"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=1, padding=1)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.conv(x))


class AuditedModel(nn.Module):
    """Plain convolutional classifier whose intermediate layers can be tapped"""

    def __init__(self, spec: BackboneSpec, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.spec = spec
        in_channels = spec.input_shape[2]
        self.blocks = nn.ModuleList()
        for block in spec.blocks:
            layers = nn.ModuleList()
            for _ in range(block.layers_per_block):
                layers.append(ConvLayer(in_channels, block.channels))
                in_channels = block.channels
            self.blocks.append(layers)
        self.pool = nn.MaxPool2d(2)
        self.gap = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(in_channels, spec.num_classes)
        init_parameters(self, generator)

    def check_input(self, images: torch.Tensor):
        height, width, channels = self.spec.input_shape
        if images.dim() != 4 or tuple(images.shape[1:]) != (channels, height, width):
            raise DimensionError(
                f"expected N x {channels} x {height} x {width} input, got {tuple(images.shape)}"
            )

    def layer(self, tap: Tap) -> nn.Module:
        return self.blocks[tap[0]][tap[1]]

    def traverse(
        self,
        images: torch.Tensor,
        taps: Sequence[Tap] = (),
        continue_rows: Optional[torch.Tensor] = None,
        stop_after_taps: bool = False,
    ) -> Tuple[Optional[torch.Tensor], Dict[Tap, torch.Tensor]]:
        """
        Single pass that captures tapped activations.

        After the deepest tap only `continue_rows` go on to the audited-only
        layers; with `stop_after_taps` the pass ends there.
        """
        self.check_input(images)
        taps = [tuple(t) for t in taps]
        deepest = max(taps) if taps else None
        captured: Dict[Tap, torch.Tensor] = {}
        x = images
        for b, block in enumerate(self.blocks):
            for index, layer in enumerate(block):
                x = layer(x)
                if (b, index) in taps:
                    captured[(b, index)] = x
                if (b, index) == deepest:
                    if stop_after_taps:
                        return None, captured
                    if continue_rows is not None:
                        if continue_rows.numel() == 0:
                            return None, captured
                        x = x.index_select(0, continue_rows)
            if self.spec.blocks[b].pool_after_block:
                x = self.pool(x)
        logits = self.classifier(torch.flatten(self.gap(x), 1))
        return logits, captured

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        logits, _ = self.traverse(images)
        return logits

    def backbone_layer_names(self) -> List[Tuple[Tap, str]]:
        return [((b, i), f"blocks.{b}.{i}.") for b, block in enumerate(self.blocks) for i in range(len(block))]


class SeededDropout(nn.Module):
    """Dropout drawing its masks from a per-model generator"""

    def __init__(self, p: float, seed: int = 0):
        super().__init__()
        self.p = p
        self.generator = torch_generator(seed)

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = torch.empty_like(x).bernoulli_(1.0 - self.p, generator=self.generator)
        return x * keep / (1.0 - self.p)


class MintPath(nn.Module):
    """Conv stack + global average pooling for one activation map"""

    def __init__(self, in_channels: int, channels: Sequence[int]):
        super().__init__()
        layers = []
        for out_channels in channels:
            layers += [nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=1, padding=1), nn.ReLU()]
            in_channels = out_channels
        self.convs = nn.Sequential(*layers)
        self.gap = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return torch.flatten(self.gap(self.convs(x)), 1)


class MintHead(nn.Module):
    """MINT Model: two conv paths, concatenation, two linear layers, sigmoid"""

    def __init__(
        self,
        spec: MintHeadSpec,
        in_channels: Tuple[int, int],
        generator: Optional[torch.Generator] = None,
        dropout_seed: int = 0,
    ):
        super().__init__()
        self.spec = spec
        self.in_channels = tuple(in_channels)
        self.path_a = MintPath(in_channels[0], spec.per_path_conv_channels)
        self.path_b = MintPath(in_channels[1], spec.per_path_conv_channels)
        self.hidden = nn.Linear(2 * spec.per_path_conv_channels[-1], spec.hidden_dim)
        self.act = nn.ReLU()
        self.dropout = SeededDropout(spec.dropout, dropout_seed)
        self.output = nn.Linear(spec.hidden_dim, 1)
        init_parameters(self, generator)

    def features(self, aad: AADPair) -> torch.Tensor:
        """Concatenated pooled path outputs"""
        for name, tensor, channels in (("map_a", aad.map_a, self.in_channels[0]), ("map_b", aad.map_b, self.in_channels[1])):
            if tensor.dim() != 4 or tensor.shape[1] != channels:
                raise DimensionError(f"{name}: expected N x {channels} x H x W, got {tuple(tensor.shape)}")
        if aad.map_a.shape[0] != aad.map_b.shape[0]:
            raise DimensionError("AAD maps disagree in batch size")
        return torch.cat([self.path_a(aad.map_a), self.path_b(aad.map_b)], dim=1)

    def logits(self, aad: AADPair) -> torch.Tensor:
        hidden = self.dropout(self.act(self.hidden(self.features(aad))))
        return self.output(hidden).squeeze(1)

    def forward(self, aad: AADPair) -> torch.Tensor:
        return torch.sigmoid(self.logits(aad))


@dataclass
class RoutedOutput:
    """Audited logits for members (+ supplement) and MINT probabilities for members + externals"""
    logits: Optional[torch.Tensor]
    probabilities: torch.Tensor


class EnhancedModel(nn.Module):
    """Audited Model and MINT Model sharing the layers up to the deepest tap"""

    def __init__(
        self,
        spec: BackboneSpec,
        tap_config: TapConfig,
        head_spec: MintHeadSpec,
        generator: Optional[torch.Generator] = None,
        dropout_seed: int = 0,
    ):
        super().__init__()
        check_tap_config(spec, tap_config)
        self.spec = spec
        self.tap_config = tap_config
        self.head_spec = head_spec
        self.audited = AuditedModel(spec, generator)
        (_, _, channels_a), (_, _, channels_b) = tap_shapes(spec, tap_config)
        self.mint_head = MintHead(head_spec, (channels_a, channels_b), generator, dropout_seed)

    @property
    def taps(self) -> List[Tap]:
        return [tuple(t) for t in self.tap_config.taps]

    def _aad(self, captured: Dict[Tap, torch.Tensor]) -> AADPair:
        first, second = self.taps
        return AADPair(captured[first], captured[second])

    def forward(self, images: torch.Tensor) -> Tuple[torch.Tensor, AADPair]:
        logits, captured = self.audited.traverse(images, self.taps)
        return logits, self._aad(captured)

    def forward_audited(self, images: torch.Tensor) -> torch.Tensor:
        return self.audited(images)

    def extract_aad(self, images: torch.Tensor) -> AADPair:
        _, captured = self.audited.traverse(images, self.taps, stop_after_taps=True)
        return self._aad(captured)

    def membership_probability(self, images: torch.Tensor) -> torch.Tensor:
        return self.mint_head(self.extract_aad(images))

    def forward_routed(
        self,
        member_images: torch.Tensor,
        external_images: torch.Tensor,
        supplement_images: Optional[torch.Tensor] = None,
    ) -> RoutedOutput:
        """
        One traversal for a mixed batch.

        Members and externals share the layers up to the deepest tap and both
        feed the MINT head; only members (and the audited-only supplement,
        which skips the MINT head) continue through the audited-only layers.
        """
        n_members, n_externals = member_images.shape[0], external_images.shape[0]
        parts = [member_images, external_images]
        if supplement_images is not None and supplement_images.shape[0]:
            parts.append(supplement_images)
        stacked = torch.cat(parts, dim=0)
        n_total = stacked.shape[0]
        continue_rows = torch.cat([
            torch.arange(0, n_members),
            torch.arange(n_members + n_externals, n_total),
        ])
        logits, captured = self.audited.traverse(stacked, self.taps, continue_rows=continue_rows)
        probabilities = self.mint_head(self._aad(captured).select(slice(0, n_members + n_externals)))
        return RoutedOutput(logits=logits, probabilities=probabilities)


class FrozenMintAuditor(nn.Module):
    """Passive MINT predictor: a frozen audited model read by a trained head"""

    def __init__(self, audited: AuditedModel, head: MintHead, tap_config: TapConfig):
        super().__init__()
        check_tap_config(audited.spec, tap_config)
        self.audited = audited
        self.mint_head = head
        self.tap_config = tap_config
        self.audited.requires_grad_(False)

    def extract_aad(self, images: torch.Tensor) -> AADPair:
        with torch.no_grad():
            return extract_aad(self.audited, images, self.tap_config)

    def membership_probability(self, images: torch.Tensor) -> torch.Tensor:
        return self.mint_head(self.extract_aad(images))


def check_tap_config(spec: BackboneSpec, tap_config: TapConfig):
    if tap_config.spec_fingerprint != spec.fingerprint():
        raise ResolutionError("tap config was resolved for a different backbone spec")
    tap_shapes(spec, tap_config)


def build_enhanced_model(
    spec: BackboneSpec, setup: Setup, head_spec: MintHeadSpec, init_seed: int, dropout_seed: int
) -> EnhancedModel:
    tap_config = resolve_taps(spec, setup)
    model = EnhancedModel(spec, tap_config, head_spec, torch_generator(init_seed), dropout_seed)
    logger.info(
        f"Built enhanced model ({tap_config.setup.value} taps {list(tap_config.taps)}), "
        f"{sum(p.numel() for p in model.parameters())} parameters"
    )
    return model


def forward_audited(model: Union[EnhancedModel, AuditedModel], images: torch.Tensor) -> torch.Tensor:
    """Class logits, N x num_classes"""
    if isinstance(model, EnhancedModel):
        return model.forward_audited(images)
    return model(images)


def extract_aad(model: Union[EnhancedModel, AuditedModel], images: torch.Tensor, tap_config: TapConfig) -> AADPair:
    """Activations at the tapped layers, identical to those of the full forward pass"""
    audited = model.audited if isinstance(model, EnhancedModel) else model
    check_tap_config(audited.spec, tap_config)
    taps = [tuple(t) for t in tap_config.taps]
    _, captured = audited.traverse(images, taps, stop_after_taps=True)
    return AADPair(captured[taps[0]], captured[taps[1]])


def forward_mint(head: MintHead, aad: AADPair) -> torch.Tensor:
    """Membership probability per sample"""
    return head(aad)


def partition_parameters(model: EnhancedModel) -> ParameterPartition:
    """Split w+ into shared, audited-only and MINT parameter sets"""
    deepest = tuple(model.tap_config.deepest)
    shared_prefixes = [
        f"audited.{prefix}" for tap, prefix in model.audited.backbone_layer_names() if tap <= deepest
    ]
    shared, audited_only, mint = {}, {}, {}
    for name, parameter in model.named_parameters():
        if name.startswith("mint_head."):
            mint[name] = parameter
        elif any(name.startswith(prefix) for prefix in shared_prefixes):
            shared[name] = parameter
        else:
            audited_only[name] = parameter
    return ParameterPartition(shared=shared, audited_only=audited_only, mint=mint)


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every named parameter and buffer, in name order"""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
