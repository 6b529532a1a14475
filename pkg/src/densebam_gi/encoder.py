"""DenseNet feature extractor (three dense blocks) with optional BAM gates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Module, kaiming
from .tensor import ContractError, Parameter, Tensor


@dataclass
class EncoderConfig:
    stem_channels: int = 64
    growth_rate: int = 32
    layers_per_block: tuple[int, int, int] = (6, 12, 24)
    bam_after: frozenset[int] = frozenset({2, 3})
    reduction_ratio: int = 16
    spatial_dilation: int = 4
    transition_compression: float = 0.5
    bottleneck_width: int = 4
    # "post_transition" gates the pooled output of blocks 1 and 2; "pre_transition" gates the raw block output
    bam_position: str = "post_transition"
    transition_after_block3: bool = False

    def __post_init__(self):
        self.layers_per_block = tuple(int(n) for n in self.layers_per_block)
        self.bam_after = frozenset(int(b) for b in self.bam_after)
        self.validate()

    def validate(self) -> None:
        if len(self.layers_per_block) != 3 or min(self.layers_per_block) < 1:
            raise ContractError(f"layers_per_block needs three entries >= 1, got {self.layers_per_block}")
        if not self.bam_after <= {1, 2, 3}:
            raise ContractError(f"bam_after must be a subset of {{1, 2, 3}}, got {sorted(self.bam_after)}")
        if not 0 < self.transition_compression <= 1:
            raise ContractError("transition_compression must lie in (0, 1]")
        if self.bam_position not in ("post_transition", "pre_transition"):
            raise ContractError(f"unknown bam_position {self.bam_position!r}")
        if min(self.stem_channels, self.growth_rate, self.reduction_ratio, self.spatial_dilation) < 1:
            raise ContractError("channel counts, reduction ratio and dilation must be positive")
        for block, ch in self.bam_channels().items():
            if ch % self.reduction_ratio:
                raise ContractError(
                    f"reduction ratio {self.reduction_ratio} does not divide {ch} channels at the BAM after block {block}")

    @classmethod
    def desk(cls, **overrides) -> EncoderConfig:
        base = dict(stem_channels=16, growth_rate=8, layers_per_block=(2, 2, 2),
                    reduction_ratio=4, transition_compression=0.5)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full(cls, **overrides) -> EncoderConfig:
        return cls(**overrides)

    def block_io(self) -> list[tuple[int, int]]:
        """(input, output) channel counts of each dense block."""
        io, c = [], self.stem_channels
        for k, n in enumerate(self.layers_per_block, start=1):
            out = c + n * self.growth_rate
            io.append((c, out))
            c = self.transition_channels(out) if self._has_transition(k) else out
        return io

    def transition_channels(self, c: int) -> int:
        return max(1, int(np.floor(c * self.transition_compression)))

    def _has_transition(self, block: int) -> bool:
        return block < 3 or self.transition_after_block3

    def bam_channels(self) -> dict[int, int]:
        sites = {}
        for k, (_, out) in enumerate(self.block_io(), start=1):
            if k in self.bam_after:
                post = self.bam_position == "post_transition" and self._has_transition(k)
                sites[k] = self.transition_channels(out) if post else out
        return sites

    @property
    def out_channels(self) -> int:
        out = self.block_io()[-1][1]
        return self.transition_channels(out) if self.transition_after_block3 else out

    @property
    def downsample(self) -> int:
        return 4 * 2 ** sum(self._has_transition(k) for k in (1, 2, 3))


@dataclass
class FeatureGrid:
    """Encoder output: N x C x H x W, read as H*W positions of C-dimensional vectors."""

    features: Tensor
    channels: int = field(init=False)
    height: int = field(init=False)
    width: int = field(init=False)

    def __post_init__(self):
        _, self.channels, self.height, self.width = self.features.shape

    @property
    def positions(self) -> int:
        return self.height * self.width

    def as_sequence(self) -> Tensor:
        """N x L x C view with positions in row-major order."""
        n = self.features.shape[0]
        return T.reshape(T.transpose(self.features, (0, 2, 3, 1)), (n, self.positions, self.channels))


class Conv(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, bias: bool = False,
                 stride: int = 1, padding: int = 0, dilation: int = 1):
        self.weight = Parameter(kaiming(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout), decay=False) if bias else None
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class DenseLayer(Module):
    """BN-ReLU-1x1 conv bottleneck then BN-ReLU-3x3 conv producing ``growth`` new maps."""

    def __init__(self, in_channels: int, growth: int, rng: np.random.Generator, bottleneck_width: int = 4):
        self.in_channels = in_channels
        mid = bottleneck_width * growth
        self.bn1 = BatchNorm(in_channels)
        self.conv1 = Conv(in_channels, mid, 1, rng)
        self.bn2 = BatchNorm(mid)
        self.conv2 = Conv(mid, growth, 3, rng, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ContractError(f"dense layer expects {self.in_channels} input channels, got {x.shape[1]}")
        y = self.conv1(T.relu(self.bn1(x)))
        return self.conv2(T.relu(self.bn2(y)))


class DenseBlock(Module):
    def __init__(self, in_channels: int, n_layers: int, growth: int, rng: np.random.Generator,
                 bottleneck_width: int = 4):
        self.layers = [DenseLayer(in_channels + i * growth, growth, rng, bottleneck_width)
                       for i in range(n_layers)]
        self.out_channels = in_channels + n_layers * growth

    def __call__(self, x: Tensor) -> Tensor:
        feats = [x]
        for layer in self.layers:
            inp = feats[0] if len(feats) == 1 else T.concat_channels(feats)
            feats.append(layer(inp))
        return T.concat_channels(feats)


class Transition(Module):
    """1x1 channel compression followed by 2x2 average pooling."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.conv = Conv(in_channels, out_channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ContractError(f"transition needs spatial extent >= 2, got {x.shape[2]}x{x.shape[3]}")
        return T.avg_pool2d(self.conv(x), 2, 2)


class ChannelAttention(Module):
    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        if channels % reduction:
            raise ContractError(f"reduction ratio {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        self.w1 = Parameter(kaiming(rng, (hidden, channels), channels))
        self.b1 = Parameter(np.zeros(hidden), decay=False)
        # no bias before the batch norm: it would be cancelled exactly
        self.w2 = Parameter(kaiming(rng, (channels, hidden), hidden))
        self.bn = BatchNorm(channels)

    def __call__(self, q: Tensor) -> Tensor:
        n, c = q.shape[:2]
        pooled = T.reshape(T.global_avg_pool(q), (n, c))
        hidden = T.relu(T.linear(pooled, self.w1, self.b1))
        logits = self.bn(T.linear(hidden, self.w2))
        return T.reshape(logits, (n, c, 1, 1))


class SpatialAttention(Module):
    def __init__(self, channels: int, reduction: int, dilation: int, rng: np.random.Generator):
        if channels % reduction:
            raise ContractError(f"reduction ratio {reduction} does not divide {channels} channels")
        mid = channels // reduction
        self.reduce = Conv(channels, mid, 1, rng, bias=True)
        self.dilated1 = Conv(mid, mid, 3, rng, bias=True, padding=dilation, dilation=dilation)
        # the last two stages are linear into the batch norm, so their biases would be dead
        self.dilated2 = Conv(mid, mid, 3, rng, padding=dilation, dilation=dilation)
        self.project = Conv(mid, 1, 1, rng)
        self.bn = BatchNorm(1)

    def __call__(self, q: Tensor) -> Tensor:
        return self.bn(self.project(self.dilated2(self.dilated1(self.reduce(q)))))


class Bam(Module):
    """Residual attention gate: Q + Q * sigmoid(channel logits + spatial logits)."""

    def __init__(self, channels: int, reduction: int, dilation: int, rng: np.random.Generator):
        self.channel = ChannelAttention(channels, reduction, rng)
        self.spatial = SpatialAttention(channels, reduction, dilation, rng)

    def gate(self, q: Tensor) -> Tensor:
        return T.sigmoid(T.add(self.channel(q), self.spatial(q)))

    def __call__(self, q: Tensor) -> Tensor:
        return T.add(q, T.mul(q, self.gate(q)))


class Stem(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = Conv(1, channels, 7, rng, stride=2, padding=3)
        self.bn = BatchNorm(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return T.max_pool2d(T.relu(self.bn(self.conv(x))), 3, 2, padding=1)


class DenseBamEncoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.stem = Stem(config.stem_channels, rng)
        io = config.block_io()
        self.blocks = [DenseBlock(cin, n, config.growth_rate, rng, config.bottleneck_width)
                       for (cin, _), n in zip(io, config.layers_per_block)]
        self.transitions = [Transition(out, config.transition_channels(out), rng)
                            for k, (_, out) in enumerate(io, start=1) if config._has_transition(k)]
        sites = config.bam_channels()
        self.bams = [Bam(sites[k], config.reduction_ratio, config.spatial_dilation, rng) if k in sites else None
                     for k in (1, 2, 3)]

    def min_input_size(self) -> int:
        return self.config.downsample

    def __call__(self, image: Tensor) -> FeatureGrid:
        if image.ndim != 4 or image.shape[1] != 1:
            raise ContractError(f"encoder expects N x 1 x H x W images, got {image.shape}")
        need = self.min_input_size()
        if image.shape[2] < need or image.shape[3] < need:
            raise ContractError(f"image {image.shape[2]}x{image.shape[3]} too small, need at least {need}x{need}")
        post = self.config.bam_position == "post_transition"
        x = self.stem(image)
        for k in range(3):
            x = self.blocks[k](x)
            has_t = k < len(self.transitions)
            if self.bams[k] is not None and not (post and has_t):
                x = self.bams[k](x)
            if has_t:
                x = self.transitions[k](x)
                if self.bams[k] is not None and post:
                    x = self.bams[k](x)
        return FeatureGrid(x)

    def layer_input_channels(self) -> list[list[int]]:
        """Per-block list of the channel count each dense layer is built to accept."""
        return [[layer.in_channels for layer in block.layers] for block in self.blocks]
