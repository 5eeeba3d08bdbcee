"""Segmentation model blocks.

The model is a miniature dilated residual backbone at output stride 8,
an atrous spatial pyramid (ASPP) over the top feature map, optional
channel attention (CAM) on the last two stages, and an optional
attention-based multi-scale feature fusion module (MSFFM) that merges
stage-4 detail into the pyramid output. A 1x1 classifier plus bilinear
upsampling by 8 maps the fused features to per-pixel class logits.

Blocks hold parameters only; all state for a forward pass lives in the
tensors flowing through, so forwards on distinct inputs are independent
(the one exception: MsffmBlock records its most recent attention map for
inspection).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    bilinear_upsample,
    concat_channels,
    conv2d,
    global_avg_pool,
    matmul,
    mul,
    relu,
    reshape,
    same_padding,
    sigmoid,
    softmax_rows,
    transpose2d,
)
from .errors import ArgumentError, CapacityError, DimensionError, NumericalError

VARIANTS = ("baseline", "+cam", "+msffm", "+cam+msffm")

VARIANT_LABELS = {
    "baseline": "Baseline",
    "+cam": "Baseline + CAM",
    "+msffm": "Baseline + MSFFM",
    "+cam+msffm": "Baseline + CAM + MSFFM (ours)",
}

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters shared by every ablation variant."""

    in_channels: int = 3
    num_classes: int = 2
    stage_widths: tuple[int, ...] = (16, 32, 64, 64, 64)
    stage_blocks: tuple[int, ...] = (1, 1, 2, 2, 2)
    output_stride: int = 8
    msffm_compression: int = 4
    cam_reduction: int = 4
    aspp_rates: tuple[int, ...] = (6, 12, 18)
    aspp_width: int = 64
    attention_cap: int = 4096

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "aspp_rates", tuple(int(r) for r in self.aspp_rates))
        if self.in_channels not in (1, 3):
            raise ArgumentError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.num_classes < 2:
            raise ArgumentError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.output_stride != 8:
            raise ArgumentError(f"output_stride is fixed at 8, got {self.output_stride}")
        if len(self.stage_widths) != 5 or len(self.stage_blocks) != 5:
            raise ArgumentError("stage_widths and stage_blocks must each have 5 entries")
        if any(w < 1 for w in self.stage_widths) or any(b < 1 for b in self.stage_blocks):
            raise ArgumentError("stage widths and block counts must be positive")
        if self.msffm_compression < 1:
            raise ArgumentError(f"msffm_compression must be >= 1, got {self.msffm_compression}")
        if self.stage_widths[3] // self.msffm_compression < 1:
            raise ArgumentError(
                f"msffm_compression {self.msffm_compression} leaves no channels "
                f"from width {self.stage_widths[3]}")
        if self.cam_reduction < 1:
            raise ArgumentError(f"cam_reduction must be >= 1, got {self.cam_reduction}")
        for w in (self.stage_widths[3], self.stage_widths[4]):
            if w // self.cam_reduction < 1:
                raise ArgumentError(
                    f"cam_reduction {self.cam_reduction} leaves no channels from width {w}")
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ArgumentError(f"aspp_rates must be positive, got {self.aspp_rates}")
        if self.aspp_width < 1:
            raise ArgumentError(f"aspp_width must be positive, got {self.aspp_width}")
        if self.attention_cap < 1:
            raise ArgumentError(f"attention_cap must be positive, got {self.attention_cap}")


class Layer:
    """Base for parameterized blocks; provides the named-parameter walk.

    Child parameters and sub-layers are discovered from instance
    attributes in definition order, so parameter names (and therefore
    checkpoint layouts) are deterministic for a given architecture.
    """

    def _children(self) -> Iterator[tuple[str, "Parameter | Layer"]]:
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                yield attr, value
            elif isinstance(value, Layer):
                yield attr, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield f"{attr}{i + 1}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield full, child
            else:
                yield from child.named_parameters(f"{full}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Layer):
    """A 2-D convolution layer with He-initialized weights and zero bias."""

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int,
                 kernel_size: int, stride: int = 1, dilation: int = 1,
                 padding: int | None = None, zero_init: bool = False):
        if zero_init:
            weight = np.zeros((out_ch, in_ch, kernel_size, kernel_size))
        else:
            std = np.sqrt(2.0 / (in_ch * kernel_size * kernel_size))
            weight = rng.normal(0.0, std, (out_ch, in_ch, kernel_size, kernel_size))
        self.weight = Parameter("weight", weight)
        self.bias = Parameter("bias", np.zeros(out_ch))
        self.stride = stride
        self.dilation = dilation
        self.padding = same_padding(kernel_size, dilation) if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias,
                      stride=self.stride, dilation=self.dilation, padding=self.padding)


class ResidualBlock(Layer):
    """Two 3x3 convs with a skip path: out = relu(conv2(relu(conv1(x))) + shortcut(x)).

    conv2 starts at zero, so a fresh block computes relu(shortcut(x)) and
    the residual branch grows from nothing. Without normalization layers
    this identity-dominated start is what keeps deep stacks trainable.
    """

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int,
                 stride: int = 1, dilation: int = 1):
        self.conv1 = Conv2d(rng, in_ch, out_ch, 3, stride=stride, dilation=dilation)
        self.conv2 = Conv2d(rng, out_ch, out_ch, 3, stride=1, dilation=dilation,
                            zero_init=True)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(rng, in_ch, out_ch, 1, stride=stride, padding=0)
        else:
            self.shortcut = None

    def __call__(self, x: Tensor) -> Tensor:
        branch = self.conv2(relu(self.conv1(x)))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return relu(add(branch, skip))


class _Stage(Layer):
    """A run of residual blocks; the first carries any stride/width change."""

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int,
                 n_blocks: int, stride: int, dilation: int):
        blocks = [ResidualBlock(rng, in_ch, out_ch, stride=stride, dilation=dilation)]
        for _ in range(n_blocks - 1):
            blocks.append(ResidualBlock(rng, out_ch, out_ch, stride=1, dilation=dilation))
        self.block = blocks

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.block:
            x = b(x)
        return x


class DilatedBackbone(Layer):
    """Five residual stages; strides 2,2,2 then dilation 2 and 4 at stride 1.

    The final feature map is 1/8 the input extent in each axis; the two
    dilated stages keep that extent while growing the receptive field.
    """

    STAGE_STRIDES = (2, 2, 2, 1, 1)
    STAGE_DILATIONS = (1, 1, 1, 2, 4)

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.in_channels = cfg.in_channels
        widths = cfg.stage_widths
        ins = (cfg.in_channels,) + widths[:4]
        for i in range(5):
            stage = _Stage(rng, ins[i], widths[i], cfg.stage_blocks[i],
                           self.STAGE_STRIDES[i], self.STAGE_DILATIONS[i])
            setattr(self, f"stage{i + 1}", stage)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
        if x.data.ndim != 3:
            raise DimensionError(f"backbone input must be CxHxW, got shape {x.shape}")
        c, h, w = x.shape
        if c != self.in_channels:
            raise DimensionError(
                f"backbone expects {self.in_channels} input channels, got {c}")
        if h % 8 != 0 or w % 8 != 0:
            raise DimensionError(
                f"input extent {h}x{w} must be divisible by 8")
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        f5 = self.stage5(f4)
        return f1, f2, f3, f4, f5


class CamBlock(Layer):
    """Channel attention: squeeze to per-channel stats, gate the input.

    w = sigmoid(expand(relu(reduce(global_avg_pool(x))))), out = x * w with
    w broadcast per channel. Every gate entry stays strictly inside (0, 1),
    so |out| <= |x| elementwise.
    """

    def __init__(self, rng: np.random.Generator, channels: int, reduction: int):
        if reduction < 1 or channels // reduction < 1:
            raise ArgumentError(
                f"reduction {reduction} invalid for {channels} channels")
        mid = channels // reduction
        self.reduce = Conv2d(rng, channels, mid, 1, padding=0)
        self.expand = Conv2d(rng, mid, channels, 1, padding=0)
        self.channels = channels
        self.reduction = reduction

    def channel_weights(self, x: Tensor) -> Tensor:
        if x.data.ndim != 3 or x.shape[0] != self.channels:
            raise DimensionError(
                f"channel attention configured for {self.channels} channels, "
                f"got input shape {x.shape}")
        return sigmoid(self.expand(relu(self.reduce(global_avg_pool(x)))))

    def __call__(self, x: Tensor) -> Tensor:
        return mul(x, self.channel_weights(x))


class AsppBlock(Layer):
    """Atrous spatial pyramid: 1x1, three dilated 3x3, and an image-pool branch.

    All branches keep the input's spatial extent; their concatenation
    (5 x width channels) is fused by a 1x1 projection. Branches are linear;
    any nonlinearity is the surrounding model's choice.
    """

    def __init__(self, rng: np.random.Generator, in_ch: int, width: int,
                 rates: Sequence[int]):
        if len(rates) != 3:
            raise ArgumentError(f"expected 3 dilation rates, got {list(rates)}")
        self.point = Conv2d(rng, in_ch, width, 1, padding=0)
        self.dilated = [Conv2d(rng, in_ch, width, 3, dilation=r) for r in rates]
        self.pool_proj = Conv2d(rng, in_ch, width, 1, padding=0)
        self.project = Conv2d(rng, width * (2 + len(rates)), width, 1, padding=0)
        self.width = width

    def __call__(self, x: Tensor) -> Tensor:
        parts = [self.point(x)] + [b(x) for b in self.dilated]
        pooled = self.pool_proj(global_avg_pool(x))
        # Broadcast the pooled vector back over the (possibly rectangular)
        # spatial extent; gradient flows to the pooled values through mul.
        ones = Tensor(np.ones((self.width,) + x.shape[1:]))
        parts.append(mul(ones, pooled))
        return self.project(concat_channels(parts))


@dataclass
class AttentionMap:
    """Row-stochastic position-to-position weights from the fusion module.

    Row j holds the weights over source positions used to build output
    position j; every row sums to 1 and entries are non-negative.
    """

    s: Tensor

    def validate(self, tol: float = ROW_SUM_TOL) -> None:
        data = self.s.data
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise DimensionError(f"attention map must be square, got {data.shape}")
        if data.min() < 0.0:
            raise NumericalError("attention map has a negative entry")
        worst = np.abs(data.sum(axis=1) - 1.0).max()
        if worst > tol:
            raise NumericalError(
                f"attention rows deviate from sum 1 by {worst:.3e} (tol {tol:g})")


class MsffmBlock(Layer):
    """Attention-based fusion of a detailed low feature map into a high one.

    Both inputs are C x H x W. The low and high maps are each compressed
    to C' = C/compression channels by 1x1 convs (maps A and B); flattening
    positions gives P and Q (C' x N, N = H*W). Affinities Q^T P are
    softmax-normalized per row, so row j weights every low-map position i
    for output position j. Values come from the low map through a 1x1
    projection V; the weighted sum L = V S^T is scaled by the learned
    scalar alpha (initialized to exactly 0) and added to the high map.
    With alpha at 0 the block is an exact identity on `high`.
    """

    def __init__(self, rng: np.random.Generator, channels: int,
                 compression: int = 4, attention_cap: int = 4096):
        compressed = channels // compression
        if compressed < 1:
            raise ArgumentError(
                f"compression {compression} leaves no channels from {channels}")
        self.compress_low = Conv2d(rng, channels, compressed, 1, padding=0)
        self.compress_high = Conv2d(rng, channels, compressed, 1, padding=0)
        self.value_proj = Conv2d(rng, channels, channels, 1, padding=0)
        self.alpha = Parameter("alpha", 0.0)
        self.channels = channels
        self.compression = compression
        self.compressed = compressed
        self.attention_cap = attention_cap
        self.last_attention: AttentionMap | None = None

    def __call__(self, low: Tensor, high: Tensor) -> Tensor:
        if low.data.ndim != 3 or high.data.ndim != 3:
            raise DimensionError(
                f"fusion inputs must be CxHxW, got {low.shape} and {high.shape}")
        if low.shape != high.shape:
            raise DimensionError(
                f"fusion inputs must match, got {low.shape} and {high.shape}")
        if low.shape[0] != self.channels:
            raise DimensionError(
                f"fusion configured for {self.channels} channels, got {low.shape[0]}")
        c, h, w = low.shape
        n = h * w
        if n > self.attention_cap:
            raise CapacityError(
                f"attention over {n} positions exceeds the cap of "
                f"{self.attention_cap}; use a smaller input or raise the cap")
        p = reshape(self.compress_low(low), (self.compressed, n))
        q = reshape(self.compress_high(high), (self.compressed, n))
        s = softmax_rows(matmul(transpose2d(q), p))
        attention = AttentionMap(s)
        attention.validate()
        self.last_attention = attention
        v = reshape(self.value_proj(low), (c, n))
        weighted = reshape(matmul(v, transpose2d(s)), (c, h, w))
        return add(mul(weighted, self.alpha), high)


class PotholeNet(Layer):
    """Full segmentation model for one ablation variant.

    All variants share the backbone and pyramid. The baseline plainly
    concatenates the stage-4 features with the pyramid output; the +cam
    variants gate stages 4 and 5 with channel attention first; the +msffm
    variants align the pyramid output to the stage-4 width with a 1x1 conv
    and fuse through the attention module instead of concatenating. The
    1x1 classifier output is upsampled by 8 back to the input extent.
    """

    def __init__(self, cfg: ModelConfig, variant: str = "+cam+msffm",
                 seed: int = 0):
        if variant not in VARIANTS:
            raise ArgumentError(
                f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.variant = variant
        self.use_cam = "+cam" in variant
        self.use_msffm = "+msffm" in variant
        c4, c5 = cfg.stage_widths[3], cfg.stage_widths[4]
        self.backbone = DilatedBackbone(rng, cfg)
        if self.use_cam:
            self.cam4 = CamBlock(rng, c4, cfg.cam_reduction)
            self.cam5 = CamBlock(rng, c5, cfg.cam_reduction)
        self.aspp = AsppBlock(rng, c5, cfg.aspp_width, cfg.aspp_rates)
        if self.use_msffm:
            self.align = Conv2d(rng, cfg.aspp_width, c4, 1, padding=0)
            self.msffm = MsffmBlock(rng, c4, cfg.msffm_compression,
                                    cfg.attention_cap)
            head_in = c4
        else:
            head_in = c4 + cfg.aspp_width
        self.classifier = Conv2d(rng, head_in, cfg.num_classes, 1, padding=0)

    def __call__(self, x: Tensor) -> Tensor:
        _, _, _, f4, f5 = self.backbone(x)
        if self.use_cam:
            f4 = self.cam4(f4)
            f5 = self.cam5(f5)
        t = self.aspp(f5)
        if self.use_msffm:
            fused = self.msffm(f4, self.align(t))
        else:
            fused = concat_channels([f4, t])
        return bilinear_upsample(self.classifier(fused), 8)


# Thin functional aliases so call sites can mirror the block contracts.

def backbone_forward(x: Tensor, backbone: DilatedBackbone):
    return backbone(x)


def aspp_forward(f5: Tensor, block: AsppBlock) -> Tensor:
    return block(f5)


def cam_forward(x: Tensor, block: CamBlock) -> Tensor:
    return block(x)


def msffm_forward(low: Tensor, high: Tensor, block: MsffmBlock) -> Tensor:
    return block(low, high)


def model_forward(x: Tensor, model: PotholeNet) -> Tensor:
    return model(x)


def ablation_variant(cfg: ModelConfig, variant: str, seed: int = 0) -> PotholeNet:
    """Instantiate one of the four ablation variants."""
    return PotholeNet(cfg, variant, seed)
