"""The dual-decoder attention network.

One shared encoder (residual block + channel attention per level, max-pool
downsampling) feeds two parallel decoders. The segmentation branch emits a
binary mask; the autoencoder branch reconstructs the grayscale input and, at
configured stages, gates the segmentation branch with a single-channel
sigmoid attention map. Both heads are 1x1 conv + sigmoid, so every output
value lies strictly in (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    BatchNormState,
    ConvSpec,
    ResidualBlockParams,
    SEParams,
    conv2d,
    conv_transpose2d,
    make_conv,
    make_residual,
    make_se,
    maxpool2d,
    residual_block,
    se_block,
)
from .tensor import Tensor, concat_channels, mul, sigmoid


@dataclass
class ModelConfig:
    in_channels: int = 3
    channel_widths: tuple[int, int, int, int] = (32, 64, 128, 256)
    se_ratio: int = 8
    decoder_se: bool = False
    attention_stages: frozenset[int] = frozenset({1, 2, 3})

    def __post_init__(self):
        self.channel_widths = tuple(int(w) for w in self.channel_widths)
        self.attention_stages = frozenset(int(s) for s in self.attention_stages)
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if len(self.channel_widths) != 4:
            raise ValueError("exactly 4 encoder widths are required")
        if self.se_ratio < 1 or any(w % self.se_ratio for w in self.channel_widths):
            raise ValueError(f"se_ratio {self.se_ratio} must divide every width {self.channel_widths}")
        if not self.attention_stages <= {1, 2, 3, 4}:
            raise ValueError("attention stages must be decoder stage indices 1..4")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "channel_widths": list(self.channel_widths),
            "se_ratio": self.se_ratio,
            "decoder_se": self.decoder_se,
            "attention_stages": sorted(self.attention_stages),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            in_channels=d["in_channels"],
            channel_widths=tuple(d["channel_widths"]),
            se_ratio=d["se_ratio"],
            decoder_se=d["decoder_se"],
            attention_stages=frozenset(d["attention_stages"]),
        )


@dataclass
class EncoderBlock:
    res: ResidualBlockParams
    se: SEParams


@dataclass
class DecoderStage:
    up: ConvSpec
    res1: ResidualBlockParams
    res2: ResidualBlockParams
    se: SEParams | None = None


@dataclass
class DDANetParams:
    config: ModelConfig
    encoder: list[EncoderBlock]
    decoder_seg: list[DecoderStage]
    decoder_auto: list[DecoderStage]
    attention_convs: dict[int, ConvSpec]
    head_seg: ConvSpec
    head_auto: ConvSpec


@dataclass
class ForwardOutput:
    mask: Tensor
    gray: Tensor
    attention_maps: list[Tensor] = field(default_factory=list)


def _stage_channels(widths: tuple[int, ...]) -> list[int]:
    """Decoder branch width after each of the four stages."""
    return [widths[2], widths[1], widths[0], widths[0]]


def _make_decoder(rng: np.random.Generator, cfg: ModelConfig, dtype) -> list[DecoderStage]:
    widths = cfg.channel_widths
    stages = []
    prev = widths[3]
    for j, out in enumerate(_stage_channels(widths)):
        skip = widths[3 - j]
        stages.append(
            DecoderStage(
                up=make_conv(rng, prev, out, 4, 2, 1, dtype),
                res1=make_residual(rng, out + skip, out, dtype),
                res2=make_residual(rng, out, out, dtype),
                se=make_se(rng, out, cfg.se_ratio, dtype) if cfg.decoder_se else None,
            )
        )
        prev = out
    return stages


def build(config: ModelConfig, seed: int, dtype=np.float32) -> DDANetParams:
    """Initialize all parameters from one seeded PRNG in a fixed walk order.

    Identical (config, seed) pairs produce bitwise-identical parameters.
    """
    rng = np.random.default_rng(seed)
    widths = config.channel_widths
    encoder = []
    prev = config.in_channels
    for w in widths:
        encoder.append(
            EncoderBlock(
                res=make_residual(rng, prev, w, dtype),
                se=make_se(rng, w, config.se_ratio, dtype),
            )
        )
        prev = w
    decoder_seg = _make_decoder(rng, config, dtype)
    decoder_auto = _make_decoder(rng, config, dtype)
    stage_out = _stage_channels(widths)
    attention_convs = {
        s: make_conv(rng, stage_out[s - 1], 1, 1, 1, 0, dtype)
        for s in sorted(config.attention_stages)
    }
    head_seg = make_conv(rng, stage_out[3], 1, 1, 1, 0, dtype)
    head_auto = make_conv(rng, stage_out[3], 1, 1, 1, 0, dtype)
    return DDANetParams(
        config=config,
        encoder=encoder,
        decoder_seg=decoder_seg,
        decoder_auto=decoder_auto,
        attention_convs=attention_convs,
        head_seg=head_seg,
        head_auto=head_auto,
    )


def _decoder_stage(stage: DecoderStage, prev: Tensor, skip: Tensor, mode: str) -> Tensor:
    u = conv_transpose2d(prev, stage.up)
    u = concat_channels(u, skip)
    u = residual_block(u, stage.res1, mode)
    u = residual_block(u, stage.res2, mode)
    if stage.se is not None:
        u = se_block(u, stage.se)
    return u


def forward(params: DDANetParams, x: Tensor, mode: str = "eval",
            trace: dict | None = None) -> ForwardOutput:
    """Run the full network.

    The encoder produces one skip tensor per level; both decoders consume the
    identical skip tensors. At each attention stage the autoencoder branch
    emits a single-channel map that multiplicatively gates the segmentation
    branch before the next stage (the autoencoder branch itself is never
    modified). Requires H and W divisible by 16.
    """
    cfg = params.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (N,{cfg.in_channels},H,W) input, got {x.shape}")
    if x.shape[2] % 16 or x.shape[3] % 16:
        raise ValueError(f"spatial size {x.shape[2]}x{x.shape[3]} must be divisible by 16")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")

    skips = []
    h = x
    for i, block in enumerate(params.encoder):
        s = se_block(residual_block(h, block.res, mode), block.se)
        skips.append(s)
        h = maxpool2d(s)
        if trace is not None:
            trace[f"skip{i + 1}"] = s.shape
    if trace is not None:
        trace["bottleneck"] = h.shape

    seg = auto = h
    attention_maps = []
    for j in range(4):
        stage_idx = j + 1
        skip = skips[3 - j]
        seg = _decoder_stage(params.decoder_seg[j], seg, skip, mode)
        auto = _decoder_stage(params.decoder_auto[j], auto, skip, mode)
        if trace is not None:
            trace[f"seg_stage{stage_idx}"] = seg.shape
            trace[f"auto_stage{stage_idx}"] = auto.shape
        if stage_idx in cfg.attention_stages:
            attn = sigmoid(conv2d(auto, params.attention_convs[stage_idx]))
            seg = mul(seg, attn)
            attention_maps.append(attn)
            if trace is not None:
                trace[f"attention{stage_idx}"] = attn.shape

    mask = sigmoid(conv2d(seg, params.head_seg))
    gray = sigmoid(conv2d(auto, params.head_auto))
    return ForwardOutput(mask=mask, gray=gray, attention_maps=attention_maps)


# ---------------------------------------------------------------------------
# parameter traversal
# ---------------------------------------------------------------------------


def _conv_entries(prefix: str, spec: ConvSpec):
    yield f"{prefix}.weight", spec.weight
    yield f"{prefix}.bias", spec.bias


def _bn_entries(prefix: str, bn: BatchNormState):
    yield f"{prefix}.gamma", bn.gamma
    yield f"{prefix}.beta", bn.beta


def _res_entries(prefix: str, p: ResidualBlockParams):
    yield from _conv_entries(f"{prefix}.conv1", p.conv1)
    yield from _conv_entries(f"{prefix}.conv2", p.conv2)
    yield from _bn_entries(f"{prefix}.bn1", p.bn1)
    yield from _bn_entries(f"{prefix}.bn2", p.bn2)
    if p.shortcut_conv is not None:
        yield from _conv_entries(f"{prefix}.shortcut_conv", p.shortcut_conv)
        yield from _bn_entries(f"{prefix}.shortcut_bn", p.shortcut_bn)


def _se_entries(prefix: str, p: SEParams):
    yield f"{prefix}.fc1_w", p.fc1_w
    yield f"{prefix}.fc1_b", p.fc1_b
    yield f"{prefix}.fc2_w", p.fc2_w
    yield f"{prefix}.fc2_b", p.fc2_b


def _stage_entries(prefix: str, stage: DecoderStage):
    yield from _conv_entries(f"{prefix}.up", stage.up)
    yield from _res_entries(f"{prefix}.res1", stage.res1)
    yield from _res_entries(f"{prefix}.res2", stage.res2)
    if stage.se is not None:
        yield from _se_entries(f"{prefix}.se", stage.se)


def named_parameters(params: DDANetParams) -> list[tuple[str, Tensor]]:
    """All learnable tensors in a fixed, checkpoint-stable order."""
    out: list[tuple[str, Tensor]] = []
    for i, block in enumerate(params.encoder):
        out.extend(_res_entries(f"encoder.{i}.res", block.res))
        out.extend(_se_entries(f"encoder.{i}.se", block.se))
    for branch, stages in (("decoder_seg", params.decoder_seg), ("decoder_auto", params.decoder_auto)):
        for j, stage in enumerate(stages):
            out.extend(_stage_entries(f"{branch}.{j}", stage))
    for s in sorted(params.attention_convs):
        out.extend(_conv_entries(f"attention.{s}", params.attention_convs[s]))
    out.extend(_conv_entries("head_seg", params.head_seg))
    out.extend(_conv_entries("head_auto", params.head_auto))
    return out


def _res_buffers(prefix: str, p: ResidualBlockParams):
    for name, bn in (("bn1", p.bn1), ("bn2", p.bn2), ("shortcut_bn", p.shortcut_bn)):
        if bn is None:
            continue
        yield f"{prefix}.{name}.running_mean", bn.running_mean
        yield f"{prefix}.{name}.running_var", bn.running_var


def named_buffers(params: DDANetParams) -> list[tuple[str, np.ndarray]]:
    """Batch-norm running statistics, in the same traversal order as parameters."""
    out: list[tuple[str, np.ndarray]] = []
    for i, block in enumerate(params.encoder):
        out.extend(_res_buffers(f"encoder.{i}.res", block.res))
    for branch, stages in (("decoder_seg", params.decoder_seg), ("decoder_auto", params.decoder_auto)):
        for j, stage in enumerate(stages):
            out.extend(_res_buffers(f"{branch}.{j}.res1", stage.res1))
            out.extend(_res_buffers(f"{branch}.{j}.res2", stage.res2))
    return out


def count_params(params: DDANetParams) -> int:
    """Total number of learnable scalars."""
    return sum(t.size for _, t in named_parameters(params))
