"""The multimodal segmentation network.

An encoder halves the spatial extent at each of L stages; a bridge merges
an area-downsampled text embedding map into the coarsest visual features;
the main decoder mirrors the encoder back to full resolution and emits
per-class logits; an auxiliary decoder (training only) reconstructs every
encoder activation, giving the unsupervised part of training its targets.

Every stage is conv -> batch norm -> rectifier. Dilation mode "block"
replaces each encoder conv with five parallel dilated branches (d = 1, 2,
4, 8, 16) whose outputs are channel-concatenated.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image

from . import autodiff as ad
from .autodiff import BatchNormStats, Tensor
from .errors import ConfigError, ContractViolation, InputError

BLOCK_DILATIONS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class ArchitectureConfig:
    num_classes: int = 7
    stage_channels: tuple = (16, 32, 64, 128)
    dilation: object = 1              # positive int, or "block"
    upsampling: str = "unpooling"     # "unpooling" | "bilinear"
    skip_connections: bool = True
    embedding_dim: int = 16           # channels of the text embedding map; 0 disables
    bridge_stage: int | None = None   # encoder stage whose resolution takes the merge
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        self.validate()

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.stage_channels) < 2:
            raise ConfigError("need at least 2 encoder stages")
        if any(c <= 0 for c in self.stage_channels):
            raise ConfigError(f"stage channels must be positive: {self.stage_channels}")
        if self.dilation != "block":
            if not isinstance(self.dilation, int) or self.dilation < 1:
                raise ConfigError(f"dilation must be a positive int or 'block': {self.dilation!r}")
        if self.upsampling not in ("unpooling", "bilinear"):
            raise ConfigError(f"unknown upsampling mode {self.upsampling!r}")
        if self.embedding_dim < 0:
            raise ConfigError(f"embedding_dim must be >= 0, got {self.embedding_dim}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        b = self.resolved_bridge_stage
        if not 1 <= b <= self.num_stages:
            raise ConfigError(f"bridge stage {b} outside 1..{self.num_stages}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def resolved_bridge_stage(self) -> int:
        return self.num_stages if self.bridge_stage is None else self.bridge_stage

    def branch_channels(self, stage: int) -> int:
        # per-branch width; five concatenated branches realize the stage
        return math.ceil(self.stage_channels[stage - 1] / 4)

    def realized_channels(self, level: int) -> int:
        """Actual channel width of encoder activation a_level (level 0 = input)."""
        if level == 0:
            return self.input_channels
        if self.dilation == "block":
            return len(BLOCK_DILATIONS) * self.branch_channels(level)
        return self.stage_channels[level - 1]

    def decoder_out_channels(self, stage: int) -> int:
        # decoder stage l produces features at a_{l-1}'s resolution
        if stage >= 2:
            return self.realized_channels(stage - 1)
        return self.stage_channels[0]

    def aux_trunk_channels(self, level: int) -> int:
        return self.realized_channels(level) if level >= 1 else self.stage_channels[0]

    def aux_target_channels(self, level: int) -> int:
        return self.realized_channels(level)


def architecture_digest(config: ArchitectureConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _parameter_plan(config: ArchitectureConfig) -> tuple[dict, list[tuple[str, int]]]:
    """Shapes of every learnable tensor, plus (prefix, channels) of each norm."""
    shapes: dict[str, tuple] = {}
    norms: list[tuple[str, int]] = []
    L = config.num_stages

    def conv_unit(prefix: str, c_in: int, c_out: int):
        shapes[f"{prefix}/conv/w"] = (c_out, c_in, 3, 3)
        shapes[f"{prefix}/conv/b"] = (c_out,)
        shapes[f"{prefix}/bn/gamma"] = (c_out,)
        shapes[f"{prefix}/bn/beta"] = (c_out,)
        norms.append((prefix, c_out))

    for l in range(1, L + 1):
        c_in = config.realized_channels(l - 1)
        if config.dilation == "block":
            for d in BLOCK_DILATIONS:
                conv_unit(f"enc{l}/d{d}", c_in, config.branch_channels(l))
        else:
            conv_unit(f"enc{l}", c_in, config.stage_channels[l - 1])

    bridge = config.resolved_bridge_stage
    if config.embedding_dim > 0:
        # fusion unit restoring the visual width after the embedding concat,
        # keeping decoder widths congruent with the stored pool indices
        at_bridge = config.realized_channels(L) if bridge == L \
            else config.decoder_out_channels(bridge + 1)
        conv_unit("bridge", at_bridge + config.embedding_dim, at_bridge)
    for l in range(L, 0, -1):
        width = config.realized_channels(L) if l == L else config.decoder_out_channels(l + 1)
        if config.skip_connections:
            width += config.realized_channels(l)
        conv_unit(f"dec{l}", width, config.decoder_out_channels(l))

    shapes["head/w"] = (config.num_classes, config.decoder_out_channels(1))
    shapes["head/b"] = (config.num_classes,)

    for l in range(L, -1, -1):
        c_in = config.realized_channels(L) if l == L else config.aux_trunk_channels(l + 1)
        trunk = config.aux_trunk_channels(l)
        conv_unit(f"aux{l}", c_in, trunk)
        shapes[f"aux{l}/head/w"] = (config.aux_target_channels(l), trunk)
        shapes[f"aux{l}/head/b"] = (config.aux_target_channels(l),)

    return shapes, norms


class ModelState:
    """Named parameter tensors plus batch-norm running statistics."""

    def __init__(self, params: dict[str, Tensor], stats: dict[str, BatchNormStats]):
        self.params = params
        self.stats = stats

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def parameter_names(config: ArchitectureConfig) -> list[str]:
    shapes, _ = _parameter_plan(config)
    return list(shapes)


def topology_summary(config: ArchitectureConfig) -> str:
    """One line pinning the structure choices that parameter names cannot show."""
    return (
        f"stages={config.num_stages} dilation={config.dilation} "
        f"upsampling={config.upsampling} skip={config.skip_connections} "
        f"embedding={config.embedding_dim} bridge={config.resolved_bridge_stage}"
    )


def init_model(config: ArchitectureConfig, seed: int = 0) -> ModelState:
    """He-style init for conv weights, zero biases, identity norms."""
    shapes, norms = _parameter_plan(config)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if name.endswith("/w"):
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith("gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    stats = {prefix: BatchNormStats(channels) for prefix, channels in norms}
    return ModelState(params, stats)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

@dataclass
class ForwardArtifacts:
    activations: list = field(default_factory=list)   # a_0 .. a_L (post-pool)
    skips: list = field(default_factory=list)         # s_1 .. s_L (pre-pool)
    pool_indices: list = field(default_factory=list)  # per stage
    decoder_features: list = field(default_factory=list)  # index = resolution level
    logits: Tensor | None = None
    reconstructions: list | None = None               # a~_0 .. a~_L in train mode


def _conv_unit(x: Tensor, prefix: str, state: ModelState, bn_mode: str,
               dilation: int = 1) -> Tensor:
    p = state.params
    y = ad.conv2d(x, p[f"{prefix}/conv/w"], p[f"{prefix}/conv/b"], dilation=dilation)
    y = ad.batch_norm(y, p[f"{prefix}/bn/gamma"], p[f"{prefix}/bn/beta"],
                      state.stats[prefix], mode=bn_mode)
    return ad.relu(y)


def dilated_block(x: Tensor, stage: int, config: ArchitectureConfig,
                  state: ModelState, bn_mode: str) -> Tensor:
    branches = [
        _conv_unit(x, f"enc{stage}/d{d}", state, bn_mode, dilation=d)
        for d in BLOCK_DILATIONS
    ]
    return ad.concat_channels(*branches)


def encode(image: Tensor, config: ArchitectureConfig, state: ModelState,
           bn_mode: str = "train") -> ForwardArtifacts:
    if image.data.ndim != 3 or image.data.shape[0] != config.input_channels:
        raise ContractViolation(
            f"encode expects {config.input_channels} x H x W input, got {image.shape}"
        )
    L = config.num_stages
    _, h, w = image.data.shape
    divisor = 2 ** L
    if h % divisor or w % divisor:
        raise ContractViolation(
            f"input dims {h}x{w} not divisible by 2^{L}; preprocessing must pad"
        )
    arts = ForwardArtifacts()
    arts.activations.append(image)
    x = image
    for l in range(1, L + 1):
        if config.dilation == "block":
            s = dilated_block(x, l, config, state, bn_mode)
        else:
            s = _conv_unit(x, f"enc{l}", state, bn_mode, dilation=config.dilation)
        pooled, indices = ad.max_pool2d(s)
        arts.skips.append(s)
        arts.pool_indices.append(indices)
        arts.activations.append(pooled)
        x = pooled
    return arts


def bridge_merge(visual: Tensor, embedding_map: np.ndarray) -> Tensor:
    """Area-downsample the page embedding map and concatenate it."""
    if embedding_map.ndim != 3:
        raise ContractViolation(f"embedding map must be N x H x W, got {embedding_map.shape}")
    _, h, w = visual.data.shape
    n, hp, wp = embedding_map.shape
    if hp % h or wp % w or hp // h != wp // w:
        raise ContractViolation(
            f"embedding map {hp}x{wp} is not an integer multiple of features {h}x{w}"
        )
    factor = hp // h
    down = ad.avg_downsample(Tensor(embedding_map), factor) if factor > 1 \
        else Tensor(embedding_map)
    return ad.concat_channels(visual, down)


def _upsample(x: Tensor, config: ArchitectureConfig, indices) -> Tensor:
    if config.upsampling == "unpooling":
        if indices is None:
            raise ContractViolation("unpooling mode requires stored pool indices")
        return ad.unpool2d(x, indices)
    return ad.bilinear_upsample2x(x)


def decode_main(arts: ForwardArtifacts, config: ArchitectureConfig, state: ModelState,
                bn_mode: str = "train",
                embedding_map: np.ndarray | None = None) -> Tensor:
    L = config.num_stages
    if len(arts.activations) != L + 1:
        raise ContractViolation("decode_main called before encode completed")
    bridge = config.resolved_bridge_stage
    x = arts.activations[L]
    arts.decoder_features = [None] * L  # [m] = features at a_m's resolution
    for l in range(L, 0, -1):
        if config.embedding_dim > 0 and l == bridge:
            if embedding_map is None:
                raise ContractViolation(
                    "config enables a text branch but no embedding map was given"
                )
            x = bridge_merge(x, embedding_map)
            x = _conv_unit(x, "bridge", state, bn_mode)
        x = _upsample(x, config, arts.pool_indices[l - 1])
        if config.skip_connections:
            x = ad.concat_channels(x, arts.skips[l - 1])
        x = _conv_unit(x, f"dec{l}", state, bn_mode)
        arts.decoder_features[l - 1] = x
    logits = ad.pointwise_conv(x, state.params["head/w"], state.params["head/b"])
    return logits


def decode_auxiliary(arts: ForwardArtifacts, config: ArchitectureConfig,
                     state: ModelState, mode: str = "train",
                     bn_mode: str = "train") -> list:
    """Reconstruct a~_L .. a~_0 from the coarsest visual code (no skips)."""
    if mode != "train":
        raise ContractViolation("the auxiliary decoder exists only during training")
    L = config.num_stages
    p = state.params
    recon: list = [None] * (L + 1)
    g = arts.activations[L]
    for l in range(L, -1, -1):
        if l < L:
            g = _upsample(g, config, arts.pool_indices[l])
        g = _conv_unit(g, f"aux{l}", state, bn_mode)
        recon[l] = ad.pointwise_conv(g, p[f"aux{l}/head/w"], p[f"aux{l}/head/b"])
    return recon


def forward(image: Tensor, embedding_map: np.ndarray | None,
            config: ArchitectureConfig, state: ModelState,
            mode: str = "train", bn_mode: str | None = None) -> ForwardArtifacts:
    if mode not in ("train", "eval"):
        raise ContractViolation(f"unknown mode {mode!r}")
    if bn_mode is None:
        bn_mode = "train" if mode == "train" else "eval"
    if config.embedding_dim == 0 and embedding_map is not None:
        raise ContractViolation("embedding map given but config has no text branch")
    arts = encode(image, config, state, bn_mode)
    arts.logits = decode_main(arts, config, state, bn_mode, embedding_map)
    if mode == "train":
        arts.reconstructions = decode_auxiliary(arts, config, state, mode, bn_mode)
    return arts


def receptive_field(config: ArchitectureConfig) -> int:
    """Generous one-sided receptive-field radius in input pixels."""
    d_max = max(BLOCK_DILATIONS) if config.dilation == "block" else config.dilation
    radius = 0
    for l in range(1, config.num_stages + 1):
        # encoder conv at a_{l-1}'s resolution, decoder conv at the same
        radius += (d_max + 1) * 2 ** (l - 1) + 2 * 2 ** (l - 1)
    return radius


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@dataclass
class PreprocessResult:
    tensor: Tensor            # input_channels x H x W, mean-subtracted, padded
    valid: np.ndarray         # H x W bool, False on padding
    content_size: tuple       # (height, width) before padding
    scale: float              # resize factor applied to the raster


def fit_size(height: int, width: int, max_side: int) -> tuple[int, int, float]:
    longer = max(height, width)
    if longer <= max_side:
        return height, width, 1.0
    scale = max_side / longer
    return max(1, round(height * scale)), max(1, round(width * scale)), scale


def padded_size(height: int, width: int, stages: int) -> tuple[int, int]:
    divisor = 2 ** stages
    return (math.ceil(height / divisor) * divisor,
            math.ceil(width / divisor) * divisor)


def preprocess(raster: np.ndarray, config: ArchitectureConfig,
               max_side: int = 384,
               channel_means: tuple | None = None) -> PreprocessResult:
    """Resize (longer side <= max_side), pad to stage-divisible dims, subtract means.

    `raster` is H x W x C with C == config.input_channels; uint8 rasters are
    mapped to [0, 1]. When `channel_means` is None the image's own per-channel
    means are subtracted.
    """
    raster = np.asarray(raster)
    if raster.ndim == 2:
        raster = raster[:, :, None]
    if raster.ndim != 3 or raster.shape[2] != config.input_channels:
        raise InputError(f"raster must be H x W x {config.input_channels}, got {raster.shape}")
    if raster.shape[0] == 0 or raster.shape[1] == 0:
        raise InputError("empty image")
    if raster.dtype == np.uint8:
        raster = raster.astype(np.float32) / 255.0
    else:
        raster = raster.astype(np.float32)

    h0, w0 = raster.shape[:2]
    h1, w1, scale = fit_size(h0, w0, max_side)
    if (h1, w1) != (h0, w0):
        channels = [
            np.asarray(
                Image.fromarray(raster[:, :, c], mode="F").resize((w1, h1), Image.BILINEAR)
            )
            for c in range(raster.shape[2])
        ]
        raster = np.stack(channels, axis=2)

    if channel_means is None:
        means = raster.mean(axis=(0, 1))
    else:
        means = np.asarray(channel_means, dtype=np.float32)
        if means.shape != (config.input_channels,):
            raise InputError(f"channel_means must have {config.input_channels} entries")
    raster = raster - means

    hp, wp = padded_size(h1, w1, config.num_stages)
    padded = np.zeros((hp, wp, raster.shape[2]), dtype=np.float32)
    padded[:h1, :w1] = raster
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:h1, :w1] = True
    tensor = Tensor(np.ascontiguousarray(padded.transpose(2, 0, 1)))
    return PreprocessResult(tensor=tensor, valid=valid, content_size=(h1, w1), scale=scale)
