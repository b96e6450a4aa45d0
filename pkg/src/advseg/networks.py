"""Estimator and Rib Cage discriminator networks.

Estimator: five stride-1 'same' convolutions, (kernel, filters) =
(9,16) (7,32) (5,64) (4,64) (1,3).  The first four are followed by batch
norm and leaky-ReLU, the last by a per-pixel softmax over three classes
(background, nucleus, contour).

Discriminator: three Rib Cage blocks whose spine convolutions are
(9,8) (5,32) (3,64); each rib has twice the spine's filters.  A (4,64)
fusion convolution over the concatenated block-3 outputs is followed by
FC(64), FC(64) and FC(1)+sigmoid.  Every block convolution and the fusion
convolution use stride 2, so a 64x64 input reaches the FC layers as
4x4x64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import RunningStats, ShapeError, Tensor

ESTIMATOR_LAYERS = ((9, 16), (7, 32), (5, 64), (4, 64), (1, 3))
SPINE_LAYERS = ((9, 8), (5, 32), (3, 64))
FUSION_LAYER = (4, 64)
FC_LAYERS = (64, 64, 1)
RIB_TO_SPINE = 2
LEAKY_SLOPE = 0.2
MIN_ESTIMATOR_SIZE = max(k for k, _ in ESTIMATOR_LAYERS)
DISCRIMINATOR_SIZE = 64
N_CLASSES = 3


@dataclass
class ConvLayer:
    kernel: Tensor
    bias: Tensor
    stride: int = 1
    gamma: Tensor | None = None
    beta: Tensor | None = None
    running: RunningStats | None = None

    @property
    def filters(self) -> int:
        return self.kernel.shape[-1]

    def forward(self, x: Tensor, mode: str, momentum: float, activate: bool = True) -> Tensor:
        y = T.conv2d(x, self.kernel, self.bias, stride=self.stride, padding="same")
        if self.gamma is not None:
            y = T.batchnorm(y, self.gamma, self.beta, self.running, mode=mode, momentum=momentum)
        if activate:
            y = T.leaky_relu(y, LEAKY_SLOPE)
        return y


@dataclass
class RibCageBlockParams:
    gl_rib: ConvLayer
    seg_rib: ConvLayer
    spine: ConvLayer

    def __post_init__(self):
        if self.gl_rib.filters != RIB_TO_SPINE * self.spine.filters or self.seg_rib.filters != self.gl_rib.filters:
            raise ValueError(
                f"rib/spine filters must be {RIB_TO_SPINE}:1, got "
                f"{self.gl_rib.filters}/{self.seg_rib.filters} vs {self.spine.filters}"
            )


@dataclass
class EstimatorParams:
    layers: list[ConvLayer]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers, 1):
            out.update(_conv_tensors(f"conv{i}", layer))
        return out

    def named_running(self) -> dict[str, RunningStats]:
        return {f"conv{i}": l.running for i, l in enumerate(self.layers, 1) if l.running is not None}


@dataclass
class DiscriminatorParams:
    blocks: list[RibCageBlockParams]
    fusion: ConvLayer
    fc: list[tuple[Tensor, Tensor]]
    input_size: int = DISCRIMINATOR_SIZE

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, block in enumerate(self.blocks, 1):
            for part in ("gl_rib", "seg_rib", "spine"):
                out.update(_conv_tensors(f"block{i}.{part}", getattr(block, part)))
        out.update(_conv_tensors("fusion", self.fusion))
        for i, (w, b) in enumerate(self.fc, 1):
            out[f"fc{i}.weights"] = w
            out[f"fc{i}.bias"] = b
        return out

    def named_running(self) -> dict[str, RunningStats]:
        out = {}
        for i, block in enumerate(self.blocks, 1):
            for part in ("gl_rib", "seg_rib", "spine"):
                out[f"block{i}.{part}"] = getattr(block, part).running
        out["fusion"] = self.fusion.running
        return out


Params = EstimatorParams | DiscriminatorParams


def _conv_tensors(prefix: str, layer: ConvLayer) -> dict[str, Tensor]:
    out = {f"{prefix}.kernel": layer.kernel, f"{prefix}.bias": layer.bias}
    if layer.gamma is not None:
        out[f"{prefix}.gamma"] = layer.gamma
        out[f"{prefix}.beta"] = layer.beta
    return out


def parameter_count(params: Params) -> int:
    return sum(t.size for t in params.named_tensors().values())


# ----------------------------------------------------------------- init


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def _conv(rng, k: int, cin: int, cout: int, stride: int, norm: bool = True) -> ConvLayer:
    layer = ConvLayer(
        kernel=_he(rng, (k, k, cin, cout), k * k * cin),
        bias=Tensor(np.zeros(cout), requires_grad=True),
        stride=stride,
    )
    if norm:
        layer.gamma = Tensor(np.ones(cout), requires_grad=True)
        layer.beta = Tensor(np.zeros(cout), requires_grad=True)
        layer.running = RunningStats()
    return layer


def init_estimator(seed: int) -> EstimatorParams:
    rng = np.random.default_rng(seed)
    layers, cin = [], 1
    for i, (k, c) in enumerate(ESTIMATOR_LAYERS):
        last = i == len(ESTIMATOR_LAYERS) - 1
        layers.append(_conv(rng, k, cin, c, stride=1, norm=not last))
        cin = c
    return EstimatorParams(layers)


def init_discriminator(seed: int, input_size: int = DISCRIMINATOR_SIZE) -> DiscriminatorParams:
    """He-initialized Rib Cage discriminator for ``input_size`` square inputs.

    ``input_size`` only changes the first FC layer's fan-in; training always
    uses 64.
    """
    if input_size % 16:
        raise ValueError(f"discriminator input size must be a multiple of 16, got {input_size}")
    rng = np.random.default_rng(seed)
    blocks = []
    gl_c, seg_c, spine_c = 1, N_CLASSES, 0
    for k, spine_filters in SPINE_LAYERS:
        rib_filters = RIB_TO_SPINE * spine_filters
        blocks.append(
            RibCageBlockParams(
                gl_rib=_conv(rng, k, gl_c, rib_filters, stride=2),
                seg_rib=_conv(rng, k, seg_c, rib_filters, stride=2),
                spine=_conv(rng, k, gl_c + seg_c + spine_c, spine_filters, stride=2),
            )
        )
        gl_c = seg_c = rib_filters
        spine_c = spine_filters
    k, c = FUSION_LAYER
    fusion = _conv(rng, k, gl_c + seg_c + spine_c, c, stride=2)
    side = input_size // 16
    fan_in = side * side * c
    fc = []
    for width in FC_LAYERS:
        fc.append((_he(rng, (fan_in, width), fan_in), Tensor(np.zeros(width), requires_grad=True)))
        fan_in = width
    return DiscriminatorParams(blocks, fusion, fc, input_size=input_size)


def init_params(seed: int, kind: str = "estimator", **kwargs) -> Params:
    if kind == "estimator":
        return init_estimator(seed)
    if kind == "discriminator":
        return init_discriminator(seed, **kwargs)
    raise ValueError(f"unknown network kind {kind!r}; expected 'estimator' or 'discriminator'")


# --------------------------------------------------------------- forward


def estimator_forward(params: EstimatorParams, image: Tensor, mode: str = "train", momentum: float = 0.9) -> Tensor:
    """BHW1 gray-level image -> BHW3 per-pixel class probabilities."""
    if image.data.ndim != 4 or image.shape[-1] != 1:
        raise ShapeError(f"estimator expects a BHW1 image, got shape {image.shape}")
    _, h, w, _ = image.shape
    if h < MIN_ESTIMATOR_SIZE or w < MIN_ESTIMATOR_SIZE:
        raise ShapeError(f"estimator needs H, W >= {MIN_ESTIMATOR_SIZE}, got {h}x{w}")
    x = image
    for layer in params.layers[:-1]:
        x = layer.forward(x, mode, momentum)
    logits = params.layers[-1].forward(x, mode, momentum, activate=False)
    return T.softmax_channels(logits)


def ribcage_block_forward(
    block: RibCageBlockParams,
    gl_in: Tensor,
    seg_in: Tensor,
    spine_in: Tensor | None,
    mode: str = "train",
    momentum: float = 0.9,
) -> tuple[Tensor, Tensor, Tensor]:
    if gl_in.shape[:3] != seg_in.shape[:3]:
        raise ShapeError(f"rib cage block: gray-level {gl_in.shape[:3]} and segmentation {seg_in.shape[:3]} differ")
    spine_src = (gl_in, seg_in) if spine_in is None else (gl_in, seg_in, spine_in)
    gl_out = block.gl_rib.forward(gl_in, mode, momentum)
    seg_out = block.seg_rib.forward(seg_in, mode, momentum)
    spine_out = block.spine.forward(T.concat_channels(*spine_src), mode, momentum)
    return gl_out, seg_out, spine_out


def discriminator_logit(
    params: DiscriminatorParams, image: Tensor, seg: Tensor, mode: str = "train", momentum: float = 0.9
) -> Tensor:
    size = params.input_size
    if image.data.ndim != 4 or seg.data.ndim != 4:
        raise ShapeError(f"discriminator expects BHWC tensors, got {image.shape} and {seg.shape}")
    if image.shape[:3] != seg.shape[:3]:
        raise ShapeError(f"discriminator: image {image.shape[:3]} and segmentation {seg.shape[:3]} differ")
    if image.shape[1:3] != (size, size):
        raise ShapeError(f"discriminator expects {size}x{size} inputs, got {image.shape[1]}x{image.shape[2]}")
    if image.shape[-1] != 1 or seg.shape[-1] != N_CLASSES:
        raise ShapeError(f"discriminator expects 1 image channel and {N_CLASSES} label channels, "
                         f"got {image.shape[-1]} and {seg.shape[-1]}")
    gl, sg, spine = image, seg, None
    for block in params.blocks:
        gl, sg, spine = ribcage_block_forward(block, gl, sg, spine, mode, momentum)
    x = params.fusion.forward(T.concat_channels(gl, sg, spine), mode, momentum)
    x = T.flatten(x)
    for i, (w, b) in enumerate(params.fc):
        x = T.fully_connected(x, w, b)
        if i < len(params.fc) - 1:
            x = T.leaky_relu(x, LEAKY_SLOPE)
    return x


def discriminator_forward(
    params: DiscriminatorParams, image: Tensor, seg: Tensor, mode: str = "train", momentum: float = 0.9
) -> Tensor:
    """Probability (B x 1) that ``seg`` is a manual segmentation of ``image``."""
    return T.sigmoid(discriminator_logit(params, image, seg, mode, momentum))
