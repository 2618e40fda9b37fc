"""Desk-scale stacked-hourglass landmark network.

The graph follows the full-scale blueprint exactly when built with the
full configuration (stem, four-level hourglass with branch skips, one
spatial-correlation fusion per stack, one channel-recalibration module
before the head, deconvolution head emitting L + T heatmaps) and shrinks
every extent by configuration for desk-scale training.  Batch statistics
are meaningless at desk batch sizes, so each convolution carries a
per-channel affine (learnable scale and shift) where the blueprint lists
batch normalization.

Training alternates two steps per iteration: decode and search the
optimal landmarks with the weights frozen, then update the weights
against the probabilistic objective with the searched landmarks fixed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import channels as channels_mod
from .autodiff import (
    Tensor,
    conv2d,
    conv_transpose2d,
    no_grad,
    pool2d,
    softmax_rows,
    upsample_nearest,
)
from .covariance import centered_covariance, newton_schulz_sqrt
from .errors import ConfigurationError, ContractError
from .spatial import SpatialCorrelation, multi_order_fuse, second_order_correlations

BASE_LR = 2.5e-4
SCHEDULE_ITERATIONS = 100000


@dataclass
class NetworkConfig:
    input_size: int = 64
    base_channels: int = 32
    hourglass_depth: int = 2
    stacks: int = 1
    landmark_count: int = 5
    boundary_count: int = 13

    @property
    def heatmap_size(self) -> int:
        return self.input_size // 2

    @property
    def feature_size(self) -> int:
        return self.input_size // 4

    @property
    def output_channels(self) -> int:
        return self.landmark_count + self.boundary_count

    @classmethod
    def full(cls, landmark_count: int = 68) -> "NetworkConfig":
        return cls(input_size=256, base_channels=256, hourglass_depth=4,
                   stacks=1, landmark_count=landmark_count)

    def validate(self) -> None:
        if self.input_size % 4 != 0:
            raise ConfigurationError(f"input_size must be divisible by 4, got {self.input_size}")
        if self.base_channels % 8 != 0:
            raise ConfigurationError(f"base_channels must be divisible by 8, got {self.base_channels}")
        if self.hourglass_depth < 1:
            raise ConfigurationError(f"hourglass_depth must be >= 1, got {self.hourglass_depth}")
        if self.feature_size // (2 ** self.hourglass_depth) < 2:
            raise ConfigurationError(
                f"hourglass_depth {self.hourglass_depth} exhausts the "
                f"{self.feature_size}-pixel feature extent")
        if self.stacks < 1:
            raise ConfigurationError(f"stacks must be >= 1, got {self.stacks}")
        if self.landmark_count < 1 or self.boundary_count < 1:
            raise ConfigurationError("landmark and boundary counts must be positive")

    def fingerprint(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class NetworkState:
    config: NetworkConfig
    params: dict[str, Tensor]
    velocity: dict[str, np.ndarray]
    iteration: int
    rng: np.random.Generator

    def correlation(self, stack: int) -> SpatialCorrelation:
        size = self.config.feature_size
        module = SpatialCorrelation(positions=size * size, channels=self.config.base_channels,
                                    weight=self.params[f"stack{stack}.corr.weight"])
        return module

    def check_finite(self) -> None:
        for name, tensor in self.params.items():
            if not np.all(np.isfinite(tensor.data)):
                raise ContractError(f"parameter '{name}' became non-finite")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _he_uniform(rng, fan_in, shape):
    # variance-preserving under relu; plain 1/sqrt(fan) decays activations
    # by ~2.4x per layer and starves the deep layers of signal
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def conv(self, name, kh, kw, cin, cout):
        self.params[f"{name}.kernel"] = Tensor(
            _he_uniform(self.rng, kh * kw * cin, (kh, kw, cin, cout)), requires_grad=True)

    def affine(self, name, channels):
        self.params[f"{name}.scale"] = Tensor(np.ones((1, 1, channels)), requires_grad=True)
        self.params[f"{name}.shift"] = Tensor(np.zeros((1, 1, channels)), requires_grad=True)

    def conv_affine(self, name, kh, kw, cin, cout):
        self.conv(name, kh, kw, cin, cout)
        self.affine(name, cout)

    def residual(self, name, cin, cout):
        mid = cout // 4
        self.conv_affine(f"{name}.a", 1, 1, cin, mid)
        self.conv_affine(f"{name}.b", 3, 3, mid, mid)
        self.conv_affine(f"{name}.c", 1, 1, mid, cout)
        if cin != cout:
            self.conv_affine(f"{name}.proj", 1, 1, cin, cout)


def build(config: NetworkConfig, seed: int) -> NetworkState:
    """Deterministic parameter initialization for the configured graph."""
    config.validate()
    rng = np.random.default_rng(seed)
    b = _Builder(rng)
    base = config.base_channels

    b.conv_affine("stem.conv1", 7, 7, 3, base // 4)
    b.residual("stem.res1", base // 4, base // 2)
    b.residual("stem.res2", base // 2, base // 2)
    b.residual("stem.res3", base // 2, base // 2)
    b.conv_affine("stem.conv2", 3, 3, base // 2, base)

    for s in range(config.stacks):
        pre = f"stack{s}"
        for level in range(1, config.hourglass_depth + 1):
            b.residual(f"{pre}.branch{level}", base, base)
            if level < config.hourglass_depth:
                b.residual(f"{pre}.down{level}", base, base)
        for i in range(3):
            b.residual(f"{pre}.bottom{i}", base, base)
        for level in range(config.hourglass_depth, 0, -1):
            b.residual(f"{pre}.up{level}", base, base)
        b.params[f"{pre}.corr.weight"] = Tensor(np.zeros(()), requires_grad=True)
        b.params[f"{pre}.gate_first.reduce"] = Tensor(
            _uniform(rng, base, (base // 4, base)), requires_grad=True)
        b.params[f"{pre}.gate_first.expand"] = Tensor(
            _uniform(rng, base // 4, (base, base // 4)), requires_grad=True)
        b.params[f"{pre}.gate_second.reduce"] = Tensor(
            _uniform(rng, base, (base // 4, base)), requires_grad=True)
        b.params[f"{pre}.gate_second.expand"] = Tensor(
            _uniform(rng, base // 4, (base, base // 4)), requires_grad=True)
        b.conv_affine(f"{pre}.deconv", 4, 4, base, base // 2)
        # the head emits one spatial softmax per channel, so start with
        # small logits: the initial maps are then near-uniform
        b.params[f"{pre}.out.kernel"] = Tensor(
            0.1 * _uniform(rng, 9 * (base // 2), (3, 3, base // 2, config.output_channels)),
            requires_grad=True)

    return NetworkState(config=config, params=b.params,
                        velocity={}, iteration=0, rng=np.random.default_rng(seed + 1))


def _affine(params, name, x):
    return x * params[f"{name}.scale"] + params[f"{name}.shift"]


def _conv_block(params, name, x, stride=1, padding=0, relu=True):
    out = _affine(params, name, conv2d(x, params[f"{name}.kernel"], stride, padding))
    return out.relu() if relu else out


def _residual_block(params, name, x):
    out = _conv_block(params, f"{name}.a", x)
    out = _conv_block(params, f"{name}.b", out, padding=1)
    out = _conv_block(params, f"{name}.c", out, relu=False)
    skip = x if f"{name}.proj.kernel" not in params else _conv_block(
        params, f"{name}.proj", x, relu=False)
    return (out + skip).relu()


@dataclass
class ForwardResult:
    stages: list[tuple[list[Tensor], list[Tensor]]]

    @property
    def landmarks(self) -> list[Tensor]:
        return self.stages[-1][0]

    @property
    def boundaries(self) -> list[Tensor]:
        return self.stages[-1][1]


def forward(state: NetworkState, image, trace: list | None = None) -> ForwardResult:
    """Run the network on one (input, input, 3) image.

    Returns per-stack landmark and boundary heatmap tensors; when
    ``trace`` is a list, (layer, shape) records are appended for every
    blueprint row.
    """
    config, params = state.config, state.params
    x = image if isinstance(image, Tensor) else Tensor(image)
    expected = (config.input_size, config.input_size, 3)
    if x.data.shape != expected:
        raise ContractError(f"expected input shape {expected}, got {x.data.shape}")

    def record(name, tensor):
        if trace is not None:
            trace.append((name, tensor.data.shape))

    record("input", x)
    x = _conv_block(params, "stem.conv1", x, stride=2, padding=3)
    record("conv_bn", x)
    x = _residual_block(params, "stem.res1", x)
    record("residual", x)
    x = pool2d(x, "avg", 2, 2)
    record("avg_pool", x)
    x = _residual_block(params, "stem.res2", x)
    x = _residual_block(params, "stem.res3", x)
    record("residual_x2", x)
    x = _conv_block(params, "stem.conv2", x, padding=1)
    record("conv", x)

    stages = []
    for s in range(config.stacks):
        pre = f"stack{s}"
        hourglass_input = x
        branches = {}
        for level in range(1, config.hourglass_depth + 1):
            branches[level] = _residual_block(params, f"{pre}.branch{level}", x)
            record(f"branch{level}", branches[level])
            x = pool2d(branches[level], "max", 2, 2)
            record(f"max_pool{level}", x)
            if level < config.hourglass_depth:
                x = _residual_block(params, f"{pre}.down{level}", x)
                record("residual", x)
        for i in range(3):
            x = _residual_block(params, f"{pre}.bottom{i}", x)
        record("residual_x3", x)
        for level in range(config.hourglass_depth, 0, -1):
            x = upsample_nearest(x, 2)
            record(f"upsample{level}", x)
            x = x + branches[level]
            record(f"add_branch{level}", x)
            x = _residual_block(params, f"{pre}.up{level}", x)
            record("residual_q" if level == 1 else "residual", x)
        unit_output = x

        n = config.feature_size * config.feature_size
        in_features = hourglass_input.reshape(n, config.base_channels)
        out_features = unit_output.reshape(n, config.base_channels)
        correlations = second_order_correlations(in_features, out_features)
        fused = multi_order_fuse(correlations, out_features, state.correlation(s))
        x = fused.reshape(config.feature_size, config.feature_size, config.base_channels)
        record("correlation", x)

        features = x.relu()
        if s == config.stacks - 1:
            record("x", features)
            first = channels_mod.GatingParams(
                reduce=params[f"{pre}.gate_first.reduce"],
                expand=params[f"{pre}.gate_first.expand"], order="first")
            second = channels_mod.GatingParams(
                reduce=params[f"{pre}.gate_second.reduce"],
                expand=params[f"{pre}.gate_second.expand"], order="second")
            descriptor_first = channels_mod.first_order_descriptor(features)
            record("gap", descriptor_first.reshape(1, 1, config.base_channels))
            s_first = channels_mod.gate(descriptor_first, first)
            if trace is not None:
                trace.append(("conv1_1", (1, 1, config.base_channels // 4)))
                trace.append(("conv1_2", (1, 1, config.base_channels)))
            sigma = centered_covariance(features.reshape(n, config.base_channels))
            root, _ = newton_schulz_sqrt(sigma, iterations=5)
            descriptor_second = channels_mod.second_order_descriptor(root)
            record("gcp", descriptor_second.reshape(1, 1, config.base_channels))
            s_second = channels_mod.gate(descriptor_second, second)
            if trace is not None:
                trace.append(("conv2_1", (1, 1, config.base_channels // 4)))
                trace.append(("conv2_2", (1, 1, config.base_channels)))
            head_in = channels_mod.fuse_multi_order(
                channels_mod.recalibrate(features, s_first),
                channels_mod.recalibrate(features, s_second))
        else:
            head_in = features

        head = conv_transpose2d(head_in, params[f"{pre}.deconv.kernel"], stride=2, padding=1)
        head = (_affine(params, f"{pre}.deconv", head)).relu()
        record("deconv", head)
        out = conv2d(head, params[f"{pre}.out.kernel"], stride=1, padding=1)
        record("out", out)

        hm_size = out.data.shape[0]

        def channel_map(index):
            # logits -> per-channel spatial distribution: scale-controlled,
            # never saturates, matches the probabilistic heatmap reading
            logits = out.slice_channels(index, index + 1).reshape(1, hm_size * hm_size)
            return softmax_rows(logits).reshape(hm_size, hm_size)

        landmark_maps = [channel_map(i) for i in range(config.landmark_count)]
        boundary_maps = [channel_map(config.landmark_count + t)
                         for t in range(config.boundary_count)]
        stages.append((landmark_maps, boundary_maps))
        x = features
    return ForwardResult(stages=stages)


def shape_trace(config: NetworkConfig, seed: int = 0) -> list[tuple[str, tuple]]:
    """Layer-by-layer output shapes of one forward pass (no gradients)."""
    state = build(config, seed)
    trace: list[tuple[str, tuple]] = []
    with no_grad():
        forward(state, np.zeros((config.input_size, config.input_size, 3)), trace=trace)
    return trace


def staircase_lr(iteration: int, total_iterations: int = SCHEDULE_ITERATIONS,
                 base_lr: float = BASE_LR) -> float:
    """Piecewise-constant schedule: divide by 5, 2, 2 at the 5%, 20% and
    50% marks of the schedule length."""
    if iteration < 0:
        raise ContractError(f"iteration must be nonnegative, got {iteration}")
    scale = total_iterations / SCHEDULE_ITERATIONS
    if iteration < 5000 * scale:
        return base_lr
    if iteration < 20000 * scale:
        return base_lr / 5.0
    if iteration < 50000 * scale:
        return base_lr / 10.0
    return base_lr / 20.0
