"""Layer library: standard CNN blocks plus involution, dense layers and transitions.

Modules register parameters, buffers and children through attribute
assignment, so every parameter gets a dotted hierarchical name such as
``features.block2.layer1.conv3x3.weight``.

Each module can also propagate a shape symbolically (:meth:`Module.profile`),
appending one :class:`LayerRow` per leaf layer with its parameter and
multiply-accumulate counts. BN, activations, pooling and elementwise ops are
counted as zero MACs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import Tensor, default_dtype

Shape = tuple[int, ...]


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


@dataclass
class LayerRow:
    name: str
    kind: str
    in_shape: Shape
    out_shape: Shape
    params: int
    macs: int


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    dtype = default_dtype()
    return (rng.random(shape, dtype=dtype) * 2 - 1) * dtype.type(bound)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffer_names", [])
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in self._buffer_names:
            self._buffer_names.append(name)
        object.__setattr__(self, name, value)

    @property
    def kind(self) -> str:
        return type(self).__name__

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    # -- traversal --------------------------------------------------------------

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for name in mod._buffer_names:
                yield (f"{mod_name}.{name}" if mod_name else name), getattr(mod, name)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, target in own.items():
            src = np.asarray(state[name])
            if src.shape != target.shape:
                raise DimensionError(f"{name}: shape {src.shape} != {target.shape}")
            target[...] = src

    # -- modes -------------------------------------------------------------------

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m in self.named_modules():
            for name in m._buffer_names:
                object.__setattr__(m, name, getattr(m, name).astype(dtype))
        return self

    # -- symbolic profiling -------------------------------------------------------

    def own_param_count(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def _profile(self, in_shape: Shape) -> tuple[Shape, int]:
        raise NotImplementedError(f"{self.kind} has no shape rule")

    def profile(self, in_shape: Shape, rows: list[LayerRow] | None = None, prefix: str = "") -> Shape:
        out_shape, macs = self._profile(in_shape)
        if rows is not None:
            rows.append(LayerRow(prefix, self.kind, tuple(in_shape), tuple(out_shape), self.own_param_count(), int(macs)))
        return out_shape


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


class Sequential(Module):
    """Runs children in order. Accepts modules or ``(name, module)`` pairs."""

    def __init__(self, *layers):
        super().__init__()
        for i, item in enumerate(layers):
            name, module = item if isinstance(item, tuple) else (str(i), item)
            setattr(self, name, module)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self) -> int:
        return len(self._modules)

    def append(self, name: str, module: Module) -> None:
        setattr(self, name, module)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self._modules.values():
            x = layer(x)
        return x

    def profile(self, in_shape, rows=None, prefix=""):
        shape = in_shape
        for name, layer in self._modules.items():
            shape = layer.profile(shape, rows, _join(prefix, name))
        return shape


# -- leaf layers ----------------------------------------------------------------


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0, groups=1, bias=False, rng=None):
        super().__init__()
        if in_ch % groups or out_ch % groups:
            raise ConfigError(f"Conv2d: groups={groups} must divide {in_ch} and {out_ch}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel_size, self.stride, self.padding, self.groups = kernel_size, stride, padding, groups
        fan_in = in_ch // groups * kernel_size * kernel_size
        self.weight = Parameter(he_uniform(rng, (out_ch, in_ch // groups, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_ch, dtype=default_dtype())) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def _profile(self, in_shape):
        b, c, h, w = in_shape
        if c != self.in_ch:
            raise DimensionError(f"Conv2d expects {self.in_ch} channels, got {c}")
        k = self.kernel_size
        ho = ops.conv_output_size(h, k, self.stride, self.padding)
        wo = ops.conv_output_size(w, k, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise DimensionError(f"Conv2d: input {h}x{w} too small for kernel {k}")
        macs = self.out_ch * (self.in_ch // self.groups) * k * k * ho * wo
        return (b, self.out_ch, ho, wo), macs


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(he_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features, dtype=default_dtype())) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)

    def _profile(self, in_shape):
        if in_shape[-1] != self.in_features:
            raise DimensionError(f"Linear expects {self.in_features} features, got {in_shape[-1]}")
        return (in_shape[0], self.out_features), self.in_features * self.out_features


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        dtype = default_dtype()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        return ops.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )

    def _profile(self, in_shape):
        if in_shape[1] != self.channels:
            raise DimensionError(f"BatchNorm2d expects {self.channels} channels, got {in_shape[1]}")
        return in_shape, 0


class _Elementwise(Module):
    fn = None

    def forward(self, x):
        return type(self).fn(x)

    def _profile(self, in_shape):
        return in_shape, 0


class ReLU(_Elementwise):
    fn = staticmethod(ops.relu)


class ReLU6(_Elementwise):
    fn = staticmethod(ops.relu6)


class SiLU(_Elementwise):
    fn = staticmethod(ops.silu)


class Sigmoid(_Elementwise):
    fn = staticmethod(ops.sigmoid)


class Identity(_Elementwise):
    fn = staticmethod(lambda x: x)


class MaxPool2d(Module):
    def __init__(self, kernel_size, stride=None, padding=0):
        super().__init__()
        self.kernel_size, self.stride, self.padding = kernel_size, stride or kernel_size, padding

    def forward(self, x):
        return ops.maxpool2d(x, self.kernel_size, self.stride, self.padding)

    def _profile(self, in_shape):
        b, c, h, w = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        return (b, c, ops.conv_output_size(h, k, s, p), ops.conv_output_size(w, k, s, p)), 0


class AvgPool2d(MaxPool2d):
    def forward(self, x):
        return ops.avgpool2d(x, self.kernel_size, self.stride, self.padding)


class GlobalAvgPool(Module):
    def forward(self, x):
        return ops.global_avg_pool(x)

    def _profile(self, in_shape):
        return in_shape[:2], 0


class Flatten(Module):
    def forward(self, x):
        return ops.flatten(x)

    def _profile(self, in_shape):
        return (in_shape[0], int(np.prod(in_shape[1:]))), 0


def conv_bn_act(in_ch, out_ch, kernel_size, stride=1, groups=1, act=ReLU, rng=None) -> Sequential:
    layers = [
        ("conv", Conv2d(in_ch, out_ch, kernel_size, stride, kernel_size // 2, groups, rng=rng)),
        ("bn", BatchNorm2d(out_ch)),
    ]
    if act is not None:
        layers.append(("act", act()))
    return Sequential(*layers)


# -- involution -------------------------------------------------------------------


@dataclass(frozen=True)
class InvolutionSpec:
    channels: int
    kernel_size: int = 7
    stride: int = 1
    groups: int = 1
    reduction: int = 2

    def __post_init__(self):
        c, r, g, k = self.channels, self.reduction, self.groups, self.kernel_size
        if r < 1 or g < 1 or c % r or c % g:
            raise ConfigError(f"involution: channels={c} must be divisible by reduction={r} and groups={g}")
        if k % 2 == 0 or k < 1:
            raise ConfigError(f"involution: kernel size must be odd, got {k}")

    def param_count(self) -> int:
        hidden = self.channels // self.reduction
        return self.channels * hidden + hidden * self.kernel_size**2 * self.groups + 2 * hidden


class Involution(Module):
    """Spatially-varying, channel-shared kernels generated from the input itself.

    Kernel path: [avgpool if stride > 1] -> 1x1 reduce (C -> C/r) -> BN -> ReLU
    -> 1x1 span (C/r -> K*K*G), reshaped to [B, G, K*K, H', W'].
    """

    def __init__(self, spec: InvolutionSpec, rng=None):
        super().__init__()
        self.spec = spec
        hidden = spec.channels // spec.reduction
        k2g = spec.kernel_size**2 * spec.groups
        self.pool = AvgPool2d(spec.stride, spec.stride) if spec.stride > 1 else None
        self.reduce = Conv2d(spec.channels, hidden, 1, rng=rng)
        self.bn = BatchNorm2d(hidden)
        self.span = Conv2d(hidden, k2g, 1, rng=rng)

    def kernels(self, x: Tensor) -> Tensor:
        y = self.pool(x) if self.pool is not None else x
        y = self.span(ops.relu(self.bn(self.reduce(y))))
        b, _, h, w = y.shape
        s = self.spec
        return y.reshape(b, s.groups, s.kernel_size**2, h, w)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.spec.channels:
            raise DimensionError(f"Involution expects {self.spec.channels} channels, got {x.shape}")
        return ops.involution_aggregate(x, self.kernels(x), self.spec.kernel_size, self.spec.stride)

    def profile(self, in_shape, rows=None, prefix=""):
        s = self.spec
        b, c, h, w = in_shape
        if c != s.channels:
            raise DimensionError(f"Involution expects {s.channels} channels, got {c}")
        pad = (s.kernel_size - 1) // 2
        ho = ops.conv_output_size(h, s.kernel_size, s.stride, pad)
        wo = ops.conv_output_size(w, s.kernel_size, s.stride, pad)
        gen_shape = (b, c, ho, wo)
        shape = self.reduce.profile(gen_shape, rows, _join(prefix, "reduce"))
        shape = self.bn.profile(shape, rows, _join(prefix, "bn"))
        self.span.profile(shape, rows, _join(prefix, "span"))
        if rows is not None:
            rows.append(LayerRow(_join(prefix, "apply"), "InvolutionApply", tuple(in_shape), gen_shape, 0,
                                 s.kernel_size**2 * c * ho * wo))
        return gen_shape


# -- DenseNet pieces ----------------------------------------------------------------


class DenseLayer(Module):
    """Pre-activation bottleneck: BN-ReLU-1x1 conv (C->w), BN-ReLU-3x3 conv (w->k); concat."""

    def __init__(self, in_ch, growth=32, bottleneck=64, rng=None):
        super().__init__()
        self.in_ch, self.growth = in_ch, growth
        self.norm1 = BatchNorm2d(in_ch)
        self.conv1x1 = Conv2d(in_ch, bottleneck, 1, rng=rng)
        self.norm2 = BatchNorm2d(bottleneck)
        self.conv3x3 = Conv2d(bottleneck, growth, 3, padding=1, rng=rng)

    def forward(self, x):
        y = self.conv1x1(ops.relu(self.norm1(x)))
        y = self.conv3x3(ops.relu(self.norm2(y)))
        return ops.concat([x, y], axis=1)

    def profile(self, in_shape, rows=None, prefix=""):
        shape = in_shape
        for name in ("norm1", "conv1x1", "norm2", "conv3x3"):
            shape = getattr(self, name).profile(shape, rows, _join(prefix, name))
        b, c, h, w = in_shape
        return (b, c + shape[1], h, w)


class DenseBlock(Sequential):
    def __init__(self, num_layers, in_ch, growth=32, bottleneck=64, rng=None):
        layers = [
            (f"layer{i + 1}", DenseLayer(in_ch + i * growth, growth, bottleneck, rng=rng)) for i in range(num_layers)
        ]
        super().__init__(*layers)
        self.out_ch = in_ch + num_layers * growth


class Transition(Sequential):
    """BN -> ReLU -> 1x1 conv -> 2x2 average pool."""

    def __init__(self, in_ch, out_ch, rng=None):
        super().__init__(
            ("norm", BatchNorm2d(in_ch)),
            ("relu", ReLU()),
            ("conv1x1", Conv2d(in_ch, out_ch, 1, rng=rng)),
            ("pool", AvgPool2d(2, 2)),
        )

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise DimensionError(f"Transition needs even spatial extent, got {x.shape[2:]}")
        return super().forward(x)


# -- residual / mobile blocks -----------------------------------------------------------


class Bottleneck(Module):
    """ResNet bottleneck (1x1, 3x3 with stride, 1x1 x expansion) with projection shortcut when needed."""

    def __init__(self, in_ch, width, stride=1, expansion=4, rng=None):
        super().__init__()
        out_ch = width * expansion
        self.conv1 = conv_bn_act(in_ch, width, 1, rng=rng)
        self.conv2 = conv_bn_act(width, width, 3, stride, rng=rng)
        self.conv3 = conv_bn_act(width, out_ch, 1, act=None, rng=rng)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = Sequential(
                ("conv", Conv2d(in_ch, out_ch, 1, stride, rng=rng)), ("bn", BatchNorm2d(out_ch))
            )

    def forward(self, x):
        y = self.conv3(self.conv2(self.conv1(x)))
        shortcut = self.downsample(x) if self.downsample is not None else x
        return ops.relu(y + shortcut)

    def profile(self, in_shape, rows=None, prefix=""):
        shape = in_shape
        for name in ("conv1", "conv2", "conv3"):
            shape = getattr(self, name).profile(shape, rows, _join(prefix, name))
        if self.downsample is not None:
            self.downsample.profile(in_shape, rows, _join(prefix, "downsample"))
        return shape


class InvertedResidual(Module):
    """MobileNetV2 block: expand 1x1 -> depthwise 3x3 -> linear 1x1 projection."""

    def __init__(self, in_ch, out_ch, stride, expansion, rng=None):
        super().__init__()
        hidden = in_ch * expansion
        self.use_residual = stride == 1 and in_ch == out_ch
        self.expand = conv_bn_act(in_ch, hidden, 1, act=ReLU6, rng=rng) if expansion != 1 else None
        self.depthwise = conv_bn_act(hidden, hidden, 3, stride, groups=hidden, act=ReLU6, rng=rng)
        self.project = conv_bn_act(hidden, out_ch, 1, act=None, rng=rng)

    def forward(self, x):
        y = self.expand(x) if self.expand is not None else x
        y = self.project(self.depthwise(y))
        return y + x if self.use_residual else y

    def profile(self, in_shape, rows=None, prefix=""):
        shape = in_shape
        for name in ("expand", "depthwise", "project"):
            layer = getattr(self, name)
            if layer is not None:
                shape = layer.profile(shape, rows, _join(prefix, name))
        return shape


class SqueezeExcite(Module):
    def __init__(self, channels, squeeze, rng=None):
        super().__init__()
        self.reduce = Linear(channels, squeeze, rng=rng)
        self.expand = Linear(squeeze, channels, rng=rng)

    def forward(self, x):
        s = ops.global_avg_pool(x)
        s = ops.sigmoid(self.expand(ops.silu(self.reduce(s))))
        return ops.channel_scale(x, s)

    def profile(self, in_shape, rows=None, prefix=""):
        shape = self.reduce.profile(in_shape[:2], rows, _join(prefix, "reduce"))
        self.expand.profile(shape, rows, _join(prefix, "expand"))
        return in_shape


class MBConv(Module):
    """EfficientNet mobile inverted bottleneck with squeeze-and-excitation."""

    def __init__(self, in_ch, out_ch, kernel_size, stride, expansion, se_ratio=0.25, rng=None):
        super().__init__()
        hidden = in_ch * expansion
        self.use_residual = stride == 1 and in_ch == out_ch
        self.expand = conv_bn_act(in_ch, hidden, 1, act=SiLU, rng=rng) if expansion != 1 else None
        self.depthwise = conv_bn_act(hidden, hidden, kernel_size, stride, groups=hidden, act=SiLU, rng=rng)
        self.se = SqueezeExcite(hidden, max(1, int(in_ch * se_ratio)), rng=rng)
        self.project = conv_bn_act(hidden, out_ch, 1, act=None, rng=rng)

    def forward(self, x):
        y = self.expand(x) if self.expand is not None else x
        y = self.project(self.se(self.depthwise(y)))
        return y + x if self.use_residual else y

    def profile(self, in_shape, rows=None, prefix=""):
        shape = in_shape
        for name in ("expand", "depthwise", "se", "project"):
            layer = getattr(self, name)
            if layer is not None:
                shape = layer.profile(shape, rows, _join(prefix, name))
        return shape
