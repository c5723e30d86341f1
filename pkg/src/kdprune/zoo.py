"""Teacher, student and hybrid involution-DenseNet constructions.

Every model is a :class:`ModelGraph`: a ``features`` trunk that ends in a
flat [B, F] representation and a final linear ``head``. Pruning excludes
``head.*`` by name, so the classifier must always live there.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .errors import ConfigError, DimensionError
from .tensor import Tensor, no_grad

TEACHERS = ("vgg16", "resnet50", "densenet169", "mobilenetv2", "efficientnet_b0")
STUDENTS = (
    "vgg16_student",
    "resnet50_student",
    "densenet_student",
    "mobilenetv2_student",
    "efficientnet_b0_student",
    "hybrid_densenet",
)
ARCHITECTURES = TEACHERS + STUDENTS


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    num_classes: int
    input_size: int = 224
    hybrid_involution_count: int = 3

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}; expected one of {', '.join(ARCHITECTURES)}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if self.input_size < 32 or self.input_size % 32:
            raise ConfigError(f"input_size must be >= 32 and divisible by 32, got {self.input_size}")
        if self.hybrid_involution_count not in (1, 2, 3):
            raise ConfigError(f"hybrid_involution_count must be 1, 2 or 3, got {self.hybrid_involution_count}")

    def to_dict(self) -> dict:
        return asdict(self)


class ModelGraph(nn.Module):
    def __init__(self, spec: ModelSpec, features: nn.Sequential, head: nn.Linear):
        super().__init__()
        object.__setattr__(self, "spec", spec)
        self.features = features
        self.head = head

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec.input_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise DimensionError(f"{self.spec.arch} expects input [B, 3, {s}, {s}], got {x.shape}")
        return self.head(self.features(x))

    def profile(self, in_shape=None, rows=None, prefix=""):
        if in_shape is None:
            in_shape = (1, 3, self.spec.input_size, self.spec.input_size)
        shape = self.features.profile(in_shape, rows, _join(prefix, "features"))
        return self.head.profile(shape, rows, _join(prefix, "head"))


def _join(prefix, name):
    return f"{prefix}.{name}" if prefix else name


def forward_classify(model: ModelGraph, batch, mode: str = "eval") -> Tensor:
    """Logits for a [B, 3, S, S] batch; eval mode runs without recording a graph."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch))
    if mode == "eval":
        model.eval()
        with no_grad():
            return model(x)
    model.train()
    return model(x)


# -- teachers --------------------------------------------------------------------------

_VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")


def _vgg16(spec, rng):
    layers, c, stage, idx = [], 3, 1, 1
    for v in _VGG16_CFG:
        if v == "M":
            layers.append((f"pool{stage}", nn.MaxPool2d(2, 2)))
            stage, idx = stage + 1, 1
            continue
        layers.append((f"conv{stage}_{idx}", nn.Conv2d(c, v, 3, padding=1, bias=True, rng=rng)))
        layers.append((f"relu{stage}_{idx}", nn.ReLU()))
        c, idx = v, idx + 1
    side = spec.input_size // 32
    layers += [
        ("flatten", nn.Flatten()),
        ("fc1", nn.Linear(512 * side * side, 4096, rng=rng)),
        ("relu_fc1", nn.ReLU()),
        ("fc2", nn.Linear(4096, 4096, rng=rng)),
        ("relu_fc2", nn.ReLU()),
    ]
    return nn.Sequential(*layers), nn.Linear(4096, spec.num_classes, rng=rng)


def _resnet(spec, rng, blocks, widths, stem):
    layers = [
        ("stem", nn.conv_bn_act(3, stem, 7, 2, rng=rng)),
        ("maxpool", nn.MaxPool2d(3, 2, 1)),
    ]
    c = stem
    for i, (n, w) in enumerate(zip(blocks, widths)):
        stage = []
        for j in range(n):
            stride = 2 if (j == 0 and i > 0) else 1
            stage.append((f"block{j + 1}", nn.Bottleneck(c, w, stride, rng=rng)))
            c = w * 4
        layers.append((f"stage{i + 1}", nn.Sequential(*stage)))
    layers.append(("gap", nn.GlobalAvgPool()))
    return nn.Sequential(*layers), nn.Linear(c, spec.num_classes, rng=rng)


def _densenet169(spec, rng):
    growth, bottleneck = 32, 128
    layers = [
        ("stem", nn.conv_bn_act(3, 64, 7, 2, rng=rng)),
        ("maxpool", nn.MaxPool2d(3, 2, 1)),
    ]
    c = 64
    config = (6, 12, 32, 32)
    for i, n in enumerate(config):
        block = nn.DenseBlock(n, c, growth, bottleneck, rng=rng)
        layers.append((f"block{i + 1}", block))
        c = block.out_ch
        if i < len(config) - 1:
            layers.append((f"transition{i + 1}", nn.Transition(c, c // 2, rng=rng)))
            c //= 2
    layers += [("norm", nn.BatchNorm2d(c)), ("relu", nn.ReLU()), ("gap", nn.GlobalAvgPool())]
    return nn.Sequential(*layers), nn.Linear(c, spec.num_classes, rng=rng)


_MOBILENETV2_CFG = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))


def _mobilenetv2(spec, rng):
    layers = [("stem", nn.conv_bn_act(3, 32, 3, 2, act=nn.ReLU6, rng=rng))]
    c, idx = 32, 1
    for t, out, n, s in _MOBILENETV2_CFG:
        for j in range(n):
            layers.append((f"ir{idx}", nn.InvertedResidual(c, out, s if j == 0 else 1, t, rng=rng)))
            c, idx = out, idx + 1
    layers += [("last", nn.conv_bn_act(c, 1280, 1, act=nn.ReLU6, rng=rng)), ("gap", nn.GlobalAvgPool())]
    return nn.Sequential(*layers), nn.Linear(1280, spec.num_classes, rng=rng)


# (expansion, kernel, stride, out channels, repeats)
_EFFICIENTNET_B0_CFG = (
    (1, 3, 1, 16, 1),
    (6, 3, 2, 24, 2),
    (6, 5, 2, 40, 2),
    (6, 3, 2, 80, 3),
    (6, 5, 1, 112, 3),
    (6, 5, 2, 192, 4),
    (6, 3, 1, 320, 1),
)


def _efficientnet_b0(spec, rng):
    layers = [("stem", nn.conv_bn_act(3, 32, 3, 2, act=nn.SiLU, rng=rng))]
    c, idx = 32, 1
    for t, k, s, out, n in _EFFICIENTNET_B0_CFG:
        for j in range(n):
            layers.append((f"mb{idx}", nn.MBConv(c, out, k, s if j == 0 else 1, t, rng=rng)))
            c, idx = out, idx + 1
    layers += [("last", nn.conv_bn_act(c, 1280, 1, act=nn.SiLU, rng=rng)), ("gap", nn.GlobalAvgPool())]
    return nn.Sequential(*layers), nn.Linear(1280, spec.num_classes, rng=rng)


# -- students ---------------------------------------------------------------------------


def _vgg16_student(spec, rng):
    layers, c = [], 3
    for stage, width in enumerate((16, 32, 64), start=1):
        for i in (1, 2):
            layers.append((f"conv{stage}_{i}", nn.conv_bn_act(c, width, 3, rng=rng)))
            c = width
        layers.append((f"pool{stage}", nn.MaxPool2d(2, 2)))
    side = spec.input_size // 8
    layers += [("flatten", nn.Flatten()), ("fc1", nn.Linear(c * side * side, 512, rng=rng)), ("relu_fc1", nn.ReLU())]
    return nn.Sequential(*layers), nn.Linear(512, spec.num_classes, rng=rng)


def _densenet_trunk(spec, rng, involution_after: set[int]):
    growth, bottleneck, trunk = 32, 64, 16
    layers = [
        ("stem", nn.conv_bn_act(3, trunk, 7, 2, rng=rng)),
        ("maxpool", nn.MaxPool2d(3, 2, 1)),
    ]
    c = trunk
    for i, n in enumerate((3, 4, 5), start=1):
        block = nn.DenseBlock(n, c, growth, bottleneck, rng=rng)
        layers.append((f"block{i}", block))
        c = block.out_ch
        if i in involution_after:
            layers.append((f"involution{i}", nn.Involution(nn.InvolutionSpec(c, 7, 1, 1, 2), rng=rng)))
        layers.append((f"transition{i}", nn.Transition(c, trunk, rng=rng)))
        c = trunk
    layers.append(("gap", nn.GlobalAvgPool()))
    return nn.Sequential(*layers), nn.Linear(c, spec.num_classes, rng=rng)


def _densenet_student(spec, rng):
    return _densenet_trunk(spec, rng, set())


def _hybrid_densenet(spec, rng):
    n = spec.hybrid_involution_count
    return _densenet_trunk(spec, rng, set(range(4 - n, 4)))


def _resnet50_student(spec, rng):
    return _resnet(spec, rng, (2, 2, 4, 2), (32, 64, 128, 256), stem=32)


def _mobilenetv2_student(spec, rng):
    layers = [("stem", nn.conv_bn_act(3, 32, 3, 2, act=nn.ReLU6, rng=rng))]
    c = 32
    for i, (out, s) in enumerate(zip((16, 24, 32, 64), (1, 2, 2, 2)), start=1):
        layers.append((f"ir{i}", nn.InvertedResidual(c, out, s, 6, rng=rng)))
        c = out
    layers += [("last", nn.conv_bn_act(c, 128, 1, act=nn.ReLU6, rng=rng)), ("gap", nn.GlobalAvgPool())]
    return nn.Sequential(*layers), nn.Linear(128, spec.num_classes, rng=rng)


def _efficientnet_b0_student(spec, rng):
    layers, c = [], 3
    for stage, width in enumerate((16, 64, 128, 256), start=1):
        for i in (1, 2):
            layers.append((f"conv{stage}_{i}", nn.conv_bn_act(c, width, 3, act=nn.SiLU, rng=rng)))
            c = width
        layers.append((f"pool{stage}", nn.MaxPool2d(2, 2)))
    layers.append(("gap", nn.GlobalAvgPool()))
    return nn.Sequential(*layers), nn.Linear(c, spec.num_classes, rng=rng)


_BUILDERS = {
    "vgg16": _vgg16,
    "resnet50": lambda spec, rng: _resnet(spec, rng, (3, 4, 6, 3), (64, 128, 256, 512), stem=64),
    "densenet169": _densenet169,
    "mobilenetv2": _mobilenetv2,
    "efficientnet_b0": _efficientnet_b0,
    "vgg16_student": _vgg16_student,
    "resnet50_student": _resnet50_student,
    "densenet_student": _densenet_student,
    "mobilenetv2_student": _mobilenetv2_student,
    "efficientnet_b0_student": _efficientnet_b0_student,
    "hybrid_densenet": _hybrid_densenet,
}


def build_model(spec: ModelSpec, seed: int = 0) -> ModelGraph:
    """Deterministically build and initialise the architecture described by ``spec``."""
    if isinstance(spec, dict):
        spec = ModelSpec(**spec)
    rng = np.random.default_rng(seed)
    features, head = _BUILDERS[spec.arch](spec, rng)
    return ModelGraph(spec, features, head)
