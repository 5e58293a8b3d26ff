"""ResNet networks with a per-layer activation-compression policy.

Layer names follow the dotted scheme of the common torchvision models
(``conv1``, ``layer2.0.conv1``, ``layer2.0.downsample.0``, ``fc``), so memory
and sensitivity reports line up with published per-layer tables.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from cabp.autodiff import add
from cabp.nn import functional as F
from cabp.nn.kernels import Conv2dSpec, SavePolicy
from cabp.tensor import DTYPES, AllocCategory, Tensor

__all__ = [
    "CompressionPolicy",
    "ResNetConfig",
    "Module",
    "Conv2d",
    "BatchNorm2d",
    "Linear",
    "BasicBlock",
    "ResNet",
    "build_resnet18",
    "build_resnet_cifar",
    "build_network",
    "ARCHITECTURES",
    "STEM_NAME",
]

STEM_NAME = "conv1"


@dataclass(frozen=True)
class CompressionPolicy:
    """Which conv layers store pooled inputs, and with what kernel.

    ``k`` is the default kernel (``None`` = no compression).  ``exempt`` and
    ``overrides`` match layer names with shell-style patterns; the first
    matching override wins.  The stem conv is always exempt, and batch-norm
    and linear layers never consult the policy at all.
    """

    k: tuple[int, int] | None = None
    exempt: tuple[str, ...] = ()
    overrides: tuple[tuple[str, tuple[int, int] | None], ...] = ()

    @classmethod
    def uniform(cls, kh: int, kw: int | None = None, **kw_) -> "CompressionPolicy":
        return cls(k=(kh, kh if kw is None else kw), **kw_)

    def resolve(self, layer_name: str) -> SavePolicy:
        if layer_name == STEM_NAME or any(fnmatch.fnmatchcase(layer_name, p) for p in self.exempt):
            return SavePolicy.full()
        for pattern, k in self.overrides:
            if fnmatch.fnmatchcase(layer_name, pattern):
                return SavePolicy(k)
        return SavePolicy(self.k)

    def describe(self) -> str:
        base = "off" if self.k is None else f"{self.k[0]}x{self.k[1]}"
        parts = [base]
        if self.exempt:
            parts.append("exempt=" + ",".join(self.exempt))
        if self.overrides:
            parts.append("overrides=" + ",".join(
                f"{p}:{'off' if k is None else f'{k[0]}x{k[1]}'}" for p, k in self.overrides))
        return ";".join(parts)


@dataclass(frozen=True)
class ResNetConfig:
    widths: tuple[int, ...] = (64, 128, 256, 512)
    blocks: tuple[int, ...] = (2, 2, 2, 2)
    input_resolution: tuple[int, int] = (224, 224)
    in_channels: int = 3
    num_classes: int = 1000
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_maxpool: bool = True
    zero_init_residual: bool = False
    dtype: str = "f32"
    policy: CompressionPolicy = field(default_factory=CompressionPolicy)

    def __post_init__(self):
        if not self.widths or len(self.widths) != len(self.blocks):
            raise ValueError("widths and blocks must be non-empty and of equal length")
        if any(b < 1 for b in self.blocks):
            raise ValueError(f"every stage needs at least one block, got {self.blocks}")
        if any(b != 2 * a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError(f"stage widths must double, got {self.widths}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")


# -- modules -------------------------------------------------------------
class Module:
    training = True

    def children(self) -> Iterator["Module"]:
        return iter(())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for child in self.children():
            yield from child.named_parameters()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for child in self.children():
            yield from child.named_buffers()

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p.data for name, p in self.named_parameters()}
        own.update(dict(self.named_buffers()))
        if set(own) != set(state):
            missing, extra = sorted(set(own) - set(state)), sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:3]} unexpected={extra[:3]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, AllocCategory.PARAMETER, requires_grad=True, name=name)


class Conv2d(Module):
    def __init__(self, name: str, spec: Conv2dSpec, rng: np.random.Generator | None, dtype: str = "f32"):
        self.name = name
        self.spec = spec
        self.policy = SavePolicy.full()
        self.weight = self.bias = None
        if rng is not None:
            fan_out = spec.out_channels * spec.kernel[0] * spec.kernel[1]
            w = rng.standard_normal(spec.weight_shape) * np.sqrt(2.0 / fan_out)
            self.weight = _param(w.astype(DTYPES[dtype]), f"{name}.weight")
            if spec.has_bias:
                self.bias = _param(np.zeros(spec.out_channels, DTYPES[dtype]), f"{name}.bias")

    def named_parameters(self):
        if self.weight is not None:
            yield self.weight.name, self.weight
        if self.bias is not None:
            yield self.bias.name, self.bias

    def output_shape(self, shape):
        n, c, h, w = shape
        if c != self.spec.in_channels:
            raise ValueError(f"{self.name}: expected {self.spec.in_channels} input channels, got {c}")
        return (n, self.spec.out_channels, *self.spec.output_hw(h, w))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.spec, self.policy, label=self.name)


class BatchNorm2d(Module):
    def __init__(self, name: str, channels: int, rng, dtype: str = "f32", zero_gamma: bool = False,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.name = name
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.weight = self.bias = None
        self.running_mean = self.running_var = None
        if rng is not None:
            dt = DTYPES[dtype]
            gamma = np.zeros(channels, dt) if zero_gamma else np.ones(channels, dt)
            self.weight = _param(gamma, f"{name}.weight")
            self.bias = _param(np.zeros(channels, dt), f"{name}.bias")
            self.running_mean = np.zeros(channels, dt)
            self.running_var = np.ones(channels, dt)

    def named_parameters(self):
        if self.weight is not None:
            yield self.weight.name, self.weight
            yield self.bias.name, self.bias

    def named_buffers(self):
        if self.running_mean is not None:
            yield f"{self.name}.running_mean", self.running_mean
            yield f"{self.name}.running_var", self.running_var

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                              training=self.training, momentum=self.momentum, eps=self.eps, label=self.name)


class Linear(Module):
    def __init__(self, name: str, in_features: int, out_features: int, rng, dtype: str = "f32"):
        self.name = name
        self.in_features, self.out_features = in_features, out_features
        self.weight = self.bias = None
        if rng is not None:
            bound = 1.0 / np.sqrt(in_features)
            dt = DTYPES[dtype]
            self.weight = _param(rng.uniform(-bound, bound, (out_features, in_features)).astype(dt),
                                 f"{name}.weight")
            self.bias = _param(rng.uniform(-bound, bound, out_features).astype(dt), f"{name}.bias")

    def named_parameters(self):
        if self.weight is not None:
            yield self.weight.name, self.weight
            yield self.bias.name, self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias, label=self.name)


class BasicBlock(Module):
    """conv3x3-bn-relu-conv3x3-bn, plus identity or 1x1-conv+bn skip, then relu."""

    def __init__(self, name: str, in_ch: int, out_ch: int, stride: int, rng, dtype: str,
                 zero_init_residual: bool = False):
        self.name = name
        self.conv1 = Conv2d(f"{name}.conv1", Conv2dSpec(in_ch, out_ch, 3, stride, 1), rng, dtype)
        self.bn1 = BatchNorm2d(f"{name}.bn1", out_ch, rng, dtype)
        self.conv2 = Conv2d(f"{name}.conv2", Conv2dSpec(out_ch, out_ch, 3, 1, 1), rng, dtype)
        self.bn2 = BatchNorm2d(f"{name}.bn2", out_ch, rng, dtype, zero_gamma=zero_init_residual)
        self.downsample: tuple[Conv2d, BatchNorm2d] | None = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = (
                Conv2d(f"{name}.downsample.0", Conv2dSpec(in_ch, out_ch, 1, stride, 0), rng, dtype),
                BatchNorm2d(f"{name}.downsample.1", out_ch, rng, dtype),
            )

    def children(self):
        yield from (self.conv1, self.bn1, self.conv2, self.bn2)
        if self.downsample is not None:
            yield from self.downsample

    def output_shape(self, shape):
        main = self.conv2.output_shape(self.conv1.output_shape(shape))
        skip = self.downsample[0].output_shape(shape) if self.downsample else tuple(shape)
        if tuple(main) != tuple(skip):
            raise ValueError(f"{self.name}: residual operands disagree, {main} vs {skip}")
        return main

    def conv_inputs(self, shape) -> Iterator[tuple[Conv2d, tuple]]:
        yield self.conv1, tuple(shape)
        yield self.conv2, self.conv1.output_shape(shape)
        if self.downsample is not None:
            yield self.downsample[0], tuple(shape)

    def __call__(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)), label=f"{self.name}.relu1")
        out = self.bn2(self.conv2(out))
        skip = x
        if self.downsample is not None:
            conv, bn = self.downsample
            skip = bn(conv(x))
        return F.relu(add(out, skip, label=f"{self.name}.add"), label=f"{self.name}.relu2")


class ResNet(Module):
    def __init__(self, config: ResNetConfig, seed: int | None = 0, materialize: bool = True):
        self.config = config
        rng = np.random.default_rng(seed) if materialize else None
        dt = config.dtype
        w0 = config.widths[0]
        k, s = config.stem_kernel, config.stem_stride
        self.conv1 = Conv2d(STEM_NAME, Conv2dSpec(config.in_channels, w0, k, s, k // 2), rng, dt)
        self.bn1 = BatchNorm2d("bn1", w0, rng, dt)
        self.stages: list[list[BasicBlock]] = []
        in_ch = w0
        for i, (width, n_blocks) in enumerate(zip(config.widths, config.blocks)):
            stage = []
            for j in range(n_blocks):
                stride = 2 if (i > 0 and j == 0) else 1
                stage.append(BasicBlock(f"layer{i + 1}.{j}", in_ch, width, stride, rng, dt,
                                        config.zero_init_residual))
                in_ch = width
            self.stages.append(stage)
        self.fc = Linear("fc", in_ch, config.num_classes, rng, dt)
        self.apply_policy(config.policy)
        self.output_shape((1, config.in_channels, *config.input_resolution))

    def children(self):
        yield self.conv1
        yield self.bn1
        for stage in self.stages:
            yield from stage
        yield self.fc

    def conv_layers(self) -> list[Conv2d]:
        return [m for m in self.modules() if isinstance(m, Conv2d)]

    def apply_policy(self, policy: CompressionPolicy) -> None:
        self.policy = policy
        for conv in self.conv_layers():
            conv.policy = policy.resolve(conv.name)

    def _stem_out(self, shape):
        n, c, h, w = self.conv1.output_shape(shape)
        if self.config.stem_maxpool:
            h, w = (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1
        return (n, c, h, w)

    def output_shape(self, shape):
        shape = self._stem_out(shape)
        for stage in self.stages:
            for block in stage:
                shape = block.output_shape(shape)
        return (shape[0], self.config.num_classes)

    def conv_input_shapes(self, shape) -> list[tuple[Conv2d, tuple]]:
        """Shape inference: every conv layer with the NCHW shape it consumes."""
        out = [(self.conv1, tuple(shape))]
        shape = self._stem_out(shape)
        for stage in self.stages:
            for block in stage:
                out.extend(block.conv_inputs(shape))
                shape = block.output_shape(shape)
        return out

    def __call__(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)), label="relu")
        if self.config.stem_maxpool:
            out = F.max_pool2d(out, 3, 2, 1, label="maxpool")
        for stage in self.stages:
            for block in stage:
                out = block(out)
        return self.fc(F.global_avg_pool(out, label="avgpool"))


# -- builders ------------------------------------------------------------
def build_resnet18(config: ResNetConfig | None = None, seed: int | None = 0,
                   materialize: bool = True) -> ResNet:
    config = config or ResNetConfig()
    if tuple(config.blocks) != (2, 2, 2, 2):
        raise ValueError(f"ResNet-18 has (2, 2, 2, 2) blocks per stage, got {config.blocks}")
    return ResNet(config, seed, materialize)


_CIFAR_DEPTHS = {
    8: dict(widths=(16, 32, 64), blocks=(1, 1, 1)),
    18: dict(widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2)),
}


def build_resnet_cifar(depth: int, config: ResNetConfig | None = None, seed: int | None = 0,
                       materialize: bool = True) -> ResNet:
    """32x32 variants: 3x3 stride-1 stem without max pool, 10 classes by default."""
    if depth not in _CIFAR_DEPTHS:
        raise ValueError(f"unsupported CIFAR ResNet depth {depth}; choose from {sorted(_CIFAR_DEPTHS)}")
    base = config or ResNetConfig(input_resolution=(32, 32), num_classes=10)
    cfg = replace(base, stem_kernel=3, stem_stride=1, stem_maxpool=False, **_CIFAR_DEPTHS[depth])
    return ResNet(cfg, seed, materialize)


ARCHITECTURES = ("resnet18", "resnet18c", "resnet8c")


def build_network(arch: str, *, policy: CompressionPolicy | None = None, seed: int | None = 0,
                  num_classes: int | None = None, resolution: tuple[int, int] | None = None,
                  in_channels: int = 3, dtype: str = "f32", materialize: bool = True,
                  zero_init_residual: bool = False) -> ResNet:
    policy = policy or CompressionPolicy()
    if arch == "resnet18":
        cfg = ResNetConfig(input_resolution=resolution or (224, 224), num_classes=num_classes or 1000,
                           in_channels=in_channels, dtype=dtype, policy=policy,
                           zero_init_residual=zero_init_residual)
        return build_resnet18(cfg, seed, materialize)
    if arch in ("resnet18c", "resnet8c"):
        cfg = ResNetConfig(input_resolution=resolution or (32, 32), num_classes=num_classes or 10,
                           in_channels=in_channels, dtype=dtype, policy=policy,
                           zero_init_residual=zero_init_residual)
        return build_resnet_cifar(18 if arch == "resnet18c" else 8, cfg, seed, materialize)
    raise ValueError(f"unknown architecture '{arch}'; choose from {', '.join(ARCHITECTURES)}")
