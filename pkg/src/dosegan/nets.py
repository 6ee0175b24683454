"""Coarse generator, refiner, patch discriminator and fixed feature extractor."""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import ops
from .ops import BatchNormState
from .rng import Rng
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid network or training configuration."""


@dataclass(frozen=True)
class NetConfig:
    input_channels: int = 1
    base_channels: int = 16
    encoder_depth: int = 5
    num_classes: int = 5
    refiner_blocks: int = 2
    refiner_channels: int = 16
    disc_layers: int = 3
    class_hidden: int = 64
    feature_channels: tuple[int, ...] = (8, 16, 32)
    feature_layer_indices: tuple[int, ...] = (0, 1, 2)
    volume_extent: int = 32
    leaky_slope: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "feature_channels", tuple(self.feature_channels))
        object.__setattr__(self, "feature_layer_indices", tuple(self.feature_layer_indices))

    def validate(self) -> "NetConfig":
        if self.encoder_depth != 5:
            raise ConfigError("encoder_depth is fixed at 5")
        if self.refiner_blocks != 2:
            raise ConfigError("refiner_blocks is fixed at 2")
        if self.volume_extent <= 0 or self.volume_extent % 32:
            raise ConfigError(f"volume_extent must be a positive multiple of 32, got {self.volume_extent}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("input_channels", "base_channels", "refiner_channels", "class_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 1 <= self.disc_layers <= 5:
            raise ConfigError(f"disc_layers must be in [1, 5], got {self.disc_layers}")
        if not self.feature_channels or min(self.feature_channels) < 1:
            raise ConfigError("feature_channels must be a non-empty list of positive widths")
        idx = self.feature_layer_indices
        if not idx:
            raise ConfigError("feature_layer_indices must be non-empty")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigError("feature_layer_indices must be strictly increasing")
        if idx[0] < 0 or idx[-1] >= len(self.feature_channels):
            raise ConfigError(f"feature index beyond the {len(self.feature_channels)}-stage extractor")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_channels"] = list(self.feature_channels)
        d["feature_layer_indices"] = list(self.feature_layer_indices)
        return d


def encoder_widths(config: NetConfig) -> list[int]:
    b = config.base_channels
    return [min(b * 2**i, b * 16) for i in range(config.encoder_depth)]


# He-uniform bound sqrt(6 / fan_in), for layers feeding a ReLU with no batch norm in between
HE_GAIN = float(np.sqrt(6.0))


def _uniform(rng: Rng, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


class Module:
    """Named parameters plus batch-norm running statistics."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._norms: dict[str, BatchNormState] = {}

    def add_param(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        t = Tensor(data, requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def add_conv(self, name: str, rng: Rng, cout: int, cin: int, k: int = 3, gain: float = 1.0) -> None:
        fan_in = cin * k**3
        self.add_param(f"{name}.weight", _uniform(rng.split(f"{name}.weight"), (cout, cin, k, k, k), fan_in, gain))
        self.add_param(f"{name}.bias", _uniform(rng.split(f"{name}.bias"), (cout,), fan_in))

    def add_conv_transpose(self, name: str, rng: Rng, cin: int, cout: int, k: int = 3) -> None:
        fan_in = cin * k**3
        self.add_param(f"{name}.weight", _uniform(rng.split(f"{name}.weight"), (cin, cout, k, k, k), fan_in))
        self.add_param(f"{name}.bias", _uniform(rng.split(f"{name}.bias"), (cout,), fan_in))

    def add_linear(self, name: str, rng: Rng, fout: int, fin: int, gain: float = 1.0) -> None:
        self.add_param(f"{name}.weight", _uniform(rng.split(f"{name}.weight"), (fout, fin), fin, gain))
        self.add_param(f"{name}.bias", _uniform(rng.split(f"{name}.bias"), (fout,), fin))

    def add_norm(self, name: str, channels: int) -> None:
        self.add_param(f"{name}.gamma", np.ones(channels, dtype=np.float32))
        self.add_param(f"{name}.beta", np.zeros(channels, dtype=np.float32))
        self._norms[name] = BatchNormState.fresh(channels)

    def p(self, name: str) -> Tensor:
        return self._params[name]

    def conv(self, name: str, x: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
        return ops.conv3d(x, self._params[f"{name}.weight"], self._params[f"{name}.bias"], stride, padding)

    def norm(self, name: str, x: Tensor, training: bool, config: NetConfig) -> Tensor:
        return ops.batch_norm3d(
            x, self._params[f"{name}.gamma"], self._params[f"{name}.beta"], self._norms[name],
            training, config.bn_momentum, config.bn_eps,
        )

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if v.requires_grad}

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def cast(self, dtype) -> "Module":
        """Convert parameters and running statistics in place (64-bit for gradient checks)."""
        for t in self._params.values():
            data = t.data.astype(dtype)
            data.flags.writeable = t.data.flags.writeable
            t.data = data
            t.grad = None
        for st in self._norms.values():
            st.running_mean = st.running_mean.astype(dtype)
            st.running_var = st.running_var.astype(dtype)
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics by name, in registration order."""
        out = {name: t.data for name, t in self._params.items()}
        for name, st in self._norms.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        if set(own) != set(arrays):
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            raise KeyError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, arr in arrays.items():
            if own[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {own[name].shape} vs {arr.shape}")
        for name, t in self._params.items():
            data = np.array(arrays[name], dtype=t.dtype)
            data.flags.writeable = t.data.flags.writeable
            t.data = data
        for name, st in self._norms.items():
            st.running_mean[...] = arrays[f"{name}.running_mean"]
            st.running_var[...] = arrays[f"{name}.running_var"]


@contextlib.contextmanager
def frozen(*modules: Module) -> Iterator[None]:
    """Treat the modules' parameters as constants inside the block.

    Forwards run inside the block see detached views sharing the parameter
    buffers, so graphs recorded there never reach the real parameters, even
    when backward runs after the block has exited.
    """
    saved = [dict(m._params) for m in modules]
    for m in modules:
        m._params = {k: Tensor(t.data, requires_grad=False, name=t.name) for k, t in m._params.items()}
    try:
        yield
    finally:
        for m, params in zip(modules, saved):
            m._params = params


class MLNet(Module):
    """U-Net style coarse generator with a dose-level classification head.

    Encoder blocks are LeakyReLU -> strided conv -> BN (the innermost block
    has no BN, so a 1-voxel bottleneck works at any batch size). Decoder
    blocks are ReLU -> transposed conv -> BN, each followed by concatenation
    with the encoder output at the same resolution.
    """

    def __init__(self, config: NetConfig, rng: Rng):
        super().__init__()
        self.config = config
        widths = encoder_widths(config)
        depth = config.encoder_depth
        cin = config.input_channels
        for i, c in enumerate(widths, 1):
            # the un-normalized bottleneck feeds the head; at fan-in scale its
            # output barely varies across inputs and the classifier stalls
            self.add_conv(f"enc{i}.conv", rng, c, cin, gain=HE_GAIN if i == depth else 1.0)
            if i < depth:
                self.add_norm(f"enc{i}.bn", c)
            cin = c
        dec_widths = widths[-2::-1] + [widths[0]]
        for i, c in enumerate(dec_widths, 1):
            self.add_conv_transpose(f"dec{i}.convt", rng, cin, c)
            self.add_norm(f"dec{i}.bn", c)
            cin = c + (widths[depth - 1 - i] if i < depth else 0)
        self.add_conv("out.conv", rng, config.input_channels, cin)
        bottleneck = widths[-1] * (config.volume_extent // 2**depth) ** 3
        self.add_linear("head.fc1", rng, config.class_hidden, bottleneck, gain=HE_GAIN)
        self.add_linear("head.fc2", rng, config.num_classes, config.class_hidden)

    def encoder_names(self) -> list[str]:
        return [n for n in self._params if n.startswith("enc")]

    def head_names(self) -> list[str]:
        return [n for n in self._params if n.startswith("head.")]

    def reconstruction_names(self) -> list[str]:
        return [n for n in self._params if not n.startswith("head.")]

    def __call__(self, x: Tensor, training: bool = True) -> tuple[Tensor, Tensor]:
        cfg = self.config
        e = cfg.volume_extent
        if x.ndim != 5 or x.shape[1] != cfg.input_channels or x.shape[2:] != (e, e, e):
            raise ValueError(f"expected [N,{cfg.input_channels},{e},{e},{e}] input, got {x.shape}")
        depth = cfg.encoder_depth
        skips = []
        h = x
        for i in range(1, depth + 1):
            h = ops.leaky_relu(h, cfg.leaky_slope)
            h = self.conv(f"enc{i}.conv", h, stride=2, padding=1)
            if i < depth:
                h = self.norm(f"enc{i}.bn", h, training, cfg)
            skips.append(h)
        z = ops.flatten(h)
        z = ops.relu(ops.linear(z, self.p("head.fc1.weight"), self.p("head.fc1.bias")))
        logits = ops.linear(z, self.p("head.fc2.weight"), self.p("head.fc2.bias"))
        for i in range(1, depth + 1):
            h = ops.relu(h)
            h = ops.conv3d_transpose(h, self.p(f"dec{i}.convt.weight"), self.p(f"dec{i}.convt.bias"), 2, 1, 1)
            h = self.norm(f"dec{i}.bn", h, training, cfg)
            if i < depth:
                h = ops.concat([h, skips[depth - 1 - i]], axis=1)
        return self.conv("out.conv", h), logits


class ContextualNet(Module):
    """Residual refiner: conv -> 2 residual blocks -> conv -> conv, plus a global skip."""

    def __init__(self, config: NetConfig, rng: Rng):
        super().__init__()
        self.config = config
        f, c = config.refiner_channels, config.input_channels
        self.add_conv("head", rng, f, c)
        for j in range(1, config.refiner_blocks + 1):
            self.add_conv(f"rb{j}.conv1", rng, f, f)
            self.add_conv(f"rb{j}.conv2", rng, f, f)
        self.add_conv("tail1", rng, f, f)
        self.add_conv("tail2", rng, c, f)

    def __call__(self, coarse: Tensor) -> Tensor:
        if coarse.ndim != 5 or coarse.shape[1] != self.config.input_channels:
            raise ValueError(f"expected a [N,{self.config.input_channels},D,H,W] volume, got {coarse.shape}")
        h = self.conv("head", coarse)
        for j in range(1, self.config.refiner_blocks + 1):
            r = self.conv(f"rb{j}.conv2", ops.relu(self.conv(f"rb{j}.conv1", h)))
            h = ops.add(h, r)
        h = self.conv("tail2", self.conv("tail1", h))
        return ops.add(coarse, h)


class PatchDiscriminator(Module):
    """Conditional patch critic on (lPET, candidate) pairs; raw scores, no sigmoid."""

    def __init__(self, config: NetConfig, rng: Rng):
        super().__init__()
        self.config = config
        b = config.base_channels
        cin = 2 * config.input_channels
        for i in range(1, config.disc_layers + 1):
            c = min(b * 2 ** (i - 1), b * 8)
            self.add_conv(f"block{i}.conv", rng, c, cin)
            if i > 1:
                self.add_norm(f"block{i}.bn", c)
            cin = c
        self.add_conv("score", rng, 1, cin)

    def __call__(self, x: Tensor, candidate: Tensor, training: bool = True) -> Tensor:
        if x.shape != candidate.shape:
            raise ValueError(f"pair shape mismatch: {x.shape} vs {candidate.shape}")
        cfg = self.config
        h = ops.concat([x, candidate], axis=1)
        for i in range(1, cfg.disc_layers + 1):
            h = self.conv(f"block{i}.conv", h, stride=2, padding=1)
            if i > 1:
                h = self.norm(f"block{i}.bn", h, training, cfg)
            h = ops.leaky_relu(h, cfg.leaky_slope)
        return self.conv("score", h)


@dataclass
class _Stage:
    stride: int
    padding: int
    activation: bool


class FeatureExtractor(Module):
    """Frozen stack of conv(+ReLU) stages standing in for a pretrained backbone.

    Weights are He-uniform from a seeded stream and are made read-only.
    """

    def __init__(self, stages: list[tuple[np.ndarray, np.ndarray, int, int, bool]], indices: tuple[int, ...]):
        super().__init__()
        self._stages: list[_Stage] = []
        for s, (w, b, stride, padding, act) in enumerate(stages):
            for name, arr in ((f"stage{s}.weight", w), (f"stage{s}.bias", b)):
                t = self.add_param(name, np.array(arr, dtype=np.float32), trainable=False)
                t.data.flags.writeable = False
            self._stages.append(_Stage(stride, padding, act))
        indices = tuple(indices)
        if not indices or any(i < 0 or i >= len(stages) for i in indices):
            raise IndexError(f"feature indices {indices} beyond {len(stages)}-stage extractor")
        self.indices = indices

    @classmethod
    def from_config(cls, config: NetConfig, rng: Rng) -> "FeatureExtractor":
        stages = []
        cin = config.input_channels
        for s, c in enumerate(config.feature_channels):
            fan_in = cin * 27
            w = _uniform(rng.split(f"stage{s}.weight"), (c, cin, 3, 3, 3), fan_in, gain=np.sqrt(6.0))
            b = np.zeros(c, dtype=np.float32)
            stages.append((w, b, 1 if s == 0 else 2, 1, True))
            cin = c
        return cls(stages, config.feature_layer_indices)

    @classmethod
    def identity(cls, channels: int = 1) -> "FeatureExtractor":
        w = np.eye(channels, dtype=np.float32).reshape(channels, channels, 1, 1, 1)
        return cls([(w, np.zeros(channels, dtype=np.float32), 1, 0, False)], (0,))

    def feature_dims(self, extent: int) -> list[tuple[int, int, int, int]]:
        dims = []
        n = extent
        for s, st in enumerate(self._stages):
            w = self.p(f"stage{s}.weight")
            n = ops.conv_output_extent(n, w.shape[2], st.stride, st.padding)
            dims.append((w.shape[0], n, n, n))
        return [dims[i] for i in self.indices]

    def __call__(self, v: Tensor) -> list[Tensor]:
        feats = []
        h = v
        last = self.indices[-1]
        for s, st in enumerate(self._stages[: last + 1]):
            h = ops.conv3d(h, self.p(f"stage{s}.weight"), self.p(f"stage{s}.bias"), st.stride, st.padding)
            if st.activation:
                h = ops.relu(h)
            if s in self.indices:
                feats.append(h)
        return feats


class Networks(NamedTuple):
    mlnet: MLNet
    contextual: ContextualNet
    discriminator: PatchDiscriminator
    features: FeatureExtractor

    def modules(self) -> dict[str, Module]:
        return dict(self._asdict())


def init_networks(config: NetConfig, rng: Rng) -> Networks:
    """Build all four networks from independent seeded sub-streams."""
    config.validate()
    return Networks(
        MLNet(config, rng.split("mlnet")),
        ContextualNet(config, rng.split("contextual")),
        PatchDiscriminator(config, rng.split("discriminator")),
        FeatureExtractor.from_config(config, rng.split("features")),
    )
