"""VGG16-pattern encoder with a mirrored max-unpooling decoder (SegNet style)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core as nn


class ConfigError(ValueError):
    pass


PRESETS = {
    "vgg16": [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)],
    "tiny": [(1, 8), (1, 16)],
}


@dataclass
class NetworkConfig:
    stages: list[tuple[int, int]] = field(default_factory=lambda: list(PRESETS["vgg16"]))
    input_size: tuple[int, int] = (300, 300)
    num_classes: int = 4
    seed: int = 0
    in_channels: int = 3

    def __post_init__(self):
        self.stages = [tuple(int(v) for v in s) for s in self.stages]
        self.input_size = tuple(int(v) for v in self.input_size)
        if not self.stages:
            raise ConfigError("at least one encoder stage is required")
        if any(len(s) != 2 or s[0] < 1 or s[1] < 1 for s in self.stages):
            raise ConfigError(f"stages must be positive (count, width) pairs, got {self.stages}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.in_channels < 1 or len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigError("in_channels and input_size must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "NetworkConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(stages=list(PRESETS[name]), **overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {"stages", "input_size", "num_classes", "seed", "in_channels"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "NetworkConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        d["input_size"] = list(self.input_size)
        return d


def _he_conv(rng, out_c, in_c, k, name) -> nn.ConvParams:
    std = np.sqrt(2.0 / (in_c * k * k))
    w = nn.Tensor(rng.normal(0.0, std, size=(out_c, in_c, k, k)), name=f"{name}.weight")
    b = nn.Tensor(np.zeros(out_c), name=f"{name}.bias")
    return nn.ConvParams(w, b, stride=1, padding=(k - 1) // 2)


class DcedModel:
    """Encoder stages (conv-ReLU)*n + maxpool, decoder stages unpool + (conv-ReLU)*n,
    then a 1x1 classifier. Decoder stage s ends at the width of encoder stage s-1."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder: list[list[nn.ConvParams]] = []
        c_in = config.in_channels
        for s, (count, width) in enumerate(config.stages):
            layers = []
            for i in range(count):
                layers.append(_he_conv(rng, width, c_in, 3, f"enc{s}.conv{i}"))
                c_in = width
            self.encoder.append(layers)

        self.decoder: list[list[nn.ConvParams]] = []
        for s in reversed(range(len(config.stages))):
            count, width = config.stages[s]
            out_width = config.stages[s - 1][1] if s > 0 else width
            layers = []
            for i in range(count):
                c_out = out_width if i == count - 1 else width
                layers.append(_he_conv(rng, c_out, width, 3, f"dec{s}.conv{i}"))
            self.decoder.append(layers)

        self.classifier = _he_conv(rng, config.num_classes, config.stages[0][1], 1, "classifier")
        self._cache = None

    @property
    def convs(self) -> list[nn.ConvParams]:
        return [p for st in self.encoder for p in st] + [p for st in self.decoder for p in st] + [self.classifier]

    def parameters(self) -> list[nn.Tensor]:
        return [t for p in self.convs for t in p.tensors]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {t.name: t.data for t in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {t.name: t for t in self.parameters()}
        if set(state) != set(params):
            missing, extra = set(params) - set(state), set(state) - set(params)
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in params.items():
            if state[name].shape != t.shape:
                raise ConfigError(f"{name}: checkpoint shape {state[name].shape} != model shape {t.shape}")
            t.data = np.ascontiguousarray(state[name], dtype=np.float64)

    def save(self, path: str | Path) -> None:
        nn.save_tensors(path, self.state_dict(), meta={"network": self.config.to_dict()})

    @classmethod
    def load(cls, path: str | Path) -> "DcedModel":
        state, meta = nn.load_tensors(path)
        if not meta or "network" not in meta:
            raise ConfigError(f"{path}: checkpoint carries no network config")
        model = cls(NetworkConfig.from_dict(meta["network"]))
        model.load_state_dict(state)
        return model

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise nn.ShapeError(f"expected N x {self.config.in_channels} x H x W input, got {x.shape}")
        h, w = x.shape[2:]
        for _ in self.config.stages:
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise nn.ShapeError(
                    f"input {x.shape[2]}x{x.shape[3]} too small for {len(self.config.stages)} pooling stages"
                )

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits N x K x H x W. Keeps activations for :meth:`backward`."""
        self.check_input(x)
        trace = []  # (kind, input, extra) in forward order
        pools = []
        h = x
        for stage in self.encoder:
            for p in stage:
                z = nn.conv2d_forward(h, p)
                trace.append(("conv", h, p))
                trace.append(("relu", z, None))
                h = nn.relu(z)
            h, idx = nn.maxpool2x2(h)
            trace.append(("pool", None, idx))
            pools.append(idx)
        for stage, idx in zip(self.decoder, reversed(pools)):
            h = nn.maxunpool2x2(h, idx)
            trace.append(("unpool", None, idx))
            for p in stage:
                z = nn.conv2d_forward(h, p)
                trace.append(("conv", h, p))
                trace.append(("relu", z, None))
                h = nn.relu(z)
        logits = nn.conv2d_forward(h, self.classifier)
        trace.append(("conv", h, self.classifier))
        self._cache = trace
        return logits

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients from the last forward; returns grad w.r.t. input."""
        if self._cache is None:
            raise nn.GradStateError("backward called without a preceding forward")
        g = grad_logits
        for kind, inp, extra in reversed(self._cache):
            if kind == "conv":
                g, gw, gb = nn.conv2d_backward(inp, extra, g)
                for t, d in ((extra.weight, gw), (extra.bias, gb)):
                    if t.grad is None:
                        t.zero_grad()
                    t.grad += d
            elif kind == "relu":
                g = nn.relu_backward(inp, g)
            elif kind == "pool":
                g = nn.maxpool2x2_backward(g, extra)
            else:
                g = nn.maxunpool2x2_backward(g, extra)
        self._cache = None
        return g

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()


def build(config: NetworkConfig) -> DcedModel:
    return DcedModel(config)


def forward(model: DcedModel, image: np.ndarray) -> np.ndarray:
    return model.forward(image)


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; np.argmax already prefers the lowest ID on ties."""
    return logits.argmax(axis=1).astype(np.uint8)


def predict(model: DcedModel, image: np.ndarray) -> np.ndarray:
    """Label mask(s) for an N x C x H x W batch; returns N x H x W uint8."""
    logits = model.forward(image)
    model._cache = None
    return argmax_labels(logits)


def image_to_input(image: np.ndarray) -> np.ndarray:
    """uint8 H x W x 3 (or N x H x W x 3) to float N x 3 x H x W.

    Each image channel is standardized to zero mean and unit variance; flat
    channels are only centred.
    """
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    a = a.transpose(0, 3, 1, 2)
    mean = a.mean(axis=(2, 3), keepdims=True)
    std = a.std(axis=(2, 3), keepdims=True)
    return np.ascontiguousarray((a - mean) / np.where(std > 0, std, 1.0))
