"""DenseNet-style layers: parameters, conv/BN/FC wrappers, dense blocks and streams."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import (
    RunningStats,
    ShapeError,
    Tensor,
    avg_pool_2x2,
    batch_norm,
    concat_channels,
    conv2d,
    dropout,
    fully_connected,
    relu,
)
from .config import BackboneConfig


class Parameter(Tensor):
    """A named learnable tensor. Freezing clears ``requires_grad``."""

    def __init__(self, name: str, data: np.ndarray, decay: bool = False):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.name = name
        self.decay = decay

    @property
    def frozen(self) -> bool:
        return not self.requires_grad

    def freeze(self) -> None:
        self.requires_grad = False
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Layer:
    """Minimal container protocol: parameters and batch-norm buffers by name."""

    def children(self) -> Iterator["Layer"]:
        return iter(())

    def own_parameters(self) -> list[Parameter]:
        return []

    def parameters(self) -> list[Parameter]:
        out = list(self.own_parameters())
        for child in self.children():
            out.extend(child.parameters())
        return out

    def batch_norms(self) -> list["BatchNorm"]:
        out = [self] if isinstance(self, BatchNorm) else []
        for child in self.children():
            out.extend(child.batch_norms())
        return out

    @property
    def frozen(self) -> bool:
        params = self.parameters()
        return bool(params) and all(p.frozen for p in params)

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()


class Conv(Layer):
    def __init__(self, name: str, ksize: int, cin: int, cout: int, rng: np.random.Generator,
                 padding: int = 0):
        self.name = name
        self.padding = padding
        self.weight = Parameter(f"{name}.weight", he_normal(rng, (ksize, ksize, cin, cout), ksize * ksize * cin),
                                decay=True)
        self.bias = Parameter(f"{name}.bias", np.zeros(cout))

    def own_parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class Linear(Layer):
    def __init__(self, name: str, fin: int, fout: int, rng: np.random.Generator):
        self.name = name
        self.weight = Parameter(f"{name}.weight", he_normal(rng, (fin, fout), fin), decay=True)
        self.bias = Parameter(f"{name}.bias", np.zeros(fout))

    def own_parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)


class BatchNorm(Layer):
    eps = 1e-5
    momentum = 0.9

    def __init__(self, name: str, channels: int):
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels))
        self.stats = RunningStats.initial(channels)

    def own_parameters(self):
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.stats.mean, f"{self.name}.running_var": self.stats.var}

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.stats, mode, self.eps, self.momentum)


class DenseLayer(Layer):
    """BN-ReLU-Conv1x1-BN-ReLU-Conv3x3, output concatenated onto the input."""

    def __init__(self, name: str, cin: int, growth: int, rng: np.random.Generator):
        self.name = name
        self.cin = cin
        self.growth = growth
        self.bn1 = BatchNorm(f"{name}.bn1", cin)
        self.conv1 = Conv(f"{name}.conv1", 1, cin, growth, rng)
        self.bn2 = BatchNorm(f"{name}.bn2", growth)
        self.conv2 = Conv(f"{name}.conv2", 3, growth, growth, rng, padding=1)

    def children(self):
        return iter((self.bn1, self.conv1, self.bn2, self.conv2))

    def __call__(self, x: Tensor, mode: str = "train", rng: np.random.Generator | None = None,
                 drop: float = 0.0) -> Tensor:
        if x.shape[-1] != self.cin:
            raise ShapeError(f"{self.name}: expected {self.cin} input channels, got {x.shape[-1]}")
        h = self.conv1(relu(self.bn1(x, mode)))
        h = self.conv2(relu(self.bn2(h, mode)))
        h = dropout(h, drop, mode, rng)
        return concat_channels(x, h)


class DenseBlock(Layer):
    def __init__(self, name: str, cin: int, num_layers: int, growth: int, rng: np.random.Generator):
        self.name = name
        self.cin = cin
        self.layers = [DenseLayer(f"{name}.layer{k}", cin + k * growth, growth, rng) for k in range(num_layers)]
        self.cout = cin + num_layers * growth

    def children(self):
        return iter(self.layers)

    def __call__(self, x: Tensor, mode: str = "train", rng: np.random.Generator | None = None,
                 drop: float = 0.0) -> Tensor:
        for layer in self.layers:
            x = layer(x, mode, rng, drop)
        return x


def transition_pool(x: Tensor) -> Tensor:
    """2x2 average pooling between blocks; channel count is preserved."""
    return avg_pool_2x2(x)


class Stream(Layer):
    """Stem conv and dense blocks 1-2 (optionally 3) of one feature stream.

    ``features`` returns the post-block-2 map at half input resolution;
    ``__call__`` continues through a transition and block 3 when present.
    """

    def __init__(self, name: str, config: BackboneConfig, rng: np.random.Generator,
                 with_block3: bool = True, in_channels: int = 1):
        self.name = name
        self.config = config
        g, n = config.growth_rate, config.layers_per_block
        self.stem = Conv(f"{name}.stem", 3, in_channels, config.initial_channels, rng, padding=1)
        self.block1 = DenseBlock(f"{name}.block1", config.initial_channels, n, g, rng)
        self.block2 = DenseBlock(f"{name}.block2", self.block1.cout, n, g, rng)
        self.block3 = DenseBlock(f"{name}.block3", self.block2.cout, n, g, rng) if with_block3 else None

    def children(self):
        parts = [self.stem, self.block1, self.block2]
        if self.block3 is not None:
            parts.append(self.block3)
        return iter(parts)

    def extractor_parameters(self) -> list[Parameter]:
        return self.stem.parameters() + self.block1.parameters() + self.block2.parameters()

    def features(self, x: Tensor, mode: str = "train", rng: np.random.Generator | None = None,
                 drop: float = 0.0) -> Tensor:
        if all(p.frozen for p in self.extractor_parameters()):
            mode, drop = "eval", 0.0
        h = self.stem(x)
        h = self.block1(h, mode, rng, drop)
        h = transition_pool(h)
        return self.block2(h, mode, rng, drop)

    def __call__(self, x: Tensor, mode: str = "train", rng: np.random.Generator | None = None,
                 drop: float = 0.0) -> Tensor:
        if self.block3 is None:
            raise RuntimeError(f"{self.name} was built without block 3")
        h = transition_pool(self.features(x, mode, rng, drop))
        return self.block3(h, mode, rng, drop)


def build_stream(config: BackboneConfig, rng: np.random.Generator, name: str = "stream",
                 with_block3: bool = True) -> Stream:
    return Stream(name, config, rng, with_block3=with_block3)


def copy_layer_state(src: Layer, dst: Layer) -> None:
    """Copy parameter values and BN running stats from ``src`` into ``dst``.

    Both layers must have identical structure; names may differ by prefix.
    """
    sp, dp = src.parameters(), dst.parameters()
    if len(sp) != len(dp) or any(a.shape != b.shape for a, b in zip(sp, dp)):
        raise ShapeError(f"cannot copy {type(src).__name__} state: structures differ")
    for a, b in zip(sp, dp):
        b.data = a.data.copy()
    for a, b in zip(src.batch_norms(), dst.batch_norms()):
        b.stats = RunningStats(a.stats.mean.copy(), a.stats.var.copy())
