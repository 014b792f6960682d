"""Discriminator autoencoder and the image-conditioned generator variants."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import backend as B
from .backend import Tensor

VARIANTS = ("A", "B", "C")


def _is_pow2(v: int) -> bool:
    return isinstance(v, int) and v > 0 and (v & (v - 1)) == 0


def _check_positive(name: str, v) -> None:
    if not isinstance(v, int) or v < 1:
        raise ValueError(f"{name} must be a positive integer, got {v!r}")


@dataclass(frozen=True)
class DiscriminatorConfig:
    target_res: int = 32
    base_filters: int = 64
    embedding_dim: int = 64
    convs_per_block: int = 2

    def __post_init__(self):
        if not _is_pow2(self.target_res) or self.target_res < 8:
            raise ValueError(f"target_res must be a power of two >= 8, got {self.target_res!r}")
        _check_positive("base_filters", self.base_filters)
        _check_positive("embedding_dim", self.embedding_dim)
        _check_positive("convs_per_block", self.convs_per_block)

    @property
    def n_blocks(self) -> int:
        return int(math.log2(self.target_res // 8)) + 1

    @property
    def encoder_widths(self) -> list[int]:
        return [k * self.base_filters for k in range(1, self.n_blocks + 1)]

    def to_dict(self) -> dict:
        return asdict(self)


def default_mask(variant: str, n_levels: int) -> tuple[bool, ...]:
    """Injection mask over pyramid levels (lowest first).

    A feeds only the lowest level, C feeds every level, B the lowest plus every
    second level above it.
    """
    if variant == "A":
        return tuple(i == 0 for i in range(n_levels))
    if variant == "B":
        return tuple(i % 2 == 0 for i in range(n_levels))
    if variant == "C":
        return (True,) * n_levels
    raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")


@dataclass(frozen=True)
class GeneratorConfig:
    variant: str = "B"
    target_res: int = 32
    base_filters: int = 64
    lowest_res: int = 8
    convs_per_block: int = 2
    injection_mask: tuple[bool, ...] | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not _is_pow2(self.target_res) or not _is_pow2(self.lowest_res):
            raise ValueError(
                f"target_res and lowest_res must be powers of two, got {self.target_res!r}, {self.lowest_res!r}"
            )
        if self.lowest_res > self.target_res // 2:
            raise ValueError(f"lowest_res {self.lowest_res} must be <= target_res/2 ({self.target_res // 2})")
        _check_positive("base_filters", self.base_filters)
        _check_positive("convs_per_block", self.convs_per_block)
        n = len(self.resolutions)
        if self.injection_mask is None:
            object.__setattr__(self, "injection_mask", default_mask(self.variant, n))
        else:
            mask = tuple(bool(m) for m in self.injection_mask)
            if len(mask) != n:
                raise ValueError(f"injection_mask needs {n} entries (one per level {self.resolutions}), got {len(mask)}")
            if not mask[0]:
                raise ValueError("injection_mask[0] must be true: the lowest level is the generator input")
            object.__setattr__(self, "injection_mask", mask)

    @property
    def resolutions(self) -> tuple[int, ...]:
        """Pyramid resolutions below target_res, lowest first."""
        out, r = [], self.lowest_res
        while r < self.target_res:
            out.append(r)
            r *= 2
        return tuple(out)

    @property
    def injection_count(self) -> int:
        return sum(self.injection_mask)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["injection_mask"] = list(self.injection_mask)
        return d


@dataclass(frozen=True)
class Layer:
    kind: str  # conv | fc | down | up | flatten | reshape | inject
    name: str | None = None
    activation: bool = False
    arg: Any = None


@dataclass
class ModelGraph:
    kind: str  # "discriminator" | "generator"
    config: DiscriminatorConfig | GeneratorConfig
    layers: list[Layer]
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        B.zero_grad(self.params.values())

    def __call__(self, inputs, trainable: bool = True) -> Tensor:
        return forward(self, inputs, trainable=trainable)


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        self.params: OrderedDict[str, Tensor] = OrderedDict()

    def _uniform(self, shape, fan_in):
        bound = math.sqrt(1.0 / fan_in)
        return B.parameter(self.rng.uniform(-bound, bound, size=shape))

    def conv(self, name, cin, cout, activation=True):
        self.params[f"{name}.weight"] = self._uniform((cout, cin, 3, 3), cin * 9)
        self.params[f"{name}.bias"] = self._uniform((cout,), cin * 9)
        self.layers.append(Layer("conv", name, activation))

    def fc(self, name, nin, nout):
        self.params[f"{name}.weight"] = self._uniform((nout, nin), nin)
        self.params[f"{name}.bias"] = self._uniform((nout,), nin)
        self.layers.append(Layer("fc", name))

    def add(self, kind, arg=None):
        self.layers.append(Layer(kind, arg=arg))


def build_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> ModelGraph:
    n, c, h = cfg.base_filters, cfg.convs_per_block, cfg.embedding_dim
    b = _Builder(seed)
    b.conv("encoder.0.0", 3, n)
    width = n
    for k, out_w in enumerate(cfg.encoder_widths, start=1):
        for i in range(c):
            b.conv(f"encoder.{k}.{i}", width, out_w)
            width = out_w
        if k < cfg.n_blocks:
            b.add("down", 2)
    b.add("flatten")
    b.fc("bottleneck.0.0", 8 * 8 * width, h)
    b.fc("bottleneck.0.1", h, 8 * 8 * n)
    b.add("reshape", (n, 8, 8))
    for k in range(1, cfg.n_blocks + 1):
        for i in range(c):
            b.conv(f"decoder.{k}.{i}", n, n)
        if k < cfg.n_blocks:
            b.add("up", 2)
    b.conv("output.0.0", n, 3, activation=False)
    return ModelGraph("discriminator", cfg, b.layers, b.params)


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> ModelGraph:
    n, c = cfg.base_filters, cfg.convs_per_block
    b = _Builder(seed)
    b.conv("generator.0.0", 3, n)
    n_levels = len(cfg.resolutions)
    width = n
    # one block per pyramid level plus a closing block at target_res
    for blk in range(1, n_levels + 2):
        for i in range(c):
            b.conv(f"generator.{blk}.{i}", width, n)
            width = n
        if blk <= n_levels:
            b.add("up", 2)
            nxt = blk  # level index of the new resolution
            if nxt < n_levels and cfg.injection_mask[nxt]:
                b.add("inject", nxt)
                width = n + 3
    b.conv("output.0.0", n, 3, activation=False)
    return ModelGraph("generator", cfg, b.layers, b.params)


def _check_image(x: Tensor, res: int, what: str) -> None:
    if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (res, res):
        raise B.ShapeError(f"{what} expects a (batch, 3, {res}, {res}) tensor, got {x.shape}")


def _generator_inputs(model: ModelGraph, inputs) -> list[Tensor | None]:
    cfg: GeneratorConfig = model.config
    levels = getattr(inputs, "levels", None)
    if levels is None:
        if not isinstance(inputs, Tensor):
            raise TypeError("generator input must be a Tensor or an ImagePyramid")
        levels = [inputs] + [None] * (len(cfg.resolutions) - 1)
    if len(levels) != len(cfg.resolutions):
        raise B.ShapeError(f"pyramid has {len(levels)} levels, model expects {len(cfg.resolutions)} {cfg.resolutions}")
    for i, (res, used) in enumerate(zip(cfg.resolutions, cfg.injection_mask)):
        if not used:
            continue
        if levels[i] is None:
            raise B.ShapeError(f"pyramid level {res}x{res} is required by the injection mask but missing")
        _check_image(levels[i], res, f"generator level {i}")
    return list(levels)


def forward(model: ModelGraph, inputs, trainable: bool = True) -> Tensor:
    """Run ``model``; with ``trainable=False`` parameters act as constants."""
    if trainable:
        params = model.params
    else:
        params = {k: v.detach() for k, v in model.params.items()}

    if model.kind == "discriminator":
        _check_image(inputs, model.config.target_res, "discriminator")
        h = inputs
        levels = None
    else:
        levels = _generator_inputs(model, inputs)
        h = levels[0]

    batch = h.shape[0]
    for layer in model.layers:
        if layer.kind == "conv":
            h = B.conv3x3(h, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"])
            if layer.activation:
                h = B.elu(h)
        elif layer.kind == "fc":
            h = B.fully_connected(h, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"])
        elif layer.kind == "down":
            h = B.resize_nearest(h, layer.arg, "down")
        elif layer.kind == "up":
            h = B.resize_nearest(h, layer.arg, "up")
        elif layer.kind == "flatten":
            h = B.flatten(h)
        elif layer.kind == "reshape":
            h = B.reshape(h, (batch,) + tuple(layer.arg))
        elif layer.kind == "inject":
            h = B.concat_channels(h, levels[layer.arg])
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return h
