"""Layers, losses, optimizers and the share-boundary defenses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import rng as rngmod
from .tensor import (
    ShapeError,
    Tensor,
    conv2d,
    instance_norm2d,
    leaky_relu,
    make_op,
    transposed_conv2d,
)


class Module:
    """Minimal parameter container.

    Parameters are discovered from attributes in assignment order: Tensors
    with ``requires_grad``, child Modules and lists of Modules.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state dict mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.size != p.data.size:
                raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.reshape(p.shape).astype(p.dtype, copy=True)


def kaiming_uniform(shape: tuple[int, ...], fan_in: int, gen: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return gen.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, seed: int, name: str):
        gen = rngmod.stream(seed, name)
        self.weight = Tensor(kaiming_uniform((cout, cin, kernel, kernel), cin * kernel * kernel, gen),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class UpConv2x2(Module):
    def __init__(self, cin: int, cout: int, seed: int, name: str):
        gen = rngmod.stream(seed, name)
        self.weight = Tensor(kaiming_uniform((cin, cout, 2, 2), cin, gen), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return transposed_conv2d(x, self.weight, self.bias)


class ConvBlock(Module):
    """Two rounds of 3x3 conv -> instance norm -> LeakyReLU(0.1)."""

    def __init__(self, cin: int, cout: int, seed: int, name: str):
        self.in_channels = cin
        self.out_channels = cout
        self.conv_a = Conv2d(cin, cout, 3, seed, name + ".conv_a")
        self.conv_b = Conv2d(cout, cout, 3, seed, name + ".conv_b")

    def __call__(self, x: Tensor) -> Tensor:
        x = leaky_relu(instance_norm2d(self.conv_a(x)))
        return leaky_relu(instance_norm2d(self.conv_b(x)))


# ---------------------------------------------------------------------------
# losses


def dice_ce_loss(logits: Tensor, labels: np.ndarray, smooth: float = 1e-5) -> Tensor:
    """Soft Dice loss over all classes plus mean pixelwise cross-entropy.

    Dice is computed per (sample, class) on softmax probabilities and
    averaged; the background class is included.
    """
    if logits.data.ndim != 4:
        raise ShapeError(f"logits must be (B, C, H, W), got {logits.shape}")
    B, C, H, W = logits.shape
    lab = np.asarray(labels)
    if lab.ndim == 4:
        if lab.shape[1] != 1:
            raise ShapeError(f"labels must be (B, 1, H, W), got {lab.shape}")
        lab = lab[:, 0]
    if lab.shape != (B, H, W):
        raise ShapeError(f"labels shape {lab.shape} does not match logits {logits.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= C):
        raise ValueError(f"label values must lie in 0..{C - 1}, got range [{lab.min()}, {lab.max()}]")
    lab = lab.astype(np.int64)

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, lab[:, None], 1.0, axis=1)

    inter = (p * onehot).sum(axis=(2, 3))
    denom = p.sum(axis=(2, 3)) + onehot.sum(axis=(2, 3))
    dice = (2.0 * inter + smooth) / (denom + smooth)
    dice_loss = 1.0 - dice.mean()
    ce = -(logp * onehot).sum(axis=1).mean()
    out = np.asarray(dice_loss + ce, dtype=logits.dtype)

    def _backward(g: np.ndarray):
        gscale = float(g)
        # d(dice)/dp per (b, c, h, w)
        dd = (2.0 * onehot * (denom + smooth)[..., None, None]
              - (2.0 * inter + smooth)[..., None, None]) / ((denom + smooth) ** 2)[..., None, None]
        gp = -dd / (B * C)
        glog = p * (gp - (gp * p).sum(axis=1, keepdims=True))
        glog += (p - onehot) / (B * H * W)
        return ((glog * gscale).astype(logits.dtype),)

    return make_op(out, (logits,), _backward)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} (shape {p.shape}) has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype)


class Adam:
    """Adam over a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, self.state, self.lr if lr is None else lr)


@dataclass(frozen=True)
class CosineSchedule:
    initial_rate: float
    total_steps: int


def cosine_rate(schedule: CosineSchedule, step: int) -> float:
    """Cosine decay from ``initial_rate`` at step 0 to 0 at ``total_steps``."""
    if step >= schedule.total_steps:
        return 0.0
    frac = max(step, 0) / schedule.total_steps
    return schedule.initial_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# share-boundary perturbations


def dropout_mask(shape: tuple[int, ...], p: float, gen: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = gen.random(shape) >= p
    return keep.astype(dtype) * dtype(1.0 / (1.0 - p))


def dropout(x: Tensor, p: float, gen: np.random.Generator) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = dropout_mask(x.shape, p, gen, x.dtype.type)
    return make_op(x.data * mask, (x,), lambda g: (g * mask,))


def gaussian_noise(x: Tensor, sigma: float, gen: np.random.Generator) -> Tensor:
    """Add i.i.d. N(0, sigma^2) noise; unit Jacobian."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be non-negative, got {sigma}")
    if sigma == 0.0:
        return x
    noise = gen.normal(0.0, sigma, size=x.shape).astype(x.dtype)
    return make_op(x.data + noise, (x,), lambda g: (g,))
