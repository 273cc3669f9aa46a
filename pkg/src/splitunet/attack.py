"""White-box inversion of intercepted encoder activations.

The attacker holds a replica of the victim's encoder and optimizes a
random image until the replica's level-i activation matches the
intercepted one, with total-variation and L2 image priors.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import rng, tenfile
from .metrics import SsimParams, ssim
from .model import SplitEncoder
from .nn import AdamState, CosineSchedule, adam_step, cosine_rate
from .tensor import ShapeError, Tensor, backward, l2_norm, make_op, no_grad, scale, sub


@dataclass(frozen=True)
class AttackConfig:
    alpha_act: float = 1e-3
    alpha_tv: float = 1e-4
    alpha_l2: float = 1e-5
    steps: int = 2000
    lr: float = 0.1

    def __post_init__(self):
        if min(self.alpha_act, self.alpha_tv, self.alpha_l2) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


@dataclass
class InversionResult:
    image: np.ndarray
    final_loss: float
    initial_loss: float
    loss_trace: np.ndarray
    level: int
    site: int


def total_variation(img: Tensor) -> Tensor:
    """Anisotropic TV: sum of absolute vertical and horizontal differences over B*C*H*W."""
    if img.data.ndim != 4:
        raise ShapeError(f"total_variation expects (B, C, H, W), got {img.shape}")
    B, C, H, W = img.shape
    if H < 2 or W < 2:
        raise ShapeError(f"total_variation needs H, W >= 2, got {H}x{W}")
    x = img.data
    dv = x[:, :, 1:, :] - x[:, :, :-1, :]
    dh = x[:, :, :, 1:] - x[:, :, :, :-1]
    n = B * C * H * W
    out = np.asarray((np.abs(dv).sum(dtype=np.float64) + np.abs(dh).sum(dtype=np.float64)) / n, dtype=x.dtype)

    def _backward(g: np.ndarray):
        sv = np.sign(dv) * (g / n)
        sh = np.sign(dh) * (g / n)
        gx = np.zeros_like(x)
        gx[:, :, 1:, :] += sv
        gx[:, :, :-1, :] -= sv
        gx[:, :, :, 1:] += sh
        gx[:, :, :, :-1] -= sh
        return (gx,)

    return make_op(out, (img,), _backward)


def inversion_loss(x_target: Tensor, x_candidate: Tensor, img: Tensor, cfg: AttackConfig) -> Tensor:
    """alpha_act*||x - x~|| + alpha_tv*TV(I~) + alpha_l2*||I~|| with un-squared norms."""
    if x_target.shape != x_candidate.shape:
        raise ShapeError(f"target activation {x_target.shape} and candidate {x_candidate.shape} differ")
    loss = scale(l2_norm(sub(x_target, x_candidate)), cfg.alpha_act)
    loss = loss + scale(total_variation(img), cfg.alpha_tv)
    return loss + scale(l2_norm(img), cfg.alpha_l2)


def frozen_replica(encoder: SplitEncoder) -> SplitEncoder:
    """Deep copy whose parameters are constants (no parameter gradients)."""
    rep = copy.deepcopy(encoder)
    for _, p in rep.named_parameters():
        p.requires_grad = False
        p.grad = None
    return rep


def invert(encoder: SplitEncoder, x_target, level: int, cfg: AttackConfig = AttackConfig(),
           seed: int = 0, site: int | None = None) -> InversionResult:
    """Recover the input batch behind ``x_target`` at encoder ``level``.

    Adam with cosine-decayed rate from a uniform [0, 1) start; the iterate
    with the lowest loss is returned.
    """
    n_levels = len(encoder.blocks)
    if not 0 <= level < n_levels:
        raise ValueError(f"encoder produces levels 0..{n_levels - 1}, not {level}")
    target = x_target if isinstance(x_target, Tensor) else Tensor(np.asarray(x_target, dtype=np.float32))
    B, C, h, w = target.shape
    if C != encoder.widths[level]:
        raise ShapeError(f"level {level} activations have {encoder.widths[level]} channels, target has {C}")
    f = 2 ** level
    shape = (B, encoder.in_channels, h * f, w * f)

    replica = frozen_replica(encoder) if encoder.parameters() else encoder
    gen = rng.stream(seed, "invert-init")
    img = Tensor(gen.random(shape).astype(np.float32), requires_grad=True)
    state = AdamState.for_params([img])
    sched = CosineSchedule(cfg.lr, cfg.steps)

    trace = np.empty(cfg.steps + 1)
    best_loss, best_img = np.inf, img.data.copy()
    for step in range(cfg.steps):
        img.grad = None
        cand = replica.forward(img, upto=level)[level]
        loss = inversion_loss(target, cand, img, cfg)
        value = loss.item()
        trace[step] = value
        if value < best_loss:
            best_loss, best_img = value, img.data.copy()
        backward([loss], inputs=[img])
        adam_step([img], state, cosine_rate(sched, step))

    with no_grad():
        cand = replica.forward(img, upto=level)[level]
        value = inversion_loss(target, cand, img, cfg).item()
    trace[cfg.steps] = value
    if value < best_loss:
        best_loss, best_img = value, img.data.copy()
    return InversionResult(best_img, float(best_loss), float(trace[0]), trace, level,
                           encoder.site if site is None else site)


def invert_per_sample(encoder: SplitEncoder, x_target, level: int, cfg: AttackConfig = AttackConfig(),
                      seed: int = 0, site: int | None = None) -> InversionResult:
    """Invert each sample of the batch independently and stack the results."""
    arr = x_target.data if isinstance(x_target, Tensor) else np.asarray(x_target, dtype=np.float32)
    parts = [invert(encoder, arr[b:b + 1], level, cfg, rng.derive_seed(seed, "sample", b), site)
             for b in range(arr.shape[0])]
    return InversionResult(
        np.concatenate([p.image for p in parts]),
        float(sum(p.final_loss for p in parts)),
        float(sum(p.initial_loss for p in parts)),
        np.sum([p.loss_trace for p in parts], axis=0),
        level,
        parts[0].site,
    )


# ---------------------------------------------------------------------------
# sweeps over intercepted activations


@dataclass
class Tap:
    site: int
    level: int
    activation: np.ndarray
    originals: np.ndarray


@dataclass
class SweepRow:
    site: int
    level: int
    result: InversionResult
    ssim: np.ndarray


def dump_paths(dump_dir: str | os.PathLike, site: int, level: int) -> tuple[Path, Path]:
    d = Path(dump_dir)
    return d / f"site{site}_level{level}.ten", d / f"site{site}_input.ten"


def load_taps(dump_dir: str | os.PathLike, sites: Iterable[int], levels: Iterable[int]) -> list[Tap]:
    levels = list(levels)
    missing, taps = [], []
    for k in sites:
        for i in levels:
            act, orig = dump_paths(dump_dir, k, i)
            for p in (act, orig):
                if not p.exists():
                    missing.append(str(p))
            if act.exists() and orig.exists():
                taps.append(Tap(k, i, tenfile.load(act), tenfile.load(orig)))
    if missing:
        raise FileNotFoundError("missing dump files: " + ", ".join(sorted(set(missing))))
    return taps


def level_sweep(taps: Iterable[Tap], encoders: Mapping[int, SplitEncoder], cfg: AttackConfig = AttackConfig(),
                seed: int = 0, per_sample: bool = False,
                ssim_params: SsimParams = SsimParams()) -> list[SweepRow]:
    """One inversion per tap, scored by SSIM against the tap's originals."""
    rows = []
    fn = invert_per_sample if per_sample else invert
    for tap in taps:
        if tap.site not in encoders:
            raise KeyError(f"no encoder for site {tap.site}")
        res = fn(encoders[tap.site], tap.activation, tap.level, cfg,
                 rng.derive_seed(seed, "sweep", tap.site, tap.level), tap.site)
        rows.append(SweepRow(tap.site, tap.level, res, ssim(tap.originals, res.image, ssim_params)))
    return rows


def config_dict(cfg: AttackConfig) -> dict:
    return asdict(cfg)
