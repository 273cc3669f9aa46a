"""Default U-Net and the Split-U-Net partition into per-site encoders.

Level widths follow the usual BasicUNet layout: five encoder levels
(indices 0..4) and four decoder levels (5..8).  A split model with K sites
gives each site an encoder with the encoder widths divided by K and keeps
the decoder at full width, so concatenating the K site activations at a
level reproduces the default channel count.
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tenfile
from .nn import Conv2d, ConvBlock, Module, UpConv2x2
from .tensor import ShapeError, Tensor, concat_channels, max_pool2

DEFAULT_FEATURES = (32, 32, 64, 128, 256, 128, 64, 32, 32)
NUM_LEVELS = 4


class Variant(str, enum.Enum):
    ALL_SKIPS = "all_skips"
    NO_SKIPS = "no_skips"
    X3_X4_ONLY = "x3_x4_only"

    @property
    def shared_levels(self) -> tuple[int, ...]:
        return {
            Variant.ALL_SKIPS: (0, 1, 2, 3, 4),
            Variant.NO_SKIPS: (4,),
            Variant.X3_X4_ONLY: (3, 4),
        }[self]


@dataclass(frozen=True)
class ArchSpec:
    features: tuple[int, ...] = DEFAULT_FEATURES
    in_channels: int = 4
    out_classes: int = 4
    levels: int = NUM_LEVELS

    def __post_init__(self):
        if len(self.features) != 2 * self.levels + 1:
            raise ValueError(f"need {2 * self.levels + 1} level widths, got {len(self.features)}")

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        return self.features[: self.levels + 1]

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        return self.features[self.levels + 1:]


@dataclass(frozen=True)
class SplitConfig:
    num_sites: int = 4
    label_site: int = 0
    variant: Variant = Variant.ALL_SKIPS

    def validate(self, arch: ArchSpec = ArchSpec()) -> None:
        if self.num_sites < 1:
            raise ValueError(f"num_sites must be >= 1, got {self.num_sites}")
        bad = [w for w in arch.encoder_widths if w % self.num_sites]
        if bad:
            raise ValueError(
                f"{self.num_sites} sites cannot evenly split encoder widths {list(arch.encoder_widths)}: "
                f"{bad} not divisible by {self.num_sites}")
        if not 0 <= self.label_site < self.num_sites:
            raise ValueError(f"label_site {self.label_site} outside 0..{self.num_sites - 1}")


@dataclass
class ActivationBundle:
    """Activations x_i^k of one site, keyed by encoder level."""

    site: int
    levels: dict[int, Tensor] = field(default_factory=dict)

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level]

    def shapes(self) -> dict[int, tuple[int, ...]]:
        return {i: t.shape for i, t in sorted(self.levels.items())}


def _check_spatial(shape, levels: int) -> None:
    H, W = shape[2:]
    div = 2 ** levels
    if H % div or W % div:
        raise ShapeError(f"input size {H}x{W} must be divisible by {div} for {levels} pooling levels")


class SplitEncoder(Module):
    """Per-site encoder f^k: a conv block per level with max-pool between."""

    def __init__(self, site: int, widths: tuple[int, ...], in_channels: int, seed: int):
        self.site = site
        self.widths = tuple(widths)
        self.in_channels = in_channels
        chans = (in_channels,) + self.widths
        self.blocks = [ConvBlock(chans[i], chans[i + 1], seed, f"enc{site}.block{i}")
                       for i in range(len(self.widths))]

    def forward(self, images: Tensor, upto: int | None = None) -> dict[int, Tensor]:
        if images.data.ndim != 4 or images.shape[1] != self.in_channels:
            raise ShapeError(f"site {self.site} encoder expects (B, {self.in_channels}, H, W), got {images.shape}")
        last = len(self.blocks) - 1 if upto is None else upto
        if not 0 <= last < len(self.blocks):
            raise ValueError(f"encoder has levels 0..{len(self.blocks) - 1}, requested {upto}")
        _check_spatial(images.shape, len(self.blocks) - 1)
        out: dict[int, Tensor] = {}
        x = images
        for i in range(last + 1):
            if i > 0:
                x = max_pool2(x)
            x = self.blocks[i](x)
            out[i] = x
        return out

    __call__ = forward


class Decoder(Module):
    """Label-site decoder g: transposed-conv upsampling plus skip concatenation."""

    def __init__(self, arch: ArchSpec, variant: Variant, seed: int):
        self.variant = Variant(variant)
        enc, dec = arch.encoder_widths, arch.decoder_widths
        skip = self.variant is not Variant.NO_SKIPS
        self.ups: list[UpConv2x2] = []
        self.blocks: list[ConvBlock] = []
        c = enc[-1]
        for j, out in zip(range(arch.levels - 1, -1, -1), dec):
            up = c // 2 if j > 0 else c
            self.ups.append(UpConv2x2(c, up, seed, f"dec.up{j}"))
            cin = up + enc[j] if skip else up
            self.blocks.append(ConvBlock(cin, out, seed, f"dec.block{j}"))
            c = out
        self.head = Conv2d(c, arch.out_classes, 1, seed, "dec.head")
        self.skip_widths = enc

    def forward(self, skips: dict[int, Tensor]) -> Tensor:
        top = len(self.skip_widths) - 1
        x = skips[top]
        for up, block, j in zip(self.ups, self.blocks, range(top - 1, -1, -1)):
            x = up(x)
            if self.variant is not Variant.NO_SKIPS:
                x = concat_channels([skips[j], x])
            x = block(x)
        return self.head(x)

    __call__ = forward


def encoder_widths_for(arch: ArchSpec, num_sites: int) -> tuple[int, ...]:
    SplitConfig(num_sites=num_sites).validate(arch)
    return tuple(w // num_sites for w in arch.encoder_widths)


def build_split(arch: ArchSpec, cfg: SplitConfig, seed: int) -> tuple[list[SplitEncoder], Decoder]:
    """K single-modality encoders with widths default/K, and one full-width decoder."""
    cfg.validate(arch)
    widths = encoder_widths_for(arch, cfg.num_sites)
    encoders = [SplitEncoder(k, widths, 1, seed) for k in range(cfg.num_sites)]
    return encoders, Decoder(arch, cfg.variant, seed)


def encoder_forward(enc: SplitEncoder, images: Tensor, variant: Variant = Variant.ALL_SKIPS) -> ActivationBundle:
    """Run f^k and keep the levels that ``variant`` shares."""
    acts = enc.forward(images)
    shared = Variant(variant).shared_levels
    return ActivationBundle(enc.site, {i: acts[i] for i in shared})


def assemble_skips(bundles: list[ActivationBundle], variant: Variant, skip_widths: tuple[int, ...]) -> dict[int, Tensor]:
    """Concatenate site activations per level in ascending site order.

    For X3_X4_ONLY the withheld levels 0..2 are zero-filled so the decoder
    keeps its full-width layout.
    """
    variant = Variant(variant)
    if not bundles:
        raise ValueError("need at least one activation bundle")
    ordered = sorted(bundles, key=lambda b: b.site)
    sites = [b.site for b in ordered]
    if len(set(sites)) != len(sites):
        raise ValueError(f"duplicate site indices in bundles: {sites}")
    skips: dict[int, Tensor] = {}
    for level in variant.shared_levels:
        parts = []
        for b in ordered:
            if level not in b.levels:
                raise ShapeError(f"site {b.site} bundle lacks level {level}")
            parts.append(b.levels[level])
        ref = parts[0].shape
        for b, t in zip(ordered, parts):
            if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
                raise ShapeError(f"level {level}: site {b.site} shape {t.shape} mismatches site {ordered[0].site} shape {ref}")
        skips[level] = parts[0] if len(parts) == 1 else concat_channels(parts)
    top = max(variant.shared_levels)
    B, _, Ht, Wt = skips[top].shape
    for level in range(top):
        if level in skips or variant is Variant.NO_SKIPS:
            continue
        f = 2 ** (top - level)
        skips[level] = Tensor(np.zeros((B, skip_widths[level], Ht * f, Wt * f), dtype=skips[top].dtype))
    return skips


def decoder_forward(dec: Decoder, bundles: list[ActivationBundle], variant: Variant | None = None) -> Tensor:
    """Logits (B, classes, H, W) from the K site bundles."""
    variant = dec.variant if variant is None else Variant(variant)
    if variant is not dec.variant:
        raise ValueError(f"decoder was built for {dec.variant.value}, not {variant.value}")
    return dec.forward(assemble_skips(bundles, variant, dec.skip_widths))


class UNet(Module):
    """Monolithic U-Net taking all modalities as input channels."""

    def __init__(self, arch: ArchSpec, seed: int):
        self.arch = arch
        chans = (arch.in_channels,) + arch.encoder_widths
        self.blocks = [ConvBlock(chans[i], chans[i + 1], seed, f"enc0.block{i}")
                       for i in range(arch.levels + 1)]
        self.dec = Decoder(arch, Variant.ALL_SKIPS, seed)

    def forward(self, images: Tensor) -> Tensor:
        if images.data.ndim != 4 or images.shape[1] != self.arch.in_channels:
            raise ShapeError(f"U-Net expects (B, {self.arch.in_channels}, H, W), got {images.shape}")
        _check_spatial(images.shape, self.arch.levels)
        skips = {}
        x = images
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = max_pool2(x)
            x = block(x)
            skips[i] = x
        return self.dec.forward(skips)

    __call__ = forward


def build_default_unet(arch: ArchSpec, seed: int) -> UNet:
    return UNet(arch, seed)


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"SCKP"


def save_checkpoint(path: str | os.PathLike, module: Module, header: dict) -> None:
    """Header JSON (with parameter names) followed by one .ten blob per parameter."""
    named = list(module.named_parameters())
    meta = dict(header)
    meta["params"] = [name for name, _ in named]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        for _, p in named:
            fh.write(tenfile.encode(p.data))


def load_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _CKPT_MAGIC:
        raise tenfile.TenFormatError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<I", buf, 4)
    meta = json.loads(buf[8:8 + n].decode("utf-8"))
    offset = 8 + n
    state = {}
    for name in meta["params"]:
        state[name], offset = tenfile.decode(buf, offset)
    if offset != len(buf):
        raise tenfile.TenFormatError(f"{path}: trailing bytes after last parameter")
    return meta, state
