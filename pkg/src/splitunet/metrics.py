"""SSIM leakage scores, segmentation Dice and leakage report assembly."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0
    rescale: bool = True

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def minmax_rescale(x: np.ndarray) -> np.ndarray:
    """Per-sample min-max scaling of a (B, ...) array to [0, 1]; flat samples map to 0."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    lo = flat.min(axis=1, keepdims=True)
    span = flat.max(axis=1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (flat - lo) / safe, 0.0)
    return out.reshape(x.shape)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    x = sliding_window_view(x, g.size, axis=-1) @ g
    x = np.swapaxes(sliding_window_view(np.swapaxes(x, -1, -2), g.size, axis=-1) @ g, -1, -2)
    return x


def ssim(a, b, params: SsimParams = SsimParams()) -> np.ndarray:
    """Per-sample SSIM between two (B, C, H, W) batches.

    Local moments use a Gaussian window over valid positions only; the map
    is averaged over positions and channels.  Returns an array of B scores.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim needs identical shapes, got {a.shape} and {b.shape}")
    if a.ndim != 4:
        raise ValueError(f"ssim expects (B, C, H, W) images, got shape {a.shape}")
    if min(a.shape[2:]) < params.window:
        raise ValueError(f"images of size {a.shape[2]}x{a.shape[3]} are smaller than the {params.window}x{params.window} window")
    if params.rescale:
        a, b = minmax_rescale(a), minmax_rescale(b)
    else:
        a, b = a.astype(np.float64), b.astype(np.float64)
    g = gaussian_window(params.window, params.sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    c1, c2 = params.c1, params.c2
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return smap.mean(axis=(1, 2, 3))


@dataclass(frozen=True)
class DiceScore:
    per_class: tuple[float, ...]
    mean: float


def mean_dice(pred_labels, true_labels, num_classes: int = 4) -> DiceScore:
    """Foreground Dice per class, averaged over samples.

    A class absent from both prediction and truth of a sample scores 1.
    """
    p, t = np.asarray(_as_array(pred_labels)), np.asarray(_as_array(true_labels))
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} does not match truth {t.shape}")
    for name, arr in (("prediction", p), ("truth", t)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels must lie in 0..{num_classes - 1}")
    p = p.reshape(p.shape[0], -1)
    t = t.reshape(t.shape[0], -1)
    per_class = []
    for c in range(1, num_classes):
        pc, tc = p == c, t == c
        inter = (pc & tc).sum(axis=1)
        total = pc.sum(axis=1) + tc.sum(axis=1)
        d = np.where(total > 0, 2.0 * inter / np.maximum(total, 1), 1.0)
        per_class.append(float(d.mean()))
    return DiceScore(tuple(per_class), float(np.mean(per_class)))


# ---------------------------------------------------------------------------
# leakage reports


def defense_label(dropout_p: float = 0.0, noise_sigma: float = 0.0) -> str:
    parts = []
    if dropout_p:
        parts.append(f"dropout_p={dropout_p:g}")
    if noise_sigma:
        parts.append(f"noise_sigma={noise_sigma:g}")
    return "+".join(parts) if parts else "none"


@dataclass
class LeakageRow:
    site: int
    level: int
    defense: str
    samples: list[float] = field(default_factory=list)

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.samples))


@dataclass
class LeakageReport:
    rows: list[LeakageRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["site", "level", "defense", "mean_ssim", "ssim_samples"])
        for r in self.rows:
            w.writerow([r.site, r.level, r.defense, repr(r.mean_ssim), ";".join(repr(float(s)) for s in r.samples)])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'site':>4} {'level':>5} {'defense':<28} {'mean SSIM':>9}"]
        for r in self.rows:
            lines.append(f"{r.site:>4} {r.level:>5} {r.defense:<28} {r.mean_ssim:>9.4f}")
        return "\n".join(lines)

    def mean_by(self, level: int | None = None, defense: str | None = None) -> float:
        vals = [s for r in self.rows
                if (level is None or r.level == level) and (defense is None or r.defense == defense)
                for s in r.samples]
        if not vals:
            raise KeyError(f"no rows for level={level} defense={defense}")
        return float(np.mean(vals))


def build_leakage_report(entries: Iterable[tuple[int, int, str, Sequence[float]]]) -> LeakageReport:
    """Group (site, level, defense, per-sample SSIM) entries into report rows.

    Rows are ordered by site, level, then defense in first-seen order.
    """
    grouped: dict[tuple[int, int, str], LeakageRow] = {}
    defense_order: dict[str, int] = {}
    for site, level, defense, samples in entries:
        defense_order.setdefault(defense, len(defense_order))
        key = (int(site), int(level), defense)
        row = grouped.setdefault(key, LeakageRow(int(site), int(level), defense))
        row.samples.extend(float(s) for s in samples)
    if not grouped:
        raise ValueError("leakage report needs at least one inversion result")
    for row in grouped.values():
        if not row.samples:
            raise ValueError(f"row {row.site}/{row.level}/{row.defense} has no SSIM samples")
    rows = sorted(grouped.values(), key=lambda r: (r.site, r.level, defense_order[r.defense]))
    return LeakageReport(rows)
