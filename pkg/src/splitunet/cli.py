"""Command-line experiment runner.

Subcommands::

    gendata   write a phantom dataset directory
    train     train one model variant; write metrics, checkpoints and intercepted activations
    attack    invert intercepted activations and score them with SSIM
    sweep     train + intercept + attack for each value of one defense parameter
    report    summarize finished run directories

Every command that produces outputs writes its resolved configuration to
``<out>/config.txt``; passing that file back with ``--config`` reruns the
command with identical results.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tenfile
from .attack import AttackConfig, Tap, level_sweep, load_taps
from .data import gen_phantoms, load_phantoms, save_phantoms, save_pgm, split_dataset
from .metrics import build_leakage_report, defense_label
from .model import ArchSpec, SplitConfig, Variant, build_split, encoder_widths_for, load_checkpoint
from .slproto import MODEL_VARIANTS, ProtocolError, SplitLearningRun, TrainSettings, make_run, metrics_csv
from .tenfile import TenFormatError

log = logging.getLogger("splitunet")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every failed check."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    n: int = 200
    image_size: int = 96
    data: str = ""
    # training
    sites: int = 4
    variant: str = "split_all_skips"
    dropout_p: float = 0.0
    noise_sigma: float = 0.0
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    lr: float = 1e-3
    schedule: str = "sequential"
    # attack
    attack_steps: int = 2000
    attack_lr: float = 0.1
    alpha_act: float = 1e-3
    alpha_tv: float = 1e-4
    alpha_l2: float = 1e-5
    attack_levels: str = "0,1,2,3,4"
    attack_sites: str = "all"
    per_sample: bool = False
    dumps: str = ""
    checkpoint: str = ""

    # -- parsing ---------------------------------------------------------

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        problems, values = [], {}
        for key, raw in pairs.items():
            if key not in types:
                problems.append(f"unknown key {key!r}")
                continue
            try:
                values[key] = _coerce(types[key], raw)
            except ValueError:
                problems.append(f"{key}: cannot parse {raw!r} as {types[key]}")
        cfg = dataclasses.replace(base, **values)
        try:
            cfg.validate()
        except ConfigError as exc:
            problems.extend(exc.problems)
        if problems:
            raise ConfigError(problems)
        return cfg

    @staticmethod
    def parse_text(text: str) -> dict[str, str]:
        pairs, problems = {}, []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                problems.append(f"line {lineno}: expected key = value, got {line!r}")
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            pairs[key] = value
        if problems:
            raise ConfigError(problems)
        return pairs

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(getattr(self, k))}\n" for k in self.keys())

    # -- checks ----------------------------------------------------------

    def validate(self) -> None:
        p = []
        if self.n < 10:
            p.append(f"n must be >= 10, got {self.n}")
        if self.image_size < 16 or self.image_size % 16:
            p.append(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if self.variant not in MODEL_VARIANTS:
            p.append(f"variant must be one of {sorted(MODEL_VARIANTS)}, got {self.variant!r}")
        if self.sites < 1:
            p.append(f"sites must be >= 1, got {self.sites}")
        elif MODEL_VARIANTS.get(self.variant) is not None:
            try:
                SplitConfig(self.sites).validate(ArchSpec())
            except ValueError as exc:
                p.append(str(exc))
        if not 0 <= self.dropout_p < 1:
            p.append(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.noise_sigma < 0:
            p.append(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.batch_size < 1:
            p.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            p.append(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            p.append(f"lr must be > 0, got {self.lr}")
        if self.schedule not in ("sequential", "threads"):
            p.append(f"schedule must be sequential or threads, got {self.schedule!r}")
        if self.attack_steps < 1:
            p.append(f"attack_steps must be >= 1, got {self.attack_steps}")
        if self.attack_lr <= 0:
            p.append(f"attack_lr must be > 0, got {self.attack_lr}")
        if min(self.alpha_act, self.alpha_tv, self.alpha_l2) < 0:
            p.append("alpha_act, alpha_tv and alpha_l2 must be >= 0")
        try:
            levels = self.levels()
            if not levels or any(not 0 <= i <= 4 for i in levels):
                p.append(f"attack_levels must be a non-empty subset of 0..4, got {self.attack_levels!r}")
        except ValueError:
            p.append(f"attack_levels must be comma-separated integers, got {self.attack_levels!r}")
        if self.attack_sites != "all":
            try:
                ks = [int(s) for s in self.attack_sites.split(",")]
                if any(not 0 <= k < self.sites for k in ks):
                    p.append(f"attack_sites must lie in 0..{self.sites - 1}, got {self.attack_sites!r}")
            except ValueError:
                p.append(f"attack_sites must be 'all' or comma-separated integers, got {self.attack_sites!r}")
        if p:
            raise ConfigError(p)

    # -- derived views ---------------------------------------------------

    def levels(self) -> list[int]:
        return [int(s) for s in self.attack_levels.split(",") if s.strip()]

    def site_list(self, available: int | None = None) -> list[int]:
        n = self.sites if available is None else available
        if self.attack_sites == "all":
            return list(range(n))
        return [int(s) for s in self.attack_sites.split(",")]

    def train_settings(self) -> TrainSettings:
        return TrainSettings(self.sites, self.variant, self.dropout_p, self.noise_sigma,
                             self.batch_size, self.epochs, self.seed, self.lr, self.schedule)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(self.alpha_act, self.alpha_tv, self.alpha_l2, self.attack_steps, self.attack_lr)


def _coerce(kind, raw: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def resolve_config(path: str | None, overrides: Sequence[str], base: ExperimentConfig | None = None,
                   flags: dict[str, object] | None = None) -> ExperimentConfig:
    """Defaults <- config file <- explicit flags <- ``--set key=value``."""
    pairs: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError([f"config file {path} does not exist"])
        pairs.update(ExperimentConfig.parse_text(p.read_text()))
    for key, value in (flags or {}).items():
        if value is not None:
            pairs[key] = _render(value)
    problems = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"--set expects key=value, got {item!r}")
            continue
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig.from_pairs(pairs, base)


def write_config(out: Path, cfg: ExperimentConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())


def load_data(cfg: ExperimentConfig):
    if cfg.data:
        data = load_phantoms(cfg.data)
        if data.num_modalities < cfg.sites:
            raise ConfigError([f"{cfg.data} has {data.num_modalities} modalities, config asks for {cfg.sites} sites"])
        return data
    return gen_phantoms(cfg.n, cfg.sites, cfg.image_size, cfg.seed)


# ---------------------------------------------------------------------------
# train


def _audit_widths(cfg: ExperimentConfig) -> None:
    if MODEL_VARIANTS[cfg.variant] is None:
        return
    arch = ArchSpec()
    widths = list(encoder_widths_for(arch, cfg.sites))
    for k in range(cfg.sites):
        log.info("site %d encoder widths %s", k, widths)
    log.info("decoder input widths %s", [cfg.sites * w for w in widths])


def train_once(cfg: ExperimentConfig, data, out: Path | None = None):
    """Train; if ``out`` is given write metrics, checkpoints and intercept dumps."""
    split = split_dataset(data.n, cfg.seed)
    _audit_widths(cfg)
    run = make_run(data, split, cfg.train_settings())
    history = run.train()
    if out is not None:
        (out / "metrics.csv").write_text(metrics_csv(history))
        run.save_checkpoints(out / "checkpoints")
        if isinstance(run, SplitLearningRun):
            run.intercept_step()
            run.dump_intercepts(out / "dumps", out / "checkpoints")
    return run, history


def cmd_train(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out)
    write_config(out, cfg)
    _, history = train_once(cfg, load_data(cfg), out)
    val = [r for r in history if r.split == "val"]
    if val:
        print(f"final validation dice {val[-1].dice.mean:.4f} after {val[-1].epoch} epochs")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# attack


def load_encoders(ckpt_dir: Path, sites: Sequence[int]):
    encoders, missing = {}, []
    for k in sites:
        path = ckpt_dir / f"encoder_site{k}.ckpt"
        if not path.exists():
            missing.append(str(path))
            continue
        meta, state = load_checkpoint(path)
        arch = ArchSpec(features=tuple(meta["arch"]))
        encs, _ = build_split(arch, SplitConfig(int(meta["sites"]), 0, Variant(meta["variant"])), int(meta["seed"]))
        encs[k].load_state_dict(state)
        encoders[k] = encs[k]
    if missing:
        raise FileNotFoundError("missing checkpoint files: " + ", ".join(missing))
    return encoders


def attack_taps(taps, encoders, cfg: ExperimentConfig, defense: str, out: Path | None = None):
    rows = level_sweep(taps, encoders, cfg.attack_config(), cfg.seed, cfg.per_sample)
    if out is not None:
        (out / "dumps").mkdir(parents=True, exist_ok=True)
        (out / "gallery").mkdir(parents=True, exist_ok=True)
        for tap, row in zip(taps, rows):
            tenfile.save(out / "dumps" / f"inversion_site{row.site}_level{row.level}.ten", row.result.image)
            for b in range(row.result.image.shape[0]):
                save_pgm(out / "gallery" / f"site{row.site}_level{row.level}_b{b}.pgm", row.result.image[b, 0])
                save_pgm(out / "gallery" / f"site{row.site}_input_b{b}.pgm", tap.originals[b, 0])
    return rows, build_leakage_report((r.site, r.level, defense, r.ssim) for r in rows)


def _sites_in_dumps(dump_dir: Path) -> int:
    return len(list(dump_dir.glob("site*_input.ten")))


def cmd_attack(args, cfg: ExperimentConfig) -> int:
    if not cfg.dumps or not cfg.checkpoint:
        raise ConfigError(["attack needs --dumps and --checkpoint (or dumps/checkpoint keys)"])
    out = Path(args.out)
    dump_dir, ckpt_dir = Path(cfg.dumps), Path(cfg.checkpoint)
    if not dump_dir.is_dir():
        raise FileNotFoundError(f"dump directory {dump_dir} does not exist")
    write_config(out, cfg)
    sites = cfg.site_list(_sites_in_dumps(dump_dir) or cfg.sites)
    taps = load_taps(dump_dir, sites, cfg.levels())
    encoders = load_encoders(ckpt_dir, sites)
    _, report = attack_taps(taps, encoders, cfg, defense_label(cfg.dropout_p, cfg.noise_sigma), out)
    (out / "ssim.csv").write_text(report.to_csv())
    print(report.summary())
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep

SWEEP_BASE = ExperimentConfig(epochs=3, n=200)
SWEEP_COLUMNS = ["param", "value", "defense", "site", "level", "mean_ssim", "val_dice"]


def sweep(cfg: ExperimentConfig, param: str, values: Sequence[float], out: Path | None = None):
    """Train, intercept and attack once per value. Returns the combined rows."""
    if not values:
        raise ConfigError(["sweep needs at least one value"])
    data = load_data(cfg)
    rows, entries, metric_rows = [], [], []
    for value in values:
        run_cfg = dataclasses.replace(cfg, **{param: float(value)})
        run_cfg.validate()
        label = defense_label(run_cfg.dropout_p, run_cfg.noise_sigma)
        log.info("sweep %s=%s", param, value)
        run, history = train_once(run_cfg, data)
        if not isinstance(run, SplitLearningRun):
            raise ConfigError([f"sweep needs a split variant, got {cfg.variant!r}"])
        val_dice = [r for r in history if r.split == "val"][-1].dice.mean if history else float("nan")
        metric_rows.extend((value, r) for r in history)
        run.intercept_step()
        levels = [i for i in cfg.levels() if i in run.variant.shared_levels]
        taps = []
        for k in run_cfg.site_list():
            for i in levels:
                act, orig = run.intercept(k, i)
                taps.append(Tap(k, i, act, orig))
        encs = run.intercept_encoders
        found, _ = attack_taps(taps, encs, run_cfg, label)
        for r in found:
            m = float(np.mean(r.ssim))
            rows.append([param, repr(float(value)), label, r.site, r.level, repr(m), repr(val_dice)])
            entries.append((r.site, r.level, label, r.ssim))
    report = build_leakage_report(entries)
    if out is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        w.writerows(rows)
        (out / "sweep.csv").write_text(buf.getvalue())
        (out / "ssim.csv").write_text(report.to_csv())
        lines = metrics_csv([r for _, r in metric_rows]).splitlines()
        body = [f"{param},{lines[0]}"] + [f"{v!r},{line}" for (v, _), line in zip(metric_rows, lines[1:])]
        (out / "metrics.csv").write_text("\n".join(body) + "\n")
    return rows, report


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    try:
        values = [float(v) for v in args.values]
    except ValueError:
        raise ConfigError([f"--values must be numbers, got {args.values}"]) from None
    out = Path(args.out)
    write_config(out, cfg)
    rows, report = sweep(cfg, args.param, values, out)
    print(report.summary())
    return EXIT_OK


# ---------------------------------------------------------------------------
# gendata and report


def cmd_gendata(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError([f"output directory {out} is not empty (use --force to overwrite)"])
    cfg = ExperimentConfig(n=args.n, sites=args.sites, image_size=args.size, seed=args.seed)
    problems = []
    if cfg.n < 10:
        problems.append(f"--n must be >= 10, got {cfg.n}")
    if cfg.sites < 1:
        problems.append(f"--sites must be >= 1, got {cfg.sites}")
    if cfg.image_size < 16 or cfg.image_size % 16:
        problems.append(f"--size must be a positive multiple of 16, got {cfg.image_size}")
    if problems:
        raise ConfigError(problems)
    ps = gen_phantoms(cfg.n, cfg.sites, cfg.image_size, cfg.seed)
    save_phantoms(ps, out)
    write_config(out, cfg)
    print((out / "manifest.txt").read_text(), end="")
    return EXIT_OK


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def cmd_report(args) -> int:
    missing = [d for d in args.runs if not Path(d).is_dir()]
    if missing:
        raise FileNotFoundError("missing run directories: " + ", ".join(missing))
    for d in map(Path, args.runs):
        print(f"== {d}")
        if (d / "metrics.csv").exists():
            val = [r for r in _read_csv(d / "metrics.csv") if r["split"] == "val"]
            if val:
                print(f"validation dice {float(val[-1]['dice_mean']):.4f} (epoch {val[-1]['epoch']})")
        if (d / "ssim.csv").exists():
            rows = _read_csv(d / "ssim.csv")
            by = {}
            for r in rows:
                by.setdefault((r["defense"], int(r["level"])), []).append(float(r["mean_ssim"]))
            for (defense, level), vals in sorted(by.items()):
                print(f"{defense:>16} level {level}: mean SSIM {np.mean(vals):.4f}")
        if (d / "sweep.csv").exists():
            rows = _read_csv(d / "sweep.csv")
            dice = {r["value"]: float(r["val_dice"]) for r in rows}
            for v, dval in dice.items():
                print(f"{rows[0]['param']}={v}: validation dice {dval:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError([message])


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splitunet", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", help="flat key = value file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gendata", help="generate a phantom dataset")
    g.add_argument("--n", type=int, default=484)
    g.add_argument("--sites", type=int, default=4)
    g.add_argument("--size", type=int, default=96)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")

    t = sub.add_parser("train", help="train a model variant")
    config_args(t)
    t.add_argument("--data", help="phantom directory from gendata")

    a = sub.add_parser("attack", help="invert intercepted activations")
    config_args(a)
    a.add_argument("--dumps", help="directory with site{k}_level{i}.ten files")
    a.add_argument("--checkpoint", help="directory with encoder_site{k}.ckpt files")
    a.add_argument("--levels", help="comma-separated levels, e.g. 0,1,2,3,4")
    a.add_argument("--steps", type=int)
    a.add_argument("--seed", type=int)

    s = sub.add_parser("sweep", help="defense sweep: utility and leakage per value")
    config_args(s)
    s.add_argument("--param", required=True, choices=["dropout_p", "noise_sigma"])
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--data", help="phantom directory from gendata")

    r = sub.add_parser("report", help="summarize run directories")
    r.add_argument("runs", nargs="+")
    return p


def _dispatch(args) -> int:
    if args.command == "gendata":
        return cmd_gendata(args)
    if args.command == "report":
        return cmd_report(args)
    if args.command == "train":
        cfg = resolve_config(args.config, args.set, flags={"data": args.data})
        return cmd_train(args, cfg)
    if args.command == "attack":
        flags = {"dumps": args.dumps, "checkpoint": args.checkpoint, "attack_levels": args.levels,
                 "attack_steps": args.steps, "seed": args.seed}
        cfg = resolve_config(args.config, args.set, flags=flags)
        return cmd_attack(args, cfg)
    cfg = resolve_config(args.config, args.set, SWEEP_BASE, flags={"data": args.data})
    return cmd_sweep(args, cfg)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, FileNotFoundError, TenFormatError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
