"""Split-learning protocol: K site state machines and a label-site coordinator.

One iteration:

1. the coordinator broadcasts ``BatchSelect`` (sample ids + augmentation seed);
2. each site encodes its modality for those ids, passes the shared levels
   through its :class:`ShareGuard` and sends ``ActShare``;
3. the coordinator concatenates the bundles, runs the decoder and the
   segmentation loss, updates the decoder and returns one ``GradShare``
   per site holding the gradient of every shared level;
4. each site backpropagates those gradients through its local graph,
   updates its encoder and replies ``Ack``.

Messages travel as bytes through an in-process mailbox so the same state
machines could be driven across processes.
"""

from __future__ import annotations

import copy
import csv
import enum
import io
import logging
import queue
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import rng, tenfile
from .data import DatasetSplit, PhantomSet
from .metrics import DiceScore, mean_dice
from .model import (
    ActivationBundle,
    ArchSpec,
    SplitConfig,
    SplitEncoder,
    UNet,
    Variant,
    build_default_unet,
    build_split,
    decoder_forward,
    encoder_forward,
    save_checkpoint,
)
from .nn import Adam, dice_ce_loss, dropout, gaussian_noise
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

COORDINATOR = "coordinator"
COORDINATOR_SITE_ID = 255
RECV_TIMEOUT = 30.0


class ProtocolError(RuntimeError):
    """Out-of-order, mistagged or missing protocol message."""


# ---------------------------------------------------------------------------
# messages and codec


class MsgType(enum.IntEnum):
    BATCH_SELECT = 1
    ACT_SHARE = 2
    GRAD_SHARE = 3
    ACK = 4


@dataclass(frozen=True)
class BatchSelect:
    iteration: int
    indices: tuple[int, ...]
    aug_seed: int


@dataclass(frozen=True)
class ActShare:
    iteration: int
    site: int
    levels: dict[int, np.ndarray]


@dataclass(frozen=True)
class GradShare:
    iteration: int
    site: int
    levels: dict[int, np.ndarray]


@dataclass(frozen=True)
class Ack:
    iteration: int
    site: int


Message = Union[BatchSelect, ActShare, GradShare, Ack]

_HEAD = struct.Struct("<BIBB")


def encode_message(msg: Message) -> bytes:
    """Header (type u8, iteration u32, site u8, level count u8) then payload.

    Tensor payloads are a u8 level tag followed by a ``.ten`` blob each.
    BatchSelect carries u64 augmentation seed, u32 count and u32 sample ids.
    """
    if isinstance(msg, BatchSelect):
        body = struct.pack("<QI", msg.aug_seed, len(msg.indices)) + struct.pack(f"<{len(msg.indices)}I", *msg.indices)
        return _HEAD.pack(MsgType.BATCH_SELECT, msg.iteration, COORDINATOR_SITE_ID, 0) + body
    if isinstance(msg, (ActShare, GradShare)):
        kind = MsgType.ACT_SHARE if isinstance(msg, ActShare) else MsgType.GRAD_SHARE
        parts = [_HEAD.pack(kind, msg.iteration, msg.site, len(msg.levels))]
        for level in sorted(msg.levels):
            parts.append(struct.pack("<B", level))
            parts.append(tenfile.encode(msg.levels[level]))
        return b"".join(parts)
    if isinstance(msg, Ack):
        return _HEAD.pack(MsgType.ACK, msg.iteration, msg.site, 0)
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def decode_message(buf: bytes) -> Message:
    if len(buf) < _HEAD.size:
        raise ProtocolError(f"message too short ({len(buf)} bytes)")
    kind, iteration, site, count = _HEAD.unpack_from(buf)
    offset = _HEAD.size
    if kind == MsgType.BATCH_SELECT:
        aug_seed, n = struct.unpack_from("<QI", buf, offset)
        offset += 12
        indices = struct.unpack_from(f"<{n}I", buf, offset)
        return BatchSelect(iteration, tuple(indices), aug_seed)
    if kind in (MsgType.ACT_SHARE, MsgType.GRAD_SHARE):
        levels = {}
        for _ in range(count):
            (level,) = struct.unpack_from("<B", buf, offset)
            levels[level], offset = tenfile.decode(buf, offset + 1)
        cls = ActShare if kind == MsgType.ACT_SHARE else GradShare
        return cls(iteration, site, levels)
    if kind == MsgType.ACK:
        return Ack(iteration, site)
    raise ProtocolError(f"unknown message type {kind}")


# ---------------------------------------------------------------------------
# transport


class Mailbox:
    """In-process transport: one FIFO inbox per endpoint, messages as bytes."""

    def __init__(self, names: Sequence[str], timeout: float = RECV_TIMEOUT):
        self.timeout = timeout
        self._inbox = {name: queue.Queue() for name in names}
        self.bytes_sent = 0

    def send(self, sender: str, dest: str, msg: Message) -> None:
        payload = encode_message(msg)
        self.bytes_sent += len(payload)
        self._inbox[dest].put((sender, payload))

    def recv(self, name: str, expect: type, timeout: float | None = None) -> tuple[str, Message]:
        try:
            sender, payload = self._inbox[name].get(timeout=self.timeout if timeout is None else timeout)
        except queue.Empty:
            raise ProtocolError(f"{name}: timed out waiting for {expect.__name__}") from None
        msg = decode_message(payload)
        if not isinstance(msg, expect):
            raise ProtocolError(f"{name}: expected {expect.__name__}, got {type(msg).__name__} from {sender}")
        return sender, msg


def site_name(k: int) -> str:
    return f"site{k}"


# ---------------------------------------------------------------------------
# defenses at the share boundary


@dataclass(frozen=True)
class ShareGuard:
    dropout_p: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    @property
    def is_identity(self) -> bool:
        return self.dropout_p == 0.0 and self.noise_sigma == 0.0


def apply_guard(guard: ShareGuard, bundle: ActivationBundle, seed: int, iteration: int) -> ActivationBundle:
    """Dropout then Gaussian noise on every shared level.

    The result stays attached to the site's graph: backward applies the
    dropout mask and passes through the additive noise unchanged.
    """
    out = {}
    for level, x in bundle.levels.items():
        y = dropout(x, guard.dropout_p, rng.stream(seed, "dropout", iteration, bundle.site, level))
        y = gaussian_noise(y, guard.noise_sigma, rng.stream(seed, "noise", iteration, bundle.site, level))
        out[level] = y
    return ActivationBundle(bundle.site, out)


def flip_mask(aug_seed: int, batch: int) -> np.ndarray:
    """Per-sample horizontal-flip decisions shared by every site."""
    return rng.stream(aug_seed, "flip").random(batch) < 0.5


def augment(images: np.ndarray, flips: np.ndarray) -> np.ndarray:
    out = images.copy()
    out[flips] = out[flips][..., ::-1]
    return out


# ---------------------------------------------------------------------------
# state machines


class Site:
    """Data-holding party k: owns one modality, its encoder and optimizer."""

    def __init__(self, k: int, encoder: SplitEncoder, modality: np.ndarray, net: Mailbox,
                 variant: Variant, guard: ShareGuard = ShareGuard(), seed: int = 0, lr: float = 1e-3):
        self.k = k
        self.name = site_name(k)
        self.encoder = encoder
        self.modality = modality
        self.net = net
        self.variant = Variant(variant)
        self.guard = guard
        self.seed = seed
        self.opt = Adam(encoder.parameters(), lr)
        self.iteration = 0
        self.last_input: np.ndarray | None = None
        self._shared: ActivationBundle | None = None
        self.busy = 0.0

    def forward_phase(self) -> None:
        _, msg = self.net.recv(self.name, BatchSelect)
        t0 = time.perf_counter()
        if msg.iteration != self.iteration + 1:
            raise ProtocolError(f"{self.name}: BatchSelect for iteration {msg.iteration}, expected {self.iteration + 1}")
        self.iteration = msg.iteration
        idx = np.asarray(msg.indices, dtype=np.int64)
        batch = augment(self.modality[idx], flip_mask(msg.aug_seed, len(idx)))[:, None]
        self.last_input = batch
        bundle = encoder_forward(self.encoder, Tensor(batch), self.variant)
        self._shared = apply_guard(self.guard, bundle, self.seed, self.iteration)
        levels = {i: t.data for i, t in self._shared.levels.items()}
        self.busy = time.perf_counter() - t0
        self.net.send(self.name, COORDINATOR, ActShare(self.iteration, self.k, levels))

    def backward_phase(self) -> None:
        _, msg = self.net.recv(self.name, GradShare)
        t0 = time.perf_counter()
        if msg.iteration != self.iteration or msg.site != self.k:
            raise ProtocolError(f"{self.name}: GradShare tagged (iteration {msg.iteration}, site {msg.site}), "
                                f"expected ({self.iteration}, {self.k})")
        shared = self._shared
        if shared is None or set(msg.levels) != set(shared.levels):
            raise ProtocolError(f"{self.name}: GradShare levels {sorted(msg.levels)} do not match shared levels")
        for p in self.opt.params:
            p.grad = None
        lv = sorted(shared.levels)
        backward([shared.levels[i] for i in lv], [msg.levels[i] for i in lv], inputs=self.opt.params)
        self.opt.step()
        self._shared = None
        self.busy += time.perf_counter() - t0
        self.net.send(self.name, COORDINATOR, Ack(self.iteration, self.k))

    def run_iteration(self) -> None:
        self.forward_phase()
        self.backward_phase()


class Coordinator:
    """Label site: owns the decoder, the labels and the batch sampler."""

    def __init__(self, decoder, labels: np.ndarray, num_sites: int, net: Mailbox, variant: Variant,
                 lr: float = 1e-3):
        self.decoder = decoder
        self.labels = labels
        self.num_sites = num_sites
        self.net = net
        self.variant = Variant(variant)
        self.opt = Adam(decoder.parameters(), lr)
        self.iteration = 0
        self.record = False
        self.received: dict[tuple[int, int], np.ndarray] = {}
        self._batch: BatchSelect | None = None
        self.last_loss = float("nan")
        self.last_pred: np.ndarray | None = None
        self.last_labels: np.ndarray | None = None

    def broadcast(self, indices: Sequence[int], aug_seed: int) -> BatchSelect:
        self.iteration += 1
        msg = BatchSelect(self.iteration, tuple(int(i) for i in indices), int(aug_seed))
        self._batch = msg
        for k in range(self.num_sites):
            self.net.send(COORDINATOR, site_name(k), msg)
        return msg

    def collect_and_update(self) -> float:
        shares: dict[int, ActShare] = {}
        while len(shares) < self.num_sites:
            _, msg = self.net.recv(COORDINATOR, ActShare)
            if msg.iteration != self.iteration:
                raise ProtocolError(f"ActShare from site {msg.site} tagged iteration {msg.iteration}, expected {self.iteration}")
            if msg.site in shares or not 0 <= msg.site < self.num_sites:
                raise ProtocolError(f"unexpected ActShare from site {msg.site}")
            shares[msg.site] = msg
        if self.record:
            self.received = {(k, i): a.copy() for k, m in shares.items() for i, a in m.levels.items()}

        leaves = {k: {i: Tensor(a, requires_grad=True) for i, a in m.levels.items()} for k, m in shares.items()}
        bundles = [ActivationBundle(k, lv) for k, lv in sorted(leaves.items())]
        batch = self._batch
        idx = np.asarray(batch.indices, dtype=np.int64)
        labels = augment(self.labels[idx], flip_mask(batch.aug_seed, len(idx)))

        logits = decoder_forward(self.decoder, bundles, self.variant)
        loss = dice_ce_loss(logits, labels)
        for p in self.opt.params:
            p.grad = None
        flat = [t for lv in leaves.values() for t in lv.values()]
        backward([loss], inputs=self.opt.params + flat)
        self.opt.step()
        self.last_loss = loss.item()
        self.last_pred = logits.data.argmax(axis=1)
        self.last_labels = labels

        for k in sorted(leaves):
            grads = {i: t.grad for i, t in leaves[k].items()}
            self.net.send(COORDINATOR, site_name(k), GradShare(self.iteration, k, grads))
        return self.last_loss

    def await_acks(self) -> None:
        acked = set()
        while len(acked) < self.num_sites:
            _, msg = self.net.recv(COORDINATOR, Ack)
            if msg.iteration != self.iteration:
                raise ProtocolError(f"Ack from site {msg.site} tagged iteration {msg.iteration}, expected {self.iteration}")
            acked.add(msg.site)


@dataclass
class StepRecord:
    iteration: int
    loss: float
    site_seconds: dict[int, float]
    coordinator_seconds: float


def run_training_step(coord: Coordinator, sites: Sequence[Site], indices: Sequence[int], aug_seed: int,
                      schedule: str = "sequential", order: Sequence[int] | None = None) -> StepRecord:
    """Drive one lock-step iteration.

    ``schedule="sequential"`` runs the site phases in ``order`` on the
    calling thread; ``"threads"`` runs every site on its own thread.
    """
    order = list(range(len(sites))) if order is None else list(order)
    if sorted(order) != list(range(len(sites))):
        raise ValueError(f"order must be a permutation of site indices, got {order}")
    coord.broadcast(indices, aug_seed)
    t0 = time.perf_counter()
    if schedule == "sequential":
        for k in order:
            sites[k].forward_phase()
        loss = coord.collect_and_update()
        t1 = time.perf_counter()
        for k in order:
            sites[k].backward_phase()
        coord.await_acks()
    elif schedule == "threads":
        errors: list[BaseException] = []

        def _run(site: Site):
            try:
                site.run_iteration()
            except BaseException as exc:  # surfaced on the driver thread
                errors.append(exc)

        threads = [threading.Thread(target=_run, args=(sites[k],), name=sites[k].name) for k in order]
        for t in threads:
            t.start()
        try:
            loss = coord.collect_and_update()
            t1 = time.perf_counter()
            coord.await_acks()
        finally:
            for t in threads:
                t.join()
        if errors:
            raise errors[0]
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    coord_seconds = t1 - t0 - sum(s.busy for s in sites) if schedule == "sequential" else t1 - t0
    return StepRecord(coord.iteration, loss, {s.k: s.busy for s in sites}, max(coord_seconds, 0.0))


# ---------------------------------------------------------------------------
# experiment drivers

MODEL_VARIANTS = {
    "unet_central": None,
    "split_all_skips": Variant.ALL_SKIPS,
    "split_no_skips": Variant.NO_SKIPS,
    "split_x3_x4": Variant.X3_X4_ONLY,
}


@dataclass(frozen=True)
class TrainSettings:
    sites: int = 4
    variant: str = "split_all_skips"
    dropout_p: float = 0.0
    noise_sigma: float = 0.0
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    lr: float = 1e-3
    schedule: str = "sequential"

    @property
    def guard(self) -> ShareGuard:
        return ShareGuard(self.dropout_p, self.noise_sigma)


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    dice: DiceScore


METRICS_COLUMNS = ["epoch", "split", "loss", "dice_mean", "dice_per_class"]


def metrics_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in history:
        w.writerow([r.epoch, r.split, repr(r.loss), repr(r.dice.mean), ";".join(repr(d) for d in r.dice.per_class)])
    return buf.getvalue()


def epoch_batches(indices: Sequence[int], batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Seeded shuffle cut into ceil(n / batch_size) batches."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    perm = rng.stream(seed, "batches", epoch).permutation(np.asarray(indices, dtype=np.int64))
    return [perm[i:i + batch_size].tolist() for i in range(0, len(perm), batch_size)]


class _Runner:
    settings: TrainSettings
    data: PhantomSet
    split: DatasetSplit
    iteration: int

    def _train_batch(self, batch: list[int], aug_seed: int) -> tuple[float, np.ndarray, np.ndarray]:
        raise NotImplementedError

    def predict_logits(self, idx: np.ndarray) -> Tensor:
        raise NotImplementedError

    def evaluate(self, indices: Sequence[int], batch_size: int = 8) -> tuple[float, DiceScore]:
        """Loss and Dice without any share defense (inference mode)."""
        idx = np.asarray(indices, dtype=np.int64)
        losses, preds = [], []
        with no_grad():
            for s in range(0, len(idx), batch_size):
                chunk = idx[s:s + batch_size]
                logits = self.predict_logits(chunk)
                losses.append(dice_ce_loss(logits, self.data.labels[chunk]).item() * len(chunk))
                preds.append(logits.data.argmax(axis=1))
        return float(np.sum(losses) / len(idx)), mean_dice(np.concatenate(preds), self.data.labels[idx])

    def run_epoch(self, epoch: int) -> list[EpochRecord]:
        losses, preds, truths = [], [], []
        for batch in epoch_batches(self.split.train, self.settings.batch_size, self.settings.seed, epoch):
            aug_seed = rng.derive_seed(self.settings.seed, "aug", self.iteration + 1)
            loss, pred, truth = self._train_batch(batch, aug_seed)
            losses.append(loss * len(batch))
            preds.append(pred)
            truths.append(truth)
        n = sum(len(p) for p in preds)
        train = EpochRecord(epoch, "train", float(np.sum(losses) / n),
                            mean_dice(np.concatenate(preds), np.concatenate(truths)))
        val_loss, val_dice = self.evaluate(self.split.val)
        return [train, EpochRecord(epoch, "val", val_loss, val_dice)]

    def train(self, epochs: int | None = None) -> list[EpochRecord]:
        history = []
        for epoch in range(1, (self.settings.epochs if epochs is None else epochs) + 1):
            recs = self.run_epoch(epoch)
            log.info("epoch %d: train loss %.4f dice %.4f | val loss %.4f dice %.4f", epoch,
                     recs[0].loss, recs[0].dice.mean, recs[1].loss, recs[1].dice.mean)
            history.extend(recs)
        return history


class SplitLearningRun(_Runner):
    """K sites plus coordinator wired over a mailbox, trained on phantoms."""

    def __init__(self, data: PhantomSet, split: DatasetSplit, settings: TrainSettings,
                 arch: ArchSpec = ArchSpec()):
        variant = MODEL_VARIANTS.get(settings.variant)
        if variant is None:
            raise ValueError(f"{settings.variant!r} is not a split-learning variant")
        if data.num_modalities != settings.sites:
            raise ValueError(f"data has {data.num_modalities} modalities but {settings.sites} sites are configured")
        self.settings, self.data, self.split, self.arch = settings, data, split, arch
        self.variant = variant
        self.encoders, self.decoder = build_split(arch, SplitConfig(settings.sites, 0, variant), settings.seed)
        self.net = Mailbox([COORDINATOR] + [site_name(k) for k in range(settings.sites)])
        self.sites = [Site(k, enc, data.modality(k), self.net, variant, settings.guard, settings.seed, settings.lr)
                      for k, enc in enumerate(self.encoders)]
        self.coord = Coordinator(self.decoder, data.labels, settings.sites, self.net, variant, settings.lr)
        self.iteration = 0
        self.records: list[StepRecord] = []

    def step(self, batch: Sequence[int], aug_seed: int, order: Sequence[int] | None = None) -> StepRecord:
        rec = run_training_step(self.coord, self.sites, batch, aug_seed, self.settings.schedule, order)
        self.iteration = rec.iteration
        self.records.append(rec)
        return rec

    def _train_batch(self, batch, aug_seed):
        rec = self.step(batch, aug_seed)
        return rec.loss, self.coord.last_pred, self.coord.last_labels

    def predict_logits(self, idx: np.ndarray) -> Tensor:
        bundles = [encoder_forward(enc, Tensor(self.data.modality(k)[idx][:, None]), self.variant)
                   for k, enc in enumerate(self.encoders)]
        return decoder_forward(self.decoder, bundles, self.variant)

    def intercept_step(self, batch: Sequence[int] | None = None) -> dict[int, dict[str, np.ndarray]]:
        """Run one recorded step and return what the label site saw.

        The encoder parameters used for the forward pass are snapshotted
        first so a white-box attacker can replay them.
        """
        if batch is None:
            batch = epoch_batches(self.split.train, self.settings.batch_size, self.settings.seed, 0)[0]
        snapshots = {k: copy.deepcopy(enc) for k, enc in enumerate(self.encoders)}
        self.coord.record = True
        try:
            self.step(batch, rng.derive_seed(self.settings.seed, "aug", self.iteration + 1))
        finally:
            self.coord.record = False
        self.intercept_encoders = snapshots
        return {k: {"input": self.sites[k].last_input} for k in range(self.settings.sites)}

    def intercept(self, site: int, level: int) -> tuple[np.ndarray, np.ndarray]:
        """(shared activation, ground-truth input) captured by the last recorded step."""
        if level not in self.variant.shared_levels:
            raise ValueError(f"level {level} is not shared under {self.variant.value} "
                             f"(shared: {list(self.variant.shared_levels)})")
        if (site, level) not in self.coord.received:
            raise KeyError(f"no recorded activation for site {site} level {level}; run intercept_step first")
        return self.coord.received[(site, level)], self.sites[site].last_input

    def dump_intercepts(self, dump_dir: str | Path, ckpt_dir: str | Path) -> list[Path]:
        dump_dir, ckpt_dir = Path(dump_dir), Path(ckpt_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for k in range(self.settings.sites):
            for level in self.variant.shared_levels:
                act, orig = self.intercept(k, level)
                p = dump_dir / f"site{k}_level{level}.ten"
                tenfile.save(p, act)
                written.append(p)
            p = dump_dir / f"site{k}_input.ten"
            tenfile.save(p, orig)
            written.append(p)
            p = ckpt_dir / f"encoder_site{k}.ckpt"
            save_checkpoint(p, self.intercept_encoders[k], self.checkpoint_header(site=k))
            written.append(p)
        return written

    def checkpoint_header(self, **extra) -> dict:
        return {"arch": list(self.arch.features), "sites": self.settings.sites,
                "variant": self.variant.value, "seed": self.settings.seed, **extra}

    def save_checkpoints(self, ckpt_dir: str | Path) -> None:
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        for k, enc in enumerate(self.encoders):
            save_checkpoint(ckpt_dir / f"final_encoder_site{k}.ckpt", enc, self.checkpoint_header(site=k))
        save_checkpoint(ckpt_dir / "final_decoder.ckpt", self.decoder, self.checkpoint_header())


class CentralRun(_Runner):
    """Centralized baseline: one U-Net over all modalities stacked as channels."""

    def __init__(self, data: PhantomSet, split: DatasetSplit, settings: TrainSettings,
                 arch: ArchSpec | None = None):
        self.settings, self.data, self.split = settings, data, split
        self.arch = arch or ArchSpec(in_channels=data.num_modalities)
        self.model: UNet = build_default_unet(self.arch, settings.seed)
        self.opt = Adam(self.model.parameters(), settings.lr)
        self.iteration = 0

    def _train_batch(self, batch, aug_seed):
        self.iteration += 1
        idx = np.asarray(batch, dtype=np.int64)
        flips = flip_mask(aug_seed, len(idx))
        images = augment(self.data.images[idx], flips)
        labels = augment(self.data.labels[idx], flips)
        for p in self.opt.params:
            p.grad = None
        logits = self.model(Tensor(images))
        loss = dice_ce_loss(logits, labels)
        backward([loss], inputs=self.opt.params)
        self.opt.step()
        return loss.item(), logits.data.argmax(axis=1), labels

    def predict_logits(self, idx: np.ndarray) -> Tensor:
        return self.model(Tensor(self.data.images[idx]))

    def save_checkpoints(self, ckpt_dir: str | Path) -> None:
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt_dir / "final_unet.ckpt", self.model,
                        {"arch": list(self.arch.features), "sites": 1, "variant": "unet_central",
                         "seed": self.settings.seed})


def make_run(data: PhantomSet, split: DatasetSplit, settings: TrainSettings) -> _Runner:
    if settings.variant not in MODEL_VARIANTS:
        raise ValueError(f"unknown variant {settings.variant!r}; choose from {sorted(MODEL_VARIANTS)}")
    if MODEL_VARIANTS[settings.variant] is None:
        return CentralRun(data, split, settings)
    return SplitLearningRun(data, split, settings)
