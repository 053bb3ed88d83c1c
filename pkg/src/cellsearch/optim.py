"""Alternating two-level optimization: momentum SGD on network weights driven
by the training half, adaptive-moment updates on architecture coefficients
driven by the validation half (first-order approximation of the nested
problem)."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from .data import Dataset, batches
from .layers import ParamStore
from .network import SuperNet
from .search_space import AlphaParams
from .tensor import Tensor
from . import ops

COSINE = "cosine"
EXPONENTIAL = "exponential"


@dataclass
class WeightOptConfig:
    """Momentum-SGD settings for the network weights."""

    lr0: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    epochs: int = 50
    schedule: str = COSINE
    decay: float = 0.97
    batch_size: int = 64
    grad_clip: Optional[float] = 5.0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.schedule not in (COSINE, EXPONENTIAL):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def search_defaults(cls) -> "WeightOptConfig":
        return cls()

    @classmethod
    def train_defaults(cls) -> "WeightOptConfig":
        return cls(lr0=0.1, epochs=150, schedule=EXPONENTIAL, decay=0.97, grad_clip=None)


@dataclass
class ArchOptConfig:
    """Adaptive-moment settings for the architecture coefficients."""

    lr: float = 3e-4
    weight_decay: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    # Flag for the alternative update that differentiates the training-batch
    # loss instead of the validation-batch loss.
    on_train_loss: bool = False

    def __post_init__(self):
        # lr 0 freezes the coefficients (plain weight training)
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float

    def __post_init__(self):
        for name in ("train_acc", "val_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


CURVES_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds"


def cosine_lr(lr0: float, epoch: int, epochs: int) -> float:
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / epochs))


def exponential_lr(lr0: float, decay: float, epoch: int) -> float:
    return lr0 * decay ** epoch


def learning_rate(config: WeightOptConfig, epoch: int) -> float:
    if config.schedule == COSINE:
        return cosine_lr(config.lr0, epoch, config.epochs)
    return exponential_lr(config.lr0, config.decay, epoch)


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint 2-norm is at most ``max_norm``."""
    total = 0.0
    grads = []
    for _, p in store.params():
        if p.grad is not None:
            grads.append(p.grad)
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


class SGD:
    """Momentum SGD with coupled weight decay over a parameter store."""

    def __init__(self, store: ParamStore, config: WeightOptConfig):
        self.store = store
        self.config = config
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, epoch: int):
        lr = learning_rate(self.config, epoch)
        wd = self.config.weight_decay
        mom = self.config.momentum
        for name, p in self.store.params():
            g = p.grad
            if g is not None and not np.isfinite(g).all():
                raise RuntimeError(f"non-finite gradient for parameter {name!r}; aborting step")
            update = g if g is not None else np.zeros_like(p.data)
            if wd:
                update = update + wd * p.data
            v = self._velocity.get(name)
            v = update if v is None else mom * v + update
            self._velocity[name] = v
            p.data -= lr * v


class ArchAdam:
    """Adaptive-moment updates with decoupled weight decay for the
    coefficient matrices."""

    def __init__(self, alphas: AlphaParams, config: ArchOptConfig):
        self.alphas = alphas
        self.config = config
        self._m = {kind: np.zeros_like(t.data) for kind, t in alphas.tensors()}
        self._v = {kind: np.zeros_like(t.data) for kind, t in alphas.tensors()}
        self._t = 0

    def step(self):
        cfg = self.config
        self._t += 1
        bias1 = 1.0 - cfg.beta1 ** self._t
        bias2 = 1.0 - cfg.beta2 ** self._t
        for kind, p in self.alphas.tensors():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise RuntimeError(f"non-finite gradient for {kind} coefficients; aborting step")
            m = self._m[kind]
            v = self._v[kind]
            m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            if cfg.weight_decay:
                p.data -= cfg.lr * cfg.weight_decay * p.data
            p.data -= cfg.lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)


def _cycled(make_iter) -> Iterator:
    """Endless stream over a re-creatable iterator factory."""
    epoch = 0
    while True:
        yielded = False
        for item in make_iter(epoch):
            yielded = True
            yield item
        if not yielded:
            raise ValueError("empty dataset in optimization loop")
        epoch += 1


def evaluate(net: SuperNet, dataset: Dataset, batch_size: int,
             alphas: Optional[AlphaParams] = None,
             stats: Optional[tuple] = None) -> tuple[float, float]:
    """Deterministic eval-mode pass; returns (mean loss, accuracy)."""
    prior = net.store.mode
    net.eval()
    try:
        losses, hits, total = 0.0, 0, 0
        for images, labels in batches(dataset, batch_size, shuffle_seed=None, epoch=0,
                                      stats=stats, dtype=net.dtype):
            logits = net.forward(Tensor(images), alphas=alphas)
            loss = ops.cross_entropy(logits, labels)
            losses += loss.item() * len(labels)
            hits += int((logits.data.argmax(axis=1) == labels).sum())
            total += len(labels)
        return losses / total, hits / total
    finally:
        net.store.mode = prior


@dataclass
class SearchResult:
    records: list[EpochRecord]
    trajectory: list[dict[str, np.ndarray]]  # per-epoch coefficient snapshots
    best_alphas: dict[str, np.ndarray]
    best_epoch: int
    best_val_acc: float


def search(net: SuperNet, alphas: AlphaParams, train_half: Dataset, val_half: Dataset,
           weight_cfg: WeightOptConfig, arch_cfg: ArchOptConfig,
           shuffle_seed: int, stats: Optional[tuple] = None,
           on_epoch: Optional[Callable[[EpochRecord, dict], None]] = None) -> SearchResult:
    """Alternate one weight step on a training batch with one coefficient
    step on a validation batch; keep the coefficient snapshot with the best
    validation accuracy.

    ``on_epoch`` (record, coefficient snapshot) fires after every epoch, for
    streaming logs.
    """
    if len(train_half.items) == 0 or len(val_half.items) == 0:
        raise ValueError("search requires non-empty training and validation halves")

    sgd = SGD(net.store, weight_cfg)
    adam = ArchAdam(alphas, arch_cfg)
    bs = weight_cfg.batch_size
    val_stream = _cycled(
        lambda sweep: batches(val_half, bs, shuffle_seed=shuffle_seed + 1, epoch=sweep,
                              stats=stats, dtype=net.dtype)
    )

    records: list[EpochRecord] = []
    trajectory: list[dict[str, np.ndarray]] = []
    best_epoch, best_acc, best_snap = -1, -1.0, alphas.snapshot()

    for epoch in range(weight_cfg.epochs):
        start = time.perf_counter()
        net.train()
        loss_sum, hit_sum, seen = 0.0, 0, 0
        for images, labels in batches(train_half, bs, shuffle_seed=shuffle_seed,
                                      epoch=epoch, stats=stats, dtype=net.dtype):
            # Step 1: weights, on the training batch.
            net.store.zero_grad()
            alphas.zero_grad()
            logits = net.forward(Tensor(images), alphas=alphas)
            loss = ops.cross_entropy(logits, labels)
            loss.backward()
            if weight_cfg.grad_clip is not None:
                clip_grad_norm(net.store, weight_cfg.grad_clip)
            sgd.step(epoch)
            loss_sum += loss.item() * len(labels)
            hit_sum += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(labels)

            # Step 2: coefficients, on a validation batch.
            if not arch_cfg.on_train_loss:
                images, labels = next(val_stream)
            net.store.zero_grad()
            alphas.zero_grad()
            logits = net.forward(Tensor(images), alphas=alphas)
            ops.cross_entropy(logits, labels).backward()
            adam.step()

        val_loss, val_acc = evaluate(net, val_half, bs, alphas=alphas, stats=stats)
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / seen,
            train_acc=hit_sum / seen,
            val_loss=val_loss,
            val_acc=val_acc,
            lr=learning_rate(weight_cfg, epoch),
            seconds=time.perf_counter() - start,
        )
        records.append(record)
        snap = alphas.snapshot()
        trajectory.append(snap)
        if on_epoch is not None:
            on_epoch(record, snap)
        if val_acc > best_acc:
            best_epoch, best_acc, best_snap = epoch, val_acc, snap

    return SearchResult(records=records, trajectory=trajectory, best_alphas=best_snap,
                        best_epoch=best_epoch, best_val_acc=best_acc)


def train_fixed(net: SuperNet, train_set: Dataset, weight_cfg: WeightOptConfig,
                shuffle_seed: int, val_set: Optional[Dataset] = None,
                stats: Optional[tuple] = None, augment: bool = False,
                augment_seed: int = 0,
                stop_at_train_acc: Optional[float] = None,
                on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> list[EpochRecord]:
    """Supervised training of a fixed-architecture network."""
    if len(train_set.items) == 0:
        raise ValueError("train_fixed requires a non-empty training set")
    sgd = SGD(net.store, weight_cfg)
    records: list[EpochRecord] = []
    for epoch in range(weight_cfg.epochs):
        start = time.perf_counter()
        net.train()
        loss_sum, hit_sum, seen = 0.0, 0, 0
        for images, labels in batches(train_set, weight_cfg.batch_size,
                                      shuffle_seed=shuffle_seed, epoch=epoch,
                                      augment=augment, augment_seed=augment_seed,
                                      stats=stats, dtype=net.dtype):
            net.store.zero_grad()
            logits = net.forward(Tensor(images))
            loss = ops.cross_entropy(logits, labels)
            loss.backward()
            if weight_cfg.grad_clip is not None:
                clip_grad_norm(net.store, weight_cfg.grad_clip)
            sgd.step(epoch)
            loss_sum += loss.item() * len(labels)
            hit_sum += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(labels)
        if val_set is not None:
            val_loss, val_acc = evaluate(net, val_set, weight_cfg.batch_size, stats=stats)
        else:
            val_loss, val_acc = float("nan"), 0.0
        records.append(EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / seen,
            train_acc=hit_sum / seen,
            val_loss=val_loss,
            val_acc=val_acc,
            lr=learning_rate(weight_cfg, epoch),
            seconds=time.perf_counter() - start,
        ))
        if on_epoch is not None:
            on_epoch(records[-1])
        if stop_at_train_acc is not None and records[-1].train_acc >= stop_at_train_acc:
            break
    return records
