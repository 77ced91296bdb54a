"""Progressive-shrinking search: FLOPs-weighted L1 on importance factors,
threshold pruning every few epochs, batch-norm recalibration.

Importance factors are the batch-norm scales directly behind each search
unit (depthwise-group scales for convolution channels, projector scales for
tokens). Training minimizes task loss plus λ·Σ Δ_i·|α_i|; units whose |α|
falls strictly below ε are removed in one sweep every `prune_every` epochs,
after which batch-norm running statistics are rebuilt by forward-only
cumulative averaging. Cost weights Δ are fixed per convolution unit and
refreshed against the remaining token count at the start of every epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .blocks import CONV_KINDS
from .flops import delta_of_unit, network_flops
from .supernet import Supernet, SupernetConfig, build_supernet
from .tensor import (
    BatchNorm,
    ConfigurationError,
    Tensor,
    absolute,
    no_grad,
    sum_all,
)
from .toytasks import (
    ToyDataset,
    classification_accuracy,
    make_dataset,
    mean_iou,
    pixel_accuracy,
    task_loss,
)


class TrainingAbort(RuntimeError):
    """Raised when training produces a non-finite loss; carries a snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class SearchUnit:
    """One prunable atom: its identity, importance binding and cost weight."""

    block_path: str
    kind: str  # conv3 | conv5 | conv7 | token
    index: int
    delta: int
    alpha: float
    alive: bool = True


@dataclass
class SearchConfig:
    lam: float = 1e-4
    epsilon: float = 1e-3
    prune_every: int = 5
    epochs: int = 60
    lr: float = 0.05
    min_lr: float = 0.0
    momentum: float = 0.9
    batch_size: int = 12
    recalibration_batches: int = 16
    seed: int = 0

    def validate(self) -> None:
        if not self.lam > 0:
            raise ConfigurationError(f"penalty coefficient must be positive, got {self.lam}")
        if not self.epsilon > 0:
            raise ConfigurationError(f"prune threshold must be positive, got {self.epsilon}")
        if self.prune_every < 1:
            raise ConfigurationError(f"prune period must be >= 1, got {self.prune_every}")
        if self.epochs < 1 or self.batch_size < 1 or self.recalibration_batches < 1:
            raise ConfigurationError("epochs, batch size and recalibration batches must be >= 1")

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "epsilon": self.epsilon,
            "prune_every": self.prune_every,
            "epochs": self.epochs,
            "lr": self.lr,
            "min_lr": self.min_lr,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
            "recalibration_batches": self.recalibration_batches,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        cfg = cls()
        names = {f: f for f in cls.__dataclass_fields__}
        names["lambda"] = "lam"
        for key, value in d.items():
            if key not in names:
                raise ConfigurationError(f"unknown search option {key!r}")
            setattr(cfg, names[key], value)
        return cfg


class SGD:
    """Plain momentum SGD; velocity buffers live on the tensors so structural
    pruning keeps them aligned with the surviving entries."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.momentum = momentum

    def set_params(self, params: Iterable[Tensor]) -> None:
        self.params = [p for p in params if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            if self.momentum:
                if p.velocity is None:
                    p.velocity = np.zeros_like(p.data)
                p.velocity *= self.momentum
                p.velocity += p.grad
                update = p.velocity
            else:
                update = p.grad
            p.data -= self.lr * update


def cosine_lr(config: SearchConfig, epoch_index: int) -> float:
    """Cosine decay from lr to min_lr over the epoch budget (0-indexed)."""
    span = max(config.epochs - 1, 1)
    t = min(epoch_index, span)
    return config.min_lr + 0.5 * (config.lr - config.min_lr) * (1 + math.cos(math.pi * t / span))


# ---------------------------------------------------------------------------
# Units, penalty
# ---------------------------------------------------------------------------


def delta_table(net: Supernet) -> dict[tuple[str, str], int]:
    """Current cost weight per (block, kind) for every alive unit kind."""
    table: dict[tuple[str, str], int] = {}
    for path, blk in net.named_blocks():
        counts = blk.alive_counts()
        for kind in (*CONV_KINDS, "token"):
            if counts[kind] > 0:
                table[(path, kind)] = delta_of_unit(blk, kind)
    return table


def enumerate_search_units(net: Supernet) -> list[SearchUnit]:
    """Every alive unit with its importance factor and current cost weight."""
    table = delta_table(net)
    units = []
    for path, blk in net.named_blocks():
        for kind, idx in blk.unit_kinds():
            units.append(
                SearchUnit(path, kind, idx, table[(path, kind)], blk.alpha_of(kind, idx))
            )
    return units


def weighted_l1(terms: list[tuple[Tensor, float]], lam: float) -> Tensor:
    """λ · Σ Δ·|γ| over (scale-vector, Δ) pairs, differentiable in the scales."""
    total: Tensor | None = None
    for gamma, delta in terms:
        term = sum_all(absolute(gamma)) * (lam * delta)
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=np.float32))
    return total


def penalty(net: Supernet, lam: float, deltas: dict | None = None) -> Tensor:
    """Resource-aware L1 penalty over all alive search units."""
    if deltas is None:
        deltas = delta_table(net)
    terms: list[tuple[Tensor, float]] = []
    for path, blk in net.named_blocks():
        if blk.degenerate is not None:
            continue
        for gi, kind in enumerate(CONV_KINDS):
            if len(blk.alive_conv[kind]) > 0:
                terms.append((blk.groups[gi].bn.gamma, float(deltas[(path, kind)])))
        if blk.transformer is not None and blk.transformer.n > 0:
            terms.append((blk.transformer.proj_bn.gamma, float(deltas[(path, "token")])))
    return weighted_l1(terms, lam)


# ---------------------------------------------------------------------------
# Training, pruning, recalibration
# ---------------------------------------------------------------------------


def _batches(dataset: ToyDataset, batch_size: int, order: np.ndarray):
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield Tensor(dataset.images[idx]), dataset.labels[idx]


def train_epoch(
    net: Supernet,
    dataset: ToyDataset,
    config: SearchConfig,
    optimizer: SGD,
    epoch: int,
    deltas: dict | None = None,
) -> dict:
    """One pass of task-plus-penalty gradient steps; deterministic given seed."""
    if deltas is None:
        deltas = delta_table(net)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7919, epoch]))
    order = rng.permutation(len(dataset))
    net.train()
    task_losses, penalties = [], []
    for step, (x, labels) in enumerate(_batches(dataset, config.batch_size, order)):
        optimizer.zero_grad()
        logits = net.forward(x)
        task = task_loss(logits, labels, dataset.kind)
        if config.lam > 0:
            pen = penalty(net, config.lam, deltas)
            loss = task + pen
            pen_value = float(pen.data)
        else:
            loss = task
            pen_value = 0.0
        if not np.isfinite(loss.data):
            raise TrainingAbort(
                f"non-finite loss at epoch {epoch}, step {step}",
                snapshot={
                    "epoch": epoch,
                    "step": step,
                    "task_loss": float(task.data),
                    "penalty": pen_value,
                    "lr": optimizer.lr,
                },
            )
        loss.backward()
        optimizer.step()
        task_losses.append(float(task.data))
        penalties.append(pen_value)
    return {
        "task_loss": float(np.mean(task_losses)),
        "penalty": float(np.mean(penalties)),
        "steps": len(task_losses),
    }


@dataclass
class PruneReport:
    removed: list[tuple[str, str, int]] = field(default_factory=list)
    flops_before: int = 0
    flops_after: int = 0
    alive_before: int = 0
    alive_after: int = 0


def prune_step(net: Supernet, epsilon: float) -> PruneReport:
    """Remove every alive unit with |α| strictly below ε; empty removal is a no-op."""
    report = PruneReport(
        flops_before=network_flops(net).total, alive_before=net.unit_total()
    )
    for path, blk in net.named_blocks():
        victims = [
            (kind, idx)
            for kind, idx in blk.unit_kinds()
            if abs(blk.alpha_of(kind, idx)) < epsilon
        ]
        if victims:
            blk.prune(victims)
            report.removed.extend((path, kind, idx) for kind, idx in victims)
    report.flops_after = network_flops(net).total
    report.alive_after = net.unit_total()
    return report


def recalibrate_bn(net: Supernet, dataset: ToyDataset, batches: int, batch_size: int) -> None:
    """Rebuild batch-norm running statistics by cumulative averaging over
    forward-only passes; gradients and learned parameters are untouched."""
    if len(dataset) == 0:
        raise ValueError("cannot recalibrate on an empty dataset")
    norms: list[BatchNorm] = []

    def collect(m):
        if isinstance(m, BatchNorm):
            norms.append(m)

    net.apply_modules(collect)
    for bn in norms:
        bn.reset_running_stats()
        bn.recalibrating = True
    order = np.arange(len(dataset))
    try:
        with no_grad():
            done = 0
            while done < batches:
                for x, _ in _batches(dataset, batch_size, order):
                    net.forward(x)
                    done += 1
                    if done >= batches:
                        break
    finally:
        for bn in norms:
            bn.recalibrating = False


def evaluate(net: Supernet, dataset: ToyDataset, batch_size: int) -> dict:
    """Eval-mode metrics on a dataset; deterministic for a fixed network."""
    net.eval()
    logits_parts = []
    order = np.arange(len(dataset))
    with no_grad():
        for x, _ in _batches(dataset, batch_size, order):
            logits_parts.append(net.forward(x).data)
    logits = np.concatenate(logits_parts, axis=0)
    if dataset.kind == "classification":
        return {"kind": "classification", "accuracy": classification_accuracy(logits, dataset.labels)}
    return {
        "kind": "segmentation",
        "miou": mean_iou(logits, dataset.labels, dataset.classes),
        "pixel_accuracy": pixel_accuracy(logits, dataset.labels),
    }


# ---------------------------------------------------------------------------
# End-to-end search
# ---------------------------------------------------------------------------

_HEAD_FOR_TASK = {"segmentation": "dense", "classification": "classification"}


@dataclass
class SearchResult:
    net: Supernet
    supernet_config: SupernetConfig
    search_config: SearchConfig
    task: dict
    log_rows: list[dict]
    prune_events: list[dict]
    final_metrics: dict


def search(sup_cfg: SupernetConfig, search_cfg: SearchConfig, task: dict) -> SearchResult:
    """Unified train-prune-recalibrate loop ending in an eval-ready network."""
    sup_cfg.validate()
    search_cfg.validate()
    if _HEAD_FOR_TASK.get(task.get("kind", "segmentation")) != sup_cfg.head:
        raise ConfigurationError(
            f"head kind {sup_cfg.head!r} does not fit task kind {task.get('kind')!r}"
        )
    train_ds = make_dataset(task, "train")
    val_ds = make_dataset(task, "val")
    net = build_supernet(sup_cfg, task["classes"], task["hw"], seed=search_cfg.seed)
    optimizer = SGD(net.parameters(), lr=search_cfg.lr, momentum=search_cfg.momentum)
    log_rows: list[dict] = []
    prune_events: list[dict] = []
    for epoch in range(1, search_cfg.epochs + 1):
        optimizer.lr = cosine_lr(search_cfg, epoch - 1)
        deltas = delta_table(net)
        stats = train_epoch(net, train_ds, search_cfg, optimizer, epoch, deltas)
        if epoch % search_cfg.prune_every == 0:
            report = prune_step(net, search_cfg.epsilon)
            optimizer.set_params(net.parameters())
            recalibrate_bn(
                net, train_ds, search_cfg.recalibration_batches, search_cfg.batch_size
            )
            prune_events.append(
                {
                    "epoch": epoch,
                    "removed": len(report.removed),
                    "flops_before": report.flops_before,
                    "flops_after": report.flops_after,
                    "alive_before": report.alive_before,
                    "alive_after": report.alive_after,
                }
            )
        log_rows.append(
            {
                "epoch": epoch,
                "task_loss": stats["task_loss"],
                "penalty": stats["penalty"],
                "total_flops": network_flops(net).total,
                "alive_units": net.unit_total(),
            }
        )
    final_metrics = evaluate(net, val_ds, search_cfg.batch_size)
    return SearchResult(
        net=net,
        supernet_config=sup_cfg,
        search_config=search_cfg,
        task=dict(task),
        log_rows=log_rows,
        prune_events=prune_events,
        final_metrics=final_metrics,
    )
