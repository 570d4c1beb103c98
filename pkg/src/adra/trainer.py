"""Training loops: backbone pretraining and task training under a partition.

SGD with momentum; weight decay is folded into the gradient before the
momentum buffer. The learning rate is piecewise constant with factor-0.1
drops at the configured epoch milestones. Task batches under outlier
exposure are balanced: half nominal, half corpus, with the corpus cycled
(reshuffled per cycle) independently of the nominal epoch shuffle.

Under the adra partition the frozen backbone hash is re-checked every
epoch; a mismatch aborts the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from adra import autodiff as ad
from adra import objectives
from adra.errors import ConfigurationError, ContractError
from adra.model import ParameterPartition, ResidualNet, theta_hash
from adra.seeding import seeded_rng


def default_milestones(epochs: int) -> tuple:
    """Milestones at 2/3 and 5/6 of the run (120 epochs -> 80 and 100).

    Degenerate positions (0, >= epochs, duplicates) are dropped so very
    short runs get fewer or no drops.
    """
    ms = {2 * epochs // 3, 5 * epochs // 6}
    return tuple(sorted(m for m in ms if 0 < m < epochs))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    milestones: Optional[tuple] = None
    batch_size: int = 128
    seeds: int = 5
    K: int = 2
    mode: str = "adra"
    l2sp_strength: float = 1e-2

    def resolved_milestones(self) -> tuple:
        ms = self.milestones if self.milestones is not None \
            else default_milestones(self.epochs)
        ms = tuple(int(m) for m in ms)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs for m in ms):
            raise ConfigurationError(
                f"milestones {ms} must be strictly increasing and < epochs "
                f"{self.epochs}")
        return ms


PROFILES = {
    "desk": TrainConfig(),
    "paper": TrainConfig(epochs=120, milestones=(80, 100)),
}


def learning_rate(config: TrainConfig, epoch: int) -> float:
    drops = sum(1 for m in config.resolved_milestones() if epoch >= m)
    return config.lr * (0.1 ** drops)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(params, velocities: dict, lr: float, momentum: float,
             weight_decay: float) -> None:
    """v <- momentum*v + (g + wd*p); p <- p - lr*v, trainable params only."""
    for p in params:
        if not p.trainable:
            continue
        g = p.grad + weight_decay * p.data
        v = velocities[p.stable_id]
        v *= momentum
        v += g
        p.data -= lr * v


class SGD:
    def __init__(self, params, config: TrainConfig):
        self.params = list(params)
        self.momentum = config.momentum
        self.weight_decay = config.weight_decay
        self.velocities = {p.stable_id: np.zeros_like(p.data)
                           for p in self.params if p.trainable}

    def step(self, lr: float):
        sgd_step(self.params, self.velocities, lr, self.momentum,
                 self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    accuracy: float
    theta_hash: str
    loss_curve: list = field(default_factory=list)


def classification_accuracy(model: ResidualNet, images, labels,
                            batch_size: int = 256) -> float:
    hits = 0
    for start in range(0, len(images), batch_size):
        logits = model.logits(ad.constant(images[start:start + batch_size]))
        hits += int((logits.data.argmax(axis=1) ==
                     labels[start:start + batch_size]).sum())
    return hits / len(images)


def pretrain(model: ResidualNet, train_ds, test_ds, config: TrainConfig,
             seed: int) -> PretrainResult:
    """Train the softmax classifier, then freeze the backbone and drop the head.

    The embedding head stays trainable: it seeds the per-task alpha set.
    """
    if model.head_weight is None:
        raise ConfigurationError("pretraining requires a classifier head")
    opt = SGD(model.parameters(), config)
    rng = seeded_rng(seed, "pretrain-shuffle")
    curve = []
    n = len(train_ds.images)
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        order = rng.permutation(n)
        batches = max(1, n // config.batch_size)
        for b in range(batches):
            sel = order[b * config.batch_size:(b + 1) * config.batch_size]
            with ad.Tape() as tape:
                logits = model.logits(ad.constant(train_ds.images[sel]))
                loss = ad.cross_entropy(logits, train_ds.labels[sel])
                value = loss.item()
                if not np.isfinite(value):
                    raise RuntimeError(
                        f"pretraining diverged: loss={value} at epoch {epoch} "
                        f"batch {b}")
                tape.backward(loss)
            opt.step(lr)
            opt.zero_grad()
            curve.append((epoch, b, value, lr))
    accuracy = classification_accuracy(model, test_ds.images, test_ds.labels)
    model.remove_classifier()
    backbone = model.backbone_ids()
    for p in model.parameters():
        p.trainable = p.stable_id not in backbone
    return PretrainResult(accuracy=accuracy, theta_hash=theta_hash(model),
                          loss_curve=curve)


# ---------------------------------------------------------------------------
# task training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    loss_curve: list
    theta_hash_start: str
    theta_hash_end: str


def _corpus_batches(corpus: np.ndarray, rng: np.random.Generator):
    """Yield corpus indices forever; each cycle is a fresh shuffle."""
    while True:
        for i in rng.permutation(len(corpus)):
            yield int(i)


def train_task(model: ResidualNet, partition: ParameterPartition,
               nominal: np.ndarray, corpus: Optional[np.ndarray],
               config: TrainConfig, seed: int,
               anchor: Optional[dict] = None) -> TrainResult:
    """Minimize the exposure loss (or the corpus-free one) over the
    trainable side of the partition."""
    if len(nominal) == 0:
        raise ContractError("empty nominal set")
    if corpus is not None and len(corpus) == 0:
        corpus = None
    if corpus is not None and config.batch_size % 2 != 0:
        raise ConfigurationError(
            f"batch size {config.batch_size} must be even under exposure")
    if partition.mode == "l2sp" and anchor is None:
        raise ContractError("l2sp mode requires an anchor parameter set")

    params = model.parameters()
    opt = SGD(params, config)
    frozen_ids = partition.theta_ids
    hash_start = theta_hash(model, frozen_ids) if frozen_ids else ""
    shuffle_rng = seeded_rng(seed, "task-shuffle")
    corpus_iter = (_corpus_batches(corpus, seeded_rng(seed, "corpus-cycle"))
                   if corpus is not None else None)

    half = config.batch_size // 2 if corpus is not None else config.batch_size
    n = len(nominal)
    curve = []
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        order = shuffle_rng.permutation(n)
        batches = max(1, n // half)
        for b in range(batches):
            sel = order[b * half:(b + 1) * half]
            nom = nominal[sel]
            if corpus is not None:
                cor = corpus[[next(corpus_iter) for _ in range(len(sel))]]
                x = np.concatenate([nom, cor])
                origins = np.concatenate([
                    np.zeros(len(nom), np.uint8), np.ones(len(cor), np.uint8)])
            else:
                x = nom
                origins = np.zeros(len(nom), np.uint8)
            with ad.Tape() as tape:
                emb = model.embed(ad.constant(x))
                batch = objectives.PseudoLabeledBatch(emb, origins)
                loss = (objectives.hsc_loss(batch) if corpus is not None
                        else objectives.one_class_loss(batch))
                if partition.mode == "l2sp":
                    loss = ad.add(loss, objectives.l2sp_penalty(
                        params, anchor, config.l2sp_strength))
                value = loss.item()
                if not np.isfinite(value):
                    raise RuntimeError(
                        f"training diverged: loss={value} at epoch {epoch} "
                        f"batch {b} (mode={partition.mode})")
                tape.backward(loss)
            opt.step(lr)
            opt.zero_grad()
            curve.append((epoch, b, value, lr))
        if frozen_ids and theta_hash(model, frozen_ids) != hash_start:
            raise RuntimeError(
                f"frozen parameters changed during epoch {epoch} "
                f"(mode={partition.mode})")
    hash_end = theta_hash(model, frozen_ids) if frozen_ids else ""
    return TrainResult(loss_curve=curve, theta_hash_start=hash_start,
                       theta_hash_end=hash_end)


def write_loss_curve(curve, path):
    """Loss-curve CSV: epoch,batch,loss,lr."""
    with open(path, "w", newline="") as fh:
        fh.write("epoch,batch,loss,lr\n")
        for epoch, b, loss, lr in curve:
            fh.write(f"{epoch},{b},{loss:.10g},{lr:.10g}\n")
