"""Losses, optimizer, learning-rate schedule and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import compression, data as cifar
from .arch import LayerGraph, forward
from .errors import ConfigError, DataError, ParameterError, TrainingError
from .ops import softmax
from .tensor import Tensor, backward, make_result, no_grad

log = logging.getLogger(__name__)

LOSSES = ("cross_entropy", "cb_focal")


@dataclass
class TrainConfig:
    epochs: int = 200
    base_lr: float = 0.1
    momentum: float = 0.9
    dropout_rate: float = 0.1
    batch_size: int = 64
    seed: int = 0
    loss: str = "cb_focal"
    focal_gamma: float = 0.5
    cb_beta: float = 0.9999
    weight_decay: float = 1e-4
    lr_per_iteration: bool = False
    prune_fraction: float = 0.5
    augment: bool = True
    eval_batch_size: int = 200

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("batch_size and base_lr must be positive, weight_decay non-negative")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.focal_gamma < 0 or not 0.0 <= self.cb_beta < 1.0:
            raise ConfigError("need focal_gamma >= 0 and cb_beta in [0, 1)")
        if not 0.0 < self.prune_fraction <= 1.0:
            raise ConfigError("prune_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class ClassCounts:
    counts: tuple

    @classmethod
    def from_labels(cls, labels, num_classes: int) -> "ClassCounts":
        return cls(tuple(int(c) for c in np.bincount(np.asarray(labels), minlength=num_classes)))

    def __len__(self):
        return len(self.counts)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _check_labels(logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.size:
        raise DataError(f"logits {logits.shape} and {labels.size} labels disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataError(f"label out of range [0, {logits.shape[1]})")
    return labels


def _log_probs(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    labels = _check_labels(logits, labels)
    z = logits.data
    n = labels.size
    logp = _log_probs(z)
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean(), dtype=z.dtype).reshape(())

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return make_result(out, (logits,), "cross_entropy", bw)


def class_balanced_weights(counts, beta: float) -> np.ndarray:
    """(1 - beta) / (1 - beta**n_y), rescaled to sum to the number of classes.

    Classes with no samples are treated as having one.
    """
    if not 0.0 <= beta < 1.0:
        raise ParameterError(f"beta must lie in [0, 1), got {beta}")
    n = np.maximum(np.asarray(counts.counts if isinstance(counts, ClassCounts) else counts,
                              dtype=np.float64), 1.0)
    w = (1.0 - beta) / (1.0 - np.power(beta, n))
    return w * (n.size / w.sum())


def cb_focal_loss(logits: Tensor, labels, counts, gamma: float = 0.5, beta: float = 0.9999) -> Tensor:
    """Class-balanced focal loss: mean of w_y * (1 - p_t)**gamma * -log p_t."""
    if gamma < 0:
        raise ParameterError("gamma must be non-negative")
    weights = class_balanced_weights(counts, beta)
    labels = _check_labels(logits, labels)
    if weights.size != logits.shape[1]:
        raise DataError(f"{weights.size} class counts for {logits.shape[1]} logits")
    z = logits.data.astype(np.float64)
    n = labels.size
    rows = np.arange(n)
    logp_all = _log_probs(z)
    soft = np.exp(logp_all)
    logp = logp_all[rows, labels]
    pt = soft[rows, labels]
    # 1 - p_t as the sum of the other probabilities keeps precision when p_t ~ 1
    others = soft.copy()
    others[rows, labels] = 0.0
    q = others.sum(axis=1)
    wy = weights[labels]
    mod = np.power(q, gamma)
    per = wy * mod * (-logp)
    out = np.asarray(per.mean(), dtype=logits.dtype).reshape(())

    def bw(g):
        # d/dp_t of -(1-p)^gamma log p, times p_t
        if gamma == 0:
            dterm = -np.ones_like(pt)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                safe = np.where(q > 0, q, 1.0)
                first = np.where(q > 0, gamma * np.power(safe, gamma - 1.0) * logp * pt, 0.0)
            dterm = first - mod
        coef = wy * dterm  # dL_i/dp_t * p_t
        onehot = np.zeros_like(soft)
        onehot[rows, labels] = 1.0
        grad = coef[:, None] * (onehot - soft)
        return ((grad * (float(g) / n)).astype(logits.dtype),)

    return make_result(out, (logits,), "cb_focal_loss", bw)


# --------------------------------------------------------------------------
# optimizer and schedule
# --------------------------------------------------------------------------

def cosine_lr(epoch: float, total_epochs: int, base_lr: float) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def sgd_nesterov_step(params, grads, lr: float, momentum: float, weight_decay: float,
                      velocity: dict, masks: dict | None = None):
    """One in-place Nesterov SGD update.

    g' = g + wd*w;  v <- mu*v + g';  w <- w - lr*(g' + mu*v).
    ``velocity`` is keyed by id(param) and created at zero on first use.
    Entries of ``masks`` (also keyed by id) pin pruned weights and their
    velocity to exactly zero.
    """
    masks = masks or {}
    for p in params:
        g = grads.get(p) if isinstance(grads, dict) else None
        if g is None:
            g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        w = p.data
        gp = g + weight_decay * w if weight_decay else g
        v = velocity.get(id(p))
        if v is None:
            v = np.zeros_like(w)
        v = momentum * v + gp
        w -= (lr * (gp + momentum * v)).astype(w.dtype, copy=False)
        m = masks.get(id(p))
        if m is not None:
            w *= m
            v = v * m
        velocity[id(p)] = v.astype(w.dtype, copy=False)
    return params


class NesterovSGD:
    def __init__(self, params, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, lr: float, masks: dict | None = None):
        sgd_nesterov_step(self.params, {}, lr, self.momentum, self.weight_decay, self.velocity, masks)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> list:
        return [self.velocity.get(id(p), np.zeros_like(p.data)) for p in self.params]

    def load_state_arrays(self, arrays):
        for p, v in zip(self.params, arrays):
            self.velocity[id(p)] = np.asarray(v, dtype=p.data.dtype).reshape(p.shape)


# --------------------------------------------------------------------------
# epoch loop
# --------------------------------------------------------------------------

REPORT_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    stage: int | None = None

    def to_line(self) -> str:
        parts = [f"epoch={self.epoch}", f"lr={self.lr:.10g}", f"train_loss={self.train_loss:.6f}",
                 f"train_acc={self.train_acc:.6f}", f"val_loss={self.val_loss:.6f}",
                 f"val_acc={self.val_acc:.6f}"]
        if self.stage is not None:
            parts.append(f"condense_stage={self.stage}")
        return "\t".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "EpochRecord":
        kv = dict(item.split("=", 1) for item in line.strip().split("\t") if item)
        missing = [f for f in REPORT_FIELDS if f not in kv]
        if missing:
            raise DataError(f"report line lacks {', '.join(missing)}: {line!r}")
        stage = kv.get("condense_stage")
        return cls(int(kv["epoch"]), float(kv["lr"]), float(kv["train_loss"]), float(kv["train_acc"]),
                   float(kv["val_loss"]), float(kv["val_acc"]), None if stage is None else int(stage))


def read_report(text: str) -> list:
    return [EpochRecord.from_line(l) for l in text.splitlines() if l.strip() and not l.startswith("#")]


@dataclass
class TrainingReport:
    epochs: list = field(default_factory=list)
    triggers: list = field(default_factory=list)  # (epoch, stage)
    mask_history: list = field(default_factory=list, repr=False)  # per epoch: {layer: (G, I) mask}

    def lines(self) -> str:
        return "".join(r.to_line() + "\n" for r in self.epochs)


@dataclass
class AccuracyReport:
    top1: float
    loss: float
    count: int


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def evaluate(graph: LayerGraph, dataset, batch_size: int = 200, mean=cifar.CIFAR_MEAN,
             std=cifar.CIFAR_STD) -> AccuracyReport:
    """Top-1 accuracy and mean cross-entropy on single centred views."""
    n = len(dataset)
    if n == 0:
        return AccuracyReport(0.0, float("nan"), 0)
    correct = 0
    total_loss = 0.0
    with no_grad():
        for start in range(0, n, batch_size):
            imgs = dataset.images[start:start + batch_size]
            labels = dataset.labels[start:start + batch_size]
            x = Tensor(cifar.normalize_array(imgs, mean, std))
            logits = forward(graph, x, training=False)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            total_loss += float(cross_entropy(logits, labels).data) * labels.size
    return AccuracyReport(correct / n, total_loss / n, n)


def _loss(cfg: TrainConfig, logits, labels, counts):
    if cfg.loss == "cross_entropy":
        return cross_entropy(logits, labels)
    return cb_focal_loss(logits, labels, counts, cfg.focal_gamma, cfg.cb_beta)


def condense(graph: LayerGraph, stage: int):
    """Apply condensing ``stage`` to every learned group convolution."""
    for node in graph.lgc_nodes():
        if stage <= node.lgc.final_stage:
            node.lgc = compression.select_prune(node.params["weight"], node.lgc, stage)


def train(graph: LayerGraph, cfg: TrainConfig, train_data, val_data=None, report_stream=None,
          optimizer: NesterovSGD | None = None, start_epoch: int = 0,
          mean=cifar.CIFAR_MEAN, std=cifar.CIFAR_STD) -> TrainingReport:
    """Train ``graph`` in place and return the per-epoch report.

    Each epoch: apply any scheduled condensing stage, set the cosine learning
    rate, visit a seeded shuffle of the data in mini-batches with seeded
    augmentation, then evaluate on ``val_data``.  ``report_stream`` (a text
    file object) receives one line per epoch as it completes.
    """
    n = len(train_data)
    if n == 0:
        raise DataError("training set is empty")
    graph.dropout_rate = cfg.dropout_rate
    num_classes = graph.spec.num_classes
    counts = ClassCounts.from_labels(train_data.labels, num_classes)
    params = [t for _, t in graph.parameters()]
    opt = optimizer or NesterovSGD(params, cfg.momentum, cfg.weight_decay)
    report = TrainingReport()
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    cf = graph.spec.condensation_factor

    for epoch in range(start_epoch, cfg.epochs):
        stage = compression.prune_schedule(epoch, cfg.epochs, cf, cfg.prune_fraction)
        if stage is not None:
            condense(graph, stage)
            report.triggers.append((epoch, stage))
            log.info("epoch %d: condensing stage %d", epoch, stage)
        masks = graph.param_masks()
        perm = np.random.default_rng(_seed(cfg.seed, epoch, 1)).permutation(n)
        lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr)
        loss_sum, correct = 0.0, 0
        for step in range(steps_per_epoch):
            idx = perm[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            imgs = train_data.images[idx]
            labels = train_data.labels[idx]
            if cfg.augment:
                seeds = [_seed(cfg.seed, epoch, 2, i) for i in idx]
                x = cifar.augment_batch(imgs, seeds, mean, std)
            else:
                x = cifar.normalize_array(imgs, mean, std)
            if cfg.lr_per_iteration:
                lr = cosine_lr(epoch + step / steps_per_epoch, cfg.epochs, cfg.base_lr)
            drop_seed = _seed(cfg.seed, epoch, 3, step)
            logits = forward(graph, Tensor(x), training=True, seed=drop_seed)
            loss = _loss(cfg, logits, labels, counts)
            value = float(loss.data)
            if not math.isfinite(value):
                _diagnose(graph, x, drop_seed)
            opt.zero_grad()
            backward(loss)
            opt.step(lr, masks)
            loss_sum += value * labels.size
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            # drop this step's tape before the next forward allocates its own
            del logits, loss
        if val_data is not None and len(val_data):
            acc = evaluate(graph, val_data, cfg.eval_batch_size, mean, std)
            val_loss, val_acc = acc.loss, acc.top1
        else:
            val_loss, val_acc = float("nan"), float("nan")
        rec = EpochRecord(epoch, lr, loss_sum / n, correct / n, val_loss, val_acc, stage)
        report.epochs.append(rec)
        report.mask_history.append({nd.name: nd.lgc.mask.copy() for nd in graph.lgc_nodes()})
        log.info(rec.to_line())
        if report_stream is not None:
            report_stream.write(rec.to_line() + "\n")
            report_stream.flush()
    return report


def _diagnose(graph: LayerGraph, x: np.ndarray, seed: int):
    with no_grad():
        forward(graph, Tensor(x), training=True, seed=seed, check_finite=True)
    raise TrainingError("loss became non-finite although every layer output is finite")
