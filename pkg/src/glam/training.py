"""Partially labelled training: per-class image pools, BCE + soft-Dice loss, validation and
checkpoint selection.

Each training batch holds patches of a single class, so one class vector drives
the dynamic head for the whole batch and only that class's masks are read.
"""

import csv
import logging
import math
import shutil
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import CLASS_NAMES
from .exceptions import DivergenceError, ValidationError
from .metrics import dice
from .network import save_checkpoint, to_tensor

logger = logging.getLogger(__name__)

DICE_EPS = 1e-5
PROB_CLIP = 1e-7
SELECTION_SETS = {"VM": "mouse", "VH": "human"}


# -- loss -------------------------------------------------------------------


def _soft_dice_loss(prob, gt, eps):
    dims = tuple(range(1, prob.ndim))
    inter = (prob * gt).sum(dim=dims)
    return (1.0 - 2.0 * inter / (prob.sum(dim=dims) + gt.sum(dim=dims) + eps)).mean()


def _as_batch(prob, gt):
    prob = torch.as_tensor(prob)
    gt = torch.as_tensor(gt, dtype=prob.dtype)
    if prob.shape != gt.shape:
        raise ValidationError(f"prediction {tuple(prob.shape)} and mask {tuple(gt.shape)} differ in shape")
    if prob.ndim == 2:
        prob, gt = prob[None], gt[None]
    return prob, gt


def partial_loss(prob, gt, eps=DICE_EPS, clip=PROB_CLIP):
    """Pixel-mean binary cross-entropy plus soft Dice loss (per map, averaged over the batch)."""
    prob, gt = _as_batch(prob, gt)
    p = prob.clamp(clip, 1.0 - clip)
    bce = -(gt * torch.log(p) + (1.0 - gt) * torch.log1p(-p)).mean()
    return bce + _soft_dice_loss(prob, gt, eps)


def partial_loss_from_logits(logits, gt, eps=DICE_EPS):
    """Same loss as :func:`partial_loss` computed from logits without clipping."""
    logits, gt = _as_batch(logits, gt)
    bce = F.binary_cross_entropy_with_logits(logits, gt)
    return bce + _soft_dice_loss(torch.sigmoid(logits), gt, eps)


# -- image pool -------------------------------------------------------------


class ImagePool:
    """Per-class FIFO queues that release single-class batches.

    With ``emit_rule="exceeds"`` a queue releases its ``batch_size`` oldest
    patches as soon as its length goes above ``batch_size``; with ``"reaches"``
    it releases on reaching ``batch_size``.
    """

    def __init__(self, batch_size=4, capacity=8, emit_rule="exceeds"):
        if emit_rule not in ("exceeds", "reaches"):
            raise ValidationError(f"unknown emit rule {emit_rule!r}")
        peak = batch_size + 1 if emit_rule == "exceeds" else batch_size
        if batch_size < 1 or peak > capacity:
            raise ValidationError(f"batch_size={batch_size} with rule {emit_rule!r} needs capacity >= {peak}")
        self.batch_size = batch_size
        self.capacity = capacity
        self.emit_rule = emit_rule
        self.queues = {}
        self.offered = 0
        self.emitted = 0
        self.dropped = 0

    def __len__(self):
        return sum(len(q) for q in self.queues.values())

    def _full(self, n):
        return n > self.batch_size if self.emit_rule == "exceeds" else n >= self.batch_size

    def _pop_batch(self, q):
        batch = [q.popleft() for _ in range(self.batch_size)]
        self.emitted += len(batch)
        return batch

    def offer(self, patch, class_id=None):
        """Enqueue one patch; return a batch (list) if its class queue released one, else None."""
        key = patch.class_id if class_id is None else class_id
        q = self.queues.setdefault(key, deque())
        q.append(patch)
        self.offered += 1
        batch = self._pop_batch(q) if self._full(len(q)) else None
        assert len(q) <= self.capacity
        return batch

    def flush(self):
        """Release every remaining complete batch, classes in ascending order."""
        out = []
        for key in sorted(self.queues):
            q = self.queues[key]
            while len(q) >= self.batch_size:
                out.append(self._pop_batch(q))
        return out

    def end_epoch(self, leftover="drop"):
        """Flush complete batches, then drop or keep the remainder. Returns the flushed batches."""
        if leftover not in ("drop", "carry"):
            raise ValidationError(f"unknown leftover policy {leftover!r}")
        batches = self.flush()
        if leftover == "drop":
            for q in self.queues.values():
                self.dropped += len(q)
                q.clear()
        return batches

    def conserved(self):
        return self.offered == self.emitted + self.dropped + len(self)


def pool_offer(pool, patch):
    """Functional form of :meth:`ImagePool.offer`: returns (pool, batch or None)."""
    return pool, pool.offer(patch)


# -- state and epochs -------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    batch_size: int = 4
    pool_capacity: int = 8
    emit_rule: str = "exceeds"
    leftover: str = "drop"
    threshold: float = 0.5
    seed: int = 0
    keep_checkpoints: str = "best"  # or "all"

    def __post_init__(self):
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ValidationError("epochs must be >= 0 and learning_rate > 0")
        if self.keep_checkpoints not in ("best", "all"):
            raise ValidationError(f"keep_checkpoints must be 'best' or 'all', got {self.keep_checkpoints!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError("threshold must lie strictly between 0 and 1")


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    epoch: int = 0
    running_loss: float = float("nan")
    steps: int = 0


def make_state(model, cfg):
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    return TrainState(model, optimizer, np.random.default_rng(cfg.seed))


def make_pool(cfg):
    return ImagePool(cfg.batch_size, cfg.pool_capacity, cfg.emit_rule)


def class_balanced_order(patches, rng):
    """Shuffle within each class, then interleave classes round-robin in a random order per round."""
    by_class = {}
    for idx, p in enumerate(patches):
        by_class.setdefault(p.class_id, []).append(idx)
    queues = {c: deque(rng.permutation(idxs).tolist()) for c, idxs in sorted(by_class.items())}
    order = []
    while queues:
        for c in rng.permutation(sorted(queues)).tolist():
            order.append(queues[c].popleft())
            if not queues[c]:
                del queues[c]
    return [patches[i] for i in order]


def _batch_tensors(batch, dtype):
    x = to_tensor(np.stack([p.image for p in batch]), dtype=dtype)
    y = torch.as_tensor(np.stack([p.mask for p in batch]), dtype=dtype)
    return x, y


def train_step(state, batch, augment=None):
    """One optimiser step on a single-class batch. Returns the loss value."""
    class_ids = {p.class_id for p in batch}
    if len(class_ids) != 1:
        raise ValidationError(f"a training batch must hold one class, got {sorted(class_ids)}")
    if augment is not None:
        batch = [augment(p, state.rng) for p in batch]
    model = state.model
    dtype = next(model.parameters()).dtype
    x, y = _batch_tensors(batch, dtype)
    model.train()
    state.optimizer.zero_grad(set_to_none=True)
    loss = partial_loss_from_logits(model(x, class_ids.pop()), y)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite training loss {value} at epoch {state.epoch + 1}, step {state.steps + 1}")
    loss.backward()
    state.optimizer.step()
    state.steps += 1
    return value


@dataclass
class EpochStats:
    loss: float
    batches: int
    dropped: int


def train_epoch(state, train_set, pool, leftover="drop", augment=None):
    """Run one epoch through ``pool``. Returns (state, EpochStats)."""
    if not train_set:
        raise ValidationError("training set is empty")
    losses = []
    dropped_before = pool.dropped
    for patch in class_balanced_order(train_set, state.rng):
        batch = pool.offer(patch)
        if batch is not None:
            losses.append(train_step(state, batch, augment))
    for batch in pool.end_epoch(leftover):
        losses.append(train_step(state, batch, augment))
    state.epoch += 1
    state.running_loss = float(np.mean(losses)) if losses else float("nan")
    if not losses:
        logger.warning("epoch %d emitted no batches; check pool batch size against per-class counts", state.epoch)
    return state, EpochStats(state.running_loss, len(losses), pool.dropped - dropped_before)


# -- inference and validation -----------------------------------------------


@torch.no_grad()
def predict_proba(model, images, class_ids, batch_size=4):
    """Probability maps (N, H, W) as float numpy arrays for images (N, H, W, 3)."""
    model.eval()
    images = np.asarray(images)
    class_ids = np.broadcast_to(np.asarray(class_ids), (len(images),))
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(images), batch_size):
        x = to_tensor(images[start : start + batch_size], dtype=dtype)
        out.append(model.predict_proba(x, class_ids[start : start + batch_size].tolist()).numpy())
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:3])


def binarize(prob, threshold=0.5):
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def predict_masks(model, patches, threshold=0.5, batch_size=4):
    """Binary masks for each patch's own annotated class, in input order."""
    preds = [None] * len(patches)
    by_shape = {}
    for idx, p in enumerate(patches):
        by_shape.setdefault(p.mask.shape, []).append(idx)
    for idxs in by_shape.values():
        images = np.stack([patches[i].image for i in idxs])
        prob = predict_proba(model, images, [patches[i].class_id for i in idxs], batch_size)
        for i, pm in zip(idxs, prob):
            preds[i] = binarize(pm, threshold)
    return preds


@dataclass
class ValidationResult:
    per_class: dict
    mean: float


def validate(model, val_set, threshold=0.5, batch_size=4):
    """Thresholded Dice per patch; per-class means and the mean over classes."""
    if not val_set:
        raise ValidationError("validation set is empty")
    preds = predict_masks(model, val_set, threshold, batch_size)
    by_class = {}
    for p, pred in zip(val_set, preds):
        by_class.setdefault(p.class_id, []).append(dice(pred, p.mask))
    per_class = {c: float(np.mean(v)) for c, v in sorted(by_class.items())}
    return ValidationResult(per_class, float(np.mean(list(per_class.values()))))


# -- history and selection --------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    batches: int = 0
    dropped: int = 0
    val: dict = field(default_factory=dict)  # set name -> ValidationResult
    checkpoint: str = ""


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)
    class_order: tuple = CLASS_NAMES

    def __len__(self):
        return len(self.records)

    def append(self, record):
        expected = self.records[-1].epoch + 1 if self.records else 1
        if record.epoch != expected:
            raise ValidationError(f"history expects epoch {expected}, got {record.epoch}")
        self.records.append(record)

    @property
    def val_sets(self):
        names = []
        for r in self.records:
            names.extend(n for n in r.val if n not in names)
        return names

    def record(self, epoch):
        for r in self.records:
            if r.epoch == epoch:
                return r
        raise KeyError(epoch)

    def columns(self):
        num_classes = len(self.class_order)
        cols = ["epoch", "train_loss", "batches", "dropped"]
        for name in self.val_sets:
            cols.append(f"val_{name}_mean")
            cols.extend(f"val_{name}_{self.class_order[c - 1]}" for c in range(1, num_classes + 1))
        return cols + ["checkpoint"]

    def write_tsv(self, path):
        cols = self.columns()
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(cols)
            for r in self.records:
                row = {"epoch": r.epoch, "train_loss": repr(r.train_loss), "batches": r.batches, "dropped": r.dropped, "checkpoint": r.checkpoint}
                for name, res in r.val.items():
                    row[f"val_{name}_mean"] = repr(res.mean)
                    for c, v in res.per_class.items():
                        row[f"val_{name}_{self.class_order[c - 1]}"] = repr(v)
                writer.writerow([row.get(c, "") for c in cols])
        return path

    @classmethod
    def read_tsv(cls, path, class_order=CLASS_NAMES):
        hist = cls(class_order=tuple(class_order))
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh, delimiter="\t")
            names = [c[4:-5] for c in reader.fieldnames if c.startswith("val_") and c.endswith("_mean")]
            for row in reader:
                val = {}
                for name in names:
                    if row[f"val_{name}_mean"] == "":
                        continue
                    per_class = {
                        c: float(row[f"val_{name}_{class_order[c - 1]}"])
                        for c in range(1, len(class_order) + 1)
                        if row.get(f"val_{name}_{class_order[c - 1]}", "") != ""
                    }
                    val[name] = ValidationResult(per_class, float(row[f"val_{name}_mean"]))
                hist.append(
                    EpochRecord(int(row["epoch"]), float(row["train_loss"]), int(row["batches"]), int(row["dropped"]), val, row["checkpoint"])
                )
        return hist


def criterion_set(criterion, history=None):
    """Validation-set name that a selection criterion reads."""
    if criterion in SELECTION_SETS:
        return SELECTION_SETS[criterion]
    if criterion == "plain":
        names = history.val_sets if history is not None else []
        if not names:
            raise ValidationError("plain selection needs at least one tracked validation set")
        return names[0]
    raise ValidationError(f"unknown selection criterion {criterion!r}; expected VM, VH or plain")


def best_record(history, set_name):
    """Record with the highest mean Dice on ``set_name``; the earliest epoch wins ties."""
    best = None
    for r in history.records:
        if set_name in r.val and (best is None or r.val[set_name].mean > best.val[set_name].mean):
            best = r
    return best


def select_checkpoint(history, criterion):
    """Epoch record with the highest mean validation Dice on the criterion's set (earliest on ties)."""
    if not history.records:
        raise ValidationError("cannot select from an empty history")
    name = criterion_set(criterion, history)
    best = best_record(history, name)
    if best is None:
        raise ValidationError(f"criterion {criterion} needs the {name!r} validation set, which the history does not track")
    return best


# -- full training run ------------------------------------------------------


def _prune_checkpoints(history, out_dir):
    if history.val_sets:
        keep = {best_record(history, name).checkpoint for name in history.val_sets}
    else:
        keep = {history.records[-1].checkpoint}
    for r in history.records:
        if r.checkpoint and r.checkpoint not in keep:
            shutil.rmtree(Path(out_dir) / r.checkpoint, ignore_errors=True)


def fit(model, train_set, val_sets=None, cfg=None, out_dir=None, augment=None, class_order=CLASS_NAMES):
    """Train ``model`` for ``cfg.epochs`` epochs.

    ``val_sets`` maps a set name (``"mouse"``, ``"human"``) to patches validated
    after every epoch. With ``out_dir``, checkpoints go to
    ``out_dir/checkpoints/epoch_NNNN`` and the history to ``out_dir/history.tsv``,
    rewritten after every epoch so an aborted run leaves a partial history.
    """
    cfg = cfg or TrainConfig()
    val_sets = val_sets or {}
    state = make_state(model, cfg)
    pool = make_pool(cfg)
    history = TrainingHistory(class_order=tuple(class_order))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for _ in range(cfg.epochs):
        try:
            state, stats = train_epoch(state, train_set, pool, cfg.leftover, augment)
        except DivergenceError:
            if out_dir is not None:
                history.write_tsv(out_dir / "history.tsv")
            raise
        val = {name: validate(model, patches, cfg.threshold) for name, patches in val_sets.items() if patches}
        record = EpochRecord(state.epoch, stats.loss, stats.batches, stats.dropped, val)
        if out_dir is not None:
            record.checkpoint = f"checkpoints/epoch_{state.epoch:04d}"
            save_checkpoint(
                model,
                out_dir / record.checkpoint,
                epoch=state.epoch,
                scores={n: v.mean for n, v in val.items()},
                class_order=class_order,
            )
        history.append(record)
        if out_dir is not None:
            if cfg.keep_checkpoints == "best":
                _prune_checkpoints(history, out_dir)
            history.write_tsv(out_dir / "history.tsv")
        logger.info(
            "epoch %d loss %.4f batches %d %s",
            state.epoch,
            stats.loss,
            stats.batches,
            " ".join(f"val_{n}={v.mean:.4f}" for n, v in val.items()),
        )
    return history, state
