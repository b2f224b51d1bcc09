"""Experience-replay continual learning.

A bounded memory buffer retains past experiences while the classifier
trains on a stream of new tasks; each training step mixes a batch of new
data with a same-sized draw from the buffer.  Five optimization tricks
are supported, each switchable:

1. independent buffer augmentation: every replayed item gets its own
   fresh augmentation seed instead of a batch-shared transform;
2. bias control: a two-parameter affine correction fit on a held-out
   buffer slice rescales new-class logits at inference;
3. exponential learning-rate decay per task (lr0 * gamma^t);
4. balanced reservoir insertion: evictions come from the currently
   most-populated class;
5. loss-aware insertion: eviction probability proportional to
   1 / (last_loss + eps), retaining difficult memories.

The buffer is single-owner mutable state; the run loop is sequential by
definition (task order matters).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import classifier
from .classifier import ModelParams, TrainConfig
from .corpus import SampleRecord
from .imaging import Image, augment_batch

LOSS_EPS = 1e-3


@dataclass
class BufferItem:
    image: Image
    object: int
    material: int
    last_loss: float
    task_id: int
    insert_step: int


@dataclass
class ReplayBuffer:
    """Bounded memory with a pluggable eviction discipline.

    ``sampling_mode`` is one of ``reservoir``, ``balanced``,
    ``loss_aware``, or ``balanced_loss_aware``; ``seen_count`` is the
    total stream length observed.
    """

    capacity: int = 500
    sampling_mode: str = "reservoir"
    items: List[BufferItem] = field(default_factory=list)
    seen_count: int = 0

    def class_counts(self) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for it in self.items:
            counts[it.material] = counts.get(it.material, 0) + 1
        return counts


@dataclass(frozen=True)
class CLTricks:
    independent_buffer_augmentation: bool = False
    bias_control: bool = False
    exp_lr_decay: bool = False
    balanced_sampling: bool = False
    loss_aware_sampling: bool = False

    @staticmethod
    def all_on() -> "CLTricks":
        return CLTricks(True, True, True, True, True)


@dataclass(frozen=True)
class CLConfig:
    train: TrainConfig = TrainConfig()
    tricks: CLTricks = CLTricks()
    gamma: float = 0.75
    replay_batch: int = 16
    bias_fit_fraction: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.replay_batch < 1:
            raise ValueError("replay_batch must be >= 1")

    def buffer_mode(self) -> str:
        if self.tricks.balanced_sampling and self.tricks.loss_aware_sampling:
            return "balanced_loss_aware"
        if self.tricks.balanced_sampling:
            return "balanced"
        if self.tricks.loss_aware_sampling:
            return "loss_aware"
        return "reservoir"


# --- insertion disciplines ---------------------------------------------------


def reservoir_insert(buf: ReplayBuffer, item: BufferItem, rng: np.random.Generator) -> ReplayBuffer:
    """Plain reservoir discipline: every stream item survives with
    probability capacity / seen_count."""
    buf.seen_count += 1
    if buf.capacity == 0:
        return buf
    if len(buf.items) < buf.capacity:
        buf.items.append(item)
        return buf
    j = int(rng.integers(0, buf.seen_count))
    if j < buf.capacity:
        buf.items[j] = item
    return buf


def _most_populated_class(buf: ReplayBuffer, incoming: int, rng: np.random.Generator) -> int:
    counts = buf.class_counts()
    top = max(counts.values())
    tied = sorted(c for c, n in counts.items() if n == top)
    if incoming in tied:
        # Preferring the incoming class keeps the count spread at <= 1.
        return incoming
    if len(tied) == 1:
        return tied[0]
    return int(tied[rng.integers(0, len(tied))])


def balanced_insert(buf: ReplayBuffer, item: BufferItem, rng: np.random.Generator) -> ReplayBuffer:
    """Class-balancing insertion: once full, the victim comes from the
    most-populated class, so minority classes are never displaced."""
    buf.seen_count += 1
    if buf.capacity == 0:
        return buf
    if len(buf.items) < buf.capacity:
        buf.items.append(item)
        return buf
    victim_class = _most_populated_class(buf, item.material, rng)
    slots = [i for i, it in enumerate(buf.items) if it.material == victim_class]
    buf.items[slots[int(rng.integers(0, len(slots)))]] = item
    return buf


def loss_aware_insert(buf: ReplayBuffer, item: BufferItem, rng: np.random.Generator) -> ReplayBuffer:
    """Difficulty-retaining insertion: once full, slot j is evicted with
    probability proportional to 1 / (last_loss_j + eps)."""
    buf.seen_count += 1
    if buf.capacity == 0:
        return buf
    if len(buf.items) < buf.capacity:
        buf.items.append(item)
        return buf
    weights = np.array([1.0 / (it.last_loss + LOSS_EPS) for it in buf.items])
    weights /= weights.sum()
    j = int(rng.choice(len(buf.items), p=weights))
    buf.items[j] = item
    return buf


def balanced_loss_aware_insert(
    buf: ReplayBuffer, item: BufferItem, rng: np.random.Generator
) -> ReplayBuffer:
    """Both disciplines composed: victim class by balance, victim slot
    within the class by inverse loss."""
    buf.seen_count += 1
    if buf.capacity == 0:
        return buf
    if len(buf.items) < buf.capacity:
        buf.items.append(item)
        return buf
    victim_class = _most_populated_class(buf, item.material, rng)
    slots = [i for i, it in enumerate(buf.items) if it.material == victim_class]
    weights = np.array([1.0 / (buf.items[i].last_loss + LOSS_EPS) for i in slots])
    weights /= weights.sum()
    j = slots[int(rng.choice(len(slots), p=weights))]
    buf.items[j] = item
    return buf


_INSERTERS = {
    "reservoir": reservoir_insert,
    "balanced": balanced_insert,
    "loss_aware": loss_aware_insert,
    "balanced_loss_aware": balanced_loss_aware_insert,
}


def insert(buf: ReplayBuffer, item: BufferItem, rng: np.random.Generator) -> ReplayBuffer:
    return _INSERTERS[buf.sampling_mode](buf, item, rng)


def fill_from_records(
    buf: ReplayBuffer,
    records: Sequence[SampleRecord],
    rng: np.random.Generator,
    params: Optional[ModelParams] = None,
    task_id: int = 0,
) -> ReplayBuffer:
    """Stream a record list through the buffer (e.g. to seed it with the
    pretraining data).  When ``params`` is given, stored losses are the
    model's current per-sample losses; otherwise zero."""
    losses = np.zeros(len(records))
    if params is not None:
        for start in range(0, len(records), 64):
            chunk = records[start : start + 64]
            x = np.stack([r.image.pixels.transpose(2, 0, 1) for r in chunk])
            losses[start : start + len(chunk)] = classifier.per_sample_losses(
                params,
                x,
                np.array([r.object for r in chunk]),
                np.array([r.material for r in chunk]),
            )
    for i, rec in enumerate(records):
        insert(
            buf,
            BufferItem(rec.image, rec.object, rec.material, float(losses[i]), task_id, i),
            rng,
        )
    return buf


# --- replay drawing ----------------------------------------------------------


@dataclass
class ReplayDraw:
    items: List[BufferItem]
    aug_seeds: List[int]


def sample_replay_batch(
    buf: ReplayBuffer, n: int, rng: np.random.Generator, cfg: CLConfig
) -> ReplayDraw:
    """Uniform draw with replacement plus per-item augmentation seeds.

    With independent buffer augmentation every drawn item gets its own
    seed; otherwise the whole draw shares one transform seed.
    """
    if not buf.items:
        raise ValueError("cannot sample from an empty buffer")
    if n == 0:
        return ReplayDraw([], [])
    idx = rng.integers(0, len(buf.items), size=n)
    if cfg.tricks.independent_buffer_augmentation:
        seeds = [int(s) for s in rng.integers(0, 2**63, size=n)]
    else:
        shared = int(rng.integers(0, 2**63))
        seeds = [shared] * n
    return ReplayDraw([buf.items[i] for i in idx], seeds)


def replay_tensors(
    draw: ReplayDraw, cfg: CLConfig
) -> Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    if not draw.items:
        return None
    if cfg.train.augment:
        x = augment_batch(
            [it.image for it in draw.items], draw.aug_seeds, cfg.train.policy
        ).transpose(0, 3, 1, 2)
    else:
        x = np.stack([it.image.pixels.transpose(2, 0, 1) for it in draw.items])
    y_obj = np.array([it.object for it in draw.items], dtype=int)
    y_mat = np.array([it.material for it in draw.items], dtype=int)
    return x, y_obj, y_mat


# --- bias control ------------------------------------------------------------


@dataclass(frozen=True)
class HeadBias:
    scale: float = 1.0
    offset: float = 0.0
    new_units: Tuple[int, ...] = ()


@dataclass(frozen=True)
class BiasParams:
    object_head: HeadBias = HeadBias()
    material_head: HeadBias = HeadBias()


def apply_bias(logits: np.ndarray, head: HeadBias) -> np.ndarray:
    """Affine-correct the new-class logits; old-class logits untouched."""
    if not head.new_units:
        return logits
    out = logits.copy()
    units = list(head.new_units)
    out[..., units] = head.scale * logits[..., units] + head.offset
    return out


def fit_affine_on_logits(
    logits: np.ndarray,
    labels: np.ndarray,
    new_units: Sequence[int],
    steps: int = 400,
    lr: float = 0.05,
    l2: float = 0.5,
) -> HeadBias:
    """Fit (scale, offset) on cached logits by cross-entropy descent.

    The trunk is frozen by construction: only the two scalars move.  An
    L2 pull toward the identity correction (total weight ``l2``, spread
    over the holdout like the per-sample loss) keeps the fit from
    drifting to unbounded-confidence optima on small holdouts.
    """
    new_units = tuple(sorted(new_units))
    if not new_units:
        return HeadBias()
    n, c = logits.shape
    mask = np.zeros(c, dtype=bool)
    mask[list(new_units)] = True
    a, b = 1.0, 0.0
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    ma, va, mb, vb = 0.0, 0.0, 0.0, 0.0
    for t in range(1, steps + 1):
        z = logits.copy()
        z[:, mask] = a * logits[:, mask] + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        d = (p - onehot) / n
        ga = float((d[:, mask] * logits[:, mask]).sum()) + l2 * (a - 1.0) / n
        gb = float(d[:, mask].sum()) + l2 * b / n
        # Adam on two scalars.
        ma = 0.9 * ma + 0.1 * ga
        va = 0.999 * va + 0.001 * ga * ga
        mb = 0.9 * mb + 0.1 * gb
        vb = 0.999 * vb + 0.001 * gb * gb
        a -= lr * (ma / (1 - 0.9**t)) / (np.sqrt(va / (1 - 0.999**t)) + 1e-8)
        b -= lr * (mb / (1 - 0.9**t)) / (np.sqrt(vb / (1 - 0.999**t)) + 1e-8)
    return HeadBias(scale=float(a), offset=float(b), new_units=new_units)


def _holdout_slice(n_items: int, fraction: float) -> np.ndarray:
    k = max(1, int(round(n_items * fraction)))
    # Deterministic spread: every ceil(n/k)-th item.
    stride = max(1, n_items // k)
    return np.arange(0, n_items, stride)[:k]


def fit_bias_correction(
    params: ModelParams,
    buf: ReplayBuffer,
    cfg: CLConfig,
    new_object_classes: Sequence[int] = (),
    new_material_classes: Sequence[int] = (),
) -> BiasParams:
    """Fit per-head affine corrections on a held-out slice of the buffer.

    Returns identity corrections when no new classes exist or the
    holdout lacks class coverage.
    """
    if not new_object_classes and not new_material_classes:
        return BiasParams()
    if not buf.items:
        return BiasParams()
    hold = _holdout_slice(len(buf.items), cfg.bias_fit_fraction)
    items = [buf.items[i] for i in hold]
    x = np.stack([it.image.pixels.transpose(2, 0, 1) for it in items])
    logits_o, logits_m = classifier.head_logits_batch(params, x)

    def fit_head(logits, classes, labels, new_classes) -> HeadBias:
        units = [i for i, c in enumerate(classes) if c in set(new_classes)]
        if not units:
            return HeadBias()
        lut = {c: i for i, c in enumerate(classes)}
        unit_labels = np.array([lut.get(v, -1) for v in labels])
        ok = unit_labels >= 0
        old = ok & ~np.isin(unit_labels, units)
        new = ok & np.isin(unit_labels, units)
        if not old.any() or not new.any():
            return HeadBias(new_units=tuple(units))
        return fit_affine_on_logits(
            np.asarray(logits[ok], dtype=np.float64), unit_labels[ok], units
        )

    obj_bias = fit_head(
        logits_o,
        params.object_classes,
        np.array([it.object for it in items]),
        new_object_classes,
    )
    mat_bias = fit_head(
        logits_m,
        params.material_classes,
        np.array([it.material for it in items]),
        new_material_classes,
    )
    return BiasParams(object_head=obj_bias, material_head=mat_bias)


def predict_with_bias(
    params: ModelParams, records: Sequence[SampleRecord], bias: BiasParams, batch: int = 64
) -> Tuple[np.ndarray, np.ndarray]:
    """Top-1 taxonomy indices with bias correction applied to the logits."""
    pred_o = np.zeros(len(records), dtype=int)
    pred_m = np.zeros(len(records), dtype=int)
    oc = np.array(params.object_classes)
    mc = np.array(params.material_classes)
    for start in range(0, len(records), batch):
        chunk = records[start : start + batch]
        x = np.stack([r.image.pixels.transpose(2, 0, 1) for r in chunk])
        logits_o, logits_m = classifier.head_logits_batch(params, x)
        logits_o = apply_bias(logits_o, bias.object_head)
        logits_m = apply_bias(logits_m, bias.material_head)
        pred_o[start : start + len(chunk)] = oc[np.argmax(logits_o, axis=1)]
        pred_m[start : start + len(chunk)] = mc[np.argmax(logits_m, axis=1)]
    return pred_o, pred_m


# --- the continual-learning run ----------------------------------------------


@dataclass(frozen=True)
class Task:
    task_id: int
    train_records: Tuple[SampleRecord, ...]
    eval_records: Tuple[SampleRecord, ...] = ()


@dataclass
class CLRunResult:
    params: ModelParams
    bias: BiasParams
    # Rows: (task_id, eval_task_id, top1_object, top1_material)
    metrics: List[Tuple[int, int, float, float]] = field(default_factory=list)


def task_seed(base_seed: int, position: int) -> int:
    """Per-task training seed; shared with the plain fine-tuning
    reference so the two pipelines are comparable step for step."""
    return int(np.random.SeedSequence((base_seed, 401, position)).generate_state(1)[0])


def cl_run(
    params: ModelParams,
    task_stream: Sequence[Task],
    cfg: CLConfig,
    buf: ReplayBuffer,
) -> CLRunResult:
    """Sequential task training with replay mixing and the five tricks.

    Each step trains on a new-data batch of ``cfg.train.batch`` records
    mixed 1:1 with ``cfg.replay_batch`` replayed items (when the buffer
    has content); the new items then stream into the buffer under its
    insertion discipline.  With an empty stream of tricks and capacity
    zero the loop degenerates to plain sequential fine-tuning.
    """
    params = params.copy()
    new_obj_classes: List[int] = []
    new_mat_classes: List[int] = []
    bias = BiasParams()
    result = CLRunResult(params=params, bias=bias)
    seen_tasks: List[Task] = []

    for pos, task in enumerate(task_stream, start=1):
        if len(task.train_records) == 0:
            warnings.warn(f"task {task.task_id} has no training records; skipped")
            continue
        seed = task_seed(cfg.train.seed, pos)
        grow_obj = sorted(
            {r.object for r in task.train_records} - set(params.object_classes)
        )
        grow_mat = sorted(
            {r.material for r in task.train_records} - set(params.material_classes)
        )
        if grow_obj or grow_mat:
            params = classifier.grow_heads(params, grow_obj, grow_mat, seed)
            new_obj_classes.extend(grow_obj)
            new_mat_classes.extend(grow_mat)

        lr = cfg.train.lr0 * (cfg.gamma**pos if cfg.tricks.exp_lr_decay else 1.0)
        task_cfg = replace(cfg.train, seed=seed)
        replay_rng = np.random.default_rng(np.random.SeedSequence((seed, 402)))
        insert_rng = np.random.default_rng(np.random.SeedSequence((seed, 403)))

        def extra_batch(epoch: int, step: int):
            if not buf.items:
                return None
            draw = sample_replay_batch(buf, cfg.replay_batch, replay_rng, cfg)
            return replay_tensors(draw, cfg)

        def step_hook(epoch: int, step: int, records, losses):
            # Each stream item enters the buffer exactly once (first
            # epoch); later epochs revisit the same experiences and must
            # not inflate the stream count.
            if epoch != 0:
                return
            for i, rec in enumerate(records):
                insert(
                    buf,
                    BufferItem(
                        rec.image,
                        rec.object,
                        rec.material,
                        float(losses[i]),
                        task.task_id,
                        buf.seen_count,
                    ),
                    insert_rng,
                )

        outcome = classifier.train(
            params,
            list(task.train_records),
            task_cfg,
            lr_schedule=lambda epoch: lr,
            step_hook=step_hook,
            extra_batch=extra_batch,
        )
        params = outcome.params
        result.params = params

        if cfg.tricks.bias_control:
            bias = fit_bias_correction(params, buf, cfg, new_obj_classes, new_mat_classes)
        result.bias = bias

        seen_tasks.append(task)
        for prev in seen_tasks:
            if len(prev.eval_records) == 0:
                continue
            pred_o, pred_m = predict_with_bias(params, list(prev.eval_records), bias)
            acc_o = float(
                np.mean(pred_o == np.array([r.object for r in prev.eval_records]))
            )
            acc_m = float(
                np.mean(pred_m == np.array([r.material for r in prev.eval_records]))
            )
            result.metrics.append((task.task_id, prev.task_id, acc_o, acc_m))
    return result
