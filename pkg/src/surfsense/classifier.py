"""Tiny dual-head depthwise-separable CNN, trained with plain numpy.

Architecture: a 3x3/stride-2 stem (8 filters), three
depthwise-separable blocks (depthwise 3x3 stride 2 + pointwise 1x1,
widths 16/32/64), global average pooling, and two softmax heads: one
over object classes, one over material classes.  Global pooling makes
the trunk resolution-agnostic, so the same weights serve 224x224
inference and small-raster training.  Under 100k parameters in total.

Every gradient is computed analytically; training is deterministic for
a given seed (fixed batch order, seeded init and augmentation).  Heads
can grow output units for classes first seen in deployment; each output
unit is tagged with the 1-based taxonomy index it predicts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .imaging import AugmentPolicy, Image, augment, augment_batch, center_crop_resize

STEM_FILTERS = 8
BLOCK_WIDTHS = (16, 32, 64)
CHECKPOINT_MAGIC = b"SSCK"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, last_loss: float):
        super().__init__(
            f"loss became non-finite at epoch {epoch}, step {step}; "
            f"last finite loss {last_loss:.6g}"
        )
        self.epoch = epoch
        self.step = step
        self.last_loss = last_loss


@dataclass
class ModelParams:
    """Named weight tensors plus the taxonomy index carried by each head unit."""

    tensors: Dict[str, np.ndarray]
    object_classes: Tuple[int, ...]
    material_classes: Tuple[int, ...]

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.tensors.items()},
            self.object_classes,
            self.material_classes,
        )

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["stem_w"].dtype

    def tensor_names(self) -> List[str]:
        return list(self.tensors.keys())

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings; defaults follow the reference recipe.

    Inputs are [0, 1] rasters by default; ``standardize`` switches to
    per-channel standardization with statistics taken over the training
    set (stored with the weights, applied on every forward pass).
    """

    lr0: float = 1e-4
    batch: int = 16
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    policy: AugmentPolicy = AugmentPolicy()
    input_side: Optional[int] = None
    standardize: bool = False
    parallel_trunks: bool = False

    def __post_init__(self) -> None:
        if self.lr0 < 0 or self.batch < 1 or self.epochs < 1:
            raise ValueError("invalid training configuration")


@dataclass(frozen=True)
class PredictionPair:
    """Both head distributions; top-1 values are 1-based taxonomy indices."""

    p_object: np.ndarray
    p_material: np.ndarray
    object_classes: Tuple[int, ...]
    material_classes: Tuple[int, ...]

    @property
    def top1_object(self) -> int:
        return self.object_classes[int(np.argmax(self.p_object))]

    @property
    def top1_material(self) -> int:
        return self.material_classes[int(np.argmax(self.p_material))]


def _he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(
    seed: int,
    n_objects: int = 6,
    n_materials: int = 9,
    object_classes: Optional[Sequence[int]] = None,
    material_classes: Optional[Sequence[int]] = None,
    dtype=np.float32,
) -> ModelParams:
    """Seeded He-uniform initialization."""
    if object_classes is None:
        object_classes = range(1, n_objects + 1)
    if material_classes is None:
        material_classes = range(1, n_materials + 1)
    object_classes = tuple(object_classes)
    material_classes = tuple(material_classes)

    tensors: Dict[str, np.ndarray] = {}
    widths = (STEM_FILTERS,) + BLOCK_WIDTHS

    def rng_for(i: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence((seed, 7, i)))

    tensors["stem_w"] = _he_uniform(rng_for(0), (STEM_FILTERS, 3, 3, 3), 27, dtype)
    tensors["stem_b"] = np.zeros(STEM_FILTERS, dtype=dtype)
    for bi in range(3):
        cin, cout = widths[bi], widths[bi + 1]
        tensors[f"dw{bi + 1}_w"] = _he_uniform(rng_for(1 + 2 * bi), (cin, 3, 3), 9, dtype)
        tensors[f"dw{bi + 1}_b"] = np.zeros(cin, dtype=dtype)
        tensors[f"pw{bi + 1}_w"] = _he_uniform(rng_for(2 + 2 * bi), (cout, cin), cin, dtype)
        tensors[f"pw{bi + 1}_b"] = np.zeros(cout, dtype=dtype)
    feat = BLOCK_WIDTHS[-1]
    tensors["head_object_w"] = _he_uniform(rng_for(7), (len(object_classes), feat), feat, dtype)
    tensors["head_object_b"] = np.zeros(len(object_classes), dtype=dtype)
    tensors["head_material_w"] = _he_uniform(rng_for(8), (len(material_classes), feat), feat, dtype)
    tensors["head_material_b"] = np.zeros(len(material_classes), dtype=dtype)
    return ModelParams(tensors, object_classes, material_classes)


# --- conv primitives (stride-2 3x3, zero padding 1) -------------------------
#
# The full 3x3 conv runs as one im2col GEMM; depthwise taps are plain
# broadcast multiplies.  Column layout is (N, 9*C, P) with the tap index
# major so col2im can scatter per tap.


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def _out_hw(h: int, w: int) -> Tuple[int, int]:
    return (h + 1) // 2, (w + 1) // 2


def _tap_slice(k: int, ho: int, wo: int):
    ki, kj = divmod(k, 3)
    return np.s_[:, :, ki : ki + 2 * ho - 1 : 2, kj : kj + 2 * wo - 1 : 2]


def _im2col(xp: np.ndarray, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, 9 * c, ho * wo), dtype=xp.dtype)
    for k in range(9):
        cols[:, k * c : (k + 1) * c, :] = xp[_tap_slice(k, ho, wo)].reshape(n, c, -1)
    return cols


def conv3x3s2_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    n, c, h, wd = x.shape
    ho, wo = _out_hw(h, wd)
    cols = _im2col(_pad1(x), ho, wo)
    w2 = w.transpose(0, 2, 3, 1).reshape(w.shape[0], 9 * c)  # tap-major
    out = (w2 @ cols).reshape(n, w.shape[0], ho, wo)
    out += b[None, :, None, None]
    return out, cols


def conv3x3s2_backward(
    dout: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape, need_dx: bool = True
):
    n, c, h, wd = x_shape
    o = w.shape[0]
    ho, wo = dout.shape[2], dout.shape[3]
    p = ho * wo
    dout2 = dout.reshape(n, o, p)
    w2 = w.transpose(0, 2, 3, 1).reshape(o, 9 * c)

    dflat = dout2.transpose(1, 0, 2).reshape(o, n * p)
    cflat = cols.transpose(1, 0, 2).reshape(9 * c, n * p)
    dw = (dflat @ cflat.T).reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
    db = dout.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dw, db

    dcols = np.matmul(w2.T, dout2)  # (n, 9c, p)
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=dout.dtype)
    for k in range(9):
        dxp[_tap_slice(k, ho, wo)] += dcols[:, k * c : (k + 1) * c, :].reshape(n, c, ho, wo)
    return dxp[:, :, 1 : h + 1, 1 : wd + 1], dw, db


def depthwise3x3s2_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    n, c, h, wd = x.shape
    ho, wo = _out_hw(h, wd)
    xp = _pad1(x)
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for k in range(9):
        ki, kj = divmod(k, 3)
        out += w[None, :, ki, kj, None, None] * xp[_tap_slice(k, ho, wo)]
    out += b[None, :, None, None]
    return out, xp


def depthwise3x3s2_backward(dout: np.ndarray, xp: np.ndarray, w: np.ndarray, x_shape):
    n, c, h, wd = x_shape
    ho, wo = dout.shape[2], dout.shape[3]
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for k in range(9):
        ki, kj = divmod(k, 3)
        sl = _tap_slice(k, ho, wo)
        dw[:, ki, kj] = (dout * xp[sl]).sum(axis=(0, 2, 3))
        dxp[sl] += w[None, :, ki, kj, None, None] * dout
    db = dout.sum(axis=(0, 2, 3))
    return dxp[:, :, 1 : h + 1, 1 : wd + 1], dw, db


def pointwise_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    out = np.matmul(w, x.reshape(n, c, h * wd)).reshape(n, w.shape[0], h, wd)
    return out + b[None, :, None, None]


def pointwise_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    n, c, h, wd = x.shape
    o = w.shape[0]
    p = h * wd
    dout2 = dout.reshape(n, o, p)
    x2 = x.reshape(n, c, p)
    dw = np.matmul(
        dout2.transpose(1, 0, 2).reshape(o, n * p), x2.transpose(1, 0, 2).reshape(c, n * p).T
    )
    db = dout.sum(axis=(0, 2, 3))
    dx = np.matmul(w.T, dout2).reshape(n, c, h, wd)
    return dx, dw, db


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _apply_input_norm(params: ModelParams, x: np.ndarray) -> np.ndarray:
    # Optional per-channel standardization; stats live in the checkpoint.
    if "norm_mean" not in params.tensors:
        return x
    mean = params.tensors["norm_mean"].reshape(1, 3, 1, 1)
    std = params.tensors["norm_std"].reshape(1, 3, 1, 1)
    return (x - mean) / std


def _forward_trunk(params: ModelParams, x: np.ndarray, want_cache: bool):
    t = params.tensors
    x = _apply_input_norm(params, x)
    cache: Dict[str, object] = {"x_shape": x.shape}
    # Distance of the nearest pre-activation to the ReLU kink; gradient
    # checks need this to exceed the finite-difference step.
    margin = np.inf

    a, cols = conv3x3s2_forward(x, t["stem_w"], t["stem_b"])
    mask = a > 0
    if want_cache:
        margin = min(margin, float(np.abs(a).min()))
        cache["stem"] = (cols, mask)
    a = a * mask

    for bi in (1, 2, 3):
        pre_shape = a.shape
        d, xp = depthwise3x3s2_forward(a, t[f"dw{bi}_w"], t[f"dw{bi}_b"])
        dmask = d > 0
        if want_cache:
            margin = min(margin, float(np.abs(d).min()))
        d = d * dmask
        p = pointwise_forward(d, t[f"pw{bi}_w"], t[f"pw{bi}_b"])
        pmask = p > 0
        if want_cache:
            margin = min(margin, float(np.abs(p).min()))
        a = p * pmask
        if want_cache:
            cache[f"block{bi}"] = (pre_shape, xp, dmask, d, pmask)
    if want_cache:
        cache["relu_margin"] = margin

    hw = a.shape[2] * a.shape[3]
    feat = a.mean(axis=(2, 3))
    if want_cache:
        cache["gap"] = (a.shape, hw)
    return feat, cache


def _head_logits(params: ModelParams, feat: np.ndarray):
    t = params.tensors
    logits_o = feat @ t["head_object_w"].T + t["head_object_b"]
    logits_m = feat @ t["head_material_w"].T + t["head_material_b"]
    return logits_o, logits_m


def head_logits_batch(params: ModelParams, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Raw head logits for a (N, 3, H, W) batch."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) input, got {x.shape}")
    feat, _ = _forward_trunk(params, x.astype(params.dtype, copy=False), want_cache=False)
    return _head_logits(params, feat)


def forward_batch(params: ModelParams, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Softmax distributions for a (N, 3, H, W) batch."""
    logits_o, logits_m = head_logits_batch(params, x)
    return _softmax(logits_o), _softmax(logits_m)


def image_to_input(img: Image) -> np.ndarray:
    if img.channels != 3:
        raise ValueError("classifier input must be 3-channel")
    return img.pixels.transpose(2, 0, 1)[None, :, :, :]


def forward(params: ModelParams, img: Image) -> PredictionPair:
    """Single-image inference; deterministic, simplex outputs."""
    p_o, p_m = forward_batch(params, image_to_input(img))
    return PredictionPair(
        p_object=p_o[0],
        p_material=p_m[0],
        object_classes=params.object_classes,
        material_classes=params.material_classes,
    )


def _unit_index(classes: Tuple[int, ...], labels: np.ndarray) -> np.ndarray:
    lut = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([lut[int(v)] for v in labels], dtype=int)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} not represented by this model") from exc


def _loss_grad(
    params: ModelParams, x: np.ndarray, y_obj: np.ndarray, y_mat: np.ndarray
):
    """Joint cross-entropy loss, full analytic gradient, per-sample losses."""
    n = x.shape[0]
    t = params.tensors
    feat, cache = _forward_trunk(params, x.astype(params.dtype, copy=False), want_cache=True)
    logits_o, logits_m = _head_logits(params, feat)
    p_o = _softmax(logits_o)
    p_m = _softmax(logits_m)

    uo = _unit_index(params.object_classes, y_obj)
    um = _unit_index(params.material_classes, y_mat)
    eps = np.finfo(p_o.dtype).tiny
    ce_o = -np.log(np.maximum(p_o[np.arange(n), uo], eps))
    ce_m = -np.log(np.maximum(p_m[np.arange(n), um], eps))
    per_sample = ce_o + ce_m
    loss = float(per_sample.mean())

    grads: Dict[str, np.ndarray] = {}

    dlogits_o = p_o.copy()
    dlogits_o[np.arange(n), uo] -= 1.0
    dlogits_o /= n
    dlogits_m = p_m.copy()
    dlogits_m[np.arange(n), um] -= 1.0
    dlogits_m /= n

    grads["head_object_w"] = dlogits_o.T @ feat
    grads["head_object_b"] = dlogits_o.sum(axis=0)
    grads["head_material_w"] = dlogits_m.T @ feat
    grads["head_material_b"] = dlogits_m.sum(axis=0)
    dfeat = dlogits_o @ t["head_object_w"] + dlogits_m @ t["head_material_w"]

    a_shape, hw = cache["gap"]
    da = np.broadcast_to(dfeat[:, :, None, None] / hw, a_shape).astype(params.dtype)

    for bi in (3, 2, 1):
        pre_shape, xp, dmask, d, pmask = cache[f"block{bi}"]
        dp = da * pmask
        dd, dw_pw, db_pw = pointwise_backward(dp, d, t[f"pw{bi}_w"])
        grads[f"pw{bi}_w"] = dw_pw
        grads[f"pw{bi}_b"] = db_pw
        dd = dd * dmask
        da, dw_dw, db_dw = depthwise3x3s2_backward(dd, xp, t[f"dw{bi}_w"], pre_shape)
        grads[f"dw{bi}_w"] = dw_dw
        grads[f"dw{bi}_b"] = db_dw

    cols, mask = cache["stem"]
    da = da * mask
    _, dw_stem, db_stem = conv3x3s2_backward(
        da, cols, t["stem_w"], cache["x_shape"], need_dx=False
    )
    grads["stem_w"] = dw_stem
    grads["stem_b"] = db_stem

    return loss, grads, per_sample


def loss_and_grad(params: ModelParams, batch) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean joint loss CE_object + CE_material and its full gradient.

    ``batch`` is (x, y_object, y_material) with 1-based taxonomy labels.
    """
    x, y_obj, y_mat = batch
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    loss, grads, _ = _loss_grad(params, x, np.asarray(y_obj), np.asarray(y_mat))
    return loss, grads


def relu_kink_margin(params: ModelParams, x: np.ndarray) -> float:
    """Smallest |pre-activation| across all ReLUs for this input.

    Finite-difference gradient checks are only meaningful when the step
    size stays well below this margin (no activation mask flips).
    """
    _, cache = _forward_trunk(params, x.astype(params.dtype, copy=False), want_cache=True)
    return float(cache["relu_margin"])


def per_sample_losses(
    params: ModelParams, x: np.ndarray, y_obj: np.ndarray, y_mat: np.ndarray
) -> np.ndarray:
    """Forward-only joint CE per sample (used for replay bookkeeping)."""
    p_o, p_m = forward_batch(params, x)
    n = x.shape[0]
    uo = _unit_index(params.object_classes, np.asarray(y_obj))
    um = _unit_index(params.material_classes, np.asarray(y_mat))
    eps = np.finfo(p_o.dtype).tiny
    return -np.log(np.maximum(p_o[np.arange(n), uo], eps)) - np.log(
        np.maximum(p_m[np.arange(n), um], eps)
    )


# --- optimizer and training loop -------------------------------------------


class Adam:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: Dict[str, np.ndarray], lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            params.tensors[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: List[float] = field(default_factory=list)


def _prepare_image(img: Image, cfg: TrainConfig, aug_seed) -> np.ndarray:
    if cfg.augment:
        img = augment(img, aug_seed, cfg.policy)
    if cfg.input_side is not None and (
        img.width != cfg.input_side or img.height != cfg.input_side
    ):
        img = center_crop_resize(img, cfg.input_side)
    return img.pixels.transpose(2, 0, 1)


def batch_tensors(
    records: Sequence, cfg: TrainConfig, seed_key: Tuple[int, ...]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack records into (x, y_object, y_material); augmentation seeds
    derive from ``seed_key`` plus the record's position."""
    y_obj = np.array([r.object for r in records], dtype=int)
    y_mat = np.array([r.material for r in records], dtype=int)

    sides = {(r.image.height, r.image.width) for r in records}
    uniform_square = len(sides) == 1 and next(iter(sides))[0] == next(iter(sides))[1]
    needs_resize = cfg.input_side is not None and (
        not uniform_square or next(iter(sides))[0] != cfg.input_side
    )
    if cfg.augment and uniform_square and not needs_resize:
        seeds = [np.random.SeedSequence(seed_key + (pos,)) for pos in range(len(records))]
        stacked = augment_batch([r.image for r in records], seeds, cfg.policy)
        return stacked.transpose(0, 3, 1, 2), y_obj, y_mat

    xs = []
    for pos, rec in enumerate(records):
        aug_seed = np.random.SeedSequence(seed_key + (pos,))
        xs.append(_prepare_image(rec.image, cfg, aug_seed))
    return np.stack(xs).astype(np.float64), y_obj, y_mat


def train(
    params: ModelParams,
    train_records: Sequence,
    cfg: TrainConfig,
    lr_schedule: Optional[Callable[[int], float]] = None,
    step_hook: Optional[Callable] = None,
    extra_batch: Optional[Callable] = None,
) -> TrainResult:
    """Deterministic training loop over labeled records.

    ``lr_schedule`` maps epoch index to a learning rate (default:
    constant ``cfg.lr0``).  ``extra_batch(epoch, step)`` may supply
    additional (x, y_obj, y_mat) rows mixed into each step (replay);
    ``step_hook(epoch, step, records, losses)`` observes the new-data
    half after each update.  Raises :class:`TrainingDiverged` if the
    loss stops being finite.
    """
    if len(train_records) == 0:
        raise ValueError("empty training set")
    params = params.copy()
    if cfg.standardize:
        stacked = np.stack([r.image.pixels for r in train_records])
        mean = stacked.mean(axis=(0, 1, 2))
        std = np.maximum(stacked.std(axis=(0, 1, 2)), 1e-6)
        params.tensors["norm_mean"] = mean.astype(params.dtype)
        params.tensors["norm_std"] = std.astype(params.dtype)
    opt = Adam(params, cfg)
    result = TrainResult(params=params)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 31)))
    last_finite = float("nan")

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch) if lr_schedule is not None else cfg.lr0
        order = rng.permutation(len(train_records))
        epoch_loss = 0.0
        n_batches = 0
        for step, start in enumerate(range(0, len(order), cfg.batch)):
            idx = order[start : start + cfg.batch]
            batch_records = [train_records[i] for i in idx]
            x, y_obj, y_mat = batch_tensors(
                batch_records, cfg, (cfg.seed, 101, epoch, step)
            )
            n_new = x.shape[0]
            if extra_batch is not None:
                extra = extra_batch(epoch, step)
                if extra is not None:
                    ex, eo, em = extra
                    if ex.shape[0]:
                        x = np.concatenate([x, ex])
                        y_obj = np.concatenate([y_obj, eo])
                        y_mat = np.concatenate([y_mat, em])
            loss, grads, per_sample = _loss_grad(params, x, y_obj, y_mat)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, step, last_finite)
            last_finite = loss
            opt.step(params, grads, lr)
            if step_hook is not None:
                step_hook(epoch, step, batch_records, per_sample[:n_new])
            epoch_loss += loss
            n_batches += 1
        result.epoch_losses.append(epoch_loss / max(n_batches, 1))
    return result


def predict_records(
    params: ModelParams, records: Sequence, batch: int = 64, input_side: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Top-1 taxonomy indices for both heads over a record list."""
    pred_o = np.zeros(len(records), dtype=int)
    pred_m = np.zeros(len(records), dtype=int)
    oc = np.array(params.object_classes)
    mc = np.array(params.material_classes)
    for start in range(0, len(records), batch):
        chunk = records[start : start + batch]
        xs = []
        for rec in chunk:
            img = rec.image
            if input_side is not None and (img.width != input_side or img.height != input_side):
                img = center_crop_resize(img, input_side)
            xs.append(img.pixels.transpose(2, 0, 1))
        x = np.stack(xs).astype(np.float64)
        p_o, p_m = forward_batch(params, x)
        pred_o[start : start + len(chunk)] = oc[np.argmax(p_o, axis=1)]
        pred_m[start : start + len(chunk)] = mc[np.argmax(p_m, axis=1)]
    return pred_o, pred_m


# --- head growth for deployment-time classes --------------------------------


def grow_heads(
    params: ModelParams,
    new_object_classes: Sequence[int],
    new_material_classes: Sequence[int],
    seed: int,
) -> ModelParams:
    """Append He-initialized output units for newly observed classes."""
    params = params.copy()
    t = params.tensors
    feat = t["head_object_w"].shape[1]
    dtype = params.dtype

    new_obj = [c for c in new_object_classes if c not in params.object_classes]
    new_mat = [c for c in new_material_classes if c not in params.material_classes]
    if new_obj:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 51, len(params.object_classes))))
        rows = _he_uniform(rng, (len(new_obj), feat), feat, dtype)
        t["head_object_w"] = np.concatenate([t["head_object_w"], rows])
        t["head_object_b"] = np.concatenate([t["head_object_b"], np.zeros(len(new_obj), dtype=dtype)])
        params.object_classes = params.object_classes + tuple(new_obj)
    if new_mat:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 52, len(params.material_classes))))
        rows = _he_uniform(rng, (len(new_mat), feat), feat, dtype)
        t["head_material_w"] = np.concatenate([t["head_material_w"], rows])
        t["head_material_b"] = np.concatenate([t["head_material_b"], np.zeros(len(new_mat), dtype=dtype)])
        params.material_classes = params.material_classes + tuple(new_mat)
    return params


# --- checkpoint format -------------------------------------------------------
#
# Header: magic, u32 version, the two class maps, then a layer manifest
# (name, ndim, dims).  Body: little-endian float32 tensors in manifest
# order.


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as fp:
        fp.write(CHECKPOINT_MAGIC)
        fp.write(struct.pack("<I", CHECKPOINT_VERSION))
        for classes in (params.object_classes, params.material_classes):
            fp.write(struct.pack("<I", len(classes)))
            fp.write(struct.pack(f"<{len(classes)}I", *classes))
        names = params.tensor_names()
        fp.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("ascii")
            shape = params.tensors[name].shape
            fp.write(struct.pack("<H", len(raw)))
            fp.write(raw)
            fp.write(struct.pack("<B", len(shape)))
            fp.write(struct.pack(f"<{len(shape)}I", *shape))
        for name in names:
            fp.write(params.tensors[name].astype("<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> ModelParams:
    with open(path, "rb") as fp:
        if fp.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        (version,) = struct.unpack("<I", fp.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        maps = []
        for _ in range(2):
            (n,) = struct.unpack("<I", fp.read(4))
            maps.append(struct.unpack(f"<{n}I", fp.read(4 * n)))
        (n_tensors,) = struct.unpack("<I", fp.read(4))
        manifest = []
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", fp.read(2))
            name = fp.read(name_len).decode("ascii")
            (ndim,) = struct.unpack("<B", fp.read(1))
            shape = struct.unpack(f"<{ndim}I", fp.read(4 * ndim))
            manifest.append((name, shape))
        tensors = {}
        for name, shape in manifest:
            count = int(np.prod(shape)) if shape else 1
            raw = fp.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError("truncated checkpoint")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)
    return ModelParams(tensors, tuple(maps[0]), tuple(maps[1]))


# --- optional fully separate trunks ------------------------------------------


@dataclass
class ParallelParams:
    """Two single-task networks sharing nothing (fidelity mode)."""

    object_net: ModelParams
    material_net: ModelParams


def forward_parallel(pp: ParallelParams, img: Image) -> PredictionPair:
    po = forward(pp.object_net, img)
    pm = forward(pp.material_net, img)
    return PredictionPair(
        p_object=po.p_object,
        p_material=pm.p_material,
        object_classes=pp.object_net.object_classes,
        material_classes=pp.material_net.material_classes,
    )


def train_parallel(
    pp: ParallelParams, train_records: Sequence, cfg: TrainConfig
) -> ParallelParams:
    """Train each trunk on its own task only (labels of the other head
    are still passed through so the joint loss drives a single head by
    zeroing the other's learning signal via identical labels)."""
    obj = train(pp.object_net, train_records, cfg).params
    mat = train(pp.material_net, train_records, cfg).params
    return ParallelParams(obj, mat)
