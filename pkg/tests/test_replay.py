import warnings
from dataclasses import replace

import numpy as np
import pytest

from surfsense import classifier, replay
from surfsense.classifier import TrainConfig, init_params
from surfsense.corpus import SampleRecord
from surfsense.imaging import Image
from surfsense.replay import (
    BufferItem,
    CLConfig,
    CLTricks,
    HeadBias,
    ReplayBuffer,
    Task,
    apply_bias,
    balanced_insert,
    cl_run,
    fit_affine_on_logits,
    fit_bias_correction,
    loss_aware_insert,
    reservoir_insert,
    sample_replay_batch,
    task_seed,
)

LOSS_EPS = replay.LOSS_EPS


def item(material=1, loss=0.0, obj=1, seed=0, side=8):
    rng = np.random.default_rng(seed)
    img = Image(rng.uniform(0, 1, (side, side, 3)).astype(np.float32))
    return BufferItem(img, obj, material, loss, task_id=0, insert_step=0)


def simple_records(labels, side=8):
    recs = []
    for i, (o, m) in enumerate(labels):
        rng = np.random.default_rng(i)
        img = Image(rng.uniform(0, 1, (side, side, 3)).astype(np.float32))
        recs.append(SampleRecord(1, o, m, img, float(i)))
    return recs


# --- reservoir discipline ---


def test_under_capacity_retains_everything():
    buf = ReplayBuffer(capacity=500)
    rng = np.random.default_rng(0)
    for i in range(500):
        reservoir_insert(buf, item(seed=i), rng)
    assert len(buf.items) == 500
    assert buf.seen_count == 500


def test_capacity_one_stream_of_two_is_fair():
    hits = 0
    trials = 4000
    for seed in range(trials):
        buf = ReplayBuffer(capacity=1)
        rng = np.random.default_rng(seed)
        reservoir_insert(buf, item(material=1), rng)
        reservoir_insert(buf, item(material=2), rng)
        hits += buf.items[0].material == 2
    # exact inclusion probability is 1/2
    assert abs(hits / trials - 0.5) < 0.03


def test_reservoir_inclusion_frequency_small_scale():
    n, m, seeds = 400, 40, 120
    counts = np.zeros(n)
    for s in range(seeds):
        buf = ReplayBuffer(capacity=m)
        rng = np.random.default_rng(s)
        for i in range(n):
            reservoir_insert(buf, item(material=i), rng)
        for it in buf.items:
            counts[it.material] += 1
    freq = counts / seeds
    assert abs(freq.mean() - m / n) < 1e-9  # each run keeps exactly m
    # no position should be wildly over/under represented
    expected = seeds * m / n
    chi2 = ((counts - expected) ** 2 / expected).sum()
    from scipy import stats

    p = 1.0 - stats.chi2.cdf(chi2, df=n - 1)
    assert p > 0.01


def test_capacity_zero_counts_but_stores_nothing():
    buf = ReplayBuffer(capacity=0)
    rng = np.random.default_rng(0)
    for i in range(10):
        reservoir_insert(buf, item(), rng)
    assert buf.items == []
    assert buf.seen_count == 10


# --- balanced discipline ---


def test_balanced_ninety_ten_stream_equalizes():
    buf = ReplayBuffer(capacity=100, sampling_mode="balanced")
    rng = np.random.default_rng(7)
    for i in range(5000):
        mat = 1 if rng.random() < 0.9 else 2
        balanced_insert(buf, item(material=mat), rng)
    counts = buf.class_counts()
    assert abs(counts[1] - 50) <= 1
    assert abs(counts[2] - 50) <= 1


def test_balanced_single_class_evicts_uniformly():
    # with one class the victim pool is the whole buffer: uniform slots
    buf = ReplayBuffer(capacity=20, sampling_mode="balanced")
    rng = np.random.default_rng(3)
    for i in range(20):
        balanced_insert(buf, item(material=1, loss=float(i)), rng)
    evictions = np.zeros(20)
    for trial in range(4000):
        snapshot = [it.last_loss for it in buf.items]
        balanced_insert(buf, item(material=1, loss=1000.0 + trial), rng)
        changed = [i for i in range(20) if buf.items[i].last_loss != snapshot[i]]
        evictions[changed[0]] += 1
    # chi-square uniformity over slots
    expected = evictions.sum() / 20
    chi2 = ((evictions - expected) ** 2 / expected).sum()
    from scipy import stats

    assert 1.0 - stats.chi2.cdf(chi2, df=19) > 0.01


def test_balanced_three_class_spread_at_most_one():
    buf = ReplayBuffer(capacity=10, sampling_mode="balanced")
    rng = np.random.default_rng(5)
    for i in range(3000):
        balanced_insert(buf, item(material=1 + i % 3), rng)
        if buf.seen_count > 30:
            counts = sorted(buf.class_counts().values())
            assert counts[-1] - counts[0] <= 1
    assert sorted(buf.class_counts().values()) == [3, 3, 4]


# --- loss-aware discipline ---


def test_loss_aware_evicts_easy_items():
    rng = np.random.default_rng(11)
    evict_low = evict_high = 0
    for _ in range(60_000):
        buf = ReplayBuffer(capacity=2, sampling_mode="loss_aware")
        buf.items = [item(material=1, loss=0.01), item(material=2, loss=10.0)]
        buf.seen_count = 2
        loss_aware_insert(buf, item(material=3, loss=1.0), rng)
        mats = {it.material for it in buf.items}
        if 1 not in mats:
            evict_low += 1
        else:
            evict_high += 1
    ratio = evict_low / max(evict_high, 1)
    want = (10.0 + LOSS_EPS) / (0.01 + LOSS_EPS)
    assert abs(ratio - want) / want < 0.2


def test_loss_aware_equal_losses_is_uniform():
    rng = np.random.default_rng(13)
    evictions = np.zeros(10)
    for _ in range(20_000):
        buf = ReplayBuffer(capacity=10, sampling_mode="loss_aware")
        buf.items = [item(material=i, loss=2.0) for i in range(10)]
        buf.seen_count = 10
        loss_aware_insert(buf, item(material=99, loss=2.0), rng)
        gone = next(i for i in range(10) if buf.items[i].material != i)
        evictions[gone] += 1
    expected = evictions.sum() / 10
    chi2 = ((evictions - expected) ** 2 / expected).sum()
    from scipy import stats

    assert 1.0 - stats.chi2.cdf(chi2, df=9) > 0.01


def test_loss_aware_zero_loss_stays_finite():
    rng = np.random.default_rng(17)
    buf = ReplayBuffer(capacity=2, sampling_mode="loss_aware")
    buf.items = [item(material=1, loss=0.0), item(material=2, loss=0.0)]
    buf.seen_count = 2
    loss_aware_insert(buf, item(material=3, loss=0.0), rng)
    assert len(buf.items) == 2


# --- replay draws ---


def test_sample_replay_empty_buffer_rejected():
    with pytest.raises(ValueError):
        sample_replay_batch(ReplayBuffer(capacity=4), 2, np.random.default_rng(0), CLConfig())


def test_sample_replay_zero_items():
    buf = ReplayBuffer(capacity=4)
    buf.items = [item()]
    draw = sample_replay_batch(buf, 0, np.random.default_rng(0), CLConfig())
    assert draw.items == []


def test_sample_replay_deterministic():
    buf = ReplayBuffer(capacity=8)
    buf.items = [item(material=i) for i in range(8)]
    cfg = CLConfig(tricks=CLTricks(independent_buffer_augmentation=True))
    a = sample_replay_batch(buf, 5, np.random.default_rng(42), cfg)
    b = sample_replay_batch(buf, 5, np.random.default_rng(42), cfg)
    assert [it.material for it in a.items] == [it.material for it in b.items]
    assert a.aug_seeds == b.aug_seeds


def test_independent_augmentation_gives_distinct_seeds():
    buf = ReplayBuffer(capacity=2)
    buf.items = [item(material=1)]
    on = CLConfig(tricks=CLTricks(independent_buffer_augmentation=True))
    off = CLConfig()
    draw_on = sample_replay_batch(buf, 6, np.random.default_rng(0), on)
    draw_off = sample_replay_batch(buf, 6, np.random.default_rng(0), off)
    assert len(set(draw_on.aug_seeds)) > 1  # same item, different transforms
    assert len(set(draw_off.aug_seeds)) == 1  # batch-shared transform


# --- bias control ---


def test_identity_bias_leaves_logits_unchanged():
    logits = np.random.default_rng(0).normal(size=(5, 7))
    out = apply_bias(logits, HeadBias())
    assert np.array_equal(out, logits)


def test_bias_only_touches_new_units():
    logits = np.random.default_rng(1).normal(size=(4, 6))
    out = apply_bias(logits, HeadBias(scale=2.0, offset=-1.0, new_units=(4, 5)))
    assert np.array_equal(out[:, :4], logits[:, :4])
    assert np.allclose(out[:, 4:], 2.0 * logits[:, 4:] - 1.0)


def test_fitted_offset_recovers_constructed_inflation():
    # Calibrated construction: labels drawn from the softmax of the raw
    # logits, so the population CE optimum over (scale, offset) on the
    # inflated columns is exactly (1, -2).
    rng = np.random.default_rng(1)
    n, c = 2500, 9
    new_units = (5, 6, 7, 8)
    raw = rng.normal(0, 1.5, size=(n, c))
    p = np.exp(raw - raw.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(n)
    labels = (p.cumsum(axis=1) < u[:, None]).sum(axis=1)
    logits = raw.copy()
    logits[:, new_units] += 2.0  # uniform inflation of new classes
    fitted = fit_affine_on_logits(logits, labels, new_units)
    assert abs(fitted.offset - (-2.0)) < 0.2
    assert abs(fitted.scale - 1.0) < 0.2


def test_old_class_ordering_preserved():
    logits = np.array([[3.0, 2.0, 1.0, 0.0, 5.0]])
    out = apply_bias(logits, HeadBias(scale=0.5, offset=-4.0, new_units=(4,)))
    assert np.array_equal(np.argsort(out[0, :4]), np.argsort(logits[0, :4]))


def test_no_new_classes_gives_identity():
    buf = ReplayBuffer(capacity=4)
    buf.items = [item()]
    params = init_params(seed=0)
    bias = fit_bias_correction(params, buf, CLConfig())
    assert bias.object_head == HeadBias()
    assert bias.material_head == HeadBias()


# --- the continual-learning loop ---


def two_task_records():
    a = simple_records([(1, 1), (1, 2), (3, 3)] * 6)
    b = simple_records([(5, 7), (5, 8)] * 6)
    return a, b


def test_empty_task_skipped_with_warning():
    params = init_params(seed=0)
    cfg = CLConfig(train=TrainConfig(epochs=1, batch=4, seed=0, augment=False))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = cl_run(params, [Task(1, ())], cfg, ReplayBuffer(capacity=4))
    assert any("skipped" in str(w.message) for w in caught)
    assert result.metrics == []


def test_cl_run_capacity_zero_equals_sequential_finetuning():
    a, b = two_task_records()
    base = TrainConfig(lr0=1e-3, batch=4, epochs=2, seed=9, augment=False)
    cfg = CLConfig(train=base, tricks=CLTricks())
    params = init_params(seed=1)

    stream = [Task(1, tuple(a)), Task(2, tuple(b))]
    cl_result = cl_run(params, stream, cfg, ReplayBuffer(capacity=0))

    ref = params.copy()
    for pos, records in enumerate([a, b], start=1):
        task_cfg = replace(base, seed=task_seed(base.seed, pos))
        grow_obj = sorted({r.object for r in records} - set(ref.object_classes))
        grow_mat = sorted({r.material for r in records} - set(ref.material_classes))
        if grow_obj or grow_mat:
            ref = classifier.grow_heads(ref, grow_obj, grow_mat, task_cfg.seed)
        ref = classifier.train(ref, records, task_cfg).params

    for name in ref.tensors:
        assert np.array_equal(cl_result.params.tensors[name], ref.tensors[name]), name


def test_cl_run_single_task_empty_buffer_is_plain_training():
    a, _ = two_task_records()
    base = TrainConfig(lr0=1e-3, batch=4, epochs=2, seed=3, augment=False)
    cfg = CLConfig(train=base, tricks=CLTricks())
    params = init_params(seed=0)
    got = cl_run(params, [Task(1, tuple(a))], cfg, ReplayBuffer(capacity=0))
    want = classifier.train(
        params, a, replace(base, seed=task_seed(base.seed, 1))
    ).params
    for name in want.tensors:
        assert np.array_equal(got.params.tensors[name], want.tensors[name])


def test_cl_run_gamma_one_keeps_lr_constant():
    a, b = two_task_records()
    base = TrainConfig(lr0=1e-3, batch=4, epochs=1, seed=5, augment=False)
    on = CLConfig(train=base, tricks=CLTricks(exp_lr_decay=True), gamma=1.0)
    off = CLConfig(train=base, tricks=CLTricks())
    pa = cl_run(init_params(seed=2), [Task(1, tuple(a))], on, ReplayBuffer(capacity=0))
    pb = cl_run(init_params(seed=2), [Task(1, tuple(a))], off, ReplayBuffer(capacity=0))
    for name in pa.params.tensors:
        assert np.array_equal(pa.params.tensors[name], pb.params.tensors[name])


def test_cl_run_grows_heads_and_buffers_items():
    a, b = two_task_records()
    base = TrainConfig(lr0=1e-3, batch=4, epochs=1, seed=7, augment=False)
    cfg = CLConfig(train=base, tricks=CLTricks.all_on(), gamma=0.9)
    params = init_params(seed=0, object_classes=[1, 3], material_classes=[1, 2, 3])
    buf = ReplayBuffer(capacity=16, sampling_mode=cfg.buffer_mode())
    result = cl_run(params, [Task(1, tuple(a), tuple(a)), Task(2, tuple(b), tuple(b))], cfg, buf)
    assert 5 in result.params.object_classes
    assert set(result.params.material_classes) >= {7, 8}
    assert len(buf.items) == 16
    assert buf.seen_count == len(a) + len(b)
    # metrics rows: task1 evaluated once, then both after task 2
    assert [(r[0], r[1]) for r in result.metrics] == [(1, 1), (2, 1), (2, 2)]


def test_cl_run_metrics_accuracy_range():
    a, b = two_task_records()
    base = TrainConfig(lr0=2e-3, batch=4, epochs=3, seed=11, augment=False)
    cfg = CLConfig(train=base, tricks=CLTricks.all_on())
    params = init_params(seed=4, object_classes=[1, 3], material_classes=[1, 2, 3])
    buf = ReplayBuffer(capacity=32, sampling_mode=cfg.buffer_mode())
    result = cl_run(params, [Task(1, tuple(a), tuple(a)), Task(2, tuple(b), tuple(b))], cfg, buf)
    for _, _, ao, am in result.metrics:
        assert 0.0 <= ao <= 1.0 and 0.0 <= am <= 1.0
