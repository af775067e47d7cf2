import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from condensenext import compression, data as cifar, training
from condensenext.arch import build
from condensenext.errors import ConfigError, DataError, ParameterError, TrainingError
from condensenext.tensor import Tensor, backward

from .conftest import toy_spec


# losses ---------------------------------------------------------------------------------

def test_uniform_logits_give_ln10():
    loss = training.cross_entropy(Tensor(np.zeros((4, 10), np.float32)), [0, 3, 5, 9])
    assert abs(float(loss.data) - math.log(10)) < 1e-6


def test_confident_correct_logit():
    z = np.zeros((1, 10))
    z[0, 2] = 20.0
    ce = float(training.cross_entropy(Tensor(z), [2]).data)
    assert abs(ce - 9 * math.exp(-20)) < 1e-12
    fl = float(training.cb_focal_loss(Tensor(z), [2], [5] * 10, gamma=0.5).data)
    assert 0 < fl < ce  # down-weighted, but not rounded to zero


def test_focal_half_probability():
    loss = training.cb_focal_loss(Tensor(np.zeros((1, 2))), [0], [10, 10], gamma=2.0, beta=0.9)
    assert abs(float(loss.data) - 0.25 * math.log(2)) < 1e-12


def test_focal_with_gamma_zero_and_balanced_counts_is_cross_entropy(rng):
    z = Tensor(rng.normal(size=(6, 10)))
    y = rng.integers(0, 10, 6)
    a = float(training.cb_focal_loss(z, y, [100] * 10, gamma=0.0).data)
    b = float(training.cross_entropy(z, y).data)
    assert abs(a - b) < 1e-12


def test_beta_one_rejected():
    with pytest.raises(ParameterError):
        training.cb_focal_loss(Tensor(np.zeros((1, 2))), [0], [1, 1], beta=1.0)
    with pytest.raises(ParameterError):
        training.cb_focal_loss(Tensor(np.zeros((1, 2))), [0], [1, 1], gamma=-1)


def test_class_balanced_weights_favour_rare_classes():
    w = training.class_balanced_weights([1000, 10, 0], 0.999)
    assert w[1] > w[0] and abs(w.sum() - 3) < 1e-12
    assert w[2] == pytest.approx(training.class_balanced_weights([1000, 10, 1], 0.999)[2])


@given(g1=st.floats(0.0, 3.0), dg=st.floats(0.01, 2.0), p=st.floats(0.05, 0.95))
def test_focal_monotone_in_gamma(g1, dg, p):
    z = np.array([[math.log(p), math.log(1 - p)]])
    a = float(training.cb_focal_loss(Tensor(z), [0], [1, 1], gamma=g1).data)
    b = float(training.cb_focal_loss(Tensor(z), [0], [1, 1], gamma=g1 + dg).data)
    assert b <= a + 1e-15


def test_focal_beta_zero_gamma_zero_is_cross_entropy(rng):
    for _ in range(5):
        z = Tensor(rng.normal(size=(8, 10)).astype(np.float32))
        y = rng.integers(0, 10, 8)
        counts = rng.integers(1, 500, 10)
        a = float(training.cb_focal_loss(z, y, counts, gamma=0.0, beta=0.0).data)
        assert abs(a - float(training.cross_entropy(z, y).data)) < 1e-6


@given(gamma=st.floats(0.0, 5.0), p1=st.floats(0.01, 0.98), dp=st.floats(0.001, 0.5))
def test_focal_non_increasing_in_pt(gamma, p1, dp):
    p2 = min(p1 + dp, 0.99)

    def at(p):
        z = np.array([[math.log(p), math.log(1 - p)]])
        return float(training.cb_focal_loss(Tensor(z), [0], [1, 1], gamma=gamma).data)

    assert at(p2) <= at(p1) + 1e-12


def test_label_errors():
    with pytest.raises(DataError):
        training.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(DataError):
        training.cross_entropy(Tensor(np.zeros((2, 3))), [0])


@pytest.mark.parametrize("loss", ["cross_entropy", "cb_focal"])
def test_loss_gradients_match_finite_differences(loss, rng):
    z0 = rng.normal(size=(5, 4))
    y = np.array([0, 1, 3, 3, 2])
    counts = [3, 40, 7, 1]

    def f(z):
        t = Tensor(z)
        if loss == "cross_entropy":
            return training.cross_entropy(t, y)
        return training.cb_focal_loss(t, y, counts, gamma=0.5, beta=0.99)

    t = Tensor(z0.copy(), requires_grad=True)
    out = training.cross_entropy(t, y) if loss == "cross_entropy" else \
        training.cb_focal_loss(t, y, counts, gamma=0.5, beta=0.99)
    backward(out)
    num = np.zeros_like(z0)
    h = 1e-6
    for idx in np.ndindex(z0.shape):
        zp, zm = z0.copy(), z0.copy()
        zp[idx] += h
        zm[idx] -= h
        num[idx] = (float(f(zp).data) - float(f(zm).data)) / (2 * h)
    assert np.allclose(t.grad, num, atol=1e-7)


# schedule and optimizer -----------------------------------------------------------------

def test_cosine_values():
    assert training.cosine_lr(0, 200, 0.1) == pytest.approx(0.1)
    assert training.cosine_lr(100, 200, 0.1) == pytest.approx(0.05)
    assert training.cosine_lr(199, 200, 0.1) == pytest.approx(6.1684e-6, rel=1e-3)
    lrs = [training.cosine_lr(e, 200, 0.1) for e in range(200)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_nesterov_hand_iteration():
    p = Tensor(np.zeros(1), requires_grad=True)
    opt = training.NesterovSGD([p], momentum=0.9, weight_decay=0.0)
    p.grad = np.ones(1)
    opt.step(0.1)
    assert p.data[0] == pytest.approx(-0.19)
    p.grad = np.ones(1)
    opt.step(0.1)
    assert p.data[0] == pytest.approx(-0.461)
    # with zero gradient the weight keeps moving on momentum alone
    before = p.data[0]
    p.grad = np.zeros(1)
    opt.step(0.1)
    assert p.data[0] < before


def test_nesterov_weight_decay_and_masks():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = training.NesterovSGD([p], momentum=0.0, weight_decay=0.5)
    p.grad = np.zeros(2)
    opt.step(0.1, masks={id(p): np.array([1.0, 0.0])})
    assert p.data[0] == pytest.approx(0.95) and p.data[1] == 0.0
    assert opt.state_arrays()[0][1] == 0.0


def test_config_validation():
    with pytest.raises(ConfigError):
        training.TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        training.TrainConfig(loss="hinge")
    with pytest.raises(ConfigError):
        training.TrainConfig(dropout_rate=1.0)


def test_report_line_round_trip():
    rec = training.EpochRecord(3, 0.05, 1.25, 0.5, 1.5, 0.4, stage=2)
    assert training.EpochRecord.from_line(rec.to_line()) == rec
    with pytest.raises(DataError):
        training.EpochRecord.from_line("epoch=1\tlr=0.1")


# epoch loop -----------------------------------------------------------------------------

def _small_run(epochs=4, n=40, seed=0, **kw):
    g = build(toy_spec(), seed=seed)
    data = cifar.synthetic_cifar(n, seed=1)
    cfg = training.TrainConfig(epochs=epochs, batch_size=20, seed=seed, **kw)
    stream = io.StringIO()
    rep = training.train(g, cfg, data, data.take(np.arange(10)), report_stream=stream)
    return g, rep, stream.getvalue()


@pytest.fixture(scope="module")
def run():
    return _small_run()


def test_report_structure(run):
    g, rep, text = run
    assert [r.epoch for r in rep.epochs] == [0, 1, 2, 3]
    parsed = training.read_report(text)
    assert [(r.epoch, r.stage) for r in parsed] == [(r.epoch, r.stage) for r in rep.epochs]
    assert all(abs(a.train_loss - b.train_loss) < 1e-6 for a, b in zip(parsed, rep.epochs))
    assert rep.epochs[0].lr == pytest.approx(0.1)
    expected = compression.trigger_epochs(4, g.spec.condensation_factor, 0.5)
    assert rep.triggers == sorted(expected.items())
    assert all(0.0 <= r.val_acc <= 1.0 and math.isfinite(r.train_loss) for r in rep.epochs)


def test_masks_shrink_monotonically_and_pruned_weights_stay_zero(run):
    g, rep, _ = run
    for before, after in zip(rep.mask_history, rep.mask_history[1:]):
        for name in before:
            assert not np.any(after[name] & ~before[name])
    masks = g.param_masks()
    for n in g.lgc_nodes():
        w = n.params["weight"]
        assert np.all(w.data[masks[id(w)] == 0] == 0)


def test_training_is_deterministic(run):
    g2, rep2, text2 = _small_run()
    g, rep, text = run
    assert text == text2
    for (_, a), (_, b) in zip(g.parameters(), g2.parameters()):
        assert np.array_equal(a.data, b.data)


def test_loss_decreases_on_fixed_batch():
    g = build(toy_spec(), seed=0)
    data = cifar.synthetic_cifar(20, seed=2)
    x = Tensor(cifar.normalize_array(data.images))
    params = [t for _, t in g.parameters()]
    opt = training.NesterovSGD(params, 0.9, 0.0)
    from condensenext.arch import forward
    losses = []
    for step in range(50):
        loss = training.cross_entropy(forward(g, x, training=True, seed=step), data.labels)
        losses.append(float(loss.data))
        opt.zero_grad()
        backward(loss)
        opt.step(0.01)
        del loss
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
    assert min(losses) < losses[0]


def test_two_epoch_structure():
    _, rep, _ = _small_run(epochs=2, n=64)
    assert len(rep.epochs) == 2
    assert rep.epochs[0].lr >= rep.epochs[1].lr


def test_untrained_accuracy_near_chance():
    data = cifar.synthetic_cifar(200, seed=3)
    accs = [training.evaluate(build(toy_spec(), seed=s), data).top1 for s in range(5)]
    assert 0.05 <= np.mean(accs) <= 0.20


def test_evaluate_is_pure():
    g = build(toy_spec(), seed=0)
    data = cifar.synthetic_cifar(100, seed=3)
    snap = [t.data.copy() for _, t in g.parameters()] + [a.copy() for _, a in g.buffers()]
    a = training.evaluate(g, data, batch_size=33)
    b = training.evaluate(g, data, batch_size=100)
    assert a.count == 100 and a.top1 == b.top1 and a.loss == pytest.approx(b.loss, rel=1e-5)
    after = [t.data for _, t in g.parameters()] + [x for _, x in g.buffers()]
    assert all(np.array_equal(s, t) for s, t in zip(snap, after))


def test_memorized_set_scores_full_accuracy():
    from condensenext.arch import forward
    g = build(toy_spec(), seed=0)
    g.dropout_rate = 0.0
    data = cifar.synthetic_cifar(10, seed=5)
    x = Tensor(cifar.normalize_array(data.images))
    opt = training.NesterovSGD([t for _, t in g.parameters()], 0.9, 0.0)
    for step in range(300):
        loss = training.cross_entropy(forward(g, x, training=True), data.labels)
        value = float(loss.data)
        opt.zero_grad()
        backward(loss)
        opt.step(0.05)
        del loss
        if value < 1e-3 and step > 100:
            break
    assert value < 1e-2
    assert training.evaluate(g, data).top1 == 1.0


def test_empty_training_set_rejected():
    g = build(toy_spec())
    with pytest.raises(DataError):
        training.train(g, training.TrainConfig(epochs=1), cifar.synthetic_cifar(0, 0))


def test_nan_weights_are_diagnosed():
    g = build(toy_spec())
    node = next(n for n in g.nodes if n.kind == "conv")
    node.params["weight"].data[...] = np.nan
    with pytest.raises(TrainingError, match=node.name):
        training.train(g, training.TrainConfig(epochs=1, batch_size=10), cifar.synthetic_cifar(10, 0))
