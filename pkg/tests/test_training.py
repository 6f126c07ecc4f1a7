import numpy as np
import pytest

from stochdepth.data import Dataset, make_spirals
from stochdepth.depth import SurvivalSchedule, expected_depth, savings_estimate
from stochdepth.resnet import NetworkSpec, ResNet
from stochdepth.tensor import RngStream, Stream
from stochdepth.training import (
    LrSchedule,
    OptimizerState,
    Streams,
    TrainingDiverged,
    evaluate,
    fit,
    lr_at,
    select_epoch,
    sgd_step,
    train_epoch,
)


def step(theta, grad, **kw):
    theta, grad = np.array([theta], float), np.array([grad], float)
    state = OptimizerState(**kw)
    sgd_step(theta, grad, state)
    return theta[0], state


def test_sgd_fixed_point():
    theta, _ = step(0.7, 0.0, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert theta == 0.7


def test_sgd_vanilla():
    theta, _ = step(1.0, 1.0, lr=0.1, momentum=0.0, weight_decay=0.0, nesterov=False)
    assert theta == pytest.approx(0.9, abs=1e-15)


def test_sgd_nesterov_hand_computed():
    theta, state = step(0.0, 1.0, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert state.velocity[0] == pytest.approx(-0.1, abs=1e-15)
    assert theta == pytest.approx(-0.19, abs=1e-15)


def test_sgd_plain_momentum_two_steps():
    theta = np.array([0.0])
    state = OptimizerState(lr=0.1, momentum=0.9, weight_decay=0.0, nesterov=False)
    for _ in range(2):
        sgd_step(theta, np.array([1.0]), state)
    # v1 = -0.1, v2 = -0.19, theta = v1 + v2
    assert theta[0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step(np.zeros(3), np.zeros(2), OptimizerState())


def test_weight_decay_shrinks_norm_every_step():
    theta = np.random.default_rng(0).normal(size=50)
    state = OptimizerState(lr=0.1, momentum=0.9, weight_decay=1e-2)
    norms = [np.linalg.norm(theta)]
    for _ in range(30):
        sgd_step(theta, np.zeros_like(theta), state)
        norms.append(np.linalg.norm(theta))
    assert all(b < a for a, b in zip(norms, norms[1:]))


@pytest.mark.parametrize("epoch, lr", [(100, 0.1), (300, 0.01), (400, 0.001)])
def test_lr_step_schedule(epoch, lr):
    assert lr_at(LrSchedule(0.1, (250, 375)), epoch) == pytest.approx(lr, rel=1e-12)


@pytest.mark.parametrize("epoch, lr", [(5, 0.01), (20, 0.1), (200, 0.01)])
def test_lr_warmup(epoch, lr):
    s = LrSchedule(0.1, (150, 225), warmup_epochs=10, warmup_lr=0.01)
    assert s.lr_at(epoch) == pytest.approx(lr, rel=1e-12)


def test_lr_without_milestones_is_constant():
    assert {LrSchedule(0.05).lr_at(e) for e in range(0, 1000, 37)} == {0.05}


@pytest.mark.parametrize("kw", [{"milestones": (5, 5)}, {"milestones": (9, 3)}, {"factor": 1.0}, {"factor": 0.0}])
def test_lr_invalid(kw):
    with pytest.raises(ValueError):
        LrSchedule(0.1, **kw)


def test_select_epoch():
    assert select_epoch([0.3, 0.2, 0.25]) == 1
    assert select_epoch([0.4]) == 0
    assert select_epoch([0.3, 0.2, 0.2, 0.25]) == 1
    with pytest.raises(ValueError):
        select_epoch([])


def _probe_classifier(bias):
    net = ResNet(NetworkSpec("linear", 10, ((1, 10),), 10))
    net.params["stem.fc.weight"][...] = np.eye(10) * (bias is None)
    net.params["head.weight"][...] = np.eye(10)
    if bias is not None:
        net.params["head.bias"][...] = bias
    return net


def test_evaluate_perfect_and_chance():
    x, y = np.eye(10), np.arange(10)
    assert evaluate(_probe_classifier(None), x, y) == 0.0
    const = _probe_classifier(np.eye(10)[3])
    assert evaluate(const, x, y) == pytest.approx(0.9)
    sched = SurvivalSchedule("linear_decay", 0.5, 1)
    assert evaluate(_probe_classifier(None), x, y, sched) == 0.0


def test_evaluate_is_deterministic():
    ds = make_spirals(30, 3, 0.1, RngStream(0, Stream.DATA))
    net = ResNet(NetworkSpec("dense", 2, ((4, 8),), 3), RngStream(0, Stream.INIT))
    x, y = ds.split("train")
    sched = SurvivalSchedule("linear_decay", 0.5, 4)
    assert evaluate(net, x, y, sched) == evaluate(net, x, y, sched)
    before = {k: v.copy() for k, v in net.buffers.items()}
    evaluate(net, x, y)
    assert all(np.array_equal(before[k], v) for k, v in net.buffers.items())


def _spiral_data(n, classes=2, noise=0.05, seed=0):
    return make_spirals(n, classes, noise, RngStream(seed, Stream.DATA))


def test_tiny_net_memorizes_32_samples():
    x, y = _spiral_data(16).split("train")
    net = ResNet(NetworkSpec("dense", 2, ((4, 16),), 2), RngStream(0, Stream.INIT))
    opt = OptimizerState(lr=0.1, momentum=0.9, weight_decay=0.0)
    streams = Streams.from_seed(0)
    for epoch in range(200):
        train_epoch(net, x, y, None, opt, streams, batch_size=32, epoch=epoch)
    assert evaluate(net, x, y) == 0.0


def test_linearly_separable_reaches_zero_error():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(64, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    x += 0.3 * np.sign(x[:, :1] + 0.5 * x[:, 1:])  # open a margin
    net = ResNet(NetworkSpec("dense", 2, ((2, 8),), 2), RngStream(1, Stream.INIT))
    opt = OptimizerState(lr=0.05, momentum=0.9, weight_decay=0.0)
    streams = Streams.from_seed(1)
    losses = [train_epoch(net, x, y, None, opt, streams, batch_size=16, epoch=e).train_loss for e in range(60)]
    assert evaluate(net, x, y) == 0.0
    assert losses[-1] < losses[0]


@pytest.mark.parametrize("rule", ["uniform", "linear_decay"])
def test_full_survival_matches_constant_depth(rule):
    ds = _spiral_data(20, classes=3)
    ds = Dataset(ds.inputs, ds.labels, 3, np.where(np.arange(len(ds)) % 5 == 0, "val", "train"))
    runs = []
    for sched in (None, SurvivalSchedule(rule, 1.0, 3)):
        net = ResNet(NetworkSpec("dense", 2, ((3, 6),), 3), RngStream(2, Stream.INIT))
        res = fit(net, ds, epochs=3, lr_schedule=LrSchedule(0.05), schedule=sched, batch_size=8, seed=2)
        runs.append((net, res))
    (a, ra), (b, rb) = runs
    assert a.flat_params.tobytes() == b.flat_params.tobytes()
    for k in a.buffers:
        assert a.buffers[k].tobytes() == b.buffers[k].tobytes()
    for ma, mb in zip(ra.history, rb.history):
        da, db = ma.to_dict(), mb.to_dict()
        da.pop("wall_seconds"), db.pop("wall_seconds")
        assert da == pytest.approx(db, nan_ok=True)
        assert da["mean_abs_grad_block1"] == db["mean_abs_grad_block1"]


def test_blocks_executed_concentrates_for_L54():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4000, 2))
    y = rng.integers(0, 3, size=4000)
    net = ResNet(NetworkSpec("dense", 2, ((54, 8),), 3), RngStream(0, Stream.INIT))
    sched = SurvivalSchedule("linear_decay", 0.5, 54)
    opt = OptimizerState(lr=0.001)
    m = train_epoch(net, x, y, sched, opt, Streams.from_seed(0), batch_size=8)
    assert m.minibatches == 500
    assert m.blocks_executed <= 54 * m.minibatches
    per_batch = m.blocks_executed / m.minibatches
    assert abs(per_batch - expected_depth(sched)) <= 0.03 * expected_depth(sched)
    assert abs(m.block_flops_saved_frac - savings_estimate(sched)) <= 0.03


def test_nan_loss_aborts():
    x, y = _spiral_data(8).split("train")
    net = ResNet(NetworkSpec("dense", 2, ((2, 4),), 2), RngStream(0, Stream.INIT))
    net.params["head.bias"][0] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 4"):
        train_epoch(net, x, y, None, OptimizerState(), Streams.from_seed(0), batch_size=8, epoch=4)


def test_fit_reports_selected_epoch():
    ds = _spiral_data(20, classes=3)
    ds = Dataset(ds.inputs, ds.labels, 3, np.where(np.arange(len(ds)) % 4 == 0, "val", "train"))
    net = ResNet(NetworkSpec("dense", 2, ((3, 6),), 3), RngStream(0, Stream.INIT))
    seen = []
    res = fit(net, ds, epochs=5, lr_schedule=LrSchedule(0.05), batch_size=8, on_epoch=seen.append)
    assert len(seen) == len(res.history) == 5
    errs = [m.val_error for m in res.history]
    assert res.selected_epoch == select_epoch(errs)
    assert res.val_error == min(errs)
    assert res.test_error is res.history[res.selected_epoch].test_error
    for m in res.history:
        assert 0 <= m.val_error <= 1


def test_fit_rejects_wrong_schedule_length():
    ds = _spiral_data(8)
    net = ResNet(NetworkSpec("dense", 2, ((3, 6),), 2), RngStream(0, Stream.INIT))
    with pytest.raises(ValueError):
        fit(net, ds, epochs=1, lr_schedule=LrSchedule(0.1), schedule=SurvivalSchedule("uniform", 0.5, 4))
