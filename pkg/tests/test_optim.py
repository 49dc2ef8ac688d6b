"""Test suite for optimizers and the learning-rate schedule"""
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings as hyp_settings, strategies as st

from app.errors import ShapeMismatchError
from app.optim import (
    LARS,
    SGD,
    CosineSchedule,
    OptimizerConfig,
    ScheduleState,
    build_optimizer,
    cosine_lr,
    is_lars_excluded,
    lars_step,
    scaled_lr,
    sgd_step,
    trust_ratio,
)
from tests.oracles import TOLERANCES


def test_cosine_endpoints():
    assert cosine_lr(ScheduleState(0, 100, 0.3)) == 0.3
    assert cosine_lr(ScheduleState(100, 100, 0.3)) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(ScheduleState(50, 100, 0.3)) == pytest.approx(0.15, abs=1e-15)
    with pytest.raises(ValueError):
        ScheduleState(0, 0, 0.3)
    with pytest.raises(ValueError):
        ScheduleState(5, 4, 0.3)


@given(total=st.integers(min_value=1, max_value=500), base=st.floats(min_value=1e-4, max_value=10.0))
@hyp_settings(max_examples=50, deadline=None)
def test_cosine_monotone(total, base):
    lrs = [cosine_lr(ScheduleState(t, total, base)) for t in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(0 <= lr <= base for lr in lrs)


def test_scaled_lr():
    assert scaled_lr(0.3, 1024) == pytest.approx(1.2)
    assert scaled_lr(0.03, 256) == pytest.approx(0.03)
    assert scaled_lr(0.3, 1024, rule="none") == 0.3


def test_sgd_plain_step():
    p = torch.tensor([1.0, 2.0])
    g = torch.tensor([0.5, -1.0])
    buf = torch.zeros(2)
    sgd_step([p], [g], lr=0.1, momentum=0.0, weight_decay=0.0, buffers=[buf])
    assert torch.allclose(p, torch.tensor([0.95, 2.1]))


def test_sgd_momentum_recurrence():
    """Two steps against the scalar recurrence"""
    lr, m, wd = 0.1, 0.9, 0.01
    w, g1, g2 = 1.5, 0.3, -0.2
    p = torch.tensor([w], dtype=torch.float64)
    buf = torch.zeros(1, dtype=torch.float64)
    sgd_step([p], [torch.tensor([g1], dtype=torch.float64)], lr, m, wd, [buf])
    sgd_step([p], [torch.tensor([g2], dtype=torch.float64)], lr, m, wd, [buf])

    b = 0.0
    b = m * b + g1 + wd * w
    w = w - lr * b
    b = m * b + g2 + wd * w
    w = w - lr * b
    assert abs(p.item() - w) < TOLERANCES["momentum_recurrence"]


def test_zero_grad_keeps_params_only_with_zero_buffer():
    p = torch.tensor([1.0])
    sgd_step([p], [torch.zeros(1)], 0.1, 0.9, 0.0, [torch.zeros(1)])
    assert p.item() == 1.0
    sgd_step([p], [torch.zeros(1)], 0.1, 0.9, 0.0, [torch.ones(1)])
    assert p.item() != 1.0


def test_step_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        sgd_step([torch.zeros(2)], [torch.zeros(3)], 0.1, 0.9, 0.0, [torch.zeros(2)])
    with pytest.raises(ShapeMismatchError):
        lars_step([torch.zeros(2)], [torch.zeros(2)], 0.1, 0.9, 0.0, 0.001, [], [torch.zeros(2)])


def test_trust_ratio():
    w = torch.tensor([3.0, 4.0])
    g = torch.tensor([0.0, 2.0])
    expected = 0.001 * 5.0 / (2.0 + 0.1 * 5.0)
    assert abs(trust_ratio(w, g, 0.1, 0.001) - expected) < TOLERANCES["trust_ratio"]
    assert trust_ratio(torch.zeros(2), g, 0.1, 0.001) == 0.0
    assert trust_ratio(w, torch.zeros(2), 0.0, 0.001) == 0.0


def test_lars_unit_trust_ratio_equals_sgd():
    """‖w‖ = ‖g‖ and η = 1 make the local rate 1, so LARS is SGD bit for bit"""
    w = torch.tensor([[1.0, 0.0]])
    g = torch.tensor([[0.0, -1.0]])
    p_lars, p_sgd = w.clone(), w.clone()
    lars_step([p_lars], [g], 0.1, 0.9, 0.0, 1.0, [False], [torch.zeros_like(w)])
    sgd_step([p_sgd], [g], 0.1, 0.9, 0.0, [torch.zeros_like(w)])
    assert torch.equal(p_lars, p_sgd)


def test_lars_per_layer_trust_ratios():
    """Random two-layer toy against scalar norms"""
    rng = np.random.default_rng(0)
    weights = [torch.from_numpy(rng.normal(size=(4, 3))), torch.from_numpy(rng.normal(size=(2, 4)))]
    grads = [torch.from_numpy(rng.normal(size=w.shape)) for w in weights]
    params = [w.clone() for w in weights]
    lars_step(params, grads, 0.5, 0.0, 1e-4, 0.001, [False, False], [torch.zeros_like(w) for w in weights])
    for w, g, p in zip(weights, grads, params):
        w_norm = math.sqrt(float((w ** 2).sum()))
        g_norm = math.sqrt(float((g ** 2).sum()))
        local = 0.001 * w_norm / (g_norm + 1e-4 * w_norm)
        expected = w - 0.5 * local * (g + 1e-4 * w)
        assert float((p - expected).abs().max()) < TOLERANCES["trust_ratio"]


def test_lars_excluded_params_skip_decay():
    bias = torch.tensor([1.0, -1.0])
    grad = torch.tensor([0.5, 0.5])
    lars_step([bias], [grad], 0.1, 0.0, 0.5, 0.001, [True], [torch.zeros(2)])
    assert torch.allclose(bias, torch.tensor([0.95, -1.05]))
    assert is_lars_excluded(torch.zeros(3))
    assert not is_lars_excluded(torch.zeros(3, 3))


def test_optimizer_classes_follow_step_functions():
    layer = torch.nn.Linear(3, 2)
    x = torch.randn(4, 3)
    for cfg in (OptimizerConfig(kind="sgd"), OptimizerConfig(kind="lars", base_lr=0.3)):
        opt = build_optimizer(layer.parameters(), cfg, batch_size=512)
        assert isinstance(opt, LARS if cfg.kind == "lars" else SGD)
        assert opt.param_groups[0]["lr"] == pytest.approx(cfg.base_lr * 2)
        before = [p.detach().clone() for p in layer.parameters()]
        opt.zero_grad()
        layer(x).pow(2).sum().backward()
        opt.step()
        assert any(not torch.equal(a, p) for a, p in zip(before, layer.parameters()))


def test_cosine_schedule_per_epoch_and_per_step():
    opt = SGD([torch.nn.Parameter(torch.zeros(1))], lr=1.0)
    schedule = CosineSchedule(opt, epochs=4, steps_per_epoch=10)
    assert schedule.apply(0) == 1.0
    assert schedule.apply(2) == pytest.approx(0.5)
    assert opt.param_groups[0]["lr"] == pytest.approx(0.5)

    stepped = CosineSchedule(opt, epochs=4, steps_per_epoch=10, per_step=True)
    assert stepped.lr_at(2, 0) == pytest.approx(0.5)
    assert stepped.lr_at(1, 5) > stepped.lr_at(1, 6)
