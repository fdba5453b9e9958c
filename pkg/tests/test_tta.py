import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dialab import nn
from dialab.errors import BatchTooSmallError, ConfigError
from dialab.gradcheck import central_difference
from dialab.tta import (Method, TtaConfig, loss_and_grads, predict, tta_loss, tta_theta_gradient,
                        tta_update)

logit_rows = arrays(np.float64, (3, 4), elements=st.floats(-8, 8, allow_nan=False))


def test_tent_on_uniform_logits_is_log_k():
    assert tta_loss("tent", np.zeros((1, 3))) == pytest.approx(np.log(3), rel=1e-15)


def test_hard_pl_direct_value():
    z = np.array([[2.0, 0.0, -1.0]])
    p = np.exp(z) / np.exp(z).sum()
    assert tta_loss("hard_pl", z) == pytest.approx(-np.log(p[0, 0]), rel=1e-14)


def test_robust_pl_q1_is_one_minus_p():
    z = np.array([[0.3, 1.7, -0.4], [2.0, 2.0, 0.0]])
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    top = p[[0, 1], [1, 0]]  # tie in row 1 resolves to index 0
    assert tta_loss("robust_pl", z, q=1.0) == pytest.approx(np.mean(1 - top), rel=1e-14)


@settings(max_examples=100)
@given(logit_rows)
def test_conjugate_at_unit_temperature_equals_tent(z):
    assert tta_loss("conjugate_pl", z, T=1.0) == pytest.approx(tta_loss("tent", z), abs=1e-9)


@settings(max_examples=100)
@given(logit_rows)
def test_soft_pl_with_self_teacher_equals_tent(z):
    assert tta_loss("soft_pl", z, z) == pytest.approx(tta_loss("tent", z), abs=1e-9)


@settings(max_examples=200)
@given(st.floats(np.log(0.01), 0.0))
def test_robust_pl_small_q_approaches_hard_pl(log_p):
    # two-class row whose top probability is exp(log_p) >= 0.5 or reversed
    p = np.exp(log_p)
    z = np.array([[np.log(p), np.log1p(-p) if p < 1 else -50.0]])
    gce = tta_loss("robust_pl", z, q=1e-4)
    ce = tta_loss("hard_pl", z)
    assert abs(gce - ce) <= 1e-3 * max(1.0, ce)


@pytest.mark.parametrize("method", [m for m in Method if m is not Method.TEBN])
def test_logit_gradients_match_finite_differences(method, rng):
    z = rng.normal(size=(4, 3))
    teacher = rng.normal(size=(4, 3))
    _, g, gt = loss_and_grads(method, z, teacher, q=0.7, T=1.6)
    fd = central_difference(lambda zz: loss_and_grads(method, zz, teacher, 0.7, 1.6)[0], z)
    np.testing.assert_allclose(g, fd, rtol=1e-7, atol=1e-9)
    if method is Method.SOFT_PL:
        fd_t = central_difference(lambda tt: loss_and_grads(method, z, tt, 0.7, 1.6)[0], teacher)
        np.testing.assert_allclose(gt, fd_t, rtol=1e-7, atol=1e-9)


def test_tebn_leaves_parameters_unchanged(small_net, rng):
    batch = rng.uniform(size=(6, 3))
    adapted, snap = tta_update(small_net, batch, TtaConfig(method="tebn"))
    np.testing.assert_array_equal(adapted.theta_A(), small_net.theta_A())
    assert len(snap) == small_net.n_bn


@pytest.mark.parametrize("method", list(Method))
def test_zero_learning_rate_is_identity(method, small_net, rng):
    batch = rng.uniform(size=(6, 3))
    adapted, _ = tta_update(small_net, batch, TtaConfig(method=method, eta=0.0))
    np.testing.assert_array_equal(adapted.theta_A(), small_net.theta_A())


def test_update_does_not_mutate_input(small_net, rng):
    theta = small_net.theta_A().copy()
    tta_update(small_net, rng.uniform(size=(6, 3)), TtaConfig(eta=0.5))
    np.testing.assert_array_equal(small_net.theta_A(), theta)


@pytest.mark.parametrize("method", ["tent", "hard_pl", "robust_pl", "conjugate_pl"])
def test_small_step_decreases_loss(method, small_net, rng):
    batch = rng.uniform(size=(8, 3))
    cfg = TtaConfig(method=method, eta=1e-4)
    z0 = nn.logits(small_net, batch)
    adapted, _ = tta_update(small_net, batch, cfg)
    # pseudo-labels stay those of the pre-update network
    before = tta_loss(method, z0, z0, cfg.q, cfg.T)
    after = tta_loss(method, nn.logits(adapted, batch), z0, cfg.q, cfg.T)
    assert after < before


def test_gradient_step_direction(small_net, rng):
    batch = rng.uniform(size=(5, 3))
    cfg = TtaConfig(method="tent", eta=1e-3)
    adapted, _ = tta_update(small_net, batch, cfg)
    expected = small_net.theta_A() - 1e-3 * tta_theta_gradient(small_net, batch, cfg)
    np.testing.assert_allclose(adapted.theta_A(), expected, rtol=1e-15, atol=1e-15)


def test_predict_ties_go_to_lowest_index():
    net = nn.Network([nn.Linear(np.zeros((2, 3)), np.zeros(3))])
    assert predict(net, np.ones((2, 2))).tolist() == [0, 0]


def test_single_row_batch_rejected(small_net):
    with pytest.raises(BatchTooSmallError):
        tta_update(small_net, np.zeros((1, 3)), TtaConfig())


@pytest.mark.parametrize("kwargs", [{"method": "nope"}, {"q": 0.0}, {"q": 1.5}, {"T": 0.0},
                                    {"eta": -1.0}, {"steps": 0}, {"optimizer": "adam"}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TtaConfig(**kwargs)


def test_method_names_parse():
    assert Method.parse("SoftPL") is Method.SOFT_PL
    assert Method.parse("conjugate-pl") is Method.CONJUGATE_PL


def test_predict_examples():
    net = nn.Network([nn.Linear(np.eye(2), np.zeros(2))])
    assert predict(net, np.array([[2.0, 1.0], [0.0, 3.0]]), nn.TrainStats()).tolist() == [0, 1]


def test_tebn_update_then_predict_is_test_stats_prediction(small_net, rng):
    batch = rng.uniform(size=(9, 3))
    adapted, _ = tta_update(small_net, batch, TtaConfig(method="tebn"))
    np.testing.assert_array_equal(predict(adapted, batch), predict(small_net, batch, nn.TestStats()))
