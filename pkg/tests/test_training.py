import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpfedsim.data import DEFAULT_PROFILES, generate_trace, prepare_client_data
from dpfedsim.errors import ConfigError, DataError, DimensionError, NumericError
from dpfedsim.model import ModelParams, TstConfig, init_params
from dpfedsim.privacy import PrivacySpec, privatize_update
from dpfedsim.tensor import Tensor, grad_check
from dpfedsim.training import (
    HybridLossConfig,
    OptimizerState,
    TrainConfig,
    adamw_step,
    cosine_lr,
    hybrid_loss,
    local_train,
)

SMALL = TstConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32, dropout_rate=0.0)
NO_DP = PrivacySpec(epsilon_total=math.inf, clip_norm=math.inf)


class TestHybridLoss:
    def test_perfect_prediction(self):
        y = np.random.default_rng(0).standard_normal((4, 3))
        assert hybrid_loss(Tensor(y), y).item() == 0.0

    def test_unit_offset(self):
        y = np.zeros((5, 3))
        cfg = HybridLossConfig(alpha=0.5, huber_weight=0.0)
        assert hybrid_loss(Tensor(y + 1.0), y, cfg=cfg).item() == pytest.approx(1.0, abs=1e-15)

    def test_default_weights_on_unit_offset(self):
        # MSE = MAE = 1, Huber(1) = 0.5: 0.5 + 0.5 + 0.2 * 0.5
        y = np.zeros((2, 3))
        assert hybrid_loss(Tensor(y + 1.0), y).item() == pytest.approx(1.1, abs=1e-15)

    def test_temporal_terms_by_hand(self):
        pred, prev_pred = np.array([[2.0]]), np.array([[1.0]])
        target, prev_target = np.array([[1.0]]), np.array([[2.0]])
        cfg = HybridLossConfig(alpha=1.0, huber_weight=0.0, w_smooth=1.0, w_direction=1.0, w_temporal=1.0)
        # mse 1, smooth 1, direction relu(-tanh(-10)) = tanh(10), temporal (1 - (-1))^2 = 4
        expected = 1.0 + 1.0 + math.tanh(10.0) + 4.0
        assert hybrid_loss(Tensor(pred), target, prev_pred, prev_target, cfg).item() == pytest.approx(expected, rel=1e-14)

    def test_gradient_wrt_prediction(self):
        rng = np.random.default_rng(1)
        y, py, pp = rng.standard_normal((6, 3)), rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
        params = ModelParams({"pred": Tensor(rng.standard_normal((6, 3)))})
        err = grad_check(lambda p: hybrid_loss(p["pred"], y, pp, py), params, 1e-6)
        assert err < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            hybrid_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 3)))

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            HybridLossConfig(alpha=1.5).validate()
        with pytest.raises(ConfigError):
            HybridLossConfig(w_smooth=-0.1).validate()

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.float64, (4, 3), elements=st.floats(-10, 10)),
        arrays(np.float64, (4, 3), elements=st.floats(-10, 10)),
        arrays(np.float64, (4, 3), elements=st.floats(-10, 10)),
    )
    def test_non_negative(self, p, y, prev):
        assert hybrid_loss(Tensor(p), y, prev, prev).item() >= 0.0

    def test_zero_with_matched_history(self):
        y = np.random.default_rng(2).standard_normal((3, 3))
        prev = y - 0.3
        # moving together still costs the smoothness term; zero it to isolate the others
        cfg = HybridLossConfig(w_smooth=0.0)
        assert hybrid_loss(Tensor(y), y, prev, prev, cfg).item() == 0.0


class TestAdamW:
    def test_zero_grads_zero_decay_is_identity(self):
        p = ModelParams({"w": Tensor([1.0, -2.0])})
        state = OptimizerState(weight_decay=0.0)
        for _ in range(3):
            adamw_step(p, {"w": np.zeros(2)}, state, 0.01)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_unit_update(self):
        # m_hat = g = 1, v_hat = g^2 = 1 at t = 1
        p = ModelParams({"w": Tensor([1.0])})
        adamw_step(p, {"w": np.array([1.0])}, OptimizerState(weight_decay=0.0), 0.001)
        assert p["w"].data[0] == pytest.approx(1.0 - 0.001 / (1.0 + 1e-8), abs=1e-15)

    def test_decoupled_decay(self):
        p = ModelParams({"w": Tensor([3.0])})
        state = OptimizerState(weight_decay=0.01)
        for _ in range(5):
            adamw_step(p, {"w": np.zeros(1)}, state, 0.001)
        assert p["w"].data[0] == pytest.approx(3.0 * (1 - 0.001 * 0.01) ** 5, rel=1e-15)

    def test_errors(self):
        p = ModelParams({"w": Tensor([1.0])})
        with pytest.raises(NumericError):
            adamw_step(p, {"w": np.array([np.nan])}, OptimizerState())
        with pytest.raises(DimensionError):
            adamw_step(p, {"w": np.zeros(2)}, OptimizerState())


class TestCosineLr:
    def test_start_mid_restart(self):
        assert cosine_lr(0, 10, 1e-3, 1e-5) == 1e-3
        assert cosine_lr(5, 10, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-14)
        assert cosine_lr(10, 10, 1e-3, 1e-5) == 1e-3
        # second cycle is 20 long, third starts at 10 + 20
        assert cosine_lr(20, 10, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-14)
        assert cosine_lr(30, 10, 1e-3, 1e-5) == 1e-3

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 20), st.floats(1.0, 3.0))
    def test_bounded_and_continuous_within_cycle(self, cycle, mult):
        lrs = [cosine_lr(s, cycle, 1e-3, 1e-5, mult) for s in range(200)]
        assert all(1e-5 <= lr <= 1e-3 for lr in lrs)
        big_jumps = [i for i in range(1, 200) if lrs[i] - lrs[i - 1] > 1e-12]
        # lr only increases at restarts, and each restart lands on base_lr
        assert all(lrs[i] == 1e-3 for i in big_jumps)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            cosine_lr(0, 0, 1e-3, 1e-5)
        with pytest.raises(ConfigError):
            cosine_lr(0, 5, 1e-3, 1e-5, t_mult=0.5)


@pytest.fixture(scope="module")
def client_data():
    return prepare_client_data(generate_trace(0, 240, DEFAULT_PROFILES[0])).train


def test_local_train_learns_without_dp(client_data):
    params = init_params(SMALL, 0)
    cfg = TrainConfig(lr=3e-3)
    _, stats = local_train(params, client_data, 5, NO_DP, np.random.default_rng(0), SMALL, cfg)
    assert stats.epochs[-1].mean_loss < stats.epochs[0].mean_loss
    assert stats.clip_fraction == 0.0 and stats.sigma == 0.0


def test_local_train_rejects_bad_input(client_data):
    params = init_params(SMALL, 0)
    with pytest.raises(ConfigError):
        local_train(params, client_data, 0, NO_DP, np.random.default_rng(0), SMALL)
    with pytest.raises(DataError):
        local_train(params, client_data[0:0], 1, NO_DP, np.random.default_rng(0), SMALL)
    with pytest.raises(ConfigError):
        local_train(params, client_data, 1, NO_DP, np.random.default_rng(0), SMALL, TrainConfig(batch_size=64))


def test_local_train_is_deterministic_and_leaves_input_alone(client_data):
    params = init_params(SMALL, 0)
    before = params.flatten().copy()
    runs = [local_train(params, client_data, 2, PrivacySpec(), np.random.default_rng(5), SMALL)[0] for _ in range(2)]
    np.testing.assert_array_equal(runs[0].flatten(), runs[1].flatten())
    np.testing.assert_array_equal(params.flatten(), before)


def test_local_train_clip_noise_step_order(client_data):
    events = []

    def privatize(g, spec, eps, rng):
        events.append(("privatize", float(np.linalg.norm(g))))
        out, diag = privatize_update(g, spec, eps, rng)
        events.append(("privatized", out.copy()))
        return out, diag

    def step(params, grads, state, lr):
        flat = np.concatenate([grads[n].reshape(-1) for n in params.names()])
        events.append(("step", flat))
        return adamw_step(params, grads, state, lr)

    spec = PrivacySpec(epsilon_total=0.8, clip_norm=1.5, rounds=10)
    _, stats = local_train(
        init_params(SMALL, 0), client_data, 1, spec, np.random.default_rng(0), SMALL,
        hooks={"privatize": privatize, "step": step},
    )
    kinds = [e[0] for e in events]
    assert kinds == ["privatize", "privatized", "step"] * stats.batches
    for i in range(0, len(events), 3):
        # the optimizer consumes exactly the clipped-and-noised gradient
        np.testing.assert_array_equal(events[i + 2][1], events[i + 1][1])
    assert stats.sigma == pytest.approx(1.5 * math.sqrt(2 * math.log(1.25e5)) / (0.8 / math.sqrt(10)), rel=1e-14)
