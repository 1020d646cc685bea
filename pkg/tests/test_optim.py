import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyntask.errors import ConfigError, NumericsError
from dyntask.optim import OptimConfig, RmspropState, lr_schedule, rmsprop_step


def step_once(params, grads, cfg, step=0, decayed=frozenset(), state=None):
    state = state or RmspropState()
    rmsprop_step(params, grads, state, cfg, step, set(decayed))
    return state


class TestLrSchedule:
    def test_initial_value(self):
        assert lr_schedule(OptimConfig(), 0) == 0.1

    def test_first_decay_point_divides_once(self):
        cfg = OptimConfig(decay_points=(100, 200))
        assert lr_schedule(cfg, 99) == 0.1
        assert lr_schedule(cfg, 100) == pytest.approx(0.01)

    def test_after_second_decay_point(self):
        cfg = OptimConfig(decay_points=(100, 200))
        assert lr_schedule(cfg, 200) == pytest.approx(0.001)
        assert lr_schedule(cfg, 10_000) == pytest.approx(0.001)

    def test_monotone_nonincreasing(self):
        cfg = OptimConfig(decay_points=(3, 7, 11))
        vals = [lr_schedule(cfg, s) for s in range(20)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_nondecreasing_points_rejected(self):
        with pytest.raises(ConfigError):
            OptimConfig(decay_points=(50, 50))


class TestRmspropStep:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = {"w": np.array([1.0, -2.0])}
        step_once(p, {"w": np.zeros(2)}, OptimConfig(weight_decay=0.0))
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_magnitude(self):
        cfg = OptimConfig(weight_decay=0.0)
        p = {"w": np.array([0.0])}
        step_once(p, {"w": np.array([1.0])}, cfg)
        # acc = 0.01, so the move is lr / (0.1 + eps) ~= lr * 10
        assert p["w"][0] == pytest.approx(-cfg.lr0 / (0.1 + cfg.epsilon))
        assert p["w"][0] == pytest.approx(-1.0, rel=1e-6)

    def test_weight_decay_only_for_named_parameters(self):
        cfg = OptimConfig(weight_decay=0.5)
        p = {"w": np.array([2.0]), "b": np.array([2.0])}
        g = {"w": np.zeros(1), "b": np.zeros(1)}
        step_once(p, g, cfg, decayed={"w"})
        assert p["b"][0] == 2.0
        assert p["w"][0] != 2.0

    def test_nan_gradient_aborts_naming_parameter_without_mutation(self):
        p = {"w": np.array([1.0]), "v": np.array([1.0])}
        g = {"w": np.array([1.0]), "v": np.array([np.nan])}
        with pytest.raises(NumericsError, match="'v'"):
            step_once(p, g, OptimConfig())
        np.testing.assert_array_equal(p["w"], [1.0])

    def test_convex_quadratic_converges(self):
        # minimize 0.5 * ||x||^2 from (5, 5): 500 default-config steps
        cfg = OptimConfig(decay_points=(300, 400), weight_decay=0.0)
        p = {"x": np.array([5.0, 5.0])}
        state = RmspropState()
        for step in range(500):
            rmsprop_step(p, {"x": p["x"].copy()}, state, cfg, step, set())
        assert np.linalg.norm(p["x"]) < 1e-2

    @given(st.integers(0, 2**32 - 1), st.integers(1, 30))
    @settings(max_examples=25, deadline=None)
    def test_accumulators_stay_nonnegative(self, seed, steps):
        rng = np.random.default_rng(seed)
        cfg = OptimConfig(weight_decay=0.0)
        p = {"x": rng.standard_normal(4)}
        state = RmspropState()
        for step in range(steps):
            rmsprop_step(p, {"x": rng.standard_normal(4)}, state, cfg, step, set())
            assert np.all(state.acc["x"] >= 0.0)
