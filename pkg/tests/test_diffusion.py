import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmvdiff.diffusion import (NoiseSchedule, cfg_combine, ddim_step, ddim_timesteps, make_linear_schedule,
                               q_sample, sample_loop, validate_steps)
from mmvdiff.errors import ConfigError, ContractError, NumericDomainError, ShapeError


@pytest.fixture
def schedule():
    return make_linear_schedule(1000, 1e-4, 0.02)


def _fixed(ab: float) -> NoiseSchedule:
    """One-step schedule with a chosen alpha_bar (beta = 1 - ab)."""
    a = np.array([ab])
    return NoiseSchedule(1.0 - a, a, a)


def test_schedule_examples(schedule):
    assert schedule.alpha_bar(1) == pytest.approx(0.9999, abs=1e-15)
    one = make_linear_schedule(1, 1e-4, 0.02)
    assert one.num_steps == 1 and one.alpha_bar(1) == pytest.approx(1 - 1e-4, abs=1e-15)
    assert schedule.alpha_bar(1000) < schedule.alpha_bar(1)


def test_schedule_recurrence_exact(schedule):
    prod = 1.0
    for t in range(1, 1001):
        prod *= schedule.alphas[t - 1]
        assert abs(schedule.alpha_bar(t) - prod) <= 1e-12
    assert np.all(np.diff(schedule.betas) >= 0) and np.all(np.diff(schedule.alpha_bars) < 0)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_bounds(args):
    with pytest.raises(ConfigError):
        make_linear_schedule(*args)


def test_q_sample_examples():
    x0 = np.full(3, 1.0)
    eps = np.full(3, 1.0)
    np.testing.assert_allclose(q_sample(x0, 1, eps, _fixed(0.25)), 0.5 + np.sqrt(0.75))
    np.testing.assert_array_equal(q_sample(np.arange(3.0), 1, eps * 7, _fixed(1.0)), np.arange(3.0))
    np.testing.assert_array_equal(q_sample(np.arange(3.0), 1, eps * 7, _fixed(0.0)), eps * 7)


def test_q_sample_range(schedule):
    with pytest.raises(ContractError):
        q_sample(np.zeros(2), 0, np.zeros(2), schedule)
    with pytest.raises(ContractError):
        q_sample(np.zeros(2), 1001, np.zeros(2), schedule)


def test_ddim_deterministic_and_null_step(schedule, rng):
    x = rng.standard_normal((4, 3))
    e = rng.standard_normal((4, 3))
    a = ddim_step(x, e, 500, 400, 0.0, schedule)
    b = ddim_step(x, e, 500, 400, 0.0, schedule)
    assert np.array_equal(a, b)
    assert ddim_step(x, e, 500, 500, 0.0, schedule) is x


def test_ddim_inverts_to_x0_at_boundary(schedule, rng):
    x0 = rng.standard_normal((5, 2))
    eps = rng.standard_normal((5, 2))
    xt = q_sample(x0, 700, eps, schedule)
    np.testing.assert_allclose(ddim_step(xt, eps, 700, 0, 0.0, schedule), x0, atol=1e-5)


def test_ddim_contract_errors(schedule, rng):
    x = rng.standard_normal(3)
    with pytest.raises(ContractError):
        ddim_step(x, x, 10, 20, 0.0, schedule)
    with pytest.raises(ContractError):
        ddim_step(x, x, 20, 10, 1.5, schedule)
    with pytest.raises(ContractError):
        ddim_step(x, x, 20, 10, 0.5, schedule)  # stochastic step without a generator


def test_ddim_non_monotone_schedule_is_domain_error():
    a = np.array([0.1, 0.9])  # alpha_bar rising with t: no valid variance split exists
    bad = NoiseSchedule(1 - a, a, a)
    with pytest.raises(NumericDomainError):
        ddim_step(np.ones(2), np.ones(2), 2, 1, 0.0, bad)


def test_ddim_stochastic_uses_fresh_noise(schedule, rng):
    x = rng.standard_normal(6)
    a = ddim_step(x, x, 500, 300, 1.0, schedule, np.random.default_rng(1))
    b = ddim_step(x, x, 500, 300, 1.0, schedule, np.random.default_rng(2))
    assert not np.array_equal(a, b)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_exact_noise_inversion_over_step_sublists(seed):
    rng = np.random.default_rng(seed)
    sched = make_linear_schedule()
    count = int(rng.integers(1, 30))
    steps = sorted(rng.choice(np.arange(2, 1001), size=count, replace=False).tolist(), reverse=True) + [1]
    x0 = rng.standard_normal((3, 4))
    eps = rng.standard_normal((3, 4))
    x = q_sample(x0, steps[0], eps, sched)
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        x = ddim_step(x, eps, t, t_prev, 0.0, sched)
    np.testing.assert_allclose(x, x0, atol=1e-4)


def test_cfg_examples(rng):
    c, u = rng.standard_normal(5), rng.standard_normal(5)
    assert cfg_combine(c, u, 1.0) is c
    assert cfg_combine(c, u, 0.0) is u
    np.testing.assert_array_equal(cfg_combine(np.ones(2), np.zeros(2), 2.0), [2.0, 2.0])
    with pytest.raises(ShapeError):
        cfg_combine(np.ones(2), np.ones(3), 2.0)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
@settings(max_examples=100, deadline=None)
def test_cfg_is_affine_in_scale(s1, s2, seed):
    rng = np.random.default_rng(seed)
    c, u = rng.standard_normal(4), rng.standard_normal(4)
    lhs = cfg_combine(c, u, s1) + cfg_combine(c, u, s2)
    rhs = 2 * cfg_combine(c, u, (s1 + s2) / 2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_timesteps_descend_to_one():
    steps = ddim_timesteps(1000, 50)
    assert len(steps) == 50 and steps[0] == 1000 and steps[-1] == 1
    validate_steps(steps, 1000)
    assert ddim_timesteps(1000, 1) == [1000]
    with pytest.raises(ContractError):
        validate_steps([5, 5, 1], 1000)


class _OracleModel:
    """Returns the true noise of a known x0 and counts branch calls."""

    def __init__(self, x0, schedule):
        self.x0, self.schedule, self.calls = x0, schedule, []

    def __call__(self, latents, t, conditional):
        self.calls.append(conditional)
        ab = self.schedule.alpha_bar(t)
        return [(x - np.sqrt(ab) * x0) / np.sqrt(1 - ab) for x, x0 in zip(latents, self.x0)]


def test_sample_loop_single_step_oracle(schedule, rng):
    x0 = [rng.standard_normal((2, 3)), rng.standard_normal((4,))]
    model = _OracleModel(x0, schedule)
    out = sample_loop(model, [a.shape for a in x0], [1000], schedule, guidance=1.0, dtype=np.float64)
    for got, want in zip(out, x0):
        np.testing.assert_allclose(got, want, atol=1e-4)
    assert model.calls == [True]


def test_sample_loop_guidance_skips_irrelevant_branch(schedule, rng):
    x0 = [rng.standard_normal(3)]
    steps = ddim_timesteps(1000, 5)
    for s, expected in [(1.0, [True]), (0.0, [False]), (2.0, [True, False])]:
        model = _OracleModel(x0, schedule)
        sample_loop(model, [(3,)], steps, schedule, guidance=s)
        assert model.calls == expected * 5


def test_sample_loop_deterministic(schedule, rng):
    x0 = [rng.standard_normal((2, 2))]
    steps = ddim_timesteps(1000, 10)
    a = sample_loop(_OracleModel(x0, schedule), [(2, 2)], steps, schedule, seed=3)
    b = sample_loop(_OracleModel(x0, schedule), [(2, 2)], steps, schedule, seed=3)
    assert np.array_equal(a[0], b[0])
    with pytest.raises(ContractError):
        sample_loop(_OracleModel(x0, schedule), [(2, 2)], [500, 1000], schedule)


def test_ddim_clip_inside_range_changes_nothing(schedule, rng):
    x = rng.standard_normal((4, 3))
    e = rng.standard_normal((4, 3))
    wide = (np.full(3, -1e9), np.full(3, 1e9))
    for t_prev in (400, 0):
        np.testing.assert_allclose(ddim_step(x, e, 500, t_prev, 0.0, schedule, x0_range=wide),
                                   ddim_step(x, e, 500, t_prev, 0.0, schedule), rtol=1e-12, atol=1e-12)


def test_ddim_clip_matches_hand_update(schedule, rng):
    x = rng.standard_normal((6, 2)) * 3
    e = rng.standard_normal((6, 2))
    lo, hi = np.array([-0.5, -1.0]), np.array([0.5, 2.0])
    ab, ab_prev = schedule.alpha_bar(800), schedule.alpha_bar(600)
    x0 = np.clip((x - np.sqrt(1 - ab) * e) / np.sqrt(ab), lo, hi)
    eps = (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)
    want = np.sqrt(ab_prev) * x0 + np.sqrt(1 - ab_prev) * eps
    np.testing.assert_allclose(ddim_step(x, e, 800, 600, 0.0, schedule, x0_range=(lo, hi)), want, rtol=1e-12)
    final = ddim_step(x, e, 800, 0, 0.0, schedule, x0_range=(lo, hi))
    np.testing.assert_allclose(final, x0, rtol=1e-12)
    assert np.all(final >= lo) and np.all(final <= hi)


def test_sample_loop_clipped_output_stays_in_range(schedule):
    def zero_noise(latents, t, conditional):
        return [np.zeros_like(x) for x in latents]

    lo, hi = np.full(4, -0.25), np.full(4, 0.25)
    out = sample_loop(zero_noise, [(3, 4)], ddim_timesteps(1000, 8), schedule, guidance=1.0,
                      dtype=np.float64, x0_range=(lo, hi))[0]
    assert np.all(np.abs(out) <= 0.25)
    free = sample_loop(zero_noise, [(3, 4)], ddim_timesteps(1000, 8), schedule, guidance=1.0, dtype=np.float64)[0]
    assert np.abs(free).max() > 1
