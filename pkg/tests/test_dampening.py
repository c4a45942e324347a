import numpy as np
import pytest

from conftest import small_mlp
from oracles import scalar_dampen
from edgeunlearn import dampening as dp
from edgeunlearn.dampening import DampeningParams, DampeningReport, DegenerateDepthError, ProfileParams


def test_select_mask_boundaries():
    d = np.array([1.0, 2.0, 0.5], np.float32)
    assert not dp.select_mask(d, d, 1).any()
    assert dp.select_mask(2 * d, d, 1).all()
    assert dp.select_mask([5.0, 11.0], [1.0, 1.0], 10).tolist() == [False, True]
    with pytest.raises(ValueError):
        dp.select_mask(np.ones(2), np.ones(3), 1)


def test_beta_formula_and_clamp():
    assert dp.beta(3.0, 3.0, 1.0) == 1.0
    assert dp.beta(4.0, 2.0, 0.1) == pytest.approx(0.05, rel=1e-7)
    assert dp.beta(1.0, 5.0, 1.0) == 1.0
    with pytest.raises(ArithmeticError):
        dp.beta(0.0, 1.0, 1.0)


def test_params_validation():
    with pytest.raises(ValueError):
        DampeningParams(0, 1)
    with pytest.raises(ValueError):
        DampeningParams(1, -1)
    with pytest.raises(ValueError):
        ProfileParams(0.5, 2, 4)


def test_no_selection_leaves_layer_untouched():
    m = small_mlp((4, 3, 2))
    before = m.copy()
    f = [np.zeros_like(p) for p in m.layer(1).params]
    d = [np.ones_like(p) for p in m.layer(1).params]
    rec = dp.dampen_layer(m, 1, f, d, DampeningParams(10, 1))
    assert rec.selected == 0 and rec.beta_min is None
    assert m.same_params(before, 1)


def test_all_selected_with_unit_beta_is_identity():
    m = small_mlp((4, 3, 2))
    before = m.copy()
    f = [np.full_like(p, 2.0) for p in m.layer(1).params]
    d = [np.full_like(p, 1.0) for p in m.layer(1).params]
    rec = dp.dampen_layer(m, 1, f, d, DampeningParams(1, 5))
    assert rec.selected == rec.size == 3 * 2 + 2
    assert rec.beta_min == rec.beta_mean == 1.0
    assert m.same_params(before, 1)


def test_matches_scalar_oracle_on_random_layers():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 300))
        theta = rng.standard_normal(n).astype(np.float32)
        d = rng.exponential(1, n).astype(np.float32) * (rng.random(n) > 0.1)
        f = (d * rng.exponential(8, n)).astype(np.float32)
        alpha, lam = float(rng.uniform(0.5, 12)), float(rng.uniform(0.05, 3))
        want, want_mask = scalar_dampen(theta, f, d, alpha, lam)
        got = theta.copy()
        mask, betas = dp.dampen_tensor(got, f, d, DampeningParams(alpha, lam))
        assert got.tobytes() == want.tobytes()
        assert (mask == want_mask).all() and len(betas) == mask.sum()


def test_dampen_twice_applies_beta_squared():
    rng = np.random.default_rng(3)
    theta = rng.standard_normal(200).astype(np.float32)
    d = rng.exponential(1, 200).astype(np.float32)
    f = (d * rng.exponential(10, 200)).astype(np.float32)
    params = DampeningParams(4, 0.5)
    once, mask = scalar_dampen(theta, f, d, 4, 0.5)
    twice, _ = scalar_dampen(once, f, d, 4, 0.5)
    got = theta.copy()
    dp.dampen_tensor(got, f, d, params)
    dp.dampen_tensor(got, f, d, params)
    assert got.tobytes() == twice.tobytes()
    b = np.minimum((np.float32(0.5) * d[mask]) / f[mask], np.float32(1))
    np.testing.assert_allclose(got[mask], theta[mask] * b.astype(np.float64) ** 2, rtol=1e-6)


def test_never_grows_or_flips():
    rng = np.random.default_rng(4)
    theta = rng.standard_normal(500).astype(np.float32)
    d = rng.exponential(1, 500).astype(np.float32)
    f = (d * rng.exponential(10, 500)).astype(np.float32)
    got = theta.copy()
    dp.dampen_tensor(got, f, d, DampeningParams(2, 3))
    assert (np.abs(got) <= np.abs(theta)).all()
    assert (np.sign(got) * np.sign(theta) >= 0).all()


def test_ineligible_tensor_untouched():
    m = small_mlp((4, 3, 2))
    m.layer(1).eligible = [True, False]
    bias = m.layer(1).params[1].copy()
    f = [np.full_like(p, 100.0) for p in m.layer(1).params]
    d = [np.full_like(p, 1.0) for p in m.layer(1).params]
    rec = dp.dampen_layer(m, 1, f, d, DampeningParams(10, 1))
    assert rec.selected == 6 and rec.size == 8
    assert m.layer(1).params[1].tobytes() == bias.tobytes()


def test_shape_and_dtype_errors():
    with pytest.raises(ValueError):
        dp.dampen_tensor(np.ones(3, np.float32), np.ones(2), np.ones(3), DampeningParams(1, 1))
    with pytest.raises(TypeError):
        dp.dampen_tensor(np.ones(3), np.ones(3), np.ones(3), DampeningParams(1, 1))


def test_negative_global_importance_is_reported():
    theta = np.ones(2, np.float32)
    with pytest.raises(ArithmeticError):
        dp.dampen_tensor(theta, np.zeros(2), np.array([-1.0, 1.0]), DampeningParams(1, 1))
    assert theta.tolist() == [1.0, 1.0]


def test_report_text_roundtrip():
    rep = DampeningReport([dp.LayerDampening(1, 3, 10, 0.25, 0.5, 10.0, 1.0),
                           dp.LayerDampening(2, 0, 7, None, None, 20.0, 2.0)])
    text = rep.to_text()
    back = DampeningReport.from_text(text)
    assert back == rep and back.to_text() == text
    assert rep.total_modified == 3 and rep.selected_counts() == {1: 3, 2: 0}


def naive_profile(l, b_r, c_m, L):
    sig = lambda v: 1.0 / (1.0 + np.exp(-(v - c_m)))
    return 1 + (b_r - 1) * (sig(l) - sig(1)) / (sig(L) - sig(1))


def test_profile_endpoints_and_formula():
    for L in (2, 5, 16):
        for c_m in (1.0, L / 2 + 0.5, float(L)):
            p = ProfileParams(10.0, c_m, L)
            assert dp.profile_scale(1, p) == 1.0
            assert dp.profile_scale(L, p) == 10.0
            for l in range(1, L + 1):
                assert dp.profile_scale(l, p) == pytest.approx(naive_profile(l, 10.0, c_m, L), rel=1e-12)


def test_profile_symmetric_about_midpoint():
    p = ProfileParams(10.0, 8.5, 16)
    vals = [dp.profile_scale(l, p) for l in range(1, 17)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    for k in range(8):
        assert vals[7 - k] + vals[8 + k] == pytest.approx(11.0, rel=1e-12)


def test_profile_uniform_when_bound_is_one():
    p = ProfileParams(1.0, 3.0, 6)
    assert all(dp.profile_scale(l, p) == 1.0 for l in range(1, 7))


def test_profile_errors():
    with pytest.raises(DegenerateDepthError):
        dp.profile_scale(1, ProfileParams(2.0, 1.0, 1))
    with pytest.raises(IndexError):
        dp.profile_scale(0, ProfileParams(2.0, 1.0, 4))


def test_scaled_params():
    base = DampeningParams(10, 1)
    p = ProfileParams(10.0, 3.0, 5)
    assert dp.scaled_params(base, 1, p) == base
    assert dp.scaled_params(base, 5, p) == DampeningParams(100, 10)
    assert dp.scaled_params(base, 3, None) == base
    alphas = [dp.scaled_params(base, l, p).alpha for l in range(1, 6)]
    assert all(a < b for a, b in zip(alphas, alphas[1:]))


def test_default_midpoint():
    # selection concentrated around layers 3-4 of 6
    assert dp.default_midpoint({1: 0, 2: 0, 3: 50, 4: 60, 5: 0, 6: 0}) == 3.5
    assert dp.default_midpoint({1: 0, 2: 0, 3: 0}) == 2.0
    assert dp.smooth3([3, 0, 0, 6]).tolist() == [1.5, 1.0, 2.0, 3.0]


def test_zero_global_importance_zeroes_parameter():
    theta = np.array([2.0, -3.0, 4.0], np.float32)
    f = np.array([0.5, 0.0, 0.0], np.float32)
    d = np.zeros(3, np.float32)
    mask, betas = dp.dampen_tensor(theta, f, d, DampeningParams(10, 1))
    # both-zero is never selected (strict comparison)
    assert mask.tolist() == [True, False, False] and betas.tolist() == [0.0]
    assert theta.tolist() == [0.0, -3.0, 4.0]
