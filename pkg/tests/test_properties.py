import io

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from oracles import scalar_dampen
from edgeunlearn import dampening as dp, tensor_core as tc
from edgeunlearn.dampening import DampeningParams, ProfileParams

finite32 = st.floats(-1e6, 1e6, width=32, allow_nan=False)
nonneg32 = st.floats(0, 1e6, width=32, allow_nan=False)


@given(hnp.arrays(np.float32, st.integers(1, 64), elements=finite32))
def test_quantize_roundtrip_bound(x):
    q = tc.quantize_symmetric(x)
    err = np.abs(tc.dequantize(q).astype(np.float64) - x.astype(np.float64))
    peak = np.abs(x).max()
    assert (err <= q.scale / 2 * (1 + 1e-6) + np.spacing(np.float32(peak))).all()
    assert np.abs(q.data.astype(int)).max() <= 127


@given(hnp.arrays(np.float32, hnp.array_shapes(max_dims=3, max_side=5), elements=finite32))
def test_tensor_record_roundtrip(x):
    buf = io.BytesIO()
    tc.write_tensor(buf, x)
    back = tc.read_tensor(io.BytesIO(buf.getvalue()))
    assert back.shape == x.shape and back.tobytes() == x.tobytes()


@settings(max_examples=200)
@given(st.data())
def test_dampening_matches_oracle(data):
    n = data.draw(st.integers(1, 40))
    theta = data.draw(hnp.arrays(np.float32, n, elements=finite32))
    f = data.draw(hnp.arrays(np.float32, n, elements=nonneg32))
    d = data.draw(hnp.arrays(np.float32, n, elements=nonneg32))
    alpha = data.draw(st.floats(1e-3, 100))
    lam = data.draw(st.floats(1e-3, 10))
    want, want_mask = scalar_dampen(theta, f, d, alpha, lam)
    got = theta.copy()
    mask, _ = dp.dampen_tensor(got, f, d, DampeningParams(alpha, lam))
    assert got.tobytes() == want.tobytes() and (mask == want_mask).all()
    assert (np.abs(got) <= np.abs(theta)).all()


@given(st.integers(2, 32), st.floats(1.01, 50), st.floats(0, 1))
def test_profile_monotone(L, b_r, frac):
    # midpoint inside [1, L]; far outside it the sigmoid saturates and
    # neighbouring values fall within one f64 ulp of each other
    p = ProfileParams(b_r, 1 + frac * (L - 1), L)
    vals = [dp.profile_scale(l, p) for l in range(1, L + 1)]
    assert vals[0] == 1.0 and vals[-1] == b_r
    assert all(a < b for a, b in zip(vals, vals[1:]))
