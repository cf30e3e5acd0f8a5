import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ismrnn import tensor as T
from ismrnn.errors import NumericError, ShapeError
from ismrnn.mamba import init_ssm_params, mamba_forward, ssm_param_shapes, ssm_scan
from ismrnn.model import IsmrnnModel, ModelConfig
from ismrnn.tensor import Tape, Tensor


def naive_scan(u, delta, A, B, C, D):
    """Per-step, per-channel, per-state loop."""
    L, E = u.shape
    N = A.shape[1]
    y = np.zeros((L, E))
    for e in range(E):
        h = [0.0] * N
        for t in range(L):
            for k in range(N):
                h[k] = np.exp(delta[t, e] * A[e, k]) * h[k] + delta[t, e] * B[t, k] * u[t, e]
            y[t, e] = sum(C[t, k] * h[k] for k in range(N)) + D[e] * u[t, e]
    return y


def random_scan_inputs(rng, L, E, N):
    return (rng.standard_normal((L, E)), rng.uniform(0.01, 1.0, (L, E)), -rng.uniform(0.1, 2.0, (E, N)),
            rng.standard_normal((L, N)), rng.standard_normal((L, N)), rng.standard_normal(E))


def test_zero_readout_gives_zero(rng):
    u, dl, A, B, C, D = random_scan_inputs(rng, 6, 3, 2)
    y = ssm_scan(u, dl, np.zeros_like(A), B, np.zeros_like(C), np.zeros_like(D))
    np.testing.assert_array_equal(y.data, 0.0)


def test_single_step(rng):
    u, dl, A, B, C, D = random_scan_inputs(rng, 1, 3, 2)
    y = ssm_scan(u, dl, A, B, C, D).data
    expected = (C[0] @ B[0]) * dl[0] * u[0] + D * u[0]
    np.testing.assert_allclose(y[0], expected, rtol=1e-14)


def test_matches_naive_loop(rng):
    u, dl, A, B, C, D = random_scan_inputs(rng, 5, 2, 2)
    ref = naive_scan(u, dl, A, B, C, D)
    for method in ("sequential", "parallel"):
        y = ssm_scan(u, dl, A, B, C, D, method=method).data
        assert np.max(np.abs(y - ref) / np.maximum(np.abs(ref), 1e-300)) <= 1e-12


def test_batched_leading_axes(rng):
    u = rng.standard_normal((3, 7, 4))
    dl = rng.uniform(0.1, 0.9, (3, 7, 4))
    A = -rng.uniform(0.5, 1.5, (4, 2))
    B, C = rng.standard_normal((3, 7, 2)), rng.standard_normal((3, 7, 2))
    D = rng.standard_normal(4)
    y = ssm_scan(u, dl, A, B, C, D).data
    for b in range(3):
        np.testing.assert_allclose(y[b], naive_scan(u[b], dl[b], A, B[b], C[b], D), rtol=1e-12, atol=1e-14)


def test_rejects_nonpositive_delta(rng):
    u, dl, A, B, C, D = random_scan_inputs(rng, 4, 2, 2)
    dl[2, 1] = 0.0
    with pytest.raises(NumericError):
        ssm_scan(u, dl, A, B, C, D)


def test_rejects_shape_mismatch(rng):
    u, dl, A, B, C, D = random_scan_inputs(rng, 4, 2, 2)
    with pytest.raises(ShapeError):
        ssm_scan(u, dl, A, B[:3], C, D)


def test_scan_gradient_matches_finite_differences(rng):
    arrays = list(random_scan_inputs(rng, 6, 3, 2))
    weights = rng.standard_normal((6, 3))

    def f(*ts):
        return T.sum_(ssm_scan(*ts) * weights)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape():
        T.backward(f(*leaves))
    numeric, masks = T.finite_difference_gradient(lambda: f(*[Tensor(a) for a in arrays]).item(), arrays)
    for leaf, n, m in zip(leaves, numeric, masks):
        assert T.relative_error(leaf.grad, n)[m].max() < 1e-6


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_scan_is_causal(L, t, seed):
    t = min(t, L)
    rng = np.random.default_rng(seed)
    u, dl, A, B, C, D = random_scan_inputs(rng, L, 3, 2)
    full = ssm_scan(u, dl, A, B, C, D).data
    cut = ssm_scan(u[:t], dl[:t], A, B[:t], C[:t], D).data
    np.testing.assert_array_equal(full[:t], cut)


@given(st.integers(1, 40), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_parallel_scan_agrees_with_sequential(L, seed):
    rng = np.random.default_rng(seed)
    u, dl, A, B, C, D = random_scan_inputs(rng, L, 4, 3)
    a = ssm_scan(u, dl, A, B, C, D, method="sequential").data
    b = ssm_scan(u, dl, A, B, C, D, method="parallel").data
    scale = np.maximum(np.abs(a), 1e-12 * max(1.0, np.abs(a).max()))
    assert np.max(np.abs(a - b) / scale) <= 1e-12


@given(st.floats(1e-4, 50.0), st.floats(-30.0, 5.0))
def test_discretized_transition_is_contractive(delta, a_log):
    A = -np.exp(a_log)
    assert A < 0
    a_bar = np.exp(delta * A)
    assert 0.0 <= a_bar <= 1.0
    if delta * A < -np.finfo(float).eps:  # below that, exp rounds to exactly 1
        assert a_bar < 1.0


def test_zero_block_is_identity(rng):
    x = rng.standard_normal((2, 10, 3))
    for use_conv in (False, True):
        params = {k: Tensor(np.zeros(s)) for k, s in ssm_param_shapes(3, 2, use_conv).items()}
        np.testing.assert_array_equal(mamba_forward(Tensor(x), params, use_conv).data, x)


def test_conv_toggle_changes_output(rng):
    x = rng.standard_normal((2, 12, 3))
    p = {k: Tensor(v) for k, v in init_ssm_params(rng, 3, 4, True).items()}
    with_conv = mamba_forward(Tensor(x), p, True).data
    without = mamba_forward(Tensor(x), {k: v for k, v in p.items() if not k.startswith("conv")}, False).data
    assert not np.allclose(with_conv, without)


def test_conv_is_causal(rng):
    from ismrnn.mamba import causal_depthwise_conv

    x = rng.standard_normal((1, 9, 2))
    w, b = rng.standard_normal((2, 4)), rng.standard_normal(2)
    y = causal_depthwise_conv(Tensor(x), w, b).data
    ref = np.zeros_like(y)
    for t in range(9):
        for j in range(4):
            src = t - 3 + j
            if src >= 0:
                ref[0, t] += w[:, j] * x[0, src]
        ref[0, t] += b
    np.testing.assert_allclose(y, ref, rtol=1e-13, atol=1e-15)


def test_block_shape_contract(rng):
    p = {k: Tensor(v) for k, v in init_ssm_params(rng, 7, 4, False).items()}
    assert mamba_forward(Tensor(rng.standard_normal((1, 96, 7))), p, False).shape == (1, 96, 7)


def test_init_values(rng):
    p = init_ssm_params(rng, 3, 4, False)
    assert np.all(-np.exp(p["A_log"]) < 0)
    np.testing.assert_allclose(np.exp(p["A_log"][0]), [1, 2, 3, 4], rtol=1e-15)
    dt = np.logaddexp(0, p["dt_proj.bias"])
    assert np.all((dt >= 1e-3 * 0.999) & (dt <= 0.1 * 1.001))


def test_per_channel_mode_keeps_channels_independent(rng):
    cfg = ModelConfig(lookback=8, horizon=4, channels=3, seg_len=4, d_model=6, d_state=2, mamba_per_channel=True)
    m = IsmrnnModel(cfg, seed=0)
    assert m.params["ssm.in_proj"].shape == (4, 1)
    x = rng.standard_normal((2, 8, 3))
    x2 = x.copy()
    x2[:, :, 0] += 1.0 + rng.standard_normal((2, 8))
    np.testing.assert_array_equal(m.predict(x)[:, :, 1:], m.predict(x2)[:, :, 1:])


def test_model_scan_methods_agree(rng):
    cfg = ModelConfig(lookback=24, horizon=8, channels=3, seg_len=8, d_model=8, d_state=4)
    a = IsmrnnModel(cfg, seed=2)
    b = IsmrnnModel(cfg.replace(scan_method="parallel"), params=a.state_dict())
    x = rng.standard_normal((4, 24, 3))
    np.testing.assert_allclose(a.predict(x), b.predict(x), rtol=1e-12, atol=1e-13)
