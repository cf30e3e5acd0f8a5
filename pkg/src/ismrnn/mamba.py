"""Selective state-space preprocessing block.

The block runs over the normalized lookback window with width ``D`` equal to
the channel count (channels are mixed), or width 1 per channel when
``per_channel`` is set. The depthwise causal convolution is optional.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import NumericError, ShapeError
from .tensor import Tensor

CONV_KERNEL = 4
DT_MIN, DT_MAX = 1e-3, 1e-1


def _check_scan_shapes(u, delta, A, B, C, D):
    *lead, L, E = u.shape
    N = A.shape[-1]
    if delta.shape != u.shape:
        raise ShapeError(f"ssm_scan: delta {delta.shape} does not match u {u.shape}")
    if A.shape != (E, N):
        raise ShapeError(f"ssm_scan: A {A.shape} does not match (E={E}, N)")
    want = tuple(lead) + (L, N)
    if B.shape != want or C.shape != want:
        raise ShapeError(f"ssm_scan: B {B.shape} / C {C.shape} do not match {want}")
    if D is not None and D.shape != (E,):
        raise ShapeError(f"ssm_scan: D {D.shape} does not match (E={E},)")


def _states_sequential(dA: np.ndarray, dBu: np.ndarray) -> np.ndarray:
    """h_t = dA_t * h_{t-1} + dBu_t along axis -3, h_0 = 0."""
    h = np.empty_like(dBu)
    L = dBu.shape[-3]
    prev = np.zeros_like(dBu[..., 0, :, :])
    for t in range(L):
        prev = dA[..., t, :, :] * prev + dBu[..., t, :, :]
        h[..., t, :, :] = prev
    return h


def _states_parallel(dA: np.ndarray, dBu: np.ndarray) -> np.ndarray:
    """Same recurrence via an inclusive Hillis-Steele scan of affine maps.

    Pairs compose as (a1, b1) then (a2, b2) -> (a1*a2, a2*b1 + b2); each of
    the log2(L) rounds is one vectorized numpy update.
    """
    a = dA.copy()
    b = dBu.copy()
    L = a.shape[-3]
    shift = 1
    while shift < L:
        a_prev = a[..., :-shift, :, :]
        b_prev = b[..., :-shift, :, :]
        b_new = b.copy()
        a_new = a.copy()
        b_new[..., shift:, :, :] = a[..., shift:, :, :] * b_prev + b[..., shift:, :, :]
        a_new[..., shift:, :, :] = a[..., shift:, :, :] * a_prev
        a, b = a_new, b_new
        shift *= 2
    return b


def ssm_scan(u, delta, A, B, C, D=None, method: str = "sequential") -> Tensor:
    """Selective scan with simplified zero-order hold.

    Shapes: ``u``, ``delta``: (..., L, E); ``A``: (E, N); ``B``, ``C``:
    (..., L, N); ``D``: (E,). Per step ``h = exp(delta*A) * h + delta*B*u`` and
    ``y = <C, h> + D*u``. ``method`` picks the forward recurrence solver; the
    backward pass is the same reverse-time recurrence either way.
    """
    u, delta, A, B, C = (T.as_tensor(v) for v in (u, delta, A, B, C))
    D = None if D is None else T.as_tensor(D)
    _check_scan_shapes(u, delta, A, B, C, D)
    if not np.all(delta.data > 0):
        kind = "non-finite" if not np.all(np.isfinite(delta.data)) else "non-positive"
        raise NumericError(f"ssm_scan: {kind} step size delta (must be finite and > 0)")
    ud, dd, Ad, Bd, Cd = u.data, delta.data, A.data, B.data, C.data

    dA = np.exp(dd[..., None] * Ad)                           # (..., L, E, N)
    dBu = (dd * ud)[..., None] * Bd[..., None, :]             # (..., L, E, N)
    if method == "sequential":
        h = _states_sequential(dA, dBu)
    elif method == "parallel":
        h = _states_parallel(dA, dBu)
    else:
        raise ValueError(f"unknown scan method {method!r}")
    y = np.einsum("...len,...ln->...le", h, Cd)
    if D is not None:
        y = y + ud * D.data

    def bw(gy):
        gh_out = gy[..., None] * Cd[..., None, :]            # (..., L, E, N)
        gC = np.einsum("...le,...len->...ln", gy, h)
        # reverse-time adjoint: g_t = gh_out_t + dA_{t+1} * g_{t+1}
        g = np.empty_like(h)
        L = h.shape[-3]
        acc = np.zeros_like(h[..., 0, :, :])
        for t in range(L - 1, -1, -1):
            acc = gh_out[..., t, :, :] + acc
            g[..., t, :, :] = acc
            acc = acc * dA[..., t, :, :]
        h_prev = np.zeros_like(h)
        h_prev[..., 1:, :, :] = h[..., :-1, :, :]
        g_dA = g * h_prev * dA                                # d/d(delta*A)
        gB_term = g * (dd * ud)[..., None]                    # (..., L, E, N)
        g_delta = (g_dA * Ad).sum(-1) + (g * Bd[..., None, :]).sum(-1) * ud
        lead = tuple(range(g.ndim - 2))
        gA = (g_dA * dd[..., None]).sum(axis=lead)
        gB = gB_term.sum(axis=-2)
        gu = (g * Bd[..., None, :]).sum(-1) * dd
        grads = [gu, g_delta, gA, gB, gC]
        if D is not None:
            gu = gu + gy * D.data
            grads[0] = gu
            grads.append((gy * ud).reshape(-1, ud.shape[-1]).sum(0))
        return tuple(grads)

    inputs = (u, delta, A, B, C) if D is None else (u, delta, A, B, C, D)
    return Tensor._result(y, inputs, bw)


def causal_depthwise_conv(x, weight, bias) -> Tensor:
    """Per-channel causal convolution over axis -2.

    ``x``: (..., L, E); ``weight``: (E, k); ``bias``: (E,). Output step t sees
    inputs t-k+1..t, zero-padded on the left.
    """
    x = T.as_tensor(x)
    k = weight.shape[1]
    L = x.shape[-2]
    xp = T.pad_left(x, k - 1, axis=x.ndim - 2)
    out = None
    for j in range(k):
        tap = xp[..., j:j + L, :] * weight[:, j]
        out = tap if out is None else out + tap
    return out + bias


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_ssm_params(rng: np.random.Generator, D: int, d_state: int, use_conv: bool,
                    dtype=np.float64) -> dict[str, np.ndarray]:
    """Reference-style initial values for a block of model width ``D``."""
    E = 2 * D
    p = {
        "in_proj": _uniform(rng, 1 / math.sqrt(D), (2 * E, D), dtype),
        "dt_proj.weight": _uniform(rng, 1 / math.sqrt(E), (E, E), dtype),
        "B_proj": _uniform(rng, 1 / math.sqrt(E), (d_state, E), dtype),
        "C_proj": _uniform(rng, 1 / math.sqrt(E), (d_state, E), dtype),
        "A_log": np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (E, 1))).astype(dtype),
        "D": np.ones(E, dtype=dtype),
        "out_proj": _uniform(rng, 1 / math.sqrt(E), (D, E), dtype),
    }
    dt = np.exp(rng.uniform(size=E) * (math.log(DT_MAX) - math.log(DT_MIN)) + math.log(DT_MIN))
    dt = np.maximum(dt, 1e-4)
    p["dt_proj.bias"] = (dt + np.log(-np.expm1(-dt))).astype(dtype)  # softplus^-1(dt)
    if use_conv:
        p["conv.weight"] = _uniform(rng, 1 / math.sqrt(CONV_KERNEL), (E, CONV_KERNEL), dtype)
        p["conv.bias"] = _uniform(rng, 1 / math.sqrt(CONV_KERNEL), (E,), dtype)
    return p


def ssm_param_shapes(D: int, d_state: int, use_conv: bool) -> dict[str, tuple]:
    E = 2 * D
    shapes = {
        "in_proj": (2 * E, D), "dt_proj.weight": (E, E), "dt_proj.bias": (E,),
        "B_proj": (d_state, E), "C_proj": (d_state, E), "A_log": (E, d_state),
        "D": (E,), "out_proj": (D, E),
    }
    if use_conv:
        shapes["conv.weight"] = (E, CONV_KERNEL)
        shapes["conv.bias"] = (E,)
    return shapes


def mamba_forward(x, params: dict, use_conv: bool, scan_method: str = "sequential") -> Tensor:
    """One selective-SSM block with an outer additive skip.

    ``x``: (..., L, D). ``params`` maps the names from :func:`ssm_param_shapes`
    to tensors.
    """
    x = T.as_tensor(x)
    E = params["D"].shape[0]
    if x.shape[-1] * 2 != E:
        raise ShapeError(f"mamba_forward: input width {x.shape[-1]} does not match block width {E // 2}")
    xz = T.affine(x, params["in_proj"])
    xs, z = xz[..., :E], xz[..., E:]
    if use_conv:
        xs = causal_depthwise_conv(xs, params["conv.weight"], params["conv.bias"])
    xs = T.silu(xs)
    delta = T.softplus(T.affine(xs, params["dt_proj.weight"], params["dt_proj.bias"]))
    Bm = T.affine(xs, params["B_proj"])
    Cm = T.affine(xs, params["C_proj"])
    A = T.neg(T.exp(params["A_log"]))
    y = ssm_scan(xs, delta, A, Bm, Cm, params["D"], method=scan_method)
    y = y * T.silu(z)
    return x + T.affine(y, params["out_proj"])
