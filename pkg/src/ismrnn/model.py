"""Segment-wise recurrent forecaster with implicit segmentation.

Pipeline for a batch ``B x L x C``: instance normalization, optional
selective-SSM preprocessing, channel-independent flattening to ``B*C``
series, segmentation (implicit two-map or explicit truncation), a single
GRU encoder with an optional residual bypass, and parallel multi-step
decoding from positional + channel embeddings.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .mamba import init_ssm_params, mamba_forward, ssm_param_shapes
from .rng import make_rng
from .tensor import Tensor

VARIANTS = {
    # tag: (use_mamba, use_implicit_residual)
    "M&LR": (True, True),
    "LR": (False, True),
    "M": (True, False),
    "none": (False, False),
}


@dataclass(frozen=True)
class ModelConfig:
    lookback: int
    horizon: int
    channels: int
    seg_len: int
    d_model: int = 512
    dropout: float = 0.0
    d_state: int = 4
    use_mamba: bool = True
    use_implicit_residual: bool = True
    use_conv: bool = False
    norm: str = "last"                 # "last" | "revin"
    per_segment_compress: bool = False
    mamba_per_channel: bool = False
    scan_method: str = "sequential"

    def __post_init__(self):
        for name in ("lookback", "horizon", "channels", "seg_len", "d_model", "d_state"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lookback % self.seg_len:
            raise ConfigError(f"lookback {self.lookback} is not divisible by seg_len {self.seg_len}")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even, got {self.d_model}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.norm not in ("last", "revin"):
            raise ConfigError(f"norm must be 'last' or 'revin', got {self.norm!r}")
        if self.scan_method not in ("sequential", "parallel"):
            raise ConfigError(f"scan_method must be 'sequential' or 'parallel', got {self.scan_method!r}")

    @property
    def n_segments(self) -> int:
        return self.lookback // self.seg_len

    @property
    def n_out_segments(self) -> int:
        return -(-self.horizon // self.seg_len)

    @property
    def variant(self) -> str:
        for tag, flags in VARIANTS.items():
            if flags == (self.use_mamba, self.use_implicit_residual):
                return tag
        raise AssertionError("unreachable")

    def with_variant(self, tag: str) -> "ModelConfig":
        if tag not in VARIANTS:
            raise ConfigError(f"unknown variant {tag!r}; expected one of {sorted(VARIANTS)}")
        m, lr = VARIANTS[tag]
        return self.replace(use_mamba=m, use_implicit_residual=lr)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every trainable array; a pure function of ``cfg``."""
    L, d, w = cfg.lookback, cfg.d_model, cfg.seg_len
    n, m, C = cfg.n_segments, cfg.n_out_segments, cfg.channels
    shapes: dict[str, tuple] = {}
    if cfg.use_mamba:
        width = 1 if cfg.mamba_per_channel else C
        shapes.update({f"ssm.{k}": v for k, v in ssm_param_shapes(width, cfg.d_state, cfg.use_conv).items()})
    if cfg.use_implicit_residual:
        shapes["expand.weight"] = (n,)
        shapes["expand.bias"] = (n,)
        shapes["compress.weight"] = (n, d, L) if cfg.per_segment_compress else (d, L)
        shapes["compress.bias"] = (n, d) if cfg.per_segment_compress else (d,)
        shapes["residual.weight"] = (d, L)
        shapes["residual.bias"] = (d,)
    else:
        shapes["segment.weight"] = (d, w)
        shapes["segment.bias"] = (d,)
    shapes.update({
        "gru.weight_ih": (3 * d, d), "gru.weight_hh": (3 * d, d),
        "gru.bias_ih": (3 * d,), "gru.bias_hh": (3 * d,),
        "pos_emb": (m, d // 2), "channel_emb": (C, d // 2),
        "head.weight": (w, d), "head.bias": (w,),
    })
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in parameter_shapes(cfg).values())


def init_parameters(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) for maps, N(0, 1) for embeddings."""
    rng = make_rng(seed, "init")
    L, d, w = cfg.lookback, cfg.d_model, cfg.seg_len
    out: dict[str, np.ndarray] = {}

    def uni(fan_in, shape):
        b = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape).astype(dtype)

    shapes = parameter_shapes(cfg)
    if cfg.use_mamba:
        width = 1 if cfg.mamba_per_channel else cfg.channels
        ssm = init_ssm_params(make_rng(seed, "init.ssm"), width, cfg.d_state, cfg.use_conv, dtype)
        out.update({f"ssm.{k}": v for k, v in ssm.items()})
    if cfg.use_implicit_residual:
        out["expand.weight"] = uni(1, shapes["expand.weight"])
        out["expand.bias"] = uni(1, shapes["expand.bias"])
        out["compress.weight"] = uni(L, shapes["compress.weight"])
        out["compress.bias"] = uni(L, shapes["compress.bias"])
        out["residual.weight"] = uni(L, shapes["residual.weight"])
        out["residual.bias"] = uni(L, shapes["residual.bias"])
    else:
        out["segment.weight"] = uni(w, shapes["segment.weight"])
        out["segment.bias"] = uni(w, shapes["segment.bias"])
    for name in ("gru.weight_ih", "gru.weight_hh", "gru.bias_ih", "gru.bias_hh"):
        out[name] = uni(d, shapes[name])
    out["pos_emb"] = rng.standard_normal(shapes["pos_emb"]).astype(dtype)
    out["channel_emb"] = rng.standard_normal(shapes["channel_emb"]).astype(dtype)
    out["head.weight"] = uni(d, shapes["head.weight"])
    out["head.bias"] = uni(d, shapes["head.bias"])
    return {k: out[k] for k in shapes}


# -- building blocks -----------------------------------------------------------------
# Each takes tensors and returns tensors; IsmrnnModel wires them together.

def instance_norm(x: Tensor, kind: str = "last", eps: float = 1e-5):
    """Normalize each series over the time axis (-2).

    Returns ``(normalized, stats)`` where ``stats`` feeds :func:`instance_denorm`.
    ``last`` subtracts the final lookback value; ``revin`` removes mean and std.
    """
    x = T.as_tensor(x)
    if kind == "last":
        anchor = x.data[..., -1:, :]
        return x - anchor, (anchor, None)
    mu = x.data.mean(axis=-2, keepdims=True)
    sd = np.sqrt(x.data.var(axis=-2, keepdims=True) + eps)
    return (x - mu) / sd, (mu, sd)


def instance_denorm(y: Tensor, stats) -> Tensor:
    anchor, scale = stats
    if scale is not None:
        y = y * scale
    return y + anchor


def implicit_segment(x: Tensor, expand_w, expand_b, compress_w, compress_b):
    """Two-map segmentation of series ``x``: (S, L).

    Expand: ``Xbar[s, j, t] = expand_w[j] * x[s, t] + expand_b[j]`` -> (S, n, L).
    Compress: ``Xtil[s, j] = compress_w @ Xbar[s, j] + compress_b`` -> (S, n, d),
    with a separate compress map per segment when ``compress_w`` is 3-D.
    Returns ``(Xbar, Xtil)``.
    """
    x = T.as_tensor(x)
    expand_w, expand_b = T.as_tensor(expand_w), T.as_tensor(expand_b)
    xbar = T.reshape(x, (x.shape[0], 1, x.shape[1])) * T.reshape(expand_w, (-1, 1)) \
        + T.reshape(expand_b, (-1, 1))
    compress_w = T.as_tensor(compress_w)
    if compress_w.ndim == 2:
        xtil = T.affine(xbar, compress_w, compress_b)
    else:
        # (n, S, L) @ (n, L, d) -> (n, S, d)
        per_seg = T.matmul(T.transpose(xbar, (1, 0, 2)), T.transpose(compress_w, (0, 2, 1)))
        per_seg = per_seg + T.reshape(compress_b, (compress_b.shape[0], 1, -1))
        xtil = T.transpose(per_seg, (1, 0, 2))
    return xbar, xtil


def explicit_segment(x: Tensor, seg_len: int, weight, bias) -> Tensor:
    """Truncate ``x``: (S, L) into ``L // seg_len`` blocks and map each w -> d."""
    x = T.as_tensor(x)
    S, L = x.shape
    if L % seg_len:
        raise ShapeError(f"explicit_segment: length {L} is not divisible by seg_len {seg_len}")
    return T.affine(T.reshape(x, (S, L // seg_len, seg_len)), weight, bias)


def gru_cell(x: Tensor, h: Tensor, w_ih, w_hh, b_ih, b_hh, gi: Tensor | None = None) -> Tensor:
    """One GRU step (reset, update, candidate gates; torch gate ordering)."""
    d = h.shape[-1]
    if gi is None:
        gi = T.affine(x, w_ih, b_ih)
    gh = T.affine(h, w_hh, b_hh)
    r = T.sigmoid(gi[..., :d] + gh[..., :d])
    z = T.sigmoid(gi[..., d:2 * d] + gh[..., d:2 * d])
    cand = T.tanh(gi[..., 2 * d:] + r * gh[..., 2 * d:])
    return (1.0 - z) * cand + z * h


def gru_encode(xtil: Tensor, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """Run the GRU over the segment axis of ``xtil``: (S, n, d) from h0 = 0."""
    xtil = T.as_tensor(xtil)
    S, n, _ = xtil.shape
    d = T.as_tensor(w_hh).shape[1]
    if n == 0:
        raise ShapeError("gru_encode: no segments")
    gi_all = T.affine(xtil, w_ih, b_ih)   # input projections for all steps at once
    h0 = Tensor(np.zeros((S, d), dtype=xtil.dtype))
    _, h_n = T.scan(lambda h, gi: gru_cell(None, h, w_ih, w_hh, b_ih, b_hh, gi=gi), h0, gi_all, axis=1)
    return h_n


def residual_path(xbar: Tensor, weight, bias) -> Tensor:
    """Mean-pool ``xbar``: (S, n, L) over segments, then map L -> d."""
    return T.affine(T.mean(xbar, axis=1), weight, bias)


def pmf_decode(h: Tensor, pos_emb, channel_emb, w_ih, w_hh, b_ih, b_hh, head_w, head_b,
               horizon: int, dropout: float = 0.0, rng=None, training: bool = False) -> Tensor:
    """Parallel multi-step decoding.

    ``h``: (B*C, d) encoder states ordered batch-major then channel. Every
    output segment i of channel c runs one GRU step from ``h`` on input
    ``[pos_emb[i], channel_emb[c]]``; a linear head maps the new state to
    ``seg_len`` values. Segments are concatenated and cut to ``horizon``.
    Returns (B*C, horizon).
    """
    h = T.as_tensor(h)
    pos_emb, channel_emb = T.as_tensor(pos_emb), T.as_tensor(channel_emb)
    S, d = h.shape
    m, half = pos_emb.shape
    C = channel_emb.shape[0]
    if S % C:
        raise ShapeError(f"pmf_decode: {S} encoder states are not a multiple of {C} channels")
    B = S // C
    pos = T.broadcast_to(T.reshape(pos_emb, (1, m, half)), (C, m, half))
    chan = T.broadcast_to(T.reshape(channel_emb, (C, 1, half)), (C, m, half))
    dec_in = T.concat([pos, chan], axis=-1)                                   # (C, m, d)
    dec_in = T.reshape(T.broadcast_to(T.reshape(dec_in, (1, C, m, d)), (B, C, m, d)), (S * m, d))
    h_rep = T.reshape(T.broadcast_to(T.reshape(h, (S, 1, d)), (S, m, d)), (S * m, d))
    h_out = gru_cell(dec_in, h_rep, w_ih, w_hh, b_ih, b_hh)
    h_out = T.dropout(h_out, dropout, rng, training)
    y = T.affine(h_out, head_w, head_b)                                       # (S*m, w)
    y = T.reshape(y, (S, -1))
    if y.shape[1] != horizon:
        y = y[:, :horizon]
    return y


class IsmrnnModel:
    """Parameters plus forward pass.

    ``params`` maps names (see :func:`parameter_shapes`) to tracked tensors.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0,
                 dtype=np.float64):
        self.cfg = cfg
        arrays = init_parameters(cfg, seed, dtype) if params is None else params
        want = parameter_shapes(cfg)
        if set(arrays) != set(want):
            missing = sorted(set(want) - set(arrays))
            extra = sorted(set(arrays) - set(want))
            raise ShapeError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for k, s in want.items():
            if tuple(np.shape(arrays[k])) != s:
                raise ShapeError(f"parameter {k}: expected shape {s}, got {tuple(np.shape(arrays[k]))}")
        self.params = {k: Tensor(np.array(arrays[k], dtype=dtype), requires_grad=True) for k in want}
        self.dtype = np.dtype(dtype)

    # -- bookkeeping --
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in arrays:
                raise ShapeError(f"missing parameter {k}")
            if arrays[k].shape != p.shape:
                raise ShapeError(f"parameter {k}: expected shape {p.shape}, got {arrays[k].shape}")
            p.data[...] = arrays[k]

    def _ssm_params(self):
        return {k[4:]: v for k, v in self.params.items() if k.startswith("ssm.")}

    # -- stages --
    def encode(self, series: Tensor):
        """Segment and encode (S, L) series; returns the encoder output (S, d)."""
        p, cfg = self.params, self.cfg
        if cfg.use_implicit_residual:
            xbar, xtil = implicit_segment(series, p["expand.weight"], p["expand.bias"],
                                          p["compress.weight"], p["compress.bias"])
        else:
            xtil = explicit_segment(series, cfg.seg_len, p["segment.weight"], p["segment.bias"])
        h_n = gru_encode(xtil, p["gru.weight_ih"], p["gru.weight_hh"], p["gru.bias_ih"], p["gru.bias_hh"])
        if cfg.use_implicit_residual:
            h_n = h_n + residual_path(xbar, p["residual.weight"], p["residual.bias"])
        return h_n

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Predict (B, H, C) from (B, L, C)."""
        cfg, p = self.cfg, self.params
        x = T.as_tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.dtype))
        if x.ndim != 3 or x.shape[1:] != (cfg.lookback, cfg.channels):
            raise ShapeError(f"forward: expected (B, {cfg.lookback}, {cfg.channels}), got {x.shape}")
        B, L, C = x.shape
        xn, stats = instance_norm(x, cfg.norm)
        if cfg.use_mamba:
            if cfg.mamba_per_channel:
                seq = T.reshape(T.transpose(xn, (0, 2, 1)), (B * C, L, 1))
                seq = mamba_forward(seq, self._ssm_params(), cfg.use_conv, cfg.scan_method)
                xn = T.transpose(T.reshape(seq, (B, C, L)), (0, 2, 1))
            else:
                xn = mamba_forward(xn, self._ssm_params(), cfg.use_conv, cfg.scan_method)
        series = T.reshape(T.transpose(xn, (0, 2, 1)), (B * C, L))
        enc = self.encode(series)
        y = pmf_decode(enc, p["pos_emb"], p["channel_emb"], p["gru.weight_ih"], p["gru.weight_hh"],
                       p["gru.bias_ih"], p["gru.bias_hh"], p["head.weight"], p["head.bias"],
                       cfg.horizon, cfg.dropout, rng, training)
        y = T.transpose(T.reshape(y, (B, C, cfg.horizon)), (0, 2, 1))
        return instance_denorm(y, stats)

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, training=False).data
