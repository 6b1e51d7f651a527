"""Attention building blocks.

Two units make up the network: a cross-attention block that lets a
farthest-point-sampled query subset aggregate detail from the full point
set (``gdp``), and a self-attention block whose projections widen the
feature channels by an integer ratio (``sfa``). Both wrap the same
residual multi-head attention + feed-forward skeleton.

Key and value share one projection matrix throughout; attention logits
are scaled by 1/sqrt(d_head).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError
from .geometry import fps, gather_rows
from .tensor import (Tensor, _record, _result, _accumulate, add, affine,
                     concat_cols, layer_norm, matmul, relu)

LAYER_NORM_EPS = 1e-6


@dataclass
class AttentionParams:
    """Projections and post-residual norm for one attention block."""

    w_q: Tensor        # (c_q, c_out)
    w_kv: Tensor       # (c_kv, c_out), shared by key and value
    w_out: Tensor      # (c_out, c_out)
    norm_gain: Tensor  # (c_out,)
    norm_bias: Tensor  # (c_out,)
    heads: int

    @property
    def c_out(self) -> int:
        return self.w_q.data.shape[1]

    def validate(self):
        c = self.c_out
        if self.w_kv.data.shape[1] != c or self.w_out.data.shape != (c, c):
            raise ConfigError(
                f"attention projections disagree on output width: "
                f"{self.w_q.data.shape}, {self.w_kv.data.shape}, {self.w_out.data.shape}")
        if c % self.heads != 0:
            raise ConfigError(f"output width {c} not divisible by {self.heads} heads")


@dataclass
class FfnParams:
    """Two affine layers with a rectifier, plus the post-residual norm."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    norm_gain: Tensor
    norm_bias: Tensor

    def validate(self):
        c, hidden = self.w1.data.shape
        if self.w2.data.shape != (hidden, c):
            raise ConfigError(
                f"ffn layer widths do not chain: {self.w1.data.shape} then {self.w2.data.shape}")


def attention_core(q: Tensor, kv: Tensor, heads: int, batch: int = 1) -> Tensor:
    """Scaled dot-product attention over already-projected q and kv.

    Key and value are both kv. With batch > 1, q and kv hold that many
    equal-length row segments and attention stays within each segment.
    One fused tape node: the softmax runs in place and the attention
    matrices are kept for the backward rule. Row reductions are
    sequential, so replays are bit-identical.
    """
    rows_q, c = q.data.shape
    rows_kv = kv.data.shape[0]
    if kv.data.shape[1] != c:
        raise ConfigError(f"attention: q width {c} != kv width {kv.data.shape[1]}")
    if c % heads != 0:
        raise ConfigError(f"attention width {c} not divisible by {heads} heads")
    if rows_q % batch != 0 or rows_kv % batch != 0:
        raise ConfigError(f"attention: batch {batch} does not divide rows "
                          f"{rows_q}/{rows_kv}")
    a = rows_q // batch
    b = rows_kv // batch
    d = c // heads
    n_mats = batch * heads
    inv_sqrt_d = 1.0 / math.sqrt(d)
    # (batch, rows, heads, d) -> (batch*heads, rows, d)
    qh = np.ascontiguousarray(
        q.data.reshape(batch, a, heads, d).transpose(0, 2, 1, 3)).reshape(n_mats, a, d)
    kh = np.ascontiguousarray(
        kv.data.reshape(batch, b, heads, d).transpose(0, 2, 1, 3)).reshape(n_mats, b, d)
    qh *= inv_sqrt_d   # fold the logit scaling into the query copy
    attn = []
    out_heads = np.empty((n_mats, a, d), dtype=q.data.dtype)
    for i in range(n_mats):
        logits = qh[i] @ kh[i].T
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=1, keepdims=True)
        attn.append(logits)
        np.matmul(logits, kh[i], out=out_heads[i])
    out_data = np.ascontiguousarray(
        out_heads.reshape(batch, heads, a, d).transpose(0, 2, 1, 3)).reshape(batch * a, c)
    out = _result(out_data, q, kv)

    def backward(g):
        gh = np.ascontiguousarray(
            g.reshape(batch, a, heads, d).transpose(0, 2, 1, 3)).reshape(n_mats, a, d)
        gq = np.empty((n_mats, a, d), dtype=g.dtype) if q.requires_grad else None
        gkv = np.empty((n_mats, b, d), dtype=g.dtype) if kv.requires_grad else None
        for i in range(n_mats):
            go = gh[i]
            w = attn[i]
            gw = go @ kh[i].T
            _kernels.softmax_bwd(w, gw)           # in place, wrt the logits
            if gq is not None:
                np.matmul(gw, kh[i], out=gq[i])
            if gkv is not None:
                # qh carries the folded 1/sqrt(d), which is exactly the
                # scaling the key gradient needs
                np.matmul(gw.T, qh[i], out=gkv[i])
                gkv[i] += w.T @ go
        if gq is not None:
            # query gradient picks up the folded scale explicitly
            gq *= inv_sqrt_d
            flat = np.ascontiguousarray(
                gq.reshape(batch, heads, a, d).transpose(0, 2, 1, 3)).reshape(rows_q, c)
            _accumulate(q, flat, own=True)
        if gkv is not None:
            flat = np.ascontiguousarray(
                gkv.reshape(batch, heads, b, d).transpose(0, 2, 1, 3)).reshape(rows_kv, c)
            _accumulate(kv, flat, own=True)

    _record(out, backward)
    return out


def _attend(q: Tensor, kv: Tensor, params: AttentionParams, batch: int = 1) -> Tensor:
    return matmul(attention_core(q, kv, params.heads, batch=batch), params.w_out)


def multi_head(q_in: Tensor, kv_in: Tensor, params: AttentionParams) -> Tensor:
    """Multi-head attention of q_in over kv_in (key = value = kv_in @ w_kv)."""
    params.validate()
    q = matmul(q_in, params.w_q)
    kv = matmul(kv_in, params.w_kv)
    return _attend(q, kv, params)


def ffn(x: Tensor, params: FfnParams) -> Tensor:
    """Per-row affine -> rectifier -> affine; caller adds residual and norm."""
    return affine(relu(affine(x, params.w1, params.b1)), params.w2, params.b2)


def _ffn_residual(x: Tensor, params: FfnParams) -> Tensor:
    return layer_norm(add(x, ffn(x, params)), params.norm_gain, params.norm_bias,
                      eps=LAYER_NORM_EPS)


def segment_fps(coords: np.ndarray, batch: int, k: int, start: int = 0) -> np.ndarray:
    """FPS run per equal-length row segment; returns global row indices."""
    n = coords.shape[0] // batch
    picked = []
    for s in range(batch):
        idx = fps(coords[s * n:(s + 1) * n], k, start=start).indices
        picked.append(idx + s * n)
    return np.concatenate(picked)


def gdp(x: Tensor, coords: np.ndarray, d: int,
        attn: AttentionParams, ffn_params: FfnParams,
        start: int = 0, batch: int = 1):
    """Cross-attention downsampling block.

    FPS picks n/d rows of `coords`; the projected query of those rows
    attends over all of x, and the block returns the (n/d, 2c) matrix
    [norm(F + ffn(F)), Q] together with the selected coordinates. With
    batch > 1, rows hold that many equal segments and FPS and attention
    run per segment.
    """
    rows = x.data.shape[0]
    n = rows // batch
    if d < 1 or n % d != 0:
        raise ConfigError(f"gdp: ratio {d} does not divide {n} rows")
    if coords.shape[0] != rows:
        raise ConfigError(f"gdp: coords rows {coords.shape[0]} != feature rows {rows}")
    attn.validate()
    idx = segment_fps(coords, batch, n // d, start=start)
    y = gather_rows(x, idx)
    q = matmul(y, attn.w_q)
    kv = matmul(x, attn.w_kv)
    f = layer_norm(add(q, _attend(q, kv, attn, batch)), attn.norm_gain, attn.norm_bias,
                   eps=LAYER_NORM_EPS)
    out = concat_cols([_ffn_residual(f, ffn_params), q])
    return out, coords[idx]


def sfa(x: Tensor, u: int, attn: AttentionParams, ffn_params: FfnParams,
        batch: int = 1) -> Tensor:
    """Self-attention block whose projections widen channels by ratio u."""
    if int(u) != u or u < 1:
        raise ConfigError(f"sfa: up-ratio must be a positive integer, got {u}")
    c = x.data.shape[1]
    attn.validate()
    if attn.w_q.data.shape != (c, u * c):
        raise ConfigError(
            f"sfa: projection shape {attn.w_q.data.shape} not ({c}, {u * c}) for ratio {u}")
    q = matmul(x, attn.w_q)
    kv = matmul(x, attn.w_kv)
    f = layer_norm(add(q, _attend(q, kv, attn, batch)), attn.norm_gain, attn.norm_bias,
                   eps=LAYER_NORM_EPS)
    return _ffn_residual(f, ffn_params)


# ---------------------------------------------------------------------------
# Parameter construction


def uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def make_attention_params(c_q: int, c_kv: int, c_out: int, heads: int,
                          rng: np.random.Generator, dtype=np.float32) -> AttentionParams:
    if c_out % heads != 0:
        raise ConfigError(f"attention width {c_out} not divisible by {heads} heads")
    p = AttentionParams(
        w_q=Tensor(uniform_init(rng, c_q, c_out, dtype), requires_grad=True),
        w_kv=Tensor(uniform_init(rng, c_kv, c_out, dtype), requires_grad=True),
        w_out=Tensor(uniform_init(rng, c_out, c_out, dtype), requires_grad=True),
        norm_gain=Tensor(np.ones(c_out, dtype=dtype), requires_grad=True),
        norm_bias=Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
        heads=heads,
    )
    return p


def make_ffn_params(c: int, rng: np.random.Generator, dtype=np.float32,
                    hidden_mult: int = 2) -> FfnParams:
    hidden = hidden_mult * c
    return FfnParams(
        w1=Tensor(uniform_init(rng, c, hidden, dtype), requires_grad=True),
        b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
        w2=Tensor(uniform_init(rng, hidden, c, dtype), requires_grad=True),
        b2=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
        norm_gain=Tensor(np.ones(c, dtype=dtype), requires_grad=True),
        norm_bias=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
    )
