"""The four attention kernels of the two-stream block, plus the two bridging
operators: the channelwise 3-vector dot product (equivariant -> invariant) and
the channelwise scalar product (invariant -> equivariant).

Invariant features live in (batch, n, d); equivariant features in
(batch, n, 3, d) where the spatial axis is never split across heads.
Unbatched (n, d) / (n, 3, d) inputs are accepted and returned unbatched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass
class StreamPair:
    """Invariant (n x d) and equivariant (n x 3 x d) representations."""

    z_inv: Tensor
    z_equ: Tensor


@dataclass
class AttentionParams:
    """Projection matrices for one attention module, fused across heads.

    Every matrix is d x d (per-head blocks of width d/heads concatenated).
    Self-attention uses w_k/w_v; the cross variants carry the paired
    matrices w_k1/w_k2 and w_v1/w_v2 that feed the bridging operators.
    """

    heads: int
    w_q: Tensor
    w_o: Tensor
    w_k: Tensor | None = None
    w_v: Tensor | None = None
    w_k1: Tensor | None = None
    w_k2: Tensor | None = None
    w_v1: Tensor | None = None
    w_v2: Tensor | None = None

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for field in ("w_q", "w_o", "w_k", "w_v", "w_k1", "w_k2", "w_v1", "w_v2"):
            t = getattr(self, field)
            if t is not None:
                out[f"{prefix}.{field}"] = t
        return out


def init_attention_params(rng: np.random.Generator, d: int, heads: int,
                          cross: bool, zero_output: bool = True) -> AttentionParams:
    """Projections from N(0, 1/d); the output projection starts at zero so a
    fresh block is the identity on the residual stream."""
    if d % heads != 0:
        raise DimensionError(f"width {d} not divisible by {heads} heads")

    def w():
        return Tensor(rng.normal(scale=1.0 / np.sqrt(d), size=(d, d)))

    w_o = Tensor(np.zeros((d, d))) if zero_output else w()
    if cross:
        return AttentionParams(heads, w(), w_o, w_k1=w(), w_k2=w(), w_v1=w(), w_v2=w())
    return AttentionParams(heads, w(), w_o, w_k=w(), w_v=w())


def dot_product_pairwise(x: Tensor, y: Tensor) -> Tensor:
    """Per-particle, per-channel 3-vector inner product: (..., 3, d) -> (..., d)."""
    if x.shape != y.shape:
        raise DimensionError(f"operand shapes differ: {x.shape} vs {y.shape}")
    if x.ndim < 2 or x.shape[-2] != 3:
        raise DimensionError(f"expected a trailing (3, d) block, got {x.shape}")
    return T.mul(x, y).sum(axis=-2)


def scalar_product(x: Tensor, y: Tensor) -> Tensor:
    """Scale each 3-vector channel of x (..., 3, d) by the scalar in y (..., d)."""
    if x.ndim < 2 or x.shape[-2] != 3:
        raise DimensionError(f"expected a trailing (3, d) block, got {x.shape}")
    if x.shape[:-2] + x.shape[-1:] != y.shape:
        raise DimensionError(f"channel counts disagree: {x.shape} vs {y.shape}")
    return T.mul(x, y.reshape(y.shape[:-1] + (1, y.shape[-1])))


def center_channels(z_equ: Tensor) -> Tensor:
    """Subtract the per-particle channel-mean 3-vector (reflection-mode hook)."""
    return z_equ - z_equ.mean(axis=-1, keepdims=True)


def _split_heads_inv(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape((b, n, heads, d // heads)).transpose((0, 2, 1, 3))


def _merge_heads_inv(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose((0, 2, 1, 3)).reshape((b, n, h * dh))


def _split_heads_equ(x: Tensor, heads: int) -> Tensor:
    # (b, n, 3, d) -> (b, heads, n, 3*dh); the spatial axis stays whole
    b, n, three, d = x.shape
    dh = d // heads
    return x.reshape((b, n, three, heads, dh)).transpose((0, 3, 1, 2, 4)) \
            .reshape((b, heads, n, three * dh))


def _merge_heads_equ(x: Tensor) -> Tensor:
    b, h, n, tdh = x.shape
    dh = tdh // 3
    return x.reshape((b, h, n, 3, dh)).transpose((0, 2, 3, 1, 4)) \
            .reshape((b, n, 3, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, scale: float, bias: Tensor,
            prob_mask: Tensor | None = None) -> Tensor:
    """softmax(q k^T * scale + bias) v over stacked heads.

    ``prob_mask`` (inverted-dropout mask over attention probabilities) is a
    per-head scalar field, so applying it never touches the spatial axis.
    """
    scores = T.matmul(q, k.transpose((0, 1, 3, 2))) * scale
    scores = scores + bias
    probs = T.softmax(scores, axis=-1)
    if prob_mask is not None:
        probs = T.mul(probs, prob_mask)
    # weighted value sum with order-independent accumulation over particles,
    # making the whole op bitwise permutation-equivariant
    b, h, n, _ = probs.shape
    weighted = T.mul(probs.reshape((b, h, n, n, 1)),
                     v.reshape((b, h, 1, n, v.shape[-1])))
    return T.stable_sum(weighted, axis=-2)


def _as_bias(bias, b: int, n: int) -> Tensor:
    if bias is None:
        return Tensor(np.zeros((b, 1, n, n)))
    bias = T.as_tensor(bias) if not isinstance(bias, Tensor) else bias
    if not np.all(np.isfinite(bias.data)):
        raise T.NumericError("attention bias must be finite")
    if bias.ndim == 2:
        return bias.reshape((1, 1) + bias.shape)
    return bias.reshape((bias.shape[0], 1) + bias.shape[1:])


def _unbatch_wrap(x: Tensor, expected_ndim: int):
    if x.ndim == expected_ndim - 1:
        return x.reshape((1,) + x.shape), True
    if x.ndim != expected_ndim:
        raise DimensionError(f"expected rank {expected_ndim} (or unbatched), got {x.shape}")
    return x, False


def inv_self_attn(z_inv: Tensor, params: AttentionParams, bias=None,
                  prob_mask: Tensor | None = None) -> Tensor:
    z_inv, squeeze = _unbatch_wrap(z_inv, 3)
    b, n, d = z_inv.shape
    h = params.heads
    q = _split_heads_inv(T.matmul(z_inv, params.w_q), h)
    k = _split_heads_inv(T.matmul(z_inv, params.w_k), h)
    v = _split_heads_inv(T.matmul(z_inv, params.w_v), h)
    out = _attend(q, k, v, 1.0 / np.sqrt(d // h), _as_bias(bias, b, n), prob_mask)
    out = T.matmul(_merge_heads_inv(out), params.w_o)
    return out.reshape(out.shape[1:]) if squeeze else out


def equ_self_attn(z_equ: Tensor, params: AttentionParams, bias=None,
                  center: bool = False, prob_mask: Tensor | None = None) -> Tensor:
    z_equ, squeeze = _unbatch_wrap(z_equ, 4)
    b, n, _, d = z_equ.shape
    h = params.heads
    src = center_channels(z_equ) if center else z_equ
    q = _split_heads_equ(T.matmul(src, params.w_q), h)
    k = _split_heads_equ(T.matmul(src, params.w_k), h)
    v = _split_heads_equ(T.matmul(src, params.w_v), h)
    # score contraction runs over the flattened (3, dh) block, which equals
    # the per-channel 3-vector dot product summed over head channels
    out = _attend(q, k, v, 1.0 / np.sqrt(3 * (d // h)), _as_bias(bias, b, n), prob_mask)
    out = T.matmul(_merge_heads_equ(out), params.w_o)
    return out.reshape(out.shape[1:]) if squeeze else out


def inv_cross_attn(z_inv: Tensor, z_equ: Tensor, params: AttentionParams,
                   bias=None, center: bool = False,
                   prob_mask: Tensor | None = None) -> Tensor:
    z_inv, squeeze = _unbatch_wrap(z_inv, 3)
    z_equ, _ = _unbatch_wrap(z_equ, 4)
    if z_inv.shape[1] != z_equ.shape[1]:
        raise DimensionError("streams disagree on particle count")
    b, n, d = z_inv.shape
    h = params.heads
    src = center_channels(z_equ) if center else z_equ
    q = _split_heads_inv(T.matmul(z_inv, params.w_q), h)
    k = _split_heads_inv(dot_product_pairwise(T.matmul(src, params.w_k1),
                                              T.matmul(src, params.w_k2)), h)
    v = _split_heads_inv(dot_product_pairwise(T.matmul(src, params.w_v1),
                                              T.matmul(src, params.w_v2)), h)
    out = _attend(q, k, v, 1.0 / np.sqrt(d // h), _as_bias(bias, b, n), prob_mask)
    out = T.matmul(_merge_heads_inv(out), params.w_o)
    return out.reshape(out.shape[1:]) if squeeze else out


def equ_cross_attn(z_equ: Tensor, z_inv: Tensor, params: AttentionParams,
                   bias=None, center: bool = False,
                   prob_mask: Tensor | None = None) -> Tensor:
    z_equ, squeeze = _unbatch_wrap(z_equ, 4)
    z_inv, _ = _unbatch_wrap(z_inv, 3)
    if z_inv.shape[1] != z_equ.shape[1]:
        raise DimensionError("streams disagree on particle count")
    b, n, _, d = z_equ.shape
    h = params.heads
    src = center_channels(z_equ) if center else z_equ
    q = _split_heads_equ(T.matmul(src, params.w_q), h)
    k = _split_heads_equ(scalar_product(T.matmul(src, params.w_k1),
                                        T.matmul(z_inv, params.w_k2)), h)
    v = _split_heads_equ(scalar_product(T.matmul(src, params.w_v1),
                                        T.matmul(z_inv, params.w_v2)), h)
    out = _attend(q, k, v, 1.0 / np.sqrt(3 * (d // h)), _as_bias(bias, b, n), prob_mask)
    out = T.matmul(_merge_heads_equ(out), params.w_o)
    return out.reshape(out.shape[1:]) if squeeze else out
