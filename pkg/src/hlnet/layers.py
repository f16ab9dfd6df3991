"""Attention building blocks: linear, feed-forward, layer norm, (masked)
multi-head attention, and the residual ``x + LN(f(x))`` composition."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import tensor as T
from .exceptions import DegenerateMaskError, EmptyKeyError, ShapeError
from .tensor import Parameter, Tensor


class Module:
    """Minimal parameter container; submodules and Parameters are found by attribute."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield f"{prefix}{key}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for idx, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{idx}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


def _uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class LinearLayer(Module):
    """FC(x) = W x + b with W stored as [out, in]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str = "fc"):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(_uniform(rng, (out_dim, in_dim), in_dim, out_dim), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim), f"{name}.bias")

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, name: str = "ln"):
        self.eps = eps
        self.gain = Parameter(np.ones(dim), f"{name}.gain")
        self.shift = Parameter(np.zeros(dim), f"{name}.shift")

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gain, self.shift, self.eps)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, name: str = "ffn"):
        self.fc1 = LinearLayer(dim, hidden, rng, f"{name}.fc1")
        self.fc2 = LinearLayer(hidden, dim, rng, f"{name}.fc2")

    def __call__(self, x) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class AttentionBlock(Module):
    """Multi-head attention with fused per-head Q/K/V projections.

    Queries come from ``query_dim`` features, keys/values from ``key_dim``
    features; the output is projected back to ``query_dim`` so the block can
    sit inside a residual connection.
    """

    def __init__(
        self,
        query_dim: int,
        heads: int,
        rng: np.random.Generator,
        key_dim: int | None = None,
        model_dim: int | None = None,
        name: str = "attn",
    ):
        key_dim = query_dim if key_dim is None else key_dim
        model_dim = query_dim if model_dim is None else model_dim
        if heads < 1 or model_dim % heads:
            raise ShapeError(f"model dim {model_dim} not divisible by {heads} heads")
        self.heads = heads
        self.d_k = model_dim // heads
        self.q = LinearLayer(query_dim, model_dim, rng, f"{name}.q")
        self.k = LinearLayer(key_dim, model_dim, rng, f"{name}.k")
        self.v = LinearLayer(key_dim, model_dim, rng, f"{name}.v")
        self.out = LinearLayer(model_dim, query_dim, rng, f"{name}.out")

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return T.transpose(T.reshape(x, (b, n, self.heads, self.d_k)), (0, 2, 1, 3))


def _batched(x) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"attention inputs must be 2-D or 3-D, got {x.shape}")
    return x, False


def attention(
    block: AttentionBlock,
    x1,
    x2,
    x3,
    mask: np.ndarray | None = None,
    mask_mode: str = "additive",
    valid: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Softmax(Q(x1) K(x2)^T / sqrt(d_k)) V(x3), heads concatenated then projected.

    Inputs are [m, d] / [n, d] or batched [B, m, d] / [B, n, d]. ``mask``
    ([m, n] or [B, m, n], truthy = allowed) follows ``mask_mode``:
    ``additive`` pushes disallowed scores to -1e9 so their weights are exactly
    zero; ``multiplicative`` multiplies the raw scores by the mask. ``valid``
    is always applied additively and marks columns that exist at all (used
    for packing several scenes or ragged key sets into one call).
    """
    q_in, squeeze = _batched(x1)
    k_in, _ = _batched(x2)
    v_in, _ = _batched(x3)
    if k_in.shape[1] != v_in.shape[1]:
        raise ShapeError("keys and values must have the same number of rows")
    if k_in.shape[1] == 0:
        raise EmptyKeyError("attention over an empty key set")
    bsz, m, n = q_in.shape[0], q_in.shape[1], k_in.shape[1]

    allowed = np.ones((1, m, n), dtype=bool)
    if valid is not None:
        allowed = allowed & _as_mask(valid, bsz, m, n)
    if mask is not None and mask_mode == "additive":
        allowed = allowed & _as_mask(mask, bsz, m, n)
    if not allowed.any(axis=-1).all():
        raise DegenerateMaskError("a query row has no allowed key")

    q = block._split(block.q(q_in))
    k = block._split(block.k(k_in))
    v = block._split(block.v(v_in))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(block.d_k))
    if mask is not None and mask_mode == "multiplicative":
        scores = T.mul(scores, _as_mask(mask, bsz, m, n)[:, None].astype(np.float64))
    elif mask is not None and mask_mode != "additive":
        raise ValueError(f"unknown mask_mode {mask_mode!r}")
    full = allowed.all()
    weights = T.softmax_rows(scores, None if full else allowed[:, None])
    ctx = T.matmul(weights, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (bsz, m, block.heads * block.d_k))
    out = block.out(ctx)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    if return_weights:
        return out, weights.data
    return out


def _as_mask(mask, bsz: int, m: int, n: int) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if mask.ndim == 2:
        mask = mask[None]
    if mask.shape[1:] != (m, n) or mask.shape[0] not in (1, bsz):
        raise ShapeError(f"mask shape {mask.shape} does not fit scores ({bsz}, {m}, {n})")
    return mask


def masked_attention(block: AttentionBlock, y, z, mask, mask_mode: str = "additive", **kw):
    """Objects attend only to the relationship rows their mask row allows."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any(axis=-1).all():
        raise DegenerateMaskError("fully masked row in relationship mask")
    return attention(block, y, z, z, mask=mask, mask_mode=mask_mode, **kw)


def residual_ln(x, sublayer: Callable[[Tensor], Tensor], norm: LayerNorm) -> Tensor:
    """x + LN(sublayer(x)); the sublayer output is normalised, not the sum."""
    x = T.as_tensor(x)
    fx = sublayer(x)
    if fx.shape != x.shape:
        raise ShapeError(f"sublayer changed shape {x.shape} -> {fx.shape}")
    return T.add(x, norm(fx))


class TransformerLayer(Module):
    def __init__(self, dim: int, heads: int, ffn_hidden: int, rng: np.random.Generator, name="layer"):
        self.attn = AttentionBlock(dim, heads, rng, name=f"{name}.attn")
        self.ln_attn = LayerNorm(dim, name=f"{name}.ln_attn")
        self.ffn = FeedForward(dim, ffn_hidden, rng, name=f"{name}.ffn")
        self.ln_ffn = LayerNorm(dim, name=f"{name}.ln_ffn")

    def __call__(self, x, valid: np.ndarray | None = None) -> Tensor:
        x = residual_ln(x, lambda h: attention(self.attn, h, h, h, valid=valid), self.ln_attn)
        return residual_ln(x, self.ffn, self.ln_ffn)
