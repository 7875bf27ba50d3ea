"""Transformer building blocks shared by the policy, connector and mask head."""

from __future__ import annotations

import numpy as np

from .numerics import Tensor, concat, gelu, layer_norm, softmax, swap_last

NEG_INF = -1e9


class ParamStore:
    """Ordered name -> Tensor mapping with seeded initialisers."""

    def __init__(self, rng: np.random.Generator, std: float = 0.02, fan_in: bool = False):
        self.rng = rng
        self.std = std
        # linear weights drawn with std 1/sqrt(fan_in) instead of ``std``
        self.fan_in = fan_in
        self.params: dict[str, Tensor] = {}

    def normal(self, name: str, shape, std: float | None = None) -> Tensor:
        std = self.std if std is None else std
        t = Tensor.param(self.rng.normal(0.0, std, size=shape))
        self.params[name] = t
        return t

    def const(self, name: str, shape, value: float) -> Tensor:
        t = Tensor.param(np.full(shape, value))
        self.params[name] = t
        return t

    def linear(self, prefix: str, fan_in: int, fan_out: int, std: float | None = None) -> None:
        if std is None and self.fan_in:
            std = 1.0 / np.sqrt(fan_in)
        self.normal(prefix + "w", (fan_in, fan_out), std)
        self.const(prefix + "b", (fan_out,), 0.0)

    def norm(self, prefix: str, dim: int) -> None:
        self.const(prefix + "g", (dim,), 1.0)
        self.const(prefix + "b", (dim,), 0.0)

    def attention(self, prefix: str, dim: int) -> None:
        for proj in ("q", "k", "v", "o"):
            self.linear(f"{prefix}{proj}.", dim, dim)

    def block(self, prefix: str, dim: int, mlp_ratio: int = 4) -> None:
        self.norm(prefix + "ln1.", dim)
        self.attention(prefix + "attn.", dim)
        self.norm(prefix + "ln2.", dim)
        self.linear(prefix + "fc1.", dim, mlp_ratio * dim)
        self.linear(prefix + "fc2.", mlp_ratio * dim, dim)


def linear(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return x @ p[prefix + "w"] + p[prefix + "b"]


def norm(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return layer_norm(x, p[prefix + "g"], p[prefix + "b"])


def _heads(x: Tensor, heads: int) -> Tensor:
    b, t, c = x.shape
    return x.reshape(b, t, heads, c // heads).transpose(0, 2, 1, 3)


def _merge(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * d)


def attention(
    xq: Tensor,
    xkv: Tensor,
    p: dict[str, Tensor],
    prefix: str,
    heads: int,
    mask: np.ndarray | None = None,
    cache: dict | None = None,
) -> Tensor:
    """Multi-head attention. ``mask`` is additive, broadcastable to (B, H, Tq, Tk).

    With ``cache`` (inference only) the new keys/values are appended to the
    cached ones and the cache is updated in place.
    """
    q = _heads(linear(xq, p, prefix + "q."), heads)
    k = _heads(linear(xkv, p, prefix + "k."), heads)
    v = _heads(linear(xkv, p, prefix + "v."), heads)
    if cache is not None:
        if "k" in cache:
            k = concat([cache["k"], k], axis=2)
            v = concat([cache["v"], v], axis=2)
        cache["k"], cache["v"] = k.detach(), v.detach()
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ swap_last(k)) * scale
    if mask is not None:
        scores = scores + mask.astype(scores.dtype, copy=False)
    out = softmax(scores, axis=-1) @ v
    return linear(_merge(out), p, prefix + "o.")


def mlp(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return linear(gelu(linear(x, p, prefix + "fc1.")), p, prefix + "fc2.")


def self_block(x, p, prefix, heads, mask=None, cache=None) -> Tensor:
    """Pre-norm self-attention block."""
    h = norm(x, p, prefix + "ln1.")
    x = x + attention(h, h, p, prefix + "attn.", heads, mask, cache)
    return x + mlp(norm(x, p, prefix + "ln2."), p, prefix)


def cross_block(x, ctx, p, prefix, heads) -> Tensor:
    """Pre-norm block where ``x`` attends to ``ctx``; the context is used unnormalised."""
    h = norm(x, p, prefix + "ln1.")
    x = x + attention(h, ctx, p, prefix + "attn.", heads)
    return x + mlp(norm(x, p, prefix + "ln2."), p, prefix)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, H/p * W/p, p*p*3), row-major over patches."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)
