"""Context queries and the connectors projecting their MLLM states into prompt space."""

from __future__ import annotations

import numpy as np

from . import nn
from .numerics import Tensor, gelu


class ContextModule:
    """Learned query bank Q (M x C) plus a ``vit`` or ``mlp`` connector C -> D_seg."""

    def __init__(
        self,
        num_queries: int = 64,
        dim: int = 64,
        seg_dim: int = 64,
        connector: str = "vit",
        heads: int = 4,
        depth: int = 2,
        seed: int = 0,
    ):
        if num_queries < 1:
            raise ValueError("need at least one context query")
        if connector not in ("vit", "mlp"):
            raise ValueError(f"unknown connector {connector!r}")
        self.num_queries = num_queries
        self.dim = dim
        self.seg_dim = seg_dim
        self.connector = connector
        self.heads = heads
        self.depth = depth
        store = nn.ParamStore(np.random.default_rng(seed), std=0.02)
        store.normal("queries", (num_queries, dim))
        if connector == "vit":
            for i in range(depth):
                store.block(f"vit.{i}.", dim)
            store.norm("vit.ln_out.", dim)
            store.linear("vit.proj.", dim, seg_dim)
        else:
            store.linear("mlp.fc1.", dim, 4 * dim)
            store.linear("mlp.fc2.", 4 * dim, seg_dim)
        self.params = store.params

    @property
    def queries(self) -> Tensor:
        return self.params["queries"]

    def _check(self, qp: Tensor) -> None:
        if qp.shape[-1] != self.dim or qp.ndim not in (2, 3):
            raise ValueError(f"expected (..., M, {self.dim}) context embeddings, got {qp.shape}")

    def connect_vit(self, qp: Tensor) -> Tensor:
        """Shallow transformer over the M query tokens (no positional terms), then C -> D_seg."""
        self._check(qp)
        squeeze = qp.ndim == 2
        x = qp.reshape(1, *qp.shape) if squeeze else qp
        for i in range(self.depth):
            x = nn.self_block(x, self.params, f"vit.{i}.", self.heads)
        out = nn.linear(nn.norm(x, self.params, "vit.ln_out."), self.params, "vit.proj.")
        return out[0] if squeeze else out

    def connect_mlp(self, qp: Tensor) -> Tensor:
        """Per-query two-layer MLP; no mixing across queries."""
        self._check(qp)
        h = gelu(nn.linear(qp, self.params, "mlp.fc1."))
        return nn.linear(h, self.params, "mlp.fc2.")

    def connect(self, qp: Tensor) -> Tensor:
        return self.connect_vit(qp) if self.connector == "vit" else self.connect_mlp(qp)
