"""The assembled model: policy, context module and mask head."""

from __future__ import annotations

import hashlib
from contextlib import contextmanager

import numpy as np

from .bridge import ContextModule
from .maskhead import MaskHead
from .numerics import Tensor, concat, no_grad
from .policy import PolicyModel, PromptLayout, SeqBatch

GROUPS = ("policy", "context", "mask")


class LensSystem:
    def __init__(self, policy: PolicyModel, context: ContextModule, maskhead: MaskHead):
        if context.dim != policy.config.dim:
            raise ValueError("context queries must match the policy width")
        if context.seg_dim != maskhead.dim:
            raise ValueError("connector output must match the mask head width")
        self.policy = policy
        self.context = context
        self.maskhead = maskhead

    def group(self, name: str) -> dict[str, Tensor]:
        return {"policy": self.policy.params, "context": self.context.params, "mask": self.maskhead.params}[name]

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for g in GROUPS:
            for k, v in self.group(g).items():
                out[f"{g}.{k}"] = v
        return out

    def param_hash(self, prefixes) -> str:
        """sha256 over the named parameters starting with any of ``prefixes``."""
        h = hashlib.sha256()
        for name, t in sorted(self.named_params().items()):
            if any(name.startswith(p) for p in prefixes):
                h.update(name.encode())
                h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    # -- segmentation path ---------------------------------------------------
    def encode_images(self, images: np.ndarray) -> Tensor:
        """Frozen-style image features (no graph is recorded)."""
        with no_grad():
            return self.maskhead.encode_image(images).detach()

    def prompt_from_hidden(self, q_hidden: Tensor) -> Tensor:
        return self.context.connect(q_hidden)

    def forward(self, batch: SeqBatch, grid: Tensor) -> tuple[Tensor, Tensor]:
        """One policy pass with the context queries appended.

        Returns (sequence hidden states, mask logits from each row's own Q_seg).
        """
        h, qh = self.policy.forward(batch, self.context.queries)
        logits = self.maskhead.decode_mask(grid, self.prompt_from_hidden(qh))
        return h, logits

    def cached_query_hidden(self, caches: list[list[dict]], lengths: np.ndarray) -> Tensor:
        """Query hidden states for a minibatch of per-sample prefix caches (frozen policy)."""
        L = max(c[0]["k"].shape[2] for c in caches)
        merged = []
        for layer in range(len(caches[0])):
            layer_cache = {}
            for key in ("k", "v"):
                parts = []
                for c in caches:
                    arr = c[layer][key].data
                    pad = L - arr.shape[2]
                    if pad:
                        arr = np.pad(arr, ((0, 0), (0, 0), (0, pad), (0, 0)))
                    parts.append(arr)
                layer_cache[key] = Tensor(np.concatenate(parts, axis=0))
            merged.append(layer_cache)
        return self.policy.query_hidden(merged, np.asarray(lengths), self.context.queries)

    def sample_caches(self, layouts: list[PromptLayout], completions: list[list[int]]) -> list[list[dict]]:
        """Per-sample prefix caches (batch dimension 1) for the frozen-policy path."""
        batch = self.policy.make_batch(layouts, completions)
        caches = self.policy.prefix_cache(batch)
        out = []
        for b in range(batch.size):
            n = int(batch.lengths[b])
            out.append([{k: Tensor(c[k].data[b : b + 1, :, :n].copy()) for k in ("k", "v")} for c in caches])
        return out

    def predict_masks(self, layouts: list[PromptLayout], completions: list[list[int]], grid: Tensor | None = None) -> np.ndarray:
        """Mask logits for finished completions, no graph."""
        with no_grad():
            batch = self.policy.make_batch(layouts, completions)
            if grid is None:
                grid = self.maskhead.encode_image(batch.images)
            _, logits = self.forward(batch, grid)
        return logits.data


def repeat_rows(t: Tensor, counts) -> Tensor:
    """Repeat row i of ``t`` counts[i] times along axis 0, keeping the graph."""
    return concat([t[i : i + 1] for i, c in enumerate(counts) for _ in range(c)], axis=0)


@contextmanager
def frozen(params):
    """Temporarily stop recording gradients for ``params``."""
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag
