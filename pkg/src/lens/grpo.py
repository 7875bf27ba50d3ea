"""Group-relative policy optimisation with the joint segmentation term."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .maskhead import binarize, seg_loss_per_sample
from .numerics import AdamW, Tensor, clip, exp, minimum, no_grad
from .policy import Completion, PolicyModel
from .rewards import RewardBreakdown, parse_completion, unified_reward
from .system import LensSystem, repeat_rows


class IncompleteGroup(ValueError):
    pass


@dataclass(frozen=True)
class RlHyper:
    delta: float = 1e-4
    eps: float = 0.2
    beta: float = 0.04
    alpha: float = 1.0
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    inner_epochs: int = 1
    group_size: int = 8
    temperature: float = 1.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if self.beta < 0 or self.alpha < 0:
            raise ValueError("beta and alpha must be non-negative")
        if len(self.lambdas) != 3:
            raise ValueError("need three reward weights")
        if self.inner_epochs < 1 or self.group_size < 2:
            raise ValueError("need inner_epochs >= 1 and group_size >= 2")
        if self.temperature <= 0:
            raise ValueError("rollouts need a positive temperature")


@dataclass
class RolloutGroup:
    sample_id: int
    completions: list[Completion]
    rewards: list[RewardBreakdown] = field(default_factory=list)
    advantages: np.ndarray | None = None
    old_logprobs: list[np.ndarray] = field(default_factory=list)
    ref_logprobs: list[np.ndarray] = field(default_factory=list)
    mask_logits: np.ndarray | None = None
    seg_losses: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.completions)

    def check(self) -> None:
        g = self.size
        if g < 2:
            raise IncompleteGroup("a group needs at least two completions")
        if self.advantages is None or len(self.advantages) != g:
            raise IncompleteGroup("advantages missing")
        if len(self.old_logprobs) != g or len(self.ref_logprobs) != g:
            raise IncompleteGroup("old/ref log-probabilities missing")
        for c, o, r in zip(self.completions, self.old_logprobs, self.ref_logprobs):
            if not len(c.tokens) == len(o) == len(r):
                raise IncompleteGroup("log-probabilities not aligned with completion tokens")


# -- pure pieces ------------------------------------------------------------------


def compute_advantages(rewards, delta: float = 1e-4) -> np.ndarray:
    """(R - mean) / (population std + delta)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise ValueError("need a group of at least two rewards")
    if not delta > 0:
        raise ValueError("delta must be positive")
    mu = r.mean()
    return (r - mu) / (r.std() + delta)


def kl_k3(logp_ref, logp_policy):
    """Per-token r - ln r - 1 with r = pi_ref / pi_theta; works on floats, arrays or Tensors."""
    if isinstance(logp_policy, Tensor) or isinstance(logp_ref, Tensor):
        d = logp_ref - logp_policy
        if not isinstance(d, Tensor):
            d = Tensor(d)
        return exp(d) - d - 1.0
    d = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_policy, dtype=np.float64)
    out = np.exp(d) - d - 1.0
    return float(out) if out.ndim == 0 else out


def clipped_surrogate(logp_new, logp_old, advantage, eps: float = 0.2):
    """Per-token min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if np.shape(logp_new) != np.shape(logp_old):
        raise ValueError(f"misaligned log-probabilities {np.shape(logp_new)} vs {np.shape(logp_old)}")
    if isinstance(logp_new, Tensor):
        ratio = exp(logp_new - np.asarray(logp_old, dtype=logp_new.dtype))
        return minimum(ratio * advantage, clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)
    ratio = np.exp(np.asarray(logp_new, dtype=np.float64) - np.asarray(logp_old, dtype=np.float64))
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)


def _pad(rows: list[np.ndarray], width: int) -> np.ndarray:
    out = np.zeros((len(rows), width), dtype=np.float32)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def grpo_objective(group: RolloutGroup, hyper: RlHyper, logp_new: Tensor | None = None, valid: np.ndarray | None = None) -> Tensor:
    """J = mean_i [ tokenmean(O_clip) - beta * tokenmean(KL) ], to be maximised.

    ``logp_new`` is a right-padded (G, T) tensor of current-policy log-probs with
    its 0/1 ``valid`` mask; by default the old log-probs stand in (ratio 1).
    """
    group.check()
    lens = np.array([len(c.tokens) for c in group.completions])
    width = int(lens.max())
    if valid is None:
        valid = (np.arange(width)[None, :] < lens[:, None]).astype(np.float32)
    if logp_new is None:
        logp_new = Tensor(_pad(group.old_logprobs, width))
    width = logp_new.shape[1]
    old = _pad(group.old_logprobs, width)
    ref = _pad(group.ref_logprobs, width)
    adv = group.advantages.astype(np.float32)[:, None]
    surr = clipped_surrogate(logp_new, old, adv, hyper.eps)
    kl = kl_k3(ref, logp_new)
    counts = np.maximum(valid.sum(axis=1), 1.0)
    per = ((surr - kl * hyper.beta) * valid).sum(axis=1) / counts
    return per.mean()


def lens_objective(J, seg_losses, alpha: float):
    """Loss to minimise: -J + alpha * mean(seg_losses)."""
    if isinstance(seg_losses, Tensor):
        seg = seg_losses.mean()
    else:
        seg = float(np.mean(seg_losses))
    return -J + seg * alpha


# -- training step ------------------------------------------------------------------


def rollout_rng(seed: int, step: int, sample_id: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, sample_id, index]))


def generate_rollouts(policy: PolicyModel, layout, hyper: RlHyper, seed: int, step: int, sample_id: int, workers: int = 1) -> list[Completion]:
    """G sampled completions; each uses its own child rng so any schedule gives the same result."""

    def one(i: int) -> Completion:
        return policy.generate(layout, hyper.temperature, rng=rollout_rng(seed, step, sample_id, i))

    if workers <= 1:
        return [one(i) for i in range(hyper.group_size)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(hyper.group_size)))


@dataclass
class RlState:
    system: LensSystem
    ref_policy: PolicyModel
    optimizer: AdamW
    seed: int = 42


def rl_trainable(system: LensSystem) -> dict[str, Tensor]:
    """Everything except the mask-head image encoder (and the fixed oracle embedding)."""
    return {
        k: v
        for k, v in system.named_params().items()
        if not (k.startswith("mask.enc.") or k.startswith("mask.oracle."))
    }


def rl_step(samples, state: RlState, hyper: RlHyper, step: int, lr: float, workers: int = 1) -> tuple[dict, list[RolloutGroup]]:
    """Roll out, score, and apply one AdamW update of the joint objective."""
    system = state.system
    policy = system.policy
    G = hyper.group_size
    layouts = [policy.layout(s.image(), s.expression) for s in samples]
    groups = [
        RolloutGroup(s.id, generate_rollouts(policy, lay, hyper, state.seed, step, s.id, workers))
        for s, lay in zip(samples, layouts)
    ]
    all_layouts = [lay for lay in layouts for _ in range(G)]
    all_tokens = [c.tokens for g in groups for c in g.completions]
    batch = policy.make_batch(all_layouts, all_tokens)
    grid = system.encode_images(np.stack([s.image() for s in samples]))
    grid = repeat_rows(grid, [G] * len(samples)).detach()
    gt = np.stack([s.gt_mask for s in samples for _ in range(G)])
    with no_grad():
        h_ref, _ = state.ref_policy.forward(batch)
        ref_lp, _ = state.ref_policy.completion_logprobs(batch, h_ref)
    ref_lp = ref_lp.data

    old_lp = None
    metrics: dict = {}
    for epoch in range(hyper.inner_epochs):
        state.optimizer.zero_grad()
        h, logits = system.forward(batch, grid)
        lp, valid = policy.completion_logprobs(batch, h)
        seg = seg_loss_per_sample(logits, gt)
        if epoch == 0:
            old_lp = lp.data.copy()
            masks = binarize(logits)
            for gi, (g, s) in enumerate(zip(groups, samples)):
                rows = range(gi * G, (gi + 1) * G)
                for r, c in zip(rows, g.completions):
                    n = len(c.tokens)
                    g.old_logprobs.append(old_lp[r, :n].copy())
                    g.ref_logprobs.append(ref_lp[r, :n].copy())
                    parsed = parse_completion(c.text, s.scene.width, s.scene.height)
                    g.rewards.append(unified_reward(parsed, parsed.box, masks[r], s.gt_box, s.gt_mask, hyper.lambdas))
                g.advantages = compute_advantages([rb.r_unified for rb in g.rewards], hyper.delta)
                g.mask_logits = logits.data[gi * G : (gi + 1) * G].copy()
                g.seg_losses = seg.data[gi * G : (gi + 1) * G].astype(np.float64)
        J = None
        for gi, g in enumerate(groups):
            rows = slice(gi * G, (gi + 1) * G)
            Jg = grpo_objective(g, hyper, lp[rows], valid[rows])
            J = Jg if J is None else J + Jg
        J = J * (1.0 / len(groups))
        loss = lens_objective(J, seg, hyper.alpha)
        loss.backward()
        ratio = np.exp(lp.data - old_lp)
        kl = kl_k3(ref_lp, lp.data) * valid
        clipped = ((ratio < 1 - hyper.eps) | (ratio > 1 + hyper.eps)) & (valid > 0)
        counts = np.maximum(valid.sum(axis=1), 1.0)
        if epoch == 0:
            rewards = [rb for g in groups for rb in g.rewards]
            metrics = {
                "step": int(step),
                "stage": "rl",
                "mean_reward": float(np.mean([r.r_unified for r in rewards])),
                "r_format": float(np.mean([r.r_format for r in rewards])),
                "r_box": float(np.mean([r.r_box for r in rewards])),
                "r_seg": float(np.mean([r.r_seg for r in rewards])),
                "kl": float(np.mean(kl.sum(axis=1) / counts)),
                "seg_loss": float(seg.data.mean()),
                "clip_frac": 0.0,
                "lr": float(lr),
            }
        # clipping can only trigger once the policy has moved away from pi_old
        metrics["clip_frac"] = float(clipped.sum() / max(valid.sum(), 1.0))
        state.optimizer.step(lr)
    return metrics, groups


def append_metrics(path, metrics: dict) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(metrics, sort_keys=False) + "\n")
