"""Training stages: bootstrap, alignment, RL, evaluation and ablations."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import math
import zlib
from functools import lru_cache
from pathlib import Path

import numpy as np

from ..bridge import ContextModule
from ..grpo import RlHyper, RlState, append_metrics, rl_step, rl_trainable
from ..maskhead import MaskHead, binarize, seg_loss
from ..numerics import AdamW, LrSchedule, Tensor, lr_at, no_grad
from ..policy import PolicyConfig, PolicyModel
from ..rewards import box_iou, ciou_metric, giou_metric, mask_iou, parse_completion, write_predictions
from ..synthworld import WorldConfig, build_split, import_dataset
from ..system import LensSystem, frozen
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    optimizer_entries,
    optimizer_from_entries,
    save_checkpoint,
)
from .config import RunConfig


class FreezeViolation(RuntimeError):
    pass


# -- shared helpers -------------------------------------------------------------------


@lru_cache(maxsize=4)
def _cached_split(name: str, size: int, seed: int, world_json: str):
    return tuple(build_split(name, size, seed, WorldConfig(**json.loads(world_json))))


def load_split(cfg: RunConfig, split: str):
    world_json = json.dumps(dataclasses.asdict(cfg.world), sort_keys=True)
    if split == "train":
        return list(_cached_split("train", cfg.data.train_size, cfg.data.seed, world_json))
    if split == "heldout":
        return list(_cached_split("heldout", cfg.data.heldout_size, cfg.data.seed, world_json))
    path = Path(split)
    if path.is_file():
        return import_dataset(path, cfg.world)
    raise FileNotFoundError(f"unknown split {split!r} (expected train, heldout or a dataset file)")


def build_system(cfg: RunConfig, seed: int | None = None) -> LensSystem:
    seed = cfg.seed if seed is None else seed
    m = cfg.model
    if cfg.world.width != cfg.world.height:
        raise ValueError("the toy models expect square images")
    pcfg = PolicyConfig(dim=m.dim, layers=m.layers, heads=m.heads, image_size=cfg.world.width, max_new=m.max_new)
    policy = PolicyModel(config=pcfg, seed=seed)
    context = ContextModule(m.num_queries, m.dim, m.seg_dim, m.connector, m.heads, m.connector_depth, seed=seed + 1)
    mask = MaskHead(cfg.world.width, m.seg_dim, m.heads, m.mask_enc_depth, m.mask_dec_depth, seed=seed + 2)
    return LensSystem(policy, context, mask)


def load_params(system: LensSystem, tensors: dict[str, np.ndarray], groups) -> None:
    named = system.named_params()
    for name, t in named.items():
        if not name.startswith(tuple(g + "." for g in groups)):
            continue
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if tensors[name].shape != t.shape:
            raise CheckpointError(f"shape mismatch for {name}: {tensors[name].shape} vs {t.shape}")
        t.data = tensors[name].astype(np.float32).copy()


def param_entries(system: LensSystem, groups) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in system.named_params().items() if k.startswith(tuple(g + "." for g in groups))}


def stage_lr(schedule: LrSchedule, step: int) -> float:
    """lr for optimizer step ``step`` in [0, total); never exactly zero."""
    if step < schedule.warmup_steps:
        return lr_at(schedule, step + 1)
    return lr_at(schedule, step)


def completion_ids(policy: PolicyModel, sample) -> list[int]:
    return policy.vocab.encode(list(sample.cot_target) + sample.answer_tokens() + ["<end>"])


def greedy_completions(policy: PolicyModel, samples, chunk: int = 64) -> list[list[int]]:
    out = []
    for i in range(0, len(samples), chunk):
        part = samples[i : i + chunk]
        layouts = [policy.layout(s.image(), s.expression) for s in part]
        out.extend(c.tokens for c in policy.generate_batch(layouts, 0.0))
    return out


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]))


class _Log:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("", encoding="utf-8")

    def __call__(self, rec: dict) -> None:
        if self.path is not None:
            append_metrics(self.path, rec)


def _out(cfg: RunConfig, out_dir) -> Path:
    p = Path(out_dir if out_dir is not None else cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- stage 0 ----------------------------------------------------------------------------


def cmd_bootstrap(cfg: RunConfig, out_dir=None, progress=None) -> Path:
    """Supervised warm start of the policy and the mask head (oracle box prompts)."""
    out = _out(cfg, out_dir)
    log = _Log(out / "bootstrap_metrics.jsonl")
    train = load_split(cfg, "train")
    system = build_system(cfg)
    policy, mask = system.policy, system.maskhead
    rng = _stage_rng(cfg.seed, "bootstrap")
    b = cfg.bootstrap

    layouts = [policy.layout(s.image(), s.expression) for s in train]
    targets = [completion_ids(policy, s) for s in train]
    opt_p = AdamW(policy.params)
    sched = LrSchedule(b.scheduler, b.policy_lr, b.policy_steps, min(b.warmup_steps, b.policy_steps))
    for step in range(b.policy_steps):
        idx = rng.choice(len(train), size=min(b.policy_batch, len(train)), replace=False)
        batch = policy.make_batch([layouts[i] for i in idx], [targets[i] for i in idx])
        opt_p.zero_grad()
        loss = policy.bootstrap_loss(batch)
        loss.backward()
        lr = stage_lr(sched, step)
        opt_p.step(lr)
        log({"step": step, "stage": "bootstrap", "part": "policy", "loss": loss.item(), "lr": lr})
        if progress and step % 50 == 0:
            progress(f"bootstrap policy step {step} loss {loss.item():.4f}")

    images = np.stack([s.image() for s in train])
    gt = np.stack([s.gt_mask for s in train])
    boxes = np.array([s.gt_box for s in train], dtype=np.float32)
    mask_params = {k: v for k, v in mask.params.items() if not k.startswith("oracle.")}
    opt_m = AdamW(mask_params)
    sched = LrSchedule(b.scheduler, b.mask_lr, b.mask_steps, min(b.warmup_steps, b.mask_steps))
    for step in range(b.mask_steps):
        idx = rng.choice(len(train), size=min(b.mask_batch, len(train)), replace=False)
        opt_m.zero_grad()
        prompt = mask.oracle_prompt(boxes[idx], cfg.model.num_queries)
        loss = seg_loss(mask.decode_mask(mask.encode_image(images[idx]), prompt), gt[idx])
        loss.backward()
        lr = stage_lr(sched, step)
        opt_m.step(lr)
        log({"step": step, "stage": "bootstrap", "part": "mask", "loss": loss.item(), "lr": lr})
        if progress and step % 100 == 0:
            progress(f"bootstrap mask step {step} loss {loss.item():.4f}")

    tensors = param_entries(system, ("policy", "mask"))
    tensors.update(optimizer_entries("policy", opt_p.state))
    tensors.update(optimizer_entries("mask", opt_m.state))
    ck = Checkpoint("bootstrap", tensors, cfg.hash(), _rng_state(rng), b.policy_steps + b.mask_steps)
    path = out / "bootstrap.ckpt"
    save_checkpoint(ck, path)
    return path


# -- stage 1 ----------------------------------------------------------------------------

_GREEDY_MEMO: dict = {}


def _memo_greedy(key, policy: PolicyModel, samples) -> list[list[int]]:
    if key not in _GREEDY_MEMO:
        _GREEDY_MEMO.clear()
        _GREEDY_MEMO[key] = greedy_completions(policy, samples)
    return _GREEDY_MEMO[key]


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_align(cfg: RunConfig, ckpt_path, out_dir=None, override: bool = False, progress=None, debug: bool = False) -> Path:
    """Train only the context queries and connector against the segmentation loss."""
    out = _out(cfg, out_dir)
    ck = load_checkpoint(ckpt_path, cfg.hash(), override)
    ck.require_stage("bootstrap")
    system = build_system(cfg)
    load_params(system, ck.tensors, ("policy", "mask"))
    policy, mask, context = system.policy, system.maskhead, system.context
    a = cfg.align
    log = _Log(out / "align_metrics.jsonl")
    rng = _stage_rng(cfg.seed, "align")
    train = load_split(cfg, "train")

    frozen_prefixes = ("policy.", "mask.")
    before = system.param_hash(frozen_prefixes)
    key = (_file_digest(ckpt_path), cfg.data.seed, cfg.data.train_size, cfg.model.max_new)
    completions = _memo_greedy(key, policy, train)
    layouts = [policy.layout(s.image(), s.expression) for s in train]
    caches = []
    for i in range(0, len(train), 64):
        caches.extend(system.sample_caches(layouts[i : i + 64], completions[i : i + 64]))
    lengths = np.array([len(l) + len(c) for l, c in zip(layouts, completions)])
    grid = system.encode_images(np.stack([s.image() for s in train])).data
    gt = np.stack([s.gt_mask for s in train])

    n_epoch = a.samples_per_epoch or len(train)
    n_epoch = min(n_epoch, len(train))
    per_epoch = math.ceil(n_epoch / a.batch)
    total = a.epochs * per_epoch
    sched = LrSchedule(a.scheduler, a.lr, total, min(a.warmup_steps, total))
    opt = AdamW(context.params)
    step = 0
    frozen_params = list(policy.params.values()) + list(mask.params.values())
    with frozen(frozen_params):
        for epoch in range(a.epochs):
            order = rng.permutation(len(train))[:n_epoch]
            for j in range(per_epoch):
                idx = order[j * a.batch : (j + 1) * a.batch]
                opt.zero_grad()
                qh = system.cached_query_hidden([caches[i] for i in idx], lengths[idx])
                logits = mask.decode_mask(Tensor(grid[idx]), context.connect(qh))
                loss = seg_loss(logits, gt[idx])
                loss.backward()
                lr = stage_lr(sched, step)
                opt.step(lr)
                log({"step": step, "stage": "align", "loss": loss.item(), "lr": lr})
                if progress and step % 50 == 0:
                    progress(f"align step {step}/{total} loss {loss.item():.4f}")
                if debug and system.param_hash(frozen_prefixes) != before:
                    raise FreezeViolation(f"frozen parameters changed at align step {step}")
                step += 1
    if system.param_hash(frozen_prefixes) != before:
        raise FreezeViolation("policy or mask-head parameters changed during alignment")
    tensors = param_entries(system, ("policy", "context", "mask"))
    tensors.update(optimizer_entries("align", opt.state))
    save_checkpoint(Checkpoint("align", tensors, cfg.hash(), _rng_state(rng), step), out / "align.ckpt")
    return out / "align.ckpt"


# -- stage 2 ----------------------------------------------------------------------------


def rl_hyper(cfg: RunConfig) -> RlHyper:
    r = cfg.rl
    return RlHyper(
        delta=r.delta,
        eps=r.eps,
        beta=r.beta,
        alpha=r.alpha,
        lambdas=tuple(float(v) for v in r.lambdas),
        inner_epochs=r.inner_epochs,
        group_size=r.group_size,
        temperature=r.temperature,
    )


def cmd_rl(cfg: RunConfig, ckpt_path, out_dir=None, override: bool = False, progress=None, debug: bool = False) -> Path:
    """GRPO on the unified reward plus the segmentation loss; image encoder frozen."""
    out = _out(cfg, out_dir)
    ck = load_checkpoint(ckpt_path, cfg.hash(), override)
    ck.require_stage("align")
    system = build_system(cfg)
    load_params(system, ck.tensors, ("policy", "context", "mask"))
    ref = copy.deepcopy(system.policy)
    for p in ref.params.values():
        p.requires_grad = False
    r = cfg.rl
    hyper = rl_hyper(cfg)
    trainable = rl_trainable(system)
    state = RlState(system, ref, AdamW(trainable), seed=cfg.seed)
    log = _Log(out / "rl_metrics.jsonl")
    rng = _stage_rng(cfg.seed, "rl")
    train = load_split(cfg, "train")

    enc_prefixes = ("mask.enc.",)
    enc_before = system.param_hash(enc_prefixes)
    ref_before = hashlib.sha256(b"".join(p.data.tobytes() for p in ref.params.values())).hexdigest()
    prompts = r.batch // r.group_size
    n_epoch = min(r.samples_per_epoch or len(train), len(train))
    per_epoch = math.ceil(n_epoch / prompts)
    total = r.epochs * per_epoch
    sched = LrSchedule(r.scheduler, r.lr, total, 0)
    step = 0
    frozen_params = [v for k, v in system.named_params().items() if k not in trainable]
    with frozen(frozen_params):
        for epoch in range(r.epochs):
            order = rng.permutation(len(train))[:n_epoch]
            for j in range(per_epoch):
                batch = [train[i] for i in order[j * prompts : (j + 1) * prompts]]
                lr = stage_lr(sched, step)
                metrics, _ = rl_step(batch, state, hyper, step, lr, workers=r.workers)
                log(metrics)
                if progress and step % 20 == 0:
                    progress(f"rl step {step}/{total} reward {metrics['mean_reward']:.3f}")
                if debug and system.param_hash(enc_prefixes) != enc_before:
                    raise FreezeViolation(f"image encoder changed at rl step {step}")
                step += 1
    if system.param_hash(enc_prefixes) != enc_before:
        raise FreezeViolation("image-encoder parameters changed during RL")
    ref_after = hashlib.sha256(b"".join(p.data.tobytes() for p in ref.params.values())).hexdigest()
    if ref_after != ref_before:
        raise FreezeViolation("reference policy changed during RL")
    tensors = param_entries(system, ("policy", "context", "mask"))
    tensors.update(optimizer_entries("rl", state.optimizer.state))
    save_checkpoint(Checkpoint("rl", tensors, cfg.hash(), _rng_state(rng), step), out / "rl.ckpt")
    return out / "rl.ckpt"


# -- evaluation ---------------------------------------------------------------------------


def system_from_checkpoint(cfg: RunConfig, ck: Checkpoint) -> LensSystem:
    system = build_system(cfg)
    groups = ("policy", "mask") if ck.stage == "bootstrap" else ("policy", "context", "mask")
    load_params(system, ck.tensors, groups)
    return system


def evaluate(cfg: RunConfig, system: LensSystem, samples, with_context: bool = True) -> tuple[dict, list]:
    """Greedy decoding, rewards and mask metrics. Returns (report, prediction rows)."""
    if not samples:
        raise ValueError("empty split")
    policy, mask = system.policy, system.maskhead
    completions = greedy_completions(policy, samples)
    lam = [float(v) for v in cfg.rl.lambdas]
    fmt, boxr, parsed_ok, rows = [], [], [], []
    pairs, oracle_ious = [], []
    for i in range(0, len(samples), 64):
        part = samples[i : i + 64]
        comps = completions[i : i + 64]
        images = np.stack([s.image() for s in part])
        with no_grad():
            grid = mask.encode_image(images)
            oracle = mask.decode_mask(grid, mask.oracle_prompt(np.array([s.gt_box for s in part]), cfg.model.num_queries))
        o_masks = binarize(oracle)
        oracle_ious.extend(mask_iou(m, s.gt_mask) for m, s in zip(o_masks, part))
        if with_context:
            layouts = [policy.layout(s.image(), s.expression) for s in part]
            pred = binarize(system.predict_masks(layouts, comps, grid))
        else:
            pred = o_masks
        for s, c, m in zip(part, comps, pred):
            parsed = parse_completion(policy.vocab.detokenize(c), s.scene.width, s.scene.height)
            fmt.append(1.0 if parsed.wellformed else 0.0)
            parsed_ok.append(1.0 if parsed.wellformed and parsed.box is not None else 0.0)
            boxr.append(box_iou(parsed.box, s.gt_box) if parsed.wellformed else 0.0)
            pairs.append((m, s.gt_mask))
            rows.append((s.id, parsed.box, m))
    report = {
        "n": len(samples),
        "parse_rate": float(np.mean(parsed_ok)),
        "r_format": float(np.mean(fmt)),
        "r_box": float(np.mean(boxr)),
        "oracle_iou": float(np.mean(oracle_ious)),
    }
    if with_context:
        seg = [mask_iou(p, g) for p, g in pairs]
        report["giou"] = giou_metric(pairs)
        report["ciou"] = ciou_metric(pairs)
        report["r_seg"] = report["giou"]
        report["r_unified"] = float(np.mean([lam[0] * f + lam[1] * b + lam[2] * q for f, b, q in zip(fmt, boxr, seg)]))
    else:
        report["giou"] = report["ciou"] = report["r_seg"] = report["r_unified"] = None
    return report, rows


def _split_name(split: str) -> str:
    return split if split in ("train", "heldout") else Path(split).stem


def cmd_eval(cfg: RunConfig, ckpt_path, split: str = "heldout", out_dir=None, override: bool = False) -> dict:
    """Greedy evaluation; writes the report JSON and prediction JSONL.

    A bootstrap checkpoint has no context module, so its masks come from oracle
    box prompts and gIoU/cIoU are not reported.
    """
    out = _out(cfg, out_dir)
    ck = load_checkpoint(ckpt_path, cfg.hash(), override)
    samples = load_split(cfg, split)
    if split == "train":
        samples = samples[: cfg.data.train_eval_size]
    system = system_from_checkpoint(cfg, ck)
    report, rows = evaluate(cfg, system, samples, with_context=ck.stage != "bootstrap")
    report = {"stage": ck.stage, "split": _split_name(split), **report}
    name = f"{ck.stage}_{_split_name(split)}"
    write_predictions(out / f"predictions_{name}.jsonl", rows)
    (out / f"eval_{name}.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report


# -- ablations ------------------------------------------------------------------------------

EXPERIMENTS = ("queries", "connector", "rewards")
QUERY_ARMS = (1, 16, 32, 64, 128)


def _variant(cfg: RunConfig, **changes) -> RunConfig:
    new = copy.deepcopy(cfg)
    for dotted, value in changes.items():
        section, _, field_name = dotted.partition("__")
        if field_name:
            setattr(getattr(new, section), field_name, value)
        else:
            setattr(new, section, value)
    new.validate()
    return new


def cmd_ablate(cfg: RunConfig, ckpt_path, experiment: str, out_dir=None, seeds=None, progress=None) -> Path:
    """Comparison table (arm, seed, ciou, giou) on the heldout split.

    ``ckpt_path`` is a bootstrap checkpoint; every arm aligns from it (and the
    reward arms then run RL) under the same budget.
    """
    if experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    out = _out(cfg, out_dir)
    load_checkpoint(ckpt_path, cfg.hash(), override=True).require_stage("bootstrap")
    heldout = load_split(cfg, "heldout")
    rows = []

    def score(run_cfg, ck_path):
        ck = load_checkpoint(ck_path)
        report, _ = evaluate(run_cfg, system_from_checkpoint(run_cfg, ck), heldout)
        return report

    if experiment == "queries":
        seed = cfg.seed if not seeds else seeds[0]
        for m in QUERY_ARMS:
            run = _variant(cfg, seed=seed, model__num_queries=m)
            arm_dir = out / f"queries_M{m}"
            ck = cmd_align(run, ckpt_path, arm_dir, override=True)
            rep = score(run, ck)
            rows.append({"arm": f"M={m}", "seed": seed, "ciou": rep["ciou"], "giou": rep["giou"]})
            if progress:
                progress(f"queries M={m}: cIoU {rep['ciou']:.4f}")
    elif experiment == "connector":
        seeds = list(seeds or (cfg.seed, cfg.seed + 1, cfg.seed + 2))
        for seed in seeds:
            for conn in ("mlp", "vit"):
                run = _variant(cfg, seed=seed, model__connector=conn)
                ck = cmd_align(run, ckpt_path, out / f"connector_{conn}_s{seed}", override=True)
                rep = score(run, ck)
                rows.append({"arm": conn, "seed": seed, "ciou": rep["ciou"], "giou": rep["giou"]})
                if progress:
                    progress(f"connector {conn} seed {seed}: cIoU {rep['ciou']:.4f}")
    else:
        seed = cfg.seed if not seeds else seeds[0]
        base = _variant(cfg, seed=seed)
        align_ck = cmd_align(base, ckpt_path, out / "rewards_align", override=True)
        for lam in ((1.0, 1.0, 0.0), (1.0, 1.0, 1.0)):
            run = _variant(base, rl__lambdas=list(lam))
            ck = cmd_rl(run, align_ck, out / f"rewards_{'_'.join(str(int(v)) for v in lam)}", override=True)
            rep = score(run, ck)
            rows.append({"arm": "lambda=" + ",".join(str(int(v)) for v in lam), "seed": seed, "ciou": rep["ciou"], "giou": rep["giou"]})
            if progress:
                progress(f"rewards {lam}: cIoU {rep['ciou']:.4f}")
    path = out / f"ablate_{experiment}.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["arm", "seed", "ciou", "giou"])
        w.writeheader()
        for row in rows:
            w.writerow({**row, "ciou": f"{row['ciou']:.6f}", "giou": f"{row['giou']:.6f}"})
    return path
