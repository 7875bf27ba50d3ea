"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

The training criteria share one end-to-end run of the default toy config
(seed 42), so this module takes most of an hour on a single core.
"""

import copy
import csv
import time

import numpy as np
import pytest

from lens import nn
from lens.bridge import ContextModule
from lens.grpo import (
    RlHyper,
    RolloutGroup,
    clipped_surrogate,
    compute_advantages,
    grpo_objective,
    kl_k3,
    lens_objective,
    rl_step,
    RlState,
    rl_trainable,
)
from lens.maskhead import MaskHead, seg_loss, seg_loss_per_sample
from lens.numerics import AdamW, Tensor, grad_check
from lens.pipeline import RunConfig, cmd_ablate, cmd_align, cmd_bootstrap, cmd_eval, cmd_rl, load_checkpoint
from lens.pipeline.stages import completion_ids
from lens.policy import Completion, PolicyConfig, PolicyModel
from lens.rewards import box_iou, ciou_metric, giou_metric, mask_iou, parse_completion, reward_format
from lens.synthworld import build_split
from lens.system import LensSystem
from oracles import FORMAT_GOLDEN, advantages_ref, box_iou_pixels, ciou_loop, giou_loop, mask_iou_loop

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def emit(name: str, ok: bool, detail: str = ""):
        with capsys.disabled():
            print(f"\n[acceptance] {'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
        assert ok, f"{name}: {detail}"

    return emit


# -- exact math ------------------------------------------------------------------------


def test_grpo_math_exactness(verdict):
    a2 = compute_advantages([0, 2], 1e-4)
    a4 = compute_advantages([0, 1, 2, 3], 1e-4)
    ok = np.allclose(a2, advantages_ref([0, 2]), atol=1e-6, rtol=0)
    ok &= np.allclose(a4, advantages_ref([0, 1, 2, 3]), atol=1e-6, rtol=0)
    kl = kl_k3(np.log(2.0), 0.0)
    ok &= abs(kl - 0.306853) <= 1e-6
    ln = np.log(1.5)
    surr = [clipped_surrogate(ln, 0.0, 1.0, 0.2), clipped_surrogate(ln, 0.0, -1.0, 0.2)]
    ok &= np.isclose(surr[0], 1.2, rtol=0, atol=1e-12) and np.isclose(surr[1], -1.5, rtol=0, atol=1e-12)
    verdict("grpo-math", bool(ok), f"A2={a2.round(6).tolist()} A4={a4.round(6).tolist()} kl={kl:.6f} surr={[float(v) for v in surr]}")


def test_advantage_properties(verdict):
    rng = np.random.default_rng(0)
    worst_mean = worst_shift = 0.0
    zero_ok = True
    for i in range(1000):
        g = [2, 4, 8, 16][i % 4]
        r = rng.normal(size=g) * rng.uniform(0.01, 3)
        a = compute_advantages(r)
        worst_mean = max(worst_mean, abs(a.mean()))
        worst_shift = max(worst_shift, np.abs(compute_advantages(r + rng.normal() * 5) - a).max())
        zero_ok &= not compute_advantages(np.full(g, r[0])).any()
    ok = worst_mean <= 1e-6 and worst_shift <= 1e-9 and zero_ok
    verdict("advantage-properties", ok, f"max|mean|={worst_mean:.2e} max shift diff={worst_shift:.2e} all-equal->0 {zero_ok}")


def test_kl_non_negative(verdict):
    rng = np.random.default_rng(1)
    ref = rng.normal(-3, 2, 100_000)
    pol = ref + rng.normal(0, 1, 100_000) * (rng.random(100_000) < 0.9)
    kl = kl_k3(ref, pol)
    zero = kl == 0
    ratio = np.exp(ref - pol)
    ok = bool((kl >= 0).all() and (np.abs(ratio[zero] - 1) < 1e-9).all() and zero.any())
    verdict("kl-non-negative", ok, f"min={kl.min():.3e} zeros={int(zero.sum())}")


# -- gradients ----------------------------------------------------------------------------


def _tiny_system(connector="vit"):
    policy = PolicyModel(config=PolicyConfig(dim=16, layers=1, heads=2, max_new=40), seed=0)
    ctx = ContextModule(num_queries=3, dim=16, seg_dim=16, connector=connector, heads=2, depth=1, seed=1)
    head = MaskHead(dim=16, heads=2, enc_depth=1, dec_depth=1, seed=2)
    return LensSystem(policy, ctx, head)


def test_gradient_correctness(verdict):
    rng = np.random.default_rng(2)
    results = {}

    # one policy transformer block
    pstore = nn.ParamStore(np.random.default_rng(3), std=0.3)
    pstore.block("b.", 16)
    x = Tensor(rng.normal(size=(2, 5, 16)))
    mask = np.where(np.tril(np.ones((5, 5), bool)), 0.0, nn.NEG_INF)[None, None]
    w = rng.normal(size=(2, 5, 16))
    results["policy block"] = grad_check(lambda: (nn.self_block(x, pstore.params, "b.", 2, mask) * w).sum(), pstore.params)

    # whole policy forward on one toy sample
    system = _tiny_system()
    s = build_split("acc", 1, 0)[0]
    lay = system.policy.layout(s.image(), s.expression)
    toks = completion_ids(system.policy, s)
    # every activation is float64 here, so a small step keeps truncation error out
    results["policy forward"] = grad_check(
        lambda: system.policy.forward_logprobs(lay, toks).sum(), system.policy.params, h=1e-5, max_entries=6
    )

    for kind in ("vit", "mlp"):
        ctx = ContextModule(num_queries=3, dim=16, seg_dim=8, connector=kind, heads=2, depth=2, seed=4)
        qp = Tensor(rng.normal(size=(3, 16)))
        wc = rng.normal(size=(3, 8))
        results[f"{kind} connector"] = grad_check(lambda: (ctx.connect(qp) * wc).sum(), ctx.params, max_entries=12)

    head = system.maskhead
    grid = head.encode_image(s.image()).detach()
    prompt = Tensor.param(rng.normal(size=(3, 16)))
    dec = {**head.decoder_params(), "prompt": prompt}
    results["mask decoder"] = grad_check(lambda: seg_loss(head.decode_mask(grid, prompt), s.gt_mask[None]), dec, max_entries=8)

    logits = Tensor.param(rng.normal(size=(2, 6, 6)))
    gt = rng.random((2, 6, 6)) < 0.4
    gt[:, 0, 0] = True
    results["seg_loss"] = grad_check(lambda: seg_loss(logits, gt), {"logits": logits})

    # the joint objective on a G=2 micro-group, gradients into every trainable group
    hyper = RlHyper(group_size=2)
    comps = [Completion(toks, np.zeros(len(toks), np.float32)), Completion(toks[:-3] + [toks[-1]], np.zeros(len(toks) - 2, np.float32))]
    batch = system.policy.make_batch([lay, lay], [c.tokens for c in comps])
    grid2 = system.encode_images(np.stack([s.image(), s.image()]))
    gt2 = np.stack([s.gt_mask, s.gt_mask])
    with_ref = copy.deepcopy(system.policy)
    h_ref, _ = with_ref.forward(batch)
    ref_lp = with_ref.completion_logprobs(batch, h_ref)[0].data
    h0, _ = system.policy.forward(batch)
    old_lp = system.policy.completion_logprobs(batch, h0)[0].data - 0.05
    group = RolloutGroup(
        0,
        comps,
        advantages=np.array([1.0, -1.0]),
        old_logprobs=[old_lp[i, : len(c.tokens)] for i, c in enumerate(comps)],
        ref_logprobs=[ref_lp[i, : len(c.tokens)] for i, c in enumerate(comps)],
    )

    def joint():
        h, lg = system.forward(batch, grid2)
        lp, valid = system.policy.completion_logprobs(batch, h)
        J = grpo_objective(group, hyper, lp, valid)
        return lens_objective(J, seg_loss_per_sample(lg, gt2), hyper.alpha)

    params = {k: v for k, v in rl_trainable(system).items()}
    results["lens objective"] = grad_check(joint, params, max_entries=2)

    worst = {k: r.max_error for k, r in results.items()}
    ok = all(r.passed for r in results.values())
    verdict("gradient-correctness", ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()))


# -- rewards ----------------------------------------------------------------------------


def test_reward_metric_oracles(verdict):
    rng = np.random.default_rng(5)
    box_ok = mask_ok = True
    for _ in range(1000):
        a = tuple(int(v) for v in sorted(rng.choice(33, 2, replace=False)))
        b = tuple(int(v) for v in sorted(rng.choice(33, 2, replace=False)))
        c = tuple(int(v) for v in sorted(rng.choice(33, 2, replace=False)))
        d = tuple(int(v) for v in sorted(rng.choice(33, 2, replace=False)))
        p, g = (a[0], b[0], a[1], b[1]), (c[0], d[0], c[1], d[1])
        box_ok &= box_iou(p, g) == box_iou_pixels(p, g)
        gm = rng.random((8, 8)) < rng.random()
        gm[rng.integers(8), rng.integers(8)] = True
        pm = rng.random((8, 8)) < rng.random()
        mask_ok &= mask_iou(pm, gm) == mask_iou_loop(pm, gm)
    pairs = []
    for _ in range(30):
        gm = rng.random((8, 8)) < 0.3
        gm[0, 0] = True
        pairs.append((rng.random((8, 8)) < 0.3, gm))
    agg_ok = ciou_metric(pairs) == ciou_loop(pairs) and abs(giou_metric(pairs) - giou_loop(pairs)) < 1e-12

    def pair(i, u):
        p = np.zeros((1, u), bool)
        g = np.zeros((1, u), bool)
        p[0, :i] = True
        g[0, :u] = True
        return p, g

    ex = [pair(2, 4), pair(3, 3)]
    worked = giou_metric(ex) == 0.75 and ciou_metric(ex) == 5 / 7
    ok = bool(box_ok and mask_ok and agg_ok and worked)
    verdict("reward-metric-oracles", ok, f"box={box_ok} mask={mask_ok} accum={agg_ok} worked={worked}")


def test_format_reward_golden(verdict):
    wrong = [t for t, fmt, box in FORMAT_GOLDEN if reward_format(parse_completion(t)) != fmt or (fmt and parse_completion(t).box != box)]
    verdict("format-golden-table", not wrong and len(FORMAT_GOLDEN) == 20, f"{20 - len(wrong)}/20 cases")


# -- end-to-end training --------------------------------------------------------------------


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    out = tmp_path_factory.mktemp("e2e")
    cfg = RunConfig(seed=42, out_dir=str(out))
    t0 = time.time()
    boot = cmd_bootstrap(cfg)
    t_boot = time.time()
    boot_rep = cmd_eval(cfg, boot, "train")
    align = cmd_align(cfg, boot)
    t_align = time.time()
    align_rep = cmd_eval(cfg, align, "heldout")
    rl = cmd_rl(cfg, align)
    t_rl = time.time()
    rl_rep = cmd_eval(cfg, rl, "heldout")
    timings = {"bootstrap": t_boot - t0, "align": t_align - t_boot, "rl": t_rl - t_align, "total": time.time() - t0}
    return {"cfg": cfg, "out": out, "ckpt": {"bootstrap": boot, "align": align, "rl": rl},
            "report": {"bootstrap": boot_rep, "align": align_rep, "rl": rl_rep}, "time": timings}


@pytest.mark.slow
def test_stage_contracts(e2e, verdict):
    ck = {k: load_checkpoint(p).tensors for k, p in e2e["ckpt"].items()}
    align_frozen = all(np.array_equal(ck["align"][k], v) for k, v in ck["bootstrap"].items() if k.startswith(("policy.", "mask.")))
    enc_frozen = all(np.array_equal(ck["rl"][k], v) for k, v in ck["align"].items() if k.startswith("mask.enc."))
    moved = any(not np.array_equal(ck["rl"][k], v) for k, v in ck["align"].items() if k.startswith(("policy.", "mask.dec.")))
    verdict("stage-contracts", align_frozen and enc_frozen and moved,
            f"align keeps policy+mask={align_frozen} rl keeps encoder={enc_frozen} rl trains others={moved}")


@pytest.mark.slow
def test_end_to_end_training(e2e, verdict):
    b, a, r = (e2e["report"][k] for k in ("bootstrap", "align", "rl"))
    t = e2e["time"]
    checks = {
        "parse>=0.8": b["parse_rate"] >= 0.8,
        "oracle>=0.85": b["oracle_iou"] >= 0.85,
        "align giou>=0.6": a["giou"] >= 0.6,
        "rl gain>=0.1": r["r_unified"] - a["r_unified"] >= 0.1,
        "ciou up": r["ciou"] > a["ciou"],
        "<=15min": t["total"] <= 900,
    }
    detail = (
        f"parse={b['parse_rate']:.3f} oracle={b['oracle_iou']:.3f} align_giou={a['giou']:.3f} "
        f"r_unified {a['r_unified']:.3f}->{r['r_unified']:.3f} ciou {a['ciou']:.3f}->{r['ciou']:.3f} "
        f"time={t['total']:.0f}s failed={[k for k, v in checks.items() if not v]}"
    )
    verdict("end-to-end", all(checks.values()), detail)


@pytest.mark.slow
def test_connector_ablation(e2e, verdict, tmp_path):
    t0 = time.time()
    path = cmd_ablate(e2e["cfg"], e2e["ckpt"]["bootstrap"], "connector", tmp_path)
    elapsed = time.time() - t0
    rows = list(csv.DictReader(path.open()))
    by = {(r["arm"], int(r["seed"])): float(r["ciou"]) for r in rows}
    seeds = sorted({int(r["seed"]) for r in rows})
    wins = sum(by[("vit", s)] >= by[("mlp", s)] for s in seeds)
    detail = " ".join(f"s{s}: vit {by[('vit', s)]:.3f} mlp {by[('mlp', s)]:.3f}" for s in seeds) + f" time={elapsed:.0f}s"
    verdict("connector-ablation", wins >= 2 and len(seeds) == 3 and elapsed <= 1200, detail)


@pytest.mark.slow
def test_determinism(verdict, tmp_path):
    # reduced budget so every stage can be rerun from scratch
    def cfg_in(d, workers=1):
        cfg = RunConfig(seed=42, out_dir=str(d))
        cfg.data.train_size = 128
        cfg.data.heldout_size = 32
        cfg.bootstrap.policy_steps = 20
        cfg.bootstrap.mask_steps = 20
        cfg.align.epochs = 1
        cfg.rl.epochs = 1
        cfg.rl.samples_per_epoch = 8
        cfg.rl.batch = 16
        cfg.rl.workers = workers
        return cfg

    runs = []
    for name, workers in (("a", 1), ("b", 1), ("c", 3)):
        cfg = cfg_in(tmp_path / name, workers)
        boot = cmd_bootstrap(cfg)
        align = cmd_align(cfg, boot)
        rl = cmd_rl(cfg, align)
        runs.append({p.name: p.read_bytes() for p in (tmp_path / name).iterdir() if p.suffix in (".ckpt", ".jsonl")})
    same = runs[0] == runs[1]
    parallel = runs[0] == runs[2]
    verdict("determinism", same and parallel and len(runs[0]) >= 6, f"rerun identical={same} parallel==sequential={parallel} files={sorted(runs[0])}")


@pytest.mark.slow
def test_query_count_harness(e2e, verdict, tmp_path):
    cfg = copy.deepcopy(e2e["cfg"])
    # the harness only has to run every arm; a shorter alignment keeps it affordable
    cfg.align.epochs = 2
    path = cmd_ablate(cfg, e2e["ckpt"]["bootstrap"], "queries", tmp_path)
    rows = list(csv.DictReader(path.open()))
    arms = [r["arm"] for r in rows]
    ok = arms == ["M=1", "M=16", "M=32", "M=64", "M=128"] and all(np.isfinite(float(r["ciou"])) for r in rows)
    verdict("query-count-harness", ok, " ".join(f"{r['arm']}:{float(r['ciou']):.3f}" for r in rows))
