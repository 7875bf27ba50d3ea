"""Completion parsing, the format/box/mask rewards, and gIoU/cIoU metrics."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .synthworld.rle import RLEError, rle_decode, rle_encode

THINK_OPEN, THINK_CLOSE = "<thinking>", "</thinking>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
END_MARK = "<end>"

_TAG_RE = re.compile(r"</?[A-Za-z_]+>")
_BOX_RE = re.compile(r"^\s*\[\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\]\s*$")
_LOOSE_BOX_RE = re.compile(r"\[\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\]")


@dataclass(frozen=True)
class ParsedAnswer:
    wellformed: bool
    cot_text: str = ""
    box: tuple[int, int, int, int] | None = None


@dataclass(frozen=True)
class RewardBreakdown:
    r_format: float
    r_box: float
    r_seg: float
    r_unified: float
    lambdas: tuple[float, float, float]


def _clamp_box(vals, width: int, height: int):
    x1, y1, x2, y2 = (int(v) for v in vals)
    x1, x2 = min(max(x1, 0), width), min(max(x2, 0), width)
    y1, y2 = min(max(y1, 0), height), min(max(y2, 0), height)
    if x1 >= x2 or y1 >= y2:
        return None
    return (x1, y1, x2, y2)


def parse_completion(text: str, width: int = 32, height: int = 32) -> ParsedAnswer:
    """Strict single-pass check of ``<thinking>..</thinking><answer>[x1,y1,x2,y2]</answer>``.

    Whitespace between blocks is allowed, as is one trailing ``<end>``.  A
    degenerate or unparseable box leaves the completion well-formed with no box.
    Malformed completions still get a best-effort cot/box for diagnostics.
    """
    tags = [(m.group(0), m.start(), m.end()) for m in _TAG_RE.finditer(text)]
    names = [t[0] for t in tags]
    expected = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE]
    ok = names in (expected, expected + [END_MARK])
    if ok:
        gaps = [text[: tags[0][1]], text[tags[1][2] : tags[2][1]], text[tags[3][2] :]]
        if len(tags) == 5:
            gaps[2] = text[tags[3][2] : tags[4][1]] + text[tags[4][2] :]
        ok = all(not g.strip() for g in gaps)
    if ok:
        cot = text[tags[0][2] : tags[1][1]].strip()
        m = _BOX_RE.match(text[tags[2][2] : tags[3][1]])
        box = _clamp_box(m.groups(), width, height) if m else None
        return ParsedAnswer(True, cot, box)
    # diagnostics only
    cot = ""
    m = re.search(r"<thinking>(.*?)</thinking>", text, re.S)
    if m:
        cot = m.group(1).strip()
    mb = _LOOSE_BOX_RE.search(text)
    box = _clamp_box(mb.groups(), width, height) if mb else None
    return ParsedAnswer(False, cot, box)


def reward_format(parsed: ParsedAnswer) -> float:
    return 1.0 if parsed.wellformed else 0.0


def _check_box(box, what: str) -> None:
    if len(box) != 4 or not (box[0] < box[2] and box[1] < box[3]):
        raise ValueError(f"invalid {what} box {box!r}")


def box_iou(pred, gt) -> float:
    """IoU of pixel-corner boxes (area = (x2-x1)(y2-y1)); an absent prediction scores 0."""
    _check_box(gt, "ground-truth")
    if pred is None:
        return 0.0
    _check_box(pred, "predicted")
    iw = min(pred[2], gt[2]) - max(pred[0], gt[0])
    ih = min(pred[3], gt[3]) - max(pred[1], gt[1])
    inter = max(iw, 0) * max(ih, 0)
    union = (pred[2] - pred[0]) * (pred[3] - pred[1]) + (gt[2] - gt[0]) * (gt[3] - gt[1]) - inter
    return inter / union


def mask_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int]:
    """(intersection, union) pixel counts."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return int(np.count_nonzero(pred & gt)), int(np.count_nonzero(pred | gt))


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter, union = mask_counts(pred, gt)
    if not np.any(gt):
        raise ValueError("ground-truth mask is empty")
    return inter / union


def unified_reward(
    parsed: ParsedAnswer,
    pred_box,
    pred_mask: np.ndarray,
    gt_box,
    gt_mask: np.ndarray,
    lambdas=(1.0, 1.0, 1.0),
) -> RewardBreakdown:
    """lambda-weighted sum of format, box IoU and mask IoU.

    The box reward only counts boxes from well-formed answers; the mask reward
    is scored for every rollout.
    """
    l1, l2, l3 = (float(v) for v in lambdas)
    rf = reward_format(parsed)
    rb = box_iou(pred_box, gt_box) if parsed.wellformed else 0.0
    rs = mask_iou(pred_mask, gt_mask)
    return RewardBreakdown(rf, rb, rs, l1 * rf + l2 * rb + l3 * rs, (l1, l2, l3))


def giou_metric(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("gIoU of an empty list")
    return float(np.mean([mask_iou(p, g) for p, g in pairs]))


def ciou_metric(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cIoU of an empty list")
    inter = union = 0
    for p, g in pairs:
        i, u = mask_counts(p, g)
        inter += i
        union += u
    return inter / union if union else 0.0


# -- prediction files ---------------------------------------------------------


class PredictionFormatError(ValueError):
    pass


def write_predictions(path, rows) -> None:
    """rows: iterables of (id, box or None, bool mask)."""
    with open(path, "w", encoding="utf-8") as f:
        for sid, box, mask in rows:
            rec = {
                "id": int(sid),
                "pred_box": None if box is None else [int(v) for v in box],
                "pred_mask_rle": rle_encode(mask),
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_predictions(path, width: int, height: int) -> dict[int, tuple]:
    out: dict[int, tuple] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sid = int(rec["id"])
            box = rec["pred_box"]
            box = None if box is None else tuple(int(v) for v in box)
            mask = rle_decode(rec["pred_mask_rle"], width, height)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, RLEError) as exc:
            raise PredictionFormatError(f"{path}: line {lineno}: {exc}") from exc
        if sid in out:
            raise PredictionFormatError(f"{path}: line {lineno}: duplicate id {sid}")
        out[sid] = (box, mask)
    return out


def score_predictions(predictions: dict[int, tuple], samples) -> dict:
    """Offline gIoU/cIoU/box-IoU of a prediction map against dataset samples."""
    pairs, boxes = [], []
    for s in samples:
        if s.id not in predictions:
            raise PredictionFormatError(f"no prediction for sample {s.id}")
        box, mask = predictions[s.id]
        if box is not None and not (box[0] < box[2] and box[1] < box[3]):
            box = None
        pairs.append((mask, s.gt_mask))
        boxes.append(box_iou(box, s.gt_box))
    return {
        "n": len(pairs),
        "giou": giou_metric(pairs),
        "ciou": ciou_metric(pairs),
        "box_iou": float(np.mean(boxes)),
    }
