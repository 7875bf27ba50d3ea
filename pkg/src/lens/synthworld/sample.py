from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grammar import STYLES, NoUniqueReferent, candidate_expressions, reasoning_tokens, resolve, style_of
from .rle import RLEError, rle_decode, rle_encode
from .scene import PlacementError, Scene, WorldConfig, generate_scene, rasterize_mask, render, tight_box


class DatasetFormatError(ValueError):
    pass


@dataclass(eq=False)
class ReferringSample:
    id: int
    seed: int
    scene: Scene
    expression: tuple[str, ...]
    target_index: int
    gt_box: tuple[int, int, int, int]
    gt_mask: np.ndarray
    cot_target: tuple[str, ...]

    @property
    def style(self) -> str:
        return style_of(self.expression)

    def image(self) -> np.ndarray:
        return render(self.scene)

    def answer_tokens(self) -> list[str]:
        return box_tokens(self.gt_box)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReferringSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.seed == other.seed
            and self.scene == other.scene
            and self.expression == other.expression
            and self.target_index == other.target_index
            and self.gt_box == other.gt_box
            and self.cot_target == other.cot_target
            and self.gt_mask.shape == other.gt_mask.shape
            and bool(np.array_equal(self.gt_mask, other.gt_mask))
        )


def box_tokens(box) -> list[str]:
    """``<answer>[x1,y1,x2,y2]</answer>`` as tokens, digits split one per token."""
    out = ["<answer>", "["]
    for j, v in enumerate(box):
        if j:
            out.append(",")
        out.extend(str(int(v)))
    return out + ["]", "</answer>"]


def make_sample(scene: Scene, rng: np.random.Generator, sample_id: int = 0) -> ReferringSample:
    cands = candidate_expressions(scene)
    styles = [s for s in STYLES if cands[s]]
    if not styles:
        raise NoUniqueReferent(f"scene seed {scene.seed}: no uniquely identifiable shape")
    style = styles[rng.integers(len(styles))]
    target, expr = cands[style][rng.integers(len(cands[style]))]
    if resolve(expr, scene) != [target]:
        raise AssertionError("candidate failed uniqueness replay")
    mask = rasterize_mask(scene.shapes[target], scene.width, scene.height)
    return ReferringSample(
        id=sample_id,
        seed=scene.seed,
        scene=scene,
        expression=tuple(expr),
        target_index=target,
        gt_box=tight_box(mask),
        gt_mask=mask,
        cot_target=tuple(reasoning_tokens(style, expr, scene, target)),
    )


def _sample_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x5A])


def _derive_seed(*parts: int) -> int:
    state = np.random.SeedSequence(list(parts)).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def sample_from_seed(seed: int, config: WorldConfig, sample_id: int = 0) -> ReferringSample:
    return make_sample(generate_scene(seed, config), _sample_rng(seed), sample_id)


def build_split(name: str, size: int, base_seed: int, config: WorldConfig | None = None) -> list[ReferringSample]:
    """``size`` samples whose seeds depend only on (base_seed, name, id)."""
    cfg = config or WorldConfig()
    code = zlib.crc32(name.encode())
    out = []
    for i in range(size):
        for attempt in range(1000):
            seed = _derive_seed(base_seed, code, i, attempt)
            try:
                out.append(sample_from_seed(seed, cfg, i))
                break
            except (PlacementError, NoUniqueReferent):
                continue
        else:
            raise RuntimeError(f"could not build sample {i} of split {name}")
    return out


def sample_to_record(s: ReferringSample) -> dict:
    return {
        "id": s.id,
        "seed": s.seed,
        "width": s.scene.width,
        "height": s.scene.height,
        "expression": list(s.expression),
        "cot_target": list(s.cot_target),
        "gt_box": list(s.gt_box),
        "gt_mask_rle": rle_encode(s.gt_mask),
    }


def record_to_sample(rec: dict, config: WorldConfig) -> ReferringSample:
    if (rec["width"], rec["height"]) != (config.width, config.height):
        raise DatasetFormatError("image size differs from world config")
    scene = generate_scene(int(rec["seed"]), config)
    expr = tuple(rec["expression"])
    hits = resolve(expr, scene)
    if len(hits) != 1:
        raise DatasetFormatError(f"expression resolves to {len(hits)} shapes after regeneration")
    mask = rle_decode(rec["gt_mask_rle"], rec["width"], rec["height"])
    return ReferringSample(
        id=int(rec["id"]),
        seed=int(rec["seed"]),
        scene=scene,
        expression=expr,
        target_index=hits[0],
        gt_box=tuple(int(v) for v in rec["gt_box"]),
        gt_mask=mask,
        cot_target=tuple(rec["cot_target"]),
    )


def export_dataset(samples: list[ReferringSample], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(sample_to_record(s), separators=(",", ":")) + "\n")


def import_dataset(path, config: WorldConfig | None = None) -> list[ReferringSample]:
    cfg = config or WorldConfig()
    out = []
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        try:
            rec = json.loads(line)
            out.append(record_to_sample(rec, cfg))
        except (json.JSONDecodeError, KeyError, TypeError, RLEError, DatasetFormatError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
    return out
