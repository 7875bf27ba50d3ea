"""Referring-expression templates, a brute-force resolver, and reasoning targets.

Four reference styles are produced:

* attribute     ``segment the red disc``
* ordinal       ``segment the second rectangle from the left``
* superlative   ``segment the largest blue rectangle`` / ``segment the smallest disc``
* clock         ``segment the disc in the 3 o'clock position``

``resolve`` re-parses an expression and enumerates every shape satisfying it,
so uniqueness is always checked independently of how the expression was built.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .scene import COLORS, KINDS, Scene, ShapeSpec, clock_hour, rasterize_mask

ORDINALS = ("first", "second", "third", "fourth", "fifth", "sixth")
DIRECTIONS = ("left", "right", "top", "bottom")
SUPERLATIVES = ("largest", "smallest")
STYLES = ("attribute", "ordinal", "superlative", "clock")
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")


class NoUniqueReferent(ValueError):
    """No shape in the scene can be uniquely referred to by the grammar."""


def _area(shape: ShapeSpec, scene: Scene) -> int:
    return int(rasterize_mask(shape, scene.width, scene.height).sum())


def _sort_key(shape: ShapeSpec, direction: str) -> float:
    cx, cy = shape.center
    return {"left": cx, "right": -cx, "top": cy, "bottom": -cy}[direction]


def _hour_tokens(hour: int) -> list[str]:
    return list(str(hour))


def resolve(expression: Sequence[str], scene: Scene) -> list[int]:
    """Indices of every shape matching ``expression`` (empty when ill-posed)."""
    toks = list(expression)
    if toks[:2] != ["segment", "the"]:
        raise ValueError(f"expression must start with 'segment the': {toks}")
    body = toks[2:]
    shapes = scene.shapes
    if not body:
        return []

    if body[0] in ORDINALS:
        # <ordinal> <kind> from the <direction>
        if len(body) != 5 or body[2:4] != ["from", "the"] or body[4] not in DIRECTIONS:
            return []
        k, kind, direction = ORDINALS.index(body[0]), body[1], body[4]
        members = [i for i, s in enumerate(shapes) if s.kind == kind]
        keys = [_sort_key(shapes[i], direction) for i in members]
        if len(set(keys)) != len(keys) or k >= len(members):
            return []
        order = [members[j] for j in np.argsort(keys, kind="stable")]
        return [order[k]]

    if body[0] in SUPERLATIVES:
        # <superlative> [<color>] <kind>
        if len(body) == 2:
            color, kind = None, body[1]
        elif len(body) == 3:
            color, kind = body[1], body[2]
        else:
            return []
        members = [i for i, s in enumerate(shapes) if s.kind == kind and (color is None or s.color == color)]
        if len(members) < 2:
            return []
        areas = [_area(shapes[i], scene) for i in members]
        best = max(areas) if body[0] == "largest" else min(areas)
        return [i for i, a in zip(members, areas) if a == best]

    if body[0] in COLORS:
        # <color> <kind>
        if len(body) != 2:
            return []
        return [i for i, s in enumerate(shapes) if s.color == body[0] and s.kind == body[1]]

    if body[0] in KINDS:
        # <kind> in the <hour> o'clock position
        if len(body) < 6 or body[1:3] != ["in", "the"] or body[-2:] != ["o'clock", "position"]:
            return []
        digits = body[3:-2]
        if not digits or not all(d.isdigit() for d in digits):
            return []
        hour = int("".join(digits))
        return [
            i
            for i, s in enumerate(shapes)
            if s.kind == body[0] and clock_hour(s, scene.width, scene.height) == hour
        ]
    return []


def _shares_attribute(scene: Scene, idx: int) -> bool:
    t = scene.shapes[idx]
    return any(j != idx and (s.color == t.color or s.kind == t.kind) for j, s in enumerate(scene.shapes))


def candidate_expressions(scene: Scene) -> dict[str, list[tuple[int, list[str]]]]:
    """All (target, expression) pairs per style that resolve to exactly that target."""
    out: dict[str, list[tuple[int, list[str]]]] = {s: [] for s in STYLES}
    shapes = scene.shapes
    for i, s in enumerate(shapes):
        if not _shares_attribute(scene, i):
            continue
        same_kind = [j for j, o in enumerate(shapes) if o.kind == s.kind]
        bodies: dict[str, list[list[str]]] = {
            "attribute": [[s.color, s.kind]],
            "ordinal": [],
            "superlative": [],
            "clock": [],
        }
        if len(same_kind) >= 2:
            for d in DIRECTIONS:
                keys = sorted(_sort_key(shapes[j], d) for j in same_kind)
                rank = keys.index(_sort_key(s, d))
                bodies["ordinal"].append([ORDINALS[rank], s.kind, "from", "the", d])
            for sup in SUPERLATIVES:
                bodies["superlative"].append([sup, s.kind])
            hour = clock_hour(s, scene.width, scene.height)
            if hour is not None:
                bodies["clock"].append([s.kind, "in", "the", *_hour_tokens(hour), "o'clock", "position"])
        same_ck = [j for j, o in enumerate(shapes) if o.kind == s.kind and o.color == s.color]
        if len(same_ck) >= 2:
            for sup in SUPERLATIVES:
                bodies["superlative"].append([sup, s.color, s.kind])
        for style, options in bodies.items():
            for body in options:
                expr = ["segment", "the", *body]
                if resolve(expr, scene) == [i]:
                    out[style].append((i, expr))
    return out


def location_words(shape: ShapeSpec, width: int, height: int) -> list[str]:
    cx, cy = shape.center
    row = ROWS[min(int(3 * cy / height), 2)]
    col = COLS[min(int(3 * cx / width), 2)]
    return [row, col]


def reasoning_tokens(style: str, expression: Sequence[str], scene: Scene, target: int) -> list[str]:
    """Templated ``<thinking>`` block naming what singles out the target."""
    s = scene.shapes[target]
    body = list(expression[2:])
    where = ["at", *location_words(s, scene.width, scene.height)]
    if style == "attribute":
        mid = [s.color, s.kind, "is", "unique"]
    elif style == "ordinal":
        mid = ["sort", s.kind, "from", body[4], ",", body[0], "is", s.color]
    elif style == "superlative":
        mid = ["compare", *body[1:], "size", ",", body[0], "is", s.color]
    elif style == "clock":
        hour = body[3:-2]
        mid = [s.kind, "at", *hour, "o'clock", "is", s.color]
    else:
        raise ValueError(f"unknown style {style!r}")
    return ["<thinking>", *mid, ",", *where, "</thinking>"]


def style_of(expression: Sequence[str]) -> str:
    head = expression[2]
    if head in ORDINALS:
        return "ordinal"
    if head in SUPERLATIVES:
        return "superlative"
    if head in COLORS:
        return "attribute"
    return "clock"
