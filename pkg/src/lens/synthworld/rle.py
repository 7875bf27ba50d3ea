"""Uncompressed run-length codec for binary masks.

Runs alternate starting with the number of 0-bits (possibly zero) over the
row-major flattening, and always sum to width * height.
"""

from __future__ import annotations

import numpy as np


class RLEError(ValueError):
    pass


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(runs: list[int], width: int, height: int) -> np.ndarray:
    total = width * height
    if any(int(r) < 0 for r in runs):
        raise RLEError("negative run length")
    if sum(int(r) for r in runs) != total:
        raise RLEError(f"runs sum to {sum(runs)}, expected {total}")
    values = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(values, np.asarray(runs, dtype=np.int64))
    return flat.reshape(height, width)
