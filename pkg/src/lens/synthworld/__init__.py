"""Seeded synthetic referring-segmentation scenes."""

from .grammar import STYLES, NoUniqueReferent, candidate_expressions, reasoning_tokens, resolve, style_of
from .rle import RLEError, rle_decode, rle_encode
from .sample import (
    DatasetFormatError,
    ReferringSample,
    box_tokens,
    build_split,
    export_dataset,
    import_dataset,
    make_sample,
    sample_from_seed,
)
from .scene import (
    COLORS,
    KINDS,
    PlacementError,
    Scene,
    ShapeSpec,
    WorldConfig,
    clock_hour,
    generate_scene,
    overlap_fraction,
    rasterize_mask,
    render,
    tight_box,
)
