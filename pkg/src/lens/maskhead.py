"""Toy promptable segmenter: patch image encoder, cross-attention mask decoder, dice+focal loss."""

from __future__ import annotations

import numpy as np

from . import nn
from .numerics import Tensor, log_sigmoid, sigmoid

PATCH = 4


class EmptyGroundTruth(ValueError):
    pass


class MaskHead:
    def __init__(self, image_size: int = 32, dim: int = 64, heads: int = 4, enc_depth: int = 2, dec_depth: int = 2, seed: int = 0):
        if image_size % PATCH:
            raise ValueError("image size must be divisible by 4")
        self.image_size = image_size
        self.grid = image_size // PATCH
        self.dim = dim
        self.heads = heads
        self.enc_depth = enc_depth
        self.dec_depth = dec_depth
        rng = np.random.default_rng(seed)
        store = nn.ParamStore(rng)
        store.linear("enc.patch.", PATCH * PATCH * 3, dim)
        store.params["enc.pos"] = Tensor.param(sincos_2d(self.grid, dim))
        for i in range(enc_depth):
            store.block(f"enc.{i}.", dim)
        store.norm("enc.ln_out.", dim)
        for i in range(dec_depth):
            store.block(f"dec.{i}.", dim)
        store.norm("dec.ln_out.", dim)
        store.linear("dec.out.", dim, PATCH * PATCH)
        # most pixels are background; starting there shortens the early plateau
        store.params["dec.out.b"].data[:] = -2.0
        # fixed affine embedding of a normalised box, used only for oracle prompts
        store.normal("oracle.embed", (5, dim), std=1.0)
        self.params = store.params

    def encoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("enc.")}

    def decoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("dec.")}

    def encode_image(self, images: np.ndarray) -> Tensor:
        """(B, H, W, 3) -> (B, H/4 * W/4, D) feature grid."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        b, h, w, _ = images.shape
        if h % PATCH or w % PATCH:
            raise ValueError(f"image {h}x{w} not divisible by {PATCH}")
        if (h, w) != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} images")
        x = nn.linear(Tensor(nn.patchify(images, PATCH)), self.params, "enc.patch.") + self.params["enc.pos"]
        for i in range(self.enc_depth):
            x = nn.self_block(x, self.params, f"enc.{i}.", self.heads)
        return nn.norm(x, self.params, "enc.ln_out.")

    def decode_mask(self, grid: Tensor, prompt: Tensor) -> Tensor:
        """Grid tokens attend to the prompt tokens; each token emits a 4x4 logit patch."""
        if prompt.shape[-1] != grid.shape[-1]:
            raise ValueError(f"prompt dim {prompt.shape[-1]} != grid dim {grid.shape[-1]}")
        if prompt.ndim == 2:
            prompt = prompt.reshape(1, *prompt.shape)
        if prompt.shape[0] != grid.shape[0]:
            if prompt.shape[0] == 1:
                prompt = prompt + np.zeros((grid.shape[0], 1, 1), dtype=prompt.dtype)
            elif grid.shape[0] == 1:
                grid = grid + np.zeros((prompt.shape[0], 1, 1), dtype=grid.dtype)
            else:
                raise ValueError("batch mismatch between grid and prompt")
        x = grid
        for i in range(self.dec_depth):
            x = nn.cross_block(x, prompt, self.params, f"dec.{i}.", self.heads)
        x = nn.norm(x, self.params, "dec.ln_out.")
        patches = nn.linear(x, self.params, "dec.out.")
        b, g = patches.shape[0], self.grid
        return patches.reshape(b, g, g, PATCH, PATCH).transpose(0, 1, 3, 2, 4).reshape(b, g * PATCH, g * PATCH)

    def oracle_prompt(self, boxes: np.ndarray, num_slots: int) -> Tensor:
        """Normalised gt boxes, affinely embedded and replicated over ``num_slots`` prompt tokens."""
        boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float32)) / float(self.image_size)
        feats = np.concatenate([boxes, np.ones((len(boxes), 1), dtype=np.float32)], axis=1)
        emb = Tensor(feats) @ self.params["oracle.embed"].detach()
        return emb.reshape(len(boxes), 1, self.dim) + np.zeros((1, num_slots, 1), dtype=np.float32)


def sincos_2d(grid: int, dim: int) -> np.ndarray:
    """Sine/cosine coordinate features used to initialise the learned grid positions."""
    quarter = dim // 4
    freqs = 1.0 / (grid ** (np.arange(quarter) / quarter))
    ys, xs = np.mgrid[0:grid, 0:grid]
    ax = xs.reshape(-1, 1) * freqs[None] * np.pi / 2
    ay = ys.reshape(-1, 1) * freqs[None] * np.pi / 2
    out = np.concatenate([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)], axis=1)
    return np.pad(out, ((0, 0), (0, dim - out.shape[1])))


def binarize(logits, threshold: float = 0.0) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data > threshold


def seg_loss_per_sample(logits: Tensor, gt: np.ndarray, gamma: float = 2.0, alpha: float = 0.25, smooth: float = 1.0) -> Tensor:
    """Dice (smoothing 1) plus focal loss, each mean-reduced per image; returns shape (B,)."""
    gt = np.asarray(gt, dtype=bool)
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        gt = gt.reshape(1, *gt.shape)
    if logits.shape != gt.shape:
        raise ValueError(f"logits {logits.shape} vs ground truth {gt.shape}")
    if not gt.reshape(len(gt), -1).any(axis=1).all():
        raise EmptyGroundTruth("ground-truth mask has no foreground pixels")
    b = logits.shape[0]
    x = logits.reshape(b, -1)
    g = gt.reshape(b, -1).astype(x.dtype)
    p = sigmoid(x)
    inter = (p * g).sum(axis=1)
    dice = 1.0 - (inter * 2.0 + smooth) / (p.sum(axis=1) + g.sum(axis=1) + smooth)
    # p_t is p on positives and 1 - p on negatives
    sign = 2.0 * g - 1.0
    logpt = log_sigmoid(x * sign)
    pt = sigmoid(x * sign)
    alpha_t = alpha * g + (1.0 - alpha) * (1.0 - g)
    focal = -(((1.0 - pt) ** gamma) * logpt * alpha_t).mean(axis=1)
    return dice + focal


def seg_loss(logits: Tensor, gt: np.ndarray) -> Tensor:
    return seg_loss_per_sample(logits, gt).mean()


def dice_term(logits: Tensor, gt: np.ndarray, smooth: float = 1.0) -> np.ndarray:
    x = logits.data.reshape(len(gt), -1) if logits.ndim == 3 else logits.data.reshape(1, -1)
    g = np.asarray(gt, dtype=np.float64).reshape(x.shape)
    p = 1.0 / (1.0 + np.exp(-x.astype(np.float64)))
    return 1.0 - (2.0 * (p * g).sum(1) + smooth) / (p.sum(1) + g.sum(1) + smooth)
