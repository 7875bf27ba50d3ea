"""Toy vision-language reasoning policy.

A small pre-norm decoder-only transformer. The prompt is
``[system tokens | instruction | image patch tokens | <sep>]``; the completion is
``<thinking> ... </thinking><answer>[x1,y1,x2,y2]</answer><end>``. Context
queries can be appended after the completion: they all share the position id
``len(sequence)``, attend to every real token and to each other, and are never
attended to by the sequence, so the completion log-probabilities and the query
hidden states come out of a single pass.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .numerics import Tensor, concat, embedding, log_softmax, no_grad
from .synthworld.grammar import COLS, DIRECTIONS, ORDINALS, ROWS, SUPERLATIVES
from .synthworld.scene import COLORS, KINDS

SPECIALS = ["<pad>", "<bos>", "<end>", "<img>", "<sep>"]
TAGS = ["<thinking>", "</thinking>", "<answer>", "</answer>"]
PUNCT = ["[", "]", ","]
DIGITS = [str(d) for d in range(10)]
WORDS = [
    "segment", "the", "from", "in", "o'clock", "position",
    "is", "unique", "sort", "compare", "size", "at",
    "think", "then", "answer",
]
SYSTEM_PROMPT = ("<bos>", "think", "then", "answer")

PAD, BOS, END, IMG, SEP = range(5)


def default_tokens() -> list[str]:
    seen: list[str] = []
    groups = [SPECIALS, TAGS, PUNCT, DIGITS, list(COLORS), list(KINDS), list(ORDINALS),
              list(DIRECTIONS), list(SUPERLATIVES), list(ROWS), list(COLS), WORDS]
    for group in groups:
        for t in group:
            if t not in seen:
                seen.append(t)
    return seen


_TOKEN_RE = re.compile(r"</?[a-z]+>|\d|[\[\],]|[a-z']+|\S")
_GLUE_BEFORE = {"]", ",", "<answer>", "</answer>", "<end>"}
_GLUE_AFTER = {"[", "<answer>"}


class OutOfVocabulary(KeyError):
    pass


class Vocabulary:
    def __init__(self, tokens: list[str] | None = None):
        self.tokens = list(tokens) if tokens is not None else default_tokens()
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for required in SPECIALS:
            if self.index.get(required) != SPECIALS.index(required):
                raise ValueError(f"special token {required} must have id {SPECIALS.index(required)}")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise OutOfVocabulary(f"out-of-vocabulary token {exc.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def tokenize(self, text: str) -> list[int]:
        return self.encode(_TOKEN_RE.findall(text))

    def detokenize(self, ids) -> str:
        return join_tokens(self.decode(ids))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


def join_tokens(words: list[str]) -> str:
    out = ""
    prev = None
    for w in words:
        if prev is not None:
            glued = (
                w in _GLUE_BEFORE
                or prev in _GLUE_AFTER
                or (w.isdigit() and (prev.isdigit() or prev in ("[", ",")))
            )
            if not glued:
                out += " "
        out += w
        prev = w
    return out


@dataclass
class PolicyConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    max_seq: int = 256
    patch: int = 4
    image_size: int = 32
    max_prompt: int = 160
    max_new: int = 96


@dataclass
class PromptLayout:
    sys_ids: list[int]
    image: np.ndarray
    instr_ids: list[int]
    n_image_tokens: int = 64

    @property
    def ids(self) -> list[int]:
        # the instruction precedes the image so patch tokens can attend to it
        return [*self.sys_ids, *self.instr_ids, *([IMG] * self.n_image_tokens), SEP]

    @property
    def offsets(self) -> dict[str, tuple[int, int]]:
        a = len(self.sys_ids)
        b = a + len(self.instr_ids)
        c = b + self.n_image_tokens
        return {"sys": (0, a), "instruction": (a, b), "image": (b, c), "sep": (c, c + 1)}

    def __len__(self) -> int:
        return len(self.sys_ids) + len(self.instr_ids) + self.n_image_tokens + 1


@dataclass
class Completion:
    tokens: list[int]
    logprobs: np.ndarray
    text: str = ""


@dataclass
class SeqBatch:
    """Right-padded prompt+completion sequences."""

    ids: np.ndarray
    images: np.ndarray
    lengths: np.ndarray
    prompt_lengths: np.ndarray
    completions: list[list[int]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.ids.shape[0]


class PolicyModel:
    def __init__(self, vocab: Vocabulary | None = None, config: PolicyConfig | None = None, seed: int = 0):
        self.vocab = vocab or Vocabulary()
        self.config = config or PolicyConfig()
        cfg = self.config
        if cfg.image_size % cfg.patch:
            raise ValueError("image size must be divisible by patch size")
        self.n_image_tokens = (cfg.image_size // cfg.patch) ** 2
        # fan-in scaled projections: with 0.02 everywhere attention starts uniform
        # and the image-text matching is very slow to form
        store = nn.ParamStore(np.random.default_rng(seed), fan_in=True)
        c = cfg.dim
        store.normal("tok_emb", (len(self.vocab), c))
        store.normal("pos_emb", (cfg.max_seq, c))
        store.linear("patch.", cfg.patch * cfg.patch * 3, c)
        # grid position of each patch; sequence positions of the image block
        # shift with the instruction length, so they cannot carry it
        store.normal("patch_pos", (self.n_image_tokens, c))
        for i in range(cfg.layers):
            store.block(f"layers.{i}.", c)
        store.norm("ln_f.", c)
        store.linear("head.", c, len(self.vocab), std=0.02)
        self.params = store.params

    # -- layouts ----------------------------------------------------------
    def layout(self, image: np.ndarray, expression) -> PromptLayout:
        lay = PromptLayout(self.vocab.encode(SYSTEM_PROMPT), image, self.vocab.encode(expression), self.n_image_tokens)
        if len(lay) > self.config.max_prompt:
            raise ValueError(f"prompt length {len(lay)} exceeds {self.config.max_prompt}")
        return lay

    def make_batch(self, layouts: list[PromptLayout], completions: list[list[int]]) -> SeqBatch:
        lengths = np.array([len(l) + len(c) for l, c in zip(layouts, completions)])
        if lengths.max() > self.config.max_seq:
            raise ValueError(f"sequence length {lengths.max()} exceeds context window {self.config.max_seq}")
        ids = np.full((len(layouts), int(lengths.max())), PAD, dtype=np.int64)
        for b, (lay, comp) in enumerate(zip(layouts, completions)):
            seq = lay.ids + list(comp)
            ids[b, : len(seq)] = seq
        return SeqBatch(
            ids=ids,
            images=np.stack([l.image for l in layouts]).astype(np.float32),
            lengths=lengths,
            prompt_lengths=np.array([len(l) for l in layouts]),
            completions=[list(c) for c in completions],
        )

    # -- core pass ----------------------------------------------------------
    def _embed(self, ids: np.ndarray, positions: np.ndarray, images: np.ndarray | None) -> Tensor:
        p = self.params
        x = embedding(p["tok_emb"], ids) + embedding(p["pos_emb"], positions)
        if images is not None:
            # the image block starts at a per-row offset; gather patch embeddings
            # onto the <img> slots and a zero row everywhere else
            n = self.n_image_tokens
            is_img = ids == IMG
            rank = np.cumsum(is_img, axis=1)
            if not (rank[:, -1] >= n).all():
                raise ValueError(f"every row needs {n} image tokens")
            # only the prompt's image block; sampled <img> tokens stay plain embeddings
            slot = np.where(is_img & (rank <= n), rank - 1, n)
            patches = Tensor(nn.patchify(images, self.config.patch))
            pe = nn.linear(patches, p, "patch.") + p["patch_pos"]
            pe = concat([pe, Tensor(np.zeros((pe.shape[0], 1, pe.shape[2]), dtype=np.float32))], axis=1)
            x = x + pe[np.arange(len(ids))[:, None], slot]
        return x

    def _trunk(self, x: Tensor, mask: np.ndarray, caches: list[dict] | None = None) -> Tensor:
        for i in range(self.config.layers):
            cache = caches[i] if caches is not None else None
            x = nn.self_block(x, self.params, f"layers.{i}.", self.config.heads, mask, cache)
        return nn.norm(x, self.params, "ln_f.")

    def _logits(self, h: Tensor) -> Tensor:
        return nn.linear(h, self.params, "head.")

    @staticmethod
    def _mask(lengths: np.ndarray, L: int, M: int) -> np.ndarray:
        T = L + M
        idx = np.arange(L)
        valid = idx[None, :] < lengths[:, None]
        allowed = np.zeros((len(lengths), T, T), dtype=bool)
        causal = idx[None, :] <= idx[:, None]
        allowed[:, :L, :L] = causal[None] & valid[:, None, :]
        if M:
            allowed[:, L:, :L] = valid[:, None, :]
            allowed[:, L:, L:] = True
        return np.where(allowed, 0.0, nn.NEG_INF).astype(np.float32)[:, None]

    def forward(self, batch: SeqBatch, queries: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
        """Returns (final hidden states over the sequence, hidden states at the query slots)."""
        B, L = batch.ids.shape
        M = 0 if queries is None else queries.shape[0]
        if M and int(batch.lengths.max()) + 1 > self.config.max_seq:
            raise ValueError("no position left for context queries")
        positions = np.minimum(np.arange(L)[None, :].repeat(B, 0), self.config.max_seq - 1)
        x = self._embed(batch.ids, positions, batch.images)
        if M:
            qpos = self.params["pos_emb"][batch.lengths.astype(np.int64)].reshape(B, 1, -1)
            xq = queries.reshape(1, M, -1) + qpos
            x = concat([x, xq], axis=1)
        h = self._trunk(x, self._mask(batch.lengths, L, M))
        if not M:
            return h, None
        return h[:, :L], h[:, L:]

    def completion_logprobs(self, batch: SeqBatch, hidden: Tensor) -> tuple[Tensor, np.ndarray]:
        """Teacher-forced log p(token_t | prefix) for every completion token.

        Returns a right-padded (B, Cmax) tensor and the matching 0/1 token mask.
        """
        B = batch.size
        clen = batch.lengths - batch.prompt_lengths
        cmax = max(int(clen.max()), 1)
        j = np.arange(cmax)[None, :]
        valid = j < clen[:, None]
        tpos = np.where(valid, batch.prompt_lengths[:, None] - 1 + j, 0)
        bidx = np.arange(B)[:, None].repeat(cmax, 1)
        targets = np.where(valid, batch.ids[bidx, np.minimum(tpos + 1, batch.ids.shape[1] - 1)], 0)
        h = hidden[bidx, tpos]
        logp = log_softmax(self._logits(h), axis=-1)
        vocab_idx = np.arange(B)[:, None].repeat(cmax, 1), np.arange(cmax)[None, :].repeat(B, 0), targets
        return logp[vocab_idx], valid.astype(np.float32)

    def forward_logprobs(self, layout: PromptLayout, tokens: list[int]) -> Tensor:
        batch = self.make_batch([layout], [tokens])
        h, _ = self.forward(batch)
        lp, _ = self.completion_logprobs(batch, h)
        return lp[0, : len(tokens)]

    def extract_context(self, layout: PromptLayout, tokens: list[int], queries: Tensor) -> Tensor:
        batch = self.make_batch([layout], [tokens])
        _, qh = self.forward(batch, queries)
        return qh[0]

    def bootstrap_loss(self, batch: SeqBatch) -> Tensor:
        """Mean token-level cross-entropy of the teacher-forced completions."""
        h, _ = self.forward(batch)
        lp, valid = self.completion_logprobs(batch, h)
        return -(lp * valid).sum() * (1.0 / float(valid.sum()))

    # -- frozen-prefix path ---------------------------------------------------
    def prefix_cache(self, batch: SeqBatch) -> list[dict]:
        """Per-layer keys/values of the sequences, for re-running only the query slots."""
        B, L = batch.ids.shape
        positions = np.minimum(np.arange(L)[None, :].repeat(B, 0), self.config.max_seq - 1)
        caches: list[dict] = [{} for _ in range(self.config.layers)]
        with no_grad():
            x = self._embed(batch.ids, positions, batch.images)
            self._trunk(x, self._mask(batch.lengths, L, 0), caches)
        return caches

    def query_hidden(self, caches: list[dict], lengths: np.ndarray, queries: Tensor) -> Tensor:
        """Query-slot hidden states given a cached prefix; equals ``forward(batch, queries)[1]``."""
        B = len(lengths)
        L = caches[0]["k"].shape[2]
        M = queries.shape[0]
        qpos = self.params["pos_emb"][lengths.astype(np.int64)].reshape(B, 1, -1)
        x = queries.reshape(1, M, -1) + qpos
        allowed = np.ones((B, M, L + M), dtype=bool)
        allowed[:, :, :L] = np.arange(L)[None, None, :] < lengths[:, None, None]
        mask = np.where(allowed, 0.0, nn.NEG_INF).astype(np.float32)[:, None]
        return self._trunk(x, mask, [dict(c) for c in caches])

    # -- generation -------------------------------------------------------------
    def generate_batch(
        self,
        layouts: list[PromptLayout],
        temperature: float = 0.0,
        max_new: int | None = None,
        rngs: list[np.random.Generator] | None = None,
    ) -> list[Completion]:
        """Autoregressive decoding with a key/value cache.

        ``temperature == 0`` is greedy. Recorded log-probabilities are always the
        temperature-1 policy log-probabilities of the realised tokens.
        """
        if temperature < 0:
            raise ValueError("temperature must be >= 0")
        if temperature > 0 and (rngs is None or len(rngs) != len(layouts)):
            raise ValueError("sampling needs one rng per layout")
        max_new = self.config.max_new if max_new is None else max_new
        B = len(layouts)
        P = np.array([len(l) for l in layouts])
        Pmax = int(P.max())
        if Pmax + max_new > self.config.max_seq:
            raise ValueError(f"prompt {Pmax} + {max_new} new tokens exceeds context window {self.config.max_seq}")
        ids = np.full((B, Pmax), PAD, dtype=np.int64)
        for b, lay in enumerate(layouts):
            ids[b, : P[b]] = lay.ids
        images = np.stack([l.image for l in layouts]).astype(np.float32)
        caches: list[dict] = [{} for _ in range(self.config.layers)]
        tokens: list[list[int]] = [[] for _ in range(B)]
        logps: list[list[float]] = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        with no_grad():
            positions = np.minimum(np.arange(Pmax)[None, :].repeat(B, 0), self.config.max_seq - 1)
            x = self._embed(ids, positions, images)
            h = self._trunk(x, self._mask(P, Pmax, 0), caches)
            last = h.data[np.arange(B), P - 1]
            for step in range(max_new):
                logits = self._logits(Tensor(last)).data
                lp = _log_softmax_np(logits)
                nxt = np.empty(B, dtype=np.int64)
                for b in range(B):
                    if temperature == 0:
                        nxt[b] = int(np.argmax(logits[b]))
                    else:
                        probs = np.exp(_log_softmax_np(logits[b : b + 1] / temperature)[0].astype(np.float64))
                        cdf = np.cumsum(probs)
                        u = rngs[b].random() * cdf[-1]
                        nxt[b] = int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))
                    if not done[b]:
                        tokens[b].append(int(nxt[b]))
                        logps[b].append(float(lp[b, nxt[b]]))
                        if nxt[b] == END:
                            done[b] = True
                if done.all() or step == max_new - 1:
                    break
                cols = Pmax + step + 1
                allowed = np.zeros((B, 1, cols), dtype=bool)
                allowed[:, 0, :Pmax] = np.arange(Pmax)[None, :] < P[:, None]
                allowed[:, 0, Pmax:] = True
                mask = np.where(allowed, 0.0, nn.NEG_INF).astype(np.float32)[:, None]
                pos = np.minimum(P + step, self.config.max_seq - 1)[:, None]
                x = embedding(self.params["tok_emb"], nxt[:, None]) + embedding(self.params["pos_emb"], pos)
                last = self._trunk(x, mask, caches).data[:, 0]
        return [
            Completion(tokens[b], np.array(logps[b], dtype=np.float32), self.vocab.detokenize(tokens[b]))
            for b in range(B)
        ]

    def generate(self, layout: PromptLayout, temperature: float = 0.0, max_new: int | None = None, rng=None) -> Completion:
        return self.generate_batch([layout], temperature, max_new, None if rng is None else [rng])[0]


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
