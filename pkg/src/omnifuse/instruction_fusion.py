"""Instruction-conditioned gating over the three visual branches.

A frozen seeded mini-transformer summarizes the instruction into one vector.
Two trainable MLPs turn that vector into three softmax weights, and the fused
grid is the convex combination w1*F1 + w2*F2 + w3*F3. The weights are scalars
per instruction, not per token.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

from omnifuse.numerics import (
    Tensor,
    add,
    embed_lookup,
    gelu,
    gelu_np,
    matmul,
    mul,
    reshape,
    softmax_lastdim,
)
from omnifuse.visual_branches import TokenGrid

VOCAB_SIZE = 256
CLS_ID = 0
MAX_TOKENS = 16
_WORD_RE = re.compile(r"[a-z0-9']+")


def tokenize(text: str) -> list:
    return _WORD_RE.findall(text.lower())


def detokenize(tokens) -> str:
    return " ".join(tokens)


def token_ids(text: str) -> np.ndarray:
    """Hash-bucketed ids in [1, VOCAB_SIZE); 0 is reserved for the summary slot."""
    toks = tokenize(text)[:MAX_TOKENS]
    ids = [1 + int.from_bytes(hashlib.sha256(t.encode()).digest()[:4], "little")
           % (VOCAB_SIZE - 1) for t in toks]
    return np.array(ids, dtype=np.int64)


@dataclass
class InstructionEmbedding:
    """Summary vector for one instruction, from the frozen encoder."""

    cls: np.ndarray

    def __post_init__(self):
        self.cls = np.asarray(self.cls, dtype=np.float64)
        if self.cls.ndim != 1 or not np.isfinite(self.cls).all():
            raise ValueError("embedding must be a finite 1-D vector")


class InstructionEncoderStub:
    """Frozen 2-layer bidirectional transformer with a prepended summary token.

    Seeded random weights stand in for a pretrained text encoder; the
    trainable gating MLPs downstream adapt on top of its fixed features.
    """

    def __init__(self, d_t: int = 32, seed: int = 0, n_layers: int = 2):
        rng = np.random.default_rng(seed)
        s = 1.0 / np.sqrt(d_t)
        self.embed = Tensor(rng.normal(0.0, 1.0, (VOCAB_SIZE, d_t)))
        self.pos = Tensor(rng.normal(0.0, 0.3, (MAX_TOKENS + 1, d_t)))
        self.layers = []
        for _ in range(n_layers):
            self.layers.append({
                "wq": Tensor(rng.normal(0.0, s, (d_t, d_t))),
                "wk": Tensor(rng.normal(0.0, s, (d_t, d_t))),
                "wv": Tensor(rng.normal(0.0, s, (d_t, d_t))),
                "wo": Tensor(rng.normal(0.0, s, (d_t, d_t))),
                "m1": Tensor(rng.normal(0.0, s, (d_t, 2 * d_t))),
                "mb1": Tensor(np.zeros(2 * d_t)),
                "m2": Tensor(rng.normal(0.0, 1.0 / np.sqrt(2 * d_t), (2 * d_t, d_t))),
                "mb2": Tensor(np.zeros(d_t)),
            })
        self.d_t = d_t

    def params(self) -> dict:
        out = {"embed": self.embed, "pos": self.pos}
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                out[f"layer{i}_{k}"] = v
        return out

    def __call__(self, text: str) -> InstructionEmbedding:
        ids = token_ids(text)
        if ids.size == 0:
            raise ValueError("instruction is empty after tokenization")
        full = np.concatenate([[CLS_ID], ids])
        x = self.embed.data[full] + self.pos.data[:full.size]
        scale = 1.0 / np.sqrt(self.d_t)
        for layer in self.layers:
            q = x @ layer["wq"].data
            k = x @ layer["wk"].data
            v = x @ layer["wv"].data
            scores = q @ k.T * scale
            scores -= scores.max(axis=-1, keepdims=True)
            att = np.exp(scores)
            att /= att.sum(axis=-1, keepdims=True)
            x = x + (att @ v) @ layer["wo"].data
            h = gelu_np(x @ layer["m1"].data + layer["mb1"].data)
            x = x + h @ layer["m2"].data + layer["mb2"].data
        return InstructionEmbedding(x[0])


@dataclass
class FusionWeights:
    """Scalar branch weights (face, body, interaction).

    ``vec`` keeps the differentiable (3,) tensor when the weights came from
    the gating head; hand-built weights get a constant tensor. Normalized
    weights must be a convex combination; the boundary values 0 and 1 are
    allowed so degenerate single-branch weightings are expressible.
    """

    w1: float
    w2: float
    w3: float
    vec: Tensor = None
    normalized: bool = True

    def __post_init__(self):
        if self.vec is None:
            self.vec = Tensor(np.array([self.w1, self.w2, self.w3]))
        if self.normalized:
            trio = (self.w1, self.w2, self.w3)
            if any(w < 0.0 or w > 1.0 for w in trio):
                raise ValueError(f"normalized weights must lie in [0, 1], got {trio}")
            if abs(sum(trio) - 1.0) > 1e-12:
                raise ValueError(f"normalized weights must sum to 1, got {sum(trio)}")


def weights_from_logits(logits: Tensor, normalize: bool = True) -> FusionWeights:
    if logits.shape != (3,):
        raise ValueError(f"need 3 logits, got shape {logits.shape}")
    vec = softmax_lastdim(logits) if normalize else logits
    a, b, c = (float(v) for v in vec.data)
    return FusionWeights(a, b, c, vec=vec, normalized=normalize)


class GatingHead:
    """Two stacked trainable MLPs: d_t -> d_h (GeLU) -> 3 logits -> weights."""

    def __init__(self, d_t: int, d_h: int, seed: int, normalize: bool = True):
        rng = np.random.default_rng(seed)
        self.w1 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_t), (d_t, d_h)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(d_h), requires_grad=True)
        # small final-layer scale so fresh heads start close to uniform mixing
        self.w2 = Tensor(rng.normal(0.0, 0.2 / np.sqrt(d_h), (d_h, 3)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(3), requires_grad=True)
        self.normalize = normalize

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def logits(self, emb: InstructionEmbedding) -> Tensor:
        x = Tensor(emb.cls[None, :])
        h = gelu(add(matmul(x, self.w1), self.b1))
        return reshape(add(matmul(h, self.w2), self.b2), (3,))

    def __call__(self, emb: InstructionEmbedding) -> FusionWeights:
        return weights_from_logits(self.logits(emb), self.normalize)


def fuse(f1: TokenGrid, f2: TokenGrid, f3: TokenGrid, w: FusionWeights) -> TokenGrid:
    """Elementwise w1*F1 + w2*F2 + w3*F3; grids must be aligned."""
    if not (f1.shape == f2.shape == f3.shape):
        raise ValueError(f"misaligned grids: {f1.shape}, {f2.shape}, {f3.shape}")
    acc = None
    for i, grid in enumerate((f1, f2, f3)):
        wi = reshape(embed_lookup(w.vec, np.array([i])), ())
        term = mul(grid.tokens, wi)
        acc = term if acc is None else add(acc, term)
    return TokenGrid(acc)
