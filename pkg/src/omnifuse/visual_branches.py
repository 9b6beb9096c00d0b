"""Three visual branches over one frozen patch encoder.

Each clip is patch-embedded once by a seeded, never-trained encoder stub.
Three trainable projectors then map that raw grid into aligned
(T, 4, 4, d_model) token grids: a detail path (face) that pools and applies
a two-linear GeLU MLP, and two spatio-temporal paths (body, interaction)
that additionally aggregate over a temporal window before their MLPs.
Identical output shapes are what makes the weighted fusion downstream a
plain elementwise sum.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from omnifuse.numerics import (
    Tensor,
    add,
    embed_lookup,
    gelu,
    matmul,
    mean_pool_axis,
    reshape,
)

TARGET_GRID = 4  # aligned spatial side H_v = W_v


@dataclass
class VideoClip:
    """T x H x W x C frames in [0, 1]."""

    frames: np.ndarray
    fps: float = 8.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be (T, H, W, C), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("clip needs at least one frame")
        if not np.isfinite(self.frames).all():
            raise ValueError("frames contain non-finite values")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")

    @property
    def resolution(self):
        t, h, w, c = self.frames.shape
        return (w, h)


@dataclass
class TokenGrid:
    """(T_v, H_v, W_v, d) token block; raw encoder output or projected."""

    tokens: Tensor

    def __post_init__(self):
        if self.tokens.ndim != 4:
            raise ValueError(f"token grid must be 4-D, got {self.tokens.shape}")

    @property
    def shape(self):
        return self.tokens.shape


class VisualEncoderStub:
    """Frozen stand-in for a pretrained image encoder.

    Per-frame patchify + linear embedding + per-position offset. Purely
    linear, so an all-black frame maps every patch to bias + position and
    frames are processed independently (permuting frames permutes the grid).
    """

    def __init__(self, input_px: int = 64, patch_px: int = 8, channels: int = 1,
                 d_enc: int = 32, seed: int = 0):
        if input_px % patch_px != 0:
            raise ValueError("input size must be divisible by the patch size")
        self.input_px = input_px
        self.patch_px = patch_px
        self.channels = channels
        self.d_enc = d_enc
        self.grid = input_px // patch_px
        rng = np.random.default_rng(seed)
        k = patch_px * patch_px * channels
        self.patch_w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(k), (k, d_enc)))
        self.patch_b = Tensor(rng.normal(0.0, 0.1, (d_enc,)))
        self.pos = Tensor(rng.normal(0.0, 0.3, (self.grid, self.grid, d_enc)))

    def params(self) -> dict:
        return {"patch_w": self.patch_w, "patch_b": self.patch_b, "pos": self.pos}

    def __call__(self, clip: VideoClip) -> np.ndarray:
        t, h, w, c = clip.frames.shape
        if h != self.input_px or w != self.input_px:
            raise ValueError(f"expected {self.input_px}x{self.input_px} frames, got {h}x{w}")
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channel(s), got {c}")
        p, g = self.patch_px, self.grid
        patches = (clip.frames
                   .reshape(t, g, p, g, p, c)
                   .transpose(0, 1, 3, 2, 4, 5)
                   .reshape(t, g, g, p * p * c))
        return patches @ self.patch_w.data + self.patch_b.data + self.pos.data


def _spatial_pool_to_target(x: Tensor) -> Tensor:
    """(T, H, W, d) -> (T, 4, 4, d) by block mean; H, W must be multiples."""
    t, h, w, d = x.shape
    if h < TARGET_GRID or w < TARGET_GRID:
        raise ValueError(f"grid {h}x{w} smaller than target {TARGET_GRID}x{TARGET_GRID}")
    if h % TARGET_GRID or w % TARGET_GRID:
        raise ValueError(f"grid {h}x{w} not divisible by target {TARGET_GRID}")
    fh, fw = h // TARGET_GRID, w // TARGET_GRID
    if fh == 1 and fw == 1:
        return x
    blocks = reshape(x, (t, TARGET_GRID, fh, TARGET_GRID, fw, d))
    pooled = mean_pool_axis(blocks, 2)          # (T, 4, 4, fw, d)
    return mean_pool_axis(pooled, 3)


def _temporal_window_mean(x: Tensor) -> Tensor:
    """Kernel-3 stride-1 temporal mean with reflect padding; T preserved."""
    t = x.shape[0]
    base = np.arange(t)
    ids = np.stack([np.abs(base - 1), base, (t - 1) - np.abs((t - 1) - (base + 1))],
                   axis=1)
    ids = np.clip(ids, 0, t - 1)                # single-frame clips reflect onto 0
    windows = embed_lookup(x, ids)              # (T, 3, H, W, d)
    return mean_pool_axis(windows, 1)


def _token_mlp(x: Tensor, w1, b1, w2, b2) -> Tensor:
    t, h, w, d = x.shape
    flat = reshape(x, (t * h * w, d))
    out = add(matmul(gelu(add(matmul(flat, w1), b1)), w2), b2)
    return reshape(out, (t, h, w, w2.shape[1]))


class FaceProjector:
    """Detail path: spatial pool to the shared grid, then linear-GeLU-linear."""

    def __init__(self, d_in: int, d_model: int, seed: int):
        rng = np.random.default_rng(seed)
        self.w1 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_model)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(d_model), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_model)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def __call__(self, raw: TokenGrid) -> TokenGrid:
        pooled = _spatial_pool_to_target(raw.tokens)
        return TokenGrid(_token_mlp(pooled, self.w1, self.b1, self.w2, self.b2))


class StcProjector:
    """Spatio-temporal path: spatial pool, temporal window mean, then MLP.

    A single-frame clip degenerates to an identity-weighted temporal window
    (all three reflect indices hit frame 0).
    """

    def __init__(self, d_in: int, d_model: int, seed: int):
        rng = np.random.default_rng(seed)
        self.w1 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_model)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(d_model), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_model)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def __call__(self, raw: TokenGrid) -> TokenGrid:
        pooled = _spatial_pool_to_target(raw.tokens)
        mixed = _temporal_window_mean(pooled)
        return TokenGrid(_token_mlp(mixed, self.w1, self.b1, self.w2, self.b2))


class VisualBranches:
    """One shared frozen encoder feeding three independent projectors."""

    def __init__(self, encoder: VisualEncoderStub, face: FaceProjector,
                 body: StcProjector, interaction: StcProjector):
        self.encoder = encoder
        self.face = face
        self.body = body
        self.interaction = interaction

    def encode(self, clip: VideoClip) -> np.ndarray:
        """Raw grid as a plain array, cacheable across training steps."""
        return self.encoder(clip)

    def project_all(self, raw_grid: np.ndarray):
        raw = TokenGrid(Tensor(raw_grid))
        return self.face(raw), self.body(raw), self.interaction(raw)

    def forward(self, clip: VideoClip):
        return self.project_all(self.encode(clip))


def default_branches(d_enc: int = 32, d_model: int = 32, input_px: int = 64,
                     patch_px: int = 8, seed: int = 0) -> VisualBranches:
    return VisualBranches(
        VisualEncoderStub(input_px, patch_px, 1, d_enc, seed=seed),
        FaceProjector(d_enc, d_model, seed=seed + 1),
        StcProjector(d_enc, d_model, seed=seed + 2),
        StcProjector(d_enc, d_model, seed=seed + 3),
    )
