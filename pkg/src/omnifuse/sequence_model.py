"""Unified token sequence assembly and a tiny trainable causal decoder.

Layout of every sequence:

    [directive] [VID_BEG] vision|fill [VID_END] [AUD_BEG] audio|fill [AUD_END] text

The directive token (<video>, <audio>, <video_audio>) governs which
modalities are kept: a modality that is present but excluded by the
directive is replaced by placeholder_len copies of the learned NULL_FILL
embedding, exactly as if it were missing. Marker embeddings live outside
the text vocabulary; their serialization ids start at vocab_size.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from omnifuse.audio_frontend import AudioTokens
from omnifuse.instruction_fusion import tokenize
from omnifuse.numerics import (
    Tensor,
    add,
    concat_axis,
    cross_entropy,
    embed_lookup,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    softmax_lastdim,
    transpose,
)
from omnifuse.visual_branches import TokenGrid

UNK = "<unk>"
EOS = "<eos>"
DIRECTIVE_VIDEO = "<video>"
DIRECTIVE_AUDIO = "<audio>"
DIRECTIVE_VIDEO_AUDIO = "<video_audio>"
DIRECTIVES = (DIRECTIVE_VIDEO, DIRECTIVE_AUDIO, DIRECTIVE_VIDEO_AUDIO)

TAG_TEXT = "text"
TAG_VISION = "vision"
TAG_AUDIO = "audio"
TAG_MARKER = "marker"
TAG_FILL = "fill"

MARKER_NAMES = ("VID_BEG", "VID_END", "AUD_BEG", "AUD_END", "NULL_FILL")


class Vocabulary:
    """Closed word list; index 0 is <unk>, 1 is <eos>, then the directives."""

    def __init__(self, words):
        base = [UNK, EOS, *DIRECTIVES]
        extra = [w for w in words if w not in base]
        if len(set(extra)) != len(extra):
            raise ValueError("duplicate words in vocabulary")
        self.words = base + list(extra)
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def directive_id(self, directive: str) -> int:
        if directive not in DIRECTIVES:
            raise ValueError(f"unknown directive {directive!r}")
        return self.index[directive]

    def encode(self, text: str) -> np.ndarray:
        toks = tokenize(text)
        return np.array([self.index.get(t, 0) for t in toks], dtype=np.int64)

    def encode_word(self, word: str) -> int:
        if word not in self.index:
            raise ValueError(f"word {word!r} not in vocabulary")
        return self.index[word]

    def decode(self, ids) -> list:
        return [self.words[int(i)] for i in ids]


class SpecialTokens:
    """Learned marker and fill embeddings (trainable as one group)."""

    def __init__(self, d_model: int, vocab_size: int, placeholder_len: int = 4,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.d_model = d_model
        self.placeholder_len = placeholder_len
        for name in MARKER_NAMES:
            setattr(self, name.lower(),
                    Tensor(rng.normal(0.0, 0.5, (d_model,)), requires_grad=True))
        # serialization ids sit past the text vocabulary, keeping them disjoint
        self.ids = {name: vocab_size + i for i, name in enumerate(MARKER_NAMES)}

    def params(self) -> dict:
        return {name.lower(): getattr(self, name.lower()) for name in MARKER_NAMES}


@dataclass
class TokenSequence:
    embeddings: Tensor                 # (L, d_model)
    source_tags: list
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ValueError("sequence embeddings must be (L, d)")
        if len(self.source_tags) != self.embeddings.shape[0]:
            raise ValueError("one source tag per position required")
        if self.positions is None:
            self.positions = np.arange(self.embeddings.shape[0])

    def __len__(self):
        return self.embeddings.shape[0]


def sequence_length(n_vision, n_audio, n_text, placeholder_len: int = 4) -> int:
    """L = 1 (directive) + 2 + |V| + 2 + |A| + |text|, with placeholder
    lengths substituted for absent modalities."""
    v = n_vision if n_vision is not None else placeholder_len
    a = n_audio if n_audio is not None else placeholder_len
    return 1 + 2 + v + 2 + a + n_text


def assemble(text_ids, vision, audio, directive: str, embed_table: Tensor,
             special: SpecialTokens) -> TokenSequence:
    """Build the unified sequence; the directive decides modality inclusion."""
    text_ids = np.asarray(text_ids, dtype=np.int64)
    if text_ids.size == 0:
        raise ValueError("sequence needs at least one text token")
    if directive not in DIRECTIVES:
        raise ValueError(f"unknown directive {directive!r}")
    use_vision = directive in (DIRECTIVE_VIDEO, DIRECTIVE_VIDEO_AUDIO) and vision is not None
    use_audio = directive in (DIRECTIVE_AUDIO, DIRECTIVE_VIDEO_AUDIO) and audio is not None

    d = special.d_model
    fill_block = embed_lookup(reshape(special.null_fill, (1, d)),
                              np.zeros(special.placeholder_len, dtype=np.int64))

    parts = []
    tags = []

    # directive is an ordinary text-vocabulary token
    parts.append(embed_lookup(embed_table, _directive_index(directive)))
    tags.append(TAG_TEXT)

    parts.append(reshape(special.vid_beg, (1, d)))
    tags.append(TAG_MARKER)
    if use_vision:
        if not isinstance(vision, TokenGrid):
            raise ValueError("vision input must be a TokenGrid")
        t, h, w, dv = vision.shape
        if dv != d:
            raise ValueError(f"vision dim {dv} != model dim {d}")
        parts.append(reshape(vision.tokens, (t * h * w, d)))
        tags.extend([TAG_VISION] * (t * h * w))
    else:
        parts.append(fill_block)
        tags.extend([TAG_FILL] * special.placeholder_len)
    parts.append(reshape(special.vid_end, (1, d)))
    tags.append(TAG_MARKER)

    parts.append(reshape(special.aud_beg, (1, d)))
    tags.append(TAG_MARKER)
    if use_audio:
        if not isinstance(audio, AudioTokens):
            raise ValueError("audio input must be AudioTokens")
        if audio.tokens.shape[1] != d:
            raise ValueError(f"audio dim {audio.tokens.shape[1]} != model dim {d}")
        parts.append(audio.tokens)
        tags.extend([TAG_AUDIO] * audio.tokens.shape[0])
    else:
        fill_block2 = embed_lookup(reshape(special.null_fill, (1, d)),
                                   np.zeros(special.placeholder_len, dtype=np.int64))
        parts.append(fill_block2)
        tags.extend([TAG_FILL] * special.placeholder_len)
    parts.append(reshape(special.aud_end, (1, d)))
    tags.append(TAG_MARKER)

    parts.append(embed_lookup(embed_table, text_ids))
    tags.extend([TAG_TEXT] * text_ids.size)

    return TokenSequence(concat_axis(parts, 0), tags)


def _directive_index(directive: str) -> np.ndarray:
    # the vocabulary fixes directive ids at 2, 3, 4
    return np.array([2 + DIRECTIVES.index(directive)], dtype=np.int64)


def validate_markers(seq: TokenSequence) -> None:
    """Marker pairing check: one VID span then one AUD span, well nested."""
    tags = seq.source_tags
    marker_rows = [i for i, t in enumerate(tags) if t == TAG_MARKER]
    if len(marker_rows) != 4:
        raise ValueError(f"expected 4 marker positions, found {len(marker_rows)}")
    a, b, c, d = marker_rows
    if not (a < b < c < d and c == b + 1):
        raise ValueError("marker spans must be [VID..][AUD..] back to back")
    inner_v = set(tags[a + 1:b])
    inner_a = set(tags[c + 1:d])
    if not inner_v <= {TAG_VISION, TAG_FILL} or not inner_a <= {TAG_AUDIO, TAG_FILL}:
        raise ValueError("foreign tokens inside a marker span")


class CausalDecoder:
    """Two-layer single-head causal transformer over assembled embeddings.

    Small enough to train from scratch at desk scale; stands in for the
    large decoder the full system would use.
    """

    def __init__(self, vocab: Vocabulary, d_model: int = 32, n_layers: int = 2,
                 max_len: int = 256, seed: int = 0):
        rng = np.random.default_rng(seed)
        v = len(vocab)
        s = 1.0 / np.sqrt(d_model)
        self.vocab = vocab
        self.d_model = d_model
        self.max_len = max_len
        self.embed = Tensor(rng.normal(0.0, 0.5, (v, d_model)), requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, 0.3, (max_len, d_model)), requires_grad=True)
        self.layers = []
        for _ in range(n_layers):
            self.layers.append({
                "ln1_g": Tensor(np.ones(d_model), requires_grad=True),
                "ln1_b": Tensor(np.zeros(d_model), requires_grad=True),
                "wq": Tensor(rng.normal(0.0, s, (d_model, d_model)), requires_grad=True),
                "wk": Tensor(rng.normal(0.0, s, (d_model, d_model)), requires_grad=True),
                "wv": Tensor(rng.normal(0.0, s, (d_model, d_model)), requires_grad=True),
                "wo": Tensor(rng.normal(0.0, s, (d_model, d_model)), requires_grad=True),
                "ln2_g": Tensor(np.ones(d_model), requires_grad=True),
                "ln2_b": Tensor(np.zeros(d_model), requires_grad=True),
                "m1": Tensor(rng.normal(0.0, s, (d_model, 4 * d_model)), requires_grad=True),
                "mb1": Tensor(np.zeros(4 * d_model), requires_grad=True),
                "m2": Tensor(rng.normal(0.0, 0.5 / np.sqrt(d_model), (4 * d_model, d_model)),
                             requires_grad=True),
                "mb2": Tensor(np.zeros(d_model), requires_grad=True),
            })
        self.lnf_g = Tensor(np.ones(d_model), requires_grad=True)
        self.lnf_b = Tensor(np.zeros(d_model), requires_grad=True)
        self.w_out = Tensor(rng.normal(0.0, s, (d_model, v)), requires_grad=True)
        self._scale = Tensor(np.asarray(1.0 / np.sqrt(d_model)))
        self._masks = {}

    def params(self) -> dict:
        out = {"embed": self.embed, "pos": self.pos,
               "lnf_g": self.lnf_g, "lnf_b": self.lnf_b, "w_out": self.w_out}
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                out[f"layer{i}_{k}"] = v
        return out

    def _mask(self, n: int) -> Tensor:
        if n not in self._masks:
            m = np.triu(np.full((n, n), -1e9), k=1)
            self._masks[n] = Tensor(m)
        return self._masks[n]

    def decode(self, seq: TokenSequence) -> Tensor:
        n = len(seq)
        if n > self.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.max_len}")
        x = add(seq.embeddings, embed_lookup(self.pos, seq.positions))
        for layer in self.layers:
            h = layer_norm(x, layer["ln1_g"], layer["ln1_b"])
            q = matmul(h, layer["wq"])
            k = matmul(h, layer["wk"])
            v = matmul(h, layer["wv"])
            scores = add(mul(matmul(q, transpose(k)), self._scale), self._mask(n))
            x = add(x, matmul(matmul(softmax_lastdim(scores), v), layer["wo"]))
            h2 = layer_norm(x, layer["ln2_g"], layer["ln2_b"])
            inner = gelu(add(matmul(h2, layer["m1"]), layer["mb1"]))
            x = add(x, add(matmul(inner, layer["m2"]), layer["mb2"]))
        return matmul(layer_norm(x, self.lnf_g, self.lnf_b), self.w_out)

    def answer_loss(self, seq: TokenSequence, target_ids) -> Tensor:
        """Cross entropy on the rows that predict the trailing target tokens.

        With targets [t1..tk] appended as the final text positions, row
        L-k-1 predicts t1 and so on through row L-2 predicting tk.
        """
        target_ids = np.asarray(target_ids, dtype=np.int64)
        k = target_ids.size
        if k == 0:
            raise ValueError("no target tokens")
        n = len(seq)
        if n < k + 1:
            raise ValueError("sequence too short for the target span")
        rows = np.arange(n - k - 1, n - 1)
        logits = embed_lookup(self.decode(seq), rows)
        return cross_entropy(logits, target_ids)

    def generate(self, seq: TokenSequence, max_new: int) -> list:
        """Greedy continuation; returns the generated words (EOS excluded)."""
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        emb = seq.embeddings
        tags = list(seq.source_tags)
        out_words = []
        for _ in range(max_new):
            cur = TokenSequence(emb, tags)
            logits = self.decode(cur)
            next_id = int(np.argmax(logits.data[-1]))
            if next_id == self.vocab.eos_id:
                break
            out_words.append(self.vocab.words[next_id])
            row = embed_lookup(self.embed, np.array([next_id], dtype=np.int64))
            emb = concat_axis([emb, row], 0)
            tags = tags + [TAG_TEXT]
        return out_words
