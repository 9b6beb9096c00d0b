"""The full multimodal model: frozen encoders, trainable projectors, gating,
decoder and special tokens, registered as named parameter groups, plus a
self-describing binary checkpoint format.

Checkpoint layout (little endian):

    bytes 0-3   magic "OMNF"
    bytes 4-7   format version (u32)
    bytes 8-15  header length in bytes (u64)
    header      UTF-8 JSON: dims, vocab word list, special token ids,
                stage name, parent stages, seed, tensor index
                (name, shape, byte offset into the payload)
    payload     concatenated float64 tensor blocks in index order
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from omnifuse.audio_frontend import (
    AudioEncoderStub,
    AudioProjector,
    AudioWave,
    log_mel,
    resample,
)
from omnifuse.instruction_fusion import (
    FusionWeights,
    GatingHead,
    InstructionEmbedding,
    InstructionEncoderStub,
    fuse,
)
from omnifuse.numerics import ParamGroup, Tensor
from omnifuse.sequence_model import (
    CausalDecoder,
    SpecialTokens,
    TokenSequence,
    Vocabulary,
    assemble,
)
from omnifuse.visual_branches import (
    FaceProjector,
    StcProjector,
    TokenGrid,
    VideoClip,
    VisualEncoderStub,
)

MAGIC = b"OMNF"
FORMAT_VERSION = 1

GROUP_NAMES = (
    "vis_encoder", "instr_encoder", "audio_encoder",
    "proj_face", "proj_body", "proj_inter", "proj_audio",
    "weight_mlps", "decoder", "special_tokens",
)
ALWAYS_FROZEN = ("vis_encoder", "instr_encoder", "audio_encoder")

BRANCH_WEIGHTS = {
    "face": FusionWeights(1.0, 0.0, 0.0),
    "body": FusionWeights(0.0, 1.0, 0.0),
    "interaction": FusionWeights(0.0, 0.0, 1.0),
}


@dataclass
class ModelDims:
    d_enc: int = 32
    d_model: int = 32
    d_t: int = 32
    d_h: int = 64
    placeholder_len: int = 4
    input_px: int = 64
    patch_px: int = 8
    channels: int = 1
    n_dec_layers: int = 2
    max_len: int = 256


@dataclass
class SampleFeatures:
    """Precomputed frozen-path features for one training/eval sample.

    Everything here is constant w.r.t. the trainable parameters, so it can
    be cached once per sample and reused every optimizer step.
    """

    raw_grid: np.ndarray               # (T, g, g, d_enc) from the visual stub
    instruction: str
    instr_emb: InstructionEmbedding
    text_ids: np.ndarray
    answer_ids: np.ndarray             # [answer token, EOS]
    audio_frames: np.ndarray = None    # (T_enc, d_enc) or None
    answer_word: str = ""


class OmniModel:
    """All components wired together behind one parameter-group registry."""

    def __init__(self, vocab: Vocabulary, dims: ModelDims = None, seed: int = 0):
        dims = dims or ModelDims()
        self.dims = dims
        self.seed = seed
        self.vocab = vocab
        self.vis_encoder = VisualEncoderStub(dims.input_px, dims.patch_px,
                                             dims.channels, dims.d_enc, seed=seed + 11)
        self.instr_encoder = InstructionEncoderStub(d_t=dims.d_t, seed=seed + 12)
        self.audio_encoder = AudioEncoderStub(d_out=dims.d_enc, seed=seed + 13)
        self.proj_face = FaceProjector(dims.d_enc, dims.d_model, seed=seed + 21)
        self.proj_body = StcProjector(dims.d_enc, dims.d_model, seed=seed + 22)
        self.proj_inter = StcProjector(dims.d_enc, dims.d_model, seed=seed + 23)
        self.proj_audio = AudioProjector(dims.d_enc, dims.d_model, seed=seed + 24)
        self.gating = GatingHead(dims.d_t, dims.d_h, seed=seed + 31)
        self.decoder = CausalDecoder(vocab, dims.d_model, dims.n_dec_layers,
                                     dims.max_len, seed=seed + 41)
        self.special = SpecialTokens(dims.d_model, len(vocab),
                                     dims.placeholder_len, seed=seed + 51)
        self._components = {
            "vis_encoder": self.vis_encoder,
            "instr_encoder": self.instr_encoder,
            "audio_encoder": self.audio_encoder,
            "proj_face": self.proj_face,
            "proj_body": self.proj_body,
            "proj_inter": self.proj_inter,
            "proj_audio": self.proj_audio,
            "weight_mlps": self.gating,
            "decoder": self.decoder,
            "special_tokens": self.special,
        }
        self.groups = {}
        for name in GROUP_NAMES:
            comp = self._components[name]
            self.groups[name] = ParamGroup(name, list(comp.params().values()),
                                           frozen=name in ALWAYS_FROZEN)

    # ------------------------------------------------------------ registry

    def named_tensors(self):
        for gname in GROUP_NAMES:
            for pname, t in self._components[gname].params().items():
                yield f"{gname}/{pname}", t

    def group_list(self):
        return [self.groups[n] for n in GROUP_NAMES]

    # ------------------------------------------------------------ features

    def encode_clip(self, clip: VideoClip) -> np.ndarray:
        return self.vis_encoder(clip)

    def encode_audio_wave(self, wave: AudioWave) -> np.ndarray:
        return self.audio_encoder(log_mel(resample(wave)))

    def featurize(self, clip: VideoClip, wave, instruction: str,
                  answer_word: str = "") -> SampleFeatures:
        answer_ids = (np.array([self.vocab.encode_word(answer_word), self.vocab.eos_id],
                               dtype=np.int64) if answer_word else np.array([], np.int64))
        return SampleFeatures(
            raw_grid=self.encode_clip(clip),
            instruction=instruction,
            instr_emb=self.instr_encoder(instruction),
            text_ids=self.vocab.encode(instruction),
            answer_ids=answer_ids,
            audio_frames=None if wave is None else self.encode_audio_wave(wave),
            answer_word=answer_word,
        )

    # ------------------------------------------------------------ forward

    def fused_visual(self, feat: SampleFeatures, weights_override: FusionWeights = None):
        f1, f2, f3 = (self.proj_face(TokenGrid(Tensor(feat.raw_grid))),
                      self.proj_body(TokenGrid(Tensor(feat.raw_grid))),
                      self.proj_inter(TokenGrid(Tensor(feat.raw_grid))))
        w = weights_override if weights_override is not None else self.gating(feat.instr_emb)
        return fuse(f1, f2, f3, w), w

    def build_sequence(self, feat: SampleFeatures, directive: str,
                       with_answer: bool, weights_override=None) -> TokenSequence:
        vision, _ = self.fused_visual(feat, weights_override)
        audio = (self.proj_audio(feat.audio_frames)
                 if feat.audio_frames is not None else None)
        text_ids = (np.concatenate([feat.text_ids, feat.answer_ids])
                    if with_answer else feat.text_ids)
        return assemble(text_ids, vision, audio, directive,
                        self.decoder.embed, self.special)

    def sample_loss(self, feat: SampleFeatures, directive: str,
                    weights_override=None) -> Tensor:
        if feat.answer_ids.size == 0:
            raise ValueError("sample has no answer tokens to supervise")
        seq = self.build_sequence(feat, directive, True, weights_override)
        return self.decoder.answer_loss(seq, feat.answer_ids)

    def predict_word(self, feat: SampleFeatures, directive: str,
                     weights_override=None) -> str:
        seq = self.build_sequence(feat, directive, False, weights_override)
        out = self.decoder.generate(seq, max_new=2)
        return out[0] if out else ""

    def fusion_weights_for(self, instruction: str) -> FusionWeights:
        return self.gating(self.instr_encoder(instruction))

    # ------------------------------------------------------------ checkpoints

    def save(self, path, stage: str = None, parents=()) -> None:
        index = []
        blobs = []
        offset = 0
        for name, t in self.named_tensors():
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            index.append({"name": name, "shape": list(t.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        header = {
            "dims": asdict(self.dims),
            "vocab": self.vocab.words,
            "special_token_ids": self.special.ids,
            "stage": stage,
            "parents": list(parents),
            "seed": self.seed,
            "tensors": index,
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            f.write(struct.pack("<Q", len(hb)))
            f.write(hb)
            for b in blobs:
                f.write(b)

    @staticmethod
    def read_header(path) -> dict:
        with open(path, "rb") as f:
            if f.read(4) != MAGIC:
                raise ValueError(f"{path}: not a model checkpoint (bad magic)")
            (version,) = struct.unpack("<I", f.read(4))
            if version != FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            (hlen,) = struct.unpack("<Q", f.read(8))
            return json.loads(f.read(hlen).decode("utf-8"))

    @staticmethod
    def _read_tensors(path, wanted=None):
        out = {}
        with open(path, "rb") as f:
            if f.read(4) != MAGIC:
                raise ValueError(f"{path}: not a model checkpoint (bad magic)")
            (version,) = struct.unpack("<I", f.read(4))
            if version != FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            (hlen,) = struct.unpack("<Q", f.read(8))
            header = json.loads(f.read(hlen).decode("utf-8"))
            base = 16 + hlen
            for entry in header["tensors"]:
                if wanted is not None and entry["name"] not in wanted:
                    continue
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                f.seek(base + entry["offset"])
                buf = f.read(count * 8)
                out[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        return header, out

    @classmethod
    def from_checkpoint(cls, path):
        header, tensors = cls._read_tensors(path)
        dims = ModelDims(**header["dims"])
        vocab = Vocabulary.__new__(Vocabulary)
        vocab.words = list(header["vocab"])
        vocab.index = {w: i for i, w in enumerate(vocab.words)}
        model = cls(vocab, dims, seed=header.get("seed", 0))
        model._assign(tensors)
        return model, header

    def load_groups(self, path, group_names) -> None:
        """Overwrite only the named groups from another checkpoint."""
        prefixes = tuple(f"{g}/" for g in group_names)
        wanted = {name for name, _ in self.named_tensors()
                  if name.startswith(prefixes)}
        _, tensors = self._read_tensors(path, wanted)
        missing = wanted - set(tensors)
        if missing:
            raise ValueError(f"{path}: checkpoint lacks tensors {sorted(missing)}")
        self._assign(tensors)

    def _assign(self, tensors: dict) -> None:
        own = dict(self.named_tensors())
        for name, arr in tensors.items():
            if name not in own:
                raise ValueError(f"unknown tensor {name!r} in checkpoint")
            if own[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{own[name].shape} vs {arr.shape}")
            own[name].data = arr.astype(np.float64)


ASPECT_LABELS = {
    "face": ["happy", "sad", "calm"],
    "body": ["advance", "retreat", "descend"],
    "interaction": ["approach", "separate", "follow"],
}

INSTRUCTION_FAMILIES = {
    "face": [
        "what emotion does the face show",
        "describe the facial expression",
        "how is the person feeling",
    ],
    "body": [
        "what action is the person doing",
        "describe the body movement",
        "how does the person move",
    ],
    "interaction": [
        "how do the two people interact",
        "describe the interaction between them",
        "what is the relative motion of the pair",
    ],
}


def default_task_words():
    """Words used by the synthetic three-aspect task (answers + instructions)."""
    words = set()
    for templates in INSTRUCTION_FAMILIES.values():
        for template in templates:
            words.update(template.split())
    for labels in ASPECT_LABELS.values():
        words.update(labels)
    return sorted(words)


def build_default_model(seed: int = 0, dims: ModelDims = None) -> OmniModel:
    return OmniModel(Vocabulary(default_task_words()), dims or ModelDims(), seed=seed)
