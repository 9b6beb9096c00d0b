"""Staged training: per-branch pretraining, visual fine-tuning with gating,
audio alignment, and cross-modal joint tuning, driven by a declarative
freeze schedule over the model's parameter groups.

The synthetic three-aspect task packs three independent signals into each
clip: a static texture patch (face region), a moving blob (body band), and
a two-blob relative-motion pattern (interaction band). The instruction
family decides which aspect's class is the answer, so instruction-driven
branch weighting is the only route to full accuracy across families. An
optional tone track encodes the answer class in audio, and an occlusion
knob blanks the answer-bearing region to make audio genuinely informative.
"""
from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field, replace

import numpy as np

from omnifuse.audio_frontend import AudioWave
from omnifuse.model import (
    ALWAYS_FROZEN,
    ASPECT_LABELS,
    BRANCH_WEIGHTS,
    GROUP_NAMES,
    INSTRUCTION_FAMILIES,
    ModelDims,
    OmniModel,
    build_default_model,
)
from omnifuse.numerics import Adam, NonFiniteError, Tensor, backward, mul, zero_grads
from omnifuse.visual_branches import VideoClip

FAMILIES = ("face", "body", "interaction")
BRANCH_INDEX = {"face": 0, "body": 1, "interaction": 2}
TONE_FREQS = (400.0, 1200.0, 2800.0)

FREEZE_SCHEDULE = {
    "branch_pretrain_face": frozenset({"proj_face"}),
    "branch_pretrain_body": frozenset({"proj_body"}),
    "branch_pretrain_interaction": frozenset({"proj_inter"}),
    "visual_finetune": frozenset({"proj_face", "proj_body", "proj_inter",
                                  "decoder", "weight_mlps", "special_tokens"}),
    "audio_align": frozenset({"proj_audio"}),
    "crossmodal": frozenset({"decoder", "proj_face", "proj_body", "proj_inter",
                             "proj_audio", "weight_mlps", "special_tokens"}),
}

STAGE_SEQUENCE = tuple(FREEZE_SCHEDULE)


class LineageError(RuntimeError):
    """A stage was started without its parent checkpoints."""


def apply_freeze(model: OmniModel, stage_id: str) -> None:
    """Set frozen flags per the stage schedule; encoders never train."""
    if stage_id not in FREEZE_SCHEDULE:
        raise ValueError(f"unknown stage {stage_id!r}")
    trainable = FREEZE_SCHEDULE[stage_id]
    unknown = trainable - set(model.groups)
    if unknown:
        raise ValueError(f"unknown parameter groups {sorted(unknown)}")
    for name, group in model.groups.items():
        group.frozen = name not in trainable or name in ALWAYS_FROZEN


def frozen_digest(model: OmniModel) -> str:
    h = hashlib.sha256()
    for name in GROUP_NAMES:
        group = model.groups[name]
        if group.frozen:
            h.update(name.encode())
            h.update(group.digest_bytes())
    return h.hexdigest()[:16]


# ------------------------------------------------------------------ dataset

@dataclass
class DataSpec:
    families: tuple = FAMILIES
    classes_per_family: int = 3
    samples_per_family: int = 30
    av_fraction: float = 0.0
    occlude_prob: float = 0.0
    with_twins: bool = True
    frames: int = 4
    input_px: int = 64
    audio_seconds: float = 0.3
    noise: float = 0.02

    def validate(self):
        if not self.families or any(f not in FAMILIES for f in self.families):
            raise ValueError(f"families must be among {FAMILIES}")
        if not 1 <= self.classes_per_family <= 3:
            raise ValueError("classes_per_family must be 1..3")
        if self.samples_per_family < 1:
            raise ValueError("samples_per_family must be positive")
        for name in ("av_fraction", "occlude_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.frames < 4 or self.input_px != 64:
            raise ValueError("renderer needs >= 4 frames at 64x64")


@dataclass
class SyntheticSample:
    clip: VideoClip
    wave: object                  # AudioWave or None
    instruction: str
    answer: str
    has_audio: bool
    family: str
    aspect_classes: dict
    occluded: bool = False

    @property
    def directive(self) -> str:
        return "<video_audio>" if self.has_audio else "<video>"


def _draw_face(frames, cls, rng):
    jr, jc = int(rng.integers(0, 4)), int(rng.integers(0, 4))
    r = np.arange(2, 18)[:, None]
    c = np.arange(2, 18)[None, :]
    if cls == 0:
        pattern = np.where((((r + jr) // 2) % 2) == 0, 0.9, 0.1)
    elif cls == 1:
        pattern = np.where((((c + jc) // 2) % 2) == 0, 0.9, 0.1)
    else:
        pattern = np.where((((r + jr) // 4 + (c + jc) // 4) % 2) == 0, 0.9, 0.1)
    pattern = np.broadcast_to(pattern, (16, 16))
    frames[:, 2:18, 2:18, 0] = pattern


def _draw_body(frames, cls, rng):
    j = int(rng.integers(-2, 3))
    for t in range(frames.shape[0]):
        if cls == 0:
            r0, c0 = 28 + j, 8 + j + 4 * t
        elif cls == 1:
            r0, c0 = 28 + j, 36 + j - 4 * t
        else:
            r0, c0 = 22 + j + 3 * t, 28 + j
        frames[t, r0:r0 + 8, c0:c0 + 8, 0] = 0.85


def _draw_interaction(frames, cls, rng):
    jr, jc = int(rng.integers(-2, 3)), int(rng.integers(-2, 3))
    for t in range(frames.shape[0]):
        if cls == 0:
            lc, rc = 6 + 3 * t, 50 - 3 * t
        elif cls == 1:
            lc, rc = 20 - 3 * t, 36 + 3 * t
        else:
            lc, rc = 8 + 3 * t, 32 + 3 * t
        r0 = 50 + jr
        frames[t, r0:r0 + 8, lc + jc:lc + jc + 8, 0] = 0.8
        frames[t, r0:r0 + 8, rc + jc:rc + jc + 8, 0] = 0.8


_REGION_SLICES = {
    "face": (slice(0, 20), slice(0, 20)),
    "body": (slice(20, 43), slice(0, 64)),
    "interaction": (slice(44, 64), slice(0, 64)),
}


def render_clip(aspect_classes: dict, rng, frames: int = 4,
                occlude_family: str = None, noise: float = 0.02) -> VideoClip:
    """All three aspect signals over light noise; one region optionally blanked."""
    buf = rng.uniform(0.0, noise, (frames, 64, 64, 1))
    if occlude_family != "face":
        _draw_face(buf, aspect_classes["face"], rng)
    if occlude_family != "body":
        _draw_body(buf, aspect_classes["body"], rng)
    if occlude_family != "interaction":
        _draw_interaction(buf, aspect_classes["interaction"], rng)
    return VideoClip(buf)


def render_tone(class_idx: int, rng, seconds: float = 0.3) -> AudioWave:
    n = int(round(seconds * 16000))
    t = np.arange(n) / 16000.0
    amp = 0.35 + 0.1 * rng.uniform()
    samples = amp * np.sin(2 * np.pi * TONE_FREQS[class_idx] * t)
    samples = samples + rng.normal(0.0, 0.01, n)
    return AudioWave(np.clip(samples, -1.0, 1.0), 16000)


def make_synthetic_dataset(spec: DataSpec, seed: int) -> list:
    spec.validate()
    rng = np.random.default_rng(seed)
    samples = []
    for family in spec.families:
        templates = INSTRUCTION_FAMILIES[family]
        for _ in range(spec.samples_per_family):
            classes = {f: int(rng.integers(spec.classes_per_family)) for f in FAMILIES}
            occluded = bool(rng.uniform() < spec.occlude_prob)
            clip = render_clip(classes, rng, spec.frames,
                               occlude_family=family if occluded else None,
                               noise=spec.noise)
            instruction = templates[int(rng.integers(len(templates)))]
            answer = ASPECT_LABELS[family][classes[family]]
            has_audio = bool(rng.uniform() < spec.av_fraction)
            wave = (render_tone(classes[family], rng, spec.audio_seconds)
                    if has_audio else None)
            sample = SyntheticSample(clip, wave, instruction, answer,
                                     has_audio, family, classes, occluded)
            samples.append(sample)
            if has_audio and spec.with_twins:
                samples.append(SyntheticSample(clip, None, instruction, answer,
                                               False, family, classes, occluded))
    return samples


# ------------------------------------------------------------ oracle decoder

def oracle_classify(clip: VideoClip, family: str) -> int:
    """Brute-force per-aspect reader, used to certify dataset construction."""
    f = clip.frames[..., 0]
    if family == "face":
        region = f[:, 0:20, 0:20].mean(axis=0)
        rv = np.std(region.mean(axis=1))
        cv = np.std(region.mean(axis=0))
        if rv > 2.0 * cv and rv > 0.1:
            return 0
        if cv > 2.0 * rv and cv > 0.1:
            return 1
        return 2
    if family == "body":
        rs, cs = _REGION_SLICES["body"]
        band = f[:, rs, cs]
        cents = []
        for t in range(band.shape[0]):
            ys, xs = np.nonzero(band[t] > 0.5)
            cents.append((ys.mean(), xs.mean()) if ys.size else (0.0, 0.0))
        dr = cents[-1][0] - cents[0][0]
        dc = cents[-1][1] - cents[0][1]
        if dc > 6.0:
            return 0
        if dc < -6.0:
            return 1
        return 2
    if family == "interaction":
        rs, cs = _REGION_SLICES["interaction"]
        band = f[:, rs, cs]
        gaps = []
        for t in range(band.shape[0]):
            ys, xs = np.nonzero(band[t] > 0.5)
            left = xs[xs < 28]
            right = xs[xs >= 28]
            if left.size and right.size:
                gaps.append(right.mean() - left.mean())
        if len(gaps) < 2:
            return 2
        delta = gaps[-1] - gaps[0]
        if delta < -8.0:
            return 0
        if delta > 8.0:
            return 1
        return 2
    raise ValueError(f"unknown family {family!r}")


# ------------------------------------------------------------------ stages

@dataclass
class StageConfig:
    stage_id: str
    data: DataSpec
    steps: int
    lr: float
    seed: int = 0
    batch_size: int = 8
    directive_override: str = None
    heldout_per_family: int = 10

    def __post_init__(self):
        if self.stage_id not in FREEZE_SCHEDULE:
            raise ValueError(f"unknown stage {self.stage_id!r}")

    @property
    def trainable_groups(self):
        return FREEZE_SCHEDULE[self.stage_id]


_STAGE_DEFAULTS = {
    "branch_pretrain_face": dict(
        steps=1200, lr=6e-3,
        data=DataSpec(families=("face",), samples_per_family=80)),
    "branch_pretrain_body": dict(
        steps=1200, lr=6e-3,
        data=DataSpec(families=("body",), samples_per_family=80)),
    "branch_pretrain_interaction": dict(
        steps=1200, lr=6e-3,
        data=DataSpec(families=("interaction",), samples_per_family=80)),
    "visual_finetune": dict(
        steps=600, lr=2e-3,
        data=DataSpec(samples_per_family=100)),
    "audio_align": dict(
        steps=200, lr=3e-3, directive_override="<audio>",
        data=DataSpec(av_fraction=1.0, with_twins=False, samples_per_family=24)),
    "crossmodal": dict(
        steps=400, lr=1e-3,
        data=DataSpec(av_fraction=1.0, occlude_prob=0.35, samples_per_family=30)),
}


def default_stage(stage_id: str, seed: int = 0, **overrides) -> StageConfig:
    if stage_id not in _STAGE_DEFAULTS:
        raise ValueError(f"unknown stage {stage_id!r}")
    kw = dict(_STAGE_DEFAULTS[stage_id])
    data = kw.pop("data")
    if "data" in overrides:
        data = overrides.pop("data")
    elif overrides.get("data_overrides"):
        data = replace(data, **overrides.pop("data_overrides"))
    overrides.pop("data_overrides", None)
    kw.update(overrides)
    return StageConfig(stage_id=stage_id, data=data, seed=seed, **kw)


@dataclass
class TrainLog:
    stage_id: str
    rows: list = field(default_factory=list)   # dicts: step, loss, lr, frozen_hash
    final_accuracy: float = float("nan")
    checkpoint_path: str = None

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows])

    def smoothed(self, window: int = 20) -> np.ndarray:
        x = self.losses()
        if x.size == 0:
            return x
        w = min(window, x.size)
        kernel = np.ones(w) / w
        return np.convolve(x, kernel, mode="valid")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["step", "loss", "lr", "frozen_hash"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def _branch_override(stage_id: str):
    if stage_id.startswith("branch_pretrain_"):
        return BRANCH_WEIGHTS[stage_id.rsplit("_", 1)[1]]
    return None


def sample_directive(sample: SyntheticSample, override: str = None) -> str:
    return override if override else sample.directive


def featurize_samples(model: OmniModel, samples) -> list:
    return [model.featurize(s.clip, s.wave, s.instruction, s.answer)
            for s in samples]


def evaluate(model: OmniModel, samples, feats=None, directive_override=None,
             weights_override=None) -> float:
    if feats is None:
        feats = featurize_samples(model, samples)
    hits = 0
    for sample, feat in zip(samples, feats):
        directive = sample_directive(sample, directive_override)
        if model.predict_word(feat, directive, weights_override) == sample.answer:
            hits += 1
    return hits / len(samples)


def run_stage(model: OmniModel, stage: StageConfig, data=None, heldout=None,
              out_path=None) -> TrainLog:
    """Train one stage; returns the loss curve and held-out accuracy.

    Frozen-group bytes are hashed every optimizer step and compared against
    the pre-training digest, so any leak into frozen parameters aborts.
    """
    apply_freeze(model, stage.stage_id)
    if data is None:
        data = make_synthetic_dataset(stage.data, stage.seed)
    if heldout is None:
        heldout_spec = replace(stage.data,
                               samples_per_family=stage.heldout_per_family,
                               with_twins=False)
        heldout = make_synthetic_dataset(heldout_spec, stage.seed + 7919)

    feats = featurize_samples(model, data)
    weights_override = _branch_override(stage.stage_id)
    opt = Adam(model.group_list(), lr=stage.lr)
    rng = np.random.default_rng(stage.seed)
    baseline = frozen_digest(model)
    inv_b = Tensor(np.asarray(1.0 / stage.batch_size))

    # Mixed-directive data: pin one sample per directive into every batch so
    # parameters only some directives touch (audio markers, placeholder fill)
    # never sit out a step, which the optimizer would flag as a missing grad.
    by_directive = {}
    for i, s in enumerate(data):
        by_directive.setdefault(sample_directive(s, stage.directive_override), []).append(i)
    pools = [np.array(v) for v in by_directive.values()]

    log = TrainLog(stage_id=stage.stage_id)
    for step in range(stage.steps):
        if len(pools) > 1 and stage.batch_size >= len(pools):
            pinned = [p[rng.integers(p.size)] for p in pools]
            rest = rng.integers(0, len(data), size=stage.batch_size - len(pinned))
            idx = np.concatenate([np.array(pinned), rest])
        else:
            idx = rng.integers(0, len(data), size=stage.batch_size)
        opt.zero_grad()
        total = 0.0
        for i in idx:
            directive = sample_directive(data[i], stage.directive_override)
            try:
                loss = model.sample_loss(feats[i], directive, weights_override)
                backward(mul(loss, inv_b))
            except NonFiniteError as e:
                raise NonFiniteError(
                    f"{stage.stage_id}: non-finite loss at step {step} "
                    f"(sample {i}): {e}") from e
            total += float(loss.data)
        opt.step()
        digest = frozen_digest(model)
        if digest != baseline:
            raise RuntimeError(
                f"{stage.stage_id}: frozen parameters changed at step {step}")
        log.rows.append({"step": step, "loss": total / stage.batch_size,
                         "lr": stage.lr, "frozen_hash": digest})

    log.final_accuracy = evaluate(model, heldout,
                                  directive_override=stage.directive_override,
                                  weights_override=weights_override)
    if out_path:
        parents = _stage_parents(stage.stage_id)
        model.save(out_path, stage=stage.stage_id, parents=parents)
        log.checkpoint_path = str(out_path)
    return log


def _stage_parents(stage_id: str):
    return {
        "visual_finetune": ["branch_pretrain_face", "branch_pretrain_body",
                            "branch_pretrain_interaction"],
        "audio_align": ["visual_finetune"],
        "crossmodal": ["visual_finetune", "audio_align"],
    }.get(stage_id, [])


def stage_checkpoint(out_dir, stage_id: str) -> str:
    return os.path.join(out_dir, f"{stage_id}.ckpt")


def _require_checkpoint(out_dir, stage_id: str) -> str:
    path = stage_checkpoint(out_dir, stage_id)
    if not os.path.exists(path):
        raise LineageError(
            f"missing lineage checkpoint {path!r}: run the {stage_id} stage first")
    return path


def prepare_model_for_stage(stage_id: str, out_dir, seed: int = 0,
                            dims: ModelDims = None) -> OmniModel:
    """Build or load the model a stage starts from, enforcing lineage."""
    if stage_id.startswith("branch_pretrain_"):
        return build_default_model(seed=seed, dims=dims)
    if stage_id == "visual_finetune":
        model = build_default_model(seed=seed, dims=dims)
        for branch, group in (("face", "proj_face"), ("body", "proj_body"),
                              ("interaction", "proj_inter")):
            path = _require_checkpoint(out_dir, f"branch_pretrain_{branch}")
            model.load_groups(path, [group])
        return model
    if stage_id == "audio_align":
        path = _require_checkpoint(out_dir, "visual_finetune")
        model, _ = OmniModel.from_checkpoint(path)
        return model
    if stage_id == "crossmodal":
        vf = _require_checkpoint(out_dir, "visual_finetune")
        aa = _require_checkpoint(out_dir, "audio_align")
        model, _ = OmniModel.from_checkpoint(vf)
        model.load_groups(aa, ["proj_audio"])
        return model
    raise ValueError(f"unknown stage {stage_id!r}")


def run_pipeline_stage(stage_id: str, out_dir, seed: int = 0,
                       dims: ModelDims = None, **stage_overrides):
    """Prepare per lineage, train, and persist checkpoint + loss CSV."""
    os.makedirs(out_dir, exist_ok=True)
    model = prepare_model_for_stage(stage_id, out_dir, seed=seed, dims=dims)
    stage = default_stage(stage_id, seed=seed, **stage_overrides)
    log = run_stage(model, stage, out_path=stage_checkpoint(out_dir, stage_id))
    log.to_csv(os.path.join(out_dir, f"{stage_id}_log.csv"))
    return model, log


# ------------------------------------------------------------ reporting

def specialization_report(model: OmniModel, per_family_instructions=None) -> dict:
    """Mean fusion weights per instruction family, with branch-match flags."""
    fam_instr = per_family_instructions or INSTRUCTION_FAMILIES
    out = {}
    for family, instructions in fam_instr.items():
        trio = np.array([[w.w1, w.w2, w.w3] for w in
                         (model.fusion_weights_for(s) for s in instructions)])
        mean = trio.mean(axis=0)
        out[family] = {
            "mean_weights": tuple(float(v) for v in mean),
            "argmax": int(np.argmax(mean)),
            "matches_branch": int(np.argmax(mean)) == BRANCH_INDEX[family],
        }
    return out
