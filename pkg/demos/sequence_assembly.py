"""How text, vision, and audio meet in one token sequence.

Shows the fixed layout, the default-fill for missing modalities, and the
audio-stripping equivalence used to build paired training samples.

Run:  python3 demos/sequence_assembly.py
"""

from collections import Counter

import numpy as np

from omnifuse.model import build_default_model
from omnifuse.training_stages import DataSpec, make_synthetic_dataset


def describe(seq, label):
    counts = Counter(seq.source_tags)
    parts = ", ".join(f"{tag}={n}" for tag, n in sorted(counts.items()))
    print(f"   {label:22s} L={len(seq):3d}  [{parts}]")


def main():
    model = build_default_model(seed=0)
    spec = DataSpec(samples_per_family=1, av_fraction=1.0, with_twins=False)
    sample = make_synthetic_dataset(spec, seed=2)[0]
    feat_av = model.featurize(sample.clip, sample.wave, sample.instruction,
                              sample.answer)
    feat_v = model.featurize(sample.clip, None, sample.instruction,
                             sample.answer)

    print(f"instruction: {sample.instruction!r}  answer: {sample.answer!r}")
    print("\nsequence layouts (directive decides what gets real tokens):")
    describe(model.build_sequence(feat_av, "<video_audio>", True), "<video_audio>")
    describe(model.build_sequence(feat_av, "<video>", True), "<video> (audio cut)")
    describe(model.build_sequence(feat_av, "<audio>", True), "<audio> (video cut)")
    describe(model.build_sequence(feat_v, "<video>", True), "<video>, no wave")

    print("\nstripping the wave equals directing audio away:")
    a = model.build_sequence(feat_av, "<video>", True)
    b = model.build_sequence(feat_v, "<video>", True)
    print(f"   embeddings bitwise equal: "
          f"{a.embeddings.data.tobytes() == b.embeddings.data.tobytes()}")
    loss_a = model.sample_loss(feat_av, "<video>").item()
    loss_b = model.sample_loss(feat_v, "<video>").item()
    print(f"   losses equal: {loss_a == loss_b}  ({loss_a:.6f})")

    print("\ncausality: perturbing the last row moves only the last logits")
    seq = model.build_sequence(feat_av, "<video_audio>", False)
    base = model.decoder.decode(seq).data.copy()
    bumped = model.build_sequence(feat_av, "<video_audio>", False)
    bumped.embeddings.data[-1] += 0.5
    moved = np.where(np.any(model.decoder.decode(bumped).data != base, axis=1))[0]
    print(f"   rows that changed: {moved.tolist()} of {base.shape[0]}")


if __name__ == "__main__":
    main()
