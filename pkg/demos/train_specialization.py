"""Staged training on the synthetic three-aspect task, end to end.

Runs branch pretraining (face, body, interaction), then the fusion
fine-tune, and prints how the gate specializes per instruction family.
With --audio it continues through the audio and joint stages and compares
audio-visual against video-only accuracy.

The full visual schedule takes a few minutes on a laptop. --quick cuts the
step counts to a quarter; expect the gate to collapse onto the strongest
branch there - undertraining is visible, not hidden.

Run:  python3 demos/train_specialization.py [--quick] [--audio] [--out DIR]
"""

import argparse
import time
from dataclasses import replace

from omnifuse.training_stages import (
    FAMILIES,
    default_stage,
    evaluate,
    make_synthetic_dataset,
    run_pipeline_stage,
    specialization_report,
)

FULL = {"branch_pretrain_face": 1200, "branch_pretrain_body": 1200,
        "branch_pretrain_interaction": 1200, "visual_finetune": 600,
        "audio_align": 200, "crossmodal": 400}


def run(stage_id, out_dir, steps):
    t0 = time.monotonic()
    model, log = run_pipeline_stage(stage_id, out_dir, seed=0, steps=steps)
    print(f"   {stage_id:28s} {steps:4d} steps  "
          f"held-out {log.final_accuracy:.2f}  ({time.monotonic() - t0:.0f}s)")
    return model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--audio", action="store_true")
    ap.add_argument("--out", default="runs/demo")
    args = ap.parse_args()

    scale = 0.25 if args.quick else 1.0
    if args.quick:
        print("quick mode: quarter schedule, expect degraded specialization\n")

    print("== visual stages ==")
    stages = list(FULL)[:4]
    for stage_id in stages:
        model = run(stage_id, args.out, max(1, int(FULL[stage_id] * scale)))

    print("\n== fusion weights per instruction family ==")
    report = specialization_report(model)
    for family in FAMILIES:
        r = report[family]
        trio = ", ".join(f"{w:.2f}" for w in r["mean_weights"])
        flag = "specialized" if r["matches_branch"] else "NOT specialized"
        print(f"   {family:11s} ({trio})  argmax={r['argmax']}  {flag}")

    if not args.audio:
        print("\nrerun with --audio for the audio and joint stages")
        return

    print("\n== audio stages ==")
    for stage_id in list(FULL)[4:]:
        model = run(stage_id, args.out, max(1, int(FULL[stage_id] * scale)))

    stage = default_stage("crossmodal", seed=0)
    heldout = make_synthetic_dataset(
        replace(stage.data, samples_per_family=stage.heldout_per_family,
                with_twins=False), stage.seed + 7919)
    acc_av = evaluate(model, heldout)
    acc_v = evaluate(model, [replace(s, wave=None, has_audio=False)
                             for s in heldout])
    print(f"\n== modality comparison on occluded held-out clips ==")
    print(f"   audio+video accuracy {acc_av:.2f}")
    print(f"   video-only  accuracy {acc_v:.2f}")
    print(f"   the tone carries the answer when the region is masked")


if __name__ == "__main__":
    main()
