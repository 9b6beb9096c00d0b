"""Command-line entry points tying curation, staged training, evaluation,
and checkpoint inspection together.

Every command resolves one Config (file < environment < flags), writes it to
`<out>/resolved_config.json` for byte-diff auditing, and reports failures as
a single machine-readable JSON object on stderr with a nonzero exit code.
"""

import argparse
import json
import os
import sys

from .config import Config, load_config
from .curation_pipeline import (
    ClientError,
    Manifest,
    make_synthetic_corpus,
    pipeline_report,
    run_pipeline,
)
from .eval_metrics import format_report, report_csv, score_prediction_file
from .model import OmniModel
from .training_stages import (
    DataSpec,
    FAMILIES,
    LineageError,
    featurize_samples,
    make_synthetic_dataset,
    run_pipeline_stage,
    sample_directive,
    specialization_report,
    stage_checkpoint,
)


class CliError(Exception):
    """User-facing failure with an error category and exit code."""

    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    # raise instead of sys.exit so every failure path emits error JSON
    def error(self, message):
        raise CliError("usage", message, code=2)


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset copy of a shared flag from wiping
    # out a value parsed before the subcommand name
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="path to a JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override the run seed")
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="artifact directory (default runs/)")
    common.add_argument("--clients", choices=("mock", "http"),
                        default=argparse.SUPPRESS,
                        help="external model client implementation")
    common.add_argument("--stage-steps", type=int, dest="stage_steps",
                        default=argparse.SUPPRESS,
                        help="override optimizer steps for training commands")

    parser = _Parser(prog="omnifuse", description=__doc__,
                     parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("curate", parents=[common],
                   help="run the clip curation pipeline on the bundled corpus")

    p = sub.add_parser("pretrain-branch", parents=[common],
                       help="pretrain one visual branch projector")
    p.add_argument("branch", choices=FAMILIES)

    sub.add_parser("finetune-visual", parents=[common],
                   help="train fusion gating and decoder on all branches")
    sub.add_parser("train-audio", parents=[common],
                   help="align the audio projector")
    sub.add_parser("train-omni", parents=[common],
                   help="joint audio-visual training stage")

    p = sub.add_parser("eval", parents=[common],
                       help="score a JSONL predictions file")
    p.add_argument("predictions", help="JSONL with id/ref/hyp or label pairs")

    p = sub.add_parser("infer", parents=[common],
                       help="run a trained checkpoint on fresh synthetic clips")
    p.add_argument("--samples", type=int, default=3,
                   help="clips per instruction family")
    p.add_argument("--with-audio", action="store_true",
                   help="attach answer tones to the generated clips")
    p.add_argument("--checkpoint", help="explicit checkpoint path")

    p = sub.add_parser("inspect-weights", parents=[common],
                       help="print the three fusion weights for an instruction")
    p.add_argument("instruction")
    p.add_argument("--checkpoint", help="explicit checkpoint path")

    return parser


def resolve(args) -> Config:
    overrides = {"seed": getattr(args, "seed", None),
                 "out_dir": getattr(args, "out", None),
                 "clients": getattr(args, "clients", None),
                 "stage_steps": getattr(args, "stage_steps", None)}
    try:
        return load_config(path=getattr(args, "config", None),
                           overrides=overrides)
    except ValueError as e:
        raise CliError("config", str(e), code=2) from e


def log_resolved(cfg: Config) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "resolved_config.json"), "w") as f:
        f.write(cfg.resolved_json())


def _load_lineage_checkpoint(cfg: Config, explicit=None):
    if explicit:
        if not os.path.exists(explicit):
            raise LineageError(f"missing lineage checkpoint {explicit!r}: "
                               f"no such file")
        return OmniModel.from_checkpoint(explicit)
    for stage_id in ("crossmodal", "audio_align", "visual_finetune"):
        path = stage_checkpoint(cfg.out_dir, stage_id)
        if os.path.exists(path):
            return OmniModel.from_checkpoint(path)
    missing = stage_checkpoint(cfg.out_dir, "visual_finetune")
    raise LineageError(f"missing lineage checkpoint {missing!r}: "
                       f"run the visual_finetune stage first")


# ----------------------------------------------------------------- commands

def cmd_curate(cfg: Config, args) -> int:
    records, frame_store, _ = make_synthetic_corpus(seed=cfg.seed)
    manifest = Manifest(records=records)
    path = os.path.join(cfg.out_dir, "manifest.jsonl")
    run_pipeline(manifest, cfg.curation(), cfg.client_set(), frame_store,
                 save_path=path)
    report = pipeline_report(manifest)
    report["manifest"] = path
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


def _run_training(cfg: Config, stage_id: str) -> int:
    model, log = run_pipeline_stage(stage_id, cfg.out_dir, seed=cfg.seed,
                                    dims=cfg.model_dims(),
                                    **cfg.stage_overrides())
    summary = {"stage": stage_id, "seed": cfg.seed,
               "steps": len(log.rows),
               "final_accuracy": log.final_accuracy,
               "checkpoint": log.checkpoint_path}
    if stage_id == "visual_finetune":
        summary["specialization"] = specialization_report(model)
    print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


def cmd_eval(cfg: Config, args) -> int:
    try:
        metrics = score_prediction_file(args.predictions)
    except OSError as e:
        raise CliError("io", f"cannot read {args.predictions!r}: {e}") from e
    print(format_report(metrics))
    report_csv(metrics, os.path.join(cfg.out_dir, "metrics.csv"))
    return 0


def cmd_infer(cfg: Config, args) -> int:
    if cfg.input_px != 64:
        raise CliError("config", "infer renders 64 px synthetic clips; "
                                 "set input_px to 64")
    model, _ = _load_lineage_checkpoint(cfg, args.checkpoint)
    spec = DataSpec(samples_per_family=max(1, args.samples),
                    av_fraction=1.0 if args.with_audio else 0.0,
                    with_twins=False)
    samples = make_synthetic_dataset(spec, cfg.seed)
    feats = featurize_samples(model, samples)
    hits = 0
    for sample, feat in zip(samples, feats):
        predicted = model.predict_word(feat, sample_directive(sample))
        hits += predicted == sample.answer
        print(json.dumps({"family": sample.family,
                          "instruction": sample.instruction,
                          "answer": sample.answer,
                          "predicted": predicted,
                          "correct": predicted == sample.answer}))
    print(json.dumps({"accuracy": hits / len(samples)}))
    return 0


def cmd_inspect_weights(cfg: Config, args) -> int:
    model, _ = _load_lineage_checkpoint(cfg, args.checkpoint)
    w = model.fusion_weights_for(args.instruction)
    print(json.dumps({"instruction": args.instruction,
                      "weights": {"face": w.w1, "body": w.w2,
                                  "interaction": w.w3},
                      "sum": w.w1 + w.w2 + w.w3},
                     indent=2))
    return 0


_TRAIN_STAGES = {
    "finetune-visual": "visual_finetune",
    "train-audio": "audio_align",
    "train-omni": "crossmodal",
}


def dispatch(args) -> int:
    if not args.command:
        raise CliError("usage", "a command is required "
                                "(curate, pretrain-branch, finetune-visual, "
                                "train-audio, train-omni, eval, infer, "
                                "inspect-weights)", code=2)
    cfg = resolve(args)
    log_resolved(cfg)
    if args.command == "curate":
        return cmd_curate(cfg, args)
    if args.command == "pretrain-branch":
        return _run_training(cfg, f"branch_pretrain_{args.branch}")
    if args.command in _TRAIN_STAGES:
        return _run_training(cfg, _TRAIN_STAGES[args.command])
    if args.command == "eval":
        return cmd_eval(cfg, args)
    if args.command == "infer":
        return cmd_infer(cfg, args)
    if args.command == "inspect-weights":
        return cmd_inspect_weights(cfg, args)
    raise CliError("usage", f"unknown command {args.command!r}", code=2)


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return dispatch(args)
    except CliError as e:
        return _fail(e.kind, str(e), e.code)
    except LineageError as e:
        return _fail("lineage", str(e), 3)
    except ClientError as e:
        return _fail("client", str(e), 4)
    except ValueError as e:
        return _fail("invalid-input", str(e), 1)


if __name__ == "__main__":
    sys.exit(main())
