"""The four recognition metrics, with worked examples.

Run:  python3 demos/metrics_tour.py
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from omnifuse.eval_metrics import (
    ConfusionMatrix,
    format_report,
    rouge_l,
    score_prediction_file,
    uar,
    war,
    wer,
)


def recall_metrics():
    print("== UAR vs WAR on an imbalanced confusion matrix ==")
    cm = ConfusionMatrix(np.array([[3, 0], [1, 1]]))
    print("   matrix [[3,0],[1,1]]: class recalls 1.00 and 0.50")
    print(f"   WAR (plain accuracy)      {war(cm):.3f}  <- majority class wins")
    print(f"   UAR (mean class recall)   {uar(cm):.3f}  <- imbalance ignored")


def word_error_rate():
    print("== WER is edit distance over reference length ==")
    pairs = [("a b c d e", "a b c d e"),
             ("a b c d e", "a x c e"),
             ("a", "x y z")]
    for ref, hyp in pairs:
        print(f"   ref {ref!r:14s} hyp {hyp!r:14s} wer {wer(ref, hyp):.2f}")
    print("   normalization: case and punctuation are ignored")
    print(f"   wer('Hello, World!', 'hello world') = "
          f"{wer('Hello, World!', 'hello world'):.2f}")


def rouge():
    print("== ROUGE-L rewards long common subsequences ==")
    ref = "a man walks a brown dog in the park"
    for hyp in (ref, "a man walks the dog", "the park has a dog", "cats"):
        print(f"   hyp {hyp!r:38s} rouge-l {rouge_l(ref, hyp):.3f}")


def file_scoring():
    print("== scoring a predictions file ==")
    rows = [{"id": "1", "ref": "the dog runs", "hyp": "the dog runs"},
            {"id": "2", "ref": "a man smiles", "hyp": "a man waves"},
            {"id": "3", "ref": "rain falls", "hyp": "rain falls hard"}]
    path = Path(tempfile.mkdtemp()) / "preds.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    print("   " + format_report(score_prediction_file(path)).replace("\n", "\n   "))


if __name__ == "__main__":
    recall_metrics()
    word_error_rate()
    rouge()
    file_scoring()
