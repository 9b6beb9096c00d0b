"""Recognition and transcription metrics: UAR, WAR, WER, ROUGE-L.

UAR treats every class as equally important (mean per-class recall), WAR is
plain accuracy, WER is word-level edit distance over the reference length,
and ROUGE-L is the LCS-based F-score with a recall-leaning beta.
"""
from __future__ import annotations

import csv
import json
import string
from dataclasses import dataclass

import numpy as np

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


@dataclass
class ConfusionMatrix:
    """Square count matrix; rows are true classes, columns predictions."""

    counts: np.ndarray
    labels: tuple = None

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {c.shape}")
        if not np.issubdtype(c.dtype, np.integer):
            if not np.all(c == np.round(c)):
                raise ValueError("confusion counts must be integers")
            c = c.astype(np.int64)
        if np.any(c < 0):
            raise ValueError("confusion counts must be non-negative")
        if not np.any(c.sum(axis=1) > 0):
            raise ValueError("confusion matrix has no true samples")
        self.counts = c
        if self.labels is not None:
            self.labels = tuple(self.labels)
            if len(self.labels) != c.shape[0]:
                raise ValueError("labels length must match matrix size")

    @classmethod
    def from_pairs(cls, true_labels, pred_labels, labels=None) -> "ConfusionMatrix":
        true_labels = list(true_labels)
        pred_labels = list(pred_labels)
        if len(true_labels) != len(pred_labels):
            raise ValueError("true/pred label lists differ in length")
        if not true_labels:
            raise ValueError("no label pairs")
        if labels is None:
            labels = sorted(set(true_labels) | set(pred_labels))
        index = {lab: i for i, lab in enumerate(labels)}
        counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
        for t, p in zip(true_labels, pred_labels):
            if t not in index or p not in index:
                raise ValueError(f"label {t!r}/{p!r} outside {list(labels)}")
            counts[index[t], index[p]] += 1
        return cls(counts, labels=tuple(labels))


def uar(cm: ConfusionMatrix) -> float:
    """Mean per-class recall; classes with no true samples are excluded."""
    counts = cm.counts
    row_sums = counts.sum(axis=1)
    present = row_sums > 0
    if not np.any(present):
        raise ValueError("all classes empty")
    recalls = np.diag(counts)[present] / row_sums[present]
    return float(np.mean(recalls))


def war(cm: ConfusionMatrix) -> float:
    """Overall accuracy: trace over total count."""
    total = cm.counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts) / total)


def normalize_words(text) -> list:
    """Lowercase, strip punctuation, collapse whitespace; accepts str or words."""
    if isinstance(text, str):
        words = text.split()
    else:
        words = [str(w) for w in text]
    out = []
    for w in words:
        w = w.lower().translate(_PUNCT_TABLE).strip()
        if w:
            out.append(w)
    return out


def _edit_distance(ref, hyp) -> int:
    # one rolling row; distances are small ints
    prev = np.arange(len(hyp) + 1)
    for i, r in enumerate(ref, start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return int(prev[-1])


def wer(ref, hyp) -> float:
    """Word error rate: edit distance / reference length. Can exceed 1."""
    ref_w = normalize_words(ref)
    hyp_w = normalize_words(hyp)
    if not ref_w:
        raise ValueError("empty reference after normalization")
    return _edit_distance(ref_w, hyp_w) / len(ref_w)


def _lcs_length(a, b) -> int:
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    for x in a:
        cur = np.zeros_like(prev)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return int(prev[-1])


def rouge_l(ref, hyp, beta: float = 1.2) -> float:
    """LCS F-score: (1+b^2)RP / (R + b^2 P); 0 when nothing is shared."""
    ref_t = list(ref.split()) if isinstance(ref, str) else list(ref)
    hyp_t = list(hyp.split()) if isinstance(hyp, str) else list(hyp)
    if not ref_t or not hyp_t:
        raise ValueError("rouge_l inputs must be non-empty")
    lcs = _lcs_length(ref_t, hyp_t)
    if lcs == 0:
        return 0.0
    recall = lcs / len(ref_t)
    precision = lcs / len(hyp_t)
    b2 = beta * beta
    return float((1 + b2) * recall * precision / (recall + b2 * precision))


# --------------------------------------------------------- prediction files

TEXT_KEYS = {"id", "ref", "hyp"}
LABEL_KEYS = {"id", "true_label", "pred_label"}


def read_predictions(path) -> list:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({e})") from e
            keys = set(rec)
            if not (TEXT_KEYS <= keys or LABEL_KEYS <= keys):
                raise ValueError(
                    f"{path}:{lineno}: need keys {sorted(TEXT_KEYS)} "
                    f"or {sorted(LABEL_KEYS)}, got {sorted(keys)}")
            records.append(rec)
    if not records:
        raise ValueError(f"{path}: no prediction records")
    kinds = {("text" if TEXT_KEYS <= set(r) else "label") for r in records}
    if len(kinds) > 1:
        raise ValueError(f"{path}: mixed text and label records")
    return records


def score_text_predictions(records, beta: float = 1.2) -> dict:
    wers = [wer(r["ref"], r["hyp"]) for r in records]
    rouges = [rouge_l(r["ref"], r["hyp"], beta=beta) for r in records]
    return {"kind": "text", "n": len(records),
            "wer": float(np.mean(wers)), "rouge_l": float(np.mean(rouges))}


def score_label_predictions(records) -> dict:
    cm = ConfusionMatrix.from_pairs([r["true_label"] for r in records],
                                    [r["pred_label"] for r in records])
    return {"kind": "label", "n": len(records),
            "uar": uar(cm), "war": war(cm), "labels": list(cm.labels)}


def score_prediction_file(path, beta: float = 1.2) -> dict:
    records = read_predictions(path)
    if TEXT_KEYS <= set(records[0]):
        return score_text_predictions(records, beta=beta)
    return score_label_predictions(records)


def report_csv(metrics: dict, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for key, value in metrics.items():
            if isinstance(value, (int, float, str)):
                writer.writerow([key, value])
            else:
                writer.writerow([key, json.dumps(value)])


def format_report(metrics: dict) -> str:
    width = max(len(k) for k in metrics)
    lines = ["evaluation report", "-" * (width + 12)]
    for key, value in metrics.items():
        shown = f"{value:.4f}" if isinstance(value, float) else str(value)
        lines.append(f"{key.ljust(width)}  {shown}")
    return "\n".join(lines)
