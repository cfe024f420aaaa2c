"""Closed-set accuracy, known-vs-unknown AUROC and the evaluation report."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from ._io import atomic_write_text
from .data import UNKNOWN, Dataset
from .model import ModelState, forward_classify
from .resample import resize_images
from .tensor import no_grad

__all__ = [
    "ScoredPrediction",
    "EvalReport",
    "EvaluationError",
    "MAX_SOFTMAX",
    "MESH_CLASS",
    "accuracy",
    "known_score",
    "auroc",
    "auroc_bruteforce",
    "evaluate",
    "score_logits",
]

MAX_SOFTMAX = "max_softmax"
MESH_CLASS = "mesh_class"


class EvaluationError(ValueError):
    """Raised when a metric is undefined for the given samples."""


@dataclass
class ScoredPrediction:
    predicted_class: int
    confidence: float
    known_score: float
    true_label: int


@dataclass
class EvalReport:
    acc: float
    auroc: float | None
    n_known: int
    n_unknown: int
    score_rule: str
    per_class_acc: list[float] = field(default_factory=list)

    def to_tsv(self) -> str:
        auroc = "NA" if self.auroc is None else repr(self.auroc)
        per_class = ",".join("NA" if np.isnan(a) else repr(a) for a in self.per_class_acc)
        rows = [
            ("acc", repr(self.acc)),
            ("auroc", auroc),
            ("n_known", str(self.n_known)),
            ("n_unknown", str(self.n_unknown)),
            ("score_rule", self.score_rule),
            ("per_class_acc", per_class),
        ]
        return "".join(f"{k}\t{v}\n" for k, v in rows)

    @classmethod
    def from_tsv(cls, text: str) -> EvalReport:
        kv = dict(line.split("\t", 1) for line in text.splitlines() if line)
        per_class = [float("nan") if a == "NA" else float(a) for a in kv["per_class_acc"].split(",") if a]
        return cls(
            acc=float(kv["acc"]),
            auroc=None if kv["auroc"] == "NA" else float(kv["auroc"]),
            n_known=int(kv["n_known"]),
            n_unknown=int(kv["n_unknown"]),
            score_rule=kv["score_rule"],
            per_class_acc=per_class,
        )

    def to_table(self, title: str = "") -> str:
        auroc = "n/a" if self.auroc is None else f"{100 * self.auroc:6.2f}"
        lines = [title] if title else []
        lines += [
            f"{'ACC':<10}{100 * self.acc:6.2f}",
            f"{'AUROC':<10}{auroc}",
            f"{'known':<10}{self.n_known:6d}",
            f"{'unknown':<10}{self.n_unknown:6d}",
            f"{'rule':<10}{self.score_rule}",
        ]
        for k, a in enumerate(self.per_class_acc):
            lines.append(f"  class {k:<3}{'   n/a' if np.isnan(a) else f'{100 * a:6.2f}'}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, self.to_tsv())


def accuracy(predictions: list[ScoredPrediction]) -> float:
    """Fraction of known-label predictions that hit their label; UNKNOWN samples are skipped."""
    known = [p for p in predictions if p.true_label != UNKNOWN]
    if not known:
        raise EvaluationError("accuracy needs at least one known-label sample")
    return sum(p.predicted_class == p.true_label for p in known) / len(known)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def known_score(class_logits, rule: str = MAX_SOFTMAX) -> float:
    """Higher means more likely a known class.

    ``max_softmax`` returns the top softmax probability; ``mesh_class`` treats
    the last logit as the UNKNOWN class and returns one minus its probability.
    """
    logits = np.asarray(class_logits, dtype=np.float64).reshape(-1)
    if logits.size < 1:
        raise EvaluationError("known_score needs at least one logit")
    p = _softmax(logits)
    if rule == MAX_SOFTMAX:
        return float(p.max())
    if rule == MESH_CLASS:
        return float(1.0 - p[-1])
    raise EvaluationError(f"unknown score rule {rule!r}")


def auroc(scores_known, scores_unknown) -> float:
    """Mann-Whitney AUROC, P(known > unknown) + P(tie)/2, from midranks."""
    k = np.asarray(scores_known, dtype=np.float64).reshape(-1)
    u = np.asarray(scores_unknown, dtype=np.float64).reshape(-1)
    if k.size == 0 or u.size == 0:
        raise EvaluationError("auroc needs non-empty known and unknown score lists")
    ranks = rankdata(np.concatenate([k, u]), method="average")
    # Integer-valued numerator when doubled: 2*U = 2*R_k - n_k(n_k+1).
    u2 = 2.0 * ranks[: k.size].sum() - k.size * (k.size + 1)
    return float(u2 / (2.0 * k.size * u.size))


def auroc_bruteforce(scores_known, scores_unknown) -> float:
    """Pairwise reference: sum of [s_k > s_u] + 0.5 [s_k == s_u] over all pairs."""
    k = np.asarray(scores_known, dtype=np.float64).reshape(-1, 1)
    u = np.asarray(scores_unknown, dtype=np.float64).reshape(1, -1)
    if k.size == 0 or u.size == 0:
        raise EvaluationError("auroc needs non-empty known and unknown score lists")
    wins = (k > u).sum() * 2 + (k == u).sum()
    return float(wins / (2.0 * k.size * u.size))


def score_logits(logits: np.ndarray, labels: np.ndarray, rule: str) -> list[ScoredPrediction]:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    probs = _softmax(logits)
    out = []
    for row, p, y in zip(logits, probs, labels):
        out.append(ScoredPrediction(int(p.argmax()), float(p.max()), known_score(row, rule), int(y)))
    return out


def report_from_predictions(
    predictions: list[ScoredPrediction], num_classes: int, rule: str
) -> EvalReport:
    known = [p for p in predictions if p.true_label != UNKNOWN]
    unknown = [p for p in predictions if p.true_label == UNKNOWN]
    acc = accuracy(predictions)
    score = None
    if known and unknown:
        score = auroc([p.known_score for p in known], [p.known_score for p in unknown])
    per_class = []
    for c in range(num_classes):
        members = [p for p in known if p.true_label == c]
        per_class.append(
            sum(p.predicted_class == c for p in members) / len(members) if members else float("nan")
        )
    return EvalReport(acc, score, len(known), len(unknown), rule, per_class)


def predict_logits(state: ModelState, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class logits for (N, H, W, C) images, resized to the model's resolution."""
    size = state.config.image_size
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            batch = resize_images(np.asarray(images[start : start + batch_size], dtype=np.float64), size)
            out.append(forward_classify(batch, state).data)
    if not out:
        return np.zeros((0, state.config.num_classes))
    return np.concatenate(out)


def evaluate(
    state: ModelState,
    codebook,
    dataset: Dataset,
    rule: str | None = None,
    batch_size: int = 64,
) -> EvalReport:
    """Classify every image and summarise accuracy and known-vs-unknown AUROC.

    The rule defaults to ``mesh_class`` when the head has one more output than
    the dataset has classes, and ``max_softmax`` otherwise. ``codebook`` is
    accepted for pipeline symmetry and is not used by classification.
    """
    if rule is None:
        rule = MESH_CLASS if state.config.num_classes == dataset.num_classes + 1 else MAX_SOFTMAX
    logits = predict_logits(state, dataset.images, batch_size)
    preds = score_logits(logits, dataset.labels, rule)
    return report_from_predictions(preds, dataset.num_classes, rule)
