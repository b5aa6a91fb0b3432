"""Linear-probe fine-tuning, subject-level aggregation and screening metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .dataio import label_from_tscore
from .diffcore import functional as F
from .diffcore.nn import Linear
from .diffcore.optim import Adam
from .diffcore.tensor import Tape, Tensor
from .errors import ContractError


@dataclass
class SubjectRecord:
    subject_id: str
    segments: list[str]
    t_score: float

    @property
    def label(self) -> int:
        return label_from_tscore(self.t_score)

    def __post_init__(self):
        if not 1 <= len(self.segments) <= 7:
            raise ContractError("a subject carries between one and seven patches")


# ---------------------------------------------------------------------------
# aggregation and metrics
# ---------------------------------------------------------------------------

def aggregate_subject(patch_probs) -> tuple[int, np.ndarray]:
    """Mean of the patch probability vectors, then argmax.

    A tie between the positive class and the negative class resolves to the
    negative (index 0), which ``np.argmax`` does by returning the first maximum.
    """
    probs = np.asarray(patch_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ContractError("need at least one patch probability vector")
    mean = probs.mean(axis=0)
    return int(np.argmax(mean)), mean


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC via average ranks (ties count one half)."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def compute_metrics(predictions, scores, labels) -> dict:
    """Positive-class precision, recall and F1, plus accuracy, AUC and macro-F1.

    Undefined ratios (no predicted or no actual positives) are reported as 0.
    ``auc`` is ``None`` when only one class is present.
    """
    pred = np.asarray(predictions).astype(int)
    y = np.asarray(labels).astype(int)
    out = {}
    per_class_f1 = []
    for cls in (1, 0):
        tp = int(np.sum((pred == cls) & (y == cls)))
        fp = int(np.sum((pred == cls) & (y != cls)))
        fn = int(np.sum((pred != cls) & (y == cls)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        per_class_f1.append(_f1(p, r))
        if cls == 1:
            out.update(precision=p, recall=r, f1=_f1(p, r))
    out["accuracy"] = float(np.mean(pred == y)) if y.size else 0.0
    out["macro_f1"] = float(np.mean(per_class_f1))
    try:
        out["auc"] = auc_score(scores, y)
    except ContractError:
        out["auc"] = None
    return out


def select_best(history: list[dict], key: str = "macro_f1") -> int:
    """Index of the highest ``key``; the earliest wins ties."""
    if not history:
        raise ContractError("no checkpoints to choose from")
    values = [h[key] for h in history]
    return int(np.argmax(values))


def summarize_seeds(reports: list[dict], keys=("precision", "recall", "f1", "auc", "accuracy", "macro_f1")) -> dict:
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in reports if r.get(k) is not None], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()) if vals.size else None,
                  "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0}
    return out


def per_bone_table(segments, positive_probs) -> str:
    """CSV with columns ``segment,mean_prob,std`` in first-seen segment order."""
    groups: dict[str, list[float]] = {}
    for seg, p in zip(segments, positive_probs):
        groups.setdefault(seg, []).append(float(p))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["segment", "mean_prob", "std"])
    for seg, vals in groups.items():
        w.writerow([seg, repr(float(np.mean(vals))), repr(float(np.std(vals)))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    epochs: int = 60
    lr: float = 0.05
    weight_decay: float = 1e-4
    balanced: bool = True
    eval_every: int = 5

    def to_dict(self) -> dict:
        return asdict(self)


def class_weights(labels, balanced: bool) -> np.ndarray | None:
    if not balanced:
        return None
    y = np.asarray(labels).astype(int)
    counts = np.bincount(y, minlength=2).astype(np.float64)
    return len(y) / (2.0 * counts)


class LinearHead:
    """Affine map from standardized features to two logits."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.layer = Linear(dim, 2, rng, init="zeros")
        self.mean = np.zeros(dim)
        self.scale = np.ones(dim)

    def parameters(self):
        return self.layer.parameters()

    def logits(self, feats) -> Tensor:
        x = (np.asarray(feats) - self.mean) / self.scale
        return self.layer(Tensor(x))

    def predict_proba(self, feats) -> np.ndarray:
        return F.softmax(self.logits(feats), axis=-1).data

    def state_dict(self) -> dict:
        return {"weight": self.layer.weight.data.copy(), "bias": self.layer.bias.data.copy(),
                "mean": self.mean.copy(), "scale": self.scale.copy()}

    def load_state_dict(self, state: dict) -> None:
        self.layer.weight.data = np.asarray(state["weight"], dtype=np.float64).copy()
        self.layer.bias.data = np.asarray(state["bias"], dtype=np.float64).copy()
        self.mean = np.asarray(state["mean"], dtype=np.float64).copy()
        self.scale = np.asarray(state["scale"], dtype=np.float64).copy()


def subject_predictions(probs: np.ndarray, subjects) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Group patch probabilities by subject (first-seen order) and aggregate."""
    order: dict[str, list[int]] = {}
    for i, s in enumerate(subjects):
        order.setdefault(s, []).append(i)
    ids, preds, scores = [], [], []
    for s, idx in order.items():
        cls, mean = aggregate_subject(probs[idx])
        ids.append(s)
        preds.append(cls)
        scores.append(mean[1])
    return ids, np.array(preds), np.array(scores)


def evaluate_subjects(probs: np.ndarray, subjects, subject_labels: dict) -> dict:
    ids, preds, scores = subject_predictions(probs, subjects)
    return compute_metrics(preds, scores, [subject_labels[s] for s in ids])


def finetune(train_feats: np.ndarray, train_labels, cfg: FinetuneConfig, rng: np.random.Generator,
             val=None) -> tuple[LinearHead, list[dict]]:
    """Fit the probe by full-batch Adam on frozen features.

    ``val`` is ``(features, subject_ids, {subject: label})``; when given, the
    head is evaluated every ``eval_every`` epochs and the snapshot with the
    best validation macro-F1 is restored.
    """
    y = np.asarray(train_labels).astype(int)
    if len(np.unique(y)) < 2:
        raise ContractError("fine-tuning needs both classes in the training set")
    feats = np.asarray(train_feats, dtype=np.float64)
    head = LinearHead(feats.shape[1], rng)
    head.mean = feats.mean(axis=0)
    head.scale = feats.std(axis=0) + 1e-8
    cw = class_weights(y, cfg.balanced)
    weights = None if cw is None else cw[y]
    opt = Adam(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history, snapshots = [], []
    for epoch in range(1, cfg.epochs + 1):
        opt.zero_grad()
        with Tape() as tape:
            loss = F.cross_entropy(head.logits(feats), y, weights)
        tape.backward(loss)
        opt.step()
        if val is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            vf, vs, vl = val
            report = evaluate_subjects(head.predict_proba(vf), vs, vl)
            report.update(epoch=epoch, train_loss=loss.item())
            history.append(report)
            snapshots.append(head.state_dict())
    if history:
        head.load_state_dict(snapshots[select_best(history)])
    return head, history


def metrics_json(report: dict, seed: int | None = None) -> str:
    keys = ("precision", "recall", "f1", "auc", "accuracy", "macro_f1")
    out = {k: report.get(k) for k in keys}
    out["seed"] = seed
    return json.dumps(out, sort_keys=True, indent=1)
