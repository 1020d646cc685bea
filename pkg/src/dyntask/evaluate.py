"""Evaluation: distance-threshold verification with cross-validated
thresholds and ROC, expression classification with confusion matrices, and
the challenge-response authentication fusion.

All of it is pure over an immutable model state; embedding batches can fan
out over threads with a deterministic merge.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as modelmod
from .data import DatasetHandle, PairSet, QUADRANTS
from .errors import NumericsError, ProtocolError
from .model import ModelState


def _forward_eval(state: ModelState, images: np.ndarray, want: str) -> np.ndarray:
    tape = ad.Tape()
    lifted = modelmod.lift_params(state, tape)
    shared = modelmod.forward_shared(state, lifted, images, "eval")
    if want == "embedding":
        emb, _ = modelmod.forward_branch1(state, lifted, shared, "eval")
        return emb.data
    if want == "expression_logits":
        return modelmod.forward_branch2(state, lifted, shared, "eval").data
    raise ValueError(want)


def _batched(state: ModelState, images: np.ndarray, want: str,
             batch_size: int = 256, threads: int = 1) -> np.ndarray:
    chunks = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda ch: _forward_eval(state, ch, want), chunks))
    else:
        parts = [_forward_eval(state, ch, want) for ch in chunks]
    return np.concatenate(parts, axis=0)


def embed(state: ModelState, images: np.ndarray, batch_size: int = 256,
          threads: int = 1) -> np.ndarray:
    """Bottleneck activations, length-normalized to unit Euclidean norm."""
    raw = _batched(state, images, "embedding", batch_size, threads)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericsError("cannot normalize an all-zero embedding")
    return raw / norms


def embed_records(state: ModelState, handle: DatasetHandle, indices=None,
                  batch_size: int = 256, threads: int = 1) -> np.ndarray:
    indices = np.arange(len(handle)) if indices is None else np.asarray(indices)
    return embed(state, handle.batch_images(indices), batch_size, threads)


# ---------------------------------------------------------------------------
# verification


@dataclass
class VerifReport:
    accuracy_mean: float
    accuracy_std: float
    fold_accuracies: np.ndarray
    fold_thresholds: np.ndarray
    roc: np.ndarray          # rows of (threshold, fpr, tpr)
    auc: float

    @property
    def calibrated_threshold(self) -> float:
        return float(self.fold_thresholds.mean())


def best_threshold(distances: np.ndarray, same: np.ndarray):
    """Exhaustive accuracy maximization over midpoints of the sorted
    distances (with sentinels past both ends); ties pick the smallest
    threshold. Decision rule: same iff distance <= threshold."""
    distances = np.asarray(distances, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    uniq = np.unique(distances)
    candidates = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0,
                                 [uniq[-1] + 1.0]])
    hits = (distances[None, :] <= candidates[:, None]) == same[None, :]
    accs = hits.mean(axis=1)
    best = int(np.argmax(accs))  # first max: smallest threshold
    return float(candidates[best]), float(accs[best])


def pair_distances(embeddings: np.ndarray, pairs: PairSet) -> np.ndarray:
    return np.linalg.norm(embeddings[pairs.a] - embeddings[pairs.b], axis=1)


def roc_curve(distances: np.ndarray, same: np.ndarray, points: int = 1000) -> np.ndarray:
    """(threshold, fpr, tpr) rows over a sweep of the full distance range,
    anchored so the curve starts at (0,0) and ends at (1,1)."""
    lo, hi = float(distances.min()), float(distances.max())
    thresholds = np.concatenate([[lo - 1.0], np.linspace(lo, hi, points - 1)])
    pred = distances[None, :] <= thresholds[:, None]
    pos = same.sum()
    neg = len(same) - pos
    tpr = (pred & same[None, :]).sum(axis=1) / max(pos, 1)
    fpr = (pred & ~same[None, :]).sum(axis=1) / max(neg, 1)
    return np.column_stack([thresholds, fpr, tpr])


def verify_pairs(embeddings: np.ndarray, pairs: PairSet,
                 roc_points: int = 1000) -> VerifReport:
    """Cross-validated threshold accuracy: for each fold, the threshold is
    chosen on the other folds and scored on the held-out one."""
    if pairs.n_folds < 2:
        raise ProtocolError("verification needs >= 2 folds")
    distances = pair_distances(embeddings, pairs)
    accs, thresholds = [], []
    for f in range(pairs.n_folds):
        test = pairs.fold == f
        train = ~test
        for part, name in ((train, "training"), (test, "held-out")):
            if pairs.same[part].all() or not pairs.same[part].any():
                raise ProtocolError(
                    f"fold {f}: {name} pairs are single-class; cannot evaluate")
        t, _ = best_threshold(distances[train], pairs.same[train])
        thresholds.append(t)
        accs.append(float(np.mean((distances[test] <= t) == pairs.same[test])))
    accs = np.array(accs)
    roc = roc_curve(distances, pairs.same, roc_points)
    auc = float(np.trapezoid(roc[:, 2], roc[:, 1]))
    return VerifReport(accuracy_mean=float(accs.mean()), accuracy_std=float(accs.std()),
                       fold_accuracies=accs, fold_thresholds=np.array(thresholds),
                       roc=roc, auc=auc)


# ---------------------------------------------------------------------------
# expression classification


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows ground truth, columns predicted

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def classify_expressions(state: ModelState, handle: DatasetHandle, indices=None,
                         batch_size: int = 256, threads: int = 1):
    """Argmax of the expression branch (ties resolve to the lowest id);
    returns predictions and the confusion matrix against ground truth."""
    indices = np.arange(len(handle)) if indices is None else np.asarray(indices)
    logits = _batched(state, handle.batch_images(indices), "expression_logits",
                      batch_size, threads)
    preds = logits.argmax(axis=1)
    k = handle.k_expr
    counts = np.zeros((k, k), dtype=int)
    truth = handle.expressions[indices]
    np.add.at(counts, (truth, preds), 1)
    return preds, ConfusionMatrix(counts=counts)


# ---------------------------------------------------------------------------
# authentication fusion


@dataclass
class AuthDecision:
    verif: bool              # distance within threshold
    live: bool               # predicted expression == required expression
    predicted_expression: int
    distance: float

    @property
    def auth(self) -> bool:
        return self.verif and self.live


@dataclass
class AuthReport:
    acc_auth: float
    acc_verif: float
    acc_expre: float
    acc_live: float
    table: dict = field(default_factory=dict)  # quadrant -> {n, auth_positive}


def authenticate(state: ModelState, handle: DatasetHandle, samples,
                 threshold: float, batch_size: int = 256,
                 threads: int = 1) -> list:
    """Joint decision per trial: verification distance within the calibrated
    threshold AND the responded expression matches the demanded one."""
    users = np.array([s.user for s in samples])
    refs = np.array([s.reference for s in samples])
    uniq = np.unique(np.concatenate([users, refs]))
    emb = embed_records(state, handle, uniq, batch_size, threads)
    pos = {int(r): i for i, r in enumerate(uniq)}
    preds, _ = classify_expressions(state, handle, users, batch_size, threads)

    decisions = []
    for s, pred in zip(samples, preds):
        d = float(np.linalg.norm(emb[pos[s.user]] - emb[pos[s.reference]]))
        decisions.append(AuthDecision(
            verif=bool(d <= threshold),
            live=bool(int(pred) == s.required_expression),
            predicted_expression=int(pred),
            distance=d))
    return decisions


def auth_metrics(decisions, samples, handle: DatasetHandle) -> AuthReport:
    """Table-style accuracies: verification against the identity flag,
    liveness against the expression flag, expression against the user image's
    true label, and the fused decision against the AND of both flags."""
    if not decisions:
        raise ProtocolError("no authentication decisions to score")
    id_flags = np.array([s.same_identity for s in samples])
    ex_flags = np.array([s.expression_matches(handle) for s in samples])
    true_exprs = np.array([handle.records[s.user].expression for s in samples])
    verif = np.array([d.verif for d in decisions])
    live = np.array([d.live for d in decisions])
    auth = np.array([d.auth for d in decisions])
    preds = np.array([d.predicted_expression for d in decisions])

    table = {q: {"n": 0, "auth_positive": 0} for q in QUADRANTS}
    for s, d in zip(samples, decisions):
        key = ("ID-True" if s.same_identity else "ID-False",
               "Ex-True" if s.expression_matches(handle) else "Ex-False")
        table[key]["n"] += 1
        table[key]["auth_positive"] += int(d.auth)

    return AuthReport(
        acc_auth=float(np.mean(auth == (id_flags & ex_flags))),
        acc_verif=float(np.mean(verif == id_flags)),
        acc_expre=float(np.mean(preds == true_exprs)),
        acc_live=float(np.mean(live == ex_flags)),
        table=table)
