"""Training losses: batch-summed cross-entropy, the margin loss against
per-identity embedding centers, the combined verification loss, the
expression loss, and the dynamically weighted overall loss.

All losses reduce by batch sum, not mean; the learning rate absorbs scale.
Centers are constants within a step: gradients flow into embeddings only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ProtocolError
from .layers import log_softmax_rows


@dataclass
class LossConfig:
    triplet_weight: float = 1e-4   # weight of the center-margin term in L1
    margin: float = 10.0           # minimum gap between own-center and other-center distances
    k_id: int = 20
    k_expr: int = 7
    center_rate: float = 0.5       # running-mean rate for center updates

    def __post_init__(self):
        if self.triplet_weight < 0:
            raise ConfigError(f"triplet_weight must be >= 0, got {self.triplet_weight}")
        if self.margin <= 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if self.k_expr not in (7, 8):
            raise ConfigError(f"k_expr must be 7 or 8, got {self.k_expr}")
        if not 0.0 < self.center_rate <= 1.0:
            raise ConfigError(f"center_rate must be in (0, 1], got {self.center_rate}")


@dataclass
class CenterBank:
    """Per-identity embedding centers, maintained as running batch means."""

    n_classes: int
    dim: int
    rate: float = 0.5
    centers: np.ndarray = field(init=False)
    initialized: np.ndarray = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise ConfigError(f"center update rate must be in (0, 1], got {self.rate}")
        self.centers = np.zeros((self.n_classes, self.dim))
        self.initialized = np.zeros(self.n_classes, dtype=bool)

    def reset(self):
        self.centers[:] = 0.0
        self.initialized[:] = False


def update_centers(bank: CenterBank, embeddings: np.ndarray, labels) -> CenterBank:
    """Fold a batch of detached embeddings into the bank.

    First sighting of a class sets its center to the class's batch mean;
    afterwards centers move by the bank's running rate. Absent classes are
    untouched.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    for cls in np.unique(labels):
        mean = embeddings[labels == cls].mean(axis=0)
        if bank.initialized[cls]:
            bank.centers[cls] = (1.0 - bank.rate) * bank.centers[cls] + bank.rate * mean
        else:
            bank.centers[cls] = mean
            bank.initialized[cls] = True
    return bank


def _check_labels(labels, k, what: str):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size < 1:
        raise DataError(f"{what}: need a nonempty 1-d label vector")
    bad = np.nonzero((labels < 0) | (labels >= k))[0]
    if bad.size:
        raise DataError(f"{what}: label {labels[bad[0]]} out of range [0, {k}) at row {bad[0]}")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch sum of -log softmax probability of the true class."""
    m, k = logits.shape
    labels = _check_labels(labels, k, "cross_entropy")
    if labels.size != m:
        raise DataError(f"cross_entropy: {m} rows but {labels.size} labels")
    onehot = np.zeros((m, k))
    onehot[np.arange(m), labels] = -1.0
    picked = ad.mul(log_softmax_rows(logits), logits.tape.leaf(onehot))
    return ad.reduce_sum(picked)


def class_wise_triplet(embeddings: Tensor, labels, bank: CenterBank,
                       margin: float) -> Tensor:
    """Sum over anchors of max(d_own + margin - d_other, 0) across every
    other initialized class; distances are Euclidean.

    Centers enter as constants, so the gradient reaches embeddings only.
    """
    m, dim = embeddings.shape
    labels = _check_labels(labels, bank.n_classes, "class_wise_triplet")
    if dim != bank.dim:
        raise ProtocolError(
            f"embedding dim {dim} != center dim {bank.dim}")
    missing = np.nonzero(~bank.initialized[labels])[0]
    if missing.size:
        raise ProtocolError(
            f"center for class {labels[missing[0]]} not initialized (seed the bank first)")

    tape = embeddings.tape
    dists = ad.pairwise_dist(embeddings, tape.leaf(bank.centers))  # (m, k)
    own = np.zeros((m, bank.n_classes))
    own[np.arange(m), labels] = 1.0
    d_own = ad.row_sum(ad.mul(dists, tape.leaf(own)))              # (m, 1)
    gaps = ad.sub(ad.add(ad.broadcast_cols(d_own, bank.n_classes), float(margin)), dists)
    hinge = ad.max_const(gaps, 0.0)
    negatives = np.broadcast_to(bank.initialized, (m, bank.n_classes)).astype(float).copy()
    negatives[np.arange(m), labels] = 0.0
    return ad.reduce_sum(ad.mul(hinge, tape.leaf(negatives)))


def verification_loss(logits: Tensor, labels, embeddings: Tensor,
                      bank: CenterBank, cfg: LossConfig) -> Tensor:
    """Identity cross-entropy plus the weighted center-margin term."""
    ce = cross_entropy(logits, labels)
    if cfg.triplet_weight == 0.0:
        return ce
    trip = class_wise_triplet(embeddings, labels, bank, cfg.margin)
    return ad.add(ce, ad.mul(trip, float(cfg.triplet_weight)))


def expression_loss(logits: Tensor, labels) -> Tensor:
    """Cross-entropy over expression categories: identical contract, with the
    class count taken from the logits width."""
    return cross_entropy(logits, labels)


def overall_loss(l1: Tensor, l2: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """(1 + w1) * L1 + w2 * L2.

    The verification task keeps a constant unit weight so it never drops out
    of the optimization even when its learned weight goes to zero.
    """
    return ad.add(ad.mul(ad.add(w1, 1.0), l1), ad.mul(w2, l2))
