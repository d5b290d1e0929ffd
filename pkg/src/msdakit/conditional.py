"""Conditional distribution alignment: dual pseudo-label generation
(discriminative vs. structural), consistency filtering with a growing
selection quota, confidence-scheduled fusion, and the prototype-guided
conditional loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionError, EmptyDomainError, InfeasibleClusteringError
from .marginal import FusionWeights, PrototypeBank
from .numerics import Tensor, class_distance_matrix, mean_all, mul, sum_all


# -- pseudo-label records ------------------------------------------------------


@dataclass
class PseudoLabelRecord:
    """One target sample's dual pseudo-label state for an epoch."""

    sample_id: int
    p_disc: np.ndarray
    p_struct: np.ndarray
    y_disc: int
    y_struct: int
    consistent: bool
    fused_p: np.ndarray
    fused_y: int
    confidence: float
    selected: bool = False


@dataclass
class ClusterState:
    """Result of Lloyd iterations over target features."""

    centers: np.ndarray
    assignment: np.ndarray
    iteration_count: int
    converged: bool
    objective_history: list[float] = field(default_factory=list)


def _softmax_neg_dist(feats: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Rows of softmax(-distance to each center), computed stably."""
    d = cdist(feats, centers)
    z = -d
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -- discriminative pseudo-labels ---------------------------------------------


def disc_pseudo_probs(
    target_feats, banks: list[PrototypeBank], weights: FusionWeights
) -> np.ndarray:
    """Class probabilities from distances to each branch's prototypes.

    ``target_feats`` is either one NxK array used for every branch or a
    list of per-branch arrays. Branch probability vectors are combined
    by the fusion-weighted average.
    """
    if isinstance(target_feats, np.ndarray):
        feats_per_branch = [target_feats] * len(banks)
    else:
        feats_per_branch = list(target_feats)
    if len(feats_per_branch) != len(banks):
        raise DimensionError(
            f"disc_pseudo_probs: {len(feats_per_branch)} feature sets for {len(banks)} banks"
        )
    if len(banks) != weights.num_sources:
        raise DimensionError(
            f"disc_pseudo_probs: {len(banks)} banks vs {weights.num_sources} weights"
        )
    out = None
    for feats, bank, w in zip(feats_per_branch, banks, weights.final):
        bank.require_complete()
        probs = _softmax_neg_dist(np.asarray(feats, dtype=np.float64), bank.prototypes)
        out = w * probs if out is None else out + w * probs
    return out


# -- structural pseudo-labels ---------------------------------------------------


def cluster_target(
    target_feats: np.ndarray,
    init_centers: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> ClusterState:
    """Lloyd iterations from the given initialization.

    Assignment ties break to the lowest cluster index. A cluster left
    empty is re-seeded to the sample farthest from its former center.
    The recorded objective (sum of squared distances to assigned
    centers) is non-increasing across iterations.
    """
    feats = np.asarray(target_feats, dtype=np.float64)
    centers = np.array(init_centers, dtype=np.float64, copy=True)
    n, c = feats.shape[0], centers.shape[0]
    if c > n:
        raise InfeasibleClusteringError(f"{c} clusters for {n} samples")
    assignment = np.zeros(n, dtype=np.int64)
    history: list[float] = []
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        sq = cdist(feats, centers, "sqeuclidean")
        assignment = sq.argmin(axis=1)
        history.append(float(sq[np.arange(n), assignment].sum()))
        new_centers = centers.copy()
        for k in range(c):
            mask = assignment == k
            if mask.any():
                new_centers[k] = feats[mask].mean(axis=0)
            else:
                far = np.argmax(((feats - centers[k]) ** 2).sum(axis=1))
                new_centers[k] = feats[far]
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if shift < tol:
            converged = True
            break
    # Final assignment consistent with the final centers.
    assignment = cdist(feats, centers, "sqeuclidean").argmin(axis=1)
    return ClusterState(centers, assignment, iteration, converged, history)


def struct_pseudo_probs(target_feats: np.ndarray, state: ClusterState) -> np.ndarray:
    """Softmax over negative distances to the cluster centers."""
    return _softmax_neg_dist(np.asarray(target_feats, dtype=np.float64), state.centers)


# -- fusion and selection --------------------------------------------------------


def fusion_coefficient(t: int, total_epochs: int, k: float) -> float:
    """Structural-side mixing weight: a sigmoid in the epoch index that
    crosses 0.5 exactly at mid-training."""
    if k <= 0.0:
        raise ValueError(f"fusion steepness k must be positive, got {k}")
    return 1.0 / (1.0 + math.exp(-k * (t - total_epochs / 2.0)))


def fuse_pseudo(
    p_disc: np.ndarray, p_struct: np.ndarray, t: int, total_epochs: int, k: float
) -> tuple[np.ndarray, np.ndarray]:
    """Blend both probability views; the structural weight grows with t.

    Returns the fused probabilities and their argmax labels (ties break
    to the lowest class index).
    """
    p_disc = np.atleast_2d(np.asarray(p_disc, dtype=np.float64))
    p_struct = np.atleast_2d(np.asarray(p_struct, dtype=np.float64))
    if p_disc.shape != p_struct.shape:
        raise DimensionError(f"fuse_pseudo: shapes {p_disc.shape} vs {p_struct.shape}")
    chi = fusion_coefficient(t, total_epochs, k)
    fused = chi * p_struct + (1.0 - chi) * p_disc
    return fused, fused.argmax(axis=1)


def build_records(
    p_disc: np.ndarray, p_struct: np.ndarray, t: int, total_epochs: int, k: float
) -> list[PseudoLabelRecord]:
    """Assemble the per-sample dual pseudo-label records for one epoch."""
    fused, fused_y = fuse_pseudo(p_disc, p_struct, t, total_epochs, k)
    y_disc = p_disc.argmax(axis=1)
    y_struct = p_struct.argmax(axis=1)
    records = []
    for i in range(p_disc.shape[0]):
        records.append(
            PseudoLabelRecord(
                sample_id=i,
                p_disc=p_disc[i],
                p_struct=p_struct[i],
                y_disc=int(y_disc[i]),
                y_struct=int(y_struct[i]),
                consistent=bool(y_disc[i] == y_struct[i]),
                fused_p=fused[i],
                fused_y=int(fused_y[i]),
                confidence=float(fused[i].max()),
            )
        )
    return records


def select_consistent(
    records: list[PseudoLabelRecord], t: int, total_epochs: int
) -> list[PseudoLabelRecord]:
    """Mark and return the highest-confidence consistent records.

    The quota is floor(t * N / T) over the full target count N, capped
    by the number of consistent records; confidence ties break to the
    lower sample id. Selection may be empty early in training.
    """
    if not 1 <= t <= total_epochs:
        raise ValueError(f"epoch {t} outside [1, {total_epochs}]")
    for r in records:
        r.selected = False
    quota = (t * len(records)) // total_epochs
    pool = [r for r in records if r.consistent]
    pool.sort(key=lambda r: (-r.confidence, r.sample_id))
    chosen = pool[: min(quota, len(pool))]
    for r in chosen:
        r.selected = True
    return chosen


# -- prototype-guided conditional loss --------------------------------------------


def pgca_loss(
    selected_feats,
    labels,
    banks: list[PrototypeBank] | PrototypeBank,
    beta: float,
) -> Tensor | float:
    """Attraction to own-class prototypes minus scaled repulsion from the
    rest, averaged over branches and over the selected samples.

    ``selected_feats`` is a Tensor shared by all branches or a list of
    per-branch Tensors. Returns 0.0 when the selection is empty.
    """
    if beta < 0.0:
        raise ValueError(f"pgca_loss: beta must be >= 0, got {beta}")
    if isinstance(banks, PrototypeBank):
        banks = [banks]
    if isinstance(selected_feats, Tensor):
        feats_per_branch = [selected_feats] * len(banks)
    else:
        feats_per_branch = list(selected_feats)
    if len(feats_per_branch) != len(banks):
        raise DimensionError(
            f"pgca_loss: {len(feats_per_branch)} feature sets for {len(banks)} banks"
        )
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size == 0:
        return 0.0
    total = None
    for feats, bank in zip(feats_per_branch, banks):
        bank.require_complete()
        if feats.rows != labels.size:
            raise DimensionError(f"pgca_loss: {feats.rows} rows vs {labels.size} labels")
        dist = class_distance_matrix(feats, bank.prototypes)
        own = np.zeros((labels.size, bank.class_count))
        own[np.arange(labels.size), labels] = 1.0
        attract = sum_all(mul(dist, Tensor(own))) / labels.size
        repel = sum_all(mul(dist, Tensor(1.0 - own))) / labels.size
        term = attract - beta * repel
        total = term if total is None else total + term
    return total / len(banks)
