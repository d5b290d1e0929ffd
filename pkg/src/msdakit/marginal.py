"""Marginal distribution alignment: class prototypes and their
consistency loss, the adversarial domain-confusion loss, squared MMD,
and discrepancy-driven source weighting with prediction fusion.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionError, EmptyDomainError, MissingPrototypeError
from .numerics import Tensor, class_distance_matrix, clamp, cross_entropy, log, mean_all

ADA_CLAMP_EPS = 1e-7


# -- prototypes -------------------------------------------------------------


@dataclass
class PrototypeBank:
    """Per-class mean feature vectors for one domain branch.

    Classes never seen yet are flagged absent; their stored vector is a
    placeholder and must not be used.
    """

    class_count: int
    dim: int
    prototypes: np.ndarray = None
    present: np.ndarray = None
    counts: np.ndarray = None

    def __post_init__(self):
        if self.prototypes is None:
            self.prototypes = np.zeros((self.class_count, self.dim))
        if self.present is None:
            self.present = np.zeros(self.class_count, dtype=bool)
        if self.counts is None:
            self.counts = np.zeros(self.class_count, dtype=np.int64)

    @property
    def complete(self) -> bool:
        return bool(self.present.all())

    def require_complete(self) -> None:
        if not self.complete:
            missing = np.flatnonzero(~self.present).tolist()
            raise MissingPrototypeError(f"no prototype for classes {missing}")

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(
            self.class_count,
            self.dim,
            self.prototypes.copy(),
            self.present.copy(),
            self.counts.copy(),
        )


def update_prototypes(
    bank: PrototypeBank, features, labels, rho: float = 0.0
) -> PrototypeBank:
    """Recompute per-class means, optionally blended with the old value.

    With ``rho`` = 0 each present class gets the exact mean of this
    pass's features; otherwise new = rho * old + (1 - rho) * mean.
    Classes absent from ``labels`` keep their previous state.
    """
    feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if feats.shape[0] != labels.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {feats.shape[0]} feature rows")
    out = bank.copy()
    for c in range(bank.class_count):
        mask = labels == c
        n = int(mask.sum())
        if n == 0:
            continue
        mean = feats[mask].mean(axis=0)
        if rho > 0.0 and out.present[c]:
            out.prototypes[c] = rho * out.prototypes[c] + (1.0 - rho) * mean
        else:
            out.prototypes[c] = mean
        out.present[c] = True
        out.counts[c] = n
    return out


def pcc_loss(features: Tensor, labels, bank: PrototypeBank) -> Tensor:
    """Prototype-consistency loss for one branch.

    Softmax over negative Euclidean distances to the class prototypes,
    scored as mean negative log-probability of the true class. The
    caller averages across branches.
    """
    bank.require_complete()
    dist = class_distance_matrix(features, bank.prototypes)
    return cross_entropy(-dist, labels)


# -- adversarial loss --------------------------------------------------------


def ada_loss(
    disc_out_source: Tensor, disc_out_target: Tensor, stats: dict | None = None
) -> Tensor:
    """Domain-confusion loss for one branch's discriminator outputs.

    -mean log D(source) - mean log(1 - D(target)), with outputs clamped
    away from exact 0/1; clamp events are counted into ``stats`` under
    ``"ada_clamped"`` when a dict is given.
    """
    if stats is not None:
        hits = int(np.sum(disc_out_source.data <= ADA_CLAMP_EPS))
        hits += int(np.sum(disc_out_source.data >= 1.0 - ADA_CLAMP_EPS))
        hits += int(np.sum(disc_out_target.data <= ADA_CLAMP_EPS))
        hits += int(np.sum(disc_out_target.data >= 1.0 - ADA_CLAMP_EPS))
        stats["ada_clamped"] = stats.get("ada_clamped", 0) + hits
    d_src = clamp(disc_out_source, ADA_CLAMP_EPS, 1.0 - ADA_CLAMP_EPS)
    d_tgt = clamp(disc_out_target, ADA_CLAMP_EPS, 1.0 - ADA_CLAMP_EPS)
    src_term = mean_all(log(d_src))
    tgt_term = mean_all(log(1.0 - d_tgt))
    return -src_term - tgt_term


# -- maximum mean discrepancy ------------------------------------------------


def median_heuristic_bandwidth(a: np.ndarray, b: np.ndarray, max_rows: int = 256) -> float:
    """Median of pooled pairwise distances; falls back to 1.0 if zero.

    Beyond ``max_rows`` pooled rows the median is taken over an evenly
    strided subsample, which keeps the estimate deterministic while
    bounding the quadratic cost.
    """
    pooled = np.vstack([np.atleast_2d(a), np.atleast_2d(b)])
    if len(pooled) > max_rows:
        idx = np.linspace(0, len(pooled) - 1, max_rows).astype(np.int64)
        pooled = pooled[idx]
    d = cdist(pooled, pooled)
    upper = d[np.triu_indices(len(pooled), k=1)]
    if upper.size == 0:
        return 1.0
    med = float(np.median(upper))
    return med if med > 0.0 else 1.0


def _kernel_sum(x: np.ndarray, y: np.ndarray, bandwidth: float) -> float:
    sq = cdist(x, y, "sqeuclidean")
    return float(np.sum(np.exp(-sq / (2.0 * bandwidth * bandwidth))))


def mmd_squared(
    a: np.ndarray, b: np.ndarray, bandwidth: float, unbiased: bool = False
) -> float:
    """Squared maximum mean discrepancy with a Gaussian kernel.

    The default is the biased V-statistic (diagonal kernel terms
    included); ``unbiased`` switches to the U-statistic. The result is
    clamped at 0 from below against roundoff, and argument order is
    canonicalized internally so mmd2(a, b) == mmd2(b, a) exactly.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyDomainError("mmd_squared: empty sample set")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"mmd_squared: widths {a.shape[1]} vs {b.shape[1]}")
    if bandwidth <= 0.0:
        raise ValueError(f"mmd_squared: bandwidth must be positive, got {bandwidth}")
    # Process the pair in a fixed order so both call orders run the
    # identical float operations.
    if (a.shape, a.tobytes()) > (b.shape, b.tobytes()):
        a, b = b, a
    na, nb = a.shape[0], b.shape[0]
    kaa = _kernel_sum(a, a, bandwidth)
    kbb = _kernel_sum(b, b, bandwidth)
    kab = _kernel_sum(a, b, bandwidth)
    if unbiased:
        if na < 2 or nb < 2:
            raise EmptyDomainError("unbiased mmd needs >= 2 samples per set")
        value = (
            (kaa - na) / (na * (na - 1))
            + (kbb - nb) / (nb * (nb - 1))
            - 2.0 * kab / (na * nb)
        )
    else:
        value = kaa / (na * na) + kbb / (nb * nb) - 2.0 * kab / (na * nb)
    return max(0.0, value)


# -- source weighting ---------------------------------------------------------


@dataclass
class FusionWeights:
    """Per-source fusion weights derived from source-target discrepancy."""

    raw_mmd: np.ndarray
    normalized: np.ndarray
    final: np.ndarray
    gamma: float
    epoch: int = 0

    def __post_init__(self):
        self.raw_mmd = np.asarray(self.raw_mmd, dtype=np.float64)
        self.normalized = np.asarray(self.normalized, dtype=np.float64)
        self.final = np.asarray(self.final, dtype=np.float64)

    @property
    def num_sources(self) -> int:
        return self.final.shape[0]

    @classmethod
    def uniform(cls, m: int, gamma: float = 0.5, epoch: int = 0) -> "FusionWeights":
        if m < 1:
            raise EmptyDomainError("FusionWeights.uniform: need at least one source")
        w = np.full(m, 1.0 / m)
        return cls(np.zeros(m), w.copy(), w.copy(), gamma, epoch)


def dasw_weights(
    source_feats: list[np.ndarray],
    target_feats,
    gamma: float,
    bandwidth: float | None = None,
    epoch: int = 0,
    unbiased: bool = False,
) -> FusionWeights:
    """Discrepancy-aware source weights.

    Squared MMD is computed per source-target pair (median-heuristic
    bandwidth per pair unless a fixed one is given), normalized across
    sources, then passed through a Gaussian decay so that closer
    sources receive larger final weights. Both weight vectors sum to 1.
    ``target_feats`` is one array shared by every pair or a list with
    one per-branch target representation per source.
    """
    m = len(source_feats)
    if m == 0:
        raise EmptyDomainError("dasw_weights: no source domains")
    if gamma <= 0.0:
        raise ValueError(f"dasw_weights: gamma must be positive, got {gamma}")
    if isinstance(target_feats, np.ndarray):
        targets = [target_feats] * m
    else:
        targets = list(target_feats)
        if len(targets) != m:
            raise DimensionError(
                f"dasw_weights: {len(targets)} target feature sets for {m} sources"
            )
    raw = np.empty(m)
    for i, (feats, tgt) in enumerate(zip(source_feats, targets)):
        bw = bandwidth if bandwidth is not None else median_heuristic_bandwidth(feats, tgt)
        raw[i] = mmd_squared(feats, tgt, bw, unbiased=unbiased)
    total = raw.sum()
    normalized = raw / total if total > 0.0 else np.full(m, 1.0 / m)
    final = decay_weights(normalized, gamma)
    return FusionWeights(raw, normalized, final, gamma, epoch)


def decay_weights(normalized: np.ndarray, gamma: float) -> np.ndarray:
    """Gaussian decay and renormalization of the discrepancy weights, so
    smaller discrepancies end up with larger final weights."""
    decayed = np.exp(-(np.asarray(normalized, dtype=np.float64) ** 2) / (2.0 * gamma * gamma))
    return decayed / decayed.sum()


def aggregate_predictions(branch_probs: list[np.ndarray], weights: FusionWeights) -> np.ndarray:
    """Fusion-weighted average of per-branch class probabilities."""
    if len(branch_probs) != weights.num_sources:
        raise DimensionError(
            f"aggregate_predictions: {len(branch_probs)} branches vs {weights.num_sources} weights"
        )
    out = np.zeros_like(np.asarray(branch_probs[0], dtype=np.float64))
    for w, probs in zip(weights.final, branch_probs):
        out += w * np.asarray(probs, dtype=np.float64)
    return out
