"""Joint training of all loss components, per-fold protocol execution,
evaluation with fusion-weighted aggregation, metrics, and the
mutual-information topography analysis.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .conditional import (
    PseudoLabelRecord,
    build_records,
    cluster_target,
    disc_pseudo_probs,
    pgca_loss,
    select_consistent,
    struct_pseudo_probs,
)
from .data import DomainDataset, ProtocolPlan, batcher
from .errors import (
    ConfigError,
    DimensionError,
    LabelError,
    NonFiniteLossError,
    ProtocolError,
)
from .marginal import FusionWeights, ada_loss, dasw_weights, pcc_loss, update_prototypes
from .model import EncoderConfig, Network
from .numerics import (
    Rng,
    Tensor,
    adam_step,
    cross_entropy,
    no_grad,
    take_rows,
    zero_grads,
)

LOSS_COMPONENTS = ("cls", "adv", "proto", "cond")


@dataclass
class TrainConfig:
    """All knobs of one training run; every field is echoed into outputs."""

    epochs: int = 100
    batch_size: int = 256
    lr: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda1: float = 1.0  # adversarial trade-off
    lambda2: float = 0.1  # prototype-consistency trade-off
    lambda3: float = 0.1  # conditional-alignment trade-off
    gamma: float = 0.5  # source-weight decay rate
    beta: float = 0.1  # conditional repulsion strength
    fusion_k: float | None = None  # pseudo-label fusion steepness; None -> 8/epochs
    grl_warmup_epochs: int = 0  # 0 keeps the reversal strength constant
    seed: int = 0
    prototype_rho: float = 0.0  # EMA blend; 0 recomputes exactly each epoch
    mmd_bandwidth: float | None = None  # None -> per-pair median heuristic
    mmd_unbiased: bool = False
    weight_update: str = "epoch"  # or "batch"
    cluster_max_iter: int = 50
    cluster_tol: float = 1e-6
    # ablation switches
    ada: bool = True
    pcc: bool = True
    dasw: bool = True
    cda: bool = True
    dplc_single: bool = False  # single-view pseudo-labels instead of dual
    # architecture
    cfe_widths: tuple[int, ...] = (256, 128, 64)
    dsfe_width: int = 32
    attention_heads: int = 4
    classifier_hidden: int = 16
    discriminator_hidden: int = 16
    leaky_alpha: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    attention_over_batch: bool = False
    shared_discriminator: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        for name in ("lambda1", "lambda2", "lambda3", "beta"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if self.gamma <= 0.0:
            raise ConfigError("gamma must be positive")
        if self.weight_update not in ("epoch", "batch"):
            raise ConfigError(f"weight_update must be 'epoch' or 'batch', got {self.weight_update!r}")
        if not 0.0 <= self.prototype_rho < 1.0:
            raise ConfigError("prototype_rho must lie in [0, 1)")
        self.cfe_widths = tuple(int(w) for w in self.cfe_widths)

    @property
    def effective_fusion_k(self) -> float:
        return self.fusion_k if self.fusion_k is not None else 8.0 / self.epochs

    def encoder_config(self, input_dim: int, num_classes: int, num_sources: int) -> EncoderConfig:
        return EncoderConfig(
            input_dim=input_dim,
            num_classes=num_classes,
            num_sources=num_sources,
            cfe_widths=self.cfe_widths,
            dsfe_width=self.dsfe_width,
            attention_heads=self.attention_heads,
            classifier_hidden=self.classifier_hidden,
            discriminator_hidden=self.discriminator_hidden,
            leaky_alpha=self.leaky_alpha,
            bn_eps=self.bn_eps,
            bn_momentum=self.bn_momentum,
            attention_over_batch=self.attention_over_batch,
            shared_discriminator=self.shared_discriminator,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["cfe_widths"] = list(self.cfe_widths)
        return out


# -- loss assembly --------------------------------------------------------------


def composite_loss(
    model: Network,
    cfg: TrainConfig,
    source_batches: list[tuple[np.ndarray, np.ndarray]],
    target_x: np.ndarray,
    grl_lambda: float = 1.0,
    selected_rows: np.ndarray | None = None,
    selected_labels: np.ndarray | None = None,
    use_grl: bool = True,
    stats: dict | None = None,
) -> dict:
    """One training step's loss components on the given batches.

    Returns a dict with the active components ("cls", "adv", "proto",
    "cond") as scalar Tensors plus "total", the quantity the optimizer
    minimizes: cls + lambda1 * adv(reversed) + lambda2 * proto
    + lambda3 * cond. The reversal boundary makes minimizing the total
    drive the encoder adversarially, realizing the objective's negative
    adversarial term with a single optimizer.

    With ``use_grl=False`` the discriminator path skips the reversal so
    the total is an ordinary differentiable function; this is the form
    the finite-difference gradient checker can verify.

    The target batch always passes through the shared encoder so that
    normalization statistics do not depend on which terms are enabled.
    """
    m = len(model.branches)
    if len(source_batches) != m:
        raise DimensionError(f"{len(source_batches)} source batches for {m} branches")
    banks = [branch.prototypes for branch in model.branches]
    banks_ready = all(bank.complete for bank in banks)

    source_feats = []
    cls_sum = None
    for idx, (x, y) in enumerate(source_batches):
        f_com = model.encode_common(Tensor(x), train=True)
        f = model.encode_specific(idx, f_com, train=True)
        source_feats.append(f)
        ce = cross_entropy(model.classify_logits(idx, f), y)
        cls_sum = ce if cls_sum is None else cls_sum + ce

    f_com_t = model.encode_common(Tensor(target_x), train=True)
    need_target_branches = cfg.ada or (cfg.cda and selected_rows is not None and len(selected_rows) > 0)
    target_feats = []
    if need_target_branches:
        target_feats = [model.encode_specific(idx, f_com_t, train=True) for idx in range(m)]

    comps: dict = {"cls": cls_sum / m}

    if cfg.ada:
        adv_sum = None
        for idx in range(m):
            if use_grl:
                d_src = model.discriminate(idx, source_feats[idx], grl_lambda)
                d_tgt = model.discriminate(idx, target_feats[idx], grl_lambda)
            else:
                d_src = model._discriminate_raw(model.branches[idx], source_feats[idx])
                d_tgt = model._discriminate_raw(model.branches[idx], target_feats[idx])
            term = ada_loss(d_src, d_tgt, stats=stats)
            adv_sum = term if adv_sum is None else adv_sum + term
        comps["adv"] = adv_sum / m

    if cfg.pcc and banks_ready:
        proto_sum = None
        for idx, (_, y) in enumerate(source_batches):
            term = pcc_loss(source_feats[idx], y, banks[idx])
            proto_sum = term if proto_sum is None else proto_sum + term
        comps["proto"] = proto_sum / m

    if (
        cfg.cda
        and banks_ready
        and selected_rows is not None
        and len(selected_rows) > 0
    ):
        selected = [take_rows(f, selected_rows) for f in target_feats]
        comps["cond"] = pgca_loss(selected, selected_labels, banks, cfg.beta)

    total = comps["cls"]
    if "adv" in comps:
        total = total + cfg.lambda1 * comps["adv"]
    if "proto" in comps:
        total = total + cfg.lambda2 * comps["proto"]
    if "cond" in comps:
        total = total + cfg.lambda3 * comps["cond"]
    comps["total"] = total
    comps["_source_feats"] = [f.data for f in source_feats]
    comps["_target_feats"] = [f.data for f in target_feats]
    return comps


def _branch_features(model: Network, idx: int, x: np.ndarray) -> np.ndarray:
    with no_grad():
        f_com = model.encode_common(Tensor(x), train=False)
        return model.encode_specific(idx, f_com, train=False).data


def aligned_features(model: Network, x: np.ndarray) -> np.ndarray:
    """Branch-mean aligned features; the common space used for target
    clustering and embedding export."""
    acc = None
    for idx in range(len(model.branches)):
        f = _branch_features(model, idx, x)
        acc = f if acc is None else acc + f
    return acc / len(model.branches)


# -- reports ------------------------------------------------------------------


@dataclass
class EvalResult:
    predictions: np.ndarray
    probabilities: np.ndarray
    accuracy: float | None
    confusion_raw: np.ndarray | None
    confusion_normalized: np.ndarray | None


@dataclass
class FoldReport:
    fold_index: int
    target_key: tuple[int, int]
    n_target: int
    accuracy: float | None = None
    confusion_raw: list | None = None
    confusion_normalized: list | None = None
    loss_curves: dict = field(default_factory=dict)
    weight_history: list = field(default_factory=list)
    pseudo_precision: list = field(default_factory=list)
    selected_counts: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fold_index": self.fold_index,
            "target_key": list(self.target_key),
            "n_target": self.n_target,
            "accuracy": self.accuracy,
            "confusion_raw": self.confusion_raw,
            "confusion_normalized": self.confusion_normalized,
            "loss_curves": self.loss_curves,
            "weight_history": self.weight_history,
            "pseudo_precision": self.pseudo_precision,
            "selected_counts": self.selected_counts,
            "diagnostics": self.diagnostics,
        }


@dataclass
class MetricsReport:
    folds: list[FoldReport]
    mean_accuracy: float | None
    std_accuracy: float | None
    config: dict

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "folds": [f.to_dict() for f in self.folds],
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


# -- training ------------------------------------------------------------------


def _validate_fold_inputs(sources: list[DomainDataset], target: DomainDataset) -> None:
    if not sources:
        raise ProtocolError("train_fold: no source domains")
    dim = target.feature_dim
    classes = target.class_count
    for ds in sources:
        if ds.labels is None:
            raise LabelError(f"source domain {ds.domain_key} has no labels")
        if ds.feature_dim != dim:
            raise DimensionError(
                f"feature dim mismatch: {ds.domain_key} has {ds.feature_dim}, target has {dim}"
            )
        if ds.class_count != classes:
            raise DimensionError(
                f"class count mismatch: {ds.domain_key} has {ds.class_count}, target has {classes}"
            )
        if ds.n < 2:
            raise ProtocolError(f"source domain {ds.domain_key} has fewer than 2 samples")
    if target.n < 2:
        raise ProtocolError(f"target domain {target.domain_key} has fewer than 2 samples")


def _grl_strength(cfg: TrainConfig, epoch: int) -> float:
    if cfg.grl_warmup_epochs <= 0:
        return 1.0
    return min(1.0, epoch / cfg.grl_warmup_epochs)


def train_fold(
    sources: list[DomainDataset],
    target: DomainDataset,
    cfg: TrainConfig,
    fold_seed: int | None = None,
    fold_index: int = 0,
    epoch_callback=None,
) -> tuple[Network, FoldReport]:
    """Train one fold; returns the model and its report fragment.

    Per epoch: batch passes optimize the classification, adversarial,
    prototype, and conditional terms jointly; at epoch end the
    prototype banks, fusion weights, target clustering, and pseudo-label
    selection are refreshed in evaluation mode. The conditional loss
    acts on the samples selected at the end of the previous epoch.
    """
    _validate_fold_inputs(sources, target)
    m = len(sources)
    root = Rng(cfg.seed if fold_seed is None else fold_seed)
    model = Network(
        cfg.encoder_config(target.feature_dim, target.class_count, m), root.child("init")
    )
    params = model.parameters()
    model.fusion = FusionWeights.uniform(m, cfg.gamma, epoch=0)
    k = cfg.effective_fusion_k

    selection_mask = np.zeros(target.n, dtype=bool)
    fused_labels = np.zeros(target.n, dtype=np.int64)
    cluster_centers = None

    report = FoldReport(
        fold_index=fold_index,
        target_key=target.domain_key,
        n_target=target.n,
        loss_curves={name: [] for name in (*LOSS_COMPONENTS, "objective")},
    )
    stats: dict = {}
    src_rngs = [root.child(f"shuffle/src/{i}") for i in range(m)]
    tgt_rng = root.child("shuffle/tgt")

    for epoch in range(1, cfg.epochs + 1):
        grl = _grl_strength(cfg, epoch)
        src_batches = [batcher(ds.n, cfg.batch_size, src_rngs[i]) for i, ds in enumerate(sources)]
        tgt_batches = batcher(target.n, cfg.batch_size, tgt_rng)
        steps = max(len(b) for b in src_batches)
        sums = dict.fromkeys((*LOSS_COMPONENTS, "objective"), 0.0)

        for step in range(steps):
            batch_pairs = []
            for i, ds in enumerate(sources):
                idx = src_batches[i][step % len(src_batches[i])]
                batch_pairs.append((ds.features[idx], ds.labels[idx]))
            t_idx = tgt_batches[step % len(tgt_batches)]
            rows = np.flatnonzero(selection_mask[t_idx])
            comps = composite_loss(
                model,
                cfg,
                batch_pairs,
                target.features[t_idx],
                grl_lambda=grl,
                selected_rows=rows,
                selected_labels=fused_labels[t_idx][rows],
                stats=stats,
            )
            values = {}
            for name in LOSS_COMPONENTS:
                values[name] = comps[name].item() if name in comps else 0.0
                if not math.isfinite(values[name]):
                    raise NonFiniteLossError(name, values[name])
            zero_grads(params)
            comps["total"].backward()
            adam_step(params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            for name in LOSS_COMPONENTS:
                sums[name] += values[name]
            sums["objective"] += (
                values["cls"]
                - cfg.lambda1 * values["adv"]
                + cfg.lambda2 * values["proto"]
                + cfg.lambda3 * values["cond"]
            )
            if cfg.dasw and cfg.weight_update == "batch":
                model.fusion = dasw_weights(
                    comps["_source_feats"],
                    comps["_target_feats"] or comps["_source_feats"][0],
                    cfg.gamma,
                    bandwidth=cfg.mmd_bandwidth,
                    epoch=epoch,
                    unbiased=cfg.mmd_unbiased,
                )

        for name in sums:
            report.loss_curves[name].append(sums[name] / steps)

        # Epoch-end structural updates, all in eval mode. None of this
        # is needed when every consumer mechanism is disabled.
        needs_structs = cfg.pcc or cfg.cda or cfg.dasw
        tgt_feats = []
        if needs_structs:
            src_feats = [_branch_features(model, i, ds.features) for i, ds in enumerate(sources)]
            for i, ds in enumerate(sources):
                model.branches[i].prototypes = update_prototypes(
                    model.branches[i].prototypes, src_feats[i], ds.labels, rho=cfg.prototype_rho
                )
            tgt_feats = [_branch_features(model, i, target.features) for i in range(m)]
        if cfg.dasw and cfg.weight_update == "epoch":
            model.fusion = dasw_weights(
                src_feats,
                tgt_feats,
                cfg.gamma,
                bandwidth=cfg.mmd_bandwidth,
                epoch=epoch,
                unbiased=cfg.mmd_unbiased,
            )
        elif not cfg.dasw:
            model.fusion = FusionWeights.uniform(m, cfg.gamma, epoch=epoch)
        report.weight_history.append(
            {
                "epoch": epoch,
                "raw_mmd": model.fusion.raw_mmd.tolist(),
                "normalized": model.fusion.normalized.tolist(),
                "final": model.fusion.final.tolist(),
            }
        )

        records = None
        banks = [branch.prototypes for branch in model.branches]
        if cfg.cda and all(bank.complete for bank in banks):
            mean_tgt = np.mean(tgt_feats, axis=0)
            p_disc = disc_pseudo_probs(tgt_feats, banks, model.fusion)
            if cfg.dplc_single:
                # Single-view variant: the structural perspective is
                # replaced by the discriminative one, so every record is
                # consistent and fusion is the identity.
                p_struct = p_disc
            else:
                # Centers re-seed from the current source prototypes each
                # epoch, keeping cluster indices semantically tied to
                # classes as the feature space moves.
                init = np.mean([bank.prototypes for bank in banks], axis=0)
                state = cluster_target(mean_tgt, init, cfg.cluster_max_iter, cfg.cluster_tol)
                cluster_centers = state.centers
                p_struct = struct_pseudo_probs(mean_tgt, state)
            records = build_records(p_disc, p_struct, epoch, cfg.epochs, k)
            chosen = select_consistent(records, epoch, cfg.epochs)
            selection_mask[:] = False
            for r in chosen:
                selection_mask[r.sample_id] = True
                fused_labels[r.sample_id] = r.fused_y
            report.selected_counts.append(len(chosen))
            if target.labels is not None:
                if chosen:
                    hits = sum(1 for r in chosen if r.fused_y == int(target.labels[r.sample_id]))
                    report.pseudo_precision.append(hits / len(chosen))
                else:
                    report.pseudo_precision.append(None)

        if epoch_callback is not None:
            epoch_callback(epoch, {"records": records, "weights": model.fusion})

    report.diagnostics = {"ada_clamped": stats.get("ada_clamped", 0)}
    return model, report


# -- evaluation -----------------------------------------------------------------


def evaluate(model: Network, target: DomainDataset) -> EvalResult:
    """Eval-mode forward through every branch, aggregated by the final
    fusion weights; accuracy and confusion when labels are available."""
    if target.feature_dim != model.config.input_dim:
        raise DimensionError(
            f"target feature dim {target.feature_dim} != model input {model.config.input_dim}"
        )
    m = len(model.branches)
    fusion = model.fusion if model.fusion is not None else FusionWeights.uniform(m)
    with no_grad():
        f_com = model.encode_common(Tensor(target.features), train=False)
        branch_probs = []
        for i in range(m):
            f = model.encode_specific(i, f_com, train=False)
            branch_probs.append(model.classify(i, f).data)
    probs = np.zeros_like(branch_probs[0])
    for w, p in zip(fusion.final, branch_probs):
        probs += w * p
    predictions = probs.argmax(axis=1)
    if target.labels is None:
        return EvalResult(predictions, probs, None, None, None)
    c = target.class_count
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (target.labels, predictions), 1)
    row_sums = confusion.sum(axis=1, keepdims=True)
    normalized = np.divide(
        confusion, row_sums, out=np.zeros((c, c)), where=row_sums > 0
    )
    accuracy = float((predictions == target.labels).mean())
    return EvalResult(predictions, probs, accuracy, confusion, normalized)


# -- protocol runner ---------------------------------------------------------------


def run_protocol(
    plan: ProtocolPlan,
    datasets: list[DomainDataset],
    cfg: TrainConfig,
    fold_callback=None,
    epoch_callback_factory=None,
) -> MetricsReport:
    """Train and evaluate every fold of the plan with per-fold seeds.

    ``fold_callback(fold_index, model, fold_report)`` runs after each
    fold (checkpointing hooks); ``epoch_callback_factory(fold_index)``
    may supply a per-epoch callback (audit hooks).
    """
    if not plan.folds:
        raise ProtocolError("run_protocol: empty plan")
    by_key = {ds.domain_key: ds for ds in datasets}
    seed_root = Rng(cfg.seed)
    folds = []
    accuracies = []
    for i, (source_keys, target_key) in enumerate(plan.folds):
        try:
            sources = [by_key[k] for k in source_keys]
            targets = by_key[target_key]
        except KeyError as e:
            raise ProtocolError(f"fold {i}: dataset for domain {e} not loaded") from e
        epoch_cb = epoch_callback_factory(i) if epoch_callback_factory is not None else None
        try:
            model, fold_report = train_fold(
                sources,
                targets,
                cfg,
                fold_seed=seed_root.derive_seed(f"fold/{i}"),
                fold_index=i,
                epoch_callback=epoch_cb,
            )
        except Exception as e:
            raise type(e)(f"fold {i} (target {target_key}): {e}") from e
        result = evaluate(model, targets)
        fold_report.accuracy = result.accuracy
        if result.confusion_raw is not None:
            fold_report.confusion_raw = result.confusion_raw.tolist()
            fold_report.confusion_normalized = result.confusion_normalized.tolist()
            accuracies.append(result.accuracy)
        folds.append(fold_report)
        if fold_callback is not None:
            fold_callback(i, model, fold_report)
    mean, std = accuracy_summary(accuracies)
    return MetricsReport(folds=folds, mean_accuracy=mean, std_accuracy=std, config=cfg.to_dict())


def accuracy_summary(accuracies) -> tuple[float | None, float | None]:
    """Mean and population standard deviation across fold accuracies."""
    if len(accuracies) == 0:
        return None, None
    return float(np.mean(accuracies)), float(np.std(accuracies))


# -- analyses -----------------------------------------------------------------------


def _equal_frequency_bins(column: np.ndarray, bins: int) -> np.ndarray:
    edges = np.quantile(column, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    return np.searchsorted(edges, column, side="right")


def _discrete_mi(x: np.ndarray, y: np.ndarray) -> float:
    """Plug-in mutual information (nats) between two discrete variables."""
    n = x.shape[0]
    xs, x_idx = np.unique(x, return_inverse=True)
    ys, y_idx = np.unique(y, return_inverse=True)
    joint = np.zeros((xs.size, ys.size))
    np.add.at(joint, (x_idx, y_idx), 1.0)
    joint /= n
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    mask = joint > 0.0
    return float(np.sum(joint[mask] * np.log(joint[mask] / (px @ py)[mask])))


def mi_topography(
    target_feats: np.ndarray,
    pred_probs: np.ndarray,
    channels: int,
    bands: int,
    bins: int = 16,
) -> np.ndarray:
    """Normalized mutual information between every feature column and
    each predicted class.

    Features are discretized into equal-frequency bins and predictions
    by argmax; each class row of the resulting classes x features
    matrix is min-max normalized to [0, 1]. Reshape rows with
    (channels, bands) to obtain per-class topographies.
    """
    feats = np.asarray(target_feats, dtype=np.float64)
    probs = np.asarray(pred_probs, dtype=np.float64)
    n, d = feats.shape
    if d != channels * bands:
        raise DimensionError(f"feature dim {d} != channels*bands = {channels * bands}")
    if probs.shape[0] != n:
        raise DimensionError(f"{probs.shape[0]} prediction rows for {n} feature rows")
    pred = probs.argmax(axis=1)
    c = probs.shape[1]
    binned = np.empty((d, n), dtype=np.int64)
    for j in range(d):
        binned[j] = _equal_frequency_bins(feats[:, j], bins)
    out = np.zeros((c, d))
    for cls in range(c):
        indicator = (pred == cls).astype(np.int64)
        for j in range(d):
            out[cls, j] = _discrete_mi(binned[j], indicator)
        lo, hi = out[cls].min(), out[cls].max()
        out[cls] = (out[cls] - lo) / (hi - lo) if hi > lo else 0.0
    return out


def export_embeddings(model: Network, datasets: list[DomainDataset], path) -> Path:
    """Write per-sample aligned features with domain and label columns."""
    path = Path(path)
    width = model.config.dsfe_width
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "session_id", "label"] + [f"e{j}" for j in range(width)])
        for ds in datasets:
            feats = aligned_features(model, ds.features)
            labels = ds.labels if ds.labels is not None else np.full(ds.n, -1)
            for i in range(ds.n):
                writer.writerow(
                    [ds.domain_key[0], ds.domain_key[1], int(labels[i])]
                    + [format(v, ".17g") for v in feats[i]]
                )
    return path
