"""The adaptation network: a shared common feature encoder, per-source
domain-specific encoders with multi-head self-attention, per-source
classifiers, and per-source domain discriminators behind a gradient
reversal boundary. Includes bit-exact checkpoint save/load.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import CheckpointError, ConfigError, DimensionError
from .marginal import FusionWeights, PrototypeBank
from .numerics import (
    Param,
    Rng,
    Tensor,
    batch_norm_eval,
    batch_norm_train,
    concat_cols,
    grad_reverse,
    leaky_relu,
    matmul,
    scale,
    sigmoid,
    slice_cols,
    softmax_rows,
    transpose,
)


@dataclass
class EncoderConfig:
    """Architecture description; defaults follow the reference sizes."""

    input_dim: int
    num_classes: int
    num_sources: int
    cfe_widths: tuple[int, ...] = (256, 128, 64)
    dsfe_width: int = 32
    attention_heads: int = 4
    classifier_hidden: int = 16
    discriminator_hidden: int = 16
    leaky_alpha: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    # Self-attention can run across the batch-sample axis during
    # training, but eval always degenerates to per-sample attention
    # (each row attends only to itself) so inference is independent of
    # batch composition. Per-sample training is the default: it keeps
    # the train- and eval-time feature functions identical, which
    # cross-batch attention does not (a classifier fit on row-blended
    # features scores near chance on per-sample features).
    attention_over_batch: bool = False
    shared_discriminator: bool = False

    def __post_init__(self):
        self.cfe_widths = tuple(int(w) for w in self.cfe_widths)
        if self.input_dim < 1 or any(w < 1 for w in self.cfe_widths):
            raise ConfigError("encoder widths must be positive")
        if self.num_sources < 1:
            raise ConfigError(f"num_sources must be >= 1, got {self.num_sources}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.dsfe_width % self.attention_heads != 0:
            raise ConfigError(
                f"dsfe_width {self.dsfe_width} not divisible by "
                f"{self.attention_heads} attention heads"
            )
        if not 0.0 < self.leaky_alpha < 1.0:
            raise ConfigError(f"leaky_alpha must lie in (0, 1), got {self.leaky_alpha}")

    @property
    def head_dim(self) -> int:
        return self.dsfe_width // self.attention_heads

    @property
    def common_dim(self) -> int:
        return self.cfe_widths[-1]


def _uniform_init(rng: Rng, rows: int, cols: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, rows, cols)


class Linear:
    """Affine layer y = x W + b."""

    def __init__(self, name: str, in_dim: int, out_dim: int, rng: Rng):
        self.w = Param.create(f"{name}.w", _uniform_init(rng.child("w"), in_dim, out_dim, in_dim))
        self.b = Param.create(f"{name}.b", _uniform_init(rng.child("b"), 1, out_dim, in_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w.tensor) + self.b.tensor

    def parameters(self) -> list[Param]:
        return [self.w, self.b]


class BatchNorm:
    """Per-column batch normalization with running moments."""

    def __init__(self, name: str, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Param.create(f"{name}.gamma", np.ones((1, dim)))
        self.beta = Param.create(f"{name}.beta", np.zeros((1, dim)))
        self.running_mean = np.zeros((1, dim))
        self.running_var = np.ones((1, dim))
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if train:
            out, mu, var = batch_norm_train(x, self.gamma.tensor, self.beta.tensor, self.eps)
            self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * var
            return out
        return batch_norm_eval(
            x, self.gamma.tensor, self.beta.tensor, self.running_mean, self.running_var, self.eps
        )

    def parameters(self) -> list[Param]:
        return [self.gamma, self.beta]


class AttentionBlock:
    """Multi-head self-attention over the rows of an NxD feature matrix.

    The width is split evenly across heads; each head projects its
    column block to queries, keys, and values, attends with scaled
    dot-product softmax over the N rows, and the concatenated head
    outputs pass through a final square projection so the width is
    preserved. In per-sample mode every row attends only to itself,
    which collapses each head to its value projection.
    """

    def __init__(self, name: str, width: int, heads: int, rng: Rng):
        if width % heads != 0:
            raise ConfigError(f"attention width {width} not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        d = self.head_dim
        self.wq = [
            Param.create(f"{name}.h{h}.wq", _uniform_init(rng.child(f"q{h}"), d, d, d))
            for h in range(heads)
        ]
        self.wk = [
            Param.create(f"{name}.h{h}.wk", _uniform_init(rng.child(f"k{h}"), d, d, d))
            for h in range(heads)
        ]
        self.wv = [
            Param.create(f"{name}.h{h}.wv", _uniform_init(rng.child(f"v{h}"), d, d, d))
            for h in range(heads)
        ]
        self.w_out = Param.create(
            f"{name}.w_out", _uniform_init(rng.child("out"), width, width, width)
        )

    def attention_weights(self, x: Tensor, head: int) -> np.ndarray:
        """The NxN softmax attention matrix of one head (no gradient)."""
        d = self.head_dim
        f = x.data[:, head * d : (head + 1) * d]
        q = f @ self.wq[head].tensor.data
        k = f @ self.wk[head].tensor.data
        s = q @ k.T / math.sqrt(d)
        s -= s.max(axis=1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=1, keepdims=True)

    def __call__(self, x: Tensor, per_sample: bool) -> Tensor:
        if x.cols != self.width:
            raise DimensionError(f"attention expects width {self.width}, got {x.cols}")
        d = self.head_dim
        outputs = []
        for h in range(self.heads):
            f_h = slice_cols(x, h * d, (h + 1) * d)
            v = matmul(f_h, self.wv[h].tensor)
            if per_sample:
                # A row attending only to itself has softmax weight 1,
                # so the head output is exactly its value projection.
                outputs.append(v)
                continue
            q = matmul(f_h, self.wq[h].tensor)
            k = matmul(f_h, self.wk[h].tensor)
            scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
            outputs.append(matmul(softmax_rows(scores), v))
        return matmul(concat_cols(outputs), self.w_out.tensor)

    def parameters(self) -> list[Param]:
        params = []
        for h in range(self.heads):
            params += [self.wq[h], self.wk[h], self.wv[h]]
        params.append(self.w_out)
        return params


class SourceBranch:
    """Per-source slice: specific encoder, classifier, discriminator,
    and the branch's prototype bank."""

    def __init__(self, branch_id: int, cfg: EncoderConfig, rng: Rng, discriminator=None):
        self.branch_id = branch_id
        name = f"branch{branch_id}"
        self.dsfe = Linear(f"{name}.dsfe", cfg.common_dim, cfg.dsfe_width, rng.child("dsfe"))
        self.attention = AttentionBlock(
            f"{name}.attn", cfg.dsfe_width, cfg.attention_heads, rng.child("attn")
        )
        # Normalizing the branch output standardizes the feature scale
        # that every alignment loss sees; without it the unbounded
        # repulsion term of the conditional loss rewards inflating the
        # branch features without limit.
        self.bn = BatchNorm(f"{name}.bn", cfg.dsfe_width, cfg.bn_eps, cfg.bn_momentum)
        self.cls_hidden = Linear(
            f"{name}.cls0", cfg.dsfe_width, cfg.classifier_hidden, rng.child("cls0")
        )
        self.cls_out = Linear(
            f"{name}.cls1", cfg.classifier_hidden, cfg.num_classes, rng.child("cls1")
        )
        if discriminator is not None:
            self.disc_hidden, self.disc_out = discriminator
        else:
            self.disc_hidden = Linear(
                f"{name}.disc0", cfg.dsfe_width, cfg.discriminator_hidden, rng.child("disc0")
            )
            self.disc_out = Linear(f"{name}.disc1", cfg.discriminator_hidden, 1, rng.child("disc1"))
        self.prototypes = PrototypeBank(cfg.num_classes, cfg.dsfe_width)

    def parameters(self, include_discriminator: bool = True) -> list[Param]:
        params = self.dsfe.parameters() + self.attention.parameters() + self.bn.parameters()
        params += self.cls_hidden.parameters() + self.cls_out.parameters()
        if include_discriminator:
            params += self.disc_hidden.parameters() + self.disc_out.parameters()
        return params


class Network:
    """Shared encoder plus one branch per source domain."""

    def __init__(self, config: EncoderConfig, rng: Rng):
        self.config = config
        widths = [config.input_dim, *config.cfe_widths]
        self.cfe = [
            Linear(f"cfe.{i}", widths[i], widths[i + 1], rng.child(f"cfe{i}"))
            for i in range(len(config.cfe_widths))
        ]
        self.bn = BatchNorm("cfe.bn", config.common_dim, config.bn_eps, config.bn_momentum)
        shared_disc = None
        if config.shared_discriminator:
            shared_disc = (
                Linear("disc0", config.dsfe_width, config.discriminator_hidden, rng.child("disc0")),
                Linear("disc1", config.discriminator_hidden, 1, rng.child("disc1")),
            )
        self.branches = [
            SourceBranch(m, config, rng.child(f"branch{m}"), discriminator=shared_disc)
            for m in range(config.num_sources)
        ]
        self.fusion: FusionWeights | None = None

    # -- forward passes -------------------------------------------------

    def encode_common(self, x: Tensor, train: bool = False) -> Tensor:
        """Shared encoder: stacked affine layers with leaky-ReLU between
        them, then batch normalization."""
        if x.cols != self.config.input_dim:
            raise DimensionError(
                f"encode_common expects width {self.config.input_dim}, got {x.cols}"
            )
        h = x
        for i, layer in enumerate(self.cfe):
            h = layer(h)
            if i + 1 < len(self.cfe):
                h = leaky_relu(h, self.config.leaky_alpha)
        return self.bn(h, train)

    def encode_specific(self, branch: SourceBranch | int, f_com: Tensor, train: bool = False) -> Tensor:
        """Branch encoder: affine reduction, leaky-ReLU, self-attention."""
        branch = self._resolve(branch)
        if f_com.cols != self.config.common_dim:
            raise DimensionError(
                f"encode_specific expects width {self.config.common_dim}, got {f_com.cols}"
            )
        h = leaky_relu(branch.dsfe(f_com), self.config.leaky_alpha)
        per_sample = (not train) or (not self.config.attention_over_batch)
        return branch.bn(branch.attention(h, per_sample), train)

    def classify_logits(self, branch: SourceBranch | int, f: Tensor) -> Tensor:
        branch = self._resolve(branch)
        if f.cols != self.config.dsfe_width:
            raise DimensionError(f"classify expects width {self.config.dsfe_width}, got {f.cols}")
        h = leaky_relu(branch.cls_hidden(f), self.config.leaky_alpha)
        return branch.cls_out(h)

    def classify(self, branch: SourceBranch | int, f: Tensor) -> Tensor:
        """Class probabilities (rows sum to 1)."""
        return softmax_rows(self.classify_logits(branch, f))

    def discriminate(
        self, branch: SourceBranch | int, f: Tensor, grl_lambda: float = 1.0
    ) -> Tensor:
        """Domain probability in (0, 1); the backward pass multiplies the
        gradient flowing into ``f`` by -grl_lambda."""
        branch = self._resolve(branch)
        if grl_lambda < 0.0:
            raise ValueError(f"grl_lambda must be >= 0, got {grl_lambda}")
        if f.cols != self.config.dsfe_width:
            raise DimensionError(f"discriminate expects width {self.config.dsfe_width}, got {f.cols}")
        return self._discriminate_raw(branch, grad_reverse(f, grl_lambda))

    def _discriminate_raw(self, branch: SourceBranch, f: Tensor) -> Tensor:
        # Discriminator head without the reversal boundary; used directly
        # by gradient verification.
        h = leaky_relu(branch.disc_hidden(f), self.config.leaky_alpha)
        return sigmoid(branch.disc_out(h))

    def _resolve(self, branch: SourceBranch | int) -> SourceBranch:
        return self.branches[branch] if isinstance(branch, int) else branch

    # -- parameter bookkeeping -------------------------------------------

    def parameters(self) -> list[Param]:
        params = []
        for layer in self.cfe:
            params += layer.parameters()
        params += self.bn.parameters()
        seen = set()
        for branch in self.branches:
            for p in branch.parameters():
                if id(p) not in seen:  # shared discriminator appears once
                    seen.add(id(p))
                    params.append(p)
        return params

    def param_count(self) -> int:
        return sum(p.tensor.data.size for p in self.parameters())


# -- checkpointing ------------------------------------------------------------

_CHECKPOINT_VERSION = 1


def save_checkpoint(model: Network, path) -> None:
    """Write config, parameters, running moments, prototype banks, and
    fusion weights into one self-describing .npz container."""
    arrays: dict[str, np.ndarray] = {}
    for p in model.parameters():
        arrays[f"param/{p.name}"] = p.tensor.data
    arrays["bn/running_mean"] = model.bn.running_mean
    arrays["bn/running_var"] = model.bn.running_var
    for branch in model.branches:
        bank = branch.prototypes
        key = f"proto/{branch.branch_id}"
        arrays[f"{key}/vectors"] = bank.prototypes
        arrays[f"{key}/present"] = bank.present
        arrays[f"{key}/counts"] = bank.counts
        arrays[f"bn/branch{branch.branch_id}/running_mean"] = branch.bn.running_mean
        arrays[f"bn/branch{branch.branch_id}/running_var"] = branch.bn.running_var
    meta = {
        "version": _CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "fusion": None,
    }
    if model.fusion is not None:
        arrays["fusion/raw_mmd"] = model.fusion.raw_mmd
        arrays["fusion/normalized"] = model.fusion.normalized
        arrays["fusion/final"] = model.fusion.final
        meta["fusion"] = {"gamma": model.fusion.gamma, "epoch": model.fusion.epoch}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> Network:
    try:
        archive = np.load(path, allow_pickle=False)
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    except (OSError, ValueError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    with archive:
        try:
            meta = json.loads(bytes(archive["__meta__"]).decode("utf-8"))
            cfg_dict = dict(meta["config"])
            cfg_dict["cfe_widths"] = tuple(cfg_dict["cfe_widths"])
            config = EncoderConfig(**cfg_dict)
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"malformed checkpoint metadata in {path}: {e}") from e
        model = Network(config, Rng(0))
        for p in model.parameters():
            key = f"param/{p.name}"
            if key not in archive:
                raise CheckpointError(f"checkpoint missing parameter '{p.name}'")
            stored = archive[key]
            if stored.shape != p.tensor.data.shape:
                raise CheckpointError(
                    f"parameter '{p.name}' shape {stored.shape} != {p.tensor.data.shape}"
                )
            p.tensor.data[...] = stored
        model.bn.running_mean[...] = archive["bn/running_mean"]
        model.bn.running_var[...] = archive["bn/running_var"]
        for branch in model.branches:
            key = f"proto/{branch.branch_id}"
            branch.prototypes.prototypes[...] = archive[f"{key}/vectors"]
            branch.prototypes.present[...] = archive[f"{key}/present"]
            branch.prototypes.counts[...] = archive[f"{key}/counts"]
            branch.bn.running_mean[...] = archive[f"bn/branch{branch.branch_id}/running_mean"]
            branch.bn.running_var[...] = archive[f"bn/branch{branch.branch_id}/running_var"]
        if meta.get("fusion") is not None:
            model.fusion = FusionWeights(
                archive["fusion/raw_mmd"],
                archive["fusion/normalized"],
                archive["fusion/final"],
                gamma=float(meta["fusion"]["gamma"]),
                epoch=int(meta["fusion"]["epoch"]),
            )
    return model
