"""Multi-source domain adaptation toolkit.

Trains a shared encoder with per-source branches under four jointly
optimized objectives: source classification, adversarial domain
confusion through a gradient reversal boundary, prototype consistency,
and prototype-guided conditional alignment driven by dual pseudo-label
collaboration. Source contributions are fused by discrepancy-aware
weights recomputed during training.
"""

__version__ = "0.1.0"

from .data import DomainDataset, ProtocolPlan, SynthSpec, generate_synth, load_de_features, make_protocol
from .marginal import FusionWeights, PrototypeBank
from .model import EncoderConfig, Network, load_checkpoint, save_checkpoint
from .numerics import Rng, Tensor
from .trainer import MetricsReport, TrainConfig, evaluate, run_protocol, train_fold

__all__ = [
    "__version__",
    "DomainDataset",
    "ProtocolPlan",
    "SynthSpec",
    "generate_synth",
    "load_de_features",
    "make_protocol",
    "FusionWeights",
    "PrototypeBank",
    "EncoderConfig",
    "Network",
    "load_checkpoint",
    "save_checkpoint",
    "Rng",
    "Tensor",
    "MetricsReport",
    "TrainConfig",
    "evaluate",
    "run_protocol",
    "train_fold",
]
