"""Shared fixtures: a miniature fully-active training scenario small
enough for exhaustive finite-difference verification."""
import numpy as np
import pytest

from msdakit.data import DomainDataset
from msdakit.marginal import update_prototypes
from msdakit.model import Network
from msdakit.numerics import Rng, Tensor, no_grad
from msdakit.trainer import TrainConfig


def tiny_train_config(**overrides):
    base = dict(
        epochs=4,
        batch_size=8,
        lr=1e-3,
        cfe_widths=(6, 5, 4),
        dsfe_width=4,
        attention_heads=2,
        classifier_hidden=3,
        discriminator_hidden=3,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def make_gradcheck_scenario(seed=20240):
    """A 4-sample, 2-source, 2-class, 6-feature batch with every loss
    term active, plus the model whose parameters are to be checked.

    The seed is chosen (and frozen) so that no leaky-ReLU pre-activation
    or prototype distance sits near a kink within the 1e-5 probe step.
    """
    rng = Rng(seed)
    cfg = tiny_train_config(lambda1=0.7, lambda2=0.4, lambda3=0.3, beta=0.1, attention_over_batch=True)
    model = Network(cfg.encoder_config(input_dim=6, num_classes=2, num_sources=2), rng.child("init"))

    data = rng.child("data")
    source_batches = [
        (data.normal(4, 6) + 0.3, np.array([0, 1, 0, 1])),
        (data.normal(4, 6) - 0.2, np.array([1, 0, 1, 0])),
    ]
    target_x = data.normal(4, 6) * 1.1

    # fill the prototype banks from an eval pass so the consistency and
    # conditional terms are live
    with no_grad():
        for idx, (x, y) in enumerate(source_batches):
            f_com = model.encode_common(Tensor(x), train=False)
            feats = model.encode_specific(idx, f_com, train=False).data
            model.branches[idx].prototypes = update_prototypes(
                model.branches[idx].prototypes, feats, y
            )
    selected_rows = np.array([0, 2, 3])
    selected_labels = np.array([0, 1, 1])
    return model, cfg, source_batches, target_x, selected_rows, selected_labels


def make_domains(
    n_domains=3,
    classes=3,
    dim=8,
    per_class=20,
    separation=4.0,
    shift=1.0,
    noise=0.5,
    seed=5,
):
    from msdakit.data import SynthSpec, generate_synth

    return generate_synth(
        SynthSpec(
            num_domains=n_domains,
            classes=classes,
            feature_dim=dim,
            class_separation=separation,
            domain_shift=shift,
            samples_per_class_per_domain=per_class,
            noise_sigma=noise,
            seed=seed,
        )
    )


@pytest.fixture
def tiny_domains():
    return make_domains()
