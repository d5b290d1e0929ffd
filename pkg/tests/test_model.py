"""Network tests: shapes, attention behavior, gradient reversal,
closed-form parameter counts, and checkpoint round-trips."""
import math

import numpy as np
import pytest

from msdakit.errors import CheckpointError, ConfigError, DimensionError
from msdakit.marginal import FusionWeights
from msdakit.model import AttentionBlock, EncoderConfig, Network, load_checkpoint, save_checkpoint
from msdakit.numerics import Rng, Tensor, no_grad, sum_all, zero_grads


def small_config(**overrides):
    base = dict(
        input_dim=10,
        num_classes=3,
        num_sources=2,
        cfe_widths=(8, 6, 4),
        dsfe_width=4,
        attention_heads=2,
    )
    base.update(overrides)
    return EncoderConfig(**base)


def small_net(seed=1, **overrides):
    return Network(small_config(**overrides), Rng(seed))


# -- config validation -----------------------------------------------------------


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        small_config(dsfe_width=6, attention_heads=4)


def test_config_rejects_single_class():
    with pytest.raises(ConfigError):
        small_config(num_classes=1)


def test_config_rejects_zero_sources():
    with pytest.raises(ConfigError):
        small_config(num_sources=0)


# -- common encoder -----------------------------------------------------------------


def test_encode_common_shapes_default_architecture():
    cfg = EncoderConfig(input_dim=310, num_classes=3, num_sources=1)
    net = Network(cfg, Rng(0))
    x = Tensor(Rng(1).normal(256, 310))
    out = net.encode_common(x, train=True)
    assert out.shape == (256, 64)


def test_encode_common_zero_input_zero_bias_is_zero_preactivation():
    net = small_net()
    for layer in net.cfe:
        layer.b.tensor.data[...] = 0.0
    out = net.encode_common(Tensor(np.zeros((1, 10))), train=False)
    # fresh eval moments are (0, 1) and shift is 0, so output stays 0
    assert np.allclose(out.data, 0.0)


def test_encode_common_rowwise_in_eval_mode():
    net = small_net()
    row = Rng(2).normal(1, 10)
    out = net.encode_common(Tensor(np.vstack([row, row])), train=False)
    assert np.array_equal(out.data[0], out.data[1])


def test_encode_common_width_mismatch():
    with pytest.raises(DimensionError):
        small_net().encode_common(Tensor(np.zeros((2, 7))))


# -- branch encoder and attention ------------------------------------------------------


def test_encode_specific_single_sample_equals_value_projection():
    net = small_net(attention_over_batch=True)
    branch = net.branches[0]
    branch.attention.w_out.tensor.data[...] = np.eye(4)
    f_com = Tensor(Rng(3).normal(1, 4))
    out = net.encode_specific(0, f_com, train=True)
    # softmax over a 1x1 score is 1, so each head reduces to its value
    # projection of the hidden features
    from msdakit.numerics import leaky_relu

    hidden = leaky_relu(branch.dsfe(f_com), net.config.leaky_alpha).data
    expected = np.hstack(
        [hidden[:, h * 2 : (h + 1) * 2] @ branch.attention.wv[h].tensor.data for h in range(2)]
    )
    assert np.allclose(out.data, expected)


def test_attention_weight_rows_sum_to_one():
    net = small_net()
    branch = net.branches[0]
    x = Tensor(Rng(4).normal(7, 4))
    for h in range(2):
        weights = branch.attention.attention_weights(x, h)
        assert weights.shape == (7, 7)
        assert np.allclose(weights.sum(axis=1), 1.0, atol=1e-12)


def test_attention_identical_samples_give_half_weights():
    # With every score in a row equal, the 2x2 softmax is exactly 0.5.
    block = AttentionBlock("attn", 4, 2, Rng(5))
    row = Rng(6).normal(1, 4)
    weights = block.attention_weights(Tensor(np.vstack([row, row])), 0)
    assert np.allclose(weights, 0.5, atol=1e-15)


def test_attention_orthogonal_equal_norm_hand_value():
    # Identity projections, orthogonal equal-norm rows: the 2x2 score
    # matrix is (r^2/sqrt(d)) I, so each row's softmax is
    # (sigma, 1-sigma) with sigma = 1/(1 + exp(-r^2/sqrt(d))).
    block = AttentionBlock("attn", 2, 1, Rng(7))
    block.wq[0].tensor.data[...] = np.eye(2)
    block.wk[0].tensor.data[...] = np.eye(2)
    r = 1.5
    x = Tensor([[r, 0.0], [0.0, r]])
    weights = block.attention_weights(x, 0)
    sigma = 1.0 / (1.0 + math.exp(-r * r / math.sqrt(2)))
    assert weights[0, 0] == pytest.approx(sigma, abs=1e-12)
    assert weights[1, 1] == pytest.approx(sigma, abs=1e-12)
    assert weights[0, 1] == pytest.approx(weights[1, 0], abs=1e-15)


def test_attention_permutation_equivariance_in_train_mode():
    net = small_net(attention_over_batch=True)
    x = Rng(8).normal(6, 10)
    perm = Rng(9).permutation(6)
    with no_grad():
        f = net.encode_common(Tensor(x), train=False)
        out = net.encode_specific(0, Tensor(f.data), train=True)
        out_perm = net.encode_specific(0, Tensor(f.data[perm]), train=True)
    assert np.allclose(out.data[perm], out_perm.data, atol=1e-12)


def test_eval_attention_is_sample_independent():
    net = small_net()
    x = Rng(10).normal(5, 10)
    with no_grad():
        f = net.encode_common(Tensor(x), train=False)
        full = net.encode_specific(0, f, train=False).data
        single = net.encode_specific(0, Tensor(f.data[2:3]), train=False).data
    assert np.allclose(full[2], single[0], atol=1e-12)


# -- classifier and discriminator ---------------------------------------------------------


def test_classify_rows_sum_to_one_and_shape():
    net = small_net()
    f = Tensor(Rng(11).normal(3394, 4))
    probs = net.classify(0, f)
    assert probs.shape == (3394, 3)
    assert np.allclose(probs.data.sum(axis=1), 1.0, atol=1e-9)


def test_classify_zero_weights_uniform():
    net = small_net()
    branch = net.branches[0]
    for layer in (branch.cls_hidden, branch.cls_out):
        layer.w.tensor.data[...] = 0.0
        layer.b.tensor.data[...] = 0.0
    probs = net.classify(0, Tensor(Rng(12).normal(4, 4)))
    assert np.allclose(probs.data, 1.0 / 3.0)


def test_discriminator_output_in_unit_interval():
    net = small_net()
    d = net.discriminate(0, Tensor(Rng(13).normal(50, 4) * 10), grl_lambda=1.0)
    assert np.all(d.data > 0.0) and np.all(d.data < 1.0)


def test_grl_lambda_zero_blocks_encoder_gradient():
    net = small_net()
    f = Tensor(Rng(14).normal(3, 4), requires_grad=True)
    out = sum_all(net.discriminate(0, f, grl_lambda=0.0))
    zero_grads(net.parameters())
    out.backward()
    assert np.allclose(f.grad, 0.0)


def test_gradient_reversal_negation_property():
    net = small_net()
    branch = net.branches[0]
    feats = Rng(15).normal(4, 4)

    def encoder_grad(reverse):
        f = Tensor(feats, requires_grad=True)
        if reverse:
            out = sum_all(net.discriminate(0, f, grl_lambda=1.0))
        else:
            out = sum_all(net._discriminate_raw(branch, f))
        zero_grads(net.parameters())
        out.backward()
        return f.grad.copy()

    reversed_grad = encoder_grad(True)
    plain_grad = encoder_grad(False)
    assert np.max(np.abs(reversed_grad + plain_grad)) < 1e-12


def test_discriminator_rejects_negative_lambda():
    net = small_net()
    with pytest.raises(ValueError):
        net.discriminate(0, Tensor(np.zeros((2, 4))), grl_lambda=-0.5)


# -- parameter accounting -----------------------------------------------------------------


def closed_form_count(cfg: EncoderConfig) -> int:
    widths = [cfg.input_dim, *cfg.cfe_widths]
    total = sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(len(cfg.cfe_widths)))
    total += 2 * cfg.common_dim  # batch-norm scale and shift
    d_h = cfg.head_dim
    per_branch = cfg.common_dim * cfg.dsfe_width + cfg.dsfe_width  # dsfe affine
    per_branch += cfg.attention_heads * 3 * d_h * d_h + cfg.dsfe_width * cfg.dsfe_width
    per_branch += 2 * cfg.dsfe_width  # branch output normalization
    per_branch += cfg.dsfe_width * cfg.classifier_hidden + cfg.classifier_hidden
    per_branch += cfg.classifier_hidden * cfg.num_classes + cfg.num_classes
    disc = cfg.dsfe_width * cfg.discriminator_hidden + cfg.discriminator_hidden
    disc += cfg.discriminator_hidden + 1
    if cfg.shared_discriminator:
        return total + cfg.num_sources * per_branch + disc
    return total + cfg.num_sources * (per_branch + disc)


def test_param_count_matches_closed_form_default():
    cfg = EncoderConfig(input_dim=310, num_classes=3, num_sources=14)
    net = Network(cfg, Rng(0))
    assert net.param_count() == closed_form_count(cfg)


def test_param_count_matches_closed_form_small():
    cfg = small_config()
    assert Network(cfg, Rng(0)).param_count() == closed_form_count(cfg)


def test_shared_discriminator_reduces_count():
    shared = small_config(shared_discriminator=True)
    per_branch = small_config()
    n_shared = Network(shared, Rng(0)).param_count()
    n_split = Network(per_branch, Rng(0)).param_count()
    assert n_shared == closed_form_count(shared)
    assert n_shared < n_split


def test_parameter_names_unique():
    net = small_net()
    names = [p.name for p in net.parameters()]
    assert len(names) == len(set(names))


# -- determinism and checkpointing -------------------------------------------------------------


def test_same_seed_same_initialization():
    a = small_net(seed=42)
    b = small_net(seed=42)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.tensor.data, pb.tensor.data)


def test_eval_forward_is_pure():
    net = small_net()
    x = Tensor(Rng(16).normal(5, 10))
    with no_grad():
        first = net.encode_common(x, train=False).data.copy()
        second = net.encode_common(x, train=False).data.copy()
    assert np.array_equal(first, second)
    assert np.array_equal(net.bn.running_mean, np.zeros((1, 4)))


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = small_net(seed=7)
    # make state non-trivial before saving
    with_stats = Tensor(Rng(17).normal(8, 10))
    net.encode_common(with_stats, train=True)
    net.branches[0].prototypes.prototypes[...] = Rng(18).normal(3, 4)
    net.branches[0].prototypes.present[...] = True
    net.fusion = FusionWeights(
        np.array([0.2, 0.1]), np.array([2 / 3, 1 / 3]), np.array([0.4, 0.6]), gamma=0.5, epoch=9
    )
    path = tmp_path / "model.npz"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    for pa, pb in zip(net.parameters(), loaded.parameters()):
        assert pa.name == pb.name
        assert np.array_equal(pa.tensor.data, pb.tensor.data)
    assert np.array_equal(net.bn.running_mean, loaded.bn.running_mean)
    assert np.array_equal(net.bn.running_var, loaded.bn.running_var)
    assert np.array_equal(net.branches[0].prototypes.prototypes, loaded.branches[0].prototypes.prototypes)
    assert np.array_equal(net.branches[0].prototypes.present, loaded.branches[0].prototypes.present)
    assert np.array_equal(net.fusion.final, loaded.fusion.final)
    assert loaded.fusion.epoch == 9


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.npz")
