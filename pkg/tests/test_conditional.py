"""Conditional alignment tests: dual pseudo-label probabilities,
clustering with prototype initialization, consistency selection quotas,
the fusion schedule, and the prototype-guided loss."""
import math

import numpy as np
import pytest

from msdakit.conditional import (
    ClusterState,
    build_records,
    cluster_target,
    disc_pseudo_probs,
    fuse_pseudo,
    fusion_coefficient,
    pgca_loss,
    select_consistent,
    struct_pseudo_probs,
)
from msdakit.errors import DimensionError, InfeasibleClusteringError, MissingPrototypeError
from msdakit.marginal import FusionWeights, PrototypeBank
from msdakit.numerics import Rng, Tensor


def bank_from(prototypes):
    prototypes = np.asarray(prototypes, dtype=float)
    bank = PrototypeBank(class_count=prototypes.shape[0], dim=prototypes.shape[1])
    bank.prototypes[...] = prototypes
    bank.present[...] = True
    return bank


# -- discriminative pseudo-labels -----------------------------------------------


def test_disc_probs_equidistant_uniform():
    bank = bank_from([[1.0, 0.0], [-1.0, 0.0]])
    probs = disc_pseudo_probs(np.array([[0.0, 5.0]]), [bank], FusionWeights.uniform(1))
    assert np.allclose(probs, 0.5)


def test_disc_probs_hand_value_two_distances():
    # distances (0, 1) -> softmax(0, -1) = (0.7311, 0.2689)
    bank = bank_from([[0.0], [1.0]])
    probs = disc_pseudo_probs(np.array([[0.0]]), [bank], FusionWeights.uniform(1))
    assert probs[0, 0] == pytest.approx(0.7311, abs=1e-4)
    assert probs[0, 1] == pytest.approx(0.2689, abs=1e-4)


def test_disc_probs_identical_branches_match_single():
    bank = bank_from([[0.0, 0.0], [2.0, 0.0]])
    feats = Rng(1).normal(6, 2)
    single = disc_pseudo_probs(feats, [bank], FusionWeights.uniform(1))
    skewed = FusionWeights(np.zeros(2), np.array([0.5, 0.5]), np.array([0.9, 0.1]), 0.5)
    double = disc_pseudo_probs(feats, [bank, bank_from(bank.prototypes)], skewed)
    assert np.allclose(single, double, atol=1e-12)


def test_disc_probs_missing_prototype():
    bank = PrototypeBank(class_count=2, dim=1)
    with pytest.raises(MissingPrototypeError):
        disc_pseudo_probs(np.zeros((1, 1)), [bank], FusionWeights.uniform(1))


def test_disc_probs_rows_sum_to_one():
    rng = Rng(2)
    banks = [bank_from(rng.normal(3, 4)), bank_from(rng.normal(3, 4))]
    probs = disc_pseudo_probs([rng.normal(9, 4), rng.normal(9, 4)], banks, FusionWeights.uniform(2))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


# -- clustering ----------------------------------------------------------------------


def test_cluster_hand_case_1d():
    feats = np.array([[0.0], [1.0], [10.0], [11.0]])
    state = cluster_target(feats, np.array([[0.5], [10.5]]))
    assert np.allclose(state.centers, [[0.5], [10.5]])
    assert state.assignment.tolist() == [0, 0, 1, 1]
    assert state.converged
    assert state.iteration_count == 1


def test_cluster_init_at_means_converges_immediately():
    rng = Rng(3)
    blob_a = rng.normal(20, 2) + np.array([5.0, 0.0])
    blob_b = rng.normal(20, 2) - np.array([5.0, 0.0])
    feats = np.vstack([blob_a, blob_b])
    init = np.vstack([blob_a.mean(axis=0), blob_b.mean(axis=0)])
    state = cluster_target(feats, init)
    assert state.converged
    assert state.iteration_count == 1


def test_cluster_all_points_identical():
    feats = np.ones((6, 2)) * 3.0
    state = cluster_target(feats, np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
    assert state.converged
    assert np.allclose(state.centers, 3.0)
    assert np.all(state.assignment == 0)  # ties break to the lowest index


def test_cluster_infeasible():
    with pytest.raises(InfeasibleClusteringError):
        cluster_target(np.zeros((2, 2)), np.zeros((3, 2)))


def test_cluster_objective_non_increasing_property():
    rng = Rng(4)
    for trial in range(20):
        n = int(rng.integers(10, 60, 1)[0])
        d = int(rng.integers(1, 5, 1)[0])
        c = int(rng.integers(2, 5, 1)[0])
        feats = rng.normal(n, d) * float(rng.uniform(0.5, 3.0, 1, 1)[0, 0])
        init = feats[rng.permutation(n)[:c]]
        state = cluster_target(feats, init, max_iter=30)
        diffs = np.diff(state.objective_history)
        assert np.all(diffs <= 1e-9), f"objective increased on trial {trial}"


def test_cluster_converged_centers_are_assignment_means():
    rng = Rng(5)
    feats = rng.normal(50, 3)
    init = feats[:4]
    state = cluster_target(feats, init, max_iter=100, tol=1e-10)
    assert state.converged
    for k in range(4):
        mask = state.assignment == k
        if mask.any():
            assert np.max(np.abs(state.centers[k] - feats[mask].mean(axis=0))) < 1e-6


def test_cluster_empty_reseeds_to_farthest_sample():
    feats = np.array([[0.0], [0.2], [0.4]])
    # second center is far away so it captures nothing at first
    state = cluster_target(feats, np.array([[0.2], [100.0]]), max_iter=5)
    assert state.converged
    # the empty cluster was reseeded onto the farthest point from 100 -> 0.0
    assert np.any(np.isclose(state.centers, 0.0))


# -- structural pseudo-labels --------------------------------------------------------------


def test_struct_probs_softmax_hand_value():
    state = ClusterState(np.array([[1.0], [2.0]]), np.zeros(1, int), 1, True)
    probs = struct_pseudo_probs(np.array([[0.0]]), state)
    # distances (1, 2) -> softmax(-1, -2)
    assert probs[0, 0] == pytest.approx(0.7311, abs=1e-4)
    assert probs[0, 1] == pytest.approx(0.2689, abs=1e-4)


def test_struct_probs_mass_concentrates_at_center():
    state = ClusterState(np.array([[0.0, 0.0], [50.0, 0.0]]), np.zeros(1, int), 1, True)
    probs = struct_pseudo_probs(np.array([[0.0, 0.0]]), state)
    assert probs[0, 0] > 0.999999


# -- fusion schedule ---------------------------------------------------------------------------


def test_chi_midpoint_exact_half():
    assert fusion_coefficient(50, 100, k=0.08) == 0.5
    assert fusion_coefficient(5, 10, k=1.0) == 0.5


def test_chi_symmetric_and_increasing():
    total, k = 100, 8 / 100
    values = [fusion_coefficient(t, total, k) for t in range(0, total + 1)]
    assert all(b > a for a, b in zip(values, values[1:]))
    for t in range(0, total + 1):
        s = fusion_coefficient(t, total, k) + fusion_coefficient(total - t, total, k)
        assert s == pytest.approx(1.0, abs=1e-12)


def test_chi_start_value_hand_computed():
    total = 100
    assert fusion_coefficient(0, total, 8 / total) == pytest.approx(1 / (1 + math.exp(4)), abs=1e-12)
    assert fusion_coefficient(0, total, 8 / total) == pytest.approx(0.0180, abs=1e-4)


def test_fuse_pseudo_hand_blend():
    fused, fused_y = fuse_pseudo(
        np.array([[0.6, 0.4]]), np.array([[0.8, 0.2]]), t=5, total_epochs=10, k=1.0
    )
    assert np.allclose(fused, [[0.7, 0.3]])
    assert fused_y.tolist() == [0]


def test_fuse_pseudo_probability_vector_for_all_chi():
    rng = Rng(6)
    z1, z2 = np.abs(rng.normal(10, 4)) + 1e-6, np.abs(rng.normal(10, 4)) + 1e-6
    p1 = z1 / z1.sum(axis=1, keepdims=True)
    p2 = z2 / z2.sum(axis=1, keepdims=True)
    for t in (1, 25, 50, 75, 100):
        fused, _ = fuse_pseudo(p1, p2, t, 100, k=8 / 100)
        assert np.allclose(fused.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(fused >= 0.0)


def test_fused_argmax_equals_common_label_when_views_agree():
    rng = Rng(7)
    for trial in range(50):
        z1 = np.abs(rng.normal(1, 5)) + 1e-6
        p1 = z1 / z1.sum()
        y = int(p1.argmax())
        # second view agrees but with different confidence profile
        z2 = np.abs(rng.normal(1, 5)) + 1e-6
        z2[0, y] = z2.max() * 2.0
        p2 = z2 / z2.sum()
        for chi_t, total in ((0, 10), (2, 8), (5, 10), (9, 12), (10, 10)):
            fused, fused_y = fuse_pseudo(p1, p2, chi_t, total, k=50.0 / total)
            assert fused_y[0] == y


# -- selection -----------------------------------------------------------------------------------


def _records(y_disc, y_struct, confidences):
    n = len(y_disc)
    recs = []
    for i in range(n):
        c = 3
        pd = np.full(c, (1 - confidences[i]) / (c - 1))
        pd[y_disc[i]] = confidences[i]
        ps = np.full(c, (1 - confidences[i]) / (c - 1))
        ps[y_struct[i]] = confidences[i]
        recs.append(
            build_records(pd[None, :], ps[None, :], t=1, total_epochs=2, k=1.0)[0]
        )
        recs[-1].sample_id = i
        recs[-1].confidence = confidences[i]
    return recs


def test_select_quota_floor():
    records = _records([0] * 100, [0] * 100, [0.9] * 100)
    chosen = select_consistent(records, t=1, total_epochs=50)
    assert len(chosen) == 2  # floor(1 * 100 / 50)


def test_select_full_quota_at_final_epoch():
    records = _records([1] * 10, [1] * 10, [0.5] * 10)
    chosen = select_consistent(records, t=50, total_epochs=50)
    assert len(chosen) == 10
    assert all(r.selected for r in records)


def test_select_empty_when_no_consistency():
    records = _records([0, 1, 2], [1, 2, 0], [0.9, 0.9, 0.9])
    chosen = select_consistent(records, t=3, total_epochs=3)
    assert chosen == []


def test_select_quota_capped_by_consistent_count():
    records = _records([0, 0, 1, 2], [0, 0, 2, 1], [0.9, 0.8, 0.7, 0.6])
    chosen = select_consistent(records, t=4, total_epochs=4)  # quota 4, |D_eq| = 2
    assert len(chosen) == 2
    assert {r.sample_id for r in chosen} == {0, 1}


def test_select_confidence_ties_break_to_lower_sample_id():
    records = _records([0] * 4, [0] * 4, [0.9, 0.9, 0.9, 0.9])
    chosen = select_consistent(records, t=1, total_epochs=2)  # quota 2
    assert sorted(r.sample_id for r in chosen) == [0, 1]


def test_select_superset_monotone_in_epoch():
    rng = Rng(8)
    conf = rng.uniform(0.4, 1.0, 1, 30)[0]
    records = _records([0] * 30, [0] * 30, conf.tolist())
    previous: set = set()
    for t in range(1, 31):
        chosen = {r.sample_id for r in select_consistent(records, t, 30)}
        assert previous <= chosen
        previous = chosen


# -- prototype-guided conditional loss ---------------------------------------------------------------


def test_pgca_hand_value():
    # one sample: own distance 2, other distance 5, beta 0.1 -> 2 - 0.5
    bank = bank_from([[2.0, 0.0], [-5.0, 0.0]])
    loss = pgca_loss(Tensor([[0.0, 0.0]]), [0], [bank], beta=0.1)
    assert loss.item() == pytest.approx(1.5, abs=1e-9)


def test_pgca_zero_at_own_prototype_with_zero_beta():
    bank = bank_from([[1.0, 1.0], [0.0, 0.0]])
    loss = pgca_loss(Tensor([[1.0, 1.0]]), [0], [bank], beta=0.0)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_pgca_beta_zero_is_pure_attraction():
    bank = bank_from([[0.0, 0.0], [10.0, 0.0]])
    feats = Tensor([[3.0, 4.0], [0.0, 1.0]])
    loss = pgca_loss(feats, [0, 0], [bank], beta=0.0)
    assert loss.item() == pytest.approx((5.0 + 1.0) / 2.0, abs=1e-12)


def test_pgca_empty_selection_is_zero():
    bank = bank_from([[0.0], [1.0]])
    assert pgca_loss(Tensor(np.zeros((0, 1))), [], [bank], beta=0.1) == 0.0


def test_pgca_decreases_as_sample_approaches_own_prototype():
    own = np.array([4.0, 0.0])
    other = np.array([0.0, 0.0])
    bank = bank_from([own, other])
    radius = 3.0

    def loss_at(angle):
        pos = other + radius * np.array([math.cos(angle), math.sin(angle)])
        return pgca_loss(Tensor([pos]), [0], [bank], beta=0.1).item()

    assert loss_at(0.0) < loss_at(math.pi / 4) < loss_at(math.pi / 2)


def test_pgca_averages_over_branches():
    bank_a = bank_from([[2.0, 0.0], [-5.0, 0.0]])
    bank_b = bank_from([[4.0, 0.0], [-5.0, 0.0]])
    feats = Tensor([[0.0, 0.0]])
    loss = pgca_loss(feats, [0], [bank_a, bank_b], beta=0.0)
    assert loss.item() == pytest.approx((2.0 + 4.0) / 2.0, abs=1e-12)


def test_pgca_gradient_flows():
    bank = bank_from([[1.0, 0.0], [-1.0, 0.0]])
    feats = Tensor([[0.3, 0.4]], requires_grad=True)
    pgca_loss(feats, [0], [bank], beta=0.1).backward()
    assert feats.grad is not None and np.any(feats.grad != 0.0)
