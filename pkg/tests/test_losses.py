import math
import warnings

import numpy as np
import pytest
import torch

import oracles
from pici import (
    EmptyClusterError,
    InputError,
    InvalidProbability,
    InvalidTemperature,
    LossBreakdown,
    ZeroNormError,
    cluster_entropy,
    cluster_loss,
    cosine_sim,
    instance_loss,
    patchify,
    pisd_loss,
    reconstruction_loss,
    sample_mask,
)
from pici.losses import masked_mse_batch


def test_cosine_sim_frozen_values():
    assert float(cosine_sim([3.0, 0.0], [3.0, 0.0])) == pytest.approx(1.0, abs=1e-12)
    assert float(cosine_sim([1.0, 0.0], [0.0, 2.0])) == pytest.approx(0.0, abs=1e-12)
    v = [1.0 / math.sqrt(2.0), 1.0 / math.sqrt(2.0)]
    assert float(cosine_sim([1.0, 0.0], v)) == pytest.approx(0.7071067811865475, abs=1e-12)


def test_cosine_sim_rejects_zero_vector():
    with pytest.raises(ZeroNormError):
        cosine_sim([0.0, 0.0], [1.0, 0.0])


def test_instance_loss_single_pair_is_zero():
    z = np.array([[1.0, 0.0]])
    assert float(instance_loss(z, z, 0.5)) == pytest.approx(0.0, abs=1e-12)


def test_instance_loss_matches_oracle_axis_aligned():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    got = float(instance_loss(z, z, 1.0))
    want = oracles.naive_instance_loss(z, z, 1.0)
    assert got == pytest.approx(want, abs=1e-12)


def test_instance_loss_matches_oracle_random(rng):
    for _ in range(25):
        n = int(rng.integers(1, 17))
        d = int(rng.integers(2, 9))
        tau = float(rng.uniform(0.2, 2.0))
        z_a = oracles.random_unit_rows(rng, n, d)
        z_b = oracles.random_unit_rows(rng, n, d)
        got = float(instance_loss(z_a, z_b, tau))
        want = oracles.naive_instance_loss(z_a, z_b, tau)
        assert abs(got - want) < 1e-10


def test_instance_loss_include_self_matches_literal_oracle(rng):
    z_a = oracles.random_unit_rows(rng, 5, 4)
    z_b = oracles.random_unit_rows(rng, 5, 4)
    got = float(instance_loss(z_a, z_b, 0.5, include_self=True))
    want = oracles.naive_instance_loss(z_a, z_b, 0.5, include_self=True)
    assert abs(got - want) < 1e-10
    # the self term inflates the denominator, so the literal form is larger
    assert got > float(instance_loss(z_a, z_b, 0.5))


def test_instance_loss_rotation_invariant(rng):
    z_a = oracles.random_unit_rows(rng, 6, 5)
    z_b = oracles.random_unit_rows(rng, 6, 5)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    base = float(instance_loss(z_a, z_b, 0.5))
    rotated = float(instance_loss(z_a @ q, z_b @ q, 0.5))
    assert abs(base - rotated) < 1e-12


def test_instance_loss_permutation_invariant(rng):
    z_a = oracles.random_unit_rows(rng, 7, 4)
    z_b = oracles.random_unit_rows(rng, 7, 4)
    perm = rng.permutation(7)
    base = float(instance_loss(z_a, z_b, 0.7))
    shuffled = float(instance_loss(z_a[perm], z_b[perm], 0.7))
    assert abs(base - shuffled) < 1e-12


def test_instance_loss_nonnegative(rng):
    for _ in range(20):
        n = int(rng.integers(1, 10))
        z_a = oracles.random_unit_rows(rng, n, 6)
        z_b = oracles.random_unit_rows(rng, n, 6)
        assert float(instance_loss(z_a, z_b, 0.5)) >= -1e-12


def test_instance_loss_validation(rng):
    z = oracles.random_unit_rows(rng, 3, 4)
    with pytest.raises(InvalidTemperature):
        instance_loss(z, z, 0.0)
    with pytest.raises(InvalidTemperature):
        instance_loss(z, z, -1.0)
    with pytest.raises(InputError):
        instance_loss(z, z[:2], 0.5)


def test_cluster_entropy_frozen_values():
    uniform = np.full((4, 3), 1.0 / 3.0)
    assert float(cluster_entropy(uniform, uniform)) == pytest.approx(
        2.0 * math.log(3.0), abs=1e-12)

    concentrated = np.zeros((4, 3))
    concentrated[:, 1] = 1.0
    assert float(cluster_entropy(concentrated, concentrated)) == pytest.approx(0.0, abs=1e-12)

    c_a = np.array([[1.0, 0.0], [0.0, 1.0]])
    c_b = np.full((2, 2), 0.5)
    assert float(cluster_entropy(c_a, c_b)) == pytest.approx(2.0 * math.log(2.0), abs=1e-12)


def test_cluster_entropy_matches_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(2, 17))
        m = int(rng.integers(2, 17))
        c_a = oracles.random_simplex_rows(rng, n, m)
        c_b = oracles.random_simplex_rows(rng, n, m)
        got = float(cluster_entropy(c_a, c_b))
        assert abs(got - oracles.naive_cluster_entropy(c_a, c_b)) < 1e-10
        assert -1e-12 <= got <= 2.0 * math.log(m) + 1e-12


def test_cluster_entropy_rejects_negative():
    bad = np.array([[1.2, -0.2]])
    with pytest.raises(InvalidProbability):
        cluster_entropy(bad, bad)


def test_cluster_loss_matches_oracle_one_hot_balanced():
    c = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    got = float(cluster_loss(c, c, 1.0))
    want = oracles.naive_cluster_loss(c, c, 1.0)
    assert got == pytest.approx(want, abs=1e-12)


def test_cluster_loss_matches_oracle_random(rng):
    for _ in range(25):
        n = int(rng.integers(2, 17))
        m = int(rng.integers(2, 17))
        tau = float(rng.uniform(0.5, 2.0))
        c_a = oracles.random_simplex_rows(rng, n, m)
        c_b = oracles.random_simplex_rows(rng, n, m)
        got = float(cluster_loss(c_a, c_b, tau))
        want = oracles.naive_cluster_loss(c_a, c_b, tau)
        assert abs(got - want) < 1e-10


def test_cluster_loss_include_self_matches_literal_oracle(rng):
    c_a = oracles.random_simplex_rows(rng, 8, 3)
    c_b = oracles.random_simplex_rows(rng, 8, 3)
    got = float(cluster_loss(c_a, c_b, 1.0, include_self=True))
    want = oracles.naive_cluster_loss(c_a, c_b, 1.0, include_self=True)
    assert abs(got - want) < 1e-10


def test_cluster_loss_lower_bound(rng):
    for _ in range(20):
        m = int(rng.integers(2, 9))
        c_a = oracles.random_simplex_rows(rng, 12, m)
        c_b = oracles.random_simplex_rows(rng, 12, m)
        assert float(cluster_loss(c_a, c_b, 1.0)) >= -2.0 * math.log(m) - 1e-12


def test_cluster_loss_swap_symmetric(rng):
    c_a = oracles.random_simplex_rows(rng, 9, 4)
    c_b = oracles.random_simplex_rows(rng, 9, 4)
    assert float(cluster_loss(c_a, c_b, 0.8)) == pytest.approx(
        float(cluster_loss(c_b, c_a, 0.8)), abs=1e-12)


def test_cluster_loss_joint_column_permutation_invariant(rng):
    c_a = oracles.random_simplex_rows(rng, 10, 5)
    c_b = oracles.random_simplex_rows(rng, 10, 5)
    perm = rng.permutation(5)
    base = float(cluster_loss(c_a, c_b, 1.0))
    permuted = float(cluster_loss(c_a[:, perm], c_b[:, perm], 1.0))
    assert abs(base - permuted) < 1e-12


def test_cluster_loss_empty_column_raises():
    c = np.zeros((4, 3))
    c[:, 0] = 1.0  # columns 1 and 2 empty in both views
    with pytest.raises(EmptyClusterError):
        cluster_loss(c, c, 1.0)


def test_cluster_loss_column_eps_rescues_empty_column():
    c = np.zeros((4, 3))
    c[:, 0] = 1.0
    val = float(cluster_loss(c, c, 1.0, column_eps=1e-8))
    assert math.isfinite(val)


def test_cluster_loss_requires_two_clusters(rng):
    c = np.ones((4, 1))
    with pytest.raises(InputError):
        cluster_loss(c, c, 1.0)


def test_reconstruction_loss_hand_values(rng):
    img = rng.uniform(size=(8, 8, 3))
    target = patchify(img, 4)
    plan = sample_mask(target.n_patches, 0.5, 3)

    assert float(reconstruction_loss(target, target, plan)) == 0.0

    shifted = target.patches.copy()
    shifted[plan.masked_idx] += 0.5
    from pici import PatchSequence
    pred = PatchSequence(shifted, target.patch_size, target.grid)
    assert float(reconstruction_loss(pred, target, plan)) == pytest.approx(0.25, abs=1e-12)


def test_reconstruction_loss_tiny_hand_case():
    # two patches of dim 3, one masked, difference (1, 2, 2)
    target = np.zeros((2, 3))
    pred = np.zeros((2, 3))
    pred[1] = [1.0, 2.0, 2.0]
    from pici import MaskPlan
    plan = MaskPlan(visible_idx=np.array([0]), masked_idx=np.array([1]), ratio=0.5)
    assert float(reconstruction_loss(pred, target, plan)) == pytest.approx(3.0, abs=1e-12)


def test_reconstruction_loss_only_masked_patches_count(rng):
    target = rng.uniform(size=(4, 6))
    pred = target.copy()
    from pici import MaskPlan
    plan = MaskPlan(visible_idx=np.array([0, 2]), masked_idx=np.array([1, 3]), ratio=0.5)
    pred[0] += 100.0  # visible patch, must be ignored
    assert float(reconstruction_loss(pred, target, plan)) == 0.0
    got = float(reconstruction_loss(pred, target, plan, all_patches=True))
    assert got > 0.0


def test_reconstruction_loss_matches_oracle(rng):
    pred = rng.normal(size=(6, 12))
    target = rng.normal(size=(6, 12))
    plan = sample_mask(6, 0.5, 17)
    got = float(reconstruction_loss(pred, target, plan))
    want = oracles.naive_masked_mse(pred, target, plan.masked_idx)
    assert abs(got - want) < 1e-12


def test_reconstruction_loss_empty_mask_warns(rng):
    arr = rng.normal(size=(4, 6))
    plan = sample_mask(4, 0.0, 5)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        val = float(reconstruction_loss(arr, arr + 1.0, plan))
    assert val == 0.0
    assert len(caught) == 1


def test_pisd_loss_values():
    assert float(pisd_loss(0.0, 0.0)) == 0.0
    assert float(pisd_loss(2.0, 4.0)) == 3.0
    assert float(pisd_loss(1.7, 1.7)) == 1.7


def test_loss_breakdown_picd_identity(rng):
    for _ in range(10):
        ins, clu = rng.normal(), rng.normal()
        row = LossBreakdown(l_ins=float(ins), l_clu=float(clu))
        assert row.l_picd == row.l_ins + row.l_clu


# ----- gradient checks against central finite differences -----


def _fd_check(build_loss, arrays, rel_tol=1e-4):
    tensors = [torch.tensor(a, dtype=torch.float64, requires_grad=True)
               for a in arrays]
    loss = build_loss(*tensors)
    loss.backward()
    for pos, tensor in enumerate(tensors):
        def scalar(x, pos=pos):
            subs = [torch.tensor(x, dtype=torch.float64) if i == pos
                    else torch.tensor(arrays[i], dtype=torch.float64)
                    for i in range(len(arrays))]
            return float(build_loss(*subs))

        numeric = oracles.fd_gradient(scalar, arrays[pos])
        worst = oracles.worst_grad_error(tensor.grad.numpy(), numeric)
        assert worst < rel_tol, f"arg {pos}: rel err {worst:.3e}"


def test_instance_loss_gradients(rng):
    for _ in range(5):
        n = int(rng.integers(2, 5))
        d = int(rng.integers(2, 9))
        z_a = oracles.random_unit_rows(rng, n, d)
        z_b = oracles.random_unit_rows(rng, n, d)
        _fd_check(lambda a, b: instance_loss(a, b, 0.5), [z_a, z_b])


def test_cluster_loss_gradients(rng):
    for _ in range(5):
        n = int(rng.integers(2, 5))
        m = int(rng.integers(2, 4))
        c_a = oracles.random_simplex_rows(rng, n, m)
        c_b = oracles.random_simplex_rows(rng, n, m)
        _fd_check(lambda a, b: cluster_loss(a, b, 1.0), [c_a, c_b])


def test_masked_mse_gradients(rng):
    pred = rng.normal(size=(2, 4, 6))
    target = rng.normal(size=(2, 4, 6))
    masked = torch.tensor([[True, False, True, False],
                           [False, True, False, True]])

    def build(p):
        return masked_mse_batch(p, torch.tensor(target, dtype=torch.float64), masked)

    tensor = torch.tensor(pred, dtype=torch.float64, requires_grad=True)
    build(tensor).backward()
    numeric = oracles.fd_gradient(
        lambda x: float(build(torch.tensor(x, dtype=torch.float64))), pred)
    assert oracles.worst_grad_error(tensor.grad.numpy(), numeric) < 1e-4


def test_masked_mse_batch_matches_single_oracle(rng):
    pred = rng.normal(size=(3, 5, 4))
    target = rng.normal(size=(3, 5, 4))
    masked = torch.zeros((3, 5), dtype=torch.bool)
    masked[0, [1, 3]] = True
    masked[1, [0]] = True
    masked[2, [2, 3, 4]] = True
    got = float(masked_mse_batch(
        torch.tensor(pred), torch.tensor(target), masked))
    per_sample = [
        oracles.naive_masked_mse(pred[b], target[b],
                                 np.flatnonzero(masked[b].numpy()))
        for b in range(3)
    ]
    assert got == pytest.approx(float(np.mean(per_sample)), abs=1e-12)
