import math

import numpy as np
import pytest

from conftest import brute_force_greedy, central_differences, rel_err
from sage_ada.errors import ContractViolation
from sage_ada.nn_core import DenseNet, Layer
from sage_ada.sage import (
    adversarial_gradient,
    diverse_sage_select,
    dump_norms_csv,
    expected_gradient,
    farthest_first,
    norm_only_select,
    pool_embeddings,
    positive_projection,
    sage_distance,
    sage_embed,
    sage_norm,
)


def identity_phi(d):
    return DenseNet([Layer(np.eye(d), np.zeros(d))])


def test_constant_discriminator_gives_zero_gradient(rng):
    disc = DenseNet([Layer(np.zeros((5, 3)), rng.standard_normal(3), "sigmoid")])
    f = DenseNet([Layer(rng.standard_normal((5, 3)), np.zeros(3), "softmax")])
    sag = adversarial_gradient(identity_phi(5), f, disc, rng.standard_normal(5))
    assert not sag.grads.any()


def test_single_sigmoid_layer_closed_form(rng):
    w = rng.standard_normal((5, 3))
    disc = DenseNet([Layer(w, np.zeros(3), "sigmoid")])
    f = DenseNet([Layer(np.zeros((5, 3)), np.zeros(3), "softmax")])
    z = rng.standard_normal(5)
    sag = adversarial_gradient(identity_phi(5), f, disc, z)
    for i in range(3):
        s = 1 / (1 + math.exp(-z @ w[:, i]))
        np.testing.assert_allclose(sag.grads[i], -(1 - s) * w[:, i], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_adversarial_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    disc = DenseNet.build([5, 7, 3], ["tanh", "sigmoid"], rng)
    f = DenseNet.build([5, 3], ["softmax"], rng)
    z = rng.standard_normal(5)
    sag = adversarial_gradient(identity_phi(5), f, disc, z)
    for i in range(3):
        (idx, num), = central_differences(lambda: -math.log(disc.forward(z)[i]), [z])
        assert rel_err(sag.grads[i][idx], num) < 1e-4


def test_adversarial_gradient_leaves_probs_and_batches_consistent(rng):
    phi = DenseNet.build([2, 6, 4], ["relu", "relu"], rng)
    f = DenseNet.build([4, 3], ["softmax"], rng)
    disc = DenseNet.build([4, 6, 3], ["relu", "sigmoid"], rng)
    x = rng.standard_normal((4, 2))
    batch = adversarial_gradient(phi, f, disc, x)
    for k in range(4):
        single = adversarial_gradient(phi, f, disc, x[k])
        np.testing.assert_allclose(batch.grads[k], single.grads, atol=1e-14)
        np.testing.assert_allclose(batch.probs[k], f.forward(phi.forward(x[k])), atol=1e-14)


def test_adversarial_gradient_counts_clamped(rng):
    disc = DenseNet([Layer(np.zeros((2, 2)), np.array([-100.0, 0.0]), "sigmoid")])
    f = DenseNet([Layer(np.zeros((2, 2)), np.zeros(2), "softmax")])
    sag = adversarial_gradient(identity_phi(2), f, disc, np.zeros((3, 2)))
    assert sag.n_clamped == 3
    assert np.isfinite(sag.grads).all()


def test_projection_agreement_cancels(rng):
    e = rng.standard_normal(4)
    probs = np.array([0.3, 0.7])
    for a in (0.5, 1.0, 3.0):
        g = np.stack([a * e, a * e])
        out = positive_projection(g, probs)
        assert np.linalg.norm(out[0]) < 1e-10 * np.linalg.norm(a * e)


def test_projection_opposition_doubles():
    # Rows e and -e with weights (0.75, 0.25): E = 0.5 e, so row 2 opposes E.
    e = np.array([1.0, -2.0, 0.5])
    g = np.stack([e, -e])
    out = positive_projection(g, np.array([0.75, 0.25]))
    assert abs(np.linalg.norm(out[1]) / np.linalg.norm(-e) - 2.0) < 1e-12
    np.testing.assert_allclose(out[1], -2 * e, rtol=1e-12)
    assert np.linalg.norm(out[0]) < 1e-12


def test_projection_orthogonal_unchanged():
    g = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    probs = np.array([1.0, 0.0, 0.0])
    out = positive_projection(g, probs)
    np.testing.assert_array_equal(out[1], g[1])
    np.testing.assert_array_equal(out[2], g[2])


def test_projection_degenerate_mean_is_skipped():
    v = np.array([3.0, 4.0])
    g = np.stack([v, -v])
    np.testing.assert_array_equal(positive_projection(g, np.array([0.5, 0.5])), g)


def test_projection_sign_identity(rng):
    g = rng.standard_normal((500, 3, 6))
    p = rng.dirichlet(np.ones(3), size=500)
    e = expected_gradient(g, p)
    out = positive_projection(g, p)
    before = np.einsum("ncd,nd->nc", g, e)
    after = np.einsum("ncd,nd->nc", out, e)
    np.testing.assert_allclose(after, before - np.abs(before), atol=1e-10)
    assert np.all(after <= 1e-10)
    agree = before >= 0
    scale = np.linalg.norm(g, axis=2) * np.linalg.norm(e, axis=1)[:, None]
    assert np.all(np.abs(after[agree]) < 1e-9 * scale[agree])


def test_embed_confident_agreeing_is_zero():
    proj = np.array([[0.0, 0.0], [5.0, -1.0]])
    assert not sage_embed(proj, np.array([1.0, 0.0])).any()


def test_embed_uniform_equal_rows():
    v = np.array([1.0, 2.0, -2.0])
    emb = sage_embed(np.tile(v, (4, 1)), np.full(4, 0.25))
    assert sage_norm(emb) == pytest.approx(3.0, abs=1e-12)


def test_embed_norm_identity(rng):
    for _ in range(200):
        c, d = rng.integers(2, 6), rng.integers(1, 8)
        proj = rng.standard_normal((c, d)) * rng.uniform(0.1, 10)
        p = rng.dirichlet(np.ones(c))
        lhs = sage_norm(sage_embed(proj, p)) ** 2
        rhs = sum(p[i] * np.dot(proj[i], proj[i]) for i in range(c))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, rhs)


def test_embed_rejects_bad_probs():
    with pytest.raises(ContractViolation):
        sage_embed(np.ones((2, 3)), np.array([1.2, -0.2]))
    with pytest.raises(ContractViolation):
        sage_embed(np.ones((2, 3)), np.array([0.2, 0.3, 0.5]))


def test_flat_gradient_mean_vs_sage_norm():
    # Class gradients that nearly cancel on average, the situation near a local minimum.
    v = np.array([2.0, -1.0, 0.5])
    g = np.stack([v, -v])
    for probs in (np.array([0.5, 0.5]), np.array([0.5 + 1e-8, 0.5 - 1e-8])):
        e = expected_gradient(g, probs)
        emb = sage_embed(positive_projection(g, probs), probs)
        assert sage_norm(emb) > 10 * np.linalg.norm(e)
        assert sage_norm(emb) > 0.9 * np.linalg.norm(v)


def test_distance_axioms(rng):
    a, b, c = rng.standard_normal((3, 1000, 6))
    for x, y, z in zip(a, b, c):
        assert sage_distance(x, x) == 0.0
        assert sage_distance(x, y) == sage_distance(y, x) >= 0.0
        assert sage_distance(x, z) <= sage_distance(x, y) + sage_distance(y, z) + 1e-12


def test_distance_shape_mismatch():
    with pytest.raises(ContractViolation):
        sage_distance(np.zeros(3), np.zeros(4))


def test_select_budget_one_is_max_norm(rng):
    emb = rng.standard_normal((20, 4))
    assert farthest_first(emb, 1) == [int(np.argmax(np.linalg.norm(emb, axis=1)))]


def test_select_identical_pool():
    emb = np.ones((6, 3))
    assert farthest_first(emb, 4) == [0, 1, 2, 3]


def test_select_hand_built_pool():
    emb = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [2.9, 0.1], [0.0, -2.0]])
    # max norm is index 1; farthest from it is index 3 (distance 4); then index 5.
    assert farthest_first(emb, 3) == [1, 3, 5]
    assert farthest_first(emb, 3) == brute_force_greedy(emb, 3)


def test_select_matches_brute_force(rng):
    for _ in range(100):
        n = int(rng.integers(1, 9))
        emb = rng.standard_normal((n, 3))
        if rng.random() < 0.3:
            emb = np.round(emb)  # force ties
        for b in range(0, min(4, n) + 1):
            assert farthest_first(emb, b) == brute_force_greedy(emb, b)


def test_select_permutation_invariant(rng):
    emb = rng.standard_normal((15, 4))
    perm = rng.permutation(15)
    picked = farthest_first(emb, 5)
    picked_perm = farthest_first(emb[perm], 5)
    assert [int(perm[i]) for i in picked_perm] == picked


def test_select_contracts():
    with pytest.raises(ContractViolation):
        farthest_first(np.ones((3, 2)), 4)
    with pytest.raises(ContractViolation):
        farthest_first(np.zeros((0, 2)), 0)


def test_diverse_select_end_to_end(rng):
    phi = DenseNet.build([2, 8, 4], ["relu", "relu"], rng)
    f = DenseNet.build([4, 3], ["softmax"], rng)
    disc = DenseNet.build([4, 8, 3], ["relu", "sigmoid"], rng)
    x = rng.standard_normal((30, 2))
    picked = diverse_sage_select(x, f, phi, disc, 6)
    assert len(set(picked)) == 6
    assert picked == brute_force_greedy(pool_embeddings(x, f, phi, disc), 6)
    with pytest.raises(ContractViolation):
        diverse_sage_select(x, f, phi, disc, 31)


def test_norm_only_select_ties():
    emb = np.array([[1.0, 0.0], [0.0, 2.0], [2.0, 0.0], [0.5, 0.5]])
    assert norm_only_select(emb, 2) == [1, 2]
    assert norm_only_select(emb, 3) == [1, 2, 0]


def test_dump_norms_csv(tmp_path):
    path = tmp_path / "norms.csv"
    dump_norms_csv(path, [10, 11, 12], np.array([0.5, 1.5, 0.25]), [11])
    lines = path.read_text().splitlines()
    assert lines == ["pool_index,norm,selected_flag", "10,0.5,0", "11,1.5,1", "12,0.25,0"]
