import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from soundmap.encoders import GaussianEmbedding
from soundmap.errors import ConfigError, ContractError
from soundmap.numerics.autograd import Tensor, backward
from soundmap.numerics.gradcheck import grad_check
from soundmap.probloss import (LossParams, csd, csd_from_var, csd_matrix, csd_matrix_np, match_loss,
                               match_loss_np, mine_pseudo_positives, total_loss, vib_loss)
from soundmap.rng import derive_rng


def gauss(rng, n, d, lv_scale=1.0):
    return GaussianEmbedding(rng.normal(size=(n, d)), rng.normal(size=(n, d)) * lv_scale)


def csd_loop(mp, lvp, mq, lvq):
    total = 0.0
    for j in range(len(mp)):
        total += (mp[j] - mq[j]) ** 2
        total += abs(math.exp(lvp[j]) + math.exp(lvq[j]))
    return total


# -- distance -------------------------------------------------------------------------
def test_csd_worked_example():
    assert csd_from_var([1, 0], [0.5, 0.5], [0, 1], [0.25, 0.25]) == pytest.approx(3.5, abs=1e-12)
    zp = GaussianEmbedding(np.array([1.0, 0.0]), np.log([0.5, 0.5]))
    zq = GaussianEmbedding(np.array([0.0, 1.0]), np.log([0.25, 0.25]))
    assert csd(zp, zq) == pytest.approx(3.5, rel=1e-12)


def test_csd_degenerate_zero():
    assert csd_from_var([2.0, -1.0], [0, 0], [2.0, -1.0], [0, 0]) == 0.0


def test_csd_dimension_mismatch():
    with pytest.raises(ContractError):
        csd(GaussianEmbedding(np.zeros(3), np.zeros(3)), GaussianEmbedding(np.zeros(4), np.zeros(4)))


@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-5, 5)))
def test_csd_symmetric_nonnegative(x):
    zp = GaussianEmbedding(x[0], x[1])
    zq = GaussianEmbedding(x[2], x[3])
    assert csd(zp, zq) == csd(zq, zp)
    assert csd(zp, zq) >= 0


def test_csd_matrix_forms_agree():
    rng = derive_rng(0, "csd-matrix")
    p, q = gauss(rng, 5, 7), gauss(rng, 4, 7)
    M = csd_matrix_np(p, q)
    T = csd_matrix(GaussianEmbedding(Tensor(p.mu), Tensor(p.log_var)),
                   GaussianEmbedding(Tensor(q.mu), Tensor(q.log_var))).data
    for i in range(5):
        for j in range(4):
            want = csd_loop(p.mu[i], p.log_var[i], q.mu[j], q.log_var[j])
            assert M[i, j] == pytest.approx(want, rel=1e-12)
            assert T[i, j] == pytest.approx(want, rel=1e-12)


def test_csd_gradcheck():
    rng = derive_rng(0, "csd-grad")
    q = gauss(rng, 3, 4)
    lv = rng.normal(size=(3, 4)) * 0.3

    def f(mu):
        return csd_matrix(GaussianEmbedding(mu, Tensor(lv)), GaussianEmbedding(Tensor(q.mu), Tensor(q.log_var))).sum()

    assert grad_check(f, rng.normal(size=(3, 4)), 1e-3) < 1e-4
    mu = rng.normal(size=(3, 4))
    assert grad_check(lambda t: csd_matrix(GaussianEmbedding(Tensor(mu), t),
                                           GaussianEmbedding(Tensor(q.mu), Tensor(q.log_var))).sum(), lv, 1e-3) < 1e-4


# -- matching loss ------------------------------------------------------------------------
def test_match_loss_at_threshold():
    a, b = 3.0, 1.5
    for w in (0, 1):
        assert match_loss_np(b / a, w, a, b) == pytest.approx(0.693147, abs=1e-6)


def test_match_loss_example():
    assert match_loss_np(0.0, 1, 1.0, 1.0) == pytest.approx(0.313262, abs=1e-6)
    p = LossParams(a_init=1.0, b_init=1.0)
    out = match_loss(Tensor(np.array([0.0])), np.array([1.0]), p)
    assert float(out.data[0]) == pytest.approx(0.313262, abs=1e-6)


def test_match_loss_negative_asymptote():
    d = np.array([1.0, 10.0, 100.0, 1e4, 1e8])
    vals = match_loss_np(d, 0, 2.0, 0.5)
    assert np.all(np.diff(vals) <= 0)
    assert vals[-1] == 0.0
    assert np.isfinite(match_loss_np(1e8, 1, 2.0, 0.5))


def test_a_is_positive_by_construction():
    p = LossParams()
    p.a_log.data[...] = -50.0
    assert float(p.a.data[0]) > 0
    assert float(LossParams().a.data[0]) == pytest.approx(10.0)


# -- pseudo-positives ----------------------------------------------------------------------------
def brute_pseudo(D):
    n = len(D)
    out = np.zeros((n, n), bool)
    for p in range(n):
        for q in range(n):
            if q != p and D[p][q] <= D[p][p]:
                out[p][q] = True
    return out


def test_pseudo_worked_matrix():
    D = np.array([[1, 2, 3], [0.5, 2, 1], [4, 1, 2]], dtype=float)
    got = mine_pseudo_positives(D, np.eye(3, dtype=bool))
    pairs = {tuple(map(int, ij)) for ij in np.argwhere(got)}
    # row 1 also has D[1,2] = 1 <= 2, which the brute-force oracle agrees with
    assert pairs == {(1, 0), (1, 2), (2, 1)}
    assert np.array_equal(got, brute_pseudo(D))


def test_pseudo_strict_minimum_empty():
    D = np.array([[0.1, 2], [3, 0.2]])
    assert not mine_pseudo_positives(D, np.eye(2, dtype=bool)).any()


def test_pseudo_ties_count():
    D = np.array([[1.0, 1.0], [0.5, 2.0]])
    got = mine_pseudo_positives(D, np.eye(2, dtype=bool))
    assert got[0, 1] and got[1, 0]


def test_pseudo_row_without_positive():
    w = np.eye(3, dtype=bool)
    w[1, 1] = False
    with pytest.raises(ContractError):
        mine_pseudo_positives(np.ones((3, 3)), w)


def test_pseudo_random_with_ties():
    rng = derive_rng(0, "pseudo")
    for _ in range(200):
        D = rng.integers(0, 4, size=(8, 8)).astype(float)
        assert np.array_equal(mine_pseudo_positives(D, np.eye(8, dtype=bool)), brute_pseudo(D))


# -- VIB ------------------------------------------------------------------------------------
def test_vib_values():
    assert float(vib_loss(GaussianEmbedding(np.zeros((2, 3)), np.zeros((2, 3)))).data) == 0.0
    assert float(vib_loss(GaussianEmbedding(np.array([[1.0]]), np.array([[0.0]]))).data) == pytest.approx(0.5)


@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-4, 4)), hnp.arrays(np.float64, (3, 5), elements=st.floats(-4, 4)))
def test_vib_nonnegative(mu, lv):
    assert float(vib_loss(GaussianEmbedding(mu, lv)).data) >= -1e-12


# -- total loss ------------------------------------------------------------------------------
def tensors(z):
    return GaussianEmbedding(Tensor(z.mu.copy(), requires_grad=True), Tensor(z.log_var.copy(), requires_grad=True))


def batch(seed=0, n=6, d=5):
    rng = derive_rng(seed, "total")
    return {k: gauss(rng, n, d, 0.3) for k in "iat"}


def test_breakdown_adds_up():
    params = LossParams(a_init=2.0)
    total, br = total_loss({k: tensors(v) for k, v in batch().items()}, params, 0.1, 1e-2)
    assert br.total == pytest.approx(sum(br.pair_total(p) for p in ("at", "ai", "it")), rel=1e-12)
    assert float(total.data) == br.total


def test_term_switches():
    params = LossParams(a_init=2.0)
    emb = batch()
    _, br = total_loss({k: tensors(v) for k, v in emb.items()}, params, 0.0, 0.0)
    assert br.total == pytest.approx(sum(br.match.values()), rel=1e-12)


def test_match_term_oracle():
    # mean over B^2 pairs with pseudo-positives removed from the negative term
    params = LossParams(a_init=2.0, b_init=0.3)
    emb = batch(1)
    _, br = total_loss({k: tensors(v) for k, v in emb.items()}, params, 0.1, 0.0)
    D = csd_matrix_np(emb["a"], emb["t"])
    a, b = float(params.a.data[0]), float(params.b.data[0])  # float32-stored scalars
    n = len(D)
    m = ps = 0.0
    for p in range(n):
        for q in range(n):
            pseudo = q != p and D[p, q] <= D[p, p]
            if pseudo:
                ps += match_loss_np(D[p, q], 1, a, b)
            else:
                m += match_loss_np(D[p, q], float(p == q), a, b)
    assert br.match["at"] == pytest.approx(m / n**2, rel=1e-10)
    assert br.pseudo["at"] == pytest.approx(ps / n**2, rel=1e-10)


def test_batch_permutation_invariance():
    params = LossParams(a_init=2.0)
    emb = batch(2)
    perm = derive_rng(0, "perm").permutation(6)
    _, a = total_loss({k: tensors(v) for k, v in emb.items()}, params)
    _, b = total_loss({k: tensors(GaussianEmbedding(v.mu[perm], v.log_var[perm])) for k, v in emb.items()}, params)
    assert a.total == pytest.approx(b.total, rel=1e-12)


def test_identical_clones_finite():
    rng = derive_rng(0, "clone")
    mu = np.tile(rng.normal(size=(1, 4)), (5, 1))
    lv = np.full((5, 4), -1.0)
    emb = {k: tensors(GaussianEmbedding(mu, lv)) for k in "iat"}
    params = LossParams()
    total, br = total_loss(emb, params)
    assert math.isfinite(br.total)
    # every off-diagonal entry ties with the diagonal, so only the 5 diagonal terms stay in the match part
    a = float(params.a.data[0])
    assert br.match["at"] == pytest.approx(match_loss_np(2 * 4 * math.exp(-1.0), 1, a, 0.0) / 5, rel=1e-10)
    assert br.pseudo["at"] == pytest.approx(20 * match_loss_np(2 * 4 * math.exp(-1.0), 1, a, 0.0) / 25, rel=1e-10)


def test_batch_of_one_rejected():
    with pytest.raises(ConfigError):
        total_loss({k: tensors(v) for k, v in batch(n=1).items()}, LossParams())


def variance_grad(w):
    """d(match loss)/d(var) for a single pair at a = 1, b = 0."""
    var = Tensor(np.array([0.4, 0.2]), requires_grad=True)
    z = GaussianEmbedding(Tensor(np.array([[0.3, -0.1]])), Tensor(np.zeros((1, 2))))
    d = csd_matrix(z, z)  # ||0||^2 + 2
    d = d + var.sum()
    loss = match_loss(d, np.array([[w]]), LossParams(a_init=1.0)).sum()
    backward(loss)
    return var.grad


def test_variance_gradient_signs():
    assert np.all(variance_grad(1.0) > 0)
    assert np.all(variance_grad(0.0) < 0)


def test_infonce_switch():
    params = LossParams()
    total, br = total_loss({k: tensors(v) for k, v in batch().items()}, params, kind="infonce")
    assert math.isfinite(br.total) and br.alpha == 0 and br.beta == 0
    with pytest.raises(ConfigError):
        total_loss({k: tensors(v) for k, v in batch().items()}, params, kind="triplet")
