import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from a2net import autodiff as ad
from a2net import objectives as obj


def T(a, grad=False):
    return ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_default_weights():
    w = obj.LossWeights.defaults(16, 12)
    assert abs(w.alpha - 1 / 192) <= 1e-12 and abs(w.beta - 1.0) <= 1e-12
    assert w.lam == 1.0 and w.eta == 0.1
    assert obj.LossWeights.defaults(16, 12, mnist_cifar=True).eta == 0.5
    with pytest.raises(ValueError):
        obj.LossWeights(lam=-1.0)


def test_feature_recon_zero_when_exact():
    # rows of W orthonormal, X in their span, V' = X W^T
    W = np.eye(3, 5)
    Vp = np.array([[0.5, -0.2, 0.1], [0.3, 0.0, -0.4]])
    X = Vp @ W
    recon, constraint = obj.feature_recon_terms(T(X), T(Vp), T(W))
    assert recon.item() == 0.0 and constraint.item() == 0.0


def test_feature_recon_lambda_zero_drops_constraint():
    rng = np.random.default_rng(0)
    X, Vp, W = rng.normal(size=(4, 6)), rng.normal(size=(4, 3)), rng.normal(size=(3, 6))
    recon, _ = obj.feature_recon_terms(T(X), T(Vp), T(W))
    assert obj.feature_recon_loss(T(X), T(Vp), T(W), lam=0.0).item() == recon.item()


def test_feature_recon_shape_errors():
    with pytest.raises(ad.ShapeError):
        obj.feature_recon_terms(T(np.zeros((2, 5))), T(np.zeros((2, 3))), T(np.zeros((3, 4))))


def test_decorrelation_zero_case():
    # columns orthogonal with squared norm n: V'^T V' = n I
    H = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], dtype=float)
    assert obj.decorrelation_loss(T(H[:, :3])).item() == 0.0
    assert obj.decorrelation_loss(T(np.ones((4, 2)))).item() == pytest.approx(2 * 16.0)


def test_hash_loss_zero_case():
    S = np.array([[1, -1]])
    Q = np.array([[1.0, -1.0, 1.0]])
    exact = np.array([[1, -1, 1], [-1, 1, -1]], dtype=float)  # u.z = 3 S
    assert obj.hash_similarity_loss(T(Q), exact, S).item() == 0.0
    off = np.array([[1, -1, 1], [-1, -1, 1]], dtype=float)  # second inner product is 1, wanted -3
    assert obj.hash_similarity_loss(T(Q), off, S).item() == pytest.approx(16.0)


def test_hash_loss_matches_double_sum():
    rng = np.random.default_rng(2)
    Q = rng.uniform(-1, 1, (4, 6))
    Z = np.where(rng.random((7, 6)) < 0.5, -1.0, 1.0)
    S = np.where(rng.random((4, 7)) < 0.3, 1.0, -1.0)
    want = sum((Q[i] @ Z[j] - 6 * S[i, j]) ** 2 for i in range(4) for j in range(7))
    assert obj.hash_similarity_loss(T(Q), Z, S).item() == pytest.approx(want, rel=1e-13)


def test_hash_loss_has_no_gradient_through_database_codes():
    Z = ad.Tensor(np.ones((3, 2)), requires_grad=True)
    Q = T(np.full((1, 2), 0.3), grad=True)
    ad.backward(obj.hash_similarity_loss(Q, Z, np.ones((1, 3))))
    assert Z.grad is None and Q.grad is not None


def test_hash_loss_shape_errors():
    with pytest.raises(ad.ShapeError):
        obj.hash_similarity_loss(T(np.zeros((2, 3))), np.ones((4, 2)), np.ones((2, 4)))
    with pytest.raises(ad.ShapeError):
        obj.hash_similarity_loss(T(np.zeros((2, 3))), np.ones((4, 3)), np.ones((2, 5)))


def test_image_recon_zero_case_and_branches():
    I = np.random.default_rng(0).random((2, 3, 4, 4))
    g, gp = obj.image_recon_terms(T(I), T(I), T(I))
    assert g.item() == 0.0 and gp.item() == 0.0
    g, gp = obj.image_recon_terms(T(I), I_gp=T(I + 1))
    assert g is None and gp.item() == I.size
    with pytest.raises(ValueError):
        obj.image_recon_terms(T(I))
    with pytest.raises(ad.ShapeError):
        obj.image_recon_terms(T(I), T(np.zeros((2, 3, 4, 5))))


def test_total_loss_weighting_and_variants():
    terms = {n: T(float(i + 1)) for i, n in enumerate(obj.TERM_NAMES)}
    w = obj.LossWeights(lam=2.0, alpha=3.0, beta=4.0, eta=0.5)
    assert obj.total_loss(terms, w).item() == pytest.approx(1 + 2 * 2 + 3 * 3 + 4 * 4 + 0.5 * (5 + 6))
    basic = {n: terms[n] for n in ("feat_x", "feat_v", "decor", "hash")}
    assert obj.total_loss(basic, w, "basic").item() == pytest.approx(1 + 4 + 9 + 16)
    with pytest.raises(ValueError):
        obj.total_loss(terms, w, "basic")
    with pytest.raises(ValueError):
        obj.total_loss(basic, w, "plus_plus")
    with pytest.raises(ValueError):
        obj.total_loss({"bogus": T(1.0)}, w)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31))
def test_losses_non_negative(n, k, seed):
    rng = np.random.default_rng(seed)
    Vp = np.tanh(rng.normal(size=(n, k)))
    Z = np.where(rng.random((5, k)) < 0.5, -1.0, 1.0)
    S = np.where(rng.random((n, 5)) < 0.5, -1.0, 1.0)
    assert obj.decorrelation_loss(T(Vp)).item() >= 0
    assert obj.hash_similarity_loss(T(Vp), Z, S).item() >= 0


def rand(rng, *shape):
    return ad.Tensor(rng.normal(size=shape), requires_grad=True)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    X, W, Vp = rand(rng, 3, 7), rand(rng, 4, 7), rand(rng, 3, 4)
    Z = np.where(rng.random((6, 4)) < 0.5, -1.0, 1.0)
    S = np.where(rng.random((3, 6)) < 0.5, -1.0, 1.0)
    I, Ig, Igp = rand(rng, 2, 1, 3, 3), rand(rng, 2, 1, 3, 3), rand(rng, 2, 1, 3, 3)
    checks = [
        (lambda p: obj.feature_recon_loss(p[0], p[1], p[2], lam=0.7), [X, Vp, W]),
        (lambda p: obj.decorrelation_loss(ad.tanh(p[0])), [Vp]),
        (lambda p: obj.hash_similarity_loss(ad.tanh(p[0]), Z, S), [Vp]),
        (lambda p: obj.image_recon_loss(p[0], p[1], p[2]), [I, Ig, Igp]),
    ]
    for fn, params in checks:
        res = obj_check(fn, params)
        assert res.max_error <= 1e-4


def obj_check(fn, params):
    return ad.finite_diff_check(fn, params, eps=1e-5)
