import numpy as np
import pytest

from cogrind import autodiff as ad
from cogrind import cogrounding as cg
from cogrind.autodiff import Tensor


def T(x):
    return Tensor(np.asarray(x, dtype=float))


def test_rows_are_distributions():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = rng.normal(size=(2, 1, 9, 4)) * 3
        M = cg.affinity(T(a), T(b)).data[0]
        assert np.all(M >= 0)
        np.testing.assert_allclose(M.sum(axis=1), 1.0, atol=1e-10)


def test_affinity_examples():
    F = T(np.eye(4)[None] * 30.0)
    np.testing.assert_allclose(cg.affinity(F, F).data[0], np.eye(4), atol=1e-12)
    c = T(np.ones((1, 5, 3)))
    np.testing.assert_allclose(cg.affinity(c, c).data[0], 0.2)
    Fa = T([[[np.log(2.0)], [0.0]]])
    Fb = T([[[1.0], [0.0]]])
    np.testing.assert_allclose(cg.affinity(Fa, Fb).data[0, 0], [2 / 3, 1 / 3])
    with pytest.raises(ad.ShapeError):
        cg.affinity(T(np.ones((1, 4, 3))), T(np.ones((1, 5, 3))))


def test_propagate_examples():
    rng = np.random.default_rng(1)
    Fb = rng.normal(size=(1, 6, 3))
    np.testing.assert_allclose(cg.propagate(T(np.eye(6)[None]), T(Fb)).data, Fb)
    mean = cg.propagate(T(np.full((1, 6, 6), 1 / 6)), T(Fb)).data[0]
    np.testing.assert_allclose(mean, np.tile(Fb[0].mean(axis=0), (6, 1)), atol=1e-12)
    M = cg.affinity(T(rng.normal(size=(1, 6, 3))), T(Fb))
    P = cg.propagate(M, T(Fb)).data[0]
    assert np.all(P >= Fb[0].min(axis=0) - 1e-12) and np.all(P <= Fb[0].max(axis=0) + 1e-12)


def test_enhance_examples():
    rng = np.random.default_rng(2)
    D = 4
    Fa, Fb = T(rng.normal(size=(1, 9, D))), T(rng.normal(size=(1, 9, D)))
    Va, Vb = cg.enhance_pair(Fa, Fb, cg.identity_conv_params(D))
    np.testing.assert_array_equal(Va.data, Fa.data)
    np.testing.assert_array_equal(Vb.data, Fb.data)
    params = cg.init_cogrounding_params(rng, D, identity=False)
    Va, Vb = cg.enhance_pair(Fa, Fa, params)
    np.testing.assert_allclose(Va.data, Vb.data, atol=1e-12)
    Z = T(np.zeros((1, 9, D)))
    Va, _ = cg.enhance_pair(Z, Z, params)
    np.testing.assert_array_equal(Va.data, 0.0)
    np.testing.assert_allclose(cg.enhance_one(Fa, Fb, params).data, cg.enhance_pair(Fa, Fb, params)[0].data)


def test_reverse_direction_is_row_stochastic():
    rng = np.random.default_rng(3)
    Fa, Fb = rng.normal(size=(2, 1, 5, 3)) * 2
    # V_b with an identity-on-second-block conv exposes the reverse propagation
    w = np.zeros((6, 3))
    w[3:] = np.eye(3)
    _, Vb = cg.enhance_pair(T(Fa), T(Fb), {"conv.w": T(w), "conv.b": T(np.zeros(3))})
    logits = Fb[0] @ Fa[0].T
    M = np.exp(logits - logits.max(axis=1, keepdims=True))
    M /= M.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(Vb.data[0], M @ Fa[0], atol=1e-12)


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    Fa, Fb = rng.normal(size=(2, 1, 4, 3))
    perm = rng.permutation(4)
    P = np.eye(4)[perm]
    M = cg.affinity(T(Fa), T(Fb)).data[0]
    Mp = cg.affinity(T(Fa[:, perm]), T(Fb[:, perm])).data[0]
    np.testing.assert_allclose(Mp, P @ M @ P.T, atol=1e-14)
    params = cg.init_cogrounding_params(rng, 3, identity=False)
    Va, Vb = cg.enhance_pair(T(Fa), T(Fb), params)
    Vap, Vbp = cg.enhance_pair(T(Fa[:, perm]), T(Fb[:, perm]), params)
    np.testing.assert_allclose(Vap.data, Va.data[:, perm], atol=1e-14)
    np.testing.assert_allclose(Vbp.data, Vb.data[:, perm], atol=1e-14)


def test_inference_partners():
    assert list(cg.inference_partners(1)) == [0]
    assert list(cg.inference_partners(5)) == [1, 0, 1, 2, 3]
    assert list(cg.inference_partners(5, stride=2)) == [2, 3, 0, 1, 2]


def test_gradient_flow():
    rng = np.random.default_rng(5)
    Fb = T(rng.normal(size=(1, 4, 3)))
    params = cg.init_cogrounding_params(rng, 3, identity=False)
    probe = T(rng.normal(size=(1, 4, 3)))

    def f(Fa):
        Va, Vb = cg.enhance_pair(Fa, Fb, params)
        return ad.sum(ad.mul(ad.add(Va, ad.scale(Vb, 0.7)), probe))

    assert ad.grad_check(f, T(rng.normal(size=(1, 4, 3))), eps=1e-6) <= 1e-4
    assert ad.grad_check(lambda w: ad.sum(ad.mul(cg.enhance_one(Fb, Fb, {"conv.w": w, "conv.b": params["conv.b"]}), probe)),
                         T(params["conv.w"].data.copy()), eps=1e-6) <= 1e-4


def test_default_init_starts_as_single_frame_features():
    rng = np.random.default_rng(6)
    Fa, Fb = T(rng.normal(size=(1, 9, 4))), T(rng.normal(size=(1, 9, 4)))
    Va, Vb = cg.enhance_pair(Fa, Fb, cg.init_cogrounding_params(rng, 4))
    np.testing.assert_array_equal(Va.data, Fa.data)
    np.testing.assert_array_equal(Vb.data, Fb.data)
