import numpy as np
import pytest

from cogrind import autodiff as ad
from cogrind import text as tx
from cogrind.autodiff import Tensor
from cogrind.synthetic import synthetic_vocab


@pytest.fixture
def vocab():
    return synthetic_vocab()


@pytest.fixture
def params(vocab):
    return tx.init_text_params(np.random.default_rng(0), len(vocab), embed_dim=6, hidden_dim=5)


def test_tokenize_known_words(vocab):
    ids = tx.tokenize("red square on the left", vocab)
    assert len(ids) == 5
    assert vocab.unk_id not in ids


def test_tokenize_normalizes_case_and_spaces(vocab):
    assert tx.tokenize("RED   Square", vocab) == tx.tokenize("red square", vocab)


def test_tokenize_unknown_word():
    v = tx.Vocabulary(["ball"])
    assert tx.tokenize("zxqv ball", v) == [v.unk_id, v.id("ball")]


def test_tokenize_empty(vocab):
    with pytest.raises(tx.EmptyExpressionError):
        tx.tokenize("  ?! ", vocab)


def test_vocabulary_layout_and_roundtrip(tmp_path, vocab):
    assert vocab.id(tx.PAD) == 0
    assert sorted(vocab.stoi.values()) == list(range(len(vocab)))
    vocab.save(tmp_path / "vocab.txt")
    assert tmp_path.joinpath("vocab.txt").read_text().splitlines()[3] == vocab.itos[3]
    assert tx.Vocabulary.load(tmp_path / "vocab.txt").itos == vocab.itos


def test_encode_shape(params):
    enc = tx.encode([3, 4, 5, 6], params)
    assert enc.hidden.shape == (1, 4, 10)
    assert enc.embeddings.shape == (1, 4, 6)


def test_encode_rejects_out_of_range(params, vocab):
    with pytest.raises(ValueError, match="vocabulary"):
        tx.encode([len(vocab)], params)


def test_zero_lstm_gives_zero_states(params):
    for k, p in params.items():
        if k.startswith(("fwd", "bwd")):
            p.data[...] = 0.0
    enc = tx.encode([2, 3, 4], params)
    np.testing.assert_array_equal(enc.hidden.data, 0.0)


def test_backward_direction_equals_forward_on_reversed_input(params):
    for k in ("w_x", "w_h", "b"):
        params[f"bwd.{k}"] = params[f"fwd.{k}"]
    ids = [2, 7, 3, 9, 4]
    H = 5
    h = tx.encode(ids, params).hidden.data[0]
    h_rev = tx.encode(ids[::-1], params).hidden.data[0]
    np.testing.assert_allclose(h_rev[:, :H], h[::-1, H:], atol=1e-14)
    # explicit scan of the reversed embeddings reproduces the same states
    emb = Tensor(params["embed"].data[ids[::-1]][None])
    scan = tx.lstm_scan(emb, params["fwd.w_x"], params["fwd.w_h"], params["fwd.b"]).data[0]
    np.testing.assert_allclose(scan, h[::-1, H:], atol=1e-14)


def test_padding_does_not_change_encoding(params):
    a = tx.encode([2, 3], params).hidden.data[0]
    b = tx.encode_batch([[2, 3], [4, 5, 6, 7]], params).hidden.data[0, :2]
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_uniform_scores_give_mean_embedding():
    e = Tensor(np.random.default_rng(1).normal(size=(1, 4, 3)))
    alphas, q = tx.attend(Tensor(np.zeros((1, 4))), e)
    np.testing.assert_allclose(alphas.data, 0.25)
    np.testing.assert_allclose(q.data[0], e.data[0].mean(axis=0))


def test_peaked_scores_select_one_embedding():
    e = Tensor(np.random.default_rng(2).normal(size=(1, 3, 4)))
    _, q = tx.attend(Tensor([[0.0, 800.0, 0.0]]), e)
    np.testing.assert_allclose(q.data[0], e.data[0, 1])


def test_softmax_arithmetic():
    alphas, _ = tx.attend(Tensor([[np.log(2.0), 0.0]]), Tensor(np.ones((1, 2, 1))))
    np.testing.assert_allclose(alphas.data[0], [2 / 3, 1 / 3])


def test_alpha_simplex_over_many_expressions(params, vocab):
    rng = np.random.default_rng(3)
    exprs = [list(rng.integers(0, len(vocab), size=rng.integers(1, 9))) for _ in range(1000)]
    enc = tx.encode_batch(exprs, params)
    for m in tx.ATTRIBUTES:
        alphas, q = tx.attribute_attention(enc, m, params)
        a = alphas.data
        assert np.all(a >= 0)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-10)
        assert np.all(a[enc.mask == 0] == 0)
        # q lies in the convex hull: it equals the alpha-weighted combination
        np.testing.assert_allclose(q.data, np.einsum("bn,bne->be", a, enc.embeddings.data), atol=1e-12)


def test_query_is_permutation_covariant():
    rng = np.random.default_rng(4)
    e, s = rng.normal(size=(1, 5, 3)), rng.normal(size=(1, 5))
    perm = rng.permutation(5)
    _, q1 = tx.attend(Tensor(s), Tensor(e))
    _, q2 = tx.attend(Tensor(s[:, perm]), Tensor(e[:, perm]))
    np.testing.assert_allclose(q1.data, q2.data, atol=1e-14)


@pytest.mark.parametrize("name", ["fwd.w_x", "bwd.w_h", "fwd.b", "att_sub.w", "att_loc.w", "embed"])
def test_query_gradients(params, name):
    probe = np.random.default_rng(5).normal(size=(2, 6))

    def f(p):
        local = dict(params)
        local[name] = p
        enc = tx.encode_batch([[2, 5, 3], [4, 6]], local)
        _, qs = tx.attribute_attention(enc, "sub", local)
        _, ql = tx.attribute_attention(enc, "loc", local)
        return ad.sum(ad.mul(ad.add(qs, ad.scale(ql, 0.5)), Tensor(probe)))

    assert ad.grad_check(f, Tensor(params[name].data.copy()), eps=1e-6) <= 1e-4
