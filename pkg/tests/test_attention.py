import math

import numpy as np
import pytest

from pixground import tensor as T
from pixground.attention import MultiHeadAttention, scaled_dot_attention
from pixground.tensor import Tensor, grad_check


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def test_single_key_returns_its_value():
    out, w = scaled_dot_attention(t64([[0.3, -1.0]]), t64([[2.0, 5.0]]), t64([[7.0, 8.0]]))
    assert w.data.tolist() == [[1.0]]
    assert out.data.tolist() == [[7.0, 8.0]]


def test_hand_evaluated_mix():
    out, w = scaled_dot_attention(t64([[1.0]]), t64([[math.log(2)], [0.0]]), t64([[1.0], [4.0]]))
    assert np.allclose(w.data, [[2 / 3, 1 / 3]], atol=1e-12)
    assert np.allclose(out.data, [[2.0]], atol=1e-12)


def test_zero_logits_average_values():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(5, 3))
    out, _ = scaled_dot_attention(t64(np.zeros((2, 3))), t64(rng.normal(size=(5, 3))), t64(v))
    assert np.allclose(out.data, np.tile(v.mean(axis=0), (2, 1)))


def test_shape_errors():
    with pytest.raises(T.ShapeError):
        scaled_dot_attention(t64(np.ones((2, 3))), t64(np.ones((4, 2))), t64(np.ones((4, 3))))
    with pytest.raises(T.ShapeError):
        scaled_dot_attention(t64(np.ones((2, 3))), t64(np.ones((4, 3))), t64(np.ones((5, 3))))


def _mha(dim=8, heads=2, seed=0):
    return MultiHeadAttention(dim, heads, np.random.default_rng(seed), dtype=np.float64)


def test_one_head_identity_projection_matches_plain_attention():
    rng = np.random.default_rng(1)
    mha = _mha(4, 1)
    for lin in (mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj):
        lin.weight.data = np.eye(4)
    q, k = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 5, 4))
    out, w = mha(t64(q), t64(k), t64(k), return_weights=True)
    ref, ref_w = scaled_dot_attention(t64(q[0]), t64(k[0]), t64(k[0]))
    assert np.allclose(out.data[0], ref.data)
    assert np.allclose(w[0, 0], ref_w.data)


def test_zero_output_projection_gives_zero():
    rng = np.random.default_rng(2)
    mha = _mha()
    mha.out_proj.weight.data[:] = 0
    out, _ = mha(t64(rng.normal(size=(2, 3, 8))), t64(rng.normal(size=(2, 6, 8))),
                 t64(rng.normal(size=(2, 6, 8))))
    assert np.array_equal(out.data, np.zeros((2, 3, 8)))


@pytest.mark.parametrize("seed", range(10))
def test_multi_head_gradients(seed):
    rng = np.random.default_rng(seed)
    mha = _mha(seed=seed)
    q = t64(rng.normal(size=(2, 3, 8)), True)
    kv = t64(rng.normal(size=(2, 4, 8)), True)
    mask = np.zeros((2, 4), dtype=bool)
    mask[1, 2:] = True
    probe = rng.normal(size=(2, 3, 8))

    def f(_):
        out, _w = mha(q, kv, kv, key_pad_mask=mask)
        return (out * probe).sum()

    assert grad_check(f, mha.parameters() + [q, kv]) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_scaled_dot_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    q, k, v = (t64(rng.normal(size=s), True) for s in ((3, 4), (5, 4), (5, 4)))
    probe = rng.normal(size=(3, 4))
    assert grad_check(lambda x: (scaled_dot_attention(*x)[0] * probe).sum(), [q, k, v]) < 1e-4


def test_key_permutation_equivariance():
    rng = np.random.default_rng(4)
    mha = _mha()
    q, kv = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 6, 8))
    perm = rng.permutation(6)
    out, w = mha(t64(q), t64(kv), t64(kv), return_weights=True)
    out_p, w_p = mha(t64(q), t64(kv[:, perm]), t64(kv[:, perm]), return_weights=True)
    assert np.allclose(out.data, out_p.data, atol=1e-12)
    assert np.allclose(w[..., perm], w_p, atol=1e-12)


def test_masked_keys_get_zero_weight_in_every_head():
    rng = np.random.default_rng(5)
    mha = MultiHeadAttention(8, 4, rng)
    mask = np.array([[False, False, True, True, False]])
    x = Tensor(rng.normal(size=(1, 5, 8)).astype(np.float32))
    out, w = mha(x, x, x, key_pad_mask=mask, return_weights=True)
    assert out.shape == (1, 5, 8)
    assert np.all(w[..., mask[0]] == 0)
    assert np.all(np.abs(w.sum(-1) - 1) < 1e-6)


def test_mask_shape_mismatch():
    mha = _mha()
    x = t64(np.zeros((1, 3, 8)))
    with pytest.raises(T.ShapeError):
        mha(x, x, x, key_pad_mask=np.zeros((1, 4), dtype=bool))


def test_heads_must_divide_dim():
    with pytest.raises(ValueError):
        _mha(dim=6, heads=4)
