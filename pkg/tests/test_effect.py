import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aem import numerics as nx
from aem.effect import (effect_alignment_loss, effect_contrastive_loss, encode_with_token, fuse,
                        init_params, pad_batch)

D = 8


@pytest.fixture(scope="module")
def P():
    return {k: nx.Tensor(v) for k, v in init_params(np.random.default_rng(0), D, D).items()}


def test_encoder_shapes(P):
    X = np.random.default_rng(1).normal(size=(5, D))
    X_enc, e = encode_with_token(P, X, None, P["token"])
    assert X_enc.shape == (1, 5, D) and e.shape == (1, D)


def test_zeroed_blocks_reduce_to_final_norm_of_input(P):
    Z = dict(P)
    for k in P:
        if ".qkv." in k or ".out." in k or ".ff" in k:
            Z[k] = nx.Tensor(np.zeros_like(P[k].data))
    X = np.random.default_rng(2).normal(size=(4, D))
    X_enc, e = encode_with_token(Z, X, None, P["token"], position_scale=0.0)
    h = np.vstack([X, P["token"].data])
    mu = h.mean(-1, keepdims=True)
    ref = (h - mu) / np.sqrt(((h - mu) ** 2).mean(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(X_enc.data[0], ref[:4], atol=1e-12)
    np.testing.assert_allclose(e.data[0], ref[4], atol=1e-12)


def test_frame_order_matters_with_positions(P):
    X = np.random.default_rng(3).normal(size=(4, D))
    _, e1 = encode_with_token(P, X, None, P["token"])
    _, e2 = encode_with_token(P, X[::-1].copy(), None, P["token"])
    assert not np.allclose(e1.data, e2.data)


def test_padding_does_not_leak(P):
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(3, D)), rng.normal(size=(6, D))
    X, m = pad_batch([a, b])
    X_enc, e = encode_with_token(P, X, m, P["token"])
    _, e_alone = encode_with_token(P, a, None, P["token"])
    np.testing.assert_allclose(e.data[0], e_alone.data[0], atol=1e-12)


def test_alignment_loss_values():
    u = np.zeros((1, 4))
    u[0, 0] = 1.0
    assert effect_alignment_loss(nx.Tensor(u), u, nx.Tensor(u)).item() == 0.0
    assert effect_alignment_loss(nx.Tensor(np.zeros((1, 4))), u, nx.Tensor(u)).item() == 2.0


def test_alignment_loss_stops_gradient_at_visual_target():
    rng = np.random.default_rng(5)
    tape = nx.Tape()
    p, v, t = (tape.param(k, rng.normal(size=(2, 3))) for k in "pvt")
    g = tape.backward(effect_alignment_loss(p, v, t))
    assert not g["v"].any() and g["t"].any() and g["p"].any()


def test_contrastive_single_pair_is_zero():
    v = np.random.default_rng(6).normal(size=(1, 4))
    assert effect_contrastive_loss(v, v * 3.0, 0.07).item() == 0.0


def test_contrastive_two_orthogonal_pairs():
    loss = effect_contrastive_loss(np.eye(2), np.eye(2), 1.0).item()
    assert loss == pytest.approx(2 * np.log(1 + np.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.6265, abs=1e-4)


def test_contrastive_rejects_bad_temperature():
    with pytest.raises(ValueError):
        effect_contrastive_loss(np.eye(2), np.eye(2), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 1000), st.floats(0.1, 10.0))
def test_contrastive_nonnegative_and_scale_invariant(B, seed, alpha):
    rng = np.random.default_rng(seed)
    v, t = rng.normal(size=(B, 5)), rng.normal(size=(B, 5))
    loss = effect_contrastive_loss(v, t, 0.07).item()
    assert loss >= 0
    v2 = v.copy()
    v2[0] *= alpha
    assert effect_contrastive_loss(v2, t, 0.07).item() == pytest.approx(loss, rel=1e-9, abs=1e-12)


def test_fuse_with_block_identity_ignores_effect(P):
    Q = dict(P)
    w = np.zeros((3 * D, D))
    w[:D] = np.eye(D)
    Q["fuse.w"], Q["fuse.b"] = nx.Tensor(w), nx.Tensor(np.zeros(D))
    X = nx.Tensor(np.random.default_rng(7).normal(size=(5, D)))
    e = nx.Tensor(np.random.default_rng(8).normal(size=D))
    out = fuse(Q, X, e)
    assert out.shape == (5, D)
    np.testing.assert_array_equal(out.data, X.data)


def test_fuse_depends_on_token(P):
    X = nx.Tensor(np.random.default_rng(9).normal(size=(5, D)))
    e1, e2 = (nx.Tensor(np.random.default_rng(s).normal(size=D)) for s in (10, 11))
    assert not np.allclose(fuse(P, X, e1).data, fuse(P, X, e2).data)


def test_fuse_broadcasts_token_over_time(P):
    X = nx.Tensor(np.tile(np.random.default_rng(12).normal(size=D), (4, 1)))
    e = nx.Tensor(np.random.default_rng(13).normal(size=D))
    diff = fuse(P, X, e).data - fuse(P, X, e, active=()).data
    np.testing.assert_allclose(diff, np.tile(diff[0], (4, 1)), atol=1e-12)
    assert np.abs(diff).max() > 0


def test_effect_losses_gradient_check():
    rng = np.random.default_rng(14)
    vals = {k: rng.normal(size=(3, 4)) for k in ("p", "v", "t")}

    def fn(Q):
        return nx.add(effect_alignment_loss(Q["p"], vals["v"], Q["t"]),
                      effect_contrastive_loss(Q["v"], Q["t"], 0.07))
    assert max(nx.grad_check(fn, vals).values()) < 1e-4
