import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import fd_check, random_params
from qpr.encoder import (EmptyQuestionError, EncoderConfig, EncoderParams, backward_batch,
                         conv_forward, embed_forward, encode, encode_backward, encode_batch,
                         forward_batch, init_params, load_model, maxpool_project,
                         merge_gradients, save_model)

TINY = EncoderConfig(e_dim=8, win=3, c_dim=6, n=5, V=15, m=5)


@pytest.fixture
def tiny():
    return init_params(TINY, seed=7)


def scalar_params(w, b=0.0):
    return EncoderParams(np.array([[0.5]]), np.array([[w]]), np.array([b]), np.array([[1.0]]))


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(win=4)
    with pytest.raises(ValueError):
        EncoderConfig(c_dim=0)


def test_init_shapes_and_ranges(tiny):
    tiny.check_config(TINY)
    assert np.abs(tiny.E).max() <= 0.1
    assert not tiny.b.any()
    assert np.abs(tiny.W).max() <= np.sqrt(6 / (24 + 6))


def test_embed_forward():
    cfg = EncoderConfig(e_dim=300, c_dim=4, n=4, V=10, m=2)
    p = init_params(cfg)
    assert embed_forward([1, 2, 3, 4, 5], p).shape == (5, 300)
    np.testing.assert_array_equal(embed_forward([3], p), p.E[[3]])
    X = embed_forward([4, 4], p)
    np.testing.assert_array_equal(X[0], X[1])
    with pytest.raises(EmptyQuestionError):
        embed_forward([], p)


def test_conv_forward_zero_input(tiny):
    tiny.b[:] = 0
    np.testing.assert_array_equal(conv_forward(np.zeros((4, 8)), tiny), np.zeros((4, 6)))


def test_conv_single_token_window_is_mostly_padding():
    cfg = EncoderConfig(e_dim=3, win=5, c_dim=2, n=2, V=4, m=1)
    p = init_params(cfg, seed=1)
    p.b[:] = [0.1, -0.2]
    x = p.E[2]
    expected = np.tanh(p.W[:, 2 * 3:3 * 3] @ x + p.b)
    np.testing.assert_allclose(conv_forward(p.E[[2]], p)[0], expected, rtol=0, atol=1e-15)


def test_conv_scalar_hand_case():
    p = scalar_params(2.0)
    out = conv_forward(np.array([[0.5]]), p)
    assert out[0, 0] == pytest.approx(0.76159, abs=1e-5)
    assert out[0, 0] == np.tanh(1.0)


def test_maxpool_project():
    p = EncoderParams(np.zeros((1, 1)), np.zeros((2, 1)), np.zeros(2), np.eye(2))
    fmap = np.array([[0.1, -0.3], [0.4, -0.5]])
    np.testing.assert_array_equal(maxpool_project(fmap, p), [0.4, -0.3])
    np.testing.assert_array_equal(maxpool_project(fmap[:1], p), fmap[0])


def test_encode_deterministic_and_default_dim():
    cfg = EncoderConfig(V=50, m=5)
    p = init_params(cfg, seed=0)
    v = encode([1, 2, 3], p)
    assert v.shape == (300,)
    np.testing.assert_array_equal(v, encode([1, 2, 3], p))


def test_batch_matches_reference_and_is_composition_independent(tiny):
    rng = np.random.default_rng(0)
    seqs = [rng.integers(0, 20, size=rng.integers(1, 9)).tolist() for _ in range(12)]
    batch = encode_batch(seqs, tiny)
    for s, row in zip(seqs, batch):
        np.testing.assert_allclose(row, encode(s, tiny), rtol=0, atol=1e-13)
    sub = encode_batch(seqs[3:5], tiny)
    np.testing.assert_allclose(sub, batch[3:5], rtol=0, atol=1e-13)


def test_same_padding_length(tiny):
    for l in range(1, 10):
        assert conv_forward(tiny.E[:l], tiny).shape == (l, 6)


def test_empty_sequence_in_batch(tiny):
    with pytest.raises(EmptyQuestionError):
        forward_batch([[1], []], tiny)


def test_backward_zero_grad(tiny):
    g = encode_backward([1, 2, 3], tiny, np.zeros(5))
    assert not g.W.any() and not g.b.any() and not g.Wp.any() and not g.E_vals.any()


def test_backward_absent_token_has_zero_row(tiny):
    g = encode_backward([1, 2, 3], tiny, np.ones(5))
    dense = g.E_dense(20)
    assert not dense[[0, 4, 10, 19]].any()
    assert set(g.E_rows.tolist()) == {1, 2, 3}


def test_maxpool_tie_routes_to_first_position():
    cfg = EncoderConfig(e_dim=2, win=1, c_dim=3, n=2, V=4, m=1)
    p = init_params(cfg, seed=3)
    _, cache = forward_batch([[2, 2, 2]], p)
    assert not cache.argmax.any()


def test_backward_matches_finite_differences():
    tiny = random_params(TINY, seed=11)
    rng = np.random.default_rng(1)
    seqs = [rng.integers(0, 20, size=n).tolist() for n in (1, 3, 6)]
    w = rng.normal(size=(3, 5))

    def objective(p):
        return float(np.sum(w * forward_batch(seqs, p)[0]))

    _, cache = forward_batch(seqs, tiny)
    g = backward_batch(cache, tiny, w)
    analytic = {"E": g.E_dense(20), "W": g.W, "b": g.b, "Wp": g.Wp}
    errors, skipped = fd_check(tiny, seqs, objective, analytic)
    assert max(errors.values()) < 1e-4, errors
    assert skipped == 0


def test_merge_gradients_equals_full_batch(tiny):
    rng = np.random.default_rng(2)
    seqs = [rng.integers(0, 20, size=4).tolist() for _ in range(6)]
    g_out = rng.normal(size=(6, 5))
    _, cache = forward_batch(seqs, tiny)
    full = backward_batch(cache, tiny, g_out)
    parts = []
    for lo, hi in ((0, 2), (2, 6)):
        _, c = forward_batch(seqs[lo:hi], tiny)
        parts.append(backward_batch(c, tiny, g_out[lo:hi]))
    merged = merge_gradients(parts)
    np.testing.assert_allclose(merged.E_dense(20), full.E_dense(20), atol=1e-12)
    np.testing.assert_allclose(merged.W, full.W, atol=1e-12)
    np.testing.assert_allclose(merged.Wp, full.Wp, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 19), min_size=1, max_size=12), st.integers(0, 10_000))
def test_output_bounded_by_projection_row_norms(ids, seed):
    p = init_params(TINY, seed=seed)
    p.W *= 50  # saturate tanh
    out = encode(ids, p)
    assert np.all(np.abs(out) <= np.abs(p.Wp).sum(axis=1))


def test_model_round_trip(tmp_path, tiny):
    path = tmp_path / "m.bin"
    save_model(path, TINY, tiny)
    cfg, p = load_model(path)
    assert cfg == TINY
    for name, arr in tiny.tensors().items():
        np.testing.assert_array_equal(p.tensors()[name], arr)
    path2 = tmp_path / "m2.bin"
    save_model(path2, cfg, p)
    assert path.read_bytes() == path2.read_bytes()


def test_model_bad_magic_and_truncation(tmp_path, tiny):
    path = tmp_path / "m.bin"
    save_model(path, TINY, tiny)
    data = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"X" + data[1:])
    with pytest.raises(ValueError, match="magic"):
        load_model(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(data[:-8])
    with pytest.raises(ValueError, match="size"):
        load_model(tmp_path / "short.bin")
