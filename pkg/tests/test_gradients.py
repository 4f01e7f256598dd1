"""Exactness of the hand-derived reverse-mode gradients.

Central finite differences in double precision are the oracle: for a smooth
scalar loss, (L(θ+h) − L(θ−h)) / 2h approximates ∂L/∂θ with O(h²) truncation
error, so an analytic gradient that disagrees beyond ~1e-4 relative at
h = 1e-4 is wrong, not noisy.
"""

import time

import numpy as np

from koco import model as M

RNG = np.random.default_rng


def fd_check(params, tokens, mask, coords_per_tensor, h=1e-4, seed=0):
    """Max relative FD-vs-analytic error over sampled coordinates."""
    _, _, grads = M.backward(params, (tokens, mask))
    rng = RNG(seed)
    worst = 0.0
    checked = 0
    for name, tensor in params.tensors.items():
        flat = tensor.reshape(-1)
        grad_flat = grads[name].reshape(-1)
        take = min(coords_per_tensor, flat.size)
        for ix in rng.choice(flat.size, size=take, replace=False):
            original = flat[ix]
            flat[ix] = original + h
            up, _ = M.masked_loss(params, (tokens, mask))
            flat[ix] = original - h
            down, _ = M.masked_loss(params, (tokens, mask))
            flat[ix] = original
            fd = (up - down) / (2.0 * h)
            analytic = grad_flat[ix]
            scale = max(abs(fd), abs(analytic), 1e-8)
            worst = max(worst, abs(fd - analytic) / scale)
            checked += 1
    return worst, checked


def test_gradients_match_finite_differences_on_desk_model():
    start = time.monotonic()
    cfg = M.ModelConfig(num_layers=2, hidden_dim=64, intermediate_dim=128,
                        num_heads=4, vocab_size=256, max_seq_len=64)
    params = M.cast_parameters(M.init(cfg, seed=8), np.float64)
    tokens = RNG(20).integers(0, cfg.vocab_size, size=(2, 24))
    mask = (RNG(21).random((2, 24)) < 0.7).astype(np.uint8)
    mask[:, 2] = 1
    worst, checked = fd_check(params, tokens, mask, coords_per_tensor=12)
    assert checked >= 200
    assert worst < 1e-4
    assert time.monotonic() - start < 120


def test_gradients_cover_every_tensor_kind_on_tiny_model():
    cfg = M.ModelConfig(num_layers=2, hidden_dim=8, intermediate_dim=12,
                        num_heads=2, vocab_size=24, max_seq_len=16)
    params = M.cast_parameters(M.init(cfg, seed=4), np.float64)
    tokens = RNG(22).integers(0, cfg.vocab_size, size=(3, 10))
    mask = (RNG(23).random((3, 10)) < 0.6).astype(np.uint8)
    mask[:, 1] = 1
    worst, checked = fd_check(params, tokens, mask, coords_per_tensor=6, seed=9)
    assert checked >= 100
    assert worst < 1e-4


def test_logit_gradient_rows_are_zero_off_the_supervised_set():
    cfg = M.ModelConfig(num_layers=1, hidden_dim=8, intermediate_dim=12,
                        num_heads=2, vocab_size=16, max_seq_len=16)
    params = M.init(cfg, seed=2)
    tokens = np.array([[3, 7, 1, 2, 9, 4]])
    mask = np.array([[0, 0, 1, 1, 0, 1]], dtype=np.uint8)
    logits = M.forward(params, tokens).logits
    _, _, dlogits = M.loss_and_logit_grad(logits, tokens, mask)
    # supervised sources: j = 2, 3 (mask=1, not last column); j = 5 is last
    for j in (0, 1, 4, 5):
        assert np.all(dlogits[0, j] == 0.0)
    for j in (2, 3):
        assert np.any(dlogits[0, j] != 0.0)
        # each supervised row of d(loss)/d(logits) is (softmax - onehot)/M
        assert abs(float(dlogits[0, j].sum())) < 1e-7


def test_unused_embedding_rows_get_exactly_zero_gradient():
    cfg = M.ModelConfig(num_layers=1, hidden_dim=8, intermediate_dim=12,
                        num_heads=2, vocab_size=32, max_seq_len=16)
    params = M.init(cfg, seed=6)
    tokens = np.array([[1, 2, 3, 2, 1]])
    mask = np.array([[0, 1, 1, 1, 1]], dtype=np.uint8)
    _, _, grads = M.backward(params, (tokens, mask))
    used = {1, 2, 3}
    for row in range(cfg.vocab_size):
        if row in used:
            assert np.any(grads["embedding"][row] != 0.0)
        else:
            assert np.all(grads["embedding"][row] == 0.0)


def test_backward_is_deterministic():
    cfg = M.ModelConfig(num_layers=2, hidden_dim=16, intermediate_dim=24,
                        num_heads=2, vocab_size=40, max_seq_len=32)
    params = M.init(cfg, seed=1)
    tokens = RNG(30).integers(0, cfg.vocab_size, size=(2, 12))
    mask = np.ones_like(tokens, dtype=np.uint8)
    loss_a, m_a, grads_a = M.backward(params, (tokens, mask))
    loss_b, m_b, grads_b = M.backward(params, (tokens, mask))
    assert loss_a == loss_b and m_a == m_b
    for name in grads_a:
        assert np.array_equal(grads_a[name], grads_b[name])
