"""Transformer forward/loss/generation contracts.

The centerpiece is an independent reference implementation: a slow,
loop-over-positions, double-precision forward pass written against the
architecture definition (not the production code), used as the oracle for
the vectorized forward.  Loss checks build on a per-position cross-entropy
oracle with explicit softmax sums.
"""

import math

import numpy as np
import pytest

from koco import model as M
from koco.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from koco.errors import ChecksumMismatch, EmptyMask, VersionMismatch

RNG = np.random.default_rng


def tiny_config(**overrides) -> M.ModelConfig:
    base = dict(num_layers=1, hidden_dim=8, intermediate_dim=12, num_heads=2,
                vocab_size=16, max_seq_len=16)
    base.update(overrides)
    return M.ModelConfig(**base)


# ---------------------------------------------------------------------------
# independent reference forward (loops, float64)
# ---------------------------------------------------------------------------


def ref_rms(vec, scale, eps):
    r = 1.0 / math.sqrt(sum(float(v) * float(v) for v in vec) / len(vec) + eps)
    return np.array([float(v) * r * float(g) for v, g in zip(vec, scale)])


def ref_rotate(vec, pos, base):
    dh = len(vec)
    half = dh // 2
    out = np.zeros(dh)
    for i in range(half):
        theta = pos * base ** (-2.0 * i / dh)
        c, s = math.cos(theta), math.sin(theta)
        out[i] = vec[i] * c - vec[i + half] * s
        out[i + half] = vec[i] * s + vec[i + half] * c
    return out


def ref_forward(params: M.ModelParameters, tokens):
    """Position-by-position forward pass in float64."""
    cfg = params.config
    t = {k: v.astype(np.float64) for k, v in params.tensors.items()}
    seq = [int(x) for x in tokens]
    d, h = cfg.hidden_dim, cfg.num_heads
    dh = d // h
    x = [t["embedding"][tok].copy() for tok in seq]

    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        normed = [ref_rms(xi, t[p + "attn_norm"], cfg.norm_eps) for xi in x]
        qs, ks, vs = [], [], []
        for pos, n in enumerate(normed):
            q_full, k_full, v_full = n @ t[p + "attn.wq"], n @ t[p + "attn.wk"], n @ t[p + "attn.wv"]
            q_heads, k_heads, v_heads = [], [], []
            for head in range(h):
                sl = slice(head * dh, (head + 1) * dh)
                q_heads.append(ref_rotate(q_full[sl], pos, cfg.rope_base))
                k_heads.append(ref_rotate(k_full[sl], pos, cfg.rope_base))
                v_heads.append(v_full[sl].copy())
            qs.append(q_heads); ks.append(k_heads); vs.append(v_heads)
        attn_out = []
        for pos in range(len(seq)):
            concat = np.zeros(d)
            for head in range(h):
                scores = [qs[pos][head] @ ks[j][head] / math.sqrt(dh)
                          for j in range(pos + 1)]
                top = max(scores)
                weights = [math.exp(s - top) for s in scores]
                z = sum(weights)
                ctx = sum((w / z) * vs[j][head] for j, w in enumerate(weights))
                concat[head * dh:(head + 1) * dh] = ctx
            attn_out.append(concat @ t[p + "attn.wo"])
        x = [xi + a for xi, a in zip(x, attn_out)]
        mid = []
        for xi in x:
            n = ref_rms(xi, t[p + "mlp_norm"], cfg.norm_eps)
            z1, z2 = n @ t[p + "mlp.w_gate"], n @ t[p + "mlp.w_up"]
            silu = z1 / (1.0 + np.exp(-z1))
            mid.append(xi + (silu * z2) @ t[p + "mlp.w_down"])
        x = mid

    logits = []
    for xi in x:
        logits.append(ref_rms(xi, t["final_norm"], cfg.norm_eps) @ t["head"])
    return np.stack(logits)


def ce_oracle(logits, tokens, mask):
    """Per-position cross entropy in float64 with explicit softmax sums.

    Position j contributes -log softmax(logits[j])[tokens[j+1]] when
    mask[j] = 1 and j is not the last position.
    """
    total, count = 0.0, 0
    for b in range(len(tokens)):
        for j in range(len(tokens[b]) - 1):
            if mask[b][j] != 1:
                continue
            row = np.asarray(logits[b][j], dtype=np.float64)
            z = np.log(np.sum(np.exp(row - row.max()))) + row.max()
            total += z - float(row[tokens[b][j + 1]])
            count += 1
    return total / count, count


# ---------------------------------------------------------------------------
# forward against the reference
# ---------------------------------------------------------------------------


def test_forward_matches_loop_reference():
    cfg = tiny_config(num_layers=2)
    params = M.cast_parameters(M.init(cfg, seed=11), np.float64)
    tokens = RNG(0).integers(0, cfg.vocab_size, size=10)
    got = M.forward(params, tokens).logits[0]
    want = ref_forward(params, tokens)
    assert np.max(np.abs(got - want)) < 1e-6
    # float32 production dtype stays close to the float64 reference
    got32 = M.forward(M.init(cfg, seed=11), tokens).logits[0]
    assert np.max(np.abs(got32 - want)) < 1e-3


def test_causality_is_exact():
    cfg = tiny_config(num_layers=2)
    params = M.init(cfg, seed=5)
    tokens = RNG(1).integers(0, cfg.vocab_size, size=(1, 12))
    base = M.forward(params, tokens).logits
    changed = tokens.copy()
    changed[0, 7] = (changed[0, 7] + 3) % cfg.vocab_size
    after = M.forward(params, changed).logits
    assert np.array_equal(base[0, :7], after[0, :7])  # bitwise: no leak backward
    assert not np.array_equal(base[0, 7:], after[0, 7:])


def test_batch_rows_are_independent():
    cfg = tiny_config()
    params = M.init(cfg, seed=2)
    rows = RNG(3).integers(0, cfg.vocab_size, size=(3, 9))
    batched = M.forward(params, rows).logits
    for i in range(3):
        alone = M.forward(params, rows[i]).logits[0]
        assert np.array_equal(batched[i], alone)


def test_softmax_rows_sum_to_one_and_rms_is_unit():
    cfg = tiny_config(num_layers=2)
    params = M.init(cfg, seed=7)
    tokens = RNG(4).integers(0, cfg.vocab_size, size=(2, 11))
    logits = M.forward(params, tokens).logits
    probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    assert np.max(np.abs(probs.sum(axis=-1) - 1.0)) < 1e-6

    # unit RMS before scale (the eps term is negligible at activation scale)
    x = RNG(5).normal(scale=2.0, size=(4, 13, 64))
    normed, _ = M.rms_normalize(x, cfg.norm_eps)
    rms = np.sqrt(np.mean(np.square(normed), axis=-1))
    assert np.max(np.abs(rms - 1.0)) < 1e-5


def test_rotary_inner_products_depend_only_on_relative_position():
    cos, sin = M.rotary_tables(32, 8, 10000.0, np.float64)
    q = RNG(6).normal(size=8)
    k = RNG(7).normal(size=8)

    def rotated_dot(i, j):
        qi = M.apply_rotary(q[None, :], cos[i], sin[i])[0]
        kj = M.apply_rotary(k[None, :], cos[j], sin[j])[0]
        return float(qi @ kj)

    for shift in (1, 5, 17):
        assert abs(rotated_dot(3, 2) - rotated_dot(3 + shift, 2 + shift)) < 1e-5
        assert abs(rotated_dot(9, 4) - rotated_dot(9 + shift, 4 + shift)) < 1e-5


def test_parameter_count_matches_shape_arithmetic():
    cfg = M.ModelConfig(num_layers=2, hidden_dim=64, intermediate_dim=128,
                        num_heads=4, vocab_size=1024, max_seq_len=512)
    params = M.init(cfg, seed=0)
    # independent count: embeddings + per-layer (2 norms, 4 attention mats,
    # 3 MLP mats) + final norm + head, from the dimensions alone
    v, d, f, layers = 1024, 64, 128, 2
    per_layer = 2 * d + 4 * d * d + 2 * d * f + f * d
    expected = v * d + layers * per_layer + d + d * v
    assert expected == 213_312  # frozen
    assert M.num_parameters(params) == expected


def test_init_statistics_and_determinism():
    cfg = tiny_config(vocab_size=512, hidden_dim=32, intermediate_dim=64,
                      num_heads=4)
    a = M.init(cfg, seed=9)
    b = M.init(cfg, seed=9)
    c = M.init(cfg, seed=10)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])
    assert any(not np.array_equal(a.tensors[n], c.tensors[n]) for n in a.tensors)
    assert np.all(a.tensors["final_norm"] == 1.0)
    draws = a.tensors["embedding"].ravel()
    assert abs(float(draws.std()) - 0.02) < 0.002
    assert abs(float(draws.mean())) < 0.002


# ---------------------------------------------------------------------------
# masked loss
# ---------------------------------------------------------------------------


def frozen_two_sequence_fixture():
    cfg = tiny_config(num_layers=2)
    params = M.cast_parameters(M.init(cfg, seed=21), np.float64)
    tokens = np.array([
        [1, 4, 9, 2, 7, 7, 0, 3],
        [5, 5, 1, 12, 8, 2, 6, 11],
    ])
    mask = np.array([
        [0, 0, 1, 1, 1, 1, 1, 0],
        [0, 1, 1, 0, 0, 1, 1, 1],
    ], dtype=np.uint8)
    return params, tokens, mask


def test_masked_loss_matches_cross_entropy_oracle():
    params, tokens, mask = frozen_two_sequence_fixture()
    logits = M.forward(params, tokens).logits
    loss, m = M.masked_loss(params, (tokens, mask))
    want, want_m = ce_oracle(logits, tokens, mask)
    assert m == want_m == int(mask[:, :-1].sum())
    assert abs(loss - want) / abs(want) < 1e-6


def test_unsupervised_positions_contribute_exactly_zero():
    params, tokens, mask = frozen_two_sequence_fixture()
    logits = M.forward(params, tokens).logits
    base, m = M.masked_loss_from_logits(logits, tokens, mask)
    # a target tokens[j+1] feeds the loss only through source position j, so
    # flipping targets of unsupervised sources (logits held fixed) must not
    # move the loss by a single bit
    perturbed = tokens.copy()
    flipped = 0
    for b in range(tokens.shape[0]):
        for j in range(tokens.shape[1] - 1):
            if mask[b, j] == 0:
                perturbed[b, j + 1] = (perturbed[b, j + 1] + 5) % 16
                flipped += 1
    assert flipped > 0
    again, m2 = M.masked_loss_from_logits(logits, perturbed, mask)
    assert m2 == m
    assert again == base  # bit-identical


def test_uniform_logits_give_log_vocab():
    cfg = tiny_config(vocab_size=16)
    params = M.init(cfg, seed=1)
    for name, tensor in params.tensors.items():
        tensor[:] = 1.0 if name.endswith("_norm") else 0.0
    tokens = np.array([[3, 1, 4, 1, 5, 9]])
    mask = np.ones_like(tokens, dtype=np.uint8)
    loss, m = M.masked_loss(params, (tokens, mask))
    assert m == 5
    assert abs(loss - math.log(16)) < 1e-6


def test_empty_mask_raises():
    cfg = tiny_config()
    params = M.init(cfg, seed=0)
    tokens = np.array([[1, 2, 3, 4]])
    with pytest.raises(EmptyMask):
        M.masked_loss(params, (tokens, np.zeros_like(tokens)))
    # mask set only in the final column has no next token to predict
    tail_only = np.array([[0, 0, 0, 1]], dtype=np.uint8)
    with pytest.raises(EmptyMask):
        M.masked_loss(params, (tokens, tail_only))


def test_loss_is_supervised_token_weighted_mean_of_sequence_losses():
    cfg = tiny_config(num_layers=2)
    params = M.init(cfg, seed=13)
    tokens = RNG(14).integers(0, cfg.vocab_size, size=(4, 10))
    mask = (RNG(15).random((4, 10)) < 0.6).astype(np.uint8)
    mask[:, 1] = 1  # every row supervised somewhere
    whole, m = M.masked_loss(params, (tokens, mask))
    acc = 0.0
    counts = 0
    for i in range(4):
        li, mi = M.masked_loss(params, (tokens[i:i+1], mask[i:i+1]))
        acc += li * mi
        counts += mi
    assert counts == m
    assert abs(whole - acc / counts) < 1e-6


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def test_greedy_generation_is_deterministic_and_bounded():
    cfg = tiny_config(num_layers=2)
    params = M.init(cfg, seed=3)
    out1 = M.generate(params, [1, 2, 3], 5, mode="greedy")
    out2 = M.generate(params, [1, 2, 3], 5, mode="greedy")
    assert out1 == out2
    assert len(out1) == 5
    assert all(0 <= t < cfg.vocab_size for t in out1)
    assert M.generate(params, [1, 2, 3], 0) == []


def test_sampled_generation_respects_seed():
    cfg = tiny_config(num_layers=2)
    params = M.init(cfg, seed=3)
    a = M.generate(params, [4, 2], 6, mode="sample", temperature=1.3, seed=42)
    b = M.generate(params, [4, 2], 6, mode="sample", temperature=1.3, seed=42)
    c = M.generate(params, [4, 2], 6, mode="sample", temperature=1.3, seed=43)
    assert a == b
    assert len(c) == 6
    with pytest.raises(ValueError):
        M.generate(params, [4, 2], 6, mode="beam")
    with pytest.raises(ValueError):
        M.generate(params, [4, 2], 999)  # exceeds max_seq_len
    with pytest.raises(ValueError):
        M.generate(params, [], 2)


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(hidden_dim=10, num_heads=4)  # not divisible
    with pytest.raises(ValueError):
        tiny_config(hidden_dim=4, num_heads=4)  # odd head dim of 1
    with pytest.raises(ValueError):
        tiny_config(num_layers=0)
    with pytest.raises(ValueError):
        M.forward(M.init(tiny_config(), 0), np.array([[99]]))  # id out of range


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny_config(num_layers=2)
    params = M.init(cfg, seed=17)
    opt = {"m.head": np.full((8, 16), 0.25, dtype=np.float32),
           "step": np.array([7], dtype=np.int64)}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, Checkpoint(params=params, step=7, optimizer_state=opt,
                                     extra={"note": "fixture"}))
    loaded = load_checkpoint(path)
    assert loaded.step == 7
    assert loaded.params.config == cfg
    for name, tensor in params.tensors.items():
        got = loaded.params.tensors[name]
        assert got.dtype == tensor.dtype
        assert np.array_equal(got, tensor)
    assert np.array_equal(loaded.optimizer_state["m.head"], opt["m.head"])
    assert loaded.extra == {"note": "fixture"}
    # save(load(save(x))) is byte-identical on disk
    path2 = tmp_path / "again.ckpt"
    save_checkpoint(path2, Checkpoint(params=loaded.params, step=7,
                                      optimizer_state=loaded.optimizer_state,
                                      extra=loaded.extra))
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_detects_corruption_and_bad_magic(tmp_path):
    cfg = tiny_config()
    params = M.init(cfg, seed=1)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, Checkpoint(params=params, step=1))
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF  # flip a parameter byte
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    with pytest.raises(ChecksumMismatch):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "junk.ckpt")
