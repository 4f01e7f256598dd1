"""Decoder-only transformer in plain numpy with exact manual gradients.

The network is a small Llama-family stack: token embeddings feed a chain of
pre-norm blocks (RMSNorm -> rotary multi-head attention -> residual,
RMSNorm -> SwiGLU MLP -> residual), then a final RMSNorm and an untied
projection back to vocabulary logits.  Everything is written against
``numpy`` arrays so the same code runs in float32 for training and float64
for finite-difference checks: the dtype of the parameter tensors decides the
dtype of the whole computation.

Gradients are derived by hand (reverse mode over the exact forward graph),
not by autodiff, so ``backward`` returns derivatives that match central
finite differences to near machine precision in float64.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyMask, NonFiniteLoss

__all__ = [
    "ModelConfig",
    "ModelParameters",
    "ForwardOutput",
    "init",
    "parameter_names",
    "num_parameters",
    "cast_parameters",
    "rms_normalize",
    "apply_rotary",
    "rotary_tables",
    "forward",
    "masked_loss_from_logits",
    "loss_and_logit_grad",
    "masked_loss",
    "backward",
    "generate",
]


# ---------------------------------------------------------------------------
# configuration and parameter container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``hidden_dim`` must split evenly across ``num_heads``, and the per-head
    width must itself be even so rotary position pairs line up.
    """

    num_layers: int = 2
    hidden_dim: int = 64
    intermediate_dim: int = 128
    num_heads: int = 4
    vocab_size: int = 1024
    max_seq_len: int = 512
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        for name in ("num_layers", "hidden_dim", "intermediate_dim",
                     "num_heads", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        if (self.hidden_dim // self.num_heads) % 2 != 0:
            raise ValueError("per-head dimension must be even for rotary pairs")
        if self.rope_base <= 1.0:
            raise ValueError(f"rope_base must exceed 1.0, got {self.rope_base}")
        if not 0.0 < self.norm_eps < 1.0:
            raise ValueError(f"norm_eps must be in (0, 1), got {self.norm_eps}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


def parameter_names(config: ModelConfig) -> list[str]:
    """Declared tensor order; checkpoints and flattening rely on it."""
    names = ["embedding"]
    for i in range(config.num_layers):
        prefix = f"layers.{i}."
        names += [
            prefix + "attn_norm",
            prefix + "attn.wq",
            prefix + "attn.wk",
            prefix + "attn.wv",
            prefix + "attn.wo",
            prefix + "mlp_norm",
            prefix + "mlp.w_gate",
            prefix + "mlp.w_up",
            prefix + "mlp.w_down",
        ]
    names += ["final_norm", "head"]
    return names


def _tensor_shape(name: str, config: ModelConfig) -> tuple[int, ...]:
    d, f, v = config.hidden_dim, config.intermediate_dim, config.vocab_size
    if name == "embedding":
        return (v, d)
    if name == "head":
        return (d, v)
    if name.endswith("_norm"):
        return (d,)
    leaf = name.rsplit(".", 1)[-1]
    return {
        "wq": (d, d),
        "wk": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "w_gate": (d, f),
        "w_up": (d, f),
        "w_down": (f, d),
    }[leaf]


@dataclass
class ModelParameters:
    """Named parameter tensors plus the config that shaped them."""

    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(repr=False)

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["embedding"].dtype

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def init(config: ModelConfig, seed: int = 0) -> ModelParameters:
    """Draw weights ~ N(0, 0.02^2); norm scales start at one.

    Tensors are created in declared order from a single PCG64 stream, so a
    given (config, seed) always produces bit-identical parameters.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors: dict[str, np.ndarray] = {}
    for name in parameter_names(config):
        shape = _tensor_shape(name, config)
        if name.endswith("_norm"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
    return ModelParameters(config=config, tensors=tensors)


def num_parameters(params: ModelParameters) -> int:
    return sum(t.size for t in params.tensors.values())


def cast_parameters(params: ModelParameters, dtype) -> ModelParameters:
    return ModelParameters(
        config=params.config,
        tensors={k: v.astype(dtype) for k, v in params.tensors.items()},
    )


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def rms_normalize(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Return (x * r, r) with r = 1/sqrt(mean(x^2) + eps) over the last axis.

    The first element has unit root-mean-square (up to eps); callers apply
    the learned scale separately.
    """
    mean_sq = np.mean(np.square(x), axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(mean_sq + eps)
    return x * r, r


def _rms_backward(d_normed: np.ndarray, normed: np.ndarray, r: np.ndarray) -> np.ndarray:
    # d/dx of y = x * r(x): dx = r * (dy - y * mean(dy * y))
    inner = np.mean(d_normed * normed, axis=-1, keepdims=True)
    return r * (d_normed - normed * inner)


def rotary_tables(seq_len: int, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [seq_len, head_dim // 2].

    Frequency i rotates coordinate pair (i, i + head_dim/2) by
    pos * base**(-2i / head_dim).
    """
    half = head_dim // 2
    inv_freq = base ** (-np.arange(0, half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def apply_rotary(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate half-split pairs of x [..., seq_len, head_dim] by position.

    cos/sin broadcast over leading axes; passing (cos, -sin) inverts the
    rotation, which is exactly the backward pass.
    """
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate((x1 * cos - x2 * sin, x1 * sin + x2 * cos), axis=-1)


def _silu(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class ForwardOutput:
    """logits [batch, seq, vocab]; hidden[i] is the residual stream after
    block i (hidden[0] is the embedding output), present when requested."""

    logits: np.ndarray
    hidden: list[np.ndarray] | None = None


def _as_token_array(tokens) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"tokens must be 1-D or 2-D, got shape {arr.shape}")
    return arr.astype(np.int64, copy=False)


def _run_forward(
    params: ModelParameters,
    tokens: np.ndarray,
    *,
    keep_cache: bool,
    want_hidden: bool,
):
    cfg = params.config
    t = params.tensors
    batch, seq_len = tokens.shape
    if seq_len < 1:
        raise ValueError("tokens must contain at least one position")
    if seq_len > cfg.max_seq_len:
        raise ValueError(f"sequence length {seq_len} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of range for vocab_size")

    dtype = params.dtype
    h, dh = cfg.num_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    cos, sin = rotary_tables(seq_len, dh, cfg.rope_base, dtype)
    causal = np.triu(np.full((seq_len, seq_len), -np.inf, dtype=dtype), k=1)

    x = t["embedding"][tokens]  # [B, S, D]
    hidden: list[np.ndarray] | None = [x.copy()] if want_hidden else None
    layer_caches: list[dict] = []

    def heads(m: np.ndarray) -> np.ndarray:  # [B, S, D] -> [B, H, S, dh]
        return m.reshape(batch, seq_len, h, dh).transpose(0, 2, 1, 3)

    def unheads(m: np.ndarray) -> np.ndarray:  # inverse of heads
        return m.transpose(0, 2, 1, 3).reshape(batch, seq_len, h * dh)

    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        xn1_raw, r1 = rms_normalize(x, cfg.norm_eps)
        a_in = xn1_raw * t[p + "attn_norm"]
        q = apply_rotary(heads(a_in @ t[p + "attn.wq"]), cos, sin)
        k = apply_rotary(heads(a_in @ t[p + "attn.wk"]), cos, sin)
        v = heads(a_in @ t[p + "attn.wv"])
        scores = q @ k.transpose(0, 1, 3, 2) * scale + causal
        probs = _softmax_rows(scores)
        head_out = probs @ v  # [B, H, S, dh]
        att = unheads(head_out)
        x_mid = x + att @ t[p + "attn.wo"]

        xn2_raw, r2 = rms_normalize(x_mid, cfg.norm_eps)
        m_in = xn2_raw * t[p + "mlp_norm"]
        z_gate = m_in @ t[p + "mlp.w_gate"]
        z_up = m_in @ t[p + "mlp.w_up"]
        gated, sig = _silu(z_gate)
        x_out = x_mid + (gated * z_up) @ t[p + "mlp.w_down"]

        if keep_cache:
            layer_caches.append({
                "x_in": x, "xn1": xn1_raw, "r1": r1, "a_in": a_in,
                "q": q, "k": k, "v": v, "probs": probs, "att": att,
                "x_mid": x_mid, "xn2": xn2_raw, "r2": r2, "m_in": m_in,
                "z_gate": z_gate, "z_up": z_up, "gated": gated, "sig": sig,
            })
        x = x_out
        if want_hidden:
            hidden.append(x.copy())

    xnf_raw, rf = rms_normalize(x, cfg.norm_eps)
    f_in = xnf_raw * t["final_norm"]
    logits = f_in @ t["head"]

    cache = None
    if keep_cache:
        cache = {
            "tokens": tokens, "layers": layer_caches,
            "x_final": x, "xnf": xnf_raw, "rf": rf, "f_in": f_in,
            "cos": cos, "sin": sin, "scale": scale,
            "batch": batch, "seq_len": seq_len,
        }
    return logits, hidden, cache


def forward(params: ModelParameters, tokens, want_hidden: bool = False) -> ForwardOutput:
    """Causal logits for a [batch, seq] (or [seq]) array of token ids."""
    arr = _as_token_array(tokens)
    logits, hidden, _ = _run_forward(params, arr, keep_cache=False, want_hidden=want_hidden)
    return ForwardOutput(logits=logits, hidden=hidden)


# ---------------------------------------------------------------------------
# masked loss
# ---------------------------------------------------------------------------


def _supervised_positions(tokens: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean [B, S-1] of loss-bearing source positions, plus their targets.

    A position j supervises prediction of tokens[j+1] when mask[j] == 1; the
    final column has no next token and is always excluded.
    """
    if tokens.shape != mask.shape:
        raise ValueError(f"tokens {tokens.shape} and mask {mask.shape} differ in shape")
    sources = mask[:, :-1].astype(bool)
    targets = tokens[:, 1:].astype(np.int64, copy=False)
    return sources, targets, tokens


def masked_loss_from_logits(logits: np.ndarray, tokens, mask) -> tuple[float, int]:
    """Mean negative log-likelihood over supervised positions.

    loss = -(1/M) * sum over {j : mask[j]=1, j < S-1} of
           log softmax(logits[j])[tokens[j+1]]
    where M is the number of such positions.  Positions with mask=0
    contribute exactly zero.  Raises EmptyMask when M = 0.
    """
    tokens_arr = _as_token_array(tokens)
    mask_arr = np.asarray(mask)
    if mask_arr.ndim == 1:
        mask_arr = mask_arr[None, :]
    sources, targets, _ = _supervised_positions(tokens_arr, mask_arr)
    m = int(np.count_nonzero(sources))
    if m == 0:
        raise EmptyMask("no supervised positions: every mask entry is zero "
                        "(or set only in the final column)")
    rows = logits[:, :-1][sources]                  # [M, V]
    picked = targets[sources]                       # [M]
    shifted = rows - np.max(rows, axis=-1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=-1))
    nll = log_z - shifted[np.arange(m), picked]
    loss = float(np.sum(nll, dtype=np.float64) / m)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"masked loss is not finite: {loss}")
    return loss, m


def loss_and_logit_grad(logits: np.ndarray, tokens, mask) -> tuple[float, int, np.ndarray]:
    """masked_loss_from_logits plus d(loss)/d(logits).

    Rows at unsupervised positions are exactly zero in the returned gradient.
    """
    tokens_arr = _as_token_array(tokens)
    mask_arr = np.asarray(mask)
    if mask_arr.ndim == 1:
        mask_arr = mask_arr[None, :]
    loss, m = masked_loss_from_logits(logits, tokens_arr, mask_arr)
    sources, targets, _ = _supervised_positions(tokens_arr, mask_arr)
    rows = logits[:, :-1][sources]
    picked = targets[sources]
    probs = _softmax_rows(rows)
    probs[np.arange(m), picked] -= 1.0
    dlogits = np.zeros_like(logits)
    scatter = np.zeros_like(logits[:, :-1])
    scatter[sources] = probs / m
    dlogits[:, :-1] = scatter
    return loss, m, dlogits


def _batch_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(batch, "tokens") and hasattr(batch, "loss_mask"):
        return np.asarray(batch.tokens), np.asarray(batch.loss_mask)
    tokens, mask = batch
    return np.asarray(tokens), np.asarray(mask)


def masked_loss(params: ModelParameters, batch) -> tuple[float, int]:
    """Loss over a PackedBatch (or a (tokens, mask) pair)."""
    tokens, mask = _batch_arrays(batch)
    out = forward(params, tokens)
    return masked_loss_from_logits(out.logits, tokens, mask)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(params: ModelParameters, batch) -> tuple[float, int, dict[str, np.ndarray]]:
    """Loss, supervised count, and exact d(loss)/d(tensor) for every tensor."""
    tokens, mask = _batch_arrays(batch)
    tokens_arr = _as_token_array(tokens)
    mask_arr = np.asarray(mask)
    if mask_arr.ndim == 1:
        mask_arr = mask_arr[None, :]

    cfg = params.config
    t = params.tensors
    logits, _, cache = _run_forward(params, tokens_arr, keep_cache=True, want_hidden=False)
    loss, m, dlogits = loss_and_logit_grad(logits, tokens_arr, mask_arr)

    batch_n, seq_len = cache["batch"], cache["seq_len"]
    h, dh = cfg.num_heads, cfg.head_dim
    cos, sin, scale = cache["cos"], cache["sin"], cache["scale"]
    grads: dict[str, np.ndarray] = {}

    def flat(a: np.ndarray) -> np.ndarray:
        return a.reshape(-1, a.shape[-1])

    def heads(mat: np.ndarray) -> np.ndarray:
        return mat.reshape(batch_n, seq_len, h, dh).transpose(0, 2, 1, 3)

    def unheads(mat: np.ndarray) -> np.ndarray:
        return mat.transpose(0, 2, 1, 3).reshape(batch_n, seq_len, h * dh)

    # head and final norm
    grads["head"] = flat(cache["f_in"]).T @ flat(dlogits)
    d_f_in = dlogits @ t["head"].T
    grads["final_norm"] = np.sum(d_f_in * cache["xnf"], axis=(0, 1))
    dx = _rms_backward(d_f_in * t["final_norm"], cache["xnf"], cache["rf"])

    for i in reversed(range(cfg.num_layers)):
        p = f"layers.{i}."
        c = cache["layers"][i]

        # MLP branch: x_out = x_mid + (silu(z_gate) * z_up) @ w_down
        d_mlp_out = dx
        hidden_act = c["gated"] * c["z_up"]
        grads[p + "mlp.w_down"] = flat(hidden_act).T @ flat(d_mlp_out)
        d_hidden = d_mlp_out @ t[p + "mlp.w_down"].T
        d_gated = d_hidden * c["z_up"]
        d_z_up = d_hidden * c["gated"]
        sig = c["sig"]
        d_z_gate = d_gated * sig * (1.0 + c["z_gate"] * (1.0 - sig))
        grads[p + "mlp.w_gate"] = flat(c["m_in"]).T @ flat(d_z_gate)
        grads[p + "mlp.w_up"] = flat(c["m_in"]).T @ flat(d_z_up)
        d_m_in = d_z_gate @ t[p + "mlp.w_gate"].T + d_z_up @ t[p + "mlp.w_up"].T
        grads[p + "mlp_norm"] = np.sum(d_m_in * c["xn2"], axis=(0, 1))
        d_x_mid = dx + _rms_backward(d_m_in * t[p + "mlp_norm"], c["xn2"], c["r2"])

        # attention branch: x_mid = x_in + att @ wo
        grads[p + "attn.wo"] = flat(c["att"]).T @ flat(d_x_mid)
        d_att = heads(d_x_mid @ t[p + "attn.wo"].T)
        probs = c["probs"]
        d_probs = d_att @ c["v"].transpose(0, 1, 3, 2)
        d_v = probs.transpose(0, 1, 3, 2) @ d_att
        d_scores = probs * (d_probs - np.sum(d_probs * probs, axis=-1, keepdims=True))
        d_q = d_scores @ c["k"] * scale
        d_k = d_scores.transpose(0, 1, 3, 2) @ c["q"] * scale
        d_q = apply_rotary(d_q, cos, -sin)
        d_k = apply_rotary(d_k, cos, -sin)
        dq_flat, dk_flat, dv_flat = unheads(d_q), unheads(d_k), unheads(d_v)
        grads[p + "attn.wq"] = flat(c["a_in"]).T @ flat(dq_flat)
        grads[p + "attn.wk"] = flat(c["a_in"]).T @ flat(dk_flat)
        grads[p + "attn.wv"] = flat(c["a_in"]).T @ flat(dv_flat)
        d_a_in = (dq_flat @ t[p + "attn.wq"].T
                  + dk_flat @ t[p + "attn.wk"].T
                  + dv_flat @ t[p + "attn.wv"].T)
        grads[p + "attn_norm"] = np.sum(d_a_in * c["xn1"], axis=(0, 1))
        dx = d_x_mid + _rms_backward(d_a_in * t[p + "attn_norm"], c["xn1"], c["r1"])

    d_embed = np.zeros_like(t["embedding"])
    np.add.at(d_embed, cache["tokens"], dx)
    grads["embedding"] = d_embed
    return loss, m, grads


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def generate(
    params: ModelParameters,
    prompt_tokens: Sequence[int],
    max_new_tokens: int,
    *,
    mode: str = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
) -> list[int]:
    """Continue a prompt token-by-token.

    ``greedy`` takes the argmax at each step; ``sample`` draws from
    softmax(logits / temperature) with a PCG64 stream, so a (prompt, seed)
    pair always yields the same continuation.  Returns only the new tokens.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown generation mode {mode!r}")
    if max_new_tokens < 0:
        raise ValueError("max_new_tokens must be >= 0")
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    prompt = [int(x) for x in prompt_tokens]
    if not prompt:
        raise ValueError("prompt_tokens must be non-empty")
    if len(prompt) + max_new_tokens > params.config.max_seq_len:
        raise ValueError(
            f"prompt ({len(prompt)}) plus max_new_tokens ({max_new_tokens}) "
            f"exceeds max_seq_len {params.config.max_seq_len}"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    out: list[int] = []
    context = list(prompt)
    for _ in range(max_new_tokens):
        logits = forward(params, np.asarray(context, dtype=np.int64)).logits[0, -1]
        if mode == "greedy":
            nxt = int(np.argmax(logits))
        else:
            probs = _softmax_rows(logits.astype(np.float64) / temperature)
            nxt = int(rng.choice(len(probs), p=probs))
        out.append(nxt)
        context.append(nxt)
    return out
