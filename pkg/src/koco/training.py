"""Two-arm pre-training: AdamW, warmup + cosine schedule, metrics, resume.

A run consumes one shard set (the ``arm`` field of TrainConfig names which —
prefixed or unprefixed — but nothing else differs between arms), steps an
AdamW optimizer over masked-loss gradients, appends one metrics row per
step, and checkpoints periodically.  Batch order is a pure function of
(seed, epoch), so interrupting a run and resuming from a checkpoint
reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import model as model_ops
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (
    EmptyCorpus,
    NeverReached,
    NonFiniteGradient,
    NonFiniteLoss,
    ShardMismatch,
)
from .model import ModelConfig, ModelParameters, parameter_names
from .shards import read_manifest, read_shards

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "MetricsRow",
    "TrainResult",
    "lr_at",
    "init_optimizer_state",
    "clip_gradients",
    "optimizer_step",
    "train",
    "steps_to_loss",
    "write_metrics",
    "read_metrics",
    "SMOOTHING_WINDOW",
]

ARMS = ("standard", "koco")
SMOOTHING_WINDOW = 50


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters for one arm of a run."""

    total_steps: int
    peak_lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.033
    warmup_fraction: float = 0.05
    final_lr_fraction: float = 0.1
    tokens_per_batch: int = 16384
    seed: int = 0
    arm: str = "standard"
    grad_clip: float = 1.0
    adam_eps: float = 1e-8
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not all(0.0 < b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ValueError(f"betas must be a pair in (0, 1), got {self.betas}")
        if not 0.0 < self.final_lr_fraction < 1.0:
            raise ValueError("final_lr_fraction must be in (0, 1)")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.tokens_per_batch < 1:
            raise ValueError("tokens_per_batch must be >= 1")
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(**data)


@dataclass
class OptimizerState:
    """AdamW first/second moment accumulators plus the update counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["step"] = np.array([self.step], dtype=np.int64)
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "OptimizerState":
        m = {k[2:]: v for k, v in tensors.items() if k.startswith("m.")}
        v = {k[2:]: val for k, val in tensors.items() if k.startswith("v.")}
        return cls(m=m, v=v, step=int(tensors["step"][0]))


@dataclass(frozen=True)
class MetricsRow:
    """One training step as logged to the metrics CSV."""

    step: int  # 1-based
    learning_rate: float
    masked_loss: float
    supervised_tokens: int
    wall_time: float
    grad_norm: float

    _FIELDS = ("step", "learning_rate", "masked_loss",
               "supervised_tokens", "wall_time", "grad_norm")


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    final_loss: float
    steps_completed: int


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------


def lr_at(config: TrainConfig, step: int) -> float:
    """Learning rate for 0-based ``step``: linear warmup then cosine decay.

    Warmup covers W = round(warmup_fraction * total_steps) steps rising to
    the peak; the cosine then falls to final_lr_fraction * peak exactly at
    the last step.
    """
    if not 0 <= step < config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps})")
    peak = config.peak_lr
    floor = config.final_lr_fraction * peak
    warmup_steps = round(config.warmup_fraction * config.total_steps)
    if step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    span = config.total_steps - warmup_steps - 1
    if span <= 0:
        return floor
    progress = (step - warmup_steps) / span
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def init_optimizer_state(params: ModelParameters) -> OptimizerState:
    zeros = {k: np.zeros_like(t) for k, t in params.tensors.items()}
    return OptimizerState(
        m=zeros,
        v={k: np.zeros_like(t) for k, t in params.tensors.items()},
        step=0,
    )


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[float, bool]:
    """Scale grads in place to global L2 norm <= max_norm; returns (norm, clipped)."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise NonFiniteGradient(f"gradient global norm is {norm}")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
        return norm, True
    return norm, False


def optimizer_step(
    params: ModelParameters,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    config: TrainConfig,
) -> tuple[ModelParameters, OptimizerState]:
    """One AdamW update, in place.

    Bias-corrected moments; decoupled weight decay multiplies 2-D weight
    matrices by (1 - lr * weight_decay) before the moment update is applied
    (norm scales are left undecayed).
    """
    beta1, beta2 = config.betas
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, tensor in params.tensors.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for tensor {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        if config.weight_decay and tensor.ndim == 2:
            tensor *= 1.0 - lr * config.weight_decay
        m_hat = m / bc1
        v_hat = v / bc2
        tensor -= (lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)).astype(
            tensor.dtype, copy=False
        )
    return params, state


# ---------------------------------------------------------------------------
# metrics files
# ---------------------------------------------------------------------------


def write_metrics(path: Union[str, Path], rows: Sequence[MetricsRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricsRow._FIELDS)
        for row in rows:
            writer.writerow([
                row.step, f"{row.learning_rate:.10g}", f"{row.masked_loss:.10g}",
                row.supervised_tokens, f"{row.wall_time:.6f}", f"{row.grad_norm:.10g}",
            ])


def read_metrics(path: Union[str, Path]) -> list[MetricsRow]:
    rows: list[MetricsRow] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            rows.append(MetricsRow(
                step=int(record["step"]),
                learning_rate=float(record["learning_rate"]),
                masked_loss=float(record["masked_loss"]),
                supervised_tokens=int(record["supervised_tokens"]),
                wall_time=float(record["wall_time"]),
                grad_norm=float(record["grad_norm"]),
            ))
    return rows


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _load_windows(shard_dir: Union[str, Path], vocab_size: int) -> tuple[np.ndarray, np.ndarray, str]:
    manifest = read_manifest(shard_dir)
    tokens_parts: list[np.ndarray] = []
    mask_parts: list[np.ndarray] = []
    for batch in read_shards(shard_dir, verify=True):
        tokens_parts.append(batch.tokens)
        mask_parts.append(batch.loss_mask)
    if not tokens_parts:
        raise EmptyCorpus(f"no shards in {shard_dir}")
    tokens = np.concatenate(tokens_parts, axis=0)
    mask = np.concatenate(mask_parts, axis=0)
    top = int(tokens.max())
    if top >= vocab_size:
        raise ShardMismatch(
            f"shards contain token id {top} but the model vocab_size is {vocab_size}; "
            "the tokenizer used for packing does not fit this model"
        )
    return tokens, mask, manifest["tokenizer_hash"]


def _epoch_order(seed: int, epoch: int, num_windows: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))
    return rng.permutation(num_windows)


def _batch_indices(seed: int, num_windows: int, batch_size: int, step: int) -> np.ndarray:
    """Window indices for 0-based ``step`` — stateless, so resume replays exactly."""
    per_epoch = max(num_windows // batch_size, 1)
    epoch, slot = divmod(step, per_epoch)
    order = _epoch_order(seed, epoch, num_windows)
    lo = slot * batch_size
    return order[lo:lo + batch_size]


def train(
    model_config: ModelConfig,
    config: TrainConfig,
    shard_dir: Union[str, Path],
    out_dir: Union[str, Path],
    *,
    resume_from: Union[str, Path, None] = None,
    deterministic_timing: bool = False,
) -> TrainResult:
    """Run (or resume) one arm; writes metrics.csv and checkpoint files.

    On a non-finite loss the run aborts with NonFiniteLoss after flushing
    metrics; the most recent good checkpoint stays on disk.
    ``deterministic_timing`` logs wall_time as 0.0 so reruns produce
    byte-identical metrics files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tokens, mask, tokenizer_hash = _load_windows(shard_dir, model_config.vocab_size)
    num_windows, seq_len = tokens.shape
    batch_size = max(config.tokens_per_batch // seq_len, 1)
    batch_size = min(batch_size, num_windows)

    extra = {
        "train_config": config.to_dict(),
        "tokenizer_hash": tokenizer_hash,
    }

    metrics_path = out_dir / "metrics.csv"
    rows: list[MetricsRow] = []
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.params.config != model_config:
            raise ShardMismatch("checkpoint model config differs from requested config")
        if ckpt.optimizer_state is None:
            raise ValueError(f"{resume_from} has no optimizer state; cannot resume")
        params = ckpt.params
        opt = OptimizerState.from_tensors(ckpt.optimizer_state)
        start_step = ckpt.step
        if metrics_path.is_file():
            rows = [r for r in read_metrics(metrics_path) if r.step <= start_step]
    else:
        params = model_ops.init(model_config, seed=config.seed)
        opt = init_optimizer_state(params)
        start_step = 0

    final_path = out_dir / "checkpoint.ckpt"
    t0 = time.monotonic()
    wall_base = rows[-1].wall_time if rows else 0.0
    loss = float("nan")

    def flush(step_count: int) -> None:
        write_metrics(metrics_path, rows)
        save_checkpoint(final_path, Checkpoint(
            params=params, step=step_count,
            optimizer_state=opt.to_tensors(), extra=extra,
        ))

    for step in range(start_step, config.total_steps):
        picks = _batch_indices(config.seed, num_windows, batch_size, step)
        batch_tokens = tokens[picks]
        batch_mask = mask[picks]
        try:
            loss, supervised, grads = model_ops.backward(params, (batch_tokens, batch_mask))
        except NonFiniteLoss:
            flush(step)
            raise
        grad_norm, _ = clip_gradients(grads, config.grad_clip)
        lr = lr_at(config, step)
        optimizer_step(params, grads, opt, lr, config)
        rows.append(MetricsRow(
            step=step + 1,
            learning_rate=lr,
            masked_loss=loss,
            supervised_tokens=supervised,
            wall_time=0.0 if deterministic_timing else wall_base + (time.monotonic() - t0),
            grad_norm=grad_norm,
        ))
        done = step + 1
        if config.checkpoint_every and done % config.checkpoint_every == 0 and done < config.total_steps:
            write_metrics(metrics_path, rows)
            save_checkpoint(out_dir / f"checkpoint-{done:06d}.ckpt", Checkpoint(
                params=params, step=done,
                optimizer_state=opt.to_tensors(), extra=extra,
            ))

    flush(config.total_steps)
    return TrainResult(
        checkpoint_path=final_path,
        metrics_path=metrics_path,
        final_loss=loss,
        steps_completed=config.total_steps,
    )


# ---------------------------------------------------------------------------
# convergence comparison
# ---------------------------------------------------------------------------


def _smoothed(losses: Sequence[float], window: int) -> np.ndarray:
    """s[k] = mean of the trailing ``window`` losses ending at k (inclusive)."""
    arr = np.asarray(losses, dtype=np.float64)
    sums = np.cumsum(arr)
    out = np.empty_like(arr)
    for k in range(len(arr)):
        lo = max(0, k - window + 1)
        out[k] = (sums[k] - (sums[lo - 1] if lo > 0 else 0.0)) / (k - lo + 1)
    return out


def steps_to_loss(
    metrics_koco: Sequence[MetricsRow],
    metrics_standard: Sequence[MetricsRow],
    window: int = SMOOTHING_WINDOW,
) -> float:
    """Convergence speedup: how early the prefixed arm reaches the other
    arm's final smoothed loss, as a fraction of the standard arm's steps.

    Raises NeverReached when the prefixed arm never gets there.
    """
    if not metrics_koco or not metrics_standard:
        raise EmptyCorpus("need metrics from both arms")
    koco_smooth = _smoothed([r.masked_loss for r in metrics_koco], window)
    std_smooth = _smoothed([r.masked_loss for r in metrics_standard], window)
    target = std_smooth[-1]
    hits = np.nonzero(koco_smooth <= target)[0]
    if hits.size == 0:
        raise NeverReached(
            f"smoothed loss never reached the standard arm's final {target:.4f} "
            f"(best {float(koco_smooth.min()):.4f})"
        )
    return float(hits[0] + 1) / len(metrics_standard)
