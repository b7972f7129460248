"""Mini-batch training with Adam and per-epoch temperature annealing.

Everything is seeded: parameter init consumes SplitMix64(config.seed) and
the trainer's shuffle/noise stream consumes SplitMix64(config.seed + 1), so
a (config, dataset) pair always reproduces the same parameters, batches,
decisions and epoch log, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import ndgrad as ng
from .gumbel import tau_at
from .model import BatchForward, ModelConfig, ModelParams, forward_batch, init_params, loss
from .rng import SplitMix64


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending epoch/batch."""


@dataclass
class EpochLog:
    epoch: int
    tau: float
    train_loss: float
    train_usage: float
    val_top1: float
    val_usage: float

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) over named blocks."""

    def __init__(self, blocks: dict[str, ng.DiffArray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.blocks = blocks
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.values) for k, v in blocks.items()}
        self.v = {k: np.zeros_like(v.values) for k, v in blocks.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, block in self.blocks.items():
            g = block.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            block.values -= self.lr * (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(coarse (N,T,Dc), fine (N,T,Df), labels (N,)) from a sample list."""
    coarse = np.stack([np.asarray(s.coarse, dtype=np.float64) for s in samples])
    fine = np.stack([np.asarray(s.fine, dtype=np.float64) for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return coarse, fine, labels


def evaluate_split(params: ModelParams, config: ModelConfig,
                   coarse: np.ndarray, fine: np.ndarray, labels: np.ndarray,
                   chunk: int = 1024) -> tuple[float, float, BatchForward | None]:
    """Deterministic-inference top-1 and mean usage over stacked arrays."""
    correct = 0
    fine_reads = 0
    last = None
    for lo in range(0, coarse.shape[0], chunk):
        fwd = forward_batch(params, config, coarse[lo:lo + chunk], fine[lo:lo + chunk])
        correct += int((fwd.final_probs.values.argmax(axis=1) == labels[lo:lo + chunk]).sum())
        fine_reads += int(fwd.bits.sum())
        last = fwd
    n = coarse.shape[0]
    return correct / n, fine_reads / (n * config.seq_len), last


def train(params: ModelParams, config: ModelConfig,
          train_samples, val_samples,
          log_fn=None) -> list[EpochLog]:
    """Optimize params in place; returns the per-epoch log."""
    tr_coarse, tr_fine, tr_labels = stack_samples(train_samples)
    va_coarse, va_fine, va_labels = stack_samples(val_samples)
    eye = np.eye(config.num_classes)
    rng = SplitMix64(config.seed + 1)
    adam = Adam(params.blocks(), lr=config.learning_rate)
    schedule = config.tau_schedule()
    n = tr_coarse.shape[0]
    logs: list[EpochLog] = []

    for epoch in range(config.epochs):
        tau = tau_at(schedule, epoch)
        order = rng.shuffle(np.arange(n))
        loss_sum = 0.0
        read_sum = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            params.zero_grad()
            with ng.Tape():
                fwd = forward_batch(params, config,
                                    tr_coarse[idx], tr_fine[idx], tau=tau, rng=rng)
                batch_loss = loss(fwd.final_probs, eye[tr_labels[idx]],
                                  fwd.fine_bits, config)
                value = float(batch_loss.values)
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss {value} at epoch {epoch}, batch start {lo}")
                ng.backward(batch_loss)
            adam.step()
            loss_sum += value * len(idx)
            read_sum += int(fwd.bits.sum())
        val_top1, val_usage, _ = evaluate_split(params, config, va_coarse, va_fine, va_labels)
        entry = EpochLog(epoch=epoch, tau=tau,
                         train_loss=loss_sum / n,
                         train_usage=read_sum / (n * config.seq_len),
                         val_top1=val_top1, val_usage=val_usage)
        logs.append(entry)
        if log_fn is not None:
            log_fn(entry)
    return logs


def train_from_scratch(config: ModelConfig, train_samples, val_samples,
                       log_fn=None) -> tuple[ModelParams, list[EpochLog]]:
    """Seeded init + train; the usual entry point."""
    params = init_params(config, SplitMix64(config.seed))
    logs = train(params, config, train_samples, val_samples, log_fn=log_fn)
    return params, logs
