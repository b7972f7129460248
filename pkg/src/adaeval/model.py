"""The coarse-to-fine gated recurrent classifier.

Per step: the coarse LSTM always advances on the cheap features; a linear
gate looks at the current coarse features plus the previous fine state and
decides whether to pay for the fine path. On a compute step the fine LSTM
advances on [coarse, fine] features; on a skip step the fine state's leading
coordinates are overwritten with the coarse state (synchronization), so the
fine hidden always summarizes every frame seen and can be classified at any
time. Training samples the decision through the temperature relaxation with
straight-through hard bits; inference is a deterministic argmax.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import ndgrad as ng
from .cells import (ClassifierParams, GateParams, LSTMParams, LSTMState,
                    classify, gate_logits, init_classifier, init_gate,
                    init_lstm, lstm_step, read_param_blocks, write_param_blocks,
                    zero_state, CheckpointError)
from .gumbel import TauSchedule, gumbel_softmax, sample_gumbel_noise, straight_through
from .rng import SplitMix64


class ConfigError(ValueError):
    """Inconsistent model configuration, rejected at construction."""


class DataError(ValueError):
    """Feature data inconsistent with the configuration or manifest."""


@dataclass
class ModelConfig:
    coarse_dim: int
    fine_dim: int
    coarse_hidden: int
    fine_hidden: int
    num_classes: int
    seq_len: int
    target_usage: float = 0.05   # fraction of steps that should take the fine path
    usage_penalty: float = 2.0   # weight of the squared usage deviation
    tau_start: float = 5.0
    tau_decay: float = 0.9
    tau_min: float = 0.5
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    sync: bool = True            # copy coarse state into skipped fine state
    force_gate: int | None = None  # 0 = always skip, 1 = always fine

    def __post_init__(self):
        if self.fine_hidden < self.coarse_hidden:
            raise ConfigError(
                f"fine_hidden ({self.fine_hidden}) must be >= coarse_hidden "
                f"({self.coarse_hidden}): the sync copy needs room for the coarse state")
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        if not 0.0 <= self.target_usage <= 1.0:
            raise ConfigError(f"target_usage must be in [0, 1], got {self.target_usage}")
        if self.usage_penalty < 0:
            raise ConfigError(f"usage_penalty must be >= 0, got {self.usage_penalty}")
        if self.force_gate not in (None, 0, 1):
            raise ConfigError(f"force_gate must be None, 0 or 1, got {self.force_gate}")

    def tau_schedule(self) -> TauSchedule:
        return TauSchedule(self.tau_start, self.tau_decay, self.tau_min)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    coarse_cell: LSTMParams
    fine_cell: LSTMParams
    gate: GateParams
    classifier: ClassifierParams

    def blocks(self) -> dict[str, ng.DiffArray]:
        """Named parameter blocks in a fixed order (optimizer + checkpoint)."""
        return {
            "coarse_cell.W": self.coarse_cell.W, "coarse_cell.b": self.coarse_cell.b,
            "fine_cell.W": self.fine_cell.W, "fine_cell.b": self.fine_cell.b,
            "gate.W": self.gate.W, "gate.b": self.gate.b,
            "classifier.W": self.classifier.W, "classifier.b": self.classifier.b,
        }

    def zero_grad(self) -> None:
        for block in self.blocks().values():
            block.zero_grad()


def init_params(config: ModelConfig, rng: SplitMix64 | None = None) -> ModelParams:
    """Seeded initialization; draw order is fixed by the block order below."""
    rng = rng if rng is not None else SplitMix64(config.seed)
    return ModelParams(
        coarse_cell=init_lstm(rng, config.coarse_dim, config.coarse_hidden),
        fine_cell=init_lstm(rng, config.coarse_dim + config.fine_dim, config.fine_hidden),
        gate=init_gate(rng, config.coarse_dim, config.fine_hidden),
        classifier=init_classifier(config.fine_hidden, config.num_classes),
    )


@dataclass
class GateDecision:
    """Per-step gate record for one batch of rows."""
    logits: np.ndarray            # (batch, 2)
    noise: np.ndarray | None      # (batch, 2) in training, None at inference
    soft: np.ndarray | None       # relaxed sample, None at inference
    bits: np.ndarray              # (batch,) int, 1 = fine path taken
    fine_column: ng.DiffArray | None = None  # (batch, 1) straight-through carrier


@dataclass
class StepTrace:
    """Per-video record consumed by metrics and the budgeted protocols."""
    bits: np.ndarray              # (T,) int
    gate_logits: np.ndarray       # (T, 2)
    step_predictions: np.ndarray  # (T, num_classes)
    cumulative_fine: np.ndarray   # (T,) running count of fine reads
    final_prediction: np.ndarray  # (num_classes,)

    @property
    def fraction_used(self) -> float:
        return float(self.bits.mean())


def _hard_onehot(bits: np.ndarray) -> np.ndarray:
    out = np.zeros((bits.shape[0], 2))
    out[:, 1] = bits
    out[:, 0] = 1.0 - bits
    return out


def step(params: ModelParams, config: ModelConfig,
         v_c: ng.DiffArray, v_f: ng.DiffArray | None,
         coarse_state: LSTMState, fine_state: LSTMState,
         tau: float | None = None, noise: np.ndarray | None = None,
         relaxed: bool = False,
         ) -> tuple[LSTMState, LSTMState, GateDecision, ng.DiffArray]:
    """One time step over a batch of rows.

    Training mode iff `noise` is given (requires `tau`); otherwise the gate
    decision is the deterministic argmax of its logits. config.force_gate
    overrides the decision either way. With `relaxed` the soft sample itself
    is the blend weight (no hard substitution): the loss becomes an honest
    differentiable function of every parameter, which is what finite-
    difference verification needs — the hard forward is piecewise constant
    in the gate weights, so its true Jacobian is zero almost everywhere.
    """
    if v_f is None:
        raise DataError("step: fine features are required; the pipeline always "
                        "carries both streams (skipping is an accounting notion)")
    hc, hf = config.coarse_hidden, config.fine_hidden
    batch = v_c.shape[0]

    coarse_next = lstm_step(params.coarse_cell, v_c, coarse_state)
    logits = gate_logits(params.gate, v_c, fine_state.h, fine_state.c)

    if config.force_gate is not None:
        bits = np.full(batch, config.force_gate, dtype=np.int64)
        hard = ng.constant(_hard_onehot(bits))
        soft_values = None
        noise_rec = None
    elif noise is not None:
        if tau is None:
            raise ValueError("step: training noise given without a temperature")
        soft = gumbel_softmax(logits, noise, tau)
        hard = soft if relaxed else straight_through(soft)
        bits = (soft.values[:, 1] >= soft.values[:, 0]).astype(np.int64)
        soft_values = soft.values
        noise_rec = noise
    else:
        bits = (logits.values[:, 1] >= logits.values[:, 0]).astype(np.int64)
        hard = ng.constant(_hard_onehot(bits))
        soft_values = None
        noise_rec = None

    candidate = lstm_step(params.fine_cell, ng.concat(v_c, v_f, axis=1), fine_state)

    if config.sync:
        if hf > hc:
            sync_h = ng.concat(coarse_next.h, ng.slice_axis(fine_state.h, 1, hc, hf), axis=1)
            sync_c = ng.concat(coarse_next.c, ng.slice_axis(fine_state.c, 1, hc, hf), axis=1)
        else:
            sync_h, sync_c = coarse_next.h, coarse_next.c
    else:
        # ablation: skipped steps keep the previous fine state verbatim
        sync_h, sync_c = fine_state.h, fine_state.c

    ones_row = ng.constant(np.ones((1, hf)))
    fine_col = ng.slice_axis(hard, 1, 1, 2)
    skip_col = ng.slice_axis(hard, 1, 0, 1)
    fine_mask = ng.matmul(fine_col, ones_row)
    skip_mask = ng.matmul(skip_col, ones_row)
    fine_next = LSTMState(
        h=ng.add(ng.hadamard(fine_mask, candidate.h), ng.hadamard(skip_mask, sync_h)),
        c=ng.add(ng.hadamard(fine_mask, candidate.c), ng.hadamard(skip_mask, sync_c)),
    )

    probs = classify(params.classifier, fine_next.h)
    decision = GateDecision(logits=logits.values, noise=noise_rec,
                            soft=soft_values, bits=bits, fine_column=fine_col)
    return coarse_next, fine_next, decision, probs


@dataclass
class BatchForward:
    """Everything one forward pass over (batch, T, ...) feature stacks yields."""
    final_probs: ng.DiffArray           # (batch, num_classes)
    fine_bits: ng.DiffArray | None      # (batch, T) gradient carrier, training only
    bits: np.ndarray                    # (batch, T) int
    gate_logits: np.ndarray             # (batch, T, 2)
    step_probs: np.ndarray              # (batch, T, num_classes)

    def traces(self) -> list[StepTrace]:
        out = []
        for row in range(self.bits.shape[0]):
            bits = self.bits[row]
            out.append(StepTrace(
                bits=bits.copy(),
                gate_logits=self.gate_logits[row].copy(),
                step_predictions=self.step_probs[row].copy(),
                cumulative_fine=np.cumsum(bits),
                final_prediction=self.step_probs[row, -1].copy(),
            ))
        return out


def forward_batch(params: ModelParams, config: ModelConfig,
                  coarse: np.ndarray, fine: np.ndarray,
                  tau: float | None = None,
                  rng: SplitMix64 | None = None,
                  noise: np.ndarray | None = None,
                  relaxed: bool = False) -> BatchForward:
    """Run T steps over stacked feature arrays (batch, T, dim).

    Training mode is selected by passing `rng` (noise drawn per step) or a
    frozen `noise` array of shape (T, batch, 2); both require `tau`.
    `relaxed` swaps the straight-through hard blend for the soft one (used
    by gradient verification; see :func:`step`).
    """
    batch, steps = coarse.shape[0], coarse.shape[1]
    if steps != config.seq_len or fine.shape[1] != config.seq_len:
        raise DataError(f"forward_batch: sequences of length {steps}/{fine.shape[1]} "
                        f"do not match configured seq_len {config.seq_len}")
    if coarse.shape[2] != config.coarse_dim or fine.shape[2] != config.fine_dim:
        raise DataError(f"forward_batch: feature dims ({coarse.shape[2]}, {fine.shape[2]}) "
                        f"do not match config ({config.coarse_dim}, {config.fine_dim})")
    training = rng is not None or noise is not None

    coarse_state = zero_state(batch, config.coarse_hidden)
    fine_state = zero_state(batch, config.fine_hidden)
    bits_cols: ng.DiffArray | None = None
    bits_all = np.empty((batch, steps), dtype=np.int64)
    logits_all = np.empty((batch, steps, 2))
    probs_all = np.empty((batch, steps, config.num_classes))
    probs = None

    for t in range(steps):
        if training:
            if noise is not None:
                step_noise = noise[t]
            else:
                step_noise = sample_gumbel_noise(rng, batch=batch)
        else:
            step_noise = None
        coarse_state, fine_state, decision, probs = step(
            params, config,
            ng.constant(coarse[:, t, :]), ng.constant(fine[:, t, :]),
            coarse_state, fine_state, tau=tau, noise=step_noise, relaxed=relaxed)
        bits_all[:, t] = decision.bits
        logits_all[:, t] = decision.logits
        probs_all[:, t] = probs.values
        if training:
            # straight-through columns keep the usage term differentiable
            col = decision.fine_column
            bits_cols = col if bits_cols is None else ng.concat(bits_cols, col, axis=1)

    return BatchForward(final_probs=probs, fine_bits=bits_cols,
                        bits=bits_all, gate_logits=logits_all, step_probs=probs_all)


def forward_video(params: ModelParams, config: ModelConfig, sample,
                  tau: float | None = None,
                  rng: SplitMix64 | None = None,
                  noise: np.ndarray | None = None) -> tuple[np.ndarray, StepTrace]:
    """Single-video convenience wrapper; returns (final prediction, trace)."""
    coarse = np.asarray(sample.coarse, dtype=np.float64)
    fine = np.asarray(sample.fine, dtype=np.float64)
    if coarse.ndim != 2 or fine.ndim != 2 or coarse.shape[0] != fine.shape[0]:
        raise DataError(f"video {getattr(sample, 'id', '?')}: malformed feature arrays "
                        f"{coarse.shape} / {fine.shape}")
    try:
        fwd = forward_batch(params, config, coarse[None], fine[None],
                            tau=tau, rng=rng, noise=noise)
    except DataError as exc:
        raise DataError(f"video {getattr(sample, 'id', '?')}: {exc}") from exc
    trace = fwd.traces()[0]
    return trace.final_prediction, trace


def loss(final_probs: ng.DiffArray, labels_one_hot: np.ndarray,
         fine_bits: ng.DiffArray, config: ModelConfig) -> ng.DiffArray:
    """Mean over the batch of: -y·log(p_T) + penalty·(usage - target)^2.

    `fine_bits` is the (batch, T) straight-through bit matrix, so the usage
    term backpropagates through the relaxed gate samples.
    """
    batch, steps = fine_bits.shape
    num_classes = final_probs.shape[1]
    ones_c = ng.constant(np.ones((num_classes, 1)))
    ones_t = ng.constant(np.ones((steps, 1)))
    nll = ng.scalar_mul(
        ng.matmul(ng.hadamard(ng.constant(labels_one_hot), ng.log(final_probs)), ones_c),
        -1.0)                                             # (batch, 1)
    usage = ng.scalar_mul(ng.matmul(fine_bits, ones_t), 1.0 / steps)
    deviation = ng.add(usage, ng.constant(np.array([-config.target_usage])))
    penalty = ng.scalar_mul(ng.square(deviation), config.usage_penalty)
    return ng.mean(ng.add(nll, penalty))


# ---------------------------------------------------------------------------
# checkpointing (header.json + params.bin, format from cells)
# ---------------------------------------------------------------------------

def _expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    dc, df = config.coarse_dim, config.fine_dim
    hc, hf = config.coarse_hidden, config.fine_hidden
    return {
        "coarse_cell.W": (dc + hc, 4 * hc), "coarse_cell.b": (4 * hc,),
        "fine_cell.W": (dc + df + hf, 4 * hf), "fine_cell.b": (4 * hf,),
        "gate.W": (dc + 2 * hf, 2), "gate.b": (2,),
        "classifier.W": (hf, config.num_classes), "classifier.b": (config.num_classes,),
    }


def save_checkpoint(params: ModelParams, config: ModelConfig, path: str | Path) -> None:
    blocks = {name: arr.values for name, arr in params.blocks().items()}
    write_param_blocks(path, blocks, extra_header={"config": config.to_dict()})


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    blocks, header = read_param_blocks(path)
    if "config" not in header:
        raise CheckpointError(f"checkpoint {path} lacks a config header")
    config = ModelConfig.from_dict(header["config"])
    expected = _expected_shapes(config)
    if set(blocks) != set(expected):
        raise CheckpointError(f"checkpoint blocks {sorted(blocks)} != expected {sorted(expected)}")
    for name, shape in expected.items():
        if blocks[name].shape != shape:
            raise CheckpointError(
                f"block {name!r} has shape {blocks[name].shape}, configuration requires {shape}")
    params = ModelParams(
        coarse_cell=LSTMParams(W=ng.array(blocks["coarse_cell.W"], requires_grad=True),
                               b=ng.array(blocks["coarse_cell.b"], requires_grad=True),
                               input_dim=config.coarse_dim, hidden_dim=config.coarse_hidden),
        fine_cell=LSTMParams(W=ng.array(blocks["fine_cell.W"], requires_grad=True),
                             b=ng.array(blocks["fine_cell.b"], requires_grad=True),
                             input_dim=config.coarse_dim + config.fine_dim,
                             hidden_dim=config.fine_hidden),
        gate=GateParams(W=ng.array(blocks["gate.W"], requires_grad=True),
                        b=ng.array(blocks["gate.b"], requires_grad=True)),
        classifier=ClassifierParams(W=ng.array(blocks["classifier.W"], requires_grad=True),
                                    b=ng.array(blocks["classifier.b"], requires_grad=True)),
    )
    return params, config
