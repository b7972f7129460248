"""Cost accounting, ranking metrics, and the offline/online evaluation
protocols with their reference baselines.

GFLOPs bookkeeping: every trace is charged per frame for the coarse
extractor, per fine read for the fine extractor, and (optionally) for the
recurrent machinery, using multiply-add = 2 FLOPs:

    lstm step   8 * H * (D_in + H)
    gate        2 * (Dc + 2 * Hf) * 2
    classifier  2 * Hf * num_classes

The paper-table mode drops both the coarse stream and the recurrent terms so
a 25-frame all-fine trace prices at 25 x 7.82 = 195.5 GFLOPs, matching the
uniform-sampling row it reproduces.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, StepTrace, forward_batch
from .training import stack_samples, train_from_scratch


@dataclass
class CostModel:
    coarse_gflops_per_frame: float = 0.08
    fine_gflops_per_frame: float = 7.82
    include_recurrent_cost: bool = True
    include_coarse_cost: bool = True

    @classmethod
    def paper_table(cls) -> "CostModel":
        """Reproduction accounting for the uniform-sampling table row:
        fine extractor cost only."""
        return cls(include_recurrent_cost=False, include_coarse_cost=False)

    @classmethod
    def full(cls) -> "CostModel":
        return cls()


def recurrent_step_flops(config: ModelConfig) -> dict[str, float]:
    """FLOPs per step for each recurrent component (multiply-add = 2)."""
    dc, df = config.coarse_dim, config.fine_dim
    hc, hf = config.coarse_hidden, config.fine_hidden
    return {
        "coarse_lstm": 8.0 * hc * (dc + hc),
        "fine_lstm": 8.0 * hf * (dc + df + hf),
        "gate": 2.0 * (dc + 2 * hf) * 2,
        "classifier": 2.0 * hf * config.num_classes,
    }


def flops_for_trace(trace: StepTrace | np.ndarray, config: ModelConfig,
                    cost: CostModel) -> float:
    """GFLOPs charged to one (possibly truncated) trace."""
    bits = trace.bits if isinstance(trace, StepTrace) else np.asarray(trace)
    steps = len(bits)
    reads = int(np.sum(bits))
    total = reads * cost.fine_gflops_per_frame
    if cost.include_coarse_cost:
        total += steps * cost.coarse_gflops_per_frame
    if cost.include_recurrent_cost:
        per = recurrent_step_flops(config)
        flops = (steps * (per["coarse_lstm"] + per["gate"] + per["classifier"])
                 + reads * per["fine_lstm"])
        total += flops / 1e9
    return total


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def top1(scores: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (ties to the lowest class) is the label."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape[0] == 0:
        raise ValueError("top1: empty prediction set")
    if scores.shape[0] != labels.shape[0]:
        raise ValueError(f"top1: {scores.shape[0]} rows vs {labels.shape[0]} labels")
    return float((scores.argmax(axis=1) == labels).mean())


def mean_average_precision(scores: np.ndarray, labels: np.ndarray,
                           ) -> tuple[float, dict[int, float | None]]:
    """Non-interpolated mAP over classes with at least one positive.

    Rows must be in video-id order; ranking ties break by that order
    (stable sort), which pins the metric for duplicated scores. Classes
    without positives are reported as None and excluded from the mean.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    per_class: dict[int, float | None] = {}
    included = []
    for c in range(scores.shape[1]):
        positives = labels == c
        if not positives.any():
            per_class[c] = None
            continue
        order = np.argsort(-scores[:, c], kind="stable")
        hits = positives[order]
        ranks = np.nonzero(hits)[0] + 1
        precisions = np.cumsum(hits)[hits.nonzero()] / ranks
        ap = float(precisions.mean())
        per_class[c] = ap
        included.append(ap)
    if not included:
        raise ValueError("mean_average_precision: no class has positives")
    return float(np.mean(included)), per_class


# ---------------------------------------------------------------------------
# evaluation results
# ---------------------------------------------------------------------------

@dataclass
class VideoOutcome:
    id: str
    label: int
    predicted: int
    fine_reads: int
    stop_step: int
    gflops: float


@dataclass
class EvalResult:
    method: str
    top1: float
    mAP: float
    per_class_ap: dict[int, float | None]
    mean_gflops_per_video: float
    videos: list[VideoOutcome]
    budget: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return d


def write_results_json(result: EvalResult, path: str | Path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True))


def write_curves_csv(results: list[EvalResult], path: str | Path) -> None:
    """One row per result: budget_K, mean_gflops, top1, method."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["budget_K", "mean_gflops", "top1", "method"])
        for r in results:
            budget = "" if r.budget is None else r.budget
            writer.writerow([budget, f"{r.mean_gflops_per_video:.6f}",
                             f"{r.top1:.6f}", r.method])


def _result_from(method: str, samples, scores: np.ndarray,
                 reads: np.ndarray, stops: np.ndarray, gflops: np.ndarray,
                 budget: int | None = None) -> EvalResult:
    labels = np.array([s.label for s in samples])
    mAP, per_class = mean_average_precision(scores, labels)
    videos = [VideoOutcome(id=s.id, label=int(s.label),
                           predicted=int(scores[i].argmax()),
                           fine_reads=int(reads[i]), stop_step=int(stops[i]),
                           gflops=float(gflops[i]))
              for i, s in enumerate(samples)]
    return EvalResult(method=method, top1=top1(scores, labels), mAP=mAP,
                      per_class_ap=per_class,
                      mean_gflops_per_video=float(gflops.mean()),
                      videos=videos, budget=budget)


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def _infer_traces(params: ModelParams, config: ModelConfig, samples,
                  chunk: int = 512) -> list[StepTrace]:
    coarse, fine, _ = stack_samples(samples)
    traces: list[StepTrace] = []
    for lo in range(0, coarse.shape[0], chunk):
        fwd = forward_batch(params, config, coarse[lo:lo + chunk], fine[lo:lo + chunk])
        traces.extend(fwd.traces())
    return traces


def eval_offline(params: ModelParams, config: ModelConfig, samples,
                 cost: CostModel, method: str = "gated") -> EvalResult:
    """Deterministic gating over full sequences; mAP / top-1 / mean GFLOPs."""
    traces = _infer_traces(params, config, samples)
    scores = np.stack([t.final_prediction for t in traces])
    reads = np.array([t.bits.sum() for t in traces])
    stops = np.full(len(traces), config.seq_len)
    gflops = np.array([flops_for_trace(t, config, cost) for t in traces])
    return _result_from(method, samples, scores, reads, stops, gflops)


def eval_online(params: ModelParams, config: ModelConfig, samples,
                budget: int, cost: CostModel,
                method: str = "gated-online") -> EvalResult:
    """Forced early prediction once the budget-th fine read has happened.

    The gated trajectory up to any step never depends on later frames, so
    outcomes are sliced out of the full offline traces. budget=0 forces the
    all-skip policy (never update the fine path except through sync) and
    predicts at the final step. Videos that never reach the budget use the
    full sequence.
    """
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    if budget == 0:
        forced = replace(config, force_gate=0)
        traces = _infer_traces(params, forced, samples)
        scores = np.stack([t.final_prediction for t in traces])
        reads = np.zeros(len(traces), dtype=int)
        stops = np.full(len(traces), config.seq_len)
        gflops = np.array([flops_for_trace(t, config, cost) for t in traces])
        return _result_from(method, samples, scores, reads, stops, gflops, budget=budget)

    traces = _infer_traces(params, config, samples)
    scores, reads, stops, gflops = [], [], [], []
    for t in traces:
        cum = t.cumulative_fine
        if cum[-1] >= budget:
            stop_idx = int(np.searchsorted(cum, budget))
        else:
            stop_idx = config.seq_len - 1
        scores.append(t.step_predictions[stop_idx])
        reads.append(int(cum[stop_idx]))
        stops.append(stop_idx + 1)
        gflops.append(flops_for_trace(t.bits[:stop_idx + 1], config, cost))
    return _result_from(method, samples, np.stack(scores), np.array(reads),
                        np.array(stops), np.array(gflops), budget=budget)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def uniform_indices(budget: int, horizon: int) -> np.ndarray:
    """0-based indices of min(budget, horizon) frames spread over [1, horizon]:
    1-based bin centers ceil((2j-1) * horizon / (2 * budget)). budget=1 picks
    the middle frame ceil(horizon / 2)."""
    k = min(budget, horizon)
    j = np.arange(1, k + 1)
    ones_based = np.ceil((2 * j - 1) * horizon / (2 * k)).astype(int)
    return ones_based - 1


def baseline_uniform_k(samples, budget: int, stop_steps: dict[str, int],
                       fine_params: ModelParams, fine_config: ModelConfig,
                       cost: CostModel) -> EvalResult:
    """Average the always-fine model's per-step predictions at `budget`
    frames sampled uniformly from each video's first K' frames (K' from a
    prior online run). Cost: budget fine reads + K' coarse frames."""
    if budget < 1:
        raise ValueError("uniform baseline needs budget >= 1")
    forced = replace(fine_config, force_gate=1)
    traces = _infer_traces(fine_params, forced, samples)
    scores, reads, stops, gflops = [], [], [], []
    for s, t in zip(samples, traces):
        horizon = stop_steps[s.id]
        idx = uniform_indices(budget, horizon)
        scores.append(t.step_predictions[idx].mean(axis=0))
        reads.append(len(idx))
        stops.append(horizon)
        gflops.append(len(idx) * cost.fine_gflops_per_frame
                      + horizon * cost.coarse_gflops_per_frame)
    return _result_from("uniform-k", samples, np.stack(scores), np.array(reads),
                        np.array(stops), np.array(gflops), budget=budget)


def baseline_seq_k(samples, budget: int, fine_params: ModelParams,
                   fine_config: ModelConfig, cost: CostModel) -> EvalResult:
    """Mean-pool the always-fine model's predictions over the first `budget`
    frames (clamped to T). Cost: budget fine reads."""
    if budget < 1:
        raise ValueError("sequential baseline needs budget >= 1")
    forced = replace(fine_config, force_gate=1)
    traces = _infer_traces(fine_params, forced, samples)
    k = min(budget, fine_config.seq_len)
    scores = np.stack([t.step_predictions[:k].mean(axis=0) for t in traces])
    reads = np.full(len(traces), k)
    stops = np.full(len(traces), k)
    gflops = np.full(len(traces), k * cost.fine_gflops_per_frame)
    return _result_from("seq-k", samples, scores, reads, stops,
                        np.array(gflops, dtype=float), budget=budget)


def baseline_lstm(variant: str, config: ModelConfig, train_samples,
                  val_samples, cost: CostModel,
                  log_fn=None) -> tuple[ModelParams, EvalResult]:
    """Train a forced-gate reference with the shared trainer and report its
    offline numbers on the validation split.

    coarse_only forces every step to skip (the classifier reads the synced
    coarse state); fine_always forces every step to read. Both drop the
    usage penalty.
    """
    if variant == "coarse_only":
        forced = replace(config, force_gate=0, usage_penalty=0.0)
    elif variant == "fine_always":
        forced = replace(config, force_gate=1, usage_penalty=0.0)
    else:
        raise ValueError(f"unknown baseline variant {variant!r}")
    params, _ = train_from_scratch(forced, train_samples, val_samples, log_fn=log_fn)
    result = eval_offline(params, forced, val_samples, cost, method=variant)
    return params, result
