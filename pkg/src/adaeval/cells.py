"""Recurrent building blocks: fused LSTM cell, skip/compute gate, classifier.

All weight matrices are stored input-major (fan_in x fan_out) so a batched
step is one ``rows @ W + b``. Parameter blocks serialize to a params.bin of
flat little-endian float64 plus a header.json naming each block's shape and
byte offset; see :func:`write_param_blocks`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndgrad as ng
from .rng import SplitMix64

PARAMS_FORMAT = "adaeval-params"
PARAMS_VERSION = 1


class CheckpointError(ValueError):
    """Header/blob disagreement or unreadable parameter file."""


# ---------------------------------------------------------------------------
# parameter records
# ---------------------------------------------------------------------------

@dataclass
class LSTMParams:
    """Fused-gate LSTM cell weights; gate block order is [input, forget,
    output, candidate] along the 4H output axis."""
    W: ng.DiffArray  # (input_dim + hidden_dim, 4 * hidden_dim)
    b: ng.DiffArray  # (4 * hidden_dim,)
    input_dim: int
    hidden_dim: int


@dataclass
class LSTMState:
    h: ng.DiffArray  # (batch, hidden_dim)
    c: ng.DiffArray  # (batch, hidden_dim)


@dataclass
class GateParams:
    """One-layer skip/compute gate; logit index 1 means 'compute fine'."""
    W: ng.DiffArray  # (coarse_dim + 2 * fine_hidden, 2)
    b: ng.DiffArray  # (2,)


@dataclass
class ClassifierParams:
    W: ng.DiffArray  # (hidden_dim, num_classes)
    b: ng.DiffArray  # (num_classes,)


def _uniform_block(rng: SplitMix64, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    flat = rng.uniform(int(np.prod(shape))) * 2.0 - 1.0
    return (flat * bound).reshape(shape)


def init_lstm(rng: SplitMix64, input_dim: int, hidden_dim: int) -> LSTMParams:
    fan_in = input_dim + hidden_dim
    w = _uniform_block(rng, fan_in, (fan_in, 4 * hidden_dim))
    b = np.zeros(4 * hidden_dim)
    b[hidden_dim:2 * hidden_dim] = 1.0  # forget-gate bias
    return LSTMParams(W=ng.array(w, requires_grad=True),
                      b=ng.array(b, requires_grad=True),
                      input_dim=input_dim, hidden_dim=hidden_dim)


def init_gate(rng: SplitMix64, coarse_dim: int, fine_hidden: int) -> GateParams:
    fan_in = coarse_dim + 2 * fine_hidden
    w = _uniform_block(rng, fan_in, (fan_in, 2))
    b = np.array([0.0, 1.0])  # start biased toward computing fine features
    return GateParams(W=ng.array(w, requires_grad=True),
                      b=ng.array(b, requires_grad=True))


def init_classifier(hidden_dim: int, num_classes: int) -> ClassifierParams:
    return ClassifierParams(W=ng.array(np.zeros((hidden_dim, num_classes)), requires_grad=True),
                            b=ng.array(np.zeros(num_classes), requires_grad=True))


def zero_state(batch: int, hidden_dim: int) -> LSTMState:
    return LSTMState(h=ng.constant(np.zeros((batch, hidden_dim))),
                     c=ng.constant(np.zeros((batch, hidden_dim))))


# ---------------------------------------------------------------------------
# forward steps
# ---------------------------------------------------------------------------

def lstm_step(params: LSTMParams, x: ng.DiffArray, state: LSTMState) -> LSTMState:
    """One cell update for a (batch, input_dim) slab of inputs."""
    if x.shape[-1] != params.input_dim:
        raise ng.ShapeError(
            f"lstm_step: input dim {x.shape[-1]} != expected {params.input_dim}")
    hd = params.hidden_dim
    z = ng.add(ng.matmul(ng.concat(x, state.h, axis=1), params.W), params.b)
    i = ng.sigmoid(ng.slice_axis(z, 1, 0, hd))
    f = ng.sigmoid(ng.slice_axis(z, 1, hd, 2 * hd))
    o = ng.sigmoid(ng.slice_axis(z, 1, 2 * hd, 3 * hd))
    g = ng.tanh(ng.slice_axis(z, 1, 3 * hd, 4 * hd))
    c_new = ng.add(ng.hadamard(f, state.c), ng.hadamard(i, g))
    h_new = ng.hadamard(o, ng.tanh(c_new))
    return LSTMState(h=h_new, c=c_new)


def gate_logits(params: GateParams, v_c: ng.DiffArray,
                h_f: ng.DiffArray, c_f: ng.DiffArray) -> ng.DiffArray:
    """Skip/compute logits from current coarse features and previous fine state."""
    joint = ng.concat(ng.concat(v_c, h_f, axis=1), c_f, axis=1)
    return ng.add(ng.matmul(joint, params.W), params.b)


def classify(params: ClassifierParams, h: ng.DiffArray) -> ng.DiffArray:
    """Class probabilities from a hidden-state slab; rows sum to 1."""
    return ng.softmax(ng.add(ng.matmul(h, params.W), params.b), axis=1)


# ---------------------------------------------------------------------------
# flat-block serialization (shared with model checkpoints)
# ---------------------------------------------------------------------------

def write_param_blocks(directory: str | Path, blocks: dict[str, np.ndarray],
                       extra_header: dict | None = None) -> None:
    """Write header.json + params.bin under `directory`.

    params.bin is the concatenation of each block as row-major little-endian
    float64; header.json records name, shape and byte offset per block.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / "params.bin", "wb") as fh:
        for name, arr in blocks.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += len(raw)
            fh.write(raw)
    header = {"format": PARAMS_FORMAT, "version": PARAMS_VERSION,
              "blocks": entries, "total_bytes": offset}
    if extra_header:
        header.update(extra_header)
    with open(directory / "header.json", "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)


def read_param_blocks(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`write_param_blocks`; validates sizes and format."""
    directory = Path(directory)
    try:
        with open(directory / "header.json") as fh:
            header = json.load(fh)
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing header.json under {directory}") from exc
    if header.get("format") != PARAMS_FORMAT:
        raise CheckpointError(f"unrecognized params format {header.get('format')!r}")
    if header.get("version") != PARAMS_VERSION:
        raise CheckpointError(f"unsupported params version {header.get('version')!r}")
    raw = (directory / "params.bin").read_bytes()
    if len(raw) != header["total_bytes"]:
        raise CheckpointError(
            f"params.bin holds {len(raw)} bytes, header declares {header['total_bytes']}")
    blocks: dict[str, np.ndarray] = {}
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8
        chunk = raw[entry["offset"]:entry["offset"] + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(
                f"block {entry['name']!r} truncated: wanted {nbytes} bytes at "
                f"offset {entry['offset']}, file has {len(chunk)}")
        blocks[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
    return blocks, header
