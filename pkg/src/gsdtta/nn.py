"""Compact per-point MLP + max-pool classifier with exact reverse-mode gradients.

Architecture (float64 throughout)::

    points (N x 3) -> relu(. W1 + b1) (N x 64) -> relu(. W2 + b2) (N x 128)
                   -> max over points = deep descriptor (128)
                   -> relu(. W3 + b3) (64) -> . W4 + b4 = logits (C)
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .pointcloud import PointCloud

log = logging.getLogger(__name__)

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")
POINT_PARAMS = ("w1", "b1", "w2", "b2")
HEAD_PARAMS = ("w3", "b3", "w4", "b4")
WIDTHS = (64, 128, 64)
BETAS = (0.9, 0.999)
EPS = 1e-8


class NumericError(ArithmeticError):
    pass


class StaleTraceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class ClassifierState:
    params: dict
    m: dict
    v: dict
    step: int = 0

    @property
    def n_classes(self) -> int:
        return self.params["b4"].shape[0]

    @property
    def descriptor_dim(self) -> int:
        return self.params["b2"].shape[0]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ClassifierState":
        return ClassifierState(
            {k: p.copy() for k, p in self.params.items()},
            {k: p.copy() for k, p in self.m.items()},
            {k: p.copy() for k, p in self.v.items()},
            self.step,
        )

    def fresh_optimizer(self) -> "ClassifierState":
        """Same weights with zeroed moments and step counter."""
        return ClassifierState(
            {k: p.copy() for k, p in self.params.items()},
            {k: np.zeros_like(p) for k, p in self.params.items()},
            {k: np.zeros_like(p) for k, p in self.params.items()},
            0,
        )


def init_classifier(n_classes: int = 8, seed: int = 0, zero_head: bool = False) -> ClassifierState:
    rng = np.random.default_rng(seed)
    dims = (3,) + WIDTHS + (n_classes,)
    params = {}
    for layer in range(4):
        fan_in, fan_out = dims[layer], dims[layer + 1]
        gain = 2.0 if layer < 3 else 1.0
        params[f"w{layer + 1}"] = rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))
        params[f"b{layer + 1}"] = np.zeros(fan_out)
    if zero_head:
        params["w4"][:] = 0.0
    return ClassifierState(
        params,
        {k: np.zeros_like(p) for k, p in params.items()},
        {k: np.zeros_like(p) for k, p in params.items()},
        0,
    )


@dataclass(eq=False)
class ForwardTrace:
    """Batched forward results; a single-cloud forward has B = 1."""

    logits: np.ndarray  # B x C
    probabilities: np.ndarray  # B x C
    deep_descriptor: np.ndarray  # B x 128
    step: int
    offsets: np.ndarray = field(repr=False)
    points: np.ndarray = field(repr=False)
    h1: np.ndarray = field(repr=False)
    h2: np.ndarray = field(repr=False)
    argmax: np.ndarray = field(repr=False)  # B x 128 row indices into the stacked points
    z3: np.ndarray = field(repr=False)

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check(name: str, x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite activations in layer {name}")
    return x


def _as_points(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


def forward(state: ClassifierState, clouds) -> ForwardTrace:
    """Run the classifier on one cloud or a sequence of clouds."""
    if isinstance(clouds, PointCloud) or (isinstance(clouds, np.ndarray) and clouds.ndim == 2):
        clouds = [clouds]
    arrays = [_as_points(c) for c in clouds]
    if any(a.shape[0] == 0 for a in arrays):
        raise ValueError("empty cloud")
    sizes = np.array([a.shape[0] for a in arrays])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    pts = np.concatenate(arrays, axis=0) if len(arrays) > 1 else arrays[0]
    p = state.params
    h1 = _check("point1", np.maximum(pts @ p["w1"] + p["b1"], 0.0))
    h2 = _check("point2", np.maximum(h1 @ p["w2"] + p["b2"], 0.0))
    b = len(arrays)
    width = h2.shape[1]
    if np.all(sizes == sizes[0]):
        blocks = h2.reshape(b, sizes[0], width)
        local = np.argmax(blocks, axis=1)
        desc = np.take_along_axis(blocks, local[:, None, :], axis=1)[:, 0, :]
        argmax = local + offsets[:-1, None]
    else:
        argmax = np.empty((b, width), dtype=np.int64)
        for i in range(b):
            argmax[i] = np.argmax(h2[offsets[i] : offsets[i + 1]], axis=0) + offsets[i]
        desc = h2[argmax, np.arange(width)]
    z3 = _check("head1", np.maximum(desc @ p["w3"] + p["b3"], 0.0))
    logits = _check("head2", z3 @ p["w4"] + p["b4"])
    return ForwardTrace(logits, softmax(logits), desc, state.step, offsets, pts, h1, h2, argmax, z3)


def backward(
    state: ClassifierState,
    trace: ForwardTrace,
    loss_grad: np.ndarray,
    want_params: bool = True,
    want_inputs: bool = True,
):
    """Gradients of sum_b <loss_grad[b], logits[b]>.

    Returns ``(param_grads, input_grads)``; ``input_grads`` is a list of
    per-cloud N_b x 3 arrays. Gradients reach only the points that win the
    max-pool in some channel.
    """
    if trace.step != state.step:
        raise StaleTraceError(f"trace from step {trace.step}, state is at step {state.step}")
    p = state.params
    g = np.asarray(loss_grad, dtype=np.float64).reshape(trace.logits.shape)
    grads = {}
    dz3 = (g @ p["w4"].T) * (trace.z3 > 0)
    ddesc = dz3 @ p["w3"].T
    if want_params:
        grads["w4"] = trace.z3.T @ g
        grads["b4"] = g.sum(axis=0)
        grads["w3"] = trace.deep_descriptor.T @ dz3
        grads["b3"] = dz3.sum(axis=0)

    width = trace.argmax.shape[1]
    rows, inv = np.unique(trace.argmax.ravel(), return_inverse=True)
    dh2 = np.zeros((rows.size, width))
    # each (cloud, channel) pair owns one distinct row, so plain assignment is exact
    dh2[inv, np.tile(np.arange(width), trace.argmax.shape[0])] = ddesc.ravel()
    h1r = trace.h1[rows]
    dpre2 = dh2 * (trace.h2[rows] > 0)
    dpre1 = (dpre2 @ p["w2"].T) * (h1r > 0)
    if want_params:
        grads["w2"] = h1r.T @ dpre2
        grads["b2"] = dpre2.sum(axis=0)
        grads["w1"] = trace.points[rows].T @ dpre1
        grads["b1"] = dpre1.sum(axis=0)

    input_grads = None
    if want_inputs:
        full = np.zeros_like(trace.points)
        full[rows] = dpre1 @ p["w1"].T
        input_grads = [full[a:b] for a, b in zip(trace.offsets[:-1], trace.offsets[1:])]
    return (grads if want_params else None), input_grads


def adamw_update(param, grad, m, v, step, lr, weight_decay, betas=BETAS, eps=EPS):
    """One decoupled-weight-decay Adam update; ``step`` is 1-based.

    Returns new ``(param, m, v)`` arrays.
    """
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    param = param * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


def adamw_step(
    state: ClassifierState,
    param_grads: dict,
    lr: float,
    weight_decay: float = 0.0,
    names: Optional[Iterable[str]] = None,
) -> ClassifierState:
    names = tuple(PARAM_NAMES if names is None else names)
    for name in names:
        g = param_grads[name]
        if g.shape != state.params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {state.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step refused")
    new = ClassifierState(dict(state.params), dict(state.m), dict(state.v), state.step + 1)
    for name in names:
        new.params[name], new.m[name], new.v[name] = adamw_update(
            state.params[name], param_grads[name], state.m[name], state.v[name], new.step, lr, weight_decay
        )
        for kind, t in (("parameter", new.params[name]), ("moment", new.m[name]), ("moment", new.v[name])):
            if not np.all(np.isfinite(t)):
                raise NumericError(f"non-finite {kind} for {name} after step {new.step}")
    return new


def predict(state: ClassifierState, clouds: Sequence, batch_size: int = 32) -> np.ndarray:
    out = []
    for i in range(0, len(clouds), batch_size):
        out.append(forward(state, clouds[i : i + batch_size]).predictions)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(state: ClassifierState, clouds: Sequence[PointCloud], batch_size: int = 32) -> float:
    labels = np.array([c.label for c in clouds])
    return float(np.mean(predict(state, clouds, batch_size) == labels))


# ----------------------------------------------------------------------------
# Source training


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    label_smoothing: float = 0.0


def train_source(
    train: Sequence[PointCloud],
    cfg: TrainConfig = TrainConfig(),
    test: Optional[Sequence[PointCloud]] = None,
    n_classes: Optional[int] = None,
):
    """Cross-entropy training with AdamW. Returns ``(state, epoch_log)``."""
    if not 0.0 <= cfg.label_smoothing < 1.0:
        raise ValueError(f"label_smoothing must lie in [0, 1), got {cfg.label_smoothing}")
    if cfg.epochs < 1:
        raise ValueError("no training performed: epochs must be >= 1")
    labels = np.array([c.label for c in train])
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    state = init_classifier(n_classes, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        total, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            trace = forward(state, [train[i] for i in idx])
            y = labels[idx]
            target = np.full(trace.probabilities.shape, cfg.label_smoothing / n_classes)
            target[np.arange(len(idx)), y] += 1.0 - cfg.label_smoothing
            logp = np.log(np.maximum(trace.probabilities, 1e-12))
            loss = float(-np.mean(np.sum(target * logp, axis=1)))
            if not np.isfinite(loss):
                worst = max(float(np.abs(p).max()) for p in state.params.values())
                raise NumericError(f"loss diverged at epoch {epoch}, batch {start // cfg.batch_size}: "
                                   f"loss={loss}, max|param|={worst:.3g}")
            grad = trace.probabilities - target
            grads, _ = backward(state, trace, grad / len(idx), want_inputs=False)
            state = adamw_step(state, grads, cfg.lr, cfg.weight_decay)
            total += loss * len(idx)
            correct += int(np.sum(trace.predictions == y))
        row = {"epoch": epoch, "loss": total / len(train), "train_acc": correct / len(train)}
        if test is not None:
            row["test_acc"] = accuracy(state, test, cfg.batch_size)
        log.info("epoch %d %s", epoch, row)
        history.append(row)
    return state, history


# ----------------------------------------------------------------------------
# Checkpoints
#
# Layout (all integers little-endian):
#   0   8 bytes   magic b"GSDTTACK"
#   8   uint32    format version
#   12  uint32    header length H
#   16  H bytes   UTF-8 JSON header: {"arch": {...}, "step": int,
#                 "tensors": [{"name": str, "shape": [..]}, ...]}
#   ..  tensors in header order, C-order little-endian float64;
#       parameters first, then "m/<name>", then "v/<name>"

MAGIC = b"GSDTTACK"
CHECKPOINT_VERSION = 1


def save_checkpoint(state: ClassifierState, path) -> None:
    tensors = [(n, state.params[n]) for n in PARAM_NAMES]
    tensors += [(f"m/{n}", state.m[n]) for n in PARAM_NAMES]
    tensors += [(f"v/{n}", state.v[n]) for n in PARAM_NAMES]
    header = {
        "arch": {"input": 3, "widths": list(WIDTHS), "n_classes": state.n_classes},
        "step": state.step,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> ClassifierState:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a classifier checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(data[16 : 16 + hlen])
    if header["arch"]["widths"] != list(WIDTHS) or header["arch"]["input"] != 3:
        raise CheckpointError(f"{path}: architecture {header['arch']} does not match {WIDTHS}")
    pos = 16 + hlen
    found = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        found[spec["name"]] = arr.reshape(spec["shape"])
        pos += 8 * count
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return ClassifierState(
        {n: found[n] for n in PARAM_NAMES},
        {n: found[f"m/{n}"] for n in PARAM_NAMES},
        {n: found[f"v/{n}"] for n in PARAM_NAMES},
        int(header["step"]),
    )
