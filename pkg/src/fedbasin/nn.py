"""Minimal dense neural networks with manual backpropagation.

Everything here operates on flat float64 parameter vectors so that models can
be averaged, interpolated and checkpointed as plain arrays. A ``ModelSpec``
describes the architecture (layer widths, hidden activations, loss kind) and
carries a stable fingerprint; a ``ParamVector`` is a flat weight vector tagged
with the fingerprint of the spec it belongs to.

Parameter layout: for each layer, the weight matrix (fan_in x fan_out,
row-major) followed by the bias vector. Hidden activations apply after every
affine layer except the last; the last layer emits raw outputs (logits for
cross-entropy, predictions for MSE).

All functions are pure except ``sgd_step``, which mutates only the optimizer
state and parameter arrays passed to it. Nothing here keeps shared mutable
state, so concurrent use is safe as long as each ParamVector/OptimizerState
is owned by one thread at a time.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"FIMA"
CHECKPOINT_VERSION = 1

VALID_ACTIVATIONS = ("relu", "identity")
VALID_LOSSES = ("mse", "softmax_cross_entropy")


def _fingerprint(layer_widths: tuple[int, ...], activations: tuple[str, ...],
                 loss_kind: str) -> int:
    blob = repr((tuple(layer_widths), tuple(activations), loss_kind)).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: widths, hidden activations, loss kind.

    ``activations`` has one entry per hidden layer (``len(layer_widths) - 2``
    entries); a single-affine-layer model has none. The fingerprint is a pure
    function of the other fields and is used to reject mixing parameter
    vectors across architectures.
    """

    layer_widths: tuple[int, ...]
    activations: tuple[str, ...]
    loss_kind: str
    fingerprint: int = field(init=False)

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ValueError(f"need at least input and output widths, got {widths}")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        acts = tuple(self.activations)
        n_hidden = len(widths) - 2
        if len(acts) != n_hidden:
            raise ValueError(f"expected {n_hidden} activations for widths {widths}, got {len(acts)}")
        for a in acts:
            if a not in VALID_ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.loss_kind not in VALID_LOSSES:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "fingerprint", _fingerprint(widths, acts, self.loss_kind))

    @classmethod
    def mlp(cls, layer_widths: Sequence[int], activation: str = "relu",
            loss_kind: str = "mse") -> "ModelSpec":
        """Spec with the same activation on every hidden layer."""
        widths = tuple(int(w) for w in layer_widths)
        return cls(widths, (activation,) * max(len(widths) - 2, 0), loss_kind)

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_widths[:-1], self.layer_widths[1:]))

    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_widths[:-1], self.layer_widths[1:]))


@dataclass
class ParamVector:
    """Flat float64 weight vector plus the fingerprint of its ModelSpec."""

    values: np.ndarray
    spec_fingerprint: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains NaN/Inf")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec_fingerprint)

    def check_spec(self, spec: ModelSpec) -> None:
        if self.spec_fingerprint != spec.fingerprint:
            raise ValueError(
                f"fingerprint mismatch: params {self.spec_fingerprint:#x} vs spec {spec.fingerprint:#x}")
        if self.values.size != spec.n_params:
            raise ValueError(f"expected {spec.n_params} parameters, got {self.values.size}")


@dataclass(frozen=True)
class LrSchedule:
    """Round-indexed learning-rate schedule.

    Variants:
      constant(lr)                      -- fixed lr
      exponential(lr0, gamma)           -- lr0 * (1 - gamma)**round
      cyclic(lr_hi, lr_lo, period)      -- log-linear hi->lo inside each
                                           period, resetting at multiples of
                                           the period (round % period == 0
                                           gives lr_hi, period-1 gives lr_lo)
      epoch_decay(lr, epochs0, drop_every) -- lr stays fixed; the local epoch
                                           count shrinks by one every
                                           ``drop_every`` rounds instead
    """

    variant: str
    lr: float = 0.0
    gamma: float = 0.0
    lr_lo: float = 0.0
    period: int = 1
    epochs0: int = 1
    drop_every: int = 1

    def __post_init__(self) -> None:
        if self.variant not in ("constant", "exponential", "cyclic", "epoch_decay"):
            raise ValueError(f"unknown schedule variant {self.variant!r}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.variant == "exponential" and not (0.0 <= self.gamma < 1.0):
            raise ValueError("exponential rate must satisfy 0 <= gamma < 1")
        if self.variant == "cyclic":
            if self.lr_lo <= 0:
                raise ValueError("cyclic lr_lo must be > 0")
            if self.period < 1:
                raise ValueError("cyclic period must be >= 1")
        if self.variant == "epoch_decay":
            if self.epochs0 < 1:
                raise ValueError("epochs0 must be >= 1")
            if self.drop_every < 1:
                raise ValueError("drop_every must be >= 1")

    @classmethod
    def constant(cls, lr: float) -> "LrSchedule":
        return cls("constant", lr=lr)

    @classmethod
    def exponential(cls, lr0: float, gamma: float) -> "LrSchedule":
        return cls("exponential", lr=lr0, gamma=gamma)

    @classmethod
    def cyclic(cls, lr_hi: float, lr_lo: float, period: int) -> "LrSchedule":
        return cls("cyclic", lr=lr_hi, lr_lo=lr_lo, period=period)

    @classmethod
    def epoch_decay(cls, lr: float, epochs0: int, drop_every: int) -> "LrSchedule":
        return cls("epoch_decay", lr=lr, epochs0=epochs0, drop_every=drop_every)


def schedule_lr(sched: LrSchedule, round_idx: int) -> float:
    """Learning rate in effect for a given round (round_idx >= 0)."""
    if round_idx < 0:
        raise ValueError("round index must be >= 0")
    if sched.variant == "constant" or sched.variant == "epoch_decay":
        return sched.lr
    if sched.variant == "exponential":
        return sched.lr * (1.0 - sched.gamma) ** round_idx
    # cyclic: interpolate log(lr) from hi at phase 0 to lo at phase period-1
    pos = round_idx % sched.period
    phase = pos / (sched.period - 1) if sched.period > 1 else 0.0
    return float(np.exp(np.log(sched.lr) + phase * (np.log(sched.lr_lo) - np.log(sched.lr))))


def effective_epochs(sched: LrSchedule, round_idx: int, default_epochs: int) -> int:
    """Local epoch count for a round; only epoch_decay alters it.

    epoch_decay drops one epoch every ``drop_every`` rounds, never below 1.
    """
    if sched.variant != "epoch_decay":
        return default_epochs
    return max(1, sched.epochs0 - round_idx // sched.drop_every)


@dataclass
class OptimizerState:
    """SGD momentum buffer; one per trained ParamVector."""

    momentum_buffer: np.ndarray
    momentum_coeff: float

    def __post_init__(self) -> None:
        self.momentum_buffer = np.asarray(self.momentum_buffer, dtype=np.float64).ravel()
        if not (0.0 <= self.momentum_coeff < 1.0):
            raise ValueError("momentum coefficient must be in [0, 1)")

    @classmethod
    def zeros(cls, n_params: int, momentum_coeff: float) -> "OptimizerState":
        return cls(np.zeros(n_params), momentum_coeff)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Deterministic init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0."""
    rng = np.random.default_rng([seed, spec.fingerprint])
    chunks = []
    for fan_in, fan_out in spec.layer_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(chunks), spec.fingerprint)


def unpack_params(params: ParamVector, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of the flat vector as per-layer (weight, bias) arrays."""
    params.check_spec(spec)
    out = []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes():
        w = params.values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params.values[offset:offset + fan_out]
        offset += fan_out
        out.append((w, b))
    return out


def pack_params(spec: ModelSpec, layers: Iterable[tuple[np.ndarray, np.ndarray]]) -> ParamVector:
    """Inverse of unpack_params."""
    chunks = []
    for (w, b), (fan_in, fan_out) in zip(layers, spec.layer_shapes()):
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise ValueError(f"layer shape mismatch: got {w.shape}/{b.shape}, want ({fan_in},{fan_out})")
        chunks.append(w.ravel())
        chunks.append(b)
    return ParamVector(np.concatenate(chunks), spec.fingerprint)


def _forward_trace(params: ParamVector, spec: ModelSpec, inputs: np.ndarray):
    """Forward pass keeping pre-activations for backprop."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"inputs must be (n, {spec.input_dim}), got {x.shape}")
    if np.isnan(x).any():
        raise ValueError("NaN in inputs")
    params.check_spec(spec)
    layers = unpack_params(params, spec)
    activations = [x]
    pre_acts = []
    h = x
    for layer_idx, (w, b) in enumerate(layers):
        z = h @ w + b
        pre_acts.append(z)
        if layer_idx < len(layers) - 1:
            act = spec.activations[layer_idx]
            h = np.maximum(z, 0.0) if act == "relu" else z
        else:
            h = z
        activations.append(h)
    return layers, activations, pre_acts


def forward(params: ParamVector, spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    """Network outputs, one row per input row. Pure; params untouched."""
    return _forward_trace(params, spec, inputs)[1][-1]


def _check_batch(spec: ModelSpec, inputs: np.ndarray, targets: np.ndarray):
    x = np.asarray(inputs, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty batch")
    if spec.loss_kind == "mse":
        y = np.asarray(targets, dtype=np.float64)
        if y.shape != (x.shape[0], spec.output_dim):
            raise ValueError(f"mse targets must be (n, {spec.output_dim}), got {y.shape}")
    else:
        y = np.asarray(targets)
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ValueError("cross-entropy targets must be a vector of class indices")
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= spec.output_dim:
            raise ValueError("class index out of range")
    return x, y


def loss_and_grad(params: ParamVector, spec: ModelSpec,
                  batch: tuple[np.ndarray, np.ndarray]) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its exact gradient via backpropagation.

    MSE: mean over samples of the squared residual summed over output
    coordinates. Cross-entropy: mean over samples of -log softmax(logits)[y].
    """
    inputs, targets = batch
    x, y = _check_batch(spec, inputs, targets)
    layers, acts, pre_acts = _forward_trace(params, spec, x)
    out = acts[-1]
    n = x.shape[0]

    if spec.loss_kind == "mse":
        resid = out - y
        loss = float(np.sum(resid * resid) / n)
        dout = 2.0 * resid / n
    else:
        shifted = out - out.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(logsumexp - shifted[np.arange(n), y]))
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        dout = probs
        dout[np.arange(n), y] -= 1.0
        dout /= n

    grads = []
    delta = dout
    for layer_idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[layer_idx]
        h_prev = acts[layer_idx]
        grads.append((h_prev.T @ delta, delta.sum(axis=0)))
        if layer_idx > 0:
            delta = delta @ w.T
            if spec.activations[layer_idx - 1] == "relu":
                delta = delta * (pre_acts[layer_idx - 1] > 0.0)
    grads.reverse()
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return loss, flat


def sgd_step(params: ParamVector, grad: np.ndarray, lr: float,
             state: OptimizerState) -> None:
    """In-place heavy-ball step: buf <- m*buf + g; params <- params - lr*buf."""
    g = np.asarray(grad, dtype=np.float64).ravel()
    if g.size != params.values.size or state.momentum_buffer.size != g.size:
        raise ValueError("gradient/buffer length mismatch")
    state.momentum_buffer *= state.momentum_coeff
    state.momentum_buffer += g
    params.values -= lr * state.momentum_buffer


def evaluate(params: ParamVector, spec: ModelSpec, features: np.ndarray,
             labels: np.ndarray) -> tuple[float, float]:
    """(loss, top-1 accuracy) on a labeled set; one-hot targets for MSE mode."""
    out = forward(params, spec, features)
    labels = np.asarray(labels).astype(np.int64)
    n = features.shape[0]
    if spec.loss_kind == "mse":
        onehot = np.zeros((n, spec.output_dim))
        onehot[np.arange(n), labels] = 1.0
        resid = out - onehot
        loss = float(np.sum(resid * resid) / n)
    else:
        shifted = out - out.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(logsumexp - shifted[np.arange(n), labels]))
    acc = float(np.mean(np.argmax(out, axis=1) == labels))
    return loss, acc


def save_checkpoint(path: str | Path, params: ParamVector) -> None:
    """Write the binary checkpoint: magic, version u16, fingerprint u64,
    count u64, little-endian float64 values. Round-trips bit-exactly."""
    header = CHECKPOINT_MAGIC + struct.pack(
        "<HQQ", CHECKPOINT_VERSION, params.spec_fingerprint, params.values.size)
    data = params.values.astype("<f8").tobytes()
    Path(path).write_bytes(header + data)


def load_checkpoint(path: str | Path) -> ParamVector:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, fingerprint, count = struct.unpack("<HQQ", raw[4:4 + 18])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    values = np.frombuffer(raw[22:], dtype="<f8")
    if values.size != count:
        raise ValueError(f"{path}: expected {count} values, found {values.size}")
    return ParamVector(values.astype(np.float64), fingerprint)
