"""Minimal dense+batchnorm classifier with exact manual gradients.

The forward pass caches enough to run one reverse sweep that yields
gradients with respect to every parameter role and to the inputs in a
single pass. All array math is dtype-generic: running the same code with
complex-perturbed parameters gives machine-precision directional
derivatives (used for unrolled second-order attack objectives).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import (
    DegenerateBatchError,
    DimensionError,
    InvalidDistributionError,
    NumericError,
    UnsupportedLossError,
)
from .params import IndexMap, ParamDelta, ParamVector, ALL_ROLES

BN_EPS = 1e-5

LAYER_KINDS = ("dense", "batchnorm", "relu", "softmax_head")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width_in: int
    width_out: int
    tap: bool = False


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise DimensionError("model needs at least one layer")
        heads = [i for i, l in enumerate(self.layers) if l.kind == "softmax_head"]
        if heads != [len(self.layers) - 1]:
            raise DimensionError("exactly one softmax head required, placed last")
        if not any(l.kind == "batchnorm" for l in self.layers):
            raise DimensionError("at least one batchnorm layer required")
        prev = None
        for i, l in enumerate(self.layers):
            if l.kind not in LAYER_KINDS:
                raise DimensionError(f"unknown layer kind {l.kind!r}")
            if l.width_in <= 0 or l.width_out <= 0:
                raise DimensionError("layer widths must be positive")
            if l.kind in ("batchnorm", "relu", "softmax_head") and l.width_in != l.width_out:
                raise DimensionError(f"{l.kind} layer must preserve width")
            if prev is not None and l.width_in != prev:
                raise DimensionError(
                    f"layer {i} input width {l.width_in} != previous output {prev}"
                )
            if l.kind == "softmax_head" and l.tap:
                raise DimensionError("softmax head cannot be tapped")
            prev = l.width_out

    @property
    def input_dim(self) -> int:
        return self.layers[0].width_in

    @property
    def num_classes(self) -> int:
        return self.layers[-1].width_out

    def tapped_layers(self) -> tuple[int, ...]:
        return tuple(i for i, l in enumerate(self.layers) if l.tap)

    def bn_layers(self) -> tuple[int, ...]:
        return tuple(i for i, l in enumerate(self.layers) if l.kind == "batchnorm")

    def index_map(self) -> IndexMap:
        sizes = []
        for i, l in enumerate(self.layers):
            if l.kind == "dense":
                sizes.append((i, "weight", l.width_in * l.width_out))
                sizes.append((i, "bias", l.width_out))
            elif l.kind == "batchnorm":
                c = l.width_out
                sizes.append((i, "bn_gamma", c))
                sizes.append((i, "bn_beta", c))
                sizes.append((i, "bn_run_mean", c))
                sizes.append((i, "bn_run_var", c))
        return IndexMap.build(sizes)

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"kind": l.kind, "in": l.width_in, "out": l.width_out, "tap": l.tap}
                for l in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        layers = tuple(
            LayerSpec(
                kind=str(e["kind"]),
                width_in=int(e["in"]),
                width_out=int(e["out"]),
                tap=bool(e.get("tap", False)),
            )
            for e in doc["layers"]
        )
        return cls(layers=layers)


def mlp_spec(input_dim: int, hidden: list[int], num_classes: int,
             tap_hidden: bool = True) -> ModelSpec:
    """dense -> batchnorm -> relu blocks, then a dense head and softmax."""
    layers: list[LayerSpec] = []
    prev = input_dim
    for h in hidden:
        layers.append(LayerSpec("dense", prev, h, tap=tap_hidden))
        layers.append(LayerSpec("batchnorm", h, h))
        layers.append(LayerSpec("relu", h, h))
        prev = h
    layers.append(LayerSpec("dense", prev, num_classes))
    layers.append(LayerSpec("softmax_head", num_classes, num_classes))
    return ModelSpec(layers=tuple(layers))


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    index = spec.index_map()
    data = np.zeros(index.size)
    for i, l in enumerate(spec.layers):
        if l.kind == "dense":
            w = rng.normal(0.0, np.sqrt(2.0 / l.width_in), size=(l.width_in, l.width_out))
            data[index.slice_of(i, "weight")] = w.reshape(-1)
        elif l.kind == "batchnorm":
            data[index.slice_of(i, "bn_gamma")] = 1.0
            data[index.slice_of(i, "bn_run_var")] = 1.0
    return ParamVector(data=data, index=index)


@dataclass
class ForwardTrace:
    """Everything the backward pass and the losses need."""

    logits: np.ndarray                      # [B, K]
    probs: np.ndarray                       # [B, K]
    taps: dict[int, np.ndarray]             # layer index -> [B, M]
    bn_stats: dict[int, tuple[np.ndarray, np.ndarray]]  # batch (mean, var) in train mode
    mode: str
    inputs: np.ndarray                      # [B, D]
    _caches: list = field(repr=False, default_factory=list)
    _pdata: np.ndarray | None = field(repr=False, default=None)  # params the pass used

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stable under max-shift."""
    logits = np.asarray(logits)
    real = logits.real if np.iscomplexobj(logits) else logits
    if not np.all(np.isfinite(real)):
        raise NumericError("softmax input contains non-finite values")
    shifted = logits - real.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    if not np.iscomplexobj(p):
        # keep rows strictly positive under float underflow
        p = np.maximum(p, 1e-300)
    return p


def entropy(probs: np.ndarray) -> np.ndarray:
    """Per-row Shannon entropy (natural log) of probability rows."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise DimensionError("entropy expects a [B, K] array")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-5) or np.any(probs < 0):
        raise InvalidDistributionError("rows must be probability distributions")
    p = np.clip(probs, 1e-300, None)
    return -(probs * np.log(p)).sum(axis=1)


def bn_batch_statistics(activations: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel batch mean and population variance (divide by B)."""
    activations = np.asarray(activations)
    if activations.ndim != 2:
        raise DimensionError("expected a [B, C] activation array")
    if activations.shape[0] < 2:
        raise DegenerateBatchError("batch statistics need at least 2 samples")
    mean = activations.mean(axis=0)
    var = ((activations - mean) ** 2).mean(axis=0)
    return mean, var


def _batch_inputs(batch) -> np.ndarray:
    x = getattr(batch, "inputs", batch)
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError("batch inputs must be a [B, D] array")
    return x


def forward(spec: ModelSpec, params: ParamVector, batch, mode: str = "eval",
            _data: np.ndarray | None = None) -> ForwardTrace:
    """Run the network; ``mode`` selects batch vs running BN statistics.

    ``_data`` optionally overrides the parameter storage (same index map);
    it may be complex for directional-derivative passes.
    """
    if mode not in ("train", "eval"):
        raise DimensionError(f"unknown forward mode {mode!r}")
    x = _batch_inputs(batch)
    if x.shape[1] != spec.input_dim:
        raise DimensionError(
            f"batch width {x.shape[1]} != model input width {spec.input_dim}"
        )
    if mode == "train" and x.shape[0] < 2:
        raise DegenerateBatchError("train-stats mode needs a batch of >= 2 samples")
    data = params.data if _data is None else _data
    index = params.index

    a = x
    caches: list = []
    taps: dict[int, np.ndarray] = {}
    bn_stats: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    logits = None
    for i, l in enumerate(spec.layers):
        if l.kind == "dense":
            w = data[index.slice_of(i, "weight")].reshape(l.width_in, l.width_out)
            b = data[index.slice_of(i, "bias")]
            caches.append(("dense", a))
            a = a @ w + b
        elif l.kind == "batchnorm":
            gamma = data[index.slice_of(i, "bn_gamma")]
            beta = data[index.slice_of(i, "bn_beta")]
            if mode == "train":
                mu = a.mean(axis=0)
                var = ((a - mu) ** 2).mean(axis=0)
                real_mu = mu.real if np.iscomplexobj(mu) else mu
                bn_stats[i] = (np.asarray(real_mu, dtype=np.float64),
                               np.asarray(var.real if np.iscomplexobj(var) else var,
                                          dtype=np.float64))
            else:
                mu = data[index.slice_of(i, "bn_run_mean")]
                var = data[index.slice_of(i, "bn_run_var")]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (a - mu) * inv
            caches.append(("batchnorm", a, xhat, inv, gamma))
            a = gamma * xhat + beta
        elif l.kind == "relu":
            caches.append(("relu", a))
            a = np.where((a.real if np.iscomplexobj(a) else a) > 0, a, 0.0)
        elif l.kind == "softmax_head":
            logits = a
            caches.append(("softmax_head", None))
        if l.tap:
            taps[i] = a
    probs = softmax(logits)
    if not np.iscomplexobj(probs):
        if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6) or np.any(probs <= 0):
            raise InvalidDistributionError("forward produced invalid probability rows")
    return ForwardTrace(
        logits=logits, probs=probs, taps=taps, bn_stats=bn_stats,
        mode=mode, inputs=x, _caches=caches, _pdata=data,
    )


def backward(spec: ModelSpec, params: ParamVector, trace: ForwardTrace,
             d_logits: np.ndarray | None,
             d_taps: dict[int, np.ndarray] | None = None,
             ) -> tuple[np.ndarray, np.ndarray]:
    """Reverse sweep; returns (full parameter gradient, input gradient).

    ``d_logits`` is the loss gradient at the softmax head's input;
    ``d_taps`` injects additional gradients at tapped layer outputs.
    Running-statistic gradients are exact in eval mode and zero in train
    mode (batch stats do not read them).
    """
    d_taps = d_taps or {}
    B = trace.batch_size
    pdata = params.data if trace._pdata is None else trace._pdata
    dtype = np.complex128 if (
        np.iscomplexobj(pdata)
        or np.iscomplexobj(trace.logits)
        or (d_logits is not None and np.iscomplexobj(d_logits))
    ) else np.float64
    grad_vec = np.zeros(params.index.size, dtype=dtype)
    if d_logits is None:
        flowing = np.zeros((B, spec.num_classes), dtype=dtype)
    else:
        flowing = np.array(d_logits, dtype=dtype)

    index = params.index
    for i in range(len(spec.layers) - 1, -1, -1):
        l = spec.layers[i]
        cache = trace._caches[i]
        if l.kind == "softmax_head":
            continue  # losses hand us d_logits directly
        if i in d_taps:
            flowing = flowing + d_taps[i]
        if l.kind == "dense":
            a_in = cache[1]
            wmat = pdata[index.slice_of(i, "weight")].reshape(l.width_in, l.width_out)
            grad_vec[index.slice_of(i, "weight")] += (a_in.T @ flowing).reshape(-1)
            grad_vec[index.slice_of(i, "bias")] += flowing.sum(axis=0)
            flowing = flowing @ wmat.T
        elif l.kind == "batchnorm":
            _, a_in, xhat, inv, gamma = cache
            dxhat = flowing * gamma
            grad_vec[index.slice_of(i, "bn_gamma")] += (flowing * xhat).sum(axis=0)
            grad_vec[index.slice_of(i, "bn_beta")] += flowing.sum(axis=0)
            if trace.mode == "train":
                dvar = -0.5 * (inv ** 2) * (dxhat * xhat).sum(axis=0)
                dmu = -(inv * dxhat.sum(axis=0))
                centered = xhat / inv
                flowing = dxhat * inv + dvar * 2.0 * centered / B + dmu / B
            else:
                grad_vec[index.slice_of(i, "bn_run_mean")] += -(dxhat * inv).sum(axis=0)
                grad_vec[index.slice_of(i, "bn_run_var")] += (
                    -0.5 * (inv ** 2) * (dxhat * xhat).sum(axis=0)
                )
                flowing = dxhat * inv
        elif l.kind == "relu":
            a_in = cache[1]
            mask = (a_in.real if np.iscomplexobj(a_in) else a_in) > 0
            flowing = flowing * mask
    if -1 in d_taps:  # gradient injected directly at the network input
        flowing = flowing + d_taps[-1]
    return grad_vec, flowing


class LossEval:
    """Loss value plus its gradients at the trace's attachment points."""

    __slots__ = ("value", "d_logits", "d_taps")

    def __init__(self, value, d_logits=None, d_taps=None):
        self.value = value
        self.d_logits = d_logits
        self.d_taps = d_taps


class LossFn(Protocol):
    name: str

    def evaluate(self, trace: ForwardTrace) -> LossEval: ...


def _check_loss(loss) -> None:
    if not hasattr(loss, "evaluate"):
        raise UnsupportedLossError(f"{loss!r} is not a registered loss")


def loss_value(spec: ModelSpec, params: ParamVector, batch, loss,
               mode: str = "eval") -> float:
    _check_loss(loss)
    trace = forward(spec, params, batch, mode=mode)
    return float(loss.evaluate(trace).value)


def grad_params(spec: ModelSpec, params: ParamVector, batch, loss,
                mask: frozenset[str] = ALL_ROLES, mode: str = "eval",
                ) -> tuple[ParamDelta, float]:
    """Exact gradient of the mean batch loss w.r.t. masked parameters."""
    _check_loss(loss)
    trace = forward(spec, params, batch, mode=mode)
    ev = loss.evaluate(trace)
    gvec, _ = backward(spec, params, trace, ev.d_logits, ev.d_taps)
    return ParamDelta.from_vector(gvec.real, params.index, frozenset(mask)), float(ev.value)


def grad_inputs(spec: ModelSpec, params: ParamVector, batch, loss,
                mode: str = "eval") -> tuple[np.ndarray, float]:
    """Exact gradient of the mean batch loss w.r.t. the inputs."""
    _check_loss(loss)
    trace = forward(spec, params, batch, mode=mode)
    ev = loss.evaluate(trace)
    _, dx = backward(spec, params, trace, ev.d_logits, ev.d_taps)
    return dx.real.copy(), float(ev.value)


def predict(spec: ModelSpec, params: ParamVector, batch, mode: str = "eval",
            ) -> np.ndarray:
    """Argmax class per sample."""
    trace = forward(spec, params, batch, mode=mode)
    return np.argmax(trace.probs, axis=1)
