"""Central finite-difference verification of every registered loss.

Checks analytic gradients with respect to both inputs and parameters on a
small net. Used by the ``gradcheck`` CLI subcommand and the acceptance
suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attack import BenignPool, ConfusionTracker, ble_update_mapping
from .losses import (
    BalancedLowEntropyLoss,
    BnShiftLoss,
    CrossEntropyLoss,
    DiaUnrolledLoss,
    EntropyLoss,
    GaussianKlLoss,
    MaxCrossEntropyLoss,
    MomentMatchLoss,
    NegativeEntropyLoss,
    NotchHighEntropyLoss,
)
from .network import ModelSpec, backward, forward, init_params, mlp_spec
from .params import ALL_ROLES, ParamVector
from .seeding import rng_for

FD_STEP = 1e-4
TOLERANCE = 1e-4
REL_FLOOR = 1e-6


@dataclass(frozen=True)
class GradCheckResult:
    loss: str
    mode: str
    max_rel_params: float
    max_rel_inputs: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return (self.max_rel_params < self.tolerance
                and self.max_rel_inputs < self.tolerance)


def _rel(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), REL_FLOOR)
    return float((np.abs(analytic - fd) / denom).max())


def _loss_grads(spec, params, inputs, loss, mode):
    trace = forward(spec, params, inputs, mode=mode)
    ev = loss.evaluate(trace)
    gvec, dx = backward(spec, params, trace, ev.d_logits, ev.d_taps)
    return float(ev.value), gvec.real, dx.real


def check_trace_loss(spec: ModelSpec, params: ParamVector, inputs: np.ndarray,
                     loss, mode: str, step: float = FD_STEP) -> GradCheckResult:
    _, g_params, g_inputs = _loss_grads(spec, params, inputs, loss, mode)

    def value_at(data: np.ndarray, x: np.ndarray) -> float:
        trace = forward(spec, params.with_data(data), x, mode=mode)
        return float(loss.evaluate(trace).value)

    fd_params = np.zeros_like(g_params)
    for j in range(params.index.size):
        up, down = params.data.copy(), params.data.copy()
        up[j] += step
        down[j] -= step
        fd_params[j] = (value_at(up, inputs) - value_at(down, inputs)) / (2 * step)

    fd_inputs = np.zeros_like(g_inputs)
    flat = inputs.reshape(-1)
    for j in range(flat.shape[0]):
        up, down = flat.copy(), flat.copy()
        up[j] += step
        down[j] -= step
        fd_inputs.reshape(-1)[j] = (
            value_at(params.data, up.reshape(inputs.shape))
            - value_at(params.data, down.reshape(inputs.shape))
        ) / (2 * step)

    return GradCheckResult(
        loss=loss.name, mode=mode,
        max_rel_params=_rel(g_params, fd_params),
        max_rel_inputs=_rel(g_inputs, fd_inputs),
        tolerance=TOLERANCE,
    )


def check_dia(spec: ModelSpec, params: ParamVector, poison: np.ndarray,
              benign: np.ndarray, benign_labels: np.ndarray,
              inner_lr: float = 0.1, step: float = FD_STEP) -> GradCheckResult:
    loss = DiaUnrolledLoss(benign, benign_labels, inner_lr, spec)
    _, g_poison, g_params = loss.grads(params, poison)

    fd_params = np.zeros_like(g_params)
    for j in range(params.index.size):
        up, down = params.data.copy(), params.data.copy()
        up[j] += step
        down[j] -= step
        fd_params[j] = (
            loss.value(params.with_data(up), poison)
            - loss.value(params.with_data(down), poison)
        ) / (2 * step)

    fd_poison = np.zeros_like(g_poison)
    flat = poison.reshape(-1)
    for j in range(flat.shape[0]):
        up, down = flat.copy(), flat.copy()
        up[j] += step
        down[j] -= step
        fd_poison.reshape(-1)[j] = (
            loss.value(params, up.reshape(poison.shape))
            - loss.value(params, down.reshape(poison.shape))
        ) / (2 * step)

    return GradCheckResult(
        loss=loss.name, mode="train",
        max_rel_params=_rel(g_params, fd_params),
        max_rel_inputs=_rel(g_poison, fd_poison),
        tolerance=TOLERANCE,
    )


def run_suite(seed: int = 0) -> list[GradCheckResult]:
    """Check all registered losses on a 3-class, 8-unit net."""
    rng = rng_for(seed, "gradcheck")
    spec = mlp_spec(6, [8], 3)
    params = init_params(spec, rng)
    inputs = rng.uniform(0.1, 0.9, size=(10, 6))
    labels = rng.integers(0, 3, size=10)
    pool_inputs = rng.uniform(0.1, 0.9, size=(12, 6))
    pool_labels = np.tile(np.arange(3), 4)
    pool = BenignPool(pool_inputs, pool_labels, num_classes=3)

    k = spec.num_classes
    targets = rng.dirichlet(np.ones(k), size=10)
    tracker = ConfusionTracker(k)
    ble_update_mapping(tracker, rng.integers(0, k, size=30),
                       rng.integers(0, k, size=30))
    shift = {
        layer: np.sign(rng.normal(size=2 * spec.layers[layer].width_in))
        for layer in spec.bn_layers()
    }
    moments = pool.moments(spec, params, spec.tapped_layers())

    cases = [
        (EntropyLoss(), "eval"),
        (EntropyLoss(), "train"),
        (CrossEntropyLoss(targets), "eval"),
        (CrossEntropyLoss(targets), "train"),
        (NotchHighEntropyLoss(labels, k), "eval"),
        (BalancedLowEntropyLoss(labels, tracker.mapping, k, gamma=0.1), "eval"),
        (BnShiftLoss(shift, spec), "eval"),
        (MaxCrossEntropyLoss(labels, k), "eval"),
        (NegativeEntropyLoss(), "eval"),
        (MomentMatchLoss(moments, beta=0.5), "eval"),
        (GaussianKlLoss(moments), "eval"),
    ]
    results = [check_trace_loss(spec, params, inputs, loss, mode)
               for loss, mode in cases]
    results.append(check_dia(spec, params, poison=inputs[:4], benign=inputs[4:],
                             benign_labels=labels[4:]))
    return results
