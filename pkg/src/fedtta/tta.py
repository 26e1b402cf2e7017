"""Per-client test-time adaptation on incoming unlabeled batches.

Methods: ``none`` (frozen), ``bn-stats`` (running-statistic refresh),
``tent`` (entropy minimization over batch-norm affine parameters), and
``cotta-lite`` (mean teacher with augmentation-averaged pseudo-labels and
stochastic restore). Adaptation never reads labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import Batch
from .errors import ConfigError, DegenerateBatchError
from .losses import CrossEntropyLoss, EntropyLoss
from .network import ModelSpec, backward, forward
from .params import (
    ALL_ROLES,
    BN_AFFINE_ROLES,
    RUNNING_STAT_ROLES,
    TRAINABLE_ROLES,
    ParamDelta,
    ParamVector,
    delta_between,
)

TTA_METHODS = ("none", "bn-stats", "tent", "cotta-lite")

BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class TtaConfig:
    method: str = "tent"
    learning_rate: float = 0.1
    steps_per_batch: int = 1
    bn_momentum: float = BN_MOMENTUM
    teacher_decay: float = 0.99
    restore_prob: float = 0.01
    aug_noise: float = 0.05

    def __post_init__(self) -> None:
        if self.method not in TTA_METHODS:
            raise ConfigError(f"unknown TTA method {self.method!r}")
        if self.method in ("tent", "cotta-lite") and self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive for gradient TTA")
        if not 0.0 < self.teacher_decay < 1.0:
            raise ConfigError("teacher EMA decay must lie in (0, 1)")
        if not 0.0 <= self.restore_prob <= 1.0:
            raise ConfigError("restore probability must lie in [0, 1]")
        if self.steps_per_batch < 0:
            raise ConfigError("steps per batch must be >= 0")

    def delta_mask(self) -> frozenset[str]:
        """Roles this method's update may populate."""
        if self.method == "none":
            return frozenset()
        if self.method == "bn-stats":
            return frozenset(RUNNING_STAT_ROLES)
        if self.method == "tent":
            return frozenset(BN_AFFINE_ROLES | RUNNING_STAT_ROLES)
        return frozenset(ALL_ROLES)

    def trainable_mask(self) -> frozenset[str]:
        if self.method == "tent":
            return frozenset(BN_AFFINE_ROLES)
        if self.method == "cotta-lite":
            return frozenset(TRAINABLE_ROLES)
        return frozenset()


@dataclass
class TtaState:
    params: ParamVector
    teacher: ParamVector | None = None     # cotta-lite only
    source: ParamVector | None = None      # pristine copy, never mutated
    step_count: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


def init_state(params: ParamVector, config: TtaConfig,
               rng: np.random.Generator | None = None) -> TtaState:
    rng = rng if rng is not None else np.random.default_rng(0)
    if config.method == "cotta-lite":
        return TtaState(params=params, teacher=params, source=params, rng=rng)
    return TtaState(params=params, rng=rng)


def update_running_stats(params: ParamVector, spec: ModelSpec,
                           bn_stats: dict[int, tuple[np.ndarray, np.ndarray]],
                           momentum: float) -> ParamVector:
    data = params.data.copy()
    for layer, (mean, var) in bn_stats.items():
        sl_m = params.index.slice_of(layer, "bn_run_mean")
        sl_v = params.index.slice_of(layer, "bn_run_var")
        data[sl_m] = (1.0 - momentum) * data[sl_m] + momentum * mean
        data[sl_v] = (1.0 - momentum) * data[sl_v] + momentum * var
    return params.with_data(data)


def _prox_gradient(params: ParamVector, anchor: ParamVector, mu: float,
                   mask: frozenset[str]) -> np.ndarray:
    if mu == 0.0:
        return np.zeros(params.index.size)
    g = np.zeros(params.index.size)
    diff = params.data - anchor.data
    for sl in params.index.slices_for_roles(mask):
        g[sl] = mu * diff[sl]
    return g


def _descend(params: ParamVector, grad_vec: np.ndarray, lr: float,
             mask: frozenset[str]) -> ParamVector:
    data = params.data.copy()
    for sl in params.index.slices_for_roles(mask):
        data[sl] -= lr * grad_vec[sl]
    return params.with_data(data)


def tta_step(state: TtaState, batch: Batch, config: TtaConfig, spec: ModelSpec,
             prox: tuple[float, ParamVector] | None = None,
             ) -> tuple[TtaState, np.ndarray]:
    """Adapt on one unlabeled batch; returns (new state, predictions)."""
    if batch.size == 0:
        raise DegenerateBatchError("empty batch")
    x = batch.inputs  # labels are deliberately never read here

    if config.method == "none":
        trace = forward(spec, state.params, x, mode="eval")
        return state, np.argmax(trace.probs, axis=1)

    if config.steps_per_batch == 0:
        # adaptation disabled: predict from batch statistics, change nothing
        trace = forward(spec, state.params, x, mode="train")
        return state, np.argmax(trace.probs, axis=1)

    if config.method == "bn-stats":
        trace = forward(spec, state.params, x, mode="train")
        params = update_running_stats(state.params, spec, trace.bn_stats,
                                        config.bn_momentum)
        new_state = TtaState(params=params, teacher=state.teacher,
                             source=state.source, step_count=state.step_count + 1,
                             rng=state.rng)
        return new_state, np.argmax(trace.probs, axis=1)

    if config.method == "tent":
        if not spec.bn_layers():
            raise ConfigError("entropy TTA needs at least one batchnorm layer")
        params = state.params
        loss = EntropyLoss()
        for _ in range(config.steps_per_batch):
            trace = forward(spec, params, x, mode="train")
            ev = loss.evaluate(trace)
            gvec, _ = backward(spec, params, trace, ev.d_logits)
            if prox is not None:
                gvec = gvec + _prox_gradient(params, prox[1], prox[0],
                                             BN_AFFINE_ROLES)
            params = _descend(params, gvec.real, config.learning_rate,
                              BN_AFFINE_ROLES)
        trace = forward(spec, params, x, mode="train")
        params = update_running_stats(params, spec, trace.bn_stats,
                                        config.bn_momentum)
        new_state = TtaState(params=params, teacher=state.teacher,
                             source=state.source, step_count=state.step_count + 1,
                             rng=state.rng)
        return new_state, np.argmax(trace.probs, axis=1)

    # cotta-lite: mean teacher with two-view pseudo-labels + stochastic restore
    params = state.params
    teacher = state.teacher if state.teacher is not None else state.params
    source = state.source if state.source is not None else state.params
    rng = state.rng
    for _ in range(config.steps_per_batch):
        views = []
        for _view in range(2):
            noisy = np.clip(x + config.aug_noise * rng.normal(size=x.shape), 0.0, 1.0)
            views.append(forward(spec, teacher, noisy, mode="train").probs)
        soft = (views[0] + views[1]) / 2.0
        loss = CrossEntropyLoss(soft)
        trace = forward(spec, params, x, mode="train")
        ev = loss.evaluate(trace)
        gvec, _ = backward(spec, params, trace, ev.d_logits)
        if prox is not None:
            gvec = gvec + _prox_gradient(params, prox[1], prox[0], TRAINABLE_ROLES)
        params = _descend(params, gvec.real, config.learning_rate, TRAINABLE_ROLES)
        # teacher <- EMA of student
        teacher = teacher.with_data(
            config.teacher_decay * teacher.data
            + (1.0 - config.teacher_decay) * params.data
        )
        if config.restore_prob > 0.0:
            restore = np.zeros(params.index.size, dtype=bool)
            for sl in params.index.slices_for_roles(TRAINABLE_ROLES):
                restore[sl] = rng.random(sl.stop - sl.start) < config.restore_prob
            data = np.where(restore, source.data, params.data)
            params = params.with_data(data)
    final = forward(spec, params, x, mode="train")
    params = update_running_stats(params, spec, final.bn_stats, config.bn_momentum)
    teacher_trace = forward(spec, teacher, x, mode="train")
    new_state = TtaState(params=params, teacher=teacher, source=source,
                         step_count=state.step_count + 1, rng=rng)
    return new_state, np.argmax(teacher_trace.probs, axis=1)


def local_round(state: TtaState, stream_slice: list[Batch], config: TtaConfig,
                spec: ModelSpec, prox: tuple[float, ParamVector] | None = None,
                ) -> tuple[ParamDelta, TtaState, np.ndarray]:
    """Adapt over a round's batches; returns the masked update.

    The delta is (params after - broadcast) restricted to the method's
    role mask (affine/trainable roles plus running statistics).
    """
    if not stream_slice:
        raise ConfigError("round needs at least one batch")
    anchor = state.params
    if prox is not None and prox[0] > 0:
        prox = (prox[0], anchor)
    preds = np.array([], dtype=np.int64)
    for batch in stream_slice:
        state, preds = tta_step(state, batch, config, spec, prox=prox)
    delta = delta_between(state.params, anchor, config.delta_mask())
    return delta, state, preds
