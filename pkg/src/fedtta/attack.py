"""The adversarial client.

Pipeline per participation round: maintain a surrogate of the next
post-aggregation model from broadcast history plus an estimate of the
attacker's own contribution; craft bounded in-distribution poisons by
projected gradient descent against that surrogate (or against the exact
peer contribution in the white-box diagnostic mode); run the attacker's
own adaptation on the mixed batch; submit a norm-clipped update. After
the next broadcast arrives, refine the surrogate by posterior
distillation on a held-out clean pool.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .datasets import Batch
from .errors import (
    AttackerDataError,
    ConfigError,
    DegenerateBatchError,
    DimensionError,
    SurrogateNotReady,
)
from .federation import clip_delta
from .losses import (
    BalancedLowEntropyLoss,
    BnShiftLoss,
    CombinedLoss,
    DiaUnrolledLoss,
    EntropyLoss,
    GaussianKlLoss,
    KlToTargetLoss,
    LabelCrossEntropyLoss,
    MaxCrossEntropyLoss,
    MomentMatchLoss,
    NegativeEntropyLoss,
    NotchHighEntropyLoss,
    set_moments,
)
from .network import ModelSpec, backward, forward
from .params import BN_AFFINE_ROLES, ParamDelta, ParamVector, clamp_running_var
from .seeding import rng_for
from .tta import TtaConfig, init_state, local_round

OBJECTIVES = ("nhe", "ble", "bn-shift", "maxce", "tepa", "dia", "reg-only")
REGULARIZERS = ("none", "moment-match", "gaussian-kl")
MODES = ("grey-box", "white-box")

#: Objectives whose paper form is maximized during crafting.
ASCENT_OBJECTIVES = frozenset({"maxce", "dia"})


@dataclass(frozen=True)
class AttackConfig:
    objective: str = "nhe"
    mode: str = "grey-box"
    regularizer: str = "moment-match"
    reg_weight: float = 1.0            # lambda
    variance_weight: float = 0.5       # beta in the moment regularizer
    balance_weight: float = 0.1        # gamma in the balanced objective
    epsilon: float = 0.03              # l-infinity budget
    pgd_steps: int = 10
    pgd_step_size: float | None = None  # default: epsilon / 4
    poison_ratio: float = 0.5          # alpha
    history_window: int = 3            # k
    tap_layers: tuple[int, ...] | None = None
    bn_shift_layers: tuple[int, ...] | None = None
    distill_lr: float = 0.5
    distill_steps: int = 1
    own_delta_ema: float = 0.5
    dia_inner_lr: float = 0.1
    confusion_rho: float = 0.1

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown attack objective {self.objective!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown attack mode {self.mode!r}")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if self.epsilon <= 0:
            raise ConfigError("perturbation budget epsilon must be > 0")
        if not 0.0 <= self.poison_ratio <= 1.0:
            raise ConfigError("poison ratio must lie in [0, 1]")
        if self.history_window < 1:
            raise ConfigError("history window k must be >= 1")
        if self.pgd_steps < 0 or self.reg_weight < 0:
            raise ConfigError("pgd steps and reg weight must be >= 0")

    @property
    def step_size(self) -> float:
        return self.pgd_step_size if self.pgd_step_size is not None else self.epsilon / 4.0


# ---------------------------------------------------------------------------
# Surrogate aggregator
# ---------------------------------------------------------------------------

@dataclass
class SurrogateState:
    """Rolling broadcast history plus own-contribution and correction terms."""

    index_size: int
    k: int
    eta: float
    distill_lr: float = 0.5
    distill_steps: int = 1
    own_delta_ema: float = 0.5
    history: deque = field(default_factory=deque)
    own_est: np.ndarray | None = None     # EMA of own weighted submissions
    s_corr: np.ndarray | None = None      # distillation-learned correction

    def __post_init__(self) -> None:
        self.history = deque(self.history, maxlen=self.k + 1)
        if self.own_est is None:
            self.own_est = np.zeros(self.index_size)
        if self.s_corr is None:
            self.s_corr = np.zeros(self.index_size)

    @property
    def ready(self) -> bool:
        return len(self.history) >= 2

    def latest(self) -> ParamVector:
        if not self.history:
            raise SurrogateNotReady("no broadcast observed yet")
        return self.history[-1]


def surrogate_update_history(state: SurrogateState, params: ParamVector) -> None:
    if state.history and state.history[-1].index != params.index:
        raise DimensionError("broadcast shape changed mid-experiment")
    state.history.append(params)


def delta_hist(state: SurrogateState) -> np.ndarray:
    """Mean of consecutive broadcast differences over the last k gaps."""
    if not state.ready:
        raise SurrogateNotReady("need at least two broadcasts")
    entries = list(state.history)
    gaps = [entries[i + 1].data - entries[i].data for i in range(len(entries) - 1)]
    return np.mean(gaps[-state.k:], axis=0)


def record_own_delta(state: SurrogateState, delta: ParamDelta,
                     own_weight: float) -> None:
    contribution = own_weight * delta.data
    if not np.any(state.own_est):
        state.own_est = contribution.copy()
    else:
        a = state.own_delta_ema
        state.own_est = (1.0 - a) * state.own_est + a * contribution


def estimate_others(state: SurrogateState) -> ParamDelta:
    """Estimated peer contribution: history average minus own, plus correction."""
    hist = delta_hist(state)
    unscaled = hist / state.eta if state.eta != 0 else np.zeros_like(hist)
    vec = unscaled - state.own_est + state.s_corr
    return ParamDelta(data=vec, index=state.latest().index)


def predict_post_agg(state: SurrogateState, candidate: ParamDelta | None,
                     eta: float | None = None, own_weight: float = 0.0,
                     ) -> ParamVector:
    """Surrogate of the next broadcast given a candidate own update."""
    eta = state.eta if eta is None else eta
    others = estimate_others(state)
    base = state.latest()
    total = others.data.copy()
    if candidate is not None:
        total += own_weight * candidate.data
    data = clamp_running_var(base.data + eta * total, base.index)
    return base.with_data(data)


def distill_posterior(state: SurrogateState, received: ParamVector,
                      pool: "BenignPool", spec: ModelSpec,
                      prediction: ParamVector | None = None,
                      ) -> tuple[float, float]:
    """Gradient steps on the correction term minimizing pool posterior KL.

    Backtracking halves the step (at most 10 times) so the distillation
    loss never increases. Returns (kl before, kl after).
    """
    if not state.ready:
        raise SurrogateNotReady("cannot distill before the surrogate is ready")
    base = prediction if prediction is not None else predict_post_agg(state, None)
    target = forward(spec, received, pool.inputs, mode="eval").probs
    loss = KlToTargetLoss(target)

    def kl_at(s: np.ndarray) -> tuple[float, np.ndarray]:
        data = clamp_running_var(base.data + state.eta * (s - state.s_corr),
                                 base.index)
        model = base.with_data(data)
        trace = forward(spec, model, pool.inputs, mode="eval")
        ev = loss.evaluate(trace)
        gvec, _ = backward(spec, model, trace, ev.d_logits, ev.d_taps)
        return float(ev.value), state.eta * gvec.real

    kl_before, grad = kl_at(state.s_corr)
    kl_current = kl_before
    for _ in range(state.distill_steps):
        if kl_current <= 0.0:
            break
        step = state.distill_lr
        improved = False
        for _halving in range(10):
            candidate = state.s_corr - step * grad
            kl_candidate, grad_candidate = kl_at(candidate)
            if kl_candidate <= kl_current:
                state.s_corr = candidate
                kl_current, grad = kl_candidate, grad_candidate
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    return kl_before, kl_current


# ---------------------------------------------------------------------------
# Benign pool and feature statistics
# ---------------------------------------------------------------------------

class BenignPool:
    """Attacker-held clean labeled samples; class-balanced by contract."""

    def __init__(self, inputs: np.ndarray, labels: np.ndarray, num_classes: int):
        self.inputs = np.asarray(inputs, dtype=np.float64)
        if labels is None:
            raise AttackerDataError("benign pool must be labeled")
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_classes = int(num_classes)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DimensionError("pool inputs/labels length mismatch")
        counts = np.bincount(self.labels, minlength=num_classes)
        if counts.min() == 0:
            raise ConfigError("benign pool must contain every class")
        if counts.max() - counts.min() > 1:
            raise ConfigError("benign pool must be class-balanced (within 1)")
        self._moment_cache: dict[int, dict] = {}

    @classmethod
    def from_batch(cls, batch: Batch, num_classes: int) -> "BenignPool":
        return cls(batch.inputs, batch.labels, num_classes)

    def moments(self, spec: ModelSpec, params: ParamVector,
                layers: tuple[int, ...]) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        key = id(params)
        cached = self._moment_cache.get(key)
        if cached is not None and cached["layers"] == layers:
            return cached["moments"]
        moments = feature_moments(self.inputs, spec, params, layers)
        self._moment_cache = {key: {"layers": layers, "moments": moments}}
        return moments


def feature_moments(inputs: np.ndarray, spec: ModelSpec, params: ParamVector,
                    layers: tuple[int, ...],
                    ) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per-layer per-dimension feature mean and variance over a sample set."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[0] < 2:
        raise DegenerateBatchError("feature moments need at least 2 samples")
    tapped = set(spec.tapped_layers())
    for layer in layers:
        if layer not in tapped:
            raise ConfigError(f"layer {layer} is not tapped")
    trace = forward(spec, params, inputs, mode="eval")
    return {layer: set_moments(trace.taps[layer]) for layer in layers}


# ---------------------------------------------------------------------------
# Objective wrappers (value-only conveniences used by tests and logging)
# ---------------------------------------------------------------------------

def _value(spec, params, inputs, loss) -> float:
    trace = forward(spec, params, np.asarray(inputs, dtype=np.float64), mode="eval")
    return float(loss.evaluate(trace).value)


def loss_nhe(spec, params, inputs, labels) -> float:
    return _value(spec, params, inputs, NotchHighEntropyLoss(labels, spec.num_classes))


def loss_maxce(spec, params, inputs, labels) -> float:
    return _value(spec, params, inputs, MaxCrossEntropyLoss(labels, spec.num_classes))


def loss_tepa(spec, params, inputs) -> float:
    return _value(spec, params, inputs, NegativeEntropyLoss())


def loss_ble(spec, params, inputs, labels, tracker: "ConfusionTracker",
             gamma: float = 0.0) -> float:
    loss = BalancedLowEntropyLoss(labels, tracker.mapping, spec.num_classes, gamma)
    return _value(spec, params, inputs, loss)


def loss_bn_shift(spec, params, inputs, shift: dict[int, np.ndarray]) -> float:
    return _value(spec, params, inputs, BnShiftLoss(shift, spec))


def loss_moment_reg(spec, params, poison_inputs, pool: BenignPool,
                    layers: tuple[int, ...], beta: float = 0.5) -> float:
    loss = MomentMatchLoss(pool.moments(spec, params, layers), beta=beta)
    return _value(spec, params, poison_inputs, loss)


def loss_gaussian_kl_reg(spec, params, poison_inputs, pool: BenignPool,
                         layers: tuple[int, ...]) -> float:
    loss = GaussianKlLoss(pool.moments(spec, params, layers))
    return _value(spec, params, poison_inputs, loss)


def loss_dia(spec, params, poison_inputs, benign_inputs, benign_labels,
             inner_lr: float) -> float:
    loss = DiaUnrolledLoss(benign_inputs, benign_labels, inner_lr, spec)
    return loss.value(params, poison_inputs)


# ---------------------------------------------------------------------------
# Balanced low-entropy label mapping
# ---------------------------------------------------------------------------

@dataclass
class ConfusionTracker:
    """Moving-average confusion matrix plus a derangement label mapping."""

    num_classes: int
    rho: float = 0.1
    confusion: np.ndarray = None
    mapping: np.ndarray = None

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("label mapping needs at least 2 classes")
        if self.confusion is None:
            self.confusion = np.zeros((self.num_classes, self.num_classes))
        if self.mapping is None:
            # initial mapping: cyclic shift (a balanced derangement)
            self.mapping = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
            for y in range(self.num_classes):
                self.mapping[y, (y + 1) % self.num_classes] = 1

    def validate(self) -> None:
        m = self.mapping
        if (m.sum(axis=1) != 1).any():
            raise ConfigError("each mapping row must select exactly one target")
        if np.trace(m) != 0:
            raise ConfigError("mapping may not fix any class")
        cols = m.sum(axis=0)
        if cols.max() - cols.min() > 1:
            raise ConfigError("mapping column sums must be balanced within 1")


def _greedy_balanced_assignment(confusion: np.ndarray) -> np.ndarray:
    """Derangement permutation: each class takes its most-confused target.

    Classes are processed in order of decreasing confusion mass; each
    picks its highest-confusion unused non-self column. If the last class
    is left only with itself, it swaps targets with the earlier class
    that maximizes the recovered confusion mass.
    """
    k = confusion.shape[0]
    order = sorted(range(k), key=lambda y: (-confusion[y].sum(), y))
    target: dict[int, int] = {}
    used: set[int] = set()
    for y in order:
        candidates = [q for q in range(k) if q != y and q not in used]
        if candidates:
            q = max(candidates, key=lambda c: (confusion[y, c], -c))
            target[y] = q
            used.add(q)
        else:
            # only column y remains; swap with the best earlier class
            best = max((z for z in target if target[z] != y),
                       key=lambda z: (confusion[y, target[z]] + confusion[z, y], -z))
            target[y] = target[best]
            target[best] = y
            used.add(y)
    mapping = np.zeros((k, k), dtype=np.int64)
    for y, q in target.items():
        mapping[y, q] = 1
    return mapping


def ble_update_mapping(tracker: ConfusionTracker, predictions: np.ndarray,
                       labels: np.ndarray) -> ConfusionTracker:
    """Fold a batch's confusion into the tracker and refresh the mapping."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise DimensionError("predictions/labels length mismatch")
    k = tracker.num_classes
    batch = np.zeros((k, k))
    np.add.at(batch, (labels, predictions), 1.0)
    if predictions.shape[0]:
        batch /= predictions.shape[0]
    tracker.confusion = (1.0 - tracker.rho) * tracker.confusion + tracker.rho * batch
    tracker.mapping = _greedy_balanced_assignment(tracker.confusion)
    tracker.validate()
    return tracker


# ---------------------------------------------------------------------------
# Target direction for the statistic-shift objective
# ---------------------------------------------------------------------------

def estimate_bn_shift(spec: ModelSpec, params: ParamVector, pool: BenignPool,
                      layers: tuple[int, ...], inner_lr: float,
                      ) -> dict[int, np.ndarray]:
    """Per-channel sign of the pool-loss increase under a statistic shift.

    Simulates one entropy-minimization step on the pool, then reads the
    gradient of the pool cross-entropy with respect to the running
    statistics: the sign per channel is the direction whose induced shift
    increases the pool loss.
    """
    ent = EntropyLoss()
    trace = forward(spec, params, pool.inputs, mode="train")
    ev = ent.evaluate(trace)
    gvec, _ = backward(spec, params, trace, ev.d_logits)
    adapted = params.data.copy()
    for sl in params.index.slices_for_roles(BN_AFFINE_ROLES):
        adapted[sl] -= inner_lr * gvec.real[sl]
    adapted_params = params.with_data(adapted)

    ce = LabelCrossEntropyLoss(pool.labels, spec.num_classes)
    trace = forward(spec, adapted_params, pool.inputs, mode="eval")
    ev = ce.evaluate(trace)
    gvec, _ = backward(spec, adapted_params, trace, ev.d_logits, ev.d_taps)
    shift: dict[int, np.ndarray] = {}
    for layer in layers:
        g_mean = gvec.real[params.index.slice_of(layer, "bn_run_mean")]
        g_var = gvec.real[params.index.slice_of(layer, "bn_run_var")]
        shift[layer] = np.concatenate([np.sign(g_mean), np.sign(g_var)])
    return shift


# ---------------------------------------------------------------------------
# Poison crafting
# ---------------------------------------------------------------------------

def _balanced_selection(labels: np.ndarray, n_poison: int) -> np.ndarray:
    """Deterministic class-balanced index pick (counts differ by <= 1)."""
    classes = np.unique(labels)
    per_class = {int(c): list(np.flatnonzero(labels == c)) for c in classes}
    quota, extra = divmod(n_poison, len(classes))
    picked: list[int] = []
    # classes with more available samples absorb the remainder first
    by_avail = sorted(per_class, key=lambda c: (-len(per_class[c]), c))
    want = {c: quota for c in per_class}
    for c in by_avail[:extra]:
        want[c] += 1
    short = 0
    for c in sorted(per_class):
        take = min(want[c], len(per_class[c]))
        short += want[c] - take
        picked.extend(per_class[c][:take])
    if short:  # redistribute anything an under-populated class could not supply
        for c in by_avail:
            while short and len(per_class[c]) > want[c]:
                picked.append(per_class[c][want[c]])
                want[c] += 1
                short -= 1
    return np.array(sorted(picked), dtype=np.int64)


def _objective_loss(config: AttackConfig, spec: ModelSpec, labels: np.ndarray | None,
                    tracker: ConfusionTracker | None,
                    bn_shift: dict[int, np.ndarray] | None):
    k = spec.num_classes
    if config.objective == "nhe":
        return NotchHighEntropyLoss(labels, k)
    if config.objective == "ble":
        if tracker is None:
            raise ConfigError("balanced objective needs a confusion tracker")
        return BalancedLowEntropyLoss(labels, tracker.mapping, k,
                                      gamma=config.balance_weight)
    if config.objective == "maxce":
        return MaxCrossEntropyLoss(labels, k)
    if config.objective == "tepa":
        return NegativeEntropyLoss()
    if config.objective == "bn-shift":
        if bn_shift is None:
            raise ConfigError("statistic-shift objective needs a target direction")
        return BnShiftLoss(bn_shift, spec)
    if config.objective == "reg-only":
        return None
    raise ConfigError(f"objective {config.objective!r} has no trace loss")


def _regularizer_loss(config: AttackConfig, spec: ModelSpec, params: ParamVector,
                      pool: BenignPool):
    if config.regularizer == "none" or config.reg_weight == 0.0:
        return None
    layers = config.tap_layers if config.tap_layers is not None else spec.tapped_layers()
    if not layers:
        raise ConfigError("regularizers need at least one tapped layer")
    moments = pool.moments(spec, params, tuple(layers))
    if config.regularizer == "moment-match":
        return MomentMatchLoss(moments, beta=config.variance_weight)
    return GaussianKlLoss(moments)


def craft_poisons(batch: Batch, config: AttackConfig, model_params: ParamVector,
                  pool: BenignPool, tracker: ConfusionTracker | None,
                  spec: ModelSpec,
                  bn_shift: dict[int, np.ndarray] | None = None,
                  ) -> tuple[Batch, dict]:
    """PGD-craft the batch's poison subset inside the epsilon ball.

    Selects floor(alpha * B) samples class-balanced, then takes signed
    gradient steps on the configured objective plus the weighted
    regularizer, projecting onto the l-infinity ball around the clean
    samples and clamping to [0, 1] after every step.
    """
    B = batch.size
    n_poison = int(np.floor(config.poison_ratio * B))
    if config.poison_ratio > 0 and n_poison < 1:
        raise ConfigError(
            f"poison ratio {config.poison_ratio} yields no poisons for batch {B}"
        )
    if n_poison == 0:
        return batch, {"n_poison": 0, "objective": config.objective,
                       "obj_before": 0.0, "obj_after": 0.0,
                       "reg_before": 0.0, "reg_after": 0.0,
                       "linf_max": 0.0, "class_counts": []}
    if batch.labels is None:
        raise AttackerDataError("poison selection needs the attacker's own labels")

    sel = _balanced_selection(batch.labels, n_poison)
    clean = batch.inputs[sel]
    labels = batch.labels[sel]

    dia: DiaUnrolledLoss | None = None
    if config.objective == "dia":
        benign_idx = np.setdiff1d(np.arange(B), sel)
        if benign_idx.size == 0:
            raise ConfigError("unrolled objective needs a benign subset in the batch")
        dia = DiaUnrolledLoss(batch.inputs[benign_idx], batch.labels[benign_idx],
                              config.dia_inner_lr, spec)
        objective = None
    else:
        objective = _objective_loss(config, spec, labels, tracker, bn_shift)
    regularizer = _regularizer_loss(config, spec, model_params, pool)
    sign = -1.0 if config.objective in ASCENT_OBJECTIVES else 1.0

    def evaluate(x: np.ndarray) -> tuple[float, float, np.ndarray]:
        """(objective value, regularizer value, combined craft gradient)."""
        obj_val, reg_val = 0.0, 0.0
        grad = np.zeros_like(x)
        if dia is not None:
            obj_val, d_poison, _ = dia.grads(model_params, x)
            grad += sign * d_poison
        parts = []
        if objective is not None:
            parts.append((sign, objective))
        if regularizer is not None:
            parts.append((config.reg_weight, regularizer))
        if parts:
            trace = forward(spec, model_params, x, mode="eval")
            if objective is not None:
                obj_val = float(objective.evaluate(trace).value)
            if regularizer is not None:
                reg_val = float(regularizer.evaluate(trace).value)
            ev = CombinedLoss(parts).evaluate(trace)
            _, dx = backward(spec, model_params, trace, ev.d_logits, ev.d_taps)
            grad += dx.real
        return obj_val, reg_val, grad

    obj_before, reg_before, _ = evaluate(clean)
    x = clean.copy()
    step = config.step_size
    for _ in range(config.pgd_steps):
        _, _, grad = evaluate(x)
        x = x - step * np.sign(grad)
        x = np.clip(x, clean - config.epsilon, clean + config.epsilon)
        x = np.clip(x, 0.0, 1.0)
    obj_after, reg_after, _ = evaluate(x)

    poisoned = batch.inputs.copy()
    poisoned[sel] = x
    mask = np.zeros(B, dtype=bool)
    mask[sel] = True
    counts = np.bincount(labels, minlength=spec.num_classes)
    info = {
        "n_poison": int(n_poison),
        "objective": config.objective,
        "obj_before": float(obj_before),
        "obj_after": float(obj_after),
        "reg_before": float(reg_before),
        "reg_after": float(reg_after),
        "linf_max": float(np.abs(x - clean).max()) if n_poison else 0.0,
        "range_min": float(x.min()),
        "range_max": float(x.max()),
        "class_counts": counts.tolist(),
    }
    return Batch(inputs=poisoned, labels=batch.labels, poison_mask=mask), info


# ---------------------------------------------------------------------------
# Full adversarial client
# ---------------------------------------------------------------------------

class Attacker:
    """One adversarial client; owns its surrogate, pool, and trace log."""

    def __init__(self, client_id: int, spec: ModelSpec, config: AttackConfig,
                 tta: TtaConfig, pool: BenignPool, server_scale: float,
                 clip: float | None, seed: int):
        self.client_id = client_id
        self.spec = spec
        self.config = config
        self.tta = tta
        self.pool = pool
        self.clip = clip
        self.seed = seed
        self.mode = config.mode
        self.surrogate = SurrogateState(
            index_size=spec.index_map().size, k=config.history_window,
            eta=server_scale, distill_lr=config.distill_lr,
            distill_steps=config.distill_steps,
            own_delta_ema=config.own_delta_ema,
        )
        self.tracker = ConfusionTracker(spec.num_classes, rho=config.confusion_rho) \
            if config.objective == "ble" else None
        self.bn_shift: dict[int, np.ndarray] | None = None
        self.last_prediction: ParamVector | None = None
        self.trace: list[dict] = []
        self._pending: dict | None = None

    def observe_broadcast(self, params: ParamVector, round_index: int) -> None:
        """Fold the received broadcast into the surrogate state."""
        pred_error = None
        distill_pair = None
        if self.last_prediction is not None:
            pred_error = float(np.abs(self.last_prediction.data - params.data).max())
            try:
                distill_pair = distill_posterior(
                    self.surrogate, params, self.pool, self.spec,
                    prediction=self.last_prediction,
                )
            except SurrogateNotReady:
                distill_pair = None
            self.last_prediction = None
        surrogate_update_history(self.surrogate, params)
        self._pending = {
            "round": round_index,
            "surrogate_error": pred_error,
            "distill_kl_before": distill_pair[0] if distill_pair else None,
            "distill_kl_after": distill_pair[1] if distill_pair else None,
        }

    def _craft_model(self, broadcast: ParamVector, own_weight: float,
                     true_others: ParamDelta | None) -> ParamVector:
        if self.mode == "white-box":
            if true_others is None:
                raise ConfigError("white-box mode needs the true peer contribution")
            eta = self.surrogate.eta
            return broadcast.with_data(broadcast.data + eta * true_others.data)
        return predict_post_agg(self.surrogate, None, own_weight=own_weight)

    def attacker_round(self, broadcast: ParamVector, batch: Batch,
                       round_index: int, own_weight: float,
                       true_others: ParamDelta | None = None):
        """Craft, adapt on the mixed batch, clip, and log one round."""
        record = self._pending or {"round": round_index}
        self._pending = None
        record.update({"client": self.client_id, "mode": self.mode,
                       "fallback": False})

        crafted = batch
        try:
            model = self._craft_model(broadcast, own_weight, true_others)
            if self.config.objective == "bn-shift" and self.bn_shift is None:
                layers = (self.config.bn_shift_layers
                          if self.config.bn_shift_layers is not None
                          else self.spec.bn_layers())
                self.bn_shift = estimate_bn_shift(
                    self.spec, model, self.pool, tuple(layers),
                    inner_lr=self.config.dia_inner_lr,
                )
            crafted, info = craft_poisons(
                batch, self.config, model, self.pool, self.tracker, self.spec,
                bn_shift=self.bn_shift,
            )
            record.update(info)
            record["pool_loss"] = loss_maxce(self.spec, model, self.pool.inputs,
                                             self.pool.labels)
        except SurrogateNotReady:
            record["fallback"] = True

        rng = rng_for(self.seed, "attacker", self.client_id, round_index)
        state = init_state(broadcast, self.tta, rng=rng)
        delta, state, preds = local_round(state, [crafted.without_labels()],
                                          self.tta, self.spec)
        delta = clip_delta(delta, self.clip)
        record["delta_norm"] = delta.norm()
        record["clip_bound"] = self.clip

        if self.tracker is not None and batch.labels is not None:
            ble_update_mapping(self.tracker, preds, batch.labels)

        record_own_delta(self.surrogate, delta, own_weight)
        if self.surrogate.ready:
            self.last_prediction = predict_post_agg(
                self.surrogate, delta, own_weight=own_weight,
            )
        self.trace.append(record)
        return delta, state
