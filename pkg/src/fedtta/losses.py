"""Registered differentiable losses.

Each loss evaluates a ForwardTrace and returns its value together with
gradients at the points where it attaches to the network: the softmax
head's input (``d_logits``) and/or tapped layer outputs (``d_taps``).
The generic backward pass turns those into parameter and input gradients.

The unrolled adaptation objective is the exception: it differentiates
through one simulated entropy-minimization step, so it owns its gradient
computation (complex-step Hessian-vector products on the same forward/
backward code, exact to float64 rounding).
"""

from __future__ import annotations

import numpy as np

from .errors import AttackerDataError, ConfigError, DimensionError
from .network import (
    LossEval,
    ModelSpec,
    backward,
    forward,
)
from .params import BN_AFFINE_ROLES, ParamVector


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise DimensionError("labels must be a 1-D array")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DimensionError("label out of range")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _log_probs(probs: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(probs):
        return np.log(probs)
    return np.log(np.clip(probs, 1e-300, None))


class EntropyLoss:
    """Mean prediction entropy (the entropy-minimization TTA objective)."""

    name = "entropy"

    def evaluate(self, trace) -> LossEval:
        p = trace.probs
        logp = _log_probs(p)
        h = -(p * logp).sum(axis=1)
        B = p.shape[0]
        d_logits = -p * (logp + h[:, None]) / B
        return LossEval(h.mean(), d_logits=d_logits)


class CrossEntropyLoss:
    """Mean cross-entropy to fixed per-sample target rows."""

    name = "cross_entropy"

    def __init__(self, targets: np.ndarray):
        self.targets = np.asarray(targets, dtype=np.float64)

    def evaluate(self, trace) -> LossEval:
        p = trace.probs
        q = self.targets
        if q.shape != p.shape:
            raise DimensionError("target shape does not match probabilities")
        B = p.shape[0]
        value = -(q * _log_probs(p)).sum(axis=1).mean()
        return LossEval(value, d_logits=(p - q) / B)


class KlToTargetLoss:
    """Mean KL(target || predicted); same gradient as cross-entropy."""

    name = "kl_to_target"

    def __init__(self, targets: np.ndarray):
        self.targets = np.asarray(targets, dtype=np.float64)

    def evaluate(self, trace) -> LossEval:
        p = trace.probs
        q = self.targets
        if q.shape != p.shape:
            raise DimensionError("target shape does not match probabilities")
        B = p.shape[0]
        qlogq = np.where(q > 0, q * np.log(np.clip(q, 1e-300, None)), 0.0).sum(axis=1)
        value = (qlogq - (q * _log_probs(p)).sum(axis=1)).mean()
        return LossEval(value, d_logits=(p - q) / B)


class LabelCrossEntropyLoss(CrossEntropyLoss):
    """Cross-entropy to one-hot ground-truth labels."""

    name = "label_cross_entropy"

    def __init__(self, labels: np.ndarray, num_classes: int):
        super().__init__(one_hot(labels, num_classes))


def nhe_target(label: int, num_classes: int) -> np.ndarray:
    """Zero mass on the true class, uniform 1/(K-1) on all others."""
    if num_classes < 2:
        raise ConfigError("notched target undefined for fewer than 2 classes")
    if not 0 <= label < num_classes:
        raise DimensionError("label out of range")
    row = np.full(num_classes, 1.0 / (num_classes - 1))
    row[label] = 0.0
    return row


def nhe_targets(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.stack([nhe_target(int(y), num_classes) for y in np.asarray(labels)])


class NotchHighEntropyLoss(CrossEntropyLoss):
    """Cross-entropy to notched high-entropy targets built from labels."""

    name = "nhe"

    def __init__(self, labels, num_classes: int):
        if labels is None:
            raise AttackerDataError("notched targets need ground-truth labels")
        super().__init__(nhe_targets(labels, num_classes))


class BalancedLowEntropyLoss:
    """Cross-entropy to one-hot mapped wrong classes, plus a balance term.

    The balance term is gamma times the negative entropy of the empirical
    argmax-class frequency over the batch; it is piecewise constant in the
    inputs, so it contributes to the value but not to the gradient.
    """

    name = "ble"

    def __init__(self, labels, mapping: np.ndarray, num_classes: int,
                 gamma: float = 0.0):
        if labels is None:
            raise AttackerDataError("mapped targets need ground-truth labels")
        mapping = np.asarray(mapping)
        if mapping.shape != (num_classes, num_classes):
            raise DimensionError("label mapping must be K x K")
        mapped = mapping.argmax(axis=1)[np.asarray(labels, dtype=np.int64)]
        self._ce = CrossEntropyLoss(one_hot(mapped, num_classes))
        self.gamma = float(gamma)
        self.num_classes = num_classes

    def evaluate(self, trace) -> LossEval:
        ev = self._ce.evaluate(trace)
        probs = trace.probs.real if np.iscomplexobj(trace.probs) else trace.probs
        preds = np.argmax(probs, axis=1)
        freq = np.bincount(preds, minlength=self.num_classes) / preds.shape[0]
        ent = -(freq[freq > 0] * np.log(freq[freq > 0])).sum()
        return LossEval(ev.value + self.gamma * (-ent), d_logits=ev.d_logits)


class MaxCrossEntropyLoss(CrossEntropyLoss):
    """Cross-entropy to the true label; crafted by ascent."""

    name = "maxce"
    craft_sign = -1.0  # PGD maximizes this value

    def __init__(self, labels, num_classes: int):
        if labels is None:
            raise AttackerDataError("cross-entropy ascent needs ground-truth labels")
        super().__init__(one_hot(labels, num_classes))


class NegativeEntropyLoss:
    """Negative mean prediction entropy; minimizing it maximizes entropy."""

    name = "tepa"

    def evaluate(self, trace) -> LossEval:
        ev = EntropyLoss().evaluate(trace)
        return LossEval(-ev.value, d_logits=-ev.d_logits)


class BnShiftLoss:
    """Steers per-sample channel statistics along a target direction.

    For each selected batch-norm layer the per-sample statistic vector is
    the layer's input activations and their squares [a, a^2]; batch means
    of those are exactly the channel mean and raw second moment. The loss
    is the negative mean inner product with the target ``shift``.
    """

    name = "bn_shift"

    def __init__(self, shift: dict[int, np.ndarray], spec: ModelSpec):
        self.shift = {}
        bn = set(spec.bn_layers())
        for layer, s in shift.items():
            if layer not in bn:
                raise DimensionError(f"layer {layer} is not a batchnorm layer")
            c = spec.layers[layer].width_in
            s = np.asarray(s, dtype=np.float64).reshape(-1)
            if s.shape[0] != 2 * c:
                raise DimensionError(
                    f"shift for layer {layer} must have length {2 * c} "
                    f"(channel means then variances)"
                )
            self.shift[layer] = s

    def evaluate(self, trace) -> LossEval:
        if not self.shift:
            return LossEval(0.0)
        B = trace.batch_size
        value = 0.0
        d_taps: dict[int, np.ndarray] = {}
        for layer, s in self.shift.items():
            a = trace._caches[layer][1]  # batchnorm input activations
            c = s.shape[0] // 2
            s_mean, s_var = s[:c], s[c:]
            value = value - ((a * s_mean).sum() + ((a ** 2) * s_var).sum()) / B
            d_taps[layer - 1] = -(s_mean + 2.0 * a * s_var) / B
        return LossEval(value, d_taps=d_taps)


def set_moments(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension empirical mean and population variance over a set."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise DimensionError("expected a [N, M] feature array")
    mean = features.mean(axis=0)
    var = ((features - mean) ** 2).mean(axis=0)
    return mean, var


def _tap_features(trace, layer: int) -> np.ndarray:
    if layer not in trace.taps:
        raise ConfigError(f"layer {layer} is not tapped")
    return trace.taps[layer]


class MomentMatchLoss:
    """Layer-averaged squared distance between set feature moments.

    ``pool_moments`` maps tapped layer index -> (mean, variance) of the
    clean reference pool. ``beta`` weights the variance term.
    """

    name = "moment_match"

    def __init__(self, pool_moments: dict[int, tuple[np.ndarray, np.ndarray]],
                 beta: float = 0.5):
        if not pool_moments:
            raise ConfigError("moment matching needs at least one tapped layer")
        self.pool_moments = {
            int(l): (np.asarray(m, dtype=np.float64), np.asarray(v, dtype=np.float64))
            for l, (m, v) in pool_moments.items()
        }
        self.beta = float(beta)

    def evaluate(self, trace) -> LossEval:
        L = len(self.pool_moments)
        B = trace.batch_size
        value = 0.0
        d_taps: dict[int, np.ndarray] = {}
        for layer, (pool_mean, pool_var) in self.pool_moments.items():
            f = _tap_features(trace, layer)
            mean, var = set_moments(f)
            dmean = mean - pool_mean
            dvar = var - pool_var
            value = value + ((dmean ** 2).sum() + self.beta * (dvar ** 2).sum()) / L
            # d value / d f = (2 dmean / B + beta * 2 dvar * 2 (f - mean) / B) / L
            d_taps[layer] = (
                2.0 * dmean / B + self.beta * 4.0 * dvar * (f - mean) / B
            ) / L
        return LossEval(value, d_taps=d_taps)


VAR_FLOOR = 1e-8


class GaussianKlLoss:
    """Layer-averaged diagonal-Gaussian KL(pool || batch set).

    Closed form per dimension with the pool as the left argument; the
    batch-set moments are the differentiable side. Degenerate variances
    are floored at VAR_FLOOR and flagged.
    """

    name = "gaussian_kl"

    def __init__(self, pool_moments: dict[int, tuple[np.ndarray, np.ndarray]]):
        if not pool_moments:
            raise ConfigError("gaussian KL needs at least one tapped layer")
        self.pool_moments = {}
        self.floored = False
        for l, (m, v) in pool_moments.items():
            v = np.asarray(v, dtype=np.float64)
            if (v < VAR_FLOOR).any():
                self.floored = True
                v = np.maximum(v, VAR_FLOOR)
            self.pool_moments[int(l)] = (np.asarray(m, dtype=np.float64), v)

    @staticmethod
    def kl_diag(mean_a: np.ndarray, var_a: np.ndarray,
                mean_b: np.ndarray, var_b: np.ndarray) -> float:
        """KL(N(mean_a, var_a) || N(mean_b, var_b)), summed over dims."""
        return float(
            (0.5 * np.log(var_b / var_a)
             + (var_a + (mean_a - mean_b) ** 2) / (2.0 * var_b)
             - 0.5).sum()
        )

    def evaluate(self, trace) -> LossEval:
        L = len(self.pool_moments)
        B = trace.batch_size
        value = 0.0
        d_taps: dict[int, np.ndarray] = {}
        for layer, (pool_mean, pool_var) in self.pool_moments.items():
            f = _tap_features(trace, layer)
            mean, var = set_moments(f)
            var_r = var.real if np.iscomplexobj(var) else var
            if (var_r < VAR_FLOOR).any():
                self.floored = True
                clamped = var_r < VAR_FLOOR
                var = np.where(clamped, VAR_FLOOR, var)
            else:
                clamped = np.zeros(var_r.shape, dtype=bool)
            value = value + (
                0.5 * np.log(var / pool_var)
                + (pool_var + (pool_mean - mean) ** 2) / (2.0 * var)
                - 0.5
            ).sum() / L
            d_mean = (mean - pool_mean) / var
            d_var = 0.5 / var - (pool_var + (pool_mean - mean) ** 2) / (2.0 * var ** 2)
            d_var = np.where(clamped, 0.0, d_var)
            d_taps[layer] = (
                d_mean / B + d_var * 2.0 * (f - mean) / B
            ) / L
        return LossEval(value, d_taps=d_taps)


class CombinedLoss:
    """Weighted sum of trace losses (objective + regularizer)."""

    name = "combined"

    def __init__(self, parts: list[tuple[float, object]]):
        self.parts = parts

    def evaluate(self, trace) -> LossEval:
        value = 0.0
        d_logits = None
        d_taps: dict[int, np.ndarray] = {}
        for w, loss in self.parts:
            ev = loss.evaluate(trace)
            value = value + w * ev.value
            if ev.d_logits is not None:
                d_logits = w * ev.d_logits if d_logits is None else d_logits + w * ev.d_logits
            if ev.d_taps:
                for k, g in ev.d_taps.items():
                    d_taps[k] = d_taps.get(k, 0.0) + w * g
        return LossEval(value, d_logits=d_logits, d_taps=d_taps or None)


# ---------------------------------------------------------------------------
# Unrolled one-step adaptation objective
# ---------------------------------------------------------------------------

CSTEP = 1e-30  # complex-step size; exact to float64 rounding


class DiaUnrolledLoss:
    """Benign cross-entropy after one simulated entropy-minimization step.

    The inner step runs on the mixed batch in train-stats mode and updates
    batch-norm affine parameters only; the outer loss is the mean
    cross-entropy of the benign subset under the adapted parameters.
    Gradients are exact through the inner step.
    """

    name = "dia"
    craft_sign = -1.0  # PGD maximizes the post-adaptation benign loss

    def __init__(self, benign_inputs: np.ndarray, benign_labels: np.ndarray,
                 inner_lr: float, spec: ModelSpec):
        if benign_inputs is None or len(benign_inputs) == 0:
            raise ConfigError("unrolled objective needs a benign subset")
        if benign_labels is None:
            raise AttackerDataError("unrolled objective needs benign labels")
        self.benign_inputs = np.asarray(benign_inputs, dtype=np.float64)
        self.benign_labels = np.asarray(benign_labels, dtype=np.int64)
        self.inner_lr = float(inner_lr)
        self.spec = spec
        self._outer = LabelCrossEntropyLoss(self.benign_labels, spec.num_classes)

    def _mixed(self, poison_inputs: np.ndarray) -> np.ndarray:
        poison_inputs = np.asarray(poison_inputs)
        if poison_inputs.size == 0:
            return self.benign_inputs
        return np.concatenate([poison_inputs, self.benign_inputs], axis=0)

    def _inner_grad(self, params: ParamVector, mixed,
                    _data=None) -> tuple[np.ndarray, np.ndarray]:
        """Full gradient of the inner entropy loss w.r.t. (params, inputs)."""
        trace = forward(self.spec, params, mixed, mode="train", _data=_data)
        ev = EntropyLoss().evaluate(trace)
        return backward(self.spec, params, trace, ev.d_logits)

    def _affine_mask(self, params: ParamVector, vec: np.ndarray) -> np.ndarray:
        out = np.zeros_like(vec)
        for sl in params.index.slices_for_roles(BN_AFFINE_ROLES):
            out[sl] = vec[sl]
        return out

    def _adapted(self, params: ParamVector, poison_inputs) -> np.ndarray:
        g, _ = self._inner_grad(params, self._mixed(poison_inputs))
        return params.data - self.inner_lr * self._affine_mask(params, g.real)

    def value(self, params: ParamVector, poison_inputs) -> float:
        adapted = self._adapted(params, poison_inputs)
        trace = forward(self.spec, params, self.benign_inputs, mode="train",
                        _data=adapted)
        return float(self._outer.evaluate(trace).value)

    def grads(self, params: ParamVector, poison_inputs,
              ) -> tuple[float, np.ndarray, np.ndarray]:
        """Returns (value, d poison inputs, d params).

        Uses one complex-step Hessian-vector product for the second-order
        term: with w the outer gradient at the adapted parameters and M
        the affine mask, d/dx [w . M grad_inner(x, theta)] equals
        Im(grad_inner(x, theta + i h M w)) / h.
        """
        poison_inputs = np.asarray(poison_inputs, dtype=np.float64)
        n_poison = poison_inputs.shape[0] if poison_inputs.size else 0
        mixed = self._mixed(poison_inputs)

        inner_g, _ = self._inner_grad(params, mixed)
        adapted = params.data - self.inner_lr * self._affine_mask(params, inner_g.real)

        outer_trace = forward(self.spec, params, self.benign_inputs,
                              mode="train", _data=adapted)
        ev = self._outer.evaluate(outer_trace)
        w, _ = backward(self.spec, params, outer_trace, ev.d_logits)
        w = w.real

        v = self._affine_mask(params, w)

        if self.inner_lr == 0.0 or not np.any(v):
            hvp_theta = np.zeros_like(w)
            hvp_x = np.zeros_like(mixed)
        else:
            cdata = params.data.astype(np.complex128) + 1j * CSTEP * v
            g_c, dx_c = self._inner_grad(params, mixed, _data=cdata)
            hvp_theta = g_c.imag / CSTEP
            hvp_x = dx_c.imag / CSTEP

        d_params = w - self.inner_lr * hvp_theta
        d_poison = -self.inner_lr * hvp_x[:n_poison] if n_poison else np.zeros((0, mixed.shape[1]))
        return float(ev.value), d_poison, d_params


#: Names of every registered loss, for the gradient-check suite.
REGISTERED_LOSSES = (
    "entropy",
    "cross_entropy",
    "nhe",
    "ble",
    "bn_shift",
    "maxce",
    "tepa",
    "moment_match",
    "gaussian_kl",
    "dia",
)
