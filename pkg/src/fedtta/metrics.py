"""Per-round evaluation on held-out labeled batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import ClientStream
from .errors import ConfigError
from .network import ModelSpec, entropy, forward
from .params import ParamVector


@dataclass(frozen=True)
class RoundMetrics:
    round_index: int
    accuracy: dict[int, float]        # client id -> held-out accuracy
    mean_entropy: dict[int, float]    # client id -> mean prediction entropy
    benign_mean: float                # sample-weighted over benign clients
    adversarial_mean: float           # over adversarial clients' clean holdouts
    overall: float                    # sample-weighted over all clients

    def __post_init__(self) -> None:
        for v in self.accuracy.values():
            if not 0.0 <= v <= 1.0:
                raise ConfigError("accuracy outside [0, 1]")


def evaluate(spec: ModelSpec, params_by_id: dict[int, ParamVector],
             streams: list[ClientStream], round_index: int,
             tta_method: str = "tent") -> RoundMetrics:
    """Accuracy of each client's current model on its held-out batch.

    The adapted model is applied as a fixed function (running statistics):
    held-out batches must not influence normalization, otherwise scoring
    itself would be a second round of adaptation.
    """
    if not streams:
        raise ConfigError("no clients to evaluate")
    mode = "eval"
    del tta_method  # kept for the call-site contract; all methods score alike
    accuracy: dict[int, float] = {}
    mean_entropy: dict[int, float] = {}
    correct = {"benign": 0, "adversarial": 0}
    totals = {"benign": 0, "adversarial": 0}
    for stream in streams:
        batch = stream.eval_batch(round_index)
        if batch.labels is None:
            raise ConfigError(f"client {stream.client_id} holdout batch is unlabeled")
        trace = forward(spec, params_by_id[stream.client_id], batch.inputs, mode=mode)
        preds = np.argmax(trace.probs, axis=1)
        n_correct = int((preds == batch.labels).sum())
        accuracy[stream.client_id] = n_correct / batch.size
        mean_entropy[stream.client_id] = float(entropy(trace.probs).mean())
        correct[stream.role] += n_correct
        totals[stream.role] += batch.size
    benign = correct["benign"] / totals["benign"] if totals["benign"] else 0.0
    adversarial = (correct["adversarial"] / totals["adversarial"]
                   if totals["adversarial"] else 0.0)
    overall = (correct["benign"] + correct["adversarial"]) / (
        totals["benign"] + totals["adversarial"]
    )
    return RoundMetrics(
        round_index=round_index, accuracy=accuracy, mean_entropy=mean_entropy,
        benign_mean=benign, adversarial_mean=adversarial, overall=overall,
    )
