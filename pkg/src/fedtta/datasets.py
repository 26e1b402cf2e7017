"""Synthetic domain-shift benchmark, client partitioning, and file formats.

The synthetic source set is Gaussian class clusters with fixed means in
the unit cube. Four parametric corruption families stand in for the image
corruption suites: their strength grows monotonically with severity 1..5
and severity 0 is the identity.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, IngestError, InsufficientDataError
from .seeding import rng_for

CORRUPTION_KINDS = ("shift", "scale", "noise", "blur-mix")

# severity-1 strength per kind; severity s scales linearly
SHIFT_STEP = 0.06
SCALE_STEP = 0.22
NOISE_STEP = 0.035
BLUR_STEP = 0.09


@dataclass(frozen=True)
class LabeledSet:
    inputs: np.ndarray          # [N, D] float64 in [0, 1]
    labels: np.ndarray          # [N] int64 in {0..K-1}
    num_classes: int
    seed: int = 0
    corruption: str = "none"
    severity: int = 0

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        if inputs.ndim != 2 or labels.ndim != 1 or inputs.shape[0] != labels.shape[0]:
            raise DimensionError("inputs must be [N, D] with one label per row")
        if inputs.shape[0] < self.num_classes:
            raise InsufficientDataError("need at least one sample per class")
        present = np.unique(labels)
        if present.min() < 0 or present.max() >= self.num_classes:
            raise DimensionError("label outside {0..K-1}")
        if present.shape[0] != self.num_classes:
            raise InsufficientDataError("every class must be present at least once")
        if inputs.min() < 0.0 or inputs.max() > 1.0:
            raise DimensionError("inputs must lie in [0, 1]")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def dims(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray                      # [B, D]
    labels: np.ndarray | None = None        # [B] or None when withheld
    poison_mask: np.ndarray | None = None   # [B] bool; None means all clean

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=np.float64)
        object.__setattr__(self, "inputs", inputs)
        if inputs.ndim != 2:
            raise DimensionError("batch inputs must be [B, D]")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (inputs.shape[0],):
                raise DimensionError("labels length must match batch size")
            object.__setattr__(self, "labels", labels)
        mask = self.poison_mask
        if mask is None:
            mask = np.zeros(inputs.shape[0], dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (inputs.shape[0],):
                raise DimensionError("poison mask length must match batch size")
        object.__setattr__(self, "poison_mask", mask)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def without_labels(self) -> "Batch":
        return Batch(inputs=self.inputs, labels=None, poison_mask=self.poison_mask)


@dataclass
class ClientStream:
    """One client's ordered batch stream plus held-out labeled batches."""

    client_id: int
    batches: list[Batch]
    holdouts: list[Batch] = field(default_factory=list)
    corruption: str = "none"
    severity: int = 0
    role: str = "benign"
    replay_seed: int = 0

    def __post_init__(self) -> None:
        if self.severity not in range(0, 6):
            raise ConfigError("severity must be in 0..5")
        widths = {b.inputs.shape[1] for b in self.batches + self.holdouts}
        if len(widths) > 1:
            raise DimensionError("all batches in a stream must share one width")
        if self.role not in ("benign", "adversarial"):
            raise ConfigError(f"unknown client role {self.role!r}")

    def adapt_batch(self, round_index: int) -> Batch:
        """Cycle through the stream, reshuffling order each full pass."""
        n = len(self.batches)
        if n == 0:
            raise ConfigError(f"client {self.client_id} has an empty stream")
        epoch, pos = divmod(round_index, n)
        if epoch == 0:
            return self.batches[pos]
        order = rng_for(self.replay_seed, "replay", self.client_id, epoch).permutation(n)
        return self.batches[int(order[pos])]

    def eval_batch(self, round_index: int) -> Batch:
        if not self.holdouts:
            raise ConfigError(f"client {self.client_id} has no held-out batches")
        return self.holdouts[round_index % len(self.holdouts)]


def gen_source(seed: int, classes: int, dims: int, per_class: int,
               spread: float = 0.24, cluster_std: float = 0.065) -> LabeledSet:
    """Gaussian class clusters with fixed means, scaled into [0, 1]."""
    if classes < 2 or dims < 2:
        raise ConfigError("need at least 2 classes and 2 dimensions")
    if per_class < 2:
        raise InsufficientDataError("need at least 2 samples per class")
    rng = rng_for(seed, "gen_source")
    means = rng.normal(size=(classes, dims))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    centers = 0.5 + spread * means
    inputs = np.empty((classes * per_class, dims))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for k in range(classes):
        pts = centers[k] + cluster_std * rng.normal(size=(per_class, dims))
        inputs[k::classes] = pts  # interleave classes for balanced slicing
        labels[k::classes] = k
    np.clip(inputs, 0.0, 1.0, out=inputs)
    return LabeledSet(inputs=inputs, labels=labels, num_classes=classes, seed=seed)


def corrupt(dataset: LabeledSet, kind: str, severity: int, seed: int) -> LabeledSet:
    """Apply one corruption family at the given severity; labels unchanged."""
    if severity not in range(0, 6):
        raise ConfigError("severity must be in 0..5")
    if kind not in CORRUPTION_KINDS and kind != "none":
        raise ConfigError(f"unknown corruption kind {kind!r}")
    if severity == 0 or kind == "none":
        return LabeledSet(inputs=dataset.inputs, labels=dataset.labels,
                          num_classes=dataset.num_classes, seed=dataset.seed,
                          corruption="none", severity=0)
    rng = rng_for(seed, "corrupt", kind, severity)
    x = dataset.inputs.copy()
    if kind == "shift":
        direction = rng.normal(size=x.shape[1])
        direction /= np.linalg.norm(direction)
        x += SHIFT_STEP * severity * direction
    elif kind == "scale":
        factor = 1.0 / (1.0 + SCALE_STEP * severity)
        x = 0.5 + factor * (x - 0.5)
    elif kind == "noise":
        x += NOISE_STEP * severity * rng.normal(size=x.shape)
    elif kind == "blur-mix":
        # crossover blur: each sample mixes with another random sample,
        # degrading class evidence in a way normalization cannot undo
        lam = min(BLUR_STEP * severity, 0.49)
        partner = rng.permutation(x.shape[0])
        x = (1.0 - lam) * x + lam * x[partner]
    np.clip(x, 0.0, 1.0, out=x)
    return LabeledSet(inputs=x, labels=dataset.labels,
                      num_classes=dataset.num_classes, seed=dataset.seed,
                      corruption=kind, severity=severity)


def _deal_by_class(labels: np.ndarray, n_clients: int) -> list[np.ndarray]:
    """Deal sample indices to clients round-robin within each class."""
    shares: list[list[int]] = [[] for _ in range(n_clients)]
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        for j, i in enumerate(idx):
            shares[j % n_clients].append(int(i))
    return [np.array(sorted(s), dtype=np.int64) for s in shares]


def _balanced_batches(inputs: np.ndarray, labels: np.ndarray, batch_size: int,
                      retain_labels: bool) -> list[Batch]:
    """Chunk one client's share into class-balanced batches."""
    order = np.argsort(labels, kind="stable")
    # interleave classes: take one index per class in turn
    per_class = [order[labels[order] == c] for c in np.unique(labels)]
    interleaved = []
    for j in range(max(len(p) for p in per_class)):
        for p in per_class:
            if j < len(p):
                interleaved.append(int(p[j]))
    interleaved = np.array(interleaved, dtype=np.int64)
    batches = []
    for start in range(0, len(interleaved), batch_size):
        sel = interleaved[start:start + batch_size]
        batches.append(Batch(
            inputs=inputs[sel],
            labels=labels[sel] if retain_labels else None,
        ))
    if len(batches) >= 2 and batches[-1].size == 1:
        # a single-sample batch cannot produce batch statistics; merge it
        last = batches.pop()
        prev = batches.pop()
        merged_labels = None
        if prev.labels is not None:
            merged_labels = np.concatenate([prev.labels, last.labels])
        batches.append(Batch(
            inputs=np.concatenate([prev.inputs, last.inputs]),
            labels=merged_labels,
        ))
    return batches


def partition(dataset: LabeledSet, n_clients: int,
              assignment: list[tuple[str, int]], batch_size: int,
              retain_labels: bool = True, seed: int = 0,
              holdout_batches: int = 1) -> list[ClientStream]:
    """Split a set into disjoint per-client corrupted streams.

    ``assignment`` gives each client its (corruption kind, severity).
    The last ``holdout_batches`` batches of each client become labeled
    holdouts (never adapted on); the rest form the adaptation stream.
    """
    if n_clients < 1:
        raise ConfigError("need at least one client")
    if len(assignment) != n_clients:
        raise ConfigError("one (kind, severity) assignment per client required")
    if n_clients * batch_size > dataset.size:
        raise ConfigError(
            f"{n_clients} clients x batch {batch_size} exceeds {dataset.size} samples"
        )
    shares = _deal_by_class(dataset.labels, n_clients)
    streams = []
    for cid, share in enumerate(shares):
        if batch_size > share.shape[0]:
            raise ConfigError(
                f"batch size {batch_size} exceeds client {cid} share {share.shape[0]}"
            )
        kind, severity = assignment[cid]
        sub = LabeledSet(inputs=dataset.inputs[share], labels=dataset.labels[share],
                         num_classes=dataset.num_classes, seed=dataset.seed)
        shifted = corrupt(sub, kind, severity, seed=seed * 1000 + cid)
        batches = _balanced_batches(shifted.inputs, shifted.labels, batch_size,
                                    retain_labels=True)
        n_hold = min(holdout_batches, max(len(batches) - 1, 0))
        holdouts = batches[len(batches) - n_hold:] if n_hold else []
        adapt = batches[:len(batches) - n_hold]
        if not retain_labels:
            adapt = [b.without_labels() for b in adapt]
        streams.append(ClientStream(
            client_id=cid, batches=adapt, holdouts=holdouts,
            corruption=kind if severity else "none", severity=severity,
            role="benign", replay_seed=seed,
        ))
    return streams


def default_assignment(n_clients: int, severity: int = 5) -> list[tuple[str, int]]:
    """Each client gets a distinct corruption family, cycling the kinds."""
    return [(CORRUPTION_KINDS[i % len(CORRUPTION_KINDS)], severity)
            for i in range(n_clients)]


# ---------------------------------------------------------------------------
# CIFAR-10-C ingestion (published .npy array container files)
# ---------------------------------------------------------------------------

def load_cifar10c(path: str, corruption_name: str, severity: int) -> LabeledSet:
    """Load one corruption/severity slice from the published array files."""
    if severity not in range(1, 6):
        raise ConfigError("severity must be in 1..5")
    img_path = os.path.join(path, corruption_name + ".npy")
    lbl_path = os.path.join(path, "labels.npy")
    for p in (img_path, lbl_path):
        if not os.path.exists(p):
            raise IngestError(f"missing file: {p}")
    try:
        images = np.load(img_path)
    except ValueError as exc:
        raise IngestError(f"malformed header in {img_path}: {exc}") from exc
    try:
        labels = np.load(lbl_path)
    except ValueError as exc:
        raise IngestError(f"malformed header in {lbl_path}: {exc}") from exc
    if images.dtype != np.uint8:
        raise IngestError(f"images dtype: expected uint8, got {images.dtype}")
    if images.ndim != 4 or images.shape[1:] != (32, 32, 3):
        raise IngestError(f"images shape: expected [N, 32, 32, 3], got {images.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise IngestError(f"labels dtype: expected integer, got {labels.dtype}")
    if labels.shape[0] != images.shape[0]:
        raise IngestError(
            f"labels length: {labels.shape[0]} != image count {images.shape[0]}"
        )
    if images.shape[0] % 5 != 0:
        raise IngestError(f"image count: {images.shape[0]} not divisible by 5 severities")
    per = images.shape[0] // 5
    rows = slice((severity - 1) * per, severity * per)
    flat = images[rows].reshape(per, -1).astype(np.float64) / 255.0
    return LabeledSet(inputs=flat, labels=labels[rows].astype(np.int64),
                      num_classes=int(labels.max()) + 1,
                      corruption=corruption_name, severity=severity)


# ---------------------------------------------------------------------------
# Internal dataset format: JSON header + f64 payload + uint16 labels
# ---------------------------------------------------------------------------

def save_labeled(dataset: LabeledSet, path: str) -> None:
    header = {
        "K": dataset.num_classes,
        "D": dataset.dims,
        "N": dataset.size,
        "seed": dataset.seed,
        "corruption": dataset.corruption,
        "severity": dataset.severity,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(dataset.inputs.astype("<f8").tobytes())
        fh.write(dataset.labels.astype("<u2").tobytes())


def load_labeled(path: str) -> LabeledSet:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IngestError(f"malformed header in {path}: {exc}") from exc
        for key in ("K", "D", "N", "seed", "corruption", "severity"):
            if key not in header:
                raise IngestError(f"header field missing: {key}")
        n, d = int(header["N"]), int(header["D"])
        payload = fh.read(n * d * 8)
        if len(payload) != n * d * 8:
            raise IngestError("payload: truncated input array")
        raw_labels = fh.read(n * 2)
        if len(raw_labels) != n * 2:
            raise IngestError("labels: truncated label array")
        inputs = np.frombuffer(payload, dtype="<f8").reshape(n, d)
        labels = np.frombuffer(raw_labels, dtype="<u2").astype(np.int64)
    return LabeledSet(inputs=inputs, labels=labels, num_classes=int(header["K"]),
                      seed=int(header["seed"]), corruption=str(header["corruption"]),
                      severity=int(header["severity"]))
