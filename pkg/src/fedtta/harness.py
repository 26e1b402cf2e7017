"""Experiment configuration, source pretraining, runs, sweeps, emission.

Configs are TOML documents with sections mirroring ExperimentConfig plus
dotted-path overrides. Every run is a pure function of its config: the
summary carries a config hash and reruns reproduce byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attack import Attacker, AttackConfig, BenignPool
from .datasets import (
    CORRUPTION_KINDS,
    ClientStream,
    LabeledSet,
    gen_source,
    partition,
)
from .errors import ConfigError
from .federation import PhaseAudit, RoundRecord, ServerConfig, World, run_experiment
from .losses import LabelCrossEntropyLoss
from .metrics import RoundMetrics
from .network import ModelSpec, backward, forward, init_params, mlp_spec
from .params import TRAINABLE_ROLES, ParamVector
from .seeding import rng_for
from .tta import TtaConfig, update_running_stats

SWEEP_AXES = ("adversary-count", "poison-ratio", "batch-size", "rounds")

#: Expected accuracy trend direction along each sweep axis.
SWEEP_DIRECTIONS = {
    "adversary-count": "non-increasing",
    "poison-ratio": "non-increasing",
    "batch-size": "non-decreasing",
    "rounds": "non-increasing",
}


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    classes: int = 5
    dims: int = 16
    per_class: int = 1100
    pretrain_per_class: int = 320
    eval_per_class: int = 80
    severity: int = 5
    corruptions: tuple[str, ...] = CORRUPTION_KINDS
    cifar_path: str | None = None
    cifar_corruption: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "cifar10c"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        for c in self.corruptions:
            if c not in CORRUPTION_KINDS and c != "none":
                raise ConfigError(f"unknown corruption kind {c!r}")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (32,)


@dataclass(frozen=True)
class PretrainConfig:
    learning_rate: float = 0.4
    epochs: int = 80
    batch_size: int = 64
    target_accuracy: float = 0.95
    min_accuracy: float = 0.60


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    rounds: int = 8
    n_clients: int = 10
    n_adversaries: int = 5
    batch_size: int = 100
    eval_holdouts: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    tta: TtaConfig = field(default_factory=TtaConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    include_running_stats: bool = True
    continual: bool = False
    parallel: bool = False
    out_dir: str | None = None

    def __post_init__(self) -> None:
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if not 0 <= self.n_adversaries <= self.n_clients:
            raise ConfigError("adversary count must lie in [0, clients]")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")

    def canonical_dict(self) -> dict:
        def unpack(obj):
            if hasattr(obj, "__dataclass_fields__"):
                return {k: unpack(getattr(obj, k))
                        for k in sorted(obj.__dataclass_fields__)}
            if isinstance(obj, (tuple, list)):
                return [unpack(v) for v in obj]
            return obj

        return unpack(self)

    def config_hash(self) -> str:
        doc = json.dumps(self.canonical_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(doc).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Config file parsing
# ---------------------------------------------------------------------------

_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "tta": TtaConfig,
    "server": ServerConfig,
    "attack": AttackConfig,
    "pretrain": PretrainConfig,
}


def _coerce_fields(cls, doc: dict):
    fields = cls.__dataclass_fields__
    kwargs = {}
    for key, value in doc.items():
        if key not in fields:
            raise ConfigError(f"unknown {cls.__name__} field {key!r}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    kwargs = {}
    for section, cls in _SECTION_TYPES.items():
        if section in doc:
            kwargs[section] = _coerce_fields(cls, doc.pop(section))
    top = doc.pop("experiment", {})
    overlap = set(top) & set(kwargs)
    if overlap:
        raise ConfigError(f"duplicate sections: {sorted(overlap)}")
    for key, value in {**doc, **top}.items():
        if key in _SECTION_TYPES:
            continue
        if key not in ExperimentConfig.__dataclass_fields__:
            raise ConfigError(f"unknown experiment field {key!r}")
        kwargs[key] = value
    if "seed" not in kwargs:
        raise ConfigError("seed is mandatory")
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    for item in overrides or []:
        doc = _apply_override(doc, item)
    return config_from_dict(doc)


def _parse_literal(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(doc: dict, item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override must look like section.key=value: {item!r}")
    path, raw = item.split("=", 1)
    keys = path.strip().split(".")
    value = _parse_literal(raw.strip())
    node = doc
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {path!r} crosses a non-table value")
    node[keys[-1]] = value
    return doc


# ---------------------------------------------------------------------------
# Source pretraining
# ---------------------------------------------------------------------------

def _split_source(config: ExperimentConfig) -> tuple[LabeledSet, LabeledSet, LabeledSet]:
    """One generated set split into pretrain / clean-eval / client pools."""
    d = config.dataset
    total = d.pretrain_per_class + d.eval_per_class + d.per_class
    full = gen_source(config.seed, d.classes, d.dims, total)
    k = d.classes
    # generation interleaves classes, so contiguous slices stay balanced
    n_pre = d.pretrain_per_class * k
    n_eval = d.eval_per_class * k

    def piece(lo, hi):
        return LabeledSet(inputs=full.inputs[lo:hi], labels=full.labels[lo:hi],
                          num_classes=k, seed=config.seed)

    return piece(0, n_pre), piece(n_pre, n_pre + n_eval), piece(n_pre + n_eval, full.size)


def pretrain_source(config: ExperimentConfig,
                    train: LabeledSet | None = None,
                    clean_eval: LabeledSet | None = None,
                    ) -> tuple[ModelSpec, ParamVector, float]:
    """Train the toy source model on clean data with labeled cross-entropy."""
    if config.dataset.kind != "synthetic":
        raise ConfigError("pretraining is only defined for the synthetic benchmark")
    if train is None or clean_eval is None:
        train, clean_eval, _ = _split_source(config)
    spec = mlp_spec(config.dataset.dims, list(config.model.hidden),
                    config.dataset.classes)
    params = init_params(spec, rng_for(config.seed, "init"))
    pc = config.pretrain
    rng = rng_for(config.seed, "pretrain")
    n = train.size
    accuracy = 0.0
    for _epoch in range(pc.epochs):
        order = rng.permutation(n)
        for start in range(0, n, pc.batch_size):
            sel = order[start:start + pc.batch_size]
            if sel.shape[0] < 2:
                continue
            x, y = train.inputs[sel], train.labels[sel]
            loss = LabelCrossEntropyLoss(y, spec.num_classes)
            trace = forward(spec, params, x, mode="train")
            ev = loss.evaluate(trace)
            gvec, _ = backward(spec, params, trace, ev.d_logits)
            data = params.data.copy()
            for sl in params.index.slices_for_roles(TRAINABLE_ROLES):
                data[sl] -= pc.learning_rate * gvec.real[sl]
            params = params.with_data(data)
            params = update_running_stats(params, spec, trace.bn_stats,
                                            config.tta.bn_momentum)
        trace = forward(spec, params, clean_eval.inputs, mode="eval")
        preds = np.argmax(trace.probs, axis=1)
        accuracy = float((preds == clean_eval.labels).mean())
        if accuracy >= pc.target_accuracy:
            break
    if accuracy < pc.min_accuracy:
        raise ConfigError(
            f"source model reached only {accuracy:.2%}; model too small"
        )
    return spec, params, accuracy


# ---------------------------------------------------------------------------
# World building and runs
# ---------------------------------------------------------------------------

def client_assignment(config: ExperimentConfig) -> list[tuple[str, int]]:
    kinds = config.dataset.corruptions
    return [(kinds[i % len(kinds)], config.dataset.severity)
            for i in range(config.n_clients)]


def build_world(config: ExperimentConfig, audit: PhaseAudit | None = None,
                ) -> tuple[World, float]:
    if config.dataset.kind == "cifar10c":
        raise ConfigError(
            "cifar10c is ingest-only (load_cifar10c); runs use the synthetic benchmark"
        )
    train, clean_eval, client_pool = _split_source(config)
    spec, source_params, source_acc = pretrain_source(config, train, clean_eval)

    assignment = client_assignment(config)
    # one extra holdout per client: the last one becomes the attacker pool
    streams = partition(client_pool, config.n_clients, assignment,
                        config.batch_size, retain_labels=True, seed=config.seed,
                        holdout_batches=config.eval_holdouts + 1)
    adversary_ids = list(range(config.n_clients - config.n_adversaries,
                               config.n_clients))
    attackers: dict[int, Attacker] = {}
    rebuilt: list[ClientStream] = []
    for stream in streams:
        role = "adversarial" if stream.client_id in adversary_ids else "benign"
        holdouts = stream.holdouts[:-1]
        pool_batch = stream.holdouts[-1]
        rebuilt.append(ClientStream(
            client_id=stream.client_id, batches=stream.batches,
            holdouts=holdouts, corruption=stream.corruption,
            severity=stream.severity, role=role, replay_seed=stream.replay_seed,
        ))
        if role == "adversarial":
            pool = BenignPool.from_batch(pool_batch, config.dataset.classes)
            attack = config.attack
            if attack.tap_layers is None:
                attack = replace(attack, tap_layers=spec.tapped_layers())
            attackers[stream.client_id] = Attacker(
                client_id=stream.client_id, spec=spec, config=attack,
                tta=config.tta, pool=pool,
                server_scale=config.server.server_scale,
                clip=config.server.clip, seed=config.seed,
            )
    server = replace(config.server, rounds=config.rounds)
    world = World(
        spec=spec, source_params=source_params, streams=rebuilt,
        tta=config.tta, server=server, seed=config.seed, rounds=config.rounds,
        attackers=attackers, continual=config.continual, parallel=config.parallel,
        audit=audit if audit is not None else PhaseAudit(),
    )
    return world, source_acc


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list[RoundRecord]
    metrics: list[RoundMetrics]
    attack_traces: list[dict]
    source_accuracy: float

    @property
    def overall_curve(self) -> list[float]:
        return [m.overall for m in self.metrics]

    @property
    def run_overall(self) -> float:
        """Steady-state overall accuracy: mean over the last half of rounds."""
        curve = self.overall_curve
        if not curve:
            return self.source_accuracy
        tail = max(1, len(curve) // 2)
        return float(np.mean(curve[-tail:]))

    def summary(self) -> dict:
        last = self.metrics[-1] if self.metrics else None
        return {
            "config_hash": self.config.config_hash(),
            "seed": self.config.seed,
            "rounds": self.config.rounds,
            "source_accuracy": self.source_accuracy,
            "run_overall": self.run_overall,
            "final_overall": last.overall if last else self.source_accuracy,
            "final_benign": last.benign_mean if last else self.source_accuracy,
            "final_adversarial": last.adversarial_mean if last else 0.0,
            "overall_curve": self.overall_curve,
        }


def run(config: ExperimentConfig, audit: PhaseAudit | None = None) -> RunResult:
    world, source_acc = build_world(config, audit=audit)
    records, metrics = run_experiment(world)
    traces = []
    for cid in sorted(world.attackers):
        traces.extend(world.attackers[cid].trace)
    return RunResult(config=config, records=records, metrics=metrics,
                     attack_traces=traces, source_accuracy=source_acc)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def _config_with_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "adversary-count":
        return replace(config, n_adversaries=int(value))
    if axis == "poison-ratio":
        return replace(config, attack=replace(config.attack, poison_ratio=float(value)))
    if axis == "batch-size":
        return replace(config, batch_size=int(value))
    if axis == "rounds":
        return replace(config, rounds=int(value))
    raise ConfigError(f"unknown sweep axis {axis!r}")


def _monotone(seq: list[float], direction: str, tol: float = 1e-9) -> bool:
    pairs = zip(seq, seq[1:])
    if direction == "non-increasing":
        return all(b <= a + tol for a, b in pairs)
    return all(b >= a - tol for a, b in pairs)


@dataclass
class SweepResult:
    axis: str
    values: list
    seeds: list[int]
    overall: dict[int, list[float]]   # seed -> run_overall per value
    direction: str

    def per_seed_monotone(self) -> dict[int, bool]:
        return {s: _monotone(self.overall[s], self.direction) for s in self.seeds}

    @property
    def trend_holds(self) -> bool:
        votes = list(self.per_seed_monotone().values())
        return sum(votes) * 2 > len(votes)

    def table(self) -> list[dict]:
        rows = []
        for i, v in enumerate(self.values):
            per_seed = [self.overall[s][i] for s in self.seeds]
            rows.append({
                "value": v,
                "overall_mean": float(np.mean(per_seed)),
                "overall_per_seed": per_seed,
            })
        return rows

    def summary(self) -> dict:
        return {
            "axis": self.axis,
            "direction": self.direction,
            "values": list(self.values),
            "seeds": list(self.seeds),
            "rows": self.table(),
            "per_seed_monotone": {str(k): v for k, v in
                                  self.per_seed_monotone().items()},
            "trend_holds": self.trend_holds,
        }


def sweep(config: ExperimentConfig, axis: str, values: list,
          n_seeds: int = 1) -> SweepResult:
    """One full experiment per value; seeds derived from the base seed."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    seeds = [config.seed + i for i in range(max(1, n_seeds))]
    overall: dict[int, list[float]] = {s: [] for s in seeds}
    for value in values:
        for s in seeds:
            cfg = replace(_config_with_axis(config, axis, value), seed=s)
            overall[s].append(run(cfg).run_overall)
    return SweepResult(axis=axis, values=list(values), seeds=seeds,
                       overall=overall, direction=SWEEP_DIRECTIONS[axis])


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def _atomic_write(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _metrics_csv(result: RunResult) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["round", "client", "role", "participated",
                     "accuracy", "mean_entropy", "delta_norm_pre",
                     "delta_norm_post"])
    streams = {m.round_index: m for m in result.metrics}
    for record in result.records:
        m = streams[record.round_index]
        for cid in sorted(m.accuracy):
            role = "adversarial" if cid in _adversary_ids(result.config) else "benign"
            writer.writerow([
                record.round_index, cid, role,
                int(cid in record.participants),
                repr(m.accuracy[cid]), repr(m.mean_entropy[cid]),
                repr(record.delta_norm_pre.get(cid, 0.0)),
                repr(record.delta_norm_post.get(cid, 0.0)),
            ])
    return buf.getvalue().encode("utf-8")


def _adversary_ids(config: ExperimentConfig) -> set[int]:
    return set(range(config.n_clients - config.n_adversaries, config.n_clients))


def _record_json(record: RoundRecord) -> dict:
    doc = {
        "round": record.round_index,
        "participants": record.participants,
        "delta_norm_pre": {str(k): v for k, v in sorted(record.delta_norm_pre.items())},
        "delta_norm_post": {str(k): v for k, v in sorted(record.delta_norm_post.items())},
    }
    if record.global_params is not None:
        doc["global_params"] = record.global_params.data.tolist()
    if record.personal_params is not None:
        doc["personal_params"] = {
            str(k): v.data.tolist() for k, v in sorted(record.personal_params.items())
        }
    return doc


def emit(result: RunResult, out_dir: str, formats: tuple[str, ...] = ("csv", "json"),
         extra_summary: dict | None = None) -> dict[str, str]:
    """Write run artifacts atomically; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    written: dict[str, str] = {}
    if "csv" in formats:
        path = os.path.join(out_dir, "metrics.csv")
        _atomic_write(path, _metrics_csv(result))
        written["csv"] = path
    if "json" in formats:
        summary = result.summary()
        if extra_summary:
            summary.update(extra_summary)
        path = os.path.join(out_dir, "summary.json")
        _atomic_write(path, (json.dumps(summary, sort_keys=True, indent=2) + "\n")
                      .encode("utf-8"))
        written["json"] = path
        rounds_path = os.path.join(out_dir, "rounds.jsonl")
        lines = "".join(json.dumps(_record_json(r), sort_keys=True) + "\n"
                        for r in result.records)
        _atomic_write(rounds_path, lines.encode("utf-8"))
        written["rounds"] = rounds_path
        attack_path = os.path.join(out_dir, "attack.jsonl")
        lines = "".join(json.dumps(t, sort_keys=True) + "\n"
                        for t in result.attack_traces)
        _atomic_write(attack_path, lines.encode("utf-8"))
        written["attack"] = attack_path
    return written


def emit_sweep(result: SweepResult, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"sweep_{result.axis}.json")
    _atomic_write(path, (json.dumps(result.summary(), sort_keys=True, indent=2)
                         + "\n").encode("utf-8"))
    return path
