"""Server-side round loop: sampling, clipping, and aggregation strategies.

The engine is deterministic in the master seed: every stochastic site
draws from its own (seed, site, id, round) stream, so per-round client
work can run sequentially or in threads with identical results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datasets import ClientStream
from .errors import ConfigError, ProtocolError
from .metrics import RoundMetrics, evaluate
from .network import ModelSpec
from .params import ParamDelta, ParamVector, clamp_running_var, param_axpy
from .seeding import rng_for
from .tta import TtaConfig, init_state, local_round

STRATEGIES = ("fedavg", "fedprox", "sim-weighted", "amp-weighted")


@dataclass(frozen=True)
class ServerConfig:
    strategy: str = "fedavg"
    server_scale: float = 1.0          # eta in the aggregation rule
    participation: float = 1.0
    rounds: int = 10
    clip: float | None = None
    fedprox_mu: float = 0.0
    similarity_temp: float = 1.0
    self_weight: float = 0.25          # amp-weighted mixing floor

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown aggregation strategy {self.strategy!r}")
        if self.server_scale <= 0:
            raise ConfigError("server scale must be > 0")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError("participation rate must lie in (0, 1]")
        if self.clip is not None and self.clip <= 0:
            raise ConfigError("clip bound must be > 0 when set")
        if self.fedprox_mu < 0:
            raise ConfigError("fedprox mu must be >= 0")
        if self.similarity_temp <= 0:
            raise ConfigError("similarity temperature must be > 0")
        if not 0.0 <= self.self_weight <= 1.0:
            raise ConfigError("self weight must lie in [0, 1]")

    @property
    def personalized(self) -> bool:
        return self.strategy in ("sim-weighted", "amp-weighted")


@dataclass
class RoundRecord:
    round_index: int
    participants: list[int]
    delta_norm_pre: dict[int, float]
    delta_norm_post: dict[int, float]
    global_params: ParamVector | None
    personal_params: dict[int, ParamVector] | None = None

    def validate_clip(self, clip: float | None) -> None:
        if clip is None:
            return
        for cid, norm in self.delta_norm_post.items():
            if norm > clip * (1.0 + 1e-12):
                raise ProtocolError(f"client {cid} post-clip norm {norm} > {clip}")


def sample_clients(round_index: int, n_clients: int, rate: float, seed: int,
                   ) -> list[int]:
    """Independent Bernoulli inclusion, minimum one participant."""
    if not 0.0 < rate <= 1.0:
        raise ConfigError("participation rate must lie in (0, 1]")
    rng = rng_for(seed, "sample", round_index)
    draws = rng.random(n_clients)
    chosen = [i for i in range(n_clients) if draws[i] < rate]
    if not chosen:
        chosen = [int(rng.integers(n_clients))]
    return chosen


def clip_delta(delta: ParamDelta, clip: float | None) -> ParamDelta:
    """Scale down to the norm bound; direction and role mask preserved."""
    if clip is None:
        return delta
    if clip <= 0:
        raise ConfigError("clip bound must be > 0")
    norm = delta.norm()
    if norm <= clip:
        return delta
    return delta.scaled(clip / norm)


def _normalized_weights(deltas: dict[int, ParamDelta],
                        weights: dict[int, float]) -> dict[int, float]:
    total = sum(weights[i] for i in deltas)
    if total <= 0:
        raise ProtocolError("aggregation weights must be positive")
    return {i: weights[i] / total for i in deltas}


def _similarity_matrix(ids: list[int], deltas: dict[int, ParamDelta],
                       temp: float) -> np.ndarray:
    """Row-stochastic softmax over pairwise cosine similarities."""
    mat = np.stack([deltas[i].data for i in ids])
    norms = np.linalg.norm(mat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = mat / safe[:, None]
    cos = unit @ unit.T
    cos[norms == 0, :] = 0.0
    cos[:, norms == 0] = 0.0
    logits = cos / temp
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def aggregate(global_params: ParamVector, deltas: dict[int, ParamDelta],
              weights: dict[int, float], config: ServerConfig,
              bases: dict[int, ParamVector] | None = None):
    """Combine client updates.

    fedavg/fedprox return one new global vector. The similarity-weighted
    strategies return a personalized vector per participant: client i
    receives its base plus eta times the similarity-softmax mix of all
    participants' deltas (amp additionally mixes a self-weight floor).
    """
    if not deltas:
        raise ProtocolError("no client updates to aggregate")
    eta = config.server_scale
    if config.strategy in ("fedavg", "fedprox"):
        norm_w = _normalized_weights(deltas, weights)
        acc = np.zeros(global_params.index.size)
        for cid, delta in deltas.items():
            acc += norm_w[cid] * delta.data
        data = clamp_running_var(global_params.data + eta * acc, global_params.index)
        return global_params.with_data(data)

    ids = sorted(deltas)
    sim = _similarity_matrix(ids, deltas, config.similarity_temp)
    if config.strategy == "amp-weighted":
        rho = config.self_weight
        sim = (1.0 - rho) * sim + rho * np.eye(len(ids))
    out: dict[int, ParamVector] = {}
    for row, cid in enumerate(ids):
        base = bases[cid] if bases is not None else global_params
        acc = np.zeros(base.index.size)
        for col, other in enumerate(ids):
            acc += sim[row, col] * deltas[other].data
        out[cid] = base.with_data(clamp_running_var(base.data + eta * acc, base.index))
    return out


class PhaseAudit:
    """Hook points the engine fires around client work; tests subclass."""

    def begin(self, phase: str, client_id: int | None = None) -> None:  # noqa: ARG002
        return None


@dataclass
class World:
    """Everything one experiment needs, fully built."""

    spec: ModelSpec
    source_params: ParamVector
    streams: list[ClientStream]
    tta: TtaConfig
    server: ServerConfig
    seed: int
    rounds: int
    attackers: dict[int, object] = field(default_factory=dict)
    continual: bool = False          # carry adapted state across rounds
    parallel: bool = False
    audit: PhaseAudit = field(default_factory=PhaseAudit)

    def __post_init__(self) -> None:
        n = len(self.streams)
        for i, s in enumerate(self.streams):
            if s.client_id != i:
                raise ConfigError("streams must be ordered by client id")
        for cid in self.attackers:
            if not 0 <= cid < n:
                raise ConfigError(f"attacker id {cid} out of range")
            if self.streams[cid].role != "adversarial":
                raise ConfigError(f"attacker {cid} stream not marked adversarial")

    @property
    def n_clients(self) -> int:
        return len(self.streams)


def _honest_round(world: World, cid: int, broadcast: ParamVector,
                  prev_state, round_index: int):
    stream = world.streams[cid]
    batch = stream.adapt_batch(round_index).without_labels()
    if world.continual and prev_state is not None:
        state = prev_state
        state = init_state(state.params, world.tta,
                           rng=rng_for(world.seed, "client", cid, round_index))
    else:
        state = init_state(broadcast, world.tta,
                           rng=rng_for(world.seed, "client", cid, round_index))
    prox = None
    if world.server.strategy == "fedprox" and world.server.fedprox_mu > 0:
        prox = (world.server.fedprox_mu, broadcast)
    delta, state, _ = local_round(state, [batch], world.tta, world.spec, prox=prox)
    return cid, delta, state


def run_experiment(world: World) -> tuple[list[RoundRecord], list[RoundMetrics]]:
    """Execute the full protocol; deterministic in the master seed."""
    n = world.n_clients
    weights = {i: float(world.streams[i].batches[0].size) for i in range(n)}
    global_params = world.source_params
    bases = {i: world.source_params for i in range(n)}
    current_params: dict[int, ParamVector] = {i: world.source_params for i in range(n)}
    states: dict[int, object] = {i: None for i in range(n)}

    records: list[RoundRecord] = []
    metrics: list[RoundMetrics] = []
    for t in range(world.rounds):
        participants = sample_clients(t, n, world.server.participation, world.seed)
        honest = [i for i in participants if i not in world.attackers]
        adversarial = [i for i in participants if i in world.attackers]

        if world.server.personalized:
            broadcasts = {i: bases[i] for i in range(n)}
        else:
            broadcasts = {i: global_params for i in range(n)}

        # attackers observe their broadcast first (history + distillation)
        for cid in adversarial:
            world.audit.begin("attacker", cid)
            world.attackers[cid].observe_broadcast(broadcasts[cid], t)

        world.audit.begin("honest")
        deltas: dict[int, ParamDelta] = {}
        if world.parallel and len(honest) > 1:
            with ThreadPoolExecutor(max_workers=min(8, len(honest))) as pool:
                futures = [
                    pool.submit(_honest_round, world, cid, broadcasts[cid],
                                states[cid], t)
                    for cid in honest
                ]
                results = [f.result() for f in futures]
        else:
            results = [
                _honest_round(world, cid, broadcasts[cid], states[cid], t)
                for cid in honest
            ]
        for cid, delta, state in results:
            deltas[cid] = delta
            states[cid] = state
            current_params[cid] = state.params

        true_others: ParamDelta | None = None
        for cid in adversarial:
            world.audit.begin("attacker", cid)
            attacker = world.attackers[cid]
            if getattr(attacker, "mode", "grey-box") == "white-box":
                # diagnostic privilege: exact honest contribution this round
                acc = np.zeros(global_params.index.size)
                total_w = sum(weights[i] for i in participants)
                for hid in honest:
                    acc += (weights[hid] / total_w) * deltas[hid].data
                true_others = ParamDelta(data=acc, index=global_params.index)
            batch = world.streams[cid].adapt_batch(t)
            own_weight = weights[cid] / sum(weights[i] for i in participants)
            delta, state = attacker.attacker_round(
                broadcasts[cid], batch, t, own_weight=own_weight,
                true_others=true_others,
            )
            deltas[cid] = delta
            states[cid] = state
            current_params[cid] = state.params

        world.audit.begin("server")
        if not deltas:
            raise ProtocolError("round produced no updates")
        pre = {cid: d.norm() for cid, d in deltas.items()}
        clipped = {cid: clip_delta(d, world.server.clip) for cid, d in deltas.items()}
        post = {cid: d.norm() for cid, d in clipped.items()}

        if world.server.personalized:
            part_bases = {cid: bases[cid] for cid in clipped}
            updated = aggregate(global_params, clipped, weights, world.server,
                                bases=part_bases)
            for cid, vec in updated.items():
                bases[cid] = vec
            record = RoundRecord(t, sorted(participants), pre, post,
                                 global_params=None, personal_params=dict(updated))
        else:
            global_params = aggregate(global_params, clipped, weights, world.server)
            record = RoundRecord(t, sorted(participants), pre, post,
                                 global_params=global_params)
        record.validate_clip(world.server.clip)
        records.append(record)
        metrics.append(evaluate(world.spec, current_params, world.streams, t,
                                tta_method=world.tta.method))
    return records, metrics
