"""Flat parameter vectors with a (layer, role) index map.

A model's state is one contiguous float64 vector. The index map assigns
each (layer index, role) pair a disjoint slice; together the slices cover
the vector. Updates are the same shape plus a role mask recording which
slices are populated (everything else is exactly zero).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

ROLES = ("weight", "bias", "bn_gamma", "bn_beta", "bn_run_mean", "bn_run_var")

#: Roles that hold batch-norm running statistics (updated by momentum,
#: never by gradients).
RUNNING_STAT_ROLES = frozenset({"bn_run_mean", "bn_run_var"})

#: Roles trainable by gradient descent.
TRAINABLE_ROLES = frozenset({"weight", "bias", "bn_gamma", "bn_beta"})

#: Batch-norm affine parameters (the TENT footprint).
BN_AFFINE_ROLES = frozenset({"bn_gamma", "bn_beta"})

ALL_ROLES = frozenset(ROLES)


@dataclass(frozen=True)
class IndexMap:
    """Maps (layer, role) -> slice of the flat vector."""

    entries: tuple[tuple[int, str, int, int], ...]  # (layer, role, start, stop)
    size: int

    @classmethod
    def build(cls, sizes: list[tuple[int, str, int]]) -> "IndexMap":
        """Lay out slices contiguously in the given order.

        ``sizes`` is a list of (layer, role, length).
        """
        entries = []
        offset = 0
        seen = set()
        for layer, role, length in sizes:
            if role not in ROLES:
                raise DimensionError(f"unknown parameter role {role!r}")
            if (layer, role) in seen:
                raise DimensionError(f"duplicate slice for layer {layer} role {role}")
            seen.add((layer, role))
            entries.append((layer, role, offset, offset + length))
            offset += length
        return cls(entries=tuple(entries), size=offset)

    def slice_of(self, layer: int, role: str) -> slice:
        for lay, rol, start, stop in self.entries:
            if lay == layer and rol == role:
                return slice(start, stop)
        raise DimensionError(f"no slice for layer {layer} role {role}")

    def slices_for_roles(self, roles: frozenset[str]) -> list[slice]:
        return [
            slice(start, stop)
            for _, role, start, stop in self.entries
            if role in roles
        ]

    def roles_present(self) -> frozenset[str]:
        return frozenset(role for _, role, _, _ in self.entries)

    def to_json(self) -> str:
        return json.dumps(
            {
                "size": self.size,
                "slices": [
                    {"layer": l, "role": r, "start": a, "stop": b}
                    for l, r, a, b in self.entries
                ],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "IndexMap":
        doc = json.loads(text)
        entries = tuple(
            (int(e["layer"]), str(e["role"]), int(e["start"]), int(e["stop"]))
            for e in doc["slices"]
        )
        im = cls(entries=entries, size=int(doc["size"]))
        im._validate()
        return im

    def _validate(self) -> None:
        covered = np.zeros(self.size, dtype=bool)
        for _, role, start, stop in self.entries:
            if role not in ROLES:
                raise DimensionError(f"unknown parameter role {role!r}")
            if start < 0 or stop > self.size or start > stop:
                raise DimensionError("slice out of bounds")
            if covered[start:stop].any():
                raise DimensionError("overlapping slices")
            covered[start:stop] = True
        if not covered.all():
            raise DimensionError("slices do not cover the vector")

    def __post_init__(self) -> None:
        self._validate()


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True).reshape(-1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ParamVector:
    """Full model state: one flat vector plus its index map."""

    data: np.ndarray
    index: IndexMap

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _frozen(self.data))
        if self.data.shape != (self.index.size,):
            raise DimensionError(
                f"vector length {self.data.shape[0]} != index map size {self.index.size}"
            )
        for sl in self.index.slices_for_roles(frozenset({"bn_run_var"})):
            if (self.data[sl] < 0).any():
                raise DimensionError("bn running variance must be >= 0")

    def get(self, layer: int, role: str) -> np.ndarray:
        return self.data[self.index.slice_of(layer, role)]

    def replace(self, layer: int, role: str, values: np.ndarray) -> "ParamVector":
        sl = self.index.slice_of(layer, role)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape[0] != sl.stop - sl.start:
            raise DimensionError("replacement length mismatch")
        data = self.data.copy()
        data[sl] = values
        return ParamVector(data=data, index=self.index)

    def with_data(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(data=data, index=self.index)


@dataclass(frozen=True)
class ParamDelta:
    """Update with the same shape; ``mask`` marks populated roles."""

    data: np.ndarray
    index: IndexMap
    mask: frozenset[str] = field(default=ALL_ROLES)

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _frozen(self.data))
        object.__setattr__(self, "mask", frozenset(self.mask))
        if self.data.shape != (self.index.size,):
            raise DimensionError(
                f"delta length {self.data.shape[0]} != index map size {self.index.size}"
            )
        unmasked = ALL_ROLES - self.mask
        for sl in self.index.slices_for_roles(unmasked):
            if np.any(self.data[sl] != 0.0):
                raise DimensionError("unmasked delta slices must be exactly zero")

    @classmethod
    def zeros(cls, index: IndexMap, mask: frozenset[str] = ALL_ROLES) -> "ParamDelta":
        return cls(data=np.zeros(index.size), index=index, mask=mask)

    @classmethod
    def from_vector(
        cls, values: np.ndarray, index: IndexMap, mask: frozenset[str] = ALL_ROLES
    ) -> "ParamDelta":
        """Keep only masked slices of ``values``; zero the rest."""
        data = np.zeros(index.size)
        for sl in index.slices_for_roles(frozenset(mask)):
            data[sl] = values[sl]
        return cls(data=data, index=index, mask=mask)

    def get(self, layer: int, role: str) -> np.ndarray:
        return self.data[self.index.slice_of(layer, role)]

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def scaled(self, a: float) -> "ParamDelta":
        return ParamDelta(data=a * self.data, index=self.index, mask=self.mask)

    def restricted(self, mask: frozenset[str]) -> "ParamDelta":
        return ParamDelta.from_vector(self.data, self.index, frozenset(mask))


def param_axpy(a: float, x: ParamDelta, y: ParamVector) -> ParamVector:
    """Return ``y + a * x`` with the index map preserved."""
    if x.index != y.index:
        raise DimensionError("axpy operands have different index maps")
    return ParamVector(data=y.data + a * x.data, index=y.index)


def clamp_running_var(data: np.ndarray, index: IndexMap,
                      floor: float = 0.0) -> np.ndarray:
    """Project raw parameter data onto the valid domain (running var >= floor).

    Update arithmetic (aggregation with scale > 1, surrogate estimates,
    correction steps) can overshoot below zero; model states must stay in
    the valid domain.
    """
    out = np.array(data, copy=True)
    for sl in index.slices_for_roles(frozenset({"bn_run_var"})):
        np.maximum(out[sl], floor, out=out[sl])
    return out


def delta_between(after: ParamVector, before: ParamVector,
                  mask: frozenset[str] = ALL_ROLES) -> ParamDelta:
    """Masked difference ``after - before``."""
    if after.index != before.index:
        raise DimensionError("difference operands have different index maps")
    return ParamDelta.from_vector(after.data - before.data, after.index, mask)


def delta_mean(deltas: list[ParamDelta], weights: list[float]) -> ParamDelta:
    """Weighted sum of deltas (weights need not sum to 1)."""
    if not deltas:
        raise DimensionError("empty delta list")
    index = deltas[0].index
    acc = np.zeros(index.size)
    mask: frozenset[str] = frozenset()
    for d, w in zip(deltas, weights):
        if d.index != index:
            raise DimensionError("deltas have different index maps")
        acc += w * d.data
        mask = mask | d.mask
    return ParamDelta(data=acc, index=index, mask=mask)


def save_params(params: ParamVector, data_path, sidecar_path) -> None:
    """Write a flat little-endian f64 array plus a JSON index-map sidecar."""
    params.data.astype("<f8").tofile(data_path)
    with open(sidecar_path, "w") as fh:
        fh.write(params.index.to_json())


def load_params(data_path, sidecar_path) -> ParamVector:
    with open(sidecar_path) as fh:
        index = IndexMap.from_json(fh.read())
    data = np.fromfile(data_path, dtype="<f8")
    return ParamVector(data=data, index=index)
