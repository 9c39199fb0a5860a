"""Exact weight-disabling plans and their application.

Modes:
  - ln_pair: zero the (gamma, beta) pair at each (layer, dim) slot.
  - dense_row: zero the full output-feature row of the layer's output dense
    weight plus the matching bias entry (the pre-LN variant).
  - vector_dims: zero position d of a single named role's tensor (1-D), or
    column d for 2-D embedding tables.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import OutlierReport
from .checkpoint import Checkpoint, TensorRecord, _DTYPE_TO_NUMPY
from .errors import PlanError
from .schema import ComponentRef, GLOBAL_ROLES, ModelSchema, Role, resolve

_LN_PAIRS = {
    "output_ln": (Role.OUTPUT_LN_GAMMA, Role.OUTPUT_LN_BETA),
    "attn_ln": (Role.ATTN_LN_GAMMA, Role.ATTN_LN_BETA),
}


@dataclass(frozen=True)
class PlanEntry:
    """One homogeneous group of mask targets.

    ``role`` is an LN-pair name ("output_ln"/"attn_ln") for ln_pair mode,
    "output_dense" for dense_row mode, or a concrete Role value for
    vector_dims mode.
    """

    role: str
    layers: tuple[int, ...]
    dims: tuple[int, ...]
    mode: str  # "ln_pair" | "dense_row" | "vector_dims"

    def __post_init__(self):
        if self.mode not in ("ln_pair", "dense_row", "vector_dims"):
            raise PlanError(f"unknown mask mode {self.mode!r}")
        if self.mode == "ln_pair" and self.role not in _LN_PAIRS:
            raise PlanError(f"ln_pair mode needs an LN pair role, got {self.role!r}")
        object.__setattr__(self, "layers", tuple(sorted(set(self.layers))))
        object.__setattr__(self, "dims", tuple(sorted(set(self.dims))))


@dataclass(frozen=True)
class MaskPlan:
    entries: tuple[PlanEntry, ...]
    provenance: str = "manual"  # outliers | random | lsf | lb | manual
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"role": e.role, "layers": list(e.layers), "dims": list(e.dims), "mode": e.mode}
                for e in self.entries
            ],
            "provenance": self.provenance,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "MaskPlan":
        entries = tuple(
            PlanEntry(role=e["role"], layers=tuple(e["layers"]), dims=tuple(e["dims"]), mode=e["mode"])
            for e in payload.get("entries", [])
        )
        return cls(entries=entries, provenance=payload.get("provenance", "manual"),
                   seed=payload.get("seed"))

    def digest_payload(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def load_plan(path: str | Path) -> MaskPlan:
    with open(path, "r", encoding="utf-8") as fh:
        return MaskPlan.from_dict(json.load(fh))


def save_plan(plan: MaskPlan, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(plan.to_json())
        fh.write("\n")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str  # "random_dims" | "largest_scaling_factor" | "largest_bias"
    n: int
    exclude: frozenset[int] = frozenset()
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("random_dims", "largest_scaling_factor", "largest_bias"):
            raise PlanError(f"unknown baseline kind {self.kind!r}")
        if self.n < 0:
            raise PlanError("n must be non-negative")
        object.__setattr__(self, "exclude", frozenset(self.exclude))


def plan_outlier_mask(
    report: OutlierReport,
    layers: range | list[int] | None = None,
    dims: list[int] | None = None,
) -> MaskPlan:
    """ln_pair plan over (layers x dims) of a detection report's outliers."""
    if dims is None:
        dims = list(report.outlier_dims)
    else:
        extra = set(dims) - set(report.outlier_dims)
        if extra:
            raise PlanError(f"dims {sorted(extra)} are not outliers in the report")
    if layers is None:
        layers = range(report.num_layers)
    layers = list(layers)
    if any(not (0 <= l < report.num_layers) for l in layers):
        raise PlanError(f"layers out of range [0, {report.num_layers})")
    entry = PlanEntry(role="output_ln", layers=tuple(layers), dims=tuple(dims), mode="ln_pair")
    return MaskPlan(entries=(entry,), provenance="outliers")


def plan_baseline(checkpoint: Checkpoint, schema: ModelSchema, spec: BaselineSpec) -> MaskPlan:
    """Random / largest-scaling-factor / largest-bias comparison plans.

    random_dims picks n dimensions (masked across all layers); LSF/LB pick
    the n globally largest |gamma| (or |beta|) slots model-wide, each masked
    only in its own layer. Ties break by (layer, dim) ascending.
    """
    L, m = schema.num_layers, schema.hidden_dim
    if spec.kind == "random_dims":
        eligible = sorted(set(range(m)) - spec.exclude)
        if spec.n > len(eligible):
            raise PlanError(f"cannot draw {spec.n} dims from {len(eligible)} eligible")
        rng = np.random.default_rng(spec.seed)
        dims = sorted(int(eligible[i]) for i in rng.choice(len(eligible), size=spec.n, replace=False))
        entry = PlanEntry(role="output_ln", layers=tuple(range(L)), dims=tuple(dims), mode="ln_pair")
        return MaskPlan(entries=(entry,), provenance="random", seed=spec.seed)

    magnitude_role = (
        Role.OUTPUT_LN_GAMMA if spec.kind == "largest_scaling_factor" else Role.OUTPUT_LN_BETA
    )
    if spec.n > L * m:
        raise PlanError(f"cannot pick {spec.n} slots from {L * m}")
    slots = []
    for layer in range(L):
        vec = resolve(checkpoint, schema, ComponentRef(magnitude_role, layer)).as_array()
        mag = np.abs(vec.astype(np.float64))
        for dim in range(m):
            slots.append((-mag[dim], layer, dim))
    slots.sort()
    chosen = slots[: spec.n]
    entries = []
    by_layer: dict[int, list[int]] = {}
    for _, layer, dim in chosen:
        by_layer.setdefault(layer, []).append(dim)
    for layer in sorted(by_layer):
        entries.append(
            PlanEntry(role="output_ln", layers=(layer,), dims=tuple(sorted(by_layer[layer])), mode="ln_pair")
        )
    provenance = "lsf" if spec.kind == "largest_scaling_factor" else "lb"
    return MaskPlan(entries=tuple(entries), provenance=provenance, seed=spec.seed)


def plan_dense_row_mask(dims: list[int], layers: range | list[int]) -> MaskPlan:
    """Pre-LN variant: zero output-feature rows of the output dense layer."""
    entry = PlanEntry(role="output_dense", layers=tuple(layers), dims=tuple(dims), mode="dense_row")
    return MaskPlan(entries=(entry,), provenance="manual")


def plan_vector_mask(role: Role, dims: list[int], layers: range | list[int] = ()) -> MaskPlan:
    """Zero dims of a single role's tensor (embedding columns or bias entries)."""
    entry = PlanEntry(role=role.value, layers=tuple(layers), dims=tuple(dims), mode="vector_dims")
    return MaskPlan(entries=(entry,), provenance="manual")


def _entry_targets(entry: PlanEntry, schema: ModelSchema):
    """Yield (ComponentRef, kind) pairs where kind is 'dims'|'row'|'column'."""
    if entry.mode == "ln_pair":
        gamma_role, beta_role = _LN_PAIRS[entry.role]
        for layer in entry.layers:
            yield ComponentRef(gamma_role, layer), "dims"
            yield ComponentRef(beta_role, layer), "dims"
    elif entry.mode == "dense_row":
        for layer in entry.layers:
            yield ComponentRef(Role.OUTPUT_DENSE_WEIGHT, layer), "row"
            yield ComponentRef(Role.OUTPUT_DENSE_BIAS, layer), "dims"
    else:  # vector_dims
        role = Role(entry.role)
        layers = (0,) if role in GLOBAL_ROLES else entry.layers
        for layer in layers:
            yield ComponentRef(role, layer), "column" if role in GLOBAL_ROLES else "dims"


def apply_mask(checkpoint: Checkpoint, schema: ModelSchema, plan: MaskPlan) -> Checkpoint:
    """Return a new checkpoint with plan targets set to exactly zero.

    Copy-on-write: untouched tensors share buffers with the input. Masking
    happens in the tensor's storage dtype, so float16 checkpoints stay
    float16 with exact zeros.
    """
    masked = dict(checkpoint.tensors)
    for entry in plan.entries:
        for ref, kind in _entry_targets(entry, schema):
            name = schema.tensor_name(ref)
            rec = masked.get(name)
            if rec is None:
                raise PlanError(f"plan target {name!r} not present in checkpoint")
            arr = np.frombuffer(rec.data, dtype=_DTYPE_TO_NUMPY[rec.dtype]).reshape(rec.shape).copy()
            dims = np.asarray(entry.dims, dtype=np.int64)
            if dims.size and dims.max() >= _target_extent(arr, kind, schema):
                raise PlanError(
                    f"dim {int(dims.max())} out of range for {name!r} with shape {rec.shape}"
                )
            if kind == "dims":
                arr[dims] = 0
            elif kind == "row":
                if schema.dense_out_axis == 0:
                    arr[dims, :] = 0
                else:
                    arr[:, dims] = 0
            else:  # column of an embedding table
                arr[:, dims] = 0
            masked[name] = TensorRecord(name=name, shape=rec.shape, dtype=rec.dtype, data=arr.tobytes())
    return Checkpoint(tensors=masked, metadata=dict(checkpoint.metadata))


def _target_extent(arr: np.ndarray, kind: str, schema: ModelSchema) -> int:
    if kind == "dims":
        return arr.shape[0]
    if kind == "row":
        return arr.shape[schema.dense_out_axis]
    return arr.shape[1]


def count_modified_weights(
    plan: MaskPlan, schema: ModelSchema, checkpoint: Checkpoint | None = None
) -> int:
    """Exact number of scalar weights a plan zeroes.

    dense_row counting needs schema.ff_dim (or a checkpoint to read the row
    length from); vector_dims on 2-D embeddings needs a checkpoint.
    """
    total = 0
    for entry in plan.entries:
        n_slots = len(entry.layers) * len(entry.dims)
        if entry.mode == "ln_pair":
            total += 2 * n_slots
        elif entry.mode == "dense_row":
            row_len = schema.ff_dim
            if row_len is None:
                if checkpoint is None:
                    raise PlanError("dense_row counting needs schema.ff_dim or a checkpoint")
                rec = resolve(checkpoint, schema, ComponentRef(Role.OUTPUT_DENSE_WEIGHT, entry.layers[0]))
                row_len = rec.shape[1 - schema.dense_out_axis]
            total += n_slots * (row_len + 1)  # row plus the bias entry
        else:
            role = Role(entry.role)
            if role in GLOBAL_ROLES:
                if checkpoint is None:
                    raise PlanError("vector_dims counting on embeddings needs a checkpoint")
                rec = resolve(checkpoint, schema, ComponentRef(role, 0))
                total += rec.shape[0] * len(entry.dims)
            else:
                total += n_slots
    return total


def derive_run_seeds(master_seed: int, num_runs: int) -> list[int]:
    """Per-run seeds from (master_seed, run_index), independent yet replayable."""
    return [int(np.random.SeedSequence([master_seed, i]).generate_state(1)[0]) for i in range(num_runs)]


def replace_seed(spec: BaselineSpec, seed: int) -> BaselineSpec:
    return BaselineSpec(kind=spec.kind, n=spec.n, exclude=spec.exclude, seed=seed)
