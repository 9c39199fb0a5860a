"""Per-layer LayerNorm statistics and outlier-dimension detection.

The detection heuristic: within each layer, compute population mean and
standard deviation of the scaling factors (gamma) and biases (beta); a
dimension is flagged in a layer when its |z-score| exceeds k_sigma for
both vectors (or any inspected vector, if require_both is off), and
declared an outlier when flagged in at least ceil(layer_fraction * L)
layers.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .errors import SchemaError
from .schema import ComponentRef, ModelSchema, Role, resolve

# Gamma/beta role pairs that can be inspected jointly.
_ROLE_PAIRS = {
    Role.OUTPUT_LN_GAMMA: "gamma",
    Role.OUTPUT_LN_BETA: "beta",
    Role.ATTN_LN_GAMMA: "gamma",
    Role.ATTN_LN_BETA: "beta",
}


def population_stats(values: np.ndarray) -> tuple[float, float]:
    """Mean and population (ddof=0) standard deviation, accumulated in float64."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=0))


def zscores(values: np.ndarray) -> np.ndarray:
    """Signed z-scores; defined as all-zero when the std is exactly 0."""
    v = np.asarray(values, dtype=np.float64)
    mean, std = population_stats(v)
    if std == 0.0:
        return np.zeros_like(v)
    return (v - mean) / std


def rank_by_magnitude(values: np.ndarray) -> np.ndarray:
    """Rank of each entry in a descending sort of |value|; ties go to the
    lower index. The largest magnitude gets rank 0."""
    v = np.abs(np.asarray(values, dtype=np.float64))
    if v.ndim != 1 or v.size < 1:
        raise ValueError("rank_by_magnitude expects a non-empty 1-D vector")
    order = np.lexsort((np.arange(v.size), -v))
    ranks = np.empty(v.size, dtype=np.int64)
    ranks[order] = np.arange(v.size)
    return ranks


@dataclass
class LayerStats:
    layer: int
    mean_gamma: float
    std_gamma: float
    mean_beta: float
    std_beta: float
    z_gamma: np.ndarray
    z_beta: np.ndarray
    count_gt_k_gamma: int
    count_gt_k_beta: int
    rank_gamma: np.ndarray
    rank_beta: np.ndarray


def layer_stats(gamma: np.ndarray, beta: np.ndarray, k_sigma: float, layer: int = 0) -> LayerStats:
    """Statistics for one layer's (gamma, beta) pair."""
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != beta.shape:
        raise ValueError(f"gamma shape {gamma.shape} != beta shape {beta.shape}")
    if gamma.ndim != 1 or gamma.size < 2:
        raise ValueError("gamma/beta must be 1-D with at least 2 entries")
    mean_g, std_g = population_stats(gamma)
    mean_b, std_b = population_stats(beta)
    z_g = zscores(gamma)
    z_b = zscores(beta)
    return LayerStats(
        layer=layer,
        mean_gamma=mean_g,
        std_gamma=std_g,
        mean_beta=mean_b,
        std_beta=std_b,
        z_gamma=z_g,
        z_beta=z_b,
        count_gt_k_gamma=int(np.sum(np.abs(z_g) > k_sigma)),
        count_gt_k_beta=int(np.sum(np.abs(z_b) > k_sigma)),
        rank_gamma=rank_by_magnitude(gamma),
        rank_beta=rank_by_magnitude(beta),
    )


@dataclass(frozen=True)
class DetectionConfig:
    k_sigma: float = 3.0
    layer_fraction: float = 0.5
    require_both: bool = True
    roles: tuple[Role, ...] = (Role.OUTPUT_LN_GAMMA, Role.OUTPUT_LN_BETA)

    def __post_init__(self):
        if self.k_sigma <= 0:
            raise ValueError("k_sigma must be positive")
        if not (0.0 < self.layer_fraction <= 1.0):
            raise ValueError("layer_fraction must lie in (0, 1]")
        for role in self.roles:
            if role not in _ROLE_PAIRS:
                raise ValueError(f"role {role.value} is not a LayerNorm vector role")

    def layer_threshold(self, num_layers: int) -> int:
        return int(np.ceil(self.layer_fraction * num_layers))

    def to_dict(self) -> dict:
        return {
            "k_sigma": self.k_sigma,
            "layer_fraction": self.layer_fraction,
            "require_both": self.require_both,
            "roles": [r.value for r in self.roles],
        }


@dataclass
class OutlierReport:
    outlier_dims: list[int]
    per_dim_layer_flags: dict[int, list[bool]]
    per_layer_stats: list[LayerStats]
    config: DetectionConfig
    checkpoint_digest: str
    hidden_dim: int
    num_layers: int

    def to_dict(self) -> dict:
        return {
            "outlier_dims": list(self.outlier_dims),
            "per_dim_layer_flags": {
                str(d): [bool(f) for f in flags]
                for d, flags in sorted(self.per_dim_layer_flags.items())
            },
            "config": self.config.to_dict(),
            "checkpoint_digest": self.checkpoint_digest,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "per_layer_stats": [
                {
                    "layer": s.layer,
                    "mean_gamma": s.mean_gamma,
                    "std_gamma": s.std_gamma,
                    "mean_beta": s.mean_beta,
                    "std_beta": s.std_beta,
                    "count_gt_k_gamma": s.count_gt_k_gamma,
                    "count_gt_k_beta": s.count_gt_k_beta,
                }
                for s in self.per_layer_stats
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def detect_outliers(
    checkpoint: Checkpoint, schema: ModelSchema, config: DetectionConfig | None = None
) -> OutlierReport:
    """Identify outlier dimensions across a model's LayerNorm parameters."""
    if config is None:
        config = DetectionConfig(**schema.detection_defaults)
    m = schema.hidden_dim
    L = schema.num_layers

    per_layer_stats: list[LayerStats] = []
    # flags[layer, dim]: joint (or any-of) exceedance at k_sigma
    flags = np.zeros((L, m), dtype=bool)
    for layer in range(L):
        vectors = {}
        for role in config.roles:
            rec = resolve(checkpoint, schema, ComponentRef(role, layer))
            vec = rec.as_array().astype(np.float64)
            if vec.shape != (m,):
                raise SchemaError(f"role {role.value} layer {layer}: shape {vec.shape} != ({m},)")
            vectors[role] = vec

        exceed = [np.abs(zscores(v)) > config.k_sigma for v in vectors.values()]
        flags[layer] = np.logical_and.reduce(exceed) if config.require_both else np.logical_or.reduce(exceed)

        gamma = vectors.get(Role.OUTPUT_LN_GAMMA, vectors.get(Role.ATTN_LN_GAMMA))
        beta = vectors.get(Role.OUTPUT_LN_BETA, vectors.get(Role.ATTN_LN_BETA))
        if gamma is not None and beta is not None:
            per_layer_stats.append(layer_stats(gamma, beta, config.k_sigma, layer=layer))

    threshold = config.layer_threshold(L)
    counts = flags.sum(axis=0)
    outlier_dims = sorted(int(d) for d in np.nonzero(counts >= threshold)[0])
    per_dim_flags = {d: [bool(f) for f in flags[:, d]] for d in outlier_dims}
    return OutlierReport(
        outlier_dims=outlier_dims,
        per_dim_layer_flags=per_dim_flags,
        per_layer_stats=per_layer_stats,
        config=config,
        checkpoint_digest=checkpoint.digest(),
        hidden_dim=m,
        num_layers=L,
    )


@dataclass
class MatrixOutlierReport:
    component: ComponentRef
    row_l1_norms: np.ndarray
    outlier_rows: list[int]
    k_sigma: float


def detect_matrix_outliers(
    checkpoint: Checkpoint, schema: ModelSchema, ref: ComponentRef, k_sigma: float = 3.0
) -> MatrixOutlierReport:
    """Row-norm variant: L1 norm per output-feature row, flag rows whose
    norm lies more than k_sigma from the mean of the norm distribution."""
    rec = resolve(checkpoint, schema, ref)
    if len(rec.shape) != 2:
        raise SchemaError(f"matrix outlier detection needs a 2-D tensor, got shape {rec.shape}")
    matrix = rec.as_array().astype(np.float64)
    if schema.dense_out_axis == 1:
        matrix = matrix.T
    norms = np.abs(matrix).sum(axis=1)
    z = zscores(norms)
    rows = sorted(int(r) for r in np.nonzero(np.abs(z) > k_sigma)[0])
    return MatrixOutlierReport(component=ref, row_l1_norms=norms, outlier_rows=rows, k_sigma=k_sigma)


def fingerprint(report: OutlierReport) -> str:
    """Stable content digest over (outlier_dims, flag matrix, config)."""
    payload = json.dumps(
        {
            "outlier_dims": list(report.outlier_dims),
            "flags": {str(d): f for d, f in sorted(report.per_dim_layer_flags.items())},
            "config": report.config.to_dict(),
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def stats_csv(report: OutlierReport, path: str | Path, report_dims: list[int] | None = None) -> None:
    """Per-layer statistics table; one row per layer, with value/rank columns
    for each reported outlier dimension."""
    dims = report.outlier_dims if report_dims is None else report_dims
    k = report.config.k_sigma
    header = ["layer", "mean_gamma", "std_gamma", f"gamma_gt_{k:g}sigma",
              "mean_beta", "std_beta", f"beta_gt_{k:g}sigma"]
    for d in dims:
        header += [f"gamma_{d}_value", f"gamma_{d}_rank", f"beta_{d}_value", f"beta_{d}_rank"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in report.per_layer_stats:
            row = [
                s.layer,
                f"{s.mean_gamma:.6g}", f"{s.std_gamma:.6g}", s.count_gt_k_gamma,
                f"{s.mean_beta:.6g}", f"{s.std_beta:.6g}", s.count_gt_k_beta,
            ]
            for d in dims:
                gamma_val = s.z_gamma[d] * s.std_gamma + s.mean_gamma
                beta_val = s.z_beta[d] * s.std_beta + s.mean_beta
                row += [f"{gamma_val:.6g}", int(s.rank_gamma[d]), f"{beta_val:.6g}", int(s.rank_beta[d])]
            writer.writerow(row)
