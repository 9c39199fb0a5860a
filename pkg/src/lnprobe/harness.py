"""Measurement protocols: MLM cross-entropy under mask plans, per-dimension
sweeps, layer-range ablations, random-baseline averaging, heatmaps, and the
anisotropy check.

All before/after comparisons reuse the same seeded mask positions, so CE
deltas reflect weight changes only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import OutlierReport
from .data import load_corpus, mask_sequence, pad_batch  # noqa: F401  (load_corpus is part of this API)
from .encoder.model import EncoderParams, encoder_forward, mlm_loss
from .errors import LnprobeError
from .masking import (
    BaselineSpec,
    MaskPlan,
    PlanEntry,
    apply_mask,
    count_modified_weights,
    derive_run_seeds,
    plan_baseline,
    plan_outlier_mask,
)
from .schema import ModelSchema


@dataclass(frozen=True)
class EvalConfig:
    max_seq_len: int = 256
    mask_prob: float = 0.15
    seed: int = 0
    num_random_runs: int = 1000
    batch_size: int = 16


@dataclass
class EvalResult:
    cross_entropy: float
    masked_token_count: int
    plan_digest: str = ""
    modified_weight_count: int = 0
    ce_std: float | None = None
    num_runs: int = 1

    def to_dict(self) -> dict:
        return {
            "cross_entropy": self.cross_entropy,
            "masked_token_count": self.masked_token_count,
            "plan_digest": self.plan_digest,
            "modified_weight_count": self.modified_weight_count,
            "ce_std": self.ce_std,
            "num_runs": self.num_runs,
        }


@dataclass
class SweepResult:
    per_dim: list[EvalResult]
    baseline: EvalResult


@dataclass
class AnisotropyReport:
    dims: list[int]
    fraction_abnormal: dict[int, float]
    k_sigma: float
    token_count: int


def masked_params(params: EncoderParams, schema: ModelSchema, plan: MaskPlan) -> EncoderParams:
    """Apply a plan through the checkpoint store, guaranteeing that sweep and
    compare paths see byte-identical masked weights."""
    ckpt = params.to_checkpoint()
    return EncoderParams.from_checkpoint(apply_mask(ckpt, schema, plan), params.config)


def _masked_batches(sequences: list[np.ndarray], config: EvalConfig):
    """Deterministic masking: each sequence gets its own substream of the
    master seed, so positions do not depend on batching."""
    batch_ids, batch_labels = [], []
    for i, seq in enumerate(sequences):
        rng = np.random.default_rng([config.seed, i])
        masked, labels = mask_sequence(np.asarray(seq, dtype=np.int64), config.mask_prob, rng)
        batch_ids.append(masked)
        batch_labels.append(labels)
        if len(batch_ids) == config.batch_size:
            yield pad_batch(batch_ids, batch_labels)
            batch_ids, batch_labels = [], []
    if batch_ids:
        yield pad_batch(batch_ids, batch_labels)


def evaluate(params: EncoderParams, sequences: list[np.ndarray], config: EvalConfig) -> EvalResult:
    """Global per-masked-token mean cross-entropy over the corpus."""
    if not sequences:
        raise LnprobeError("evaluation corpus is empty")
    top = max(int(np.max(s)) for s in sequences)
    if top >= params.config.vocab_size:
        raise LnprobeError(
            f"corpus token id {top} exceeds model vocab {params.config.vocab_size}"
        )
    total, count = 0.0, 0
    for ids, labels, attn in _masked_batches(sequences, config):
        n = int((labels >= 0).sum())
        if n == 0:
            continue
        loss = mlm_loss(params, ids, labels, attention_mask=attn)
        total += loss * n
        count += n
    if count == 0:
        raise LnprobeError("no masked positions in the evaluation corpus")
    return EvalResult(cross_entropy=total / count, masked_token_count=count)


def _empty_plan() -> MaskPlan:
    return MaskPlan(entries=(), provenance="manual")


def evaluate_plan(
    params: EncoderParams,
    schema: ModelSchema,
    sequences: list[np.ndarray],
    plan: MaskPlan,
    config: EvalConfig,
) -> EvalResult:
    result = evaluate(masked_params(params, schema, plan), sequences, config)
    result.plan_digest = plan.digest_payload()
    result.modified_weight_count = count_modified_weights(plan, schema)
    return result


def sweep_dims(
    params: EncoderParams,
    schema: ModelSchema,
    sequences: list[np.ndarray],
    config: EvalConfig,
) -> SweepResult:
    """Zero the (gamma, beta) pair of each dimension across all layers, one
    dimension at a time, evaluating after each."""
    baseline = evaluate(params, sequences, config)
    per_dim = []
    for dim in range(schema.hidden_dim):
        plan = MaskPlan(
            entries=(PlanEntry(role="output_ln", layers=tuple(range(schema.num_layers)),
                               dims=(dim,), mode="ln_pair"),),
            provenance="manual",
        )
        per_dim.append(evaluate_plan(params, schema, sequences, plan, config))
    return SweepResult(per_dim=per_dim, baseline=baseline)


@dataclass
class ComparisonRow:
    label: str
    result: EvalResult


def compare_plans(
    params: EncoderParams,
    schema: ModelSchema,
    sequences: list[np.ndarray],
    plans: list[tuple[str, MaskPlan | BaselineSpec]],
    config: EvalConfig,
) -> list[ComparisonRow]:
    """Evaluate labelled plans; random_dims BaselineSpecs are averaged over
    num_random_runs reproducible draws (mean and std reported)."""
    ckpt = params.to_checkpoint()
    rows = []
    for label, item in plans:
        if isinstance(item, BaselineSpec) and item.kind == "random_dims":
            seeds = derive_run_seeds(item.seed, config.num_random_runs)
            ces = []
            count = 0
            weight_count = 0
            for run_seed in seeds:
                plan = plan_baseline(ckpt, schema, BaselineSpec(
                    kind=item.kind, n=item.n, exclude=item.exclude, seed=run_seed))
                res = evaluate(masked_params(params, schema, plan), sequences, config)
                ces.append(res.cross_entropy)
                count = res.masked_token_count
                weight_count = count_modified_weights(plan, schema)
            ces = np.asarray(ces)
            rows.append(ComparisonRow(label, EvalResult(
                cross_entropy=float(ces.mean()),
                masked_token_count=count,
                plan_digest=f"random_dims(n={item.n}, master_seed={item.seed})",
                modified_weight_count=weight_count,
                ce_std=float(ces.std(ddof=0)),
                num_runs=len(seeds),
            )))
        else:
            plan = plan_baseline(ckpt, schema, item) if isinstance(item, BaselineSpec) else item
            rows.append(ComparisonRow(label, evaluate_plan(params, schema, sequences, plan, config)))
    return rows


def sweep_layer_ranges(
    params: EncoderParams,
    schema: ModelSchema,
    sequences: list[np.ndarray],
    report: OutlierReport,
    ranges: list[list[int]],
    config: EvalConfig,
) -> list[ComparisonRow]:
    """Mask the report's outlier dims only within each layer range."""
    rows = []
    for layers in ranges:
        label = "empty" if not layers else f"layers {min(layers)}-{max(layers)}"
        if not layers:
            plan = _empty_plan()
        else:
            plan = plan_outlier_mask(report, layers=list(layers))
        rows.append(ComparisonRow(label, evaluate_plan(params, schema, sequences, plan, config)))
    return rows


@dataclass
class HeatmapResult:
    matrices: list[np.ndarray]  # one [tokens, m] matrix per encoder layer
    marked_dims: list[int]


def embedding_heatmap(params: EncoderParams, token_ids: np.ndarray,
                      dims_to_mark: list[int] | None = None) -> HeatmapResult:
    """Per-layer output embeddings for one input sequence, one row per token."""
    hidden = encoder_forward(params, np.asarray(token_ids, dtype=np.int64))
    matrices = [h[0] for h in hidden[1:]]
    return HeatmapResult(matrices=matrices, marked_dims=sorted(dims_to_mark or []))


def heatmap_tsv(result: HeatmapResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["layer", "token", "dim", "value"])
        for layer, mat in enumerate(result.matrices, start=1):
            for t in range(mat.shape[0]):
                for d in range(mat.shape[1]):
                    writer.writerow([layer, t, d, f"{mat[t, d]:.8g}"])


def anisotropy_check(
    params: EncoderParams,
    sequences: list[np.ndarray],
    dims: list[int],
    k_sigma: float = 3.0,
) -> AnisotropyReport:
    """Fraction of tokens whose final-layer value at a dim lies more than
    k_sigma from that token vector's own mean. Constant vectors (std 0)
    count as normal."""
    m = params.config.hidden_dim
    if any(not (0 <= d < m) for d in dims):
        raise LnprobeError(f"dims must lie in [0, {m})")
    abnormal = {d: 0 for d in dims}
    total = 0
    for seq in sequences:
        final = encoder_forward(params, np.asarray(seq, dtype=np.int64))[-1][0]  # [T, m]
        mean = final.mean(axis=1, keepdims=True)
        std = final.std(axis=1, ddof=0, keepdims=True)
        ok = std[:, 0] > 0
        total += final.shape[0]
        for d in dims:
            hits = np.abs(final[:, d] - mean[:, 0]) > k_sigma * std[:, 0]
            abnormal[d] += int(np.sum(hits & ok))
    fractions = {d: (abnormal[d] / total if total else 0.0) for d in dims}
    return AnisotropyReport(dims=sorted(dims), fraction_abnormal=fractions,
                            k_sigma=k_sigma, token_count=total)


def comparison_csv(rows: list[ComparisonRow], path: str | Path) -> None:
    """Plan label / #w / CE table."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["plan", "modified_weights", "cross_entropy", "ce_std", "num_runs"])
        for row in rows:
            writer.writerow([
                row.label,
                row.result.modified_weight_count,
                f"{row.result.cross_entropy:.6f}",
                "" if row.result.ce_std is None else f"{row.result.ce_std:.6f}",
                row.result.num_runs,
            ])


def sweep_tsv(result: SweepResult, path: str | Path) -> None:
    """Per-dimension sweep plot data (dim, CE); row -1 is the unmasked baseline."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["dim", "cross_entropy"])
        writer.writerow([-1, f"{result.baseline.cross_entropy:.6f}"])
        for dim, res in enumerate(result.per_dim):
            writer.writerow([dim, f"{res.cross_entropy:.6f}"])
