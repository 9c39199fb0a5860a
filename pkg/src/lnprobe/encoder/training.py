"""Deterministic single-threaded MLM trainer with periodic snapshots."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ..analysis import LayerStats, layer_stats
from ..checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from ..data import mask_sequence, pad_batch
from ..errors import NumericError, SchemaError
from ..schema import ComponentRef, ModelSchema, Role, resolve
from .model import EncoderConfig, EncoderParams, init_params, mlm_loss_and_grads


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    total_steps: int = 1000
    mask_prob: float = 0.15
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    snapshot_every: int = 2000

    def __post_init__(self):
        if not (0.0 < self.mask_prob < 1.0):
            raise ValueError("mask_prob must lie in (0, 1)")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be positive")


@dataclass
class TrainResult:
    snapshot_paths: list[Path]
    loss_log: list[tuple[int, float]]
    final_params: EncoderParams


def _decayed(name: str) -> bool:
    # Decoupled weight decay applies to matrices only, never to LayerNorm
    # parameters or biases.
    return not name.endswith((".gamma", ".beta", ".bias"))


def _lr_at(step: int, config: TrainConfig) -> float:
    warmup = max(1, int(config.warmup_fraction * config.total_steps))
    if step < warmup:
        return config.learning_rate * (step + 1) / warmup
    remaining = config.total_steps - warmup
    if remaining <= 0:
        return config.learning_rate
    frac = (config.total_steps - step) / remaining
    return config.learning_rate * max(0.0, frac)


def write_loss_csv(loss_log: list[tuple[int, float]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in loss_log:
            writer.writerow([step, f"{loss:.6f}"])


def train(
    sequences: list[np.ndarray],
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    snapshot_dir: str | Path,
    freeze: Mapping[str, np.ndarray] | None = None,
    log_every: int = 50,
) -> TrainResult:
    """Train from scratch on pre-tokenized sequences.

    Snapshots (including the step-0 initialization and the final step) are
    written through the checkpoint store every ``snapshot_every`` steps.
    Deterministic for a fixed seed.
    """
    if not sequences:
        raise ValueError("training corpus is empty")
    snapshot_dir = Path(snapshot_dir)
    snapshot_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(train_config.seed)
    params = init_params(encoder_config, seed=train_config.seed)

    adam_m = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.tensors.items()}
    adam_v = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.tensors.items()}
    b1, b2 = train_config.beta1, train_config.beta2

    snapshot_paths: list[Path] = []

    def snapshot(step: int) -> None:
        path = snapshot_dir / f"step{step:07d}.safetensors"
        ckpt = params.to_checkpoint()
        ckpt.metadata["step"] = str(step)
        write_checkpoint(ckpt, path)
        snapshot_paths.append(path)

    snapshot(0)
    loss_log: list[tuple[int, float]] = []
    for step in range(train_config.total_steps):
        idx = rng.integers(0, len(sequences), size=train_config.batch_size)
        batch_ids, batch_labels = [], []
        for j in idx:
            masked, labels = mask_sequence(sequences[j], train_config.mask_prob, rng)
            batch_ids.append(masked)
            batch_labels.append(labels)
        ids, labels, attn = pad_batch(batch_ids, batch_labels)
        if not (labels >= 0).any():
            continue
        loss, grads = mlm_loss_and_grads(params, ids, labels, attention_mask=attn)
        if not np.isfinite(loss):
            raise NumericError(f"training diverged at step {step}: loss={loss}")
        loss_log.append((step + 1, loss))

        if train_config.grad_clip > 0:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > train_config.grad_clip:
                scale = train_config.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}

        lr = _lr_at(step, train_config)
        t = step + 1
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name, g in grads.items():
            adam_m[name] = b1 * adam_m[name] + (1 - b1) * g
            adam_v[name] = b2 * adam_v[name] + (1 - b2) * g * g
            update = (adam_m[name] / bc1) / (np.sqrt(adam_v[name] / bc2) + train_config.adam_eps)
            if train_config.weight_decay > 0 and _decayed(name):
                update = update + train_config.weight_decay * params.tensors[name].astype(np.float64)
            if freeze is not None and name in freeze:
                update = np.where(freeze[name], 0.0, update)
            params.tensors[name] = (params.tensors[name].astype(np.float64) - lr * update).astype(
                np.float32
            )
        if (step + 1) % train_config.snapshot_every == 0:
            snapshot(step + 1)

    if not snapshot_paths or snapshot_paths[-1].name != f"step{train_config.total_steps:07d}.safetensors":
        snapshot(train_config.total_steps)
    return TrainResult(snapshot_paths=snapshot_paths, loss_log=loss_log, final_params=params)


@dataclass
class TrajectoryPoint:
    step: int
    per_layer_stats: list[LayerStats]
    gamma: np.ndarray  # [L, m]
    beta: np.ndarray  # [L, m]


def track_ln_trajectories(
    snapshot_paths: list[str | Path], schema: ModelSchema, k_sigma: float = 3.0
) -> list[TrajectoryPoint]:
    """Per-snapshot output-LayerNorm statistics, ordered by training step."""
    points = []
    for path in snapshot_paths:
        ckpt = read_checkpoint(path)
        step = int(ckpt.metadata.get("step", -1))
        gammas, betas, stats = [], [], []
        for layer in range(schema.num_layers):
            gamma = resolve(ckpt, schema, ComponentRef(Role.OUTPUT_LN_GAMMA, layer)).as_array()
            beta = resolve(ckpt, schema, ComponentRef(Role.OUTPUT_LN_BETA, layer)).as_array()
            if gamma.shape != (schema.hidden_dim,):
                raise SchemaError(f"{path}: layer {layer} gamma shape {gamma.shape} mismatches schema")
            gammas.append(gamma)
            betas.append(beta)
            stats.append(layer_stats(gamma, beta, k_sigma, layer=layer))
        points.append(
            TrajectoryPoint(step=step, per_layer_stats=stats,
                            gamma=np.stack(gammas), beta=np.stack(betas))
        )
    points.sort(key=lambda pt: pt.step)
    return points


def export_trajectories_tsv(points: list[TrajectoryPoint], path: str | Path) -> None:
    """Flat TSV (step, layer, dim, gamma, beta) for external plotting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["step", "layer", "dim", "gamma", "beta"])
        for pt in points:
            L, m = pt.gamma.shape
            for layer in range(L):
                for dim in range(m):
                    writer.writerow([
                        pt.step, layer, dim,
                        f"{pt.gamma[layer, dim]:.8g}", f"{pt.beta[layer, dim]:.8g}",
                    ])
