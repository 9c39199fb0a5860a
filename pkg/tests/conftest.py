import numpy as np
import pytest

from lnprobe import Checkpoint, ModelSchema, Role, TensorRecord


def ln_only_schema(num_layers: int, hidden_dim: int, **kwargs) -> ModelSchema:
    """Schema with just the output-LayerNorm pair, for detection tests."""
    return ModelSchema(
        hidden_dim=hidden_dim,
        num_layers=num_layers,
        component_templates={
            Role.OUTPUT_LN_GAMMA: "l{layer}.gamma",
            Role.OUTPUT_LN_BETA: "l{layer}.beta",
        },
        **kwargs,
    )


def clipped_noise(rng, size, clip):
    """Standard normal redrawn until |z| <= clip, so no accidental outliers."""
    x = rng.standard_normal(size)
    bad = np.abs(x) > clip
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > clip
    return x


def make_planted_checkpoint(
    num_layers: int,
    hidden_dim: int,
    planted: dict[int, list[int]],
    seed: int = 0,
    clip: float = 2.2,
    offset_sigma: float = 8.0,
    gamma_base=(0.8, 0.05),
    beta_base=(0.0, 0.05),
) -> Checkpoint:
    """Synthetic checkpoint whose output-LN pair has joint outliers planted
    at ``planted[dim] = [layers...]``; everything else stays within ``clip``
    sigmas of the layer mean."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for layer in range(num_layers):
        gamma = gamma_base[0] + gamma_base[1] * clipped_noise(rng, hidden_dim, clip)
        beta = beta_base[0] + beta_base[1] * clipped_noise(rng, hidden_dim, clip)
        for dim, layers in planted.items():
            if layer in layers:
                sign = 1.0 if dim % 2 == 0 else -1.0
                gamma[dim] = gamma_base[0] + sign * offset_sigma * gamma_base[1]
                beta[dim] = beta_base[0] + sign * offset_sigma * beta_base[1]
        tensors[f"l{layer}.gamma"] = TensorRecord.from_array(f"l{layer}.gamma", gamma)
        tensors[f"l{layer}.beta"] = TensorRecord.from_array(f"l{layer}.beta", beta)
    return Checkpoint(tensors=tensors)


@pytest.fixture
def planted_checkpoint():
    """12-layer, m=64 checkpoint with joint outliers at dims 7 and 42 in 8 layers."""
    planted = {7: list(range(8)), 42: list(range(2, 10))}
    ckpt = make_planted_checkpoint(12, 64, planted, seed=3)
    return ckpt, ln_only_schema(12, 64), planted
