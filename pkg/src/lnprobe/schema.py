"""Model schemas: map abstract component roles to concrete tensor names."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from .checkpoint import Checkpoint, TensorRecord
from .errors import SchemaError


class Role(str, Enum):
    OUTPUT_LN_GAMMA = "output_ln_gamma"
    OUTPUT_LN_BETA = "output_ln_beta"
    ATTN_LN_GAMMA = "attn_ln_gamma"
    ATTN_LN_BETA = "attn_ln_beta"
    OUTPUT_DENSE_WEIGHT = "output_dense_weight"
    OUTPUT_DENSE_BIAS = "output_dense_bias"
    ATTN_OUTPUT_DENSE_BIAS = "attn_output_dense_bias"
    TOKEN_EMBEDDING = "token_embedding"
    POSITION_EMBEDDING = "position_embedding"
    TOKEN_TYPE_EMBEDDING = "token_type_embedding"


# Embedding tables exist once, not per layer.
GLOBAL_ROLES = {Role.TOKEN_EMBEDDING, Role.POSITION_EMBEDDING, Role.TOKEN_TYPE_EMBEDDING}

VECTOR_ROLES = {
    Role.OUTPUT_LN_GAMMA,
    Role.OUTPUT_LN_BETA,
    Role.ATTN_LN_GAMMA,
    Role.ATTN_LN_BETA,
    Role.OUTPUT_DENSE_BIAS,
    Role.ATTN_OUTPUT_DENSE_BIAS,
}


@dataclass(frozen=True)
class ComponentRef:
    role: Role
    layer: int


@dataclass(frozen=True)
class ModelSchema:
    """Architecture description sufficient to locate analysis targets.

    ``component_templates`` maps roles to tensor-name templates containing a
    ``{layer}`` placeholder (omitted for embedding roles).
    ``dense_out_axis`` states which axis of output_dense_weight indexes
    output features (0 or 1). ``ff_dim`` is the feed-forward width, needed
    only to count dense-row mask plans without a checkpoint in hand.
    """

    hidden_dim: int
    num_layers: int
    ln_position: str = "post_ln"  # "post_ln" | "pre_ln"
    ln_eps: float = 1e-12
    component_templates: dict[Role, str] = field(default_factory=dict)
    dense_out_axis: int = 0
    ff_dim: int | None = None
    detection_defaults: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.hidden_dim <= 0 or self.num_layers <= 0:
            raise SchemaError("hidden_dim and num_layers must be positive")
        if self.ln_position not in ("post_ln", "pre_ln"):
            raise SchemaError(f"unknown ln_position {self.ln_position!r}")
        if self.dense_out_axis not in (0, 1):
            raise SchemaError("dense_out_axis must be 0 or 1")

    def tensor_name(self, ref: ComponentRef) -> str:
        if ref.role not in self.component_templates:
            raise SchemaError(f"schema has no template for role {ref.role.value}")
        if ref.role not in GLOBAL_ROLES and not (0 <= ref.layer < self.num_layers):
            raise SchemaError(f"layer {ref.layer} out of range [0, {self.num_layers})")
        return self.component_templates[ref.role].format(layer=ref.layer)

    def with_templates(self, templates: dict[Role, str]) -> "ModelSchema":
        merged = dict(self.component_templates)
        merged.update(templates)
        return replace(self, component_templates=merged)


def resolve(checkpoint: Checkpoint, schema: ModelSchema, ref: ComponentRef) -> TensorRecord:
    """Look up the tensor backing a (role, layer) reference.

    Validates the schema shape invariants: gamma/beta/bias vectors must be
    [hidden_dim]; output_dense_weight must be 2-D with hidden_dim on the
    annotated output-feature axis.
    """
    name = schema.tensor_name(ref)
    if name not in checkpoint:
        raise SchemaError(f"tensor {name!r} (role {ref.role.value}, layer {ref.layer}) not in checkpoint")
    rec = checkpoint[name]
    if ref.role in VECTOR_ROLES:
        if rec.shape != (schema.hidden_dim,):
            raise SchemaError(
                f"tensor {name!r} has shape {rec.shape}, expected ({schema.hidden_dim},)"
            )
    elif ref.role is Role.OUTPUT_DENSE_WEIGHT:
        if len(rec.shape) != 2 or rec.shape[schema.dense_out_axis] != schema.hidden_dim:
            raise SchemaError(
                f"tensor {name!r} has shape {rec.shape}, expected hidden_dim "
                f"{schema.hidden_dim} on axis {schema.dense_out_axis}"
            )
    return rec


def _hf_bert_templates(prefix: str = "bert.") -> dict[Role, str]:
    p = prefix
    return {
        Role.OUTPUT_LN_GAMMA: p + "encoder.layer.{layer}.output.LayerNorm.weight",
        Role.OUTPUT_LN_BETA: p + "encoder.layer.{layer}.output.LayerNorm.bias",
        Role.ATTN_LN_GAMMA: p + "encoder.layer.{layer}.attention.output.LayerNorm.weight",
        Role.ATTN_LN_BETA: p + "encoder.layer.{layer}.attention.output.LayerNorm.bias",
        Role.OUTPUT_DENSE_WEIGHT: p + "encoder.layer.{layer}.output.dense.weight",
        Role.OUTPUT_DENSE_BIAS: p + "encoder.layer.{layer}.output.dense.bias",
        Role.ATTN_OUTPUT_DENSE_BIAS: p + "encoder.layer.{layer}.attention.output.dense.bias",
        Role.TOKEN_EMBEDDING: p + "embeddings.word_embeddings.weight",
        Role.POSITION_EMBEDDING: p + "embeddings.position_embeddings.weight",
        Role.TOKEN_TYPE_EMBEDDING: p + "embeddings.token_type_embeddings.weight",
    }


def mini_templates() -> dict[Role, str]:
    """Canonical tensor names used by the built-in miniature encoder."""
    return {
        Role.OUTPUT_LN_GAMMA: "layer.{layer}.ln.gamma",
        Role.OUTPUT_LN_BETA: "layer.{layer}.ln.beta",
        Role.ATTN_LN_GAMMA: "layer.{layer}.attn.ln.gamma",
        Role.ATTN_LN_BETA: "layer.{layer}.attn.ln.beta",
        Role.OUTPUT_DENSE_WEIGHT: "layer.{layer}.ff.out.weight",
        Role.OUTPUT_DENSE_BIAS: "layer.{layer}.ff.out.bias",
        Role.ATTN_OUTPUT_DENSE_BIAS: "layer.{layer}.attn.out.bias",
        Role.TOKEN_EMBEDDING: "embeddings.token",
        Role.POSITION_EMBEDDING: "embeddings.position",
        Role.TOKEN_TYPE_EMBEDDING: "embeddings.token_type",
    }


# Checkpoints from different sources disagree on tensor names, so presets
# carry overridable templates plus per-model detection relaxations.
PRESETS: dict[str, ModelSchema] = {
    "bert-base-style": ModelSchema(
        hidden_dim=768, num_layers=12, ln_eps=1e-12, ff_dim=3072,
        component_templates=_hf_bert_templates(), dense_out_axis=0,
        detection_defaults={"k_sigma": 3.0, "layer_fraction": 0.5},
    ),
    "bert-large-style": ModelSchema(
        hidden_dim=1024, num_layers=24, ln_eps=1e-12, ff_dim=4096,
        component_templates=_hf_bert_templates(), dense_out_axis=0,
        detection_defaults={"k_sigma": 3.0, "layer_fraction": 1.0 / 3.0},
    ),
    "bert-medium-style": ModelSchema(
        hidden_dim=512, num_layers=8, ln_eps=1e-12, ff_dim=2048,
        component_templates=_hf_bert_templates(), dense_out_axis=0,
        detection_defaults={"k_sigma": 3.0, "layer_fraction": 0.5},
    ),
    "bert-small-style": ModelSchema(
        hidden_dim=512, num_layers=4, ln_eps=1e-12, ff_dim=2048,
        component_templates=_hf_bert_templates(), dense_out_axis=0,
        detection_defaults={"k_sigma": 3.0, "layer_fraction": 0.5},
    ),
    "mbert-style": ModelSchema(
        hidden_dim=768, num_layers=12, ln_eps=1e-12, ff_dim=3072,
        component_templates=_hf_bert_templates(), dense_out_axis=0,
        detection_defaults={"k_sigma": 3.0, "layer_fraction": 0.5},
    ),
    "roberta-style": ModelSchema(
        hidden_dim=768, num_layers=12, ln_eps=1e-5, ff_dim=3072,
        component_templates=_hf_bert_templates(prefix="roberta."), dense_out_axis=0,
        detection_defaults={"k_sigma": 2.0, "layer_fraction": 0.5},
    ),
}


def load_schema(path: str | Path) -> ModelSchema:
    """Read a schema config file (JSON)."""
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    try:
        templates = {Role(role): tmpl for role, tmpl in cfg.get("component_templates", {}).items()}
        return ModelSchema(
            hidden_dim=int(cfg["hidden_dim"]),
            num_layers=int(cfg["num_layers"]),
            ln_position=cfg.get("ln_position", "post_ln"),
            ln_eps=float(cfg.get("ln_eps", 1e-12)),
            component_templates=templates,
            dense_out_axis=int(cfg.get("dense_out_axis", 0)),
            ff_dim=int(cfg["ff_dim"]) if cfg.get("ff_dim") is not None else None,
            detection_defaults=cfg.get("detection_defaults", {}),
        )
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"invalid schema config {path}: {exc}") from exc


def save_schema(schema: ModelSchema, path: str | Path) -> None:
    cfg = {
        "hidden_dim": schema.hidden_dim,
        "num_layers": schema.num_layers,
        "ln_position": schema.ln_position,
        "ln_eps": schema.ln_eps,
        "component_templates": {role.value: tmpl for role, tmpl in schema.component_templates.items()},
        "dense_out_axis": schema.dense_out_axis,
        "ff_dim": schema.ff_dim,
        "detection_defaults": schema.detection_defaults,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
