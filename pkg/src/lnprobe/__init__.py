"""Checkpoint forensics for LayerNorm outlier dimensions in Transformers."""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, TensorRecord, read_checkpoint, write_checkpoint
from .schema import ComponentRef, ModelSchema, PRESETS, Role, load_schema, resolve, save_schema
from .analysis import (
    DetectionConfig,
    LayerStats,
    MatrixOutlierReport,
    OutlierReport,
    detect_matrix_outliers,
    detect_outliers,
    fingerprint,
    layer_stats,
    rank_by_magnitude,
)
from .masking import (
    BaselineSpec,
    MaskPlan,
    PlanEntry,
    apply_mask,
    count_modified_weights,
    plan_baseline,
    plan_dense_row_mask,
    plan_outlier_mask,
    plan_vector_mask,
)

__all__ = [
    "Checkpoint", "TensorRecord", "read_checkpoint", "write_checkpoint",
    "ComponentRef", "ModelSchema", "PRESETS", "Role", "load_schema", "resolve", "save_schema",
    "DetectionConfig", "LayerStats", "MatrixOutlierReport", "OutlierReport",
    "detect_matrix_outliers", "detect_outliers", "fingerprint", "layer_stats", "rank_by_magnitude",
    "BaselineSpec", "MaskPlan", "PlanEntry", "apply_mask", "count_modified_weights",
    "plan_baseline", "plan_dense_row_mask", "plan_outlier_mask", "plan_vector_mask",
]
