from .model import (
    EncoderConfig,
    EncoderParams,
    encoder_forward,
    init_params,
    layer_norm_forward,
    mini_schema,
    mlm_loss,
    mlm_loss_and_grads,
)
from ..tokenizer import SPECIALS, WordTokenizer
from .training import (
    TrainConfig,
    TrainResult,
    export_trajectories_tsv,
    track_ln_trajectories,
    train,
    write_loss_csv,
)

__all__ = [
    "EncoderConfig",
    "EncoderParams",
    "encoder_forward",
    "init_params",
    "layer_norm_forward",
    "mini_schema",
    "mlm_loss",
    "mlm_loss_and_grads",
    "SPECIALS",
    "WordTokenizer",
    "TrainConfig",
    "TrainResult",
    "export_trajectories_tsv",
    "track_ln_trajectories",
    "train",
    "write_loss_csv",
]
