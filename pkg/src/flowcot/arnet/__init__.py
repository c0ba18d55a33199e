"""From-scratch autoregressive transformer: model, optimizer, decoding."""

from .adam import AdamState, adam_step, clip_global_norm, global_norm
from .checkpoint import load_checkpoint, save_checkpoint
from .decode import DecodeSession
from .model import (
    ModelConfig,
    backward_batch,
    ce_weights_grad,
    forward,
    forward_batch,
    grad,
    init_params,
    log_softmax,
    masked_ce,
    param_count,
    param_shapes,
    zeros_like_params,
)
from .sample import sample_next
from .vocab import (
    BOS,
    EOS,
    N_SEGMENTS,
    N_SPECIAL,
    PAD,
    SEG_ACTION,
    SEG_FLOW,
    SEG_FRAME,
    SEG_SPECIAL,
    SEG_TEXT,
    SEP_ACTION,
    SEP_FLOW,
    SEP_FRAME,
    SEP_TEXT,
    VocabLayout,
    infer_segments,
)

__all__ = [
    "AdamState", "adam_step", "clip_global_norm", "global_norm",
    "load_checkpoint", "save_checkpoint", "DecodeSession",
    "ModelConfig", "backward_batch", "ce_weights_grad", "forward",
    "forward_batch", "grad", "init_params", "log_softmax", "masked_ce",
    "param_count", "param_shapes", "zeros_like_params", "sample_next",
    "BOS", "EOS", "N_SEGMENTS", "N_SPECIAL", "PAD",
    "SEG_ACTION", "SEG_FLOW", "SEG_FRAME", "SEG_SPECIAL", "SEG_TEXT",
    "SEP_ACTION", "SEP_FLOW", "SEP_FRAME", "SEP_TEXT",
    "VocabLayout", "infer_segments",
]
