from .checkpoint import AdamState, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .embed import embed_text, embed_texts
from .gradcheck import TINY, GradCheckResult, grad_check
from .model import (
    Batch,
    ForwardOutput,
    LossStats,
    NumericFailure,
    backward,
    collate,
    encode,
    forward,
    loss_and_grads,
    mlm_head,
    mlm_loss,
)
from .params import EncoderConfig, ModelParams, init_params, param_shapes
from .train import TraceRow, TrainConfig, TrainingDiverged, TrainResult, train, write_trace
