"""taskgate: continual learning with sigmoid-gated task masks.

A small numpy library: a tape-based reverse-mode autodiff core, gated layers
that learn per-task unit masks, training utilities with mask-scale annealing
and a capacity regularizer, selective removal of one task's knowledge, and a
benchmark command line.
"""

from .tensor import (
    DEFAULT_DTYPE,
    HookHandle,
    ShapeError,
    StateError,
    Tape,
    Tensor,
    UsageError,
    add,
    backward,
    clamp,
    conv2d,
    layer_norm,
    matmul,
    mul,
    permute,
    reduce_mean,
    reduce_sum,
    register_grad_hook,
    relu,
    reshape,
    scale,
    sigmoid,
    sigmoid_values,
    softmax_cross_entropy,
    sub,
)
from .payload import HATPayload
from .layers import (
    E_MAX,
    THETA_BIN,
    HATConv2d,
    HATLinear,
    HATMasker,
    LayerNorm,
    Linear,
    ReLU,
    Sequential,
    TaskIndexed,
    attention,
    grad_compensate,
    grad_nullify,
    grad_rail,
    task_indexed_layer_norm,
    task_indexed_linear,
)
from .training import (
    SGD,
    EpochMetrics,
    ScheduleState,
    TrainerConfig,
    evaluate,
    init_embeddings,
    regularizer,
    scale_cosine,
    scale_linear,
    train_task,
)
from .forgetting import ForgetReport, attribution, forget_task
from .checkpoint import (
    load_model_state,
    model_state,
    read_entries,
    write_entries,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_DTYPE",
    "E_MAX",
    "HATConv2d",
    "HATLinear",
    "HATMasker",
    "HATPayload",
    "EpochMetrics",
    "ForgetReport",
    "HookHandle",
    "LayerNorm",
    "Linear",
    "ReLU",
    "SGD",
    "ScheduleState",
    "Sequential",
    "ShapeError",
    "StateError",
    "Tape",
    "TaskIndexed",
    "Tensor",
    "TrainerConfig",
    "THETA_BIN",
    "UsageError",
    "add",
    "attention",
    "attribution",
    "backward",
    "clamp",
    "conv2d",
    "evaluate",
    "forget_task",
    "grad_compensate",
    "grad_nullify",
    "grad_rail",
    "init_embeddings",
    "layer_norm",
    "load_model_state",
    "matmul",
    "model_state",
    "mul",
    "permute",
    "read_entries",
    "reduce_mean",
    "reduce_sum",
    "regularizer",
    "register_grad_hook",
    "relu",
    "reshape",
    "scale_cosine",
    "scale_linear",
    "scale",
    "sigmoid",
    "sigmoid_values",
    "softmax_cross_entropy",
    "sub",
    "train_task",
    "task_indexed_layer_norm",
    "task_indexed_linear",
    "write_entries",
]
