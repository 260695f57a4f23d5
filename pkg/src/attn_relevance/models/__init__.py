from .config import (
    ARCH_KINDS,
    CLS_ID,
    KIND_DOMAINS,
    MASK_ID,
    SEP_ID,
    Architecture,
    ModelConfig,
    RecordKind,
)
from .data import (
    DetObject,
    SyntheticSample,
    gen_detection_task,
    gen_vqa_task,
    load_dataset,
    save_dataset,
)
from .network import (
    AttentionRecord,
    ForwardTrace,
    Model,
    backward_fill,
    batch_inputs,
    build_model,
    forward,
    forward_batch,
    logits_batch,
    resolve_target,
    trace_batch,
)
from .train import accuracy, load_checkpoint, predict, save_checkpoint, train

__all__ = [
    "ARCH_KINDS",
    "Architecture",
    "AttentionRecord",
    "CLS_ID",
    "DetObject",
    "ForwardTrace",
    "KIND_DOMAINS",
    "MASK_ID",
    "Model",
    "ModelConfig",
    "RecordKind",
    "SEP_ID",
    "SyntheticSample",
    "accuracy",
    "backward_fill",
    "batch_inputs",
    "build_model",
    "forward",
    "forward_batch",
    "gen_detection_task",
    "gen_vqa_task",
    "load_checkpoint",
    "load_dataset",
    "logits_batch",
    "predict",
    "resolve_target",
    "save_checkpoint",
    "trace_batch",
    "train",
]
