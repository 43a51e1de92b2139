from .kernels import (
    StepOutput,
    dense_attention,
    dense_attention_step,
    prefill,
    sparse_attention_step,
    two_segment_attention,
    window_logits,
)
from .kvstore import CompactSegment, KvStore, reorganize_compact
from .model import ModelSpec, ToyModel, build_toy_model, load_weights, save_weights

__all__ = [
    "CompactSegment",
    "KvStore",
    "ModelSpec",
    "StepOutput",
    "ToyModel",
    "build_toy_model",
    "dense_attention",
    "dense_attention_step",
    "load_weights",
    "prefill",
    "reorganize_compact",
    "save_weights",
    "sparse_attention_step",
    "two_segment_attention",
    "window_logits",
]
