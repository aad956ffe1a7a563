from .config import AttentionMode, ModelConfig, TrainStrategy
from .network import (ForwardOutput, ModelState, attention_mask, cross_entropy, embed, forward, geometry_heads,
                      group_of, mot_forward, parameter_shapes, predict)

__all__ = [
    "AttentionMode", "ForwardOutput", "ModelConfig", "ModelState", "TrainStrategy", "attention_mask",
    "cross_entropy", "embed", "forward", "geometry_heads", "group_of", "mot_forward", "parameter_shapes", "predict",
]
