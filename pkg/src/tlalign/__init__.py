"""Vision-transformer lab for token-label alignment under data mixing."""

from .align import align_block, align_forward, align_spatial, final_target
from .mixing import MixSpec, cutmix, init_label_map, mixup
from .vit import ModelConfig, ModelParams, init_params, model_backward, model_forward

__version__ = "0.1.0"

__all__ = [
    "MixSpec", "ModelConfig", "ModelParams", "align_block", "align_forward", "align_spatial",
    "cutmix", "final_target", "init_label_map", "init_params", "mixup", "model_backward",
    "model_forward",
]
