"""Encoder-free video-language modelling at desk scale.

Raw frames are patch-embedded and aligned by a small spatio-temporal block
before reaching a toy causal LM; everything is numpy with hand-written
backward passes.
"""

from .config import ModelConfig, Switches, toy_config
from .core import PatchGrid, VideoClip
from .model import init_params

__all__ = ["ModelConfig", "Switches", "toy_config", "PatchGrid", "VideoClip", "init_params"]
__version__ = "0.1.0"
