"""Training-free dense inference for CLIP-style vision transformers.

The decoding (last) layer's attention can be swapped for correlative
self-attention or any of the ablation mechanisms in :mod:`csaseg.attention`;
:mod:`csaseg.slide` runs the zero-shot segmentation protocol on top.
"""

from .attention import (
    AttentionWeights,
    CsaDual,
    CsaSingle,
    EarlyBorrow,
    Identity,
    LocalWindow,
    RandomEnsemble,
    Sharpened,
    Vanilla,
    parse_mode,
)
from .classifier import ClassEmbeddingSet, argmax_mask, classify_dense
from .evaluation import ConfusionMatrix, miou
from .model_io import load_bundle, load_classes, load_model, save_model
from .slide import SlideConfig, slide_logits, slide_segment
from .vit import VitConfig, VitModel, capture_attention, forward_features

__version__ = "0.1.0"
