"""maskfew: few-shot text classification via attribution-guided masking.

A small, self-contained pipeline: a tape-based autodiff tensor engine,
a mini pre-norm transformer encoder, Integrated Gradients attribution,
contiguous keep-window masking of anchor samples, and contrastive
fine-tuning on mixed novel/anchor batches.  Hot kernels run through a
compiled extension when built (see maskfew.backend).
"""

from maskfew import backend
from maskfew.encoder import (CLS_ID, EncoderConfig, MASK_ID, ModelParams,
                             PAD_ID, TokenSequence, UNK_ID, classify,
                             cls_features, embed, encode, init_params)
from maskfew.errors import MaskFewError
from maskfew.pipeline import (EpisodeSpec, ExperimentData, TrainConfig,
                              evaluate, run_experiment, run_fsl,
                              sample_episode, train_base)
from maskfew.tensor import Tensor, backward, no_grad, zero_grads

__version__ = "0.1.0"

__all__ = [
    "backend", "CLS_ID", "PAD_ID", "UNK_ID", "MASK_ID",
    "EncoderConfig", "ModelParams", "TokenSequence",
    "classify", "cls_features", "embed", "encode", "init_params",
    "MaskFewError", "EpisodeSpec", "ExperimentData", "TrainConfig",
    "evaluate", "run_experiment", "run_fsl", "sample_episode", "train_base",
    "Tensor", "backward", "no_grad", "zero_grads",
]
