"""Dual contrastive learning for text classification, from scratch on numpy."""

from .autodiff import Tape, Tensor, as_tensor, backward, finite_difference_check
from .encoder import EncoderConfig, Representations, encode_tokens, extract_representations, init_params
from .objectives import (
    LossValue,
    build_relations,
    loss_ce_modified,
    loss_dual,
    loss_overall,
    loss_self,
    loss_sup,
    loss_theta,
    loss_z,
    predict,
)
from .text import Dataset, LabelSet, RawExample, Vocabulary, load_tsv, make_synthetic
from .trainer import TrainConfig, evaluate, load_checkpoint, low_resource_sweep, save_checkpoint, train

__version__ = "0.1.0"
