"""Bias-part classifiers for ReLU networks.

The logits of a ReLU network are affine on each linear region,
F(x) = W_x x + B_x. This package trains and evaluates classifiers that decide
by argmax of the piecewise-constant bias term B_x, implements the gradient
attacks that still apply to such classifiers, and adds the random first-degree
augmentation that provably randomizes those attacks' directions.
"""

from .net import Network, Dense, Conv2d, MaxPool2, loss_ce, make_mlp, make_convnet
from .decompose import (
    AffineDecomposition,
    input_jacobian,
    bias_part,
    bias_part_masked,
    bias_label,
    bias_labels,
    region_signature,
    construct_bias_network,
)
from .data import LabeledDataset, gen_synthetic, load_idx, save_model, load_model

__all__ = [
    "Network", "Dense", "Conv2d", "MaxPool2", "loss_ce", "make_mlp", "make_convnet",
    "AffineDecomposition", "input_jacobian", "bias_part", "bias_part_masked",
    "bias_label", "bias_labels", "region_signature", "construct_bias_network",
    "LabeledDataset", "gen_synthetic", "load_idx", "save_model", "load_model",
]
