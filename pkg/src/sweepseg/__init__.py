"""Semantic segmentation with four-directional recurrent sweeps.

A self-contained library and CLI: a numpy tensor core, a tape-based
reverse-mode differentiator, GRU sweep layers over image patches,
transposed-convolution upsampling, balanced cross-entropy training, and
the metrics to evaluate it — all verifiable at desk scale through
gradient, adjoint, shape, and overfit tests.
"""

from .autodiff import (GradientReport, Tape, Var, finite_difference_grad,
                       gradient_check)
from .data import (Dataset, DatasetManifest, Sample, compute_class_frequencies,
                   load_dataset, load_image, load_manifest, load_mask,
                   read_netpbm, synth_dataset, threshold_mask, write_netpbm)
from .layers import (GruParams, PatchGrid, ReNetParams, SweepParams,
                     conv_frontend, directional_sweep,
                     directional_sweep_sequential, gru_step, merge_patches,
                     renet_layer, split_patches, upsample_layer)
from .metrics import (ConfusionMatrix, accumulate, global_accuracy, mean_iou,
                      per_class_accuracy)
from .model import (Model, ModelConfig, RenetLayerConfig, UpsampleLayerConfig,
                    build_model, config_from_hyperparams, forward, init_glorot,
                    init_orthonormal, load_model, save_model, tiny_config,
                    traced_forward)
from .tensor import (ConvSpec, activation, concat_channels, conv2d,
                     softmax_channels, transposed_conv2d)
from .training import (AdadeltaState, LossConfig, TrainConfig, adadelta_update,
                       median_frequency_weights, train, weighted_cross_entropy)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
