"""Fundus gradability network: autoencoder-regularised classifier with attribution and robustness tools."""

from .config import RunConfig
from .estimator import FGRNetClassifier
from .exceptions import ConfigError, ContractError, DimensionError, DivergenceError, FGRNetError
from .interpret import SaliencyMap, gradcam, gradient_saliency, occlusion, timing_benchmark
from .losses import combined_loss, cross_entropy, mae_loss, mse_loss, ssim, ssim_loss
from .metrics import ConfusionMatrix, MetricsReport, confusion_matrix, evaluate_predictions, metrics_from_confusion
from .model import (FGRNetParams, ModelConfig, build_model, classify, decode, encode, forward_infer,
                    forward_train, load_checkpoint, save_checkpoint)
from .robustness import AttackConfig, PerturbationSpec, perturb, pgd_attack, robustness_report
from .synthdata import SyntheticDataset, generate_fundus, load_dataset, make_dataset, save_dataset
from .tensor import Tape, Tensor, backward, grad_check
from .training import TrainConfig, adam_step, train

__version__ = "0.1.0"
