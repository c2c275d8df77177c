"""Denoising-autoencoder anomaly detection trained against adversarially learned continuous noise."""

from .corruption import AlphaPolicy, NoiseStrategy, apply_strategy, blend, sample_alpha, sample_latent
from .data import BatchPlan, LabeledImageSet, ProtocolSplit, build_protocol, make_batches, synth_dataset
from .evaluate import ScoredSet, aggregate_report, anomaly_score, roc_auc, roc_curve, score_set
from .losses import LossWeights, dft2, ffl, l2, minimax_objective
from .model import ArchSpec, count_parameters, forward_denoiser, forward_noise_generator, init_params
from .train import FitConfig, OptimConfig, StepStats, TrainState, fit, init_state, train_baseline_step, train_step

__version__ = "0.1.0"
