"""Hybrid SSM / attention language-model components in numpy, with the tooling to check them."""
from .blocks import AttnConfig, HybridConfig, HybridModel, SsmConfig, allocate_channels, init_model, model_forward
from .data import ByteTokenizer, MixtureSpec, PackedBatch, next_batch, pack_documents, pretokenize
from .dynamics import (OptimizerState, RampupSpec, ScheduleSpec, ToyModelSpec, adamw_step, batch_scaled_lr,
                       dp_throughput, elr_ewd, schedule_at, toy_simulate, toy_stationary_moments)
from .mup import MuPMultiplierSet, apply_symmetry, fit_sensitivity, scale_multipliers, tune, tune_stage
from .ssm import DtPolicy, materialize_mixing_matrix, ssm_scan, ssm_scan_chunked, ssm_scan_sequential
from .train import TrainConfig, Trainer

__version__ = "0.1.0"
