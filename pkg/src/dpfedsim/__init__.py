"""Federated time-series transformer training under differential privacy."""

from .data import ClientProfile, RawTrace, SequenceBatch, generate_trace, make_sequences
from .experiment import ExperimentConfig, run_experiment, sweep_epsilon, validate_config
from .federation import fedavg, run_round
from .model import ModelParams, TstConfig, forward, init_params
from .privacy import PrivacyLedger, PrivacySpec, allocate_budget, clip_gradient, noise_scale, privatize_update
from .tensor import Tensor, grad_check

__version__ = "0.1.0"
