"""Reconstruct jump-diffusion processes by matching Wasserstein distances."""
from .losses import LOSS_KINDS, evaluate_loss, loss_decoupled_w2sq, loss_w2sq_traj
from .process import InitialLaw, ProcessSpec, make_example1, make_example2, make_example3, make_model
from .reconstruction import ErrorReport, TrainConfig, TrainTrace, error_metrics, train
from .simulate import Ensemble, TimeGrid, simulate_ensemble

__all__ = [
    "LOSS_KINDS", "evaluate_loss", "loss_decoupled_w2sq", "loss_w2sq_traj",
    "InitialLaw", "ProcessSpec", "make_example1", "make_example2", "make_example3", "make_model",
    "ErrorReport", "TrainConfig", "TrainTrace", "error_metrics", "train",
    "Ensemble", "TimeGrid", "simulate_ensemble",
]
