"""Differentially private finetuning of a linear classification head."""

from .accountant import (
    PrivacyReport,
    PrivacySpec,
    RdpProfile,
    calibrate_sigma,
    compose,
    privacy_report,
    rdp_sampled_gaussian,
    rdp_to_eps,
)
from .data_io import BatchSelector, FeatureDataset, gen_synthetic, read_cache, write_cache
from .grad_engine import GradientPacket, LinearHead
from .trainer import SweepGrid, TrainConfig, evaluate, init_head, run_sweep, train

__version__ = "0.1.0"
