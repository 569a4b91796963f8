"""Diffusion models whose backbone is a stack of bidirectional selective state-space blocks."""

from .diffusion import NoiseSchedule, SamplerConfig, ddpm_sample, linear_beta_schedule, training_loss
from .model import DiS, ModelConfig, param_count
from .ssm import flops_attention, flops_ssm, selective_scan
from .tensor import Tensor, backward, count_macs, no_grad, precision
from .trainer import train

__all__ = [
    "DiS", "ModelConfig", "NoiseSchedule", "SamplerConfig", "Tensor", "backward", "count_macs",
    "ddpm_sample", "flops_attention", "flops_ssm", "linear_beta_schedule", "no_grad",
    "param_count", "precision", "selective_scan", "train", "training_loss",
]
