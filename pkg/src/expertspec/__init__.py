"""Toy MoE decoder with next-layer expert speculation and an offload scheduler."""

from __future__ import annotations

from .model import ModelConfig, RouterDecision, build_model, forward_decode, generate, load_model, preset, save_model
from .speculation import (
    BaselineS,
    DefaultVectorTable,
    EstPF,
    HybridPF,
    Oracle,
    RouterPF,
    accumulate_default_vectors,
    make_predictor,
    speculative_forward,
)
from .trace import load_trace, record_trace, save_trace
from .schedule import TimingModel, analytic_improvement, simulate_on_demand, simulate_prefetch
from .executor import run_offloaded_decode

__all__ = [
    "BaselineS",
    "DefaultVectorTable",
    "EstPF",
    "HybridPF",
    "ModelConfig",
    "Oracle",
    "RouterDecision",
    "RouterPF",
    "TimingModel",
    "accumulate_default_vectors",
    "analytic_improvement",
    "build_model",
    "forward_decode",
    "generate",
    "load_model",
    "load_trace",
    "make_predictor",
    "preset",
    "record_trace",
    "run_offloaded_decode",
    "save_model",
    "save_trace",
    "simulate_on_demand",
    "simulate_prefetch",
    "speculative_forward",
]
