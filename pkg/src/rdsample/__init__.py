"""Samplers, cost accounting and theory checks for recurrent-depth language models."""

from .bench import CostLedger, LatencyModel, RunSpec, Trace, compare_samplers, simulate_time
from .errors import ConfigError, ContractViolation, EventLogError, InputError
from .kvcache import SharedKVCache
from .model import LoopedLM, ModelConfig, ToyModel, load_checkpoint, sample_tokens, save_checkpoint
from .samplers import (SAMPLERS, GenerationResult, SamplerConfig, generate_adaptive_ar,
                       generate_diffusion_adaptive, generate_diffusion_simple,
                       generate_self_speculative, generate_static_ar, run_sampler)
from .theory import ContractionOracle, ledger_replay, make_contraction_oracle

__version__ = "0.1.0"
