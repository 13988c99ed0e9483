"""Sparse attention accelerator model: pruning, progressive quantization, top-k engine and simulator."""

from .attention import AttentionInput, AttentionResult, attention_dense, attention_fixed, attention_masked
from .progressive import PQPolicy, PQStats, progressive_attention
from .pruning import ImportanceState, PruneSchedule, make_schedule
from .quant import QuantParams, QuantTensor, quantize
from .simarch import ArchConfig, Precision, SimReport, Trace, simulate, speedup_breakdown
from .topk import TopKConfig, TopKResult, filter_top_k, quick_select, zero_eliminate
from .workloads import ModelConfig, PRESETS, preset, run_model, synthetic_trace

__all__ = [
    "AttentionInput", "AttentionResult", "attention_dense", "attention_fixed", "attention_masked",
    "PQPolicy", "PQStats", "progressive_attention",
    "ImportanceState", "PruneSchedule", "make_schedule",
    "QuantParams", "QuantTensor", "quantize",
    "ArchConfig", "Precision", "SimReport", "Trace", "simulate", "speedup_breakdown",
    "TopKConfig", "TopKResult", "filter_top_k", "quick_select", "zero_eliminate",
    "ModelConfig", "PRESETS", "preset", "run_model", "synthetic_trace",
]
__version__ = "0.1.0"
