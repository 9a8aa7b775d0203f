"""Token-wise dynamic precision switching for small decoder-only transformers."""

from .analyzer import LayerKlReport, PlanEntry, SwitchPlan, analyze_model, build_ladder_plan, build_switch_plan
from .engine import DecodeTrace, GenerationConfig, generate, generate_static, sweep_switch_speed, traffic_report
from .model import FP_BITS, ModelConfig, TinyTransformer
from .quantizer import QuantizedTensor, dequantize, quantize
from .scheduler import SchedulerConfig, SchedulerState, fault_tolerance, ppl_entropy

__all__ = [
    "FP_BITS", "DecodeTrace", "GenerationConfig", "LayerKlReport", "ModelConfig", "PlanEntry",
    "QuantizedTensor", "SchedulerConfig", "SchedulerState", "SwitchPlan", "TinyTransformer",
    "analyze_model", "build_ladder_plan", "build_switch_plan", "dequantize", "fault_tolerance",
    "generate", "generate_static", "ppl_entropy", "quantize", "sweep_switch_speed", "traffic_report",
]
