"""Phase-aware GPU clock control for disaggregated LLM serving, on a discrete-event simulator."""

from .gpu_model import FrequencyGrid, GpuProfile, default_profile, load_profile
from .metrics import SloConfig, energy_report, quantile, slo_pass_rates
from .prefill_opt import INFEASIBLE, PrefillBatch, PrefillJob, select_frequency
from .router import RoutingConfig, classify
from .simkernel import NodeConfig, RunResult, default_nv, fixed_freq, greenllm, prefill_split, run
from .trace import Request, Trace, gen_poisson_trace, load_trace

__version__ = "0.1.0"
