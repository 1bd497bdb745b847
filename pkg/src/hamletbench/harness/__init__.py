from .config import ConfigError, fingerprint, load_config, validate_config
from .evaluate import EvalReport, evaluate_policy
from .profiler import (EfficiencyReport, backbone_tokens, mac_count,
                       measure_latency, memory_rows, peak_scalars,
                       profile_efficiency)
from .attention import export_attention
from .report import CSV_COLUMNS, load_results, results_row, write_report
