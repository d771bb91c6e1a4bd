"""Workload generation, concurrent driver and reporting."""
from .driver import ENGINES, Driver, RunResult, make_tree, run
from .report import CSV_COLUMNS, MetricsReport, OpRecord, build_report, report_csv, report_json
from .workload import (MIXES, OpStream, WorkloadSpec, checksum_value, gen_keys, gen_ops,
                       value_ok, zipf_cdf, zipf_top_mass)

__all__ = [
    "CSV_COLUMNS", "Driver", "ENGINES", "MIXES", "MetricsReport", "OpRecord", "OpStream",
    "RunResult", "WorkloadSpec", "build_report", "checksum_value", "gen_keys", "gen_ops",
    "make_tree", "report_csv", "report_json", "run", "value_ok", "zipf_cdf", "zipf_top_mass",
]
