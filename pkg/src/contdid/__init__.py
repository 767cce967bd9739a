"""Difference-in-differences estimators for treatments that vary continuously at every period."""

from .errors import ContDidError
from .estimators import (
    Estimate,
    EstimateSet,
    ampos_nostayers,
    ampos_reg,
    dynamic_effects,
    long_run_reg,
    twfe_reference,
    wampos_ps,
    wampos_ps_nostayers,
    wampos_reg,
)
from .inference import BootstrapSpec, bootstrap, bootstrap_many
from .panel import ColumnSchema, Panel, check_monotone_baseline, classify, ingest, overlap_report
from .propensity import fit_pscore, reweight
from .simulate import DgpSpec, generate, oracle
from .smoothing import fit_cef, fit_cef_quasi_stayers, select_bandwidth

__version__ = "0.1.0"

__all__ = [
    "ContDidError",
    "Estimate",
    "EstimateSet",
    "ampos_reg",
    "ampos_nostayers",
    "wampos_reg",
    "wampos_ps",
    "wampos_ps_nostayers",
    "long_run_reg",
    "dynamic_effects",
    "twfe_reference",
    "BootstrapSpec",
    "bootstrap",
    "bootstrap_many",
    "Panel",
    "ColumnSchema",
    "ingest",
    "classify",
    "overlap_report",
    "check_monotone_baseline",
    "fit_pscore",
    "reweight",
    "fit_cef",
    "fit_cef_quasi_stayers",
    "select_bandwidth",
    "DgpSpec",
    "generate",
    "oracle",
]
