"""Toy online test-time adaptation and analytical probes."""

from .loop import (
    METHODS,
    AdaptationTrace,
    SimConfig,
    StepRecord,
    default_schedule,
    read_trace,
    run_baseline,
    run_codemerge,
    run_method,
)
from .model import ToyModel, adapt_step, closed_form_ridge, ridge_gradient, ridge_loss
from .probes import (
    CorrelationReport,
    fingerprint_weight_correlation,
    hessian_rls_check,
    kendall_tau,
    lmc_barrier,
    pearson,
    sgd_pair_barrier,
)
from .stream import Batch, Shift, StreamConfig, generate_stream
