"""Desk-scale downlink C-RAN simulator.

Hybrid CoMP transmission (shared plus private zero-forced streams) with
queue-aware, fronthaul-constrained power and rate allocation learned
online, alongside throughput-greedy baselines, in a reproducible
frame-by-frame Monte Carlo harness.
"""

from .config import ClusterConfig, ConstraintConfig, TrafficConfig, dbm_to_watts, watts_to_dbm
from .channel import ChannelState, draw_channel
from .hcomp import (
    AllocationAction,
    LinkOutcome,
    PrecoderSet,
    StreamSplit,
    build_precoders,
    build_private_precoder,
    build_shared_precoder,
    cross_nulling_check,
    dof_table,
    effective_rank,
    evaluate_link,
    link_gains,
    private_stream_limit,
    zero_forcing_residual,
)
from .queueing import PacketTagger, QueueState, advance_queue, delay_cost, draw_arrivals
from .allocator import (
    Feedback,
    LearnerState,
    StepSchedule,
    ValueGrid,
    allocate,
    gradient_step,
    learn_value,
    per_stage_gradient,
    per_queue_stage_cost,
    restore_checkpoint,
    save_checkpoint,
    update_multipliers,
    value_lookup,
)
from .oracle import TinyMdp, product_mdp, queue_walk_mdp, solve_joint, solve_per_queue
from .sim import (
    SCHEMES,
    ExperimentConfig,
    MetricsRecord,
    ThroughputPolicy,
    baseline_policy,
    export_metrics,
    run_experiment,
    run_replications,
    run_sweep,
    summarize,
)

__version__ = "0.1.0"
