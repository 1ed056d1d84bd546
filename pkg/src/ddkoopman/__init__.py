"""Distributed deep Koopman identification of nonlinear time-varying
systems from partial observations.

A network of agents, each seeing a fixed linear slice of the state,
cooperatively identifies a shared lifted linear model (A, B, H) plus
per-agent neural lifting functions, reaching consensus on both state
estimates and the decoder through projection consensus.
"""

from .batching import BatchIndex, DataBatch, LiftStacks, build_stacks, partition
from .consensus import (ConsensusProblem, ConsensusResult, consensus_round,
                        init_iterate, run_to_tolerance)
from .engine import (BatchReport, EngineConfig, RunMetrics, RunResult,
                     assemble_K, compute_W1, descent_check, find_stable_step,
                     frozen_descent_trace, loss_L1, loss_L2, run_batch,
                     run_identification, setup_first_batch)
from .estimator import DistributedDeepKoopman
from .network import AgentState, GraphTopology, build_graph, exchange
from .observables import (AdamState, GradientBuffer, InnerLossTerms,
                          ObservableNet, adam_step, evaluate_inner_loss,
                          loss_and_gradient, sgd_step)
from .presets import FIVE_AGENT_C, five_agent_c_list
from .regression import (KoopmanModel, RecursiveState, check_observability,
                         fit_AB, fit_M, init_recursive, load_model_bundle,
                         recursive_update, save_model_bundle)
from .systems import PlantSpec, Trajectory, observe, simulate, step

__version__ = "0.1.0"

__all__ = [
    "AdamState", "AgentState", "BatchIndex", "BatchReport", "ConsensusProblem",
    "ConsensusResult", "DataBatch", "DistributedDeepKoopman", "EngineConfig",
    "FIVE_AGENT_C", "GradientBuffer", "GraphTopology", "InnerLossTerms",
    "KoopmanModel", "LiftStacks", "ObservableNet", "PlantSpec", "RecursiveState",
    "RunMetrics", "RunResult", "Trajectory", "adam_step", "assemble_K",
    "build_graph", "build_stacks", "check_observability", "compute_W1",
    "consensus_round", "descent_check", "evaluate_inner_loss",
    "find_stable_step", "fit_AB", "fit_M", "five_agent_c_list",
    "frozen_descent_trace", "init_iterate", "init_recursive",
    "load_model_bundle", "loss_L1", "loss_L2", "loss_and_gradient", "observe",
    "partition", "recursive_update", "run_batch", "run_identification",
    "run_to_tolerance", "save_model_bundle", "setup_first_batch", "sgd_step",
    "simulate", "step", "exchange",
]
