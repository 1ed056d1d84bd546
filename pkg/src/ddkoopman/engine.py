"""Per-batch orchestration of the distributed identification algorithm.

For every new batch each agent: folds the batch into its recursive
least-squares fit, re-initializes its decoder iterate from the fit, and
then runs an inner loop that interleaves one projection-consensus round
on the decoder with one gradient step on the net parameters. Both
stopping rules are checked independently: consensus stops when the
per-round decoder change falls below eps1, the gradient loop stops when
the agent's loss falls below eps2 (checked before the first step, so a
generous eps2 disables tuning entirely). Updates within a round read
only previous-round snapshots, so the run is independent of agent
ordering and bitwise reproducible.

The state-consensus variant replaces decoder consensus with one
projection-consensus solve for the full state stack per batch, then fits
the decoder to the consensus estimate and minimizes the regression loss
alone.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import consensus as consensus_mod
from . import linalg, regression
from .batching import StackCache, partition
from .errors import DimensionError, InvalidInputError
from .network import AgentState, build_graph, exchange, read_inbox
from .observables import (AdamState, InnerLossTerms, ObservableNet,
                          adam_step, evaluate_inner_loss, sgd_step)
from .regression import KoopmanModel

log = logging.getLogger(__name__)

VARIANTS = ("ddkl", "ddkl-1")
OPTIMIZERS = ("constant", "adam")
EXCHANGE_MODES = ("per_round", "per_batch")

METRICS_COLUMNS = ("tau", "s", "agent", "loss", "l1", "l2", "h_gap",
                   "state_err", "grad_norm")


@dataclass
class EngineConfig:
    """Knobs of the per-batch algorithm."""

    lift_dim: int = 8
    hidden_layers: tuple = (64, 48, 32)
    w: float = 0.5                 # weight of the disagreement term (weighted mode)
    w_bar: float = 0.5             # split between the two regression blocks
    eps1: float = 1e-9             # decoder-consensus stop (per-round change)
    eps2: float = 1e-6             # gradient-loop stop (loss level)
    eps3: float = 1e-9             # state-consensus stop (squared change)
    inner_steps: int = 200         # cap S on inner iterations per batch
    step_size: float = 0.05        # constant-GD step
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    variant: str = "ddkl"
    weights_in_inner_loss: bool = False   # False matches the printed inner loss
    degree_normalized_consensus: bool = True
    consensus_tail: bool = True    # finish decoder consensus to eps1 after the loop
    exchange_mode: str = "per_round"
    beta_enforce: str = "warn"
    svd_tol: float = linalg.DEFAULT_TOL

    def __post_init__(self):
        if not 0 < self.w < 1:
            raise InvalidInputError("w must lie in (0, 1)")
        if not 0 < self.w_bar < 1:
            raise InvalidInputError("w_bar must lie in (0, 1)")
        if self.inner_steps < 1:
            raise InvalidInputError("inner_steps must be >= 1")
        if self.step_size <= 0:
            raise InvalidInputError("step_size must be positive")
        if min(self.eps1, self.eps2, self.eps3) < 0:
            raise InvalidInputError("tolerances must be nonnegative")
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"variant must be one of {VARIANTS}")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidInputError(f"optimizer must be one of {OPTIMIZERS}")
        if self.exchange_mode not in EXCHANGE_MODES:
            raise InvalidInputError(f"exchange_mode must be one of {EXCHANGE_MODES}")


class RunMetrics:
    """Row store for the per-(tau, s, agent) metrics CSV."""

    def __init__(self):
        self.rows = []

    def append(self, tau, s, agent, loss, l1, l2, h_gap, state_err, grad_norm):
        self.rows.append((int(tau), int(s), int(agent), float(loss), float(l1),
                          float(l2), float(h_gap), float(state_err),
                          float(grad_norm)))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_COLUMNS)
            for row in self.rows:
                writer.writerow([row[0], row[1], row[2]] +
                                [repr(v) for v in row[3:]])

    def column(self, name):
        idx = METRICS_COLUMNS.index(name)
        return np.array([row[idx] for row in self.rows])

    def filtered(self, **conditions):
        keep = []
        for row in self.rows:
            if all(row[METRICS_COLUMNS.index(k)] == v for k, v in conditions.items()):
                keep.append(row)
        return keep


@dataclass
class GateReport:
    """Theorem-side quantities of one agent at batch start."""

    w1: float
    available: bool
    threshold: float          # loss level above which tuning never activates
    initial_loss: float = float("nan")
    activated: bool = True
    steps_taken: int = 0


@dataclass
class BatchReport:
    tau: int
    variant: str
    gamma: float = float("nan")
    gamma_r2: float = float("nan")
    consensus_rounds: int = 0
    h_converged: bool = False
    h_gap_final: float = float("nan")
    state_err_final: list = field(default_factory=list)
    loss_final: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    observability_passed: list = field(default_factory=list)
    state_consensus_gap: float = float("nan")   # ddkl-1 only
    state_consensus_converged: bool = True
    state_estimate_error: float = float("nan")  # ||S* - X||_F worst agent, ddkl-1


# ----------------------------------------------------------------------
# loss helpers (also used directly by tests)
# ----------------------------------------------------------------------
def assemble_K(ab, bottom):
    """Block matrix [[A, B], [bottom, 0]] with the zero block sized to U."""
    r = ab.shape[0]
    m = ab.shape[1] - r
    q = bottom.shape[0]
    return np.block([[ab], [bottom, np.zeros((q, m))]])


def loss_L2(stacks, K):
    """Regression loss ``(1/beta) || [Gbar; Y] - K [G; U] ||_F^2``."""
    r = stacks.G.shape[0]
    target = np.vstack([stacks.Gbar, stacks.Y])
    if K.shape != (target.shape[0], r + stacks.U.shape[0]):
        raise DimensionError(
            f"K has shape {K.shape}, expected {(target.shape[0], r + stacks.U.shape[0])}"
        )
    resid = target - K @ np.vstack([stacks.G, stacks.U])
    return float(np.sum(resid * resid)) / stacks.beta


def loss_L1(own_estimates, neighbor_estimates, degree):
    """Disagreement loss ``(1/(beta d)) sum_k sum_j ||xhat_i(k) - xhat_j(k)||^2``."""
    beta = own_estimates.shape[1]
    total = 0.0
    for est in neighbor_estimates:
        if est.shape != own_estimates.shape:
            raise DimensionError("neighbor snapshot shape mismatch")
        d = own_estimates - est
        total += float(np.sum(d * d))
    return total / (beta * max(degree, 1))


def pairwise_h_gap(agents):
    gap = 0.0
    for i in range(len(agents)):
        for j in range(i + 1, len(agents)):
            gap = max(gap, float(np.linalg.norm(agents[i].H - agents[j].H)))
    return gap


def propagated_estimates(agent, batch):
    """Closed-loop state estimates over the batch window.

    Starts from the true observation at the window start and rolls the
    estimated dynamics forward: estimates are returned for the beta
    samples after the start. Bounded lifting keeps this finite.
    """
    model = agent.model
    beta = batch.index.beta
    yhat = batch.observations[:, 0].copy()
    out = np.empty((agent.H.shape[0], beta))
    for t in range(beta):
        lift = agent.net.forward(yhat)
        x_next = agent.H @ (model.A @ lift + model.B @ batch.inputs[:, t])
        out[:, t] = x_next
        yhat = agent.c @ x_next
    return out


def state_estimation_error(agent, batch, x_true):
    """Mean distance between propagated estimates and the true states."""
    est = propagated_estimates(agent, batch)
    diff = est - x_true[:, 1:]
    return float(np.mean(np.linalg.norm(diff, axis=0)))


# ----------------------------------------------------------------------
# residual bound (theorem-side)
# ----------------------------------------------------------------------
@dataclass
class W1Report:
    value: float
    available: bool
    alpha1: float
    alpha2: float


def _row_bound(reg_t, target, coef_norm, alpha):
    """Residual bound of one least-squares row problem ``reg_t x ~ target``.

    The augmented-matrix bound is valid for any alpha with
    ``sigma_min([reg_t, alpha b]) < sigma_min(reg_t)``; alpha is halved
    until that holds (appending one column keeps the ratio <= 1, so this
    terminates unless the problem is degenerate).
    """
    s_reg = linalg.sigma_min(reg_t)
    if s_reg == 0.0:
        return None, alpha
    for _ in range(80):
        aug = np.hstack([reg_t, alpha * target[:, None]])
        s = linalg.sigma_min(aug)
        delta = s / s_reg
        if delta < 1.0:
            val = s * np.sqrt(alpha ** -2 + coef_norm ** 2 / (1.0 - delta ** 2))
            return float(val), alpha
        alpha *= 0.5
    return None, alpha


def _block_bound(coef, regressors, targets, alpha):
    """Frobenius aggregation of the per-row residual bounds of one block."""
    reg_t = regressors.T
    acc = 0.0
    used_alpha = alpha
    for j in range(targets.shape[0]):
        val, used_alpha = _row_bound(reg_t, targets[j], float(np.linalg.norm(coef[j])),
                                     alpha)
        if val is None:
            return None, used_alpha
        acc += val * val
    return float(np.sqrt(acc)), used_alpha


def compute_W1(stacks, ab, m, alpha1=0.1, alpha2=0.1):
    """Upper bound on every per-sample residual of the initial fit.

    Applies the augmented-matrix least-squares residual bound row by row
    to both regression blocks (dynamics rows against [G; U], decoder rows
    against G) and aggregates in Frobenius norm, which dominates every
    residual column. Returns a report; ``available`` is False when the
    bound degenerates (rank-deficient regressors).
    """
    t1, a1 = _block_bound(ab, stacks.chi, stacks.Gbar, alpha1)
    t2, a2 = _block_bound(m, stacks.G, stacks.Y, alpha2)
    if t1 is None or t2 is None:
        return W1Report(value=float("nan"), available=False, alpha1=a1, alpha2=a2)
    return W1Report(value=t1 + t2, available=True, alpha1=a1, alpha2=a2)


def residual_columns(stacks, K):
    """Per-sample residual norms ``||[Gbar_k; Y_k] - K [G_k; U_k]||``."""
    resid = np.vstack([stacks.Gbar, stacks.Y]) - K @ np.vstack([stacks.G, stacks.U])
    return np.linalg.norm(resid, axis=0)


def gate_threshold(agents, graph, i, w1_value, beta):
    """Loss level above which the gradient loop never activates.

    ``w1^2 + (1/beta) max over neighbors of (||pinv(C_i) Y_i||_F^2 +
    ||pinv(C_j) Y_j||_F^2)`` evaluated on the current batch stacks.
    """
    own = float(np.linalg.norm(agents[i].c_pinv @ agents[i]._stacks.Y)) ** 2
    worst = 0.0
    for j in graph.in_neighbors[i]:
        other = float(np.linalg.norm(agents[j].c_pinv @ agents[j]._stacks.Y)) ** 2
        worst = max(worst, own + other)
    return w1_value ** 2 + worst / beta


# ----------------------------------------------------------------------
# agent construction and the first batch
# ----------------------------------------------------------------------
def init_agents(c_list, config, seed=0):
    """Build one agent per observation matrix, nets seeded from ``seed``."""
    agents = []
    for i, c in enumerate(c_list):
        c = np.atleast_2d(np.asarray(c, dtype=float))
        net = ObservableNet(c.shape[0], config.hidden_layers, config.lift_dim,
                            seed=(seed, i))
        agents.append(AgentState(
            agent_id=i,
            c=c,
            net=net,
            c_pinv=linalg.pinv(c, config.svd_tol),
            projection=linalg.orth_projection(c, config.svd_tol, label=f"agent {i}"),
            stack_cache=StackCache(),
        ))
    return agents


def _publish_payload(agent):
    return {"H": agent.H, "xhat": agent._xhat}


def _refresh_lift(agent, batch):
    """Forward pass at the current theta, cached per (tau, version)."""
    key = (batch.index.tau, agent.net.version)
    if getattr(agent, "_lift_key", None) != key:
        g_all, cache = agent.net.batch_forward(batch.observations, want_cache=True)
        agent._lift = (g_all, cache)
        agent._lift_key = key
    return agent._lift


def _model_from_state(agent, tau):
    r = agent.rls.AB.shape[0]
    return KoopmanModel(
        A=agent.rls.AB[:, :r].copy(),
        B=agent.rls.AB[:, r:].copy(),
        M=agent.rls.M.copy(),
        H=None if agent.H is None else agent.H.copy(),
        lift_dim=r,
        theta_version=agent.net.version,
        tau=tau,
    )


def setup_first_batch(agents, graph, batches, x_true, config, metrics):
    """Step-one initialization: plain LS fit on the first batch.

    No parameter tuning happens here; the recorded metrics row per agent
    is the pre-training baseline.
    """
    report = BatchReport(tau=0, variant=config.variant)
    for agent, batch in zip(agents, batches):
        stacks = agent.stack_cache.get(batch, agent.net)
        agent._stacks = stacks
        agent.rls = regression.init_recursive(stacks, config.svd_tol)
        agent.H = agent.c_pinv @ agent.rls.M
        agent.model = _model_from_state(agent, 0)
    if config.variant == "ddkl-1":
        _state_consensus_and_decoder_fit(agents, graph, batches, x_true, config,
                                         report)
    _record_round(agents, graph, batches, x_true, config, metrics, tau=0, s=0)
    _finalize_models(agents, config, report, tau=0)
    for agent, batch in zip(agents, batches):
        report.state_err_final.append(state_estimation_error(agent, batch, x_true))
    report.h_gap_final = pairwise_h_gap(agents)
    return report


def _build_terms(agent, batch, graph, config, estimates):
    """Inner-loss terms at the agent's current theta/decoder state."""
    beta = batch.index.beta
    if config.variant == "ddkl-1":
        return InnerLossTerms(
            observations=batch.observations,
            inputs=batch.inputs[:, :beta],
            K=_current_K(agent, config),
            bottom_targets=agent._state_targets,
            H=None,
            neighbor_estimates=(),
            degree=graph.degrees[agent.agent_id],
        )
    return InnerLossTerms(
        observations=batch.observations,
        inputs=batch.inputs[:, :beta],
        K=_current_K(agent, config),
        bottom_targets=agent._stacks.Y,
        H=agent.H,
        neighbor_estimates=estimates,
        degree=graph.degrees[agent.agent_id],
        degree_normalized=config.degree_normalized_consensus,
        weighted=config.weights_in_inner_loss,
        w=config.w, w_bar=config.w_bar,
    )


def _record_round(agents, graph, batches, x_true, config, metrics, tau, s):
    """One metrics row per agent for the current (theta, decoder) state."""
    for agent, batch in zip(agents, batches):
        g_all, _ = _refresh_lift(agent, batch)
        agent._xhat = agent.H @ g_all[:, 1:]
    exchange(agents, graph, _publish_payload, round_tag=(tau, s))
    h_gap = pairwise_h_gap(agents)
    for i, (agent, batch) in enumerate(zip(agents, batches)):
        inbox = read_inbox(agent, (tau, s))
        estimates = tuple(inbox[j]["xhat"] for j in graph.in_neighbors[i])
        l1 = loss_L1(agent._xhat, estimates, graph.degrees[i])
        terms = _build_terms(agent, batch, graph, config, estimates)
        res = evaluate_inner_loss(agent.net, terms, want_grad=False,
                                  precomputed=_refresh_lift(agent, batch))
        err = state_estimation_error(agent, batch, x_true)
        metrics.append(tau, s, i, res.loss, l1, res.l2, h_gap, err, 0.0)


def _current_K(agent, config):
    if config.variant == "ddkl-1":
        return assemble_K(agent.rls.AB, agent.H)
    return assemble_K(agent.rls.AB, agent.rls.M)


# ----------------------------------------------------------------------
# per-batch runs
# ----------------------------------------------------------------------
def run_batch(agents, graph, batches, x_true, config, metrics):
    if config.variant == "ddkl":
        return run_batch_ddkl(agents, graph, batches, x_true, config, metrics)
    return run_batch_ddkl1(agents, graph, batches, x_true, config, metrics)


def _recursive_refresh(agents, batches, config, tau):
    """Fold the new batch into every agent's fit at the entering theta."""
    for agent, batch in zip(agents, batches):
        stacks = agent.stack_cache.get(batch, agent.net)
        agent._stacks = stacks
        agent.rls = regression.recursive_update(agent.rls, stacks)
        agent.model = _model_from_state(agent, tau)
        agent.adam = AdamState(lr=config.learning_rate,
                               weight_decay=config.weight_decay)


def _gate_reports(agents, graph, config):
    reports = []
    for i, agent in enumerate(agents):
        w1 = compute_W1(agent._stacks, agent.rls.AB, agent.rls.M)
        threshold = gate_threshold(agents, graph, i, w1.value, agent._stacks.beta) \
            if w1.available else float("nan")
        reports.append(GateReport(w1=w1.value, available=w1.available,
                                  threshold=threshold))
    return reports


def _theta_step(agent, grad, config):
    if config.optimizer == "adam":
        adam_step(agent.net, grad, agent.adam)
    else:
        sgd_step(agent.net, grad, config.step_size)


def _decoder_round(agents, graph, tau, s):
    """One synchronous projection-consensus round on the decoders.

    Returns the largest per-agent change. Reads neighbor decoders from
    the already-exchanged round-(tau, s) snapshots.
    """
    updates = []
    for i, agent in enumerate(agents):
        inbox = read_inbox(agent, (tau, s))
        acc = np.zeros_like(agent.H)
        for j in graph.in_neighbors[i]:
            acc += inbox[j]["H"] - agent.H
        q = np.eye(agent.H.shape[0]) - agent.projection
        updates.append(agent.H + (q @ acc) / graph.degrees[i])
    change = max(float(np.linalg.norm(new - agent.H))
                 for new, agent in zip(updates, agents))
    for agent, new in zip(agents, updates):
        agent.H = new
    return change


def run_batch_ddkl(agents, graph, batches, x_true, config, metrics):
    """Decoder-consensus variant: interleaved consensus and tuning."""
    tau = batches[0].index.tau
    _recursive_refresh(agents, batches, config, tau)
    for agent in agents:
        agent.H = agent.c_pinv @ agent.rls.M
    report = BatchReport(tau=tau, variant="ddkl")
    report.gates = _gate_reports(agents, graph, config)

    h_active = True
    g_active = [True] * len(agents)
    frozen_estimates = None
    h_history = [[agent.H.copy() for agent in agents]]
    rounds_used = 0
    for s in range(config.inner_steps):
        # publish pass: fresh lift at theta(s), decoder H(s)
        for agent, batch in zip(agents, batches):
            g_all, _ = _refresh_lift(agent, batch)
            agent._xhat = agent.H @ g_all[:, 1:]
        exchange(agents, graph, _publish_payload, round_tag=(tau, s))
        if config.exchange_mode == "per_batch" and frozen_estimates is None:
            frozen_estimates = [
                tuple(read_inbox(agent, (tau, s))[j]["xhat"]
                      for j in graph.in_neighbors[i])
                for i, agent in enumerate(agents)
            ]
        h_gap = pairwise_h_gap(agents)

        evals = []
        for i, (agent, batch) in enumerate(zip(agents, batches)):
            inbox = read_inbox(agent, (tau, s))
            if frozen_estimates is not None:
                estimates = frozen_estimates[i]
            else:
                estimates = tuple(inbox[j]["xhat"] for j in graph.in_neighbors[i])
            terms = _build_terms(agent, batch, graph, config, estimates)
            res = evaluate_inner_loss(agent.net, terms, want_grad=g_active[i],
                                      precomputed=_refresh_lift(agent, batch))
            evals.append(res)
            err = state_estimation_error(agent, batch, x_true)
            gnorm = res.grad.norm if res.grad is not None else 0.0
            metrics.append(tau, s, i, res.loss, res.l1, res.l2, h_gap, err, gnorm)
            if s == 0:
                report.gates[i].initial_loss = res.loss

        # gradient stop is checked before stepping: a loss already below
        # eps2 means the tuning loop never activates this round
        for i, agent in enumerate(agents):
            if not g_active[i]:
                continue
            if evals[i].loss <= config.eps2:
                g_active[i] = False
                if report.gates[i].steps_taken == 0:
                    report.gates[i].activated = False
                    log.info("agent %d tau %d: gradient loop not activated "
                             "(loss %.3e <= eps2 %.3e)", i, tau, evals[i].loss,
                             config.eps2)
                continue
            _theta_step(agent, evals[i].grad, config)
            report.gates[i].steps_taken += 1

        if h_active:
            change = _decoder_round(agents, graph, tau, s)
            rounds_used += 1
            h_history.append([agent.H.copy() for agent in agents])
            if change <= config.eps1:
                h_active = False
        if not h_active and not any(g_active):
            break

    # keep averaging decoders (cheap) until the consensus stop rule is met
    if config.consensus_tail and h_active:
        cap = consensus_mod.ROUNDS_PER_UNKNOWN * graph.n_agents * \
            agents[0].H.size
        s_tail = config.inner_steps
        while h_active and rounds_used < cap:
            exchange(agents, graph, _publish_payload, round_tag=(tau, s_tail))
            change = _decoder_round(agents, graph, tau, s_tail)
            rounds_used += 1
            s_tail += 1
            if len(h_history) < 2048:
                h_history.append([agent.H.copy() for agent in agents])
            if change <= config.eps1:
                h_active = False

    report.consensus_rounds = rounds_used
    report.h_converged = not h_active
    ref = sum(h_history[-1]) / len(agents)
    errs = [max(float(np.linalg.norm(h - ref)) for h in blocks)
            for blocks in h_history]
    report.gamma, report.gamma_r2 = consensus_mod.fit_geometric_rate(
        np.asarray(errs)[:200])
    _finalize_models(agents, config, report, tau)
    _record_round(agents, graph, batches, x_true, config, metrics, tau=tau,
                  s=config.inner_steps)
    report.h_gap_final = pairwise_h_gap(agents)
    last_rows = metrics.rows[-len(agents):]
    for agent, batch in zip(agents, batches):
        report.state_err_final.append(state_estimation_error(agent, batch, x_true))
        report.loss_final.append(last_rows[agent.agent_id][3])
    return report


def _state_consensus_and_decoder_fit(agents, graph, batches, x_true, config,
                                     report):
    """State-stack consensus followed by the per-agent decoder fit."""
    problem = consensus_mod.ConsensusProblem(
        partitions=[agent.c for agent in agents],
        rhs=[agent._stacks.Y for agent in agents],
        graph=graph,
    )
    result = consensus_mod.run_to_tolerance(problem, eps1=np.sqrt(config.eps3))
    report.state_consensus_gap = result.pairwise_gap
    report.state_consensus_converged = result.converged
    report.state_estimate_error = max(
        float(np.linalg.norm(sol - x_true[:, :batches[0].index.beta]))
        for sol in result.solutions
    )
    if not result.consistent:
        log.warning("state-stack consensus left agents %.3e apart; the decoder "
                    "fit inherits this open-loop estimation error",
                    result.pairwise_gap)
    for agent, sol in zip(agents, result.solutions):
        agent._state_targets = sol
        agent.H = regression.fit_M(agent._stacks, targets=sol, tol=config.svd_tol)
        agent.model.H = agent.H.copy()
        agent.model.M = agent.c @ agent.H


def run_batch_ddkl1(agents, graph, batches, x_true, config, metrics):
    """State-consensus variant: fit the decoder to the consensus state stack,
    then minimize the regression loss alone (no decoder consensus)."""
    tau = batches[0].index.tau
    _recursive_refresh(agents, batches, config, tau)
    report = BatchReport(tau=tau, variant="ddkl-1")
    _state_consensus_and_decoder_fit(agents, graph, batches, x_true, config,
                                     report)
    report.gates = _gate_reports(agents, graph, config)

    g_active = [True] * len(agents)
    for s in range(config.inner_steps):
        for agent, batch in zip(agents, batches):
            g_all, _ = _refresh_lift(agent, batch)
            agent._xhat = agent.H @ g_all[:, 1:]
        exchange(agents, graph, _publish_payload, round_tag=(tau, s))
        h_gap = pairwise_h_gap(agents)
        evals = []
        for i, (agent, batch) in enumerate(zip(agents, batches)):
            inbox = read_inbox(agent, (tau, s))
            estimates = tuple(inbox[j]["xhat"] for j in graph.in_neighbors[i])
            l1 = loss_L1(agent._xhat, estimates, graph.degrees[i])
            terms = _build_terms(agent, batch, graph, config, estimates)
            res = evaluate_inner_loss(agent.net, terms, want_grad=g_active[i],
                                      precomputed=_refresh_lift(agent, batch))
            evals.append(res)
            err = state_estimation_error(agent, batch, x_true)
            gnorm = res.grad.norm if res.grad is not None else 0.0
            metrics.append(tau, s, i, res.loss, l1, res.l2, h_gap, err, gnorm)
            if s == 0:
                report.gates[i].initial_loss = res.loss
        for i, agent in enumerate(agents):
            if not g_active[i]:
                continue
            if evals[i].loss <= config.eps2:
                g_active[i] = False
                if report.gates[i].steps_taken == 0:
                    report.gates[i].activated = False
                continue
            _theta_step(agent, evals[i].grad, config)
            report.gates[i].steps_taken += 1
        if not any(g_active):
            break

    _finalize_models(agents, config, report, tau)
    _record_round(agents, graph, batches, x_true, config, metrics, tau=tau,
                  s=config.inner_steps)
    report.h_gap_final = pairwise_h_gap(agents)
    last_rows = metrics.rows[-len(agents):]
    for agent, batch in zip(agents, batches):
        report.state_err_final.append(state_estimation_error(agent, batch, x_true))
        report.loss_final.append(last_rows[agent.agent_id][3])
    return report


def _finalize_models(agents, config, report, tau):
    """Save only models passing the observability check; keep the previous
    saved model otherwise and flag the failure."""
    for agent in agents:
        agent.model = _model_from_state(agent, tau)
        if config.variant == "ddkl-1":
            agent.model.M = agent.c @ agent.H
        obs = regression.check_observability(agent.model, config.svd_tol)
        report.observability_passed.append(obs.passed)
        if obs.passed or agent.saved_model is None:
            agent.saved_model = agent.model
        else:
            log.warning("agent %d tau %d: observability rank %d < %d; keeping "
                        "the previously saved model", agent.agent_id, tau,
                        obs.rank, obs.required)


# ----------------------------------------------------------------------
# full runs
# ----------------------------------------------------------------------
@dataclass
class RunResult:
    agents: list
    graph: object
    metrics: RunMetrics
    batch_reports: list
    stacked_c_rank: int
    n: int


def run_identification(trajectory, c_list, config, topology="ring", edges=None,
                       seed=0, beta=20, max_batches=None):
    """Run the full multi-agent identification on one trajectory."""
    n = trajectory.n
    c_arrays = [np.atleast_2d(np.asarray(c, dtype=float)) for c in c_list]
    for i, c in enumerate(c_arrays):
        if c.shape[1] != n:
            raise DimensionError(
                f"agent {i} observation matrix has {c.shape[1]} columns for an "
                f"{n}-state plant"
            )
    graph = build_graph(len(c_arrays), edges=edges,
                        topology=None if edges else topology)
    stacked_rank = linalg.rank(np.vstack(c_arrays), config.svd_tol)
    if stacked_rank < n:
        log.warning("stacked observation matrix has column rank %d < %d; "
                    "consensus estimates cannot pin down the full state",
                    stacked_rank, n)
    agents = init_agents(c_arrays, config, seed=seed)

    states, inputs_padded = trajectory.paired_stream()
    per_agent_batches = []
    for agent in agents:
        ys = states @ agent.c.T
        per_agent_batches.append(partition(
            ys, inputs_padded, beta, agent_id=agent.agent_id,
            lift_dim=config.lift_dim, input_dim=trajectory.m,
            enforce=config.beta_enforce,
        ))
    n_batches = len(per_agent_batches[0])
    if max_batches is not None:
        n_batches = min(n_batches, max_batches)

    metrics = RunMetrics()
    reports = []
    for tau in range(n_batches):
        batches = [per_agent[tau] for per_agent in per_agent_batches]
        k0 = batches[0].index.k_start
        x_true = states[k0:k0 + beta + 1].T
        if tau == 0:
            reports.append(setup_first_batch(agents, graph, batches, x_true,
                                             config, metrics))
        else:
            reports.append(run_batch(agents, graph, batches, x_true, config,
                                     metrics))
    return RunResult(agents=agents, graph=graph, metrics=metrics,
                     batch_reports=reports, stacked_c_rank=stacked_rank, n=n)


# ----------------------------------------------------------------------
# descent diagnostics
# ----------------------------------------------------------------------
@dataclass
class DescentReport:
    non_increasing: bool
    first_violation: int
    max_increase: float
    stable_step: float = float("nan")
    grad_decay_exponent: float = float("nan")


def frozen_descent_trace(net, terms, alpha, steps):
    """Constant-GD trace on a frozen inner loss (K, H, snapshots fixed).

    Restores the net parameters afterwards; returns (losses, grad_norms)
    with the loss evaluated before each step plus once at the end.
    """
    theta0 = net.theta
    losses = []
    gnorms = []
    try:
        for _ in range(steps):
            res = evaluate_inner_loss(net, terms, want_grad=True)
            losses.append(res.loss)
            gnorms.append(res.grad.norm)
            sgd_step(net, res.grad, alpha)
        losses.append(evaluate_inner_loss(net, terms, want_grad=False).loss)
    finally:
        net.set_theta(theta0)
    return np.asarray(losses), np.asarray(gnorms)


def descent_check(losses, grad_norms=None, rel_tol=1e-12):
    """Report whether a loss trace is non-increasing (to relative slack).

    When gradient norms are given, also fits the decay exponent of the
    min-so-far squared gradient norm against the iteration count.
    """
    losses = np.asarray(losses, dtype=float)
    diffs = losses[1:] - losses[:-1]
    slack = rel_tol * np.maximum(1.0, np.abs(losses[:-1]))
    bad = np.flatnonzero(diffs > slack)
    report = DescentReport(
        non_increasing=bad.size == 0,
        first_violation=int(bad[0]) if bad.size else -1,
        max_increase=float(diffs.max()) if diffs.size else 0.0,
    )
    if grad_norms is not None and len(grad_norms) >= 4:
        mins = np.minimum.accumulate(np.asarray(grad_norms) ** 2)
        s_idx = np.arange(1, len(mins) + 1)
        keep = mins > 0
        if keep.sum() >= 4:
            slope, _ = np.polyfit(np.log(s_idx[keep]), np.log(mins[keep]), 1)
            report.grad_decay_exponent = float(slope)
    return report


def find_stable_step(trace_fn, alpha_lo=1e-6, alpha_hi=1.0, bisections=20):
    """Bisect the largest constant step with a non-increasing trace.

    ``trace_fn(alpha)`` returns a loss trace. The bracket is expanded
    first so the property holds at the low end and fails at the high end.
    """
    def stable(alpha):
        return descent_check(trace_fn(alpha)).non_increasing

    for _ in range(40):
        if stable(alpha_lo):
            break
        alpha_lo *= 0.25
    else:
        return float("nan")
    for _ in range(40):
        if not stable(alpha_hi):
            break
        alpha_hi *= 4.0
    else:
        return float("inf")
    for _ in range(bisections):
        mid = np.sqrt(alpha_lo * alpha_hi)
        if stable(mid):
            alpha_lo = mid
        else:
            alpha_hi = mid
    return float(alpha_lo)
