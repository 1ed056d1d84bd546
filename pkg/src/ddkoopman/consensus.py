"""Distributed projection-consensus solver for partitioned linear equations.

Each agent i owns a block row ``E_i Z = b_i`` of a stacked system and
iterates

    Z_i(s+1) = Z_i(s) + (1/d_i) (I - P_i) sum_{j in N_i} (Z_j(s) - Z_i(s))

with ``P_i`` the orthogonal projector onto the row space of ``E_i``. The
(I - P_i) factor keeps every iterate inside the agent's own affine
solution set, so ``E_i Z_i(s) = b_i`` holds at every round; on consistent
systems with strongly connected graphs the iterates contract geometrically
to a common solution. Unknowns may be matrix valued (columns evolve
independently under the same update).
"""

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import DimensionError, InvalidInputError

#: multiplier of (number of agents) * (unknown entry count) giving the
#: default round budget. The contraction rate is problem dependent; this
#: budget reaches machine-level consensus on desk-scale problems.
ROUNDS_PER_UNKNOWN = 10


@dataclass
class ConsensusProblem:
    """Per-agent partitions of a stacked linear system ``E Z = B``."""

    partitions: list        # E_i, each (q_i, n)
    rhs: list               # b_i, each (q_i, cols)
    graph: "GraphTopology"

    def __post_init__(self):
        if len(self.partitions) != len(self.rhs):
            raise DimensionError("need one right-hand block per partition")
        if len(self.partitions) != self.graph.n_agents:
            raise DimensionError(
                f"{len(self.partitions)} partitions for {self.graph.n_agents} agents"
            )
        self.partitions = [np.atleast_2d(np.asarray(e, dtype=float)) for e in self.partitions]
        self.rhs = [np.atleast_2d(np.asarray(b, dtype=float)) for b in self.rhs]
        n = self.partitions[0].shape[1]
        cols = self.rhs[0].shape[1]
        for i, (e, b) in enumerate(zip(self.partitions, self.rhs)):
            if e.shape[1] != n:
                raise DimensionError(f"partition {i} has {e.shape[1]} columns, expected {n}")
            if b.shape != (e.shape[0], cols):
                raise DimensionError(
                    f"rhs block {i} has shape {b.shape}, expected {(e.shape[0], cols)}"
                )
        self.projections = [linalg.orth_projection(e, label=f"agent {i} partition")
                            for i, e in enumerate(self.partitions)]
        self.pinvs = [linalg.pinv(e) for e in self.partitions]

    @property
    def n_unknown_rows(self):
        return self.partitions[0].shape[1]

    @property
    def n_cols(self):
        return self.rhs[0].shape[1]

    def stacked(self):
        return np.vstack(self.partitions), np.vstack(self.rhs)

    def stacked_column_rank(self, tol=linalg.DEFAULT_TOL):
        return linalg.rank(np.vstack(self.partitions), tol)


@dataclass
class ConsensusIterate:
    problem: ConsensusProblem
    blocks: list            # Z_i, each (n, cols)
    s: int = 0

    def constraint_residual(self):
        """max_i ||E_i Z_i - b_i||_F; zero is preserved by the update."""
        return max(
            float(np.linalg.norm(e @ z - b))
            for e, z, b in zip(self.problem.partitions, self.blocks, self.problem.rhs)
        )

    def pairwise_gap(self):
        blocks = self.blocks
        gap = 0.0
        for i in range(len(blocks)):
            for j in range(i + 1, len(blocks)):
                gap = max(gap, float(np.linalg.norm(blocks[i] - blocks[j])))
        return gap


def init_iterate(problem):
    """Start every agent at the minimum-norm preimage ``Z_i(0) = pinv(E_i) b_i``."""
    blocks = [p @ b for p, b in zip(problem.pinvs, problem.rhs)]
    return ConsensusIterate(problem=problem, blocks=blocks, s=0)


def consensus_round(iterate):
    """One synchronous round; every agent reads only previous-round blocks."""
    problem = iterate.problem
    graph = problem.graph
    old = iterate.blocks
    new = []
    for i in range(graph.n_agents):
        neigh = graph.in_neighbors[i]
        acc = np.zeros_like(old[i])
        for j in neigh:
            acc += old[j] - old[i]
        q = np.eye(problem.n_unknown_rows) - problem.projections[i]
        new.append(old[i] + (q @ acc) / len(neigh))
    return ConsensusIterate(problem=problem, blocks=new, s=iterate.s + 1)


@dataclass
class ConsensusResult:
    solutions: list
    rounds: int
    gamma: float            # fitted geometric rate, NaN when too few rounds
    r_squared: float
    converged: bool         # every agent's per-round change fell below eps1
    consistent: bool        # converged and agents agree pairwise
    pairwise_gap: float
    change_history: np.ndarray
    error_history: np.ndarray


def fit_geometric_rate(errors):
    """Least-squares geometric fit of an error sequence; never asserted."""
    e = np.asarray(errors, dtype=float)
    keep = e > 1e-14
    if keep.sum() < 3:
        return float("nan"), float("nan")
    idx = np.flatnonzero(keep)
    logs = np.log(e[idx])
    slope, intercept = np.polyfit(idx, logs, 1)
    pred = slope * idx + intercept
    ss_res = float(np.sum((logs - pred) ** 2))
    ss_tot = float(np.sum((logs - logs.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(np.exp(slope)), r2


def run_to_tolerance(problem, eps1=1e-9, max_rounds=None):
    """Iterate until every agent's per-round change is at most ``eps1``.

    Returns the per-agent solutions, the rounds used and the empirically
    fitted contraction rate. Inconsistent systems surface through the
    ``converged``/``consistent`` flags rather than an exception.
    """
    if eps1 < 0:
        raise InvalidInputError("eps1 must be nonnegative")
    if max_rounds is None:
        max_rounds = ROUNDS_PER_UNKNOWN * problem.graph.n_agents * \
            problem.n_unknown_rows * problem.n_cols
    it = init_iterate(problem)
    history = [[b.copy() for b in it.blocks]]
    changes = []
    converged = False
    rounds = 0
    while rounds < max_rounds:
        nxt = consensus_round(it)
        change = max(float(np.linalg.norm(a - b))
                     for a, b in zip(nxt.blocks, it.blocks))
        changes.append(change)
        it = nxt
        rounds += 1
        if len(history) < 2048:
            history.append([b.copy() for b in it.blocks])
        if change <= eps1:
            converged = True
            break
    # error history relative to the final mean block
    ref = sum(it.blocks) / len(it.blocks)
    errors = np.array([
        max(float(np.linalg.norm(b - ref)) for b in blocks) for blocks in history
    ])
    gamma, r2 = fit_geometric_rate(errors[: min(len(errors), 200)])
    gap = it.pairwise_gap()
    scale = max(1.0, max(float(np.linalg.norm(b)) for b in it.blocks))
    consistent = converged and gap <= 10.0 * max(eps1, 1e-15) * scale
    return ConsensusResult(
        solutions=it.blocks,
        rounds=rounds,
        gamma=gamma,
        r_squared=r2,
        converged=converged,
        consistent=consistent,
        pairwise_gap=gap,
        change_history=np.asarray(changes),
        error_history=errors,
    )
