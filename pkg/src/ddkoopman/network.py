"""Graph topology, agent containers, and the synchronous exchange fabric.

Communication is simulated in process with explicit round barriers: an
exchange snapshots every agent's payload, then each agent reads only the
snapshots of its in-neighbors from the completed round. Runs are bitwise
reproducible because all state is seeded and updates happen in a fixed
agent order between barriers.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, GraphConnectivityError, InvalidInputError


@dataclass(frozen=True)
class GraphTopology:
    """Self-arced directed graph; edge (i, j) lets j receive from i."""

    n_agents: int
    edges: frozenset
    in_neighbors: tuple     # per agent, sorted tuple including itself
    degrees: tuple          # d_i = len(in_neighbors[i])


def _reachable(n, adj, start):
    seen = {start}
    stack = [start]
    while stack:
        node = stack.pop()
        for nxt in adj[node]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def build_graph(n_agents, edges=None, topology=None):
    """Validated topology from an edge list or a named shorthand.

    ``topology`` may be ``"complete"`` or ``"ring"`` (directed cycle);
    otherwise ``edges`` lists directed pairs (src, dst). Missing self-arcs
    are added with a warning; graphs that are not strongly connected are
    rejected with an unreachable pair named.
    """
    if n_agents < 1:
        raise InvalidInputError("need at least one agent")
    if topology == "complete":
        edges = [(i, j) for i in range(n_agents) for j in range(n_agents)]
    elif topology == "ring":
        edges = [(i, (i + 1) % n_agents) for i in range(n_agents)]
        edges += [(i, i) for i in range(n_agents)]
    elif topology is not None:
        raise InvalidInputError(f"unknown topology shorthand {topology!r}")
    if edges is None:
        raise InvalidInputError("need either edges or a topology shorthand")
    edge_set = set()
    for src, dst in edges:
        src, dst = int(src), int(dst)
        if not (0 <= src < n_agents and 0 <= dst < n_agents):
            raise InvalidInputError(f"edge ({src}, {dst}) references a missing agent")
        edge_set.add((src, dst))
    missing = [i for i in range(n_agents) if (i, i) not in edge_set]
    if missing:
        warnings.warn(f"adding missing self-arcs for agents {missing}")
        edge_set.update((i, i) for i in missing)

    fwd = {i: set() for i in range(n_agents)}
    rev = {i: set() for i in range(n_agents)}
    for src, dst in edge_set:
        fwd[src].add(dst)
        rev[dst].add(src)
    fwd_seen = _reachable(n_agents, fwd, 0)
    rev_seen = _reachable(n_agents, rev, 0)
    if len(fwd_seen) < n_agents or len(rev_seen) < n_agents:
        if len(fwd_seen) < n_agents:
            other = min(set(range(n_agents)) - fwd_seen)
            pair = (0, other)
        else:
            other = min(set(range(n_agents)) - rev_seen)
            pair = (other, 0)
        raise GraphConnectivityError(
            f"graph is not strongly connected: no directed path from "
            f"agent {pair[0]} to agent {pair[1]}"
        )
    in_neighbors = tuple(tuple(sorted(rev[i])) for i in range(n_agents))
    degrees = tuple(len(nb) for nb in in_neighbors)
    return GraphTopology(n_agents=n_agents, edges=frozenset(edge_set),
                         in_neighbors=in_neighbors, degrees=degrees)


@dataclass
class AgentState:
    """Everything one agent owns during a run."""

    agent_id: int
    c: np.ndarray                 # (n_i, n) observation matrix
    net: object                   # ObservableNet
    c_pinv: np.ndarray = None
    projection: np.ndarray = None
    model: object = None          # KoopmanModel (working model)
    saved_model: object = None    # last model passing the observability check
    rls: object = None            # RecursiveState
    H: np.ndarray = None          # current decoder iterate
    adam: object = None
    stack_cache: object = None
    inbox: dict = field(default_factory=dict)   # round-tagged snapshots
    inbox_round: int = -1

    @property
    def n_obs(self):
        return self.c.shape[0]


def exchange(agents, graph, selector, round_tag):
    """Synchronous snapshot exchange.

    ``selector(agent)`` builds the payload each agent publishes; after the
    barrier every agent's inbox holds exactly its in-neighbors' payloads
    from this round. Payload arrays are copied, so later mutation of an
    agent's state can never leak into a neighbor's snapshot.
    """
    if len(agents) != graph.n_agents:
        raise DimensionError(f"{len(agents)} agents on a {graph.n_agents}-node graph")
    published = []
    for agent in agents:
        payload = selector(agent)
        published.append(_snapshot(payload))
    for i, agent in enumerate(agents):
        agent.inbox = {j: published[j] for j in graph.in_neighbors[i]}
        agent.inbox_round = round_tag


def _snapshot(payload):
    if isinstance(payload, np.ndarray):
        return payload.copy()
    if isinstance(payload, dict):
        return {k: _snapshot(v) for k, v in payload.items()}
    if isinstance(payload, (list, tuple)):
        return type(payload)(_snapshot(v) for v in payload)
    return payload


def read_inbox(agent, expected_round):
    """Inbox access with a round-skew guard (internal bug trap)."""
    if agent.inbox_round != expected_round:
        raise AssertionError(
            f"agent {agent.agent_id} reading round {expected_round} "
            f"but inbox holds round {agent.inbox_round}"
        )
    return agent.inbox
