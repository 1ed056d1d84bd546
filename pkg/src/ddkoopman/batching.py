"""Partitioning of per-agent observation streams into overlapping batches
and assembly of the lifted regression stacks.

Batch tau covers sample indices ``k_tau .. k_tau + beta_tau`` where
``k_tau`` is the running sum of earlier batch sizes, so the last sample
of one batch is the first sample of the next.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (AssumptionViolationError, DimensionError,
                     InsufficientDataError, InvalidInputError)


@dataclass(frozen=True)
class BatchIndex:
    tau: int
    k_start: int
    beta: int

    @property
    def k_stop(self):
        """Index of the shared boundary sample (first sample of batch tau+1)."""
        return self.k_start + self.beta


@dataclass
class DataBatch:
    """One agent's window of (observation, input) pairs for a batch."""

    agent_id: int
    index: BatchIndex
    observations: np.ndarray  # (n_i, beta+1), columns k_start .. k_start+beta
    inputs: np.ndarray        # (m, beta+1), same column indexing

    def __post_init__(self):
        beta = self.index.beta
        if self.observations.shape[1] != beta + 1:
            raise DimensionError(
                f"batch tau={self.index.tau} needs {beta + 1} observation columns, "
                f"got {self.observations.shape[1]}"
            )
        if self.inputs.shape[1] != beta + 1:
            raise DimensionError(
                f"batch tau={self.index.tau} needs {beta + 1} input columns, "
                f"got {self.inputs.shape[1]}"
            )
        if not (np.all(np.isfinite(self.observations)) and np.all(np.isfinite(self.inputs))):
            raise InvalidInputError(f"batch tau={self.index.tau} holds non-finite samples")

    @property
    def n_obs(self):
        return self.observations.shape[0]

    @property
    def n_inputs(self):
        return self.inputs.shape[0]


@dataclass
class LiftStacks:
    """Compact regression stacks built from one batch.

    Y/Ybar hold the raw observation columns at indices k and k+1; G/Gbar
    hold the lifted versions; U holds the applied inputs. All stacks have
    beta columns.
    """

    Y: np.ndarray
    Ybar: np.ndarray
    U: np.ndarray
    G: np.ndarray
    Gbar: np.ndarray

    @property
    def beta(self):
        return self.Y.shape[1]

    @property
    def chi(self):
        """Stacked regressors [G; U] of the dynamics fit."""
        return np.vstack([self.G, self.U])


def _resolve_schedule(beta_schedule, available_pairs):
    """Expand a beta schedule into concrete batch sizes covering the stream."""
    if np.isscalar(beta_schedule):
        betas = []
        k = 0
        while k + beta_schedule <= available_pairs - 1:
            betas.append(int(beta_schedule))
            k += int(beta_schedule)
        return betas
    betas = []
    k = 0
    for b in beta_schedule:
        if k + int(b) > available_pairs - 1:
            break
        betas.append(int(b))
        k += int(b)
    return betas


def partition(observations, inputs, beta_schedule, *, agent_id=0,
              lift_dim=None, input_dim=None, enforce="warn"):
    """Split equal-length (y, u) sample streams into overlapping batches.

    Parameters
    ----------
    observations, inputs : arrays, time-major (L, n_i) and (L, m)
        Paired samples; see ``Trajectory.paired_stream``.
    beta_schedule : int or sequence of int
        Constant batch size, or per-batch sizes.
    lift_dim, input_dim : int, optional
        When given, each batch size is checked against the identifiability
        requirement ``beta >= r + m``; ``enforce`` picks between ``"warn"``,
        ``"error"`` and ``"off"``.
    """
    ys = np.asarray(observations, dtype=float)
    us = np.asarray(inputs, dtype=float)
    if ys.ndim != 2 or us.ndim != 2:
        raise DimensionError("streams must be 2-D time-major arrays")
    if ys.shape[0] != us.shape[0]:
        raise DimensionError(
            f"streams disagree in length: {ys.shape[0]} observations vs {us.shape[0]} inputs"
        )
    betas = _resolve_schedule(beta_schedule, ys.shape[0])
    if not betas:
        raise InsufficientDataError(
            f"stream of {ys.shape[0]} samples is shorter than one batch"
        )
    if enforce != "off" and lift_dim is not None and input_dim is not None:
        floor = lift_dim + input_dim
        bad = [b for b in betas if b < floor]
        if bad:
            msg = (f"batch sizes {bad} are below the identifiability floor "
                   f"r + m = {floor}; the stacked regressors cannot have full row rank")
            if enforce == "error":
                raise AssumptionViolationError(msg)
            warnings.warn(msg)
    batches = []
    k = 0
    for tau, beta in enumerate(betas):
        sl = slice(k, k + beta + 1)
        batches.append(DataBatch(
            agent_id=agent_id,
            index=BatchIndex(tau=tau, k_start=k, beta=beta),
            observations=ys[sl].T.copy(),
            inputs=us[sl].T.copy(),
        ))
        k += beta
    return batches


def build_stacks(batch, net):
    """Lift a batch through the net and assemble the regression stacks."""
    if batch.n_obs != net.input_dim:
        raise DimensionError(
            f"net expects {net.input_dim}-dim observations, batch has {batch.n_obs}"
        )
    beta = batch.index.beta
    g_all = net.batch_forward(batch.observations)
    return LiftStacks(
        Y=batch.observations[:, :beta],
        Ybar=batch.observations[:, 1:],
        U=batch.inputs[:, :beta],
        G=g_all[:, :beta],
        Gbar=g_all[:, 1:],
    )


class StackCache:
    """Per-agent memo of lifted stacks keyed by (batch tau, net version).

    G depends on the net parameters, so stacks are rebuilt lazily whenever
    theta changes and reused inside LS solves at a fixed theta.
    """

    def __init__(self):
        self._store = {}

    def get(self, batch, net):
        key = (batch.index.tau, net.version)
        hit = self._store.get(key)
        if hit is None:
            hit = build_stacks(batch, net)
            # keep only the newest version per batch
            stale = [k for k in self._store if k[0] == batch.index.tau]
            for k in stale:
                del self._store[k]
            self._store[key] = hit
        return hit
