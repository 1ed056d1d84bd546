"""Scikit-learn style front end for the distributed identification pipeline.

``DistributedDeepKoopman`` is a regressor-shaped estimator: ``fit`` takes
a state trajectory (plus inputs) and runs the multi-agent identification;
``predict`` produces one-step state predictions through a chosen agent's
learned model. Hyperparameters follow the sklearn convention, so
``get_params``/``set_params``/``clone`` work as usual.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .engine import EngineConfig, run_identification
from .errors import DimensionError
from .systems import Trajectory


def _validate_states_inputs(X, U):
    X = check_array(X, dtype=float, ensure_2d=True)
    if U is None:
        U = np.zeros((X.shape[0] - 1, 0))
    else:
        U = check_array(U, dtype=float, ensure_2d=True, ensure_min_features=0)
    if U.shape[0] not in (X.shape[0] - 1, X.shape[0]):
        raise DimensionError(
            f"inputs must have one row per applied step: got {U.shape[0]} rows "
            f"for {X.shape[0]} states"
        )
    # allow equal-length streams by dropping the trailing (unused) input
    if U.shape[0] == X.shape[0]:
        U = U[:-1]
    return X, U


class DistributedDeepKoopman(BaseEstimator):
    """Cooperative lifted-linear-model identification from partial views.

    Parameters
    ----------
    c_matrices : list of array-like, optional
        Per-agent observation matrices (n_i, n). ``None`` runs a single
        agent observing the full state (the centralized special case).
    topology : str
        ``"ring"`` or ``"complete"``; ignored when ``edges`` is given.
    edges : list of (int, int), optional
        Explicit directed communication edges.
    lift_dim : int
        Dimension r of the lifted space.
    hidden_layers : tuple of int
        Widths of the ReLU hidden layers of every agent's lifting net.
    beta : int
        Batch size (samples per identification window).
    max_batches : int, optional
        Cap on the number of batches consumed from the trajectory.
    variant : str
        ``"ddkl"`` (decoder consensus) or ``"ddkl-1"`` (state consensus).
    optimizer : str
        ``"adam"`` or ``"constant"`` (constant-step gradient descent).
    inner_steps : int
        Cap on inner iterations (consensus rounds / gradient steps) per batch.
    random_state : int
        Seed for the net initializations.

    Attributes
    ----------
    agents_ : list
        Final per-agent states (nets, models, decoders).
    models_ : list
        Per-agent saved models (observability-checked).
    metrics_ : RunMetrics
        Per-(batch, iteration, agent) diagnostic rows.
    batch_reports_ : list
        Per-batch consensus/gate reports.
    h_gap_ : float
        Final pairwise decoder disagreement.
    """

    def __init__(self, c_matrices=None, topology="ring", edges=None, lift_dim=8,
                 hidden_layers=(64, 48, 32), beta=20, max_batches=None,
                 variant="ddkl", optimizer="adam", learning_rate=1e-3,
                 weight_decay=1e-4, step_size=0.05, inner_steps=60,
                 eps1=1e-9, eps2=1e-6, eps3=1e-9, w=0.5, w_bar=0.5,
                 weights_in_inner_loss=False, degree_normalized_consensus=True,
                 consensus_tail=True, exchange_mode="per_round", random_state=0):
        self.c_matrices = c_matrices
        self.topology = topology
        self.edges = edges
        self.lift_dim = lift_dim
        self.hidden_layers = hidden_layers
        self.beta = beta
        self.max_batches = max_batches
        self.variant = variant
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.step_size = step_size
        self.inner_steps = inner_steps
        self.eps1 = eps1
        self.eps2 = eps2
        self.eps3 = eps3
        self.w = w
        self.w_bar = w_bar
        self.weights_in_inner_loss = weights_in_inner_loss
        self.degree_normalized_consensus = degree_normalized_consensus
        self.consensus_tail = consensus_tail
        self.exchange_mode = exchange_mode
        self.random_state = random_state

    def _engine_config(self):
        return EngineConfig(
            lift_dim=self.lift_dim,
            hidden_layers=tuple(self.hidden_layers),
            w=self.w, w_bar=self.w_bar,
            eps1=self.eps1, eps2=self.eps2, eps3=self.eps3,
            inner_steps=self.inner_steps,
            step_size=self.step_size,
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            variant=self.variant,
            weights_in_inner_loss=self.weights_in_inner_loss,
            degree_normalized_consensus=self.degree_normalized_consensus,
            consensus_tail=self.consensus_tail,
            exchange_mode=self.exchange_mode,
        )

    def fit(self, X, U=None):
        """Identify the shared lifted model from one trajectory.

        Parameters
        ----------
        X : array-like (T+1, n)
            State samples.
        U : array-like (T, m), optional
            Applied inputs; omit for an autonomous system.

        Returns
        -------
        self
        """
        X, U = _validate_states_inputs(X, U)
        trajectory = Trajectory(states=X, inputs=U, provenance="fit")
        if self.c_matrices is None:
            c_list = [np.eye(X.shape[1])]
        else:
            c_list = [np.atleast_2d(np.asarray(c, dtype=float))
                      for c in self.c_matrices]
        result = run_identification(
            trajectory, c_list, self._engine_config(),
            topology=self.topology, edges=self.edges,
            seed=self.random_state, beta=self.beta,
            max_batches=self.max_batches,
        )
        self.n_features_in_ = X.shape[1]
        self.n_inputs_in_ = U.shape[1]
        self.agents_ = result.agents
        self.graph_ = result.graph
        self.models_ = [agent.saved_model for agent in result.agents]
        self.metrics_ = result.metrics
        self.batch_reports_ = result.batch_reports
        self.stacked_c_rank_ = result.stacked_c_rank
        self.h_gap_ = result.batch_reports[-1].h_gap_final
        return self

    def lift(self, X, agent=0):
        """Lifted coordinates of the given states through one agent's net."""
        check_is_fitted(self, "agents_")
        X = check_array(X, dtype=float)
        ag = self.agents_[agent]
        ys = X @ ag.c.T
        return ag.net.batch_forward(ys.T).T

    def predict(self, X, U=None, agent=0):
        """One-step state predictions ``x(k) -> xhat(k+1)`` via one agent.

        The agent observes ``y = C_i x``, lifts it, advances the lifted
        state with (A, B) and decodes with its decoder.
        """
        check_is_fitted(self, "agents_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(
                f"expected {self.n_features_in_} state features, got {X.shape[1]}"
            )
        if U is None:
            U = np.zeros((X.shape[0], self.n_inputs_in_))
        else:
            U = check_array(U, dtype=float, ensure_min_features=0)
        if U.shape != (X.shape[0], self.n_inputs_in_):
            raise DimensionError(
                f"inputs must have shape {(X.shape[0], self.n_inputs_in_)}, "
                f"got {U.shape}"
            )
        ag = self.agents_[agent]
        model = ag.model
        lifted = ag.net.batch_forward((X @ ag.c.T).T)
        advanced = model.A @ lifted + model.B @ U.T
        return (ag.H @ advanced).T

    def score(self, X, U=None, agent=0):
        """Negative mean squared one-step prediction error."""
        X = check_array(X, dtype=float)
        pred = self.predict(X[:-1], None if U is None else U, agent=agent)
        return -float(np.mean((pred - X[1:]) ** 2))
