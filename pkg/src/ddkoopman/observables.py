"""Per-agent neural observable functions.

A lifting net maps an agent's partial observation to the r-dimensional
space where the dynamics are approximately linear. Hidden layers are
ReLU; the output stage maps the final pre-activation z to
``tanh(z) / sqrt(r)`` elementwise, which guarantees ``||g(y)||_2 <= 1``
for every input algebraically (each component is bounded by
``1/sqrt(r)``). Gradients are exact backpropagation; no autodiff
framework is involved.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidInputError, NumericalFailureError

CHECKPOINT_FORMAT = "ddkoopman-observable-checkpoint"
CHECKPOINT_VERSION = 1


def _glorot(rng, fan_out, fan_in):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class ObservableNet:
    """Feedforward lifting net with a norm-bounding output stage.

    Parameters
    ----------
    input_dim : int
        Observation dimension of the owning agent.
    hidden : sequence of int
        Hidden-layer widths (ReLU activations).
    output_dim : int
        Lift dimension r.
    seed : int
        Seed for the (Glorot-uniform) weight initialization; biases start
        at zero, so parameters are nonzero but outputs start small.
    """

    def __init__(self, input_dim, hidden, output_dim, seed=0):
        widths = [int(input_dim), *[int(h) for h in hidden], int(output_dim)]
        if any(w < 1 for w in widths):
            raise InvalidInputError(f"layer widths must be >= 1, got {widths}")
        self.widths = widths
        self.activations = ["relu"] * (len(widths) - 2) + ["tanh_scaled"]
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self.weights.append(_glorot(rng, fan_out, fan_in))
            self.biases.append(np.zeros(fan_out))
        self.version = 0

    # ------------------------------------------------------------------
    # parameter vector view
    # ------------------------------------------------------------------
    @property
    def input_dim(self):
        return self.widths[0]

    @property
    def output_dim(self):
        return self.widths[-1]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def theta(self):
        """Flat copy of all parameters (weights then bias, per layer)."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DimensionError(
                f"parameter vector has length {theta.size}, expected {self.n_params}"
            )
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = theta[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = theta[pos:pos + b.size].copy()
            pos += b.size
        self.version += 1

    # ------------------------------------------------------------------
    # forward / backward
    # ------------------------------------------------------------------
    def batch_forward(self, Y, want_cache=False):
        """Lift a matrix of observations (one column per sample).

        Returns the (r, n_cols) lifted matrix, plus the backward cache
        when ``want_cache`` is set.
        """
        Y = np.asarray(Y, dtype=float)
        if Y.ndim != 2 or Y.shape[0] != self.input_dim:
            raise DimensionError(
                f"expected observations of shape ({self.input_dim}, n), got {Y.shape}"
            )
        if not np.all(np.isfinite(Y)):
            raise InvalidInputError("observations contain non-finite entries")
        acts = [Y]
        a = Y
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.maximum(w @ a + b[:, None], 0.0)
            acts.append(a)
        z = self.weights[-1] @ a + self.biases[-1][:, None]
        t = np.tanh(z)
        out = t / np.sqrt(self.output_dim)
        if want_cache:
            return out, (acts, t)
        return out

    def forward(self, y):
        """Lift a single observation vector; ``||result||_2 <= 1``."""
        y = np.asarray(y, dtype=float)
        if y.shape != (self.input_dim,):
            raise DimensionError(f"expected input of shape ({self.input_dim},), got {y.shape}")
        return self.batch_forward(y[:, None])[:, 0]

    def backward(self, cache, cotangent):
        """Accumulate d(loss)/d(theta) for a cotangent on the lifted output.

        ``cotangent`` has the same shape as the forward output; columns
        are summed, so it already encodes any per-sample weighting.
        """
        acts, t = cache
        grad_w = [None] * len(self.weights)
        grad_b = [None] * len(self.biases)
        dz = cotangent * (1.0 - t * t) / np.sqrt(self.output_dim)
        grad_w[-1] = dz @ acts[-1].T
        grad_b[-1] = dz.sum(axis=1)
        da = self.weights[-1].T @ dz
        for layer in range(len(self.weights) - 2, -1, -1):
            dz = da * (acts[layer + 1] > 0.0)
            grad_w[layer] = dz @ acts[layer].T
            grad_b[layer] = dz.sum(axis=1)
            if layer > 0:
                da = self.weights[layer].T @ dz
        parts = []
        for gw, gb in zip(grad_w, grad_b):
            parts.append(gw.ravel())
            parts.append(gb)
        return np.concatenate(parts)

    # ------------------------------------------------------------------
    # checkpointing
    # ------------------------------------------------------------------
    def checkpoint_header(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "widths": list(self.widths),
            "activations": list(self.activations),
            "count": int(self.n_params),
            "dtype": "<f8",
        }

    def save_checkpoint(self, path):
        """Write a deterministic binary checkpoint (JSON header + raw floats)."""
        header = json.dumps(self.checkpoint_header(), sort_keys=True).encode()
        values = np.ascontiguousarray(self.theta, dtype="<f8").tobytes()
        with open(path, "wb") as fh:
            fh.write(header + b"\n" + values)

    @classmethod
    def load_checkpoint(cls, path):
        with open(path, "rb") as fh:
            header_line = fh.readline()
            header = json.loads(header_line.decode())
            if header.get("format") != CHECKPOINT_FORMAT:
                raise InvalidInputError(f"{path} is not an observable checkpoint")
            values = np.frombuffer(fh.read(), dtype="<f8")
        widths = header["widths"]
        net = cls(widths[0], widths[1:-1], widths[-1], seed=0)
        if values.size != net.n_params:
            raise InvalidInputError(
                f"checkpoint holds {values.size} values, expected {net.n_params}"
            )
        net.set_theta(values)
        return net


@dataclass
class GradientBuffer:
    """Per-parameter gradient accumulator aligned with the net's theta."""

    values: np.ndarray
    batch_divisor: float = 1.0

    def zero(self):
        self.values[:] = 0.0

    @property
    def norm(self):
        return float(np.linalg.norm(self.values))


@dataclass
class InnerLossTerms:
    """Everything the per-batch inner loss needs besides the net.

    ``K`` and ``H`` are held constant during the gradient (they are
    recomputed outside it); ``neighbor_estimates`` are constant snapshots
    received from in-neighbors. ``bottom_targets`` is the partial
    observation stack in the standard variant, or the consensus-estimated
    state stack in the state-consensus variant.
    """

    observations: np.ndarray          # (n_i, beta+1), columns ordered by k
    inputs: np.ndarray                # (m, beta)
    K: np.ndarray                     # ((r+q), (r+m))
    bottom_targets: np.ndarray        # (q, beta)
    H: np.ndarray = None              # (n, r) decoder iterate, consensus variant
    neighbor_estimates: tuple = ()    # snapshots (n, beta), one per in-neighbor
    degree: int = 1
    degree_normalized: bool = True
    weighted: bool = False
    w: float = 0.5
    w_bar: float = 0.5


@dataclass
class InnerEval:
    """Result of one inner-loss evaluation."""

    loss: float
    l1: float
    l2: float
    grad: GradientBuffer = None
    own_estimates: np.ndarray = None  # H @ Gbar, when the consensus term is active
    lifted: np.ndarray = None         # (r, beta+1) lifted batch


def evaluate_inner_loss(net, terms, want_grad=True, precomputed=None):
    """Evaluate the per-batch inner loss and (optionally) its exact gradient.

    The loss is the least-squares block
    ``(1/beta) || [Gbar; T] - K [G; U] ||_F^2`` plus, when ``terms.H`` is
    given, the neighbor-disagreement term on the decoded state estimates.
    Gradients flow only through the lifted columns (K, H and the neighbor
    snapshots are constants).
    """
    beta = terms.inputs.shape[1] if terms.inputs.size else terms.bottom_targets.shape[1]
    r = net.output_dim
    if terms.observations.shape[1] != beta + 1:
        raise DimensionError(
            f"observation stack has {terms.observations.shape[1]} columns, expected {beta + 1}"
        )
    if precomputed is None:
        g_all, cache = net.batch_forward(terms.observations, want_cache=True)
    else:
        g_all, cache = precomputed
    G = g_all[:, :beta]
    Gbar = g_all[:, 1:]
    A = terms.K[:r, :r]
    B = terms.K[:r, r:]
    Mrows = terms.K[r:, :r]
    E = Gbar - A @ G - B @ terms.inputs
    F = terms.bottom_targets - Mrows @ G
    col_sq = np.einsum("ij,ij->j", E, E) + np.einsum("ij,ij->j", F, F)
    if not np.all(np.isfinite(col_sq)):
        bad = int(np.flatnonzero(~np.isfinite(col_sq))[0])
        raise NumericalFailureError(
            f"non-finite residual at batch column {bad}", term_index=bad
        )
    mean_e = float(np.sum(E * E)) / beta
    mean_f = float(np.sum(F * F)) / beta
    l2 = mean_e + mean_f

    own = None
    diff_sum = None
    sum_sq = 0.0
    if terms.H is not None and len(terms.neighbor_estimates) > 0:
        own = terms.H @ Gbar
        diff_sum = np.zeros_like(own)
        for est in terms.neighbor_estimates:
            d = own - est
            diff_sum += d
            sum_sq += float(np.sum(d * d))
        if not np.isfinite(sum_sq):
            raise NumericalFailureError("non-finite consensus term", term_index=-1)
    l1 = sum_sq / (beta * max(terms.degree, 1))

    if terms.weighted:
        c_e = (1.0 - terms.w) * terms.w_bar
        c_f = (1.0 - terms.w) * (1.0 - terms.w_bar)
        c_cons = terms.w / max(terms.degree, 1)
        loss = c_e * mean_e + c_f * mean_f + c_cons * sum_sq / beta
    else:
        c_e = c_f = 1.0
        c_cons = 1.0 / terms.degree if terms.degree_normalized else 1.0
        loss = l2 + c_cons * sum_sq / beta

    grad = None
    if want_grad:
        cot = np.zeros_like(g_all)
        cot[:, 1:] += (2.0 * c_e / beta) * E
        cot[:, :beta] -= (2.0 * c_e / beta) * (A.T @ E)
        cot[:, :beta] -= (2.0 * c_f / beta) * (Mrows.T @ F)
        if diff_sum is not None:
            cot[:, 1:] += (2.0 * c_cons / beta) * (terms.H.T @ diff_sum)
        grad = GradientBuffer(net.backward(cache, cot), batch_divisor=float(beta))
    return InnerEval(loss=float(loss), l1=l1, l2=l2, grad=grad,
                     own_estimates=own, lifted=g_all)


def loss_and_gradient(net, terms):
    """Inner loss value and its exact gradient w.r.t. the net parameters."""
    res = evaluate_inner_loss(net, terms, want_grad=True)
    return res.loss, res.grad


# ----------------------------------------------------------------------
# optimizers
# ----------------------------------------------------------------------
def sgd_step(net, grad, alpha):
    """Constant-step gradient descent: ``theta <- theta - alpha * grad``."""
    if alpha <= 0:
        raise InvalidInputError("step size must be positive")
    net.set_theta(net.theta - alpha * grad.values)
    return net


@dataclass
class AdamState:
    """Adam moments with decoupled weight decay."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)


def adam_step(net, grad, state):
    """One Adam update with bias correction and decoupled weight decay.

    With a zero gradient and fresh moments the parameters shrink exactly
    by the weight-decay factor ``1 - lr * weight_decay``.
    """
    theta = net.theta
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    state.t += 1
    g = grad.values
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    theta = theta - state.lr * state.weight_decay * theta
    theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    net.set_theta(theta)
    return net
