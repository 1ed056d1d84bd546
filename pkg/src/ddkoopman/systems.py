"""Reproducible nonlinear time-varying plants and trajectory handling.

The default desk-scale plant is ``x(k+1) = A(k) x(k) + B u(k) + w(k)``
with ``A(k)`` a slowly rotating stable matrix, which gives identification
experiments a known ground truth. A Van-der-Pol plant with a drifting
stiffness parameter covers the genuinely nonlinear case; both are
deterministic given (spec, seed). Continuous dynamics are discretized by
RK4 before process noise is injected.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import (DimensionError, DivergenceError, InvalidInputError)

PLANT_KINDS = ("time-varying-linear", "van-der-pol-drift", "custom-csv")


@dataclass
class PlantSpec:
    """Configuration of a simulated plant.

    noise_std is the per-component standard deviation of the process
    noise added to the state update ("execution noise"); observations are
    noiseless by construction.
    """

    kind: str = "time-varying-linear"
    n: int = 6
    m: int = 2
    dt: float = 0.1
    spectral_radius: float = 0.97     # max block gain of A(k)
    rotation_rate: float = 0.02       # rad of extra block rotation per step
    input_gain: float = 0.3           # scale of the B matrix
    mu0: float = 1.0                  # van-der-pol stiffness at k=0
    drift_rate: float = 0.0           # stiffness drift per second
    noise_std: float = 0.0
    seed: int = 0
    csv_path: str = None              # source file for kind == custom-csv

    def __post_init__(self):
        if self.kind not in PLANT_KINDS:
            raise InvalidInputError(f"unknown plant kind {self.kind!r}")
        if self.n < 1 or self.m < 0:
            raise InvalidInputError("need n >= 1 and m >= 0")
        if self.dt <= 0:
            raise InvalidInputError("dt must be positive")
        if np.any(np.asarray(self.noise_std) < 0):
            raise InvalidInputError("noise std must be nonnegative")
        if self.kind == "van-der-pol-drift" and self.n != 2:
            raise InvalidInputError("van-der-pol-drift is a 2-state plant")


@dataclass
class Trajectory:
    """Ordered (x(k), u(k)) samples with states one longer than inputs."""

    states: np.ndarray     # (T+1, n)
    inputs: np.ndarray     # (T, m)
    provenance: str = ""

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.states.ndim != 2 or self.inputs.ndim != 2:
            raise DimensionError("states and inputs must be 2-D arrays")
        if self.inputs.shape[0] != self.states.shape[0] - 1:
            raise DimensionError(
                f"expected {self.states.shape[0] - 1} input rows, got {self.inputs.shape[0]}"
            )
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.inputs))):
            raise InvalidInputError("trajectory contains non-finite samples")

    def __len__(self):
        return self.states.shape[0]

    @property
    def n(self):
        return self.states.shape[1]

    @property
    def m(self):
        return self.inputs.shape[1]

    def paired_stream(self):
        """Equal-length (states, inputs) streams of (x(k), u(k)) pairs.

        The final input row is zero padding: the last state has no applied
        input, but downstream batch partitioning works on pairs.
        """
        padded = np.vstack([self.inputs, np.zeros((1, self.m))])
        return self.states.copy(), padded

    def to_csv(self, path):
        n, m = self.n, self.m
        header = ["k"] + [f"x{i+1}" for i in range(n)] + [f"u{j+1}" for j in range(m)]
        states, inputs = self.paired_stream()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k in range(len(self)):
                row = [k] + [repr(float(v)) for v in states[k]] + \
                      [repr(float(v)) for v in inputs[k]]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            n = sum(1 for h in header if h.startswith("x"))
            m = sum(1 for h in header if h.startswith("u"))
            ks, xs, us = [], [], []
            for row in reader:
                ks.append(int(row[0]))
                xs.append([float(v) for v in row[1:1 + n]])
                us.append([float(v) for v in row[1 + n:1 + n + m]])
        ks = np.asarray(ks)
        if ks.size == 0:
            raise InvalidInputError(f"{path} holds no samples")
        if not np.array_equal(ks, np.arange(ks.size)):
            raise InvalidInputError(f"{path}: sample indices must run 0,1,2,... without gaps")
        xs = np.asarray(xs, dtype=float)
        us = np.asarray(us, dtype=float)
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(us))):
            raise InvalidInputError(f"{path}: non-finite samples")
        # the final input row is padding (see to_csv)
        return cls(states=xs, inputs=us[:-1], provenance=str(path))


# ----------------------------------------------------------------------
# plant dynamics
# ----------------------------------------------------------------------
def _tvl_base(spec):
    """Seeded base quantities of the time-varying linear plant."""
    rng = np.random.default_rng((spec.seed, 0x5EED))
    q, _ = np.linalg.qr(rng.standard_normal((spec.n, spec.n)))
    n_blocks = spec.n // 2
    gains = rng.uniform(0.85, 1.0, size=n_blocks + 1) * spec.spectral_radius
    angles = rng.uniform(0.1, 0.6, size=n_blocks)
    b = rng.standard_normal((spec.n, spec.m)) * spec.input_gain if spec.m else \
        np.zeros((spec.n, 0))
    return q, gains, angles, b


def _tvl_matrix(spec, k):
    q, gains, angles, _ = _tvl_base(spec)
    n = spec.n
    d = np.zeros((n, n))
    for j in range(n // 2):
        ang = angles[j] + spec.rotation_rate * k
        c, s = np.cos(ang), np.sin(ang)
        d[2*j:2*j+2, 2*j:2*j+2] = gains[j] * np.array([[c, -s], [s, c]])
    if n % 2:
        d[n-1, n-1] = gains[-1]
    return q @ d @ q.T


def _vdp_rhs(spec, x, u, t):
    mu = spec.mu0 + spec.drift_rate * t
    drive = float(u[0]) if spec.m else 0.0
    return np.array([x[1], mu * (1.0 - x[0] ** 2) * x[1] - x[0] + drive])


def _rk4(rhs, x, u, t, dt):
    k1 = rhs(x, u, t)
    k2 = rhs(x + 0.5 * dt * k1, u, t + 0.5 * dt)
    k3 = rhs(x + 0.5 * dt * k2, u, t + 0.5 * dt)
    k4 = rhs(x + dt * k3, u, t + dt)
    return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _noise(spec, k):
    if np.all(np.asarray(spec.noise_std) == 0):
        return np.zeros(spec.n)
    rng = np.random.default_rng((spec.seed, 0xD1CE, k))
    return rng.standard_normal(spec.n) * np.asarray(spec.noise_std)


def step(spec, x, u, k):
    """Advance the plant one sample; deterministic given (spec.seed, k)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (spec.n,):
        raise DimensionError(f"state must have shape ({spec.n},), got {x.shape}")
    if u.shape != (spec.m,):
        raise DimensionError(f"input must have shape ({spec.m},), got {u.shape}")
    if spec.kind == "time-varying-linear":
        _, _, _, b = _tvl_base(spec)
        nxt = _tvl_matrix(spec, k) @ x + b @ u
    elif spec.kind == "van-der-pol-drift":
        nxt = _rk4(lambda xx, uu, tt: _vdp_rhs(spec, xx, uu, tt),
                   x, u, k * spec.dt, spec.dt)
    else:
        raise InvalidInputError("custom-csv plants replay a file; step() is undefined")
    nxt = nxt + _noise(spec, k)
    if not np.all(np.isfinite(nxt)):
        raise DivergenceError(f"state diverged at step k={k}", step=k)
    return nxt


def simulate(spec, x0=None, input_policy=None, horizon=100):
    """Roll the plant out for ``horizon`` steps.

    ``input_policy`` maps the step index k to u(k); defaults to the
    seeded box-uniform policy. For custom-csv plants the recorded file is
    replayed (truncated to the horizon) and both other arguments are
    ignored.
    """
    if horizon < 1:
        raise InvalidInputError("horizon must be >= 1")
    if spec.kind == "custom-csv":
        if not spec.csv_path:
            raise InvalidInputError("custom-csv plant needs csv_path")
        traj = Trajectory.from_csv(spec.csv_path)
        stop = min(horizon, len(traj) - 1)
        return Trajectory(states=traj.states[:stop + 1], inputs=traj.inputs[:stop],
                          provenance=traj.provenance)
    if input_policy is None:
        input_policy = uniform_input_policy(spec)
    x = np.zeros(spec.n) if x0 is None else np.asarray(x0, dtype=float)
    states = [x]
    inputs = []
    for k in range(horizon):
        u = np.asarray(input_policy(k), dtype=float)
        x = step(spec, x, u, k)
        states.append(x)
        inputs.append(u)
    return Trajectory(states=np.asarray(states), inputs=np.asarray(inputs),
                      provenance=f"{spec.kind}(seed={spec.seed})")


def uniform_input_policy(spec, box=1.0, seed=None):
    """Seeded inputs drawn uniformly from the box [-box, box]^m.

    Each index gets its own stream so the policy is a pure function of
    (seed, k), independent of evaluation order.
    """
    use_seed = spec.seed if seed is None else seed

    def policy(k):
        rng = np.random.default_rng((use_seed, 0x1A7, k))
        return rng.uniform(-box, box, size=spec.m)

    return policy


def observe(c, x):
    """Partial observation ``y = C x``."""
    c = np.asarray(c, dtype=float)
    x = np.asarray(x, dtype=float)
    if c.ndim != 2 or c.shape[1] != x.shape[-1]:
        raise DimensionError(
            f"observation matrix {c.shape} does not match state dim {x.shape[-1]}"
        )
    return c @ x if x.ndim == 1 else (c @ x.T).T
