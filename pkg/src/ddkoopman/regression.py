"""Closed-form identification of the lifted model and its cross-batch
recursive update.

``fit_AB`` and ``fit_M`` solve the per-batch least-squares problems
``Gbar ~ [A, B] [G; U]`` and ``Y ~ M G``. ``recursive_update`` folds a new
batch into an existing fit without re-touching old data; iterating it
reproduces the one-shot fit on the column-concatenation of all stacks
(the inverse Gram matrices it caches are those of the accumulated data).
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from . import linalg
from .errors import (AssumptionViolationError, ConditioningError,
                     InvalidInputError)

MODEL_BUNDLE_FORMAT = "ddkoopman-model-bundle"
MODEL_BUNDLE_VERSION = 1


@dataclass
class KoopmanModel:
    """Per-agent lifted model (A, B, M, H) at a given batch and theta."""

    A: np.ndarray            # (r, r)
    B: np.ndarray            # (r, m)
    M: np.ndarray            # (q, r), q = agent observation dim
    H: np.ndarray            # (n, r) decoder, None until consensus ran
    lift_dim: int
    theta_version: int = 0
    tau: int = 0


@dataclass
class RecursiveState:
    """Running LS fit plus inverse Gram caches of the accumulated stacks."""

    AB: np.ndarray           # (r, r+m)
    M: np.ndarray            # (q, r)
    P_chi: np.ndarray        # inverse of sum over batches of chi chi'
    P_g: np.ndarray          # inverse of sum over batches of G G'
    tau: int = 0


def _require_full_row_rank(mat, what, tol):
    if linalg.rank(mat, tol) < mat.shape[0]:
        raise AssumptionViolationError(
            f"{what} (shape {mat.shape}) must have full row rank {mat.shape[0]}; "
            f"numerical rank is {linalg.rank(mat, tol)}. "
            "Increase the batch size or the excitation of the data."
        )


def _gram_inverse(sym, what):
    """Invert a symmetric PD Gram via Cholesky, with one jitter retry."""
    sym = 0.5 * (sym + sym.T)
    try:
        chol = np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        jitter = 1e-12 * np.trace(sym) / sym.shape[0]
        try:
            chol = np.linalg.cholesky(sym + jitter * np.eye(sym.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise ConditioningError(
                f"{what} Gram matrix is not positive definite even after jitter"
            ) from exc
    inv_chol = np.linalg.inv(chol)
    return inv_chol.T @ inv_chol


def fit_AB(stacks, tol=linalg.DEFAULT_TOL):
    """Least-squares dynamics fit ``[A, B] = Gbar pinv([G; U])``."""
    chi = stacks.chi
    _require_full_row_rank(chi, "stacked regressors [G; U]", tol)
    ab = stacks.Gbar @ linalg.pinv(chi, tol)
    r = stacks.G.shape[0]
    return ab[:, :r], ab[:, r:]


def fit_M(stacks, targets=None, tol=linalg.DEFAULT_TOL):
    """Least-squares decoder-row fit ``M = Y pinv(G)``.

    ``targets`` overrides the regression targets (used when a consensus
    estimate of the full state stack replaces the partial observations).
    """
    _require_full_row_rank(stacks.G, "lifted stack G", tol)
    rhs = stacks.Y if targets is None else np.asarray(targets, dtype=float)
    return rhs @ linalg.pinv(stacks.G, tol)


def init_recursive(stacks, tol=linalg.DEFAULT_TOL):
    """Fit the first batch and cache its inverse Grams."""
    a, b = fit_AB(stacks, tol)
    m = fit_M(stacks, tol=tol)
    chi = stacks.chi
    return RecursiveState(
        AB=np.hstack([a, b]),
        M=m,
        P_chi=_gram_inverse(chi @ chi.T, "regressor"),
        P_g=_gram_inverse(stacks.G @ stacks.G.T, "lifted-stack"),
        tau=0,
    )


def _blend(coef, P, X, rhs, cond_limit):
    """One block-RLS update of ``coef`` fitting ``rhs ~ coef @ X``.

    Returns the updated coefficient and the downdated inverse Gram.
    """
    PX = P @ X                                   # (p, beta_new)
    lam_inv = np.eye(X.shape[1]) + X.T @ PX
    cond = np.linalg.cond(lam_inv)
    if cond > cond_limit:
        raise ConditioningError(
            f"recursive-update inner system has condition number {cond:.3e} "
            f"(limit {cond_limit:.1e}); merge the new batch into a larger one"
        )
    lam = np.linalg.inv(lam_inv)
    gain = PX @ lam                              # P X (I + X' P X)^{-1}
    coef_new = coef + (rhs - coef @ X) @ gain.T
    P_new = P - gain @ PX.T
    return coef_new, 0.5 * (P_new + P_new.T)


def recursive_update(state, stacks, cond_limit=1e12):
    """Fold a new batch into the running fit (returns a new state).

    Equivalent, in exact arithmetic, to refitting on the column
    concatenation of all batches seen so far, provided the stacks were
    built with the parameters in effect when each batch arrived.
    """
    chi = stacks.chi
    ab, p_chi = _blend(state.AB, state.P_chi, chi, stacks.Gbar, cond_limit)
    m, p_g = _blend(state.M, state.P_g, stacks.G, stacks.Y, cond_limit)
    return replace(state, AB=ab, M=m, P_chi=p_chi, P_g=p_g, tau=state.tau + 1)


@dataclass
class ObservabilityReport:
    rank: int
    required: int
    passed: bool
    singular_values: np.ndarray


def check_observability(model, tol=linalg.DEFAULT_TOL):
    """Numerical column rank of ``[H; HA; ...; HA^(r-1)]``.

    The report says whether the lifted model is observable (rank == r);
    the caller decides what to do with failures.
    """
    if model.H is None:
        raise InvalidInputError("model has no decoder H yet")
    r = model.lift_dim
    blocks = []
    block = np.asarray(model.H, dtype=float)
    for _ in range(r):
        blocks.append(block)
        block = block @ model.A
    obs = np.vstack(blocks)
    s = np.linalg.svd(obs, compute_uv=False)
    rk = int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0
    return ObservabilityReport(rank=rk, required=r, passed=rk == r,
                               singular_values=s)


# ----------------------------------------------------------------------
# model bundles
# ----------------------------------------------------------------------
def save_model_bundle(model, path, theta_checkpoint=None):
    """Write a model as a deterministic JSON bundle with a dimension header."""
    n = model.H.shape[0] if model.H is not None else None
    bundle = {
        "format": MODEL_BUNDLE_FORMAT,
        "version": MODEL_BUNDLE_VERSION,
        "lift_dim": int(model.lift_dim),
        "n": n,
        "n_obs": int(model.M.shape[0]),
        "m": int(model.B.shape[1]),
        "tau": int(model.tau),
        "theta_version": int(model.theta_version),
        "theta_checkpoint": theta_checkpoint,
        "A": model.A.tolist(),
        "B": model.B.tolist(),
        "M": model.M.tolist(),
        "H": model.H.tolist() if model.H is not None else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(bundle, fh, sort_keys=True)
        fh.write("\n")


def load_model_bundle(path):
    with open(path, encoding="utf-8") as fh:
        bundle = json.load(fh)
    if bundle.get("format") != MODEL_BUNDLE_FORMAT:
        raise InvalidInputError(f"{path} is not a model bundle")
    return KoopmanModel(
        A=np.asarray(bundle["A"], dtype=float),
        B=np.asarray(bundle["B"], dtype=float),
        M=np.asarray(bundle["M"], dtype=float),
        H=None if bundle["H"] is None else np.asarray(bundle["H"], dtype=float),
        lift_dim=bundle["lift_dim"],
        theta_version=bundle["theta_version"],
        tau=bundle["tau"],
    )
