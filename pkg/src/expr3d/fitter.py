"""Box-constrained expression fitting by damped Gauss-Newton.

Given observed 2D landmarks p, fixed identity coefficients alpha and a fixed
projection, solve

    minimize   || p - proj(alpha, eta) ||_2
    subject to |eta_j| <= box_factor * expr_stddev_j

starting from eta = 0.  Each iteration solves the damped normal equations
(J'J + damping I) d = J'r, projects the trial point back onto the box, and
halves the step while the objective would increase.  The identity stays
fixed: only the expression coefficients move.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, SolverError, ValidationError
from .model import MorphableModel, landmark_shape
from .projection import EPS_DEPTH, GeometryError, _jacobian_from_parts, _projected_basis

log = logging.getLogger(__name__)

MAX_HALVINGS = 20


@dataclass(frozen=True)
class FitterConfig:
    max_iters: int = 50
    step_tol: float = 1e-10      # on the squared norm of the accepted step
    residual_tol: float = 1e-12  # on the relative objective decrease
    damping: float = 1e-6
    box_factor: float = 3.0


@dataclass(frozen=True)
class FitResult:
    eta: np.ndarray
    objective: float             # final residual norm in pixels
    iterations: int
    converged: bool
    active_constraints: frozenset[int]
    trace: tuple[float, ...] | None = None


@dataclass
class BatchItemError:
    index: int
    kind: str
    message: str


@dataclass
class BatchFitResult:
    results: list                # FitResult or None per item, input order
    errors: list[BatchItemError] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)


def residual_norm(model: MorphableModel, pi: np.ndarray, alpha, eta, landmarks: np.ndarray) -> float:
    """l2 norm of the stacked 2L-vector of landmark reprojection residuals."""
    landmarks = _check_landmarks(model, landmarks)
    h = _homogeneous(model, pi, alpha, eta)
    return float(np.linalg.norm(landmarks.ravel() - _divide(h).ravel()))


def _check_landmarks(model: MorphableModel, landmarks) -> np.ndarray:
    landmarks = np.asarray(landmarks, dtype=float)
    if landmarks.shape != (model.n_landmarks, 2):
        raise ContractError(f"landmarks must be ({model.n_landmarks}, 2), got {landmarks.shape}")
    if not np.all(np.isfinite(landmarks)):
        raise ValidationError("landmarks contain non-finite values")
    return landmarks


def _homogeneous(model, pi, alpha, eta) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (3, 4):
        raise ContractError(f"projection matrix must be 3x4, got {pi.shape}")
    pts = landmark_shape(model, alpha, eta)
    h = pts @ pi[:, :3].T + pi[:, 3]
    bad = np.flatnonzero(h[:, 2] <= EPS_DEPTH)
    if bad.size:
        i = int(bad[0])
        raise GeometryError(f"landmark {i} has non-positive projective depth {h[i, 2]:.3g}", point_index=i)
    return h


def _divide(h: np.ndarray) -> np.ndarray:
    return h[:, :2] / h[:, 2:3]


def fit_expression(model: MorphableModel, alpha, pi: np.ndarray, landmarks: np.ndarray,
                   config: FitterConfig = FitterConfig(), keep_trace: bool = False) -> FitResult:
    """Fit expression coefficients to observed landmarks.

    The result always satisfies the box exactly, the objective never increases
    across accepted iterations, and termination checks step_tol, then
    residual_tol, then max_iters.
    """
    landmarks = _check_landmarks(model, landmarks)
    if 2 * model.n_landmarks < model.expr_dim:
        raise ContractError(
            f"{model.n_landmarks} landmarks give {2 * model.n_landmarks} residuals "
            f"for {model.expr_dim} unknowns; underdetermined")
    alpha = np.asarray(alpha, dtype=float).ravel()
    bound = config.box_factor * model.expr_stddev
    target = landmarks.ravel()

    eta = np.zeros(model.expr_dim)
    h = _homogeneous(model, pi, alpha, eta)  # validates positive depth at eta=0
    obj = float(np.linalg.norm(target - _divide(h).ravel()))
    proj_basis = _projected_basis(model, pi)
    trace = [obj] if keep_trace else None

    converged = False
    iterations = 0
    for iterations in range(1, config.max_iters + 1):
        jac = _jacobian_from_parts(h, proj_basis)
        r = target - _divide(h).ravel()
        lhs = jac.T @ jac + config.damping * np.eye(model.expr_dim)
        try:
            delta = np.linalg.solve(lhs, jac.T @ r)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"normal equations singular at iteration {iterations}: {exc}") from exc

        accepted = False
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = np.clip(eta + scale * delta, -bound, bound)
            h_cand = _homogeneous(model, pi, alpha, cand)
            obj_cand = float(np.linalg.norm(target - _divide(h_cand).ravel()))
            if obj_cand <= obj:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            log.debug("fit stalled at iteration %d: no decreasing step after %d halvings",
                      iterations, MAX_HALVINGS)
            break

        step = cand - eta
        prev_obj = obj
        eta, h, obj = cand, h_cand, obj_cand
        if trace is not None:
            trace.append(obj)
        if float(step @ step) <= config.step_tol:
            converged = True
            break
        if prev_obj <= 0.0 or (prev_obj - obj) / prev_obj <= config.residual_tol:
            converged = True
            break

    active = frozenset(int(j) for j in np.flatnonzero(np.abs(eta) == bound))
    return FitResult(eta=eta, objective=obj, iterations=iterations, converged=converged,
                     active_constraints=active, trace=tuple(trace) if trace is not None else None)


def batch_fit(model: MorphableModel, items, config: FitterConfig = FitterConfig(),
              threads: int = 1) -> BatchFitResult:
    """Fit a batch of (alpha, pi, landmarks) items.

    Results preserve input order and are identical to sequential single calls;
    per-item failures are collected rather than aborting the batch.
    """
    items = list(items)

    def run(idx_item):
        idx, (alpha, pi, landmarks) = idx_item
        start = time.perf_counter()
        try:
            res = fit_expression(model, alpha, pi, landmarks, config)
            err = None
        except Exception as exc:  # noqa: BLE001 - reported per item
            res = None
            err = BatchItemError(index=idx, kind=type(exc).__name__, message=str(exc))
        return res, err, time.perf_counter() - start

    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            triples = list(pool.map(run, enumerate(items)))
    else:
        triples = [run(pair) for pair in enumerate(items)]

    out = BatchFitResult(results=[t[0] for t in triples])
    out.errors = [t[1] for t in triples if t[1] is not None]
    out.seconds = [t[2] for t in triples]
    return out
