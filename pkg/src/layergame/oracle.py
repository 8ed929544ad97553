"""Brute-force verifiers used by the test suites.

These are correctness anchors: central finite differences, dense joint
solves of quadratic stage games, and a flattened QP for linear-quadratic
games.  They share no code with the backward recursions beyond numpy
linear algebra, run in float64, and are size-capped by construction
(total action dimension kept small by the callers).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NonFiniteStateError, SingularSystemError

DEFAULT_FD_STEP = 1e-5


@dataclass(frozen=True)
class FiniteDiffSpec:
    """Central-difference settings; 64-bit arithmetic is mandatory."""

    step: float = DEFAULT_FD_STEP

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("finite-difference step must be positive")


def fd_gradient(loss: Callable[[np.ndarray], float], point: np.ndarray,
                spec: FiniteDiffSpec = FiniteDiffSpec()) -> np.ndarray:
    """Central-difference gradient of a scalar functional."""
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    h = spec.step
    for i in range(point.size):
        e = np.zeros_like(point)
        e[i] = h
        hi, lo = loss(point + e), loss(point - e)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteStateError("loss non-finite inside the FD neighborhood")
        grad[i] = (hi - lo) / (2 * h)
    return grad


def fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], point: np.ndarray,
                spec: FiniteDiffSpec = FiniteDiffSpec()) -> np.ndarray:
    """Central-difference Jacobian of a vector map, shape (out, in)."""
    point = np.asarray(point, dtype=np.float64)
    h = spec.step
    cols = []
    for i in range(point.size):
        e = np.zeros_like(point)
        e[i] = h
        cols.append((fn(point + e) - fn(point - e)) / (2 * h))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# Dense joint stage solve
# ---------------------------------------------------------------------------

@dataclass
class JointSolution:
    gains: List[np.ndarray]            # open gains per player, M^+ p
    feedback: List[np.ndarray]         # feedback gains per player, M^+ P_theta_x
    value_delta: float                 # -1/2 p^T M^+ p


def dense_joint_solve(ptt: Sequence[Sequence[np.ndarray]],
                      p_vecs: Sequence[np.ndarray],
                      ptx: Optional[Sequence[np.ndarray]] = None) -> JointSolution:
    """Solve the full multi-player block system in one dense factorization.

    ptt[i][j] are the second-order blocks between players i and j, p_vecs
    the first-order blocks.  Returns the stacked solve split back per
    player; `value_delta` is the change of the stage objective at the
    joint minimizer, by substitution.
    """
    sizes = [p.size for p in p_vecs]
    n = len(sizes)
    big = np.block([[np.asarray(ptt[i][j], dtype=np.float64) for j in range(n)]
                    for i in range(n)])
    rhs = np.concatenate([np.asarray(p, dtype=np.float64) for p in p_vecs])
    try:
        sol = np.linalg.solve(big, rhs)
        fb = None
        if ptx is not None:
            fb = np.linalg.solve(big, np.vstack([np.asarray(m) for m in ptx]))
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    split = np.cumsum(sizes)[:-1]
    gains = np.split(sol, split)
    feedback = np.split(fb, split) if ptx is not None else [np.zeros((s, 0)) for s in sizes]
    return JointSolution(gains=gains, feedback=list(feedback),
                         value_delta=float(-0.5 * rhs @ sol))


def minimized_stage_quadratic(p_x: np.ndarray, p_xx: np.ndarray,
                              p_vecs: Sequence[np.ndarray],
                              ptt: Sequence[Sequence[np.ndarray]],
                              ptx: Sequence[np.ndarray],
                              p0: float = 0.0) -> Callable[[np.ndarray], float]:
    """Return m(dx): the stage quadratic minimized over all actions.

    m(dx) = p0 + p_x.dx + dx.P_xx.dx/2
            + min_dtheta [ p.dtheta + dtheta.Ptt.dtheta/2 + dtheta.Ptx.dx ]

    The inner minimization uses a least-squares solve, independent of the
    eigendecomposition policy in the recursions.
    """
    sizes = [p.size for p in p_vecs]
    n = len(sizes)
    big = np.block([[np.asarray(ptt[i][j], dtype=np.float64) for j in range(n)]
                    for i in range(n)])
    pcat = np.concatenate(p_vecs)
    pxcat = np.vstack(ptx)

    def m(dx: np.ndarray) -> float:
        rhs = pcat + pxcat @ dx
        dtheta = -np.linalg.lstsq(big, rhs, rcond=None)[0]
        quad = 0.5 * dtheta @ big @ dtheta
        return float(p0 + p_x @ dx + 0.5 * dx @ p_xx @ dx + rhs @ dtheta + quad)

    return m


# ---------------------------------------------------------------------------
# Flattened LQ game
# ---------------------------------------------------------------------------

@dataclass
class LQSolution:
    actions: Dict[Tuple[int, int], np.ndarray]
    value: float


def lq_game_value(a_mats: Sequence[np.ndarray],
                  b_mats: Sequence[Sequence[np.ndarray]],
                  c_vecs: Sequence[np.ndarray],
                  target: np.ndarray,
                  stage_coeffs: Dict[Tuple[int, int], float],
                  x0: np.ndarray) -> LQSolution:
    """Exact joint optimum of a linear-dynamics quadratic-cost game.

    Dynamics x_{t+1} = A_t x_t + sum_n B_{t,n} u_{t,n} + c_t; objective
    |x_T - target|^2 / 2 + sum c_{t,n} |u_{t,n}|^2 / 2.  The horizon is
    flattened into one dense regularized least-squares problem over all
    stacked actions.
    """
    horizon = len(a_mats)
    x0 = np.asarray(x0, dtype=np.float64)

    # Influence of each action on x_T, and the free (zero-action) rollout.
    free = x0.copy()
    for t in range(horizon):
        free = a_mats[t] @ free + c_vecs[t]
    cols, keys = [], []
    for t in range(horizon):
        for n, b in enumerate(b_mats[t]):
            m = np.asarray(b, dtype=np.float64)
            for s in range(t + 1, horizon):
                m = a_mats[s] @ m
            cols.append(m)
            keys.append((t, n))
    infl = np.hstack(cols)
    reg = np.concatenate([np.full(b_mats[t][n].shape[1], stage_coeffs[(t, n)])
                          for t, n in keys])

    normal = infl.T @ infl + np.diag(reg)
    rhs = infl.T @ (np.asarray(target, dtype=np.float64) - free)
    try:
        theta = np.linalg.solve(normal, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc

    resid = infl @ theta + free - target
    value = 0.5 * resid @ resid + 0.5 * theta @ (reg * theta)
    actions, off = {}, 0
    for (t, n), b in zip(keys, [b_mats[t][n] for t, n in keys]):
        k = b.shape[1]
        actions[(t, n)] = theta[off:off + k]
        off += k
    return LQSolution(actions=actions, value=float(value))
