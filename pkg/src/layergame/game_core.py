"""Backward optimality recursions and the feedback update pass.

Three information regimes over the same staged dynamics:

* open-loop: co-states propagate per sample by the adjoint recursion and
  the per-player objective gradient equals the exact loss gradient;
* feedback: every player carries its own local value model (gradient per
  sample, batch-mean Hessian) and solves a stagewise quadratic for an
  open gain plus a state-feedback gain;
* cooperative: players at a stage solve the joint quadratic; two-player
  stages go through the Schur complement closed form, larger stages
  through one dense block factorization.

Losses are batch means; first-order quantities are kept per sample so the
open-loop/feedback degeneracies hold to machine precision, while curvature
blocks are batch means.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .curvature import CurvatureEngine, PreconditionPolicy, \
    compress_state_curvature, cooperative_kfac_solve, cooperative_kfac_solve_mat
from .errors import DimensionMismatchError, NonFiniteValueError
from .linalg import check_finite, psd_pinv_solve, symmetrize
from .netgraph import StageDynamics, Trajectory


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------

class TerminalLoss:
    """Loss on the final state; value per sample, gradient per sample,
    Hessian averaged over the batch."""

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess_mean(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class CrossEntropyLoss(TerminalLoss):
    """Softmax cross-entropy on logits with integer labels."""

    def __init__(self, labels: np.ndarray):
        self.labels = np.asarray(labels, dtype=np.int64)

    def _softmax(self, x):
        z = x - np.max(x, axis=1, keepdims=True)
        e = np.exp(z)
        return e / np.sum(e, axis=1, keepdims=True)

    def value(self, x):
        z = x - np.max(x, axis=1, keepdims=True)
        lse = np.log(np.sum(np.exp(z), axis=1))
        return lse - z[np.arange(x.shape[0]), self.labels]

    def grad(self, x):
        s = self._softmax(x)
        s[np.arange(x.shape[0]), self.labels] -= 1.0
        return s

    def hess_mean(self, x):
        # exact logits Hessian, also the Gauss-Newton form: diag(s) - s s^T
        s = self._softmax(x)
        h = np.einsum("bi,bj->ij", s, s) / x.shape[0]
        return np.diag(np.mean(s, axis=0)) - h


class MeanSquaredErrorLoss(TerminalLoss):
    """Per-sample mean over components of squared residuals."""

    def __init__(self, targets: np.ndarray):
        self.targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))

    def value(self, x):
        return np.mean((x - self.targets) ** 2, axis=1)

    def grad(self, x):
        return 2.0 * (x - self.targets) / x.shape[1]

    def hess_mean(self, x):
        return 2.0 / x.shape[1] * np.eye(x.shape[1])


class QuadraticLoss(TerminalLoss):
    """Half squared distance to a fixed target vector."""

    def __init__(self, target: Optional[np.ndarray] = None):
        self.target = target

    def value(self, x):
        r = x - self.target if self.target is not None else x
        return 0.5 * np.sum(r ** 2, axis=1)

    def grad(self, x):
        return x - self.target if self.target is not None else x.copy()

    def hess_mean(self, x):
        return np.eye(x.shape[1])


@dataclass
class CostModel:
    """Terminal loss plus per-player quadratic weight decay.

    The running cost of player key is coeff(key)/2 * |theta|^2, so its
    gradient is c*theta and its Hessian c*I.

    `terminal` is the task loss.  In the per-player recursions every
    player sees it in full unless `per_player_terminal` assigns each
    player line its own loss.  The cooperative recursion minimizes the
    joint objective: the sum of the per-player losses when given, else
    the task loss itself (how that joint cost would be distributed back
    to players is out of scope).
    """

    terminal: TerminalLoss
    weight_decay: float = 0.0
    per_player_decay: Optional[Dict[object, float]] = None
    per_player_terminal: Optional[List[TerminalLoss]] = None

    def coeff(self, key) -> float:
        if self.per_player_decay and key in self.per_player_decay:
            return self.per_player_decay[key]
        return self.weight_decay

    def player_terminal(self, n: int) -> TerminalLoss:
        if self.per_player_terminal is not None:
            return self.per_player_terminal[n]
        return self.terminal

    def joint_terminal_grad(self, x: np.ndarray) -> np.ndarray:
        if self.per_player_terminal is not None:
            return sum(t.grad(x) for t in self.per_player_terminal)
        return self.terminal.grad(x)

    def joint_terminal_hess(self, x: np.ndarray) -> np.ndarray:
        if self.per_player_terminal is not None:
            return sum(t.hess_mean(x) for t in self.per_player_terminal)
        return self.terminal.hess_mean(x)

    def stage_cost(self, params: Dict) -> float:
        return sum(0.5 * self.coeff(k) * float(v @ v) for k, v in params.items())

    def total_loss(self, x_final: np.ndarray, params: Dict) -> float:
        return float(np.mean(self.terminal.value(np.atleast_2d(x_final)))) \
            + self.stage_cost(params)


# ---------------------------------------------------------------------------
# Result containers
# ---------------------------------------------------------------------------

@dataclass
class CoStateSet:
    """Per-stage adjoint vectors, one batch row per sample.

    With a shared terminal loss the co-state is identical across players;
    `p(t, n)` exposes the per-player view required by the recursions.
    """

    stages: List[np.ndarray]

    def p(self, t: int, n: int = 0) -> np.ndarray:
        return self.stages[t]

    def p_mean(self, t: int, n: int = 0) -> np.ndarray:
        return self.stages[t].mean(axis=0)


@dataclass
class ValueLocal:
    """Per-player local value derivatives along the trajectory."""

    vx: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    vxx: Dict[Tuple[int, int], Optional[np.ndarray]] = field(default_factory=dict)
    vx_samples: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)


@dataclass
class GroupValueLocal:
    """Joint value derivatives carried by the cooperative recursion."""

    wx: Dict[int, np.ndarray] = field(default_factory=dict)
    wxx: Dict[int, Optional[np.ndarray]] = field(default_factory=dict)
    wx_samples: Dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class GainSchedule:
    """Open gains k and feedback gains K per (stage, player).

    Open-loop schedules force K to zero; dummy players simply do not
    appear.  The applied update is theta <- theta - step * (k + K dx).
    """

    mode: str
    k: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    feedback: Dict[Tuple[int, int], Optional[np.ndarray]] = field(default_factory=dict)

    def items(self):
        return sorted(self.k.items())

    def mean_open_gain(self) -> float:
        if not self.k:
            return 0.0
        return float(np.mean([np.mean(np.abs(v)) for v in self.k.values()]))

    def mean_feedback_norm(self) -> float:
        mats = [m for m in self.feedback.values() if m is not None]
        if not mats:
            return 0.0
        return float(np.mean([np.linalg.norm(m) for m in mats]))


@dataclass
class FeedbackInfo:
    halvings: int = 0
    skipped: bool = False
    step_used: float = 0.0


# ---------------------------------------------------------------------------
# Open-loop recursions
# ---------------------------------------------------------------------------

def olne_backward(traj: Trajectory, cost: CostModel):
    """Adjoint recursion and per-player objective gradients.

    Returns (CoStateSet, {(t, n): grad}); the gradient of player (t, n)
    equals the exact derivative of the batch loss with respect to its
    parameters.
    """
    dyn = traj.dynamics
    horizon = dyn.num_stages
    p = cost.terminal.grad(traj.states[horizon])
    check_finite(p, NonFiniteValueError, "terminal gradient")
    stages = [None] * (horizon + 1)
    stages[horizon] = p
    grads: Dict[Tuple[int, int], np.ndarray] = {}
    for t in reversed(range(horizon)):
        for n in traj.param_players(t):
            key = dyn.param_key(t, n)
            g = cost.coeff(key) * traj.params[key] + traj.jac_param(t, n).vjp_mean(p)
            check_finite(g, NonFiniteValueError, f"objective gradient ({t},{n})")
            grads[(t, n)] = g
        p = traj.jac_state(t).vjp(p)
        stages[t] = p
    return CoStateSet(stages=stages), grads


def group_olne_backward(traj: Trajectory, cost: CostModel):
    """Joint co-states (terminal condition summed over players, so N
    copies of a shared task loss) and the per-player gradients of the
    summed objective."""
    dyn = traj.dynamics
    horizon = dyn.num_stages
    if cost.per_player_terminal is not None:
        p = cost.joint_terminal_grad(traj.states[horizon])
    else:
        p = dyn.num_players * cost.terminal.grad(traj.states[horizon])
    stages = [None] * (horizon + 1)
    stages[horizon] = p
    grads: Dict[Tuple[int, int], np.ndarray] = {}
    for t in reversed(range(horizon)):
        for n in traj.param_players(t):
            key = dyn.param_key(t, n)
            g = cost.coeff(key) * traj.params[key] + traj.jac_param(t, n).vjp_mean(p)
            check_finite(g, NonFiniteValueError, f"group gradient ({t},{n})")
            grads[(t, n)] = g
        p = traj.jac_state(t).vjp(p)
        stages[t] = p
    return CoStateSet(stages=stages), grads


# ---------------------------------------------------------------------------
# Feedback recursion
# ---------------------------------------------------------------------------

def _default_engine() -> CurvatureEngine:
    return CurvatureEngine(PreconditionPolicy("exact", damping=0.0))


def _solver_context(traj, t, n, vx_sample):
    """Quantities handed to the curvature engine for player (t, n)."""
    pj = traj.jac_param(t, n)
    zbar = getattr(pj, "zbar", None)
    g_local = vx_sample @ pj.lmap if hasattr(pj, "lmap") else None
    samples = pj.vjp(vx_sample)
    return pj, zbar, g_local, samples


def fne_backward(traj: Trajectory, cost: CostModel,
                 curv: Optional[CurvatureEngine] = None,
                 stage0_value: bool = True):
    """Per-player stagewise quadratic solve with value propagation.

    Returns (GainSchedule, ValueLocal).  The curvature engine supplies the
    treatment of the parameter block (exact by default); with the engine's
    zero_feedback flag the state cross term is dropped and the open gain
    collapses to the exact objective gradient.
    """
    engine = curv or _default_engine()
    dyn = traj.dynamics
    horizon, batch, players = dyn.num_stages, traj.batch, dyn.num_players
    mode = engine.state_approx.mode
    full = mode in ("full", "top-eigenspace")

    vx = [cost.player_terminal(n).grad(traj.states[horizon]) for n in range(players)]
    check_finite(vx[0], NonFiniteValueError, "terminal gradient")
    vxx = [cost.player_terminal(n).hess_mean(traj.states[horizon]) if full else None
           for n in range(players)]

    gains = GainSchedule(mode="fne")
    values = ValueLocal()
    for n in range(players):
        values.vx[(horizon, n)] = vx[n].mean(axis=0)
        values.vxx[(horizon, n)] = vxx[n]
        values.vx_samples[(horizon, n)] = vx[n]

    for t in reversed(range(horizon)):
        fx = traj.jac_state(t)
        stage_vxx = [vxx[n] if full else vx[n].T @ vx[n] / batch
                     for n in range(players)]
        corrections: Dict[int, Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]] = {}

        for n in traj.param_players(t):
            key = dyn.param_key(t, n)
            coeff = cost.coeff(key)
            pj, zbar, g_local, samples = _solver_context(traj, t, n, vx[n])
            q_theta = coeff * traj.params[key] + pj.vjp_mean(vx[n])
            check_finite(q_theta, NonFiniteValueError, f"Q_theta ({t},{n})")
            svxx = stage_vxx[n]
            solver = engine.param_solver(
                key, q_theta, zbar=zbar, g_local=g_local, samples=samples,
                exact_fn=lambda pj=pj, svxx=svxx, coeff=coeff:
                    pj.quad_mean(svxx) + coeff * np.eye(pj.size))
            k = solver.solve(q_theta)
            if engine.zero_feedback:
                q_tx, big_k = None, None
            else:
                q_tx = pj.cross_state_mean(svxx, fx)
                big_k = solver.solve(q_tx)
                check_finite(big_k, NonFiniteValueError, f"feedback gain ({t},{n})")
            gains.k[(t, n)] = k
            gains.feedback[(t, n)] = big_k
            corrections[n] = (k, q_tx, big_k)

        if t == 0 and not stage0_value:
            break
        for n in range(players):
            new_vx = fx.vjp(vx[n])
            k_corr = corrections.get(n)
            if k_corr is not None and k_corr[1] is not None:
                new_vx = new_vx - k_corr[0] @ k_corr[1]
            vx[n] = new_vx
            if full:
                m = fx.pull(vxx[n])
                if k_corr is not None and k_corr[1] is not None:
                    m = m - k_corr[1].T @ k_corr[2]
                m = symmetrize(m)
                if mode == "top-eigenspace":
                    m = compress_state_curvature(m, engine.state_approx)
                vxx[n] = m
            values.vx[(t, n)] = vx[n].mean(axis=0)
            values.vxx[(t, n)] = vxx[n] if full else vx[n].T @ vx[n] / batch
            values.vx_samples[(t, n)] = vx[n]
    return gains, values


# ---------------------------------------------------------------------------
# Cooperative recursion
# ---------------------------------------------------------------------------

def gr_backward(traj: Trajectory, cost: CostModel,
                curv: Optional[CurvatureEngine] = None,
                stage0_value: bool = True):
    """Joint stagewise solve under the summed objective.

    Returns (GainSchedule, GroupValueLocal).  Two-player stages use the
    Schur-complement closed form of the block system (factor-wise when the
    engine policy is a Kronecker kind); stages with three or more owning
    players fall back to one dense block factorization.
    """
    engine = curv or _default_engine()
    dyn = traj.dynamics
    horizon, batch = dyn.num_stages, traj.batch
    mode = engine.state_approx.mode
    full = mode in ("full", "top-eigenspace")
    kron_kinds = ("kfac", "kfac-eigencorrected", "cooperative-kfac")

    wx = cost.joint_terminal_grad(traj.states[horizon])
    check_finite(wx, NonFiniteValueError, "terminal gradient")
    wxx = cost.joint_terminal_hess(traj.states[horizon]) if full else None

    gains = GainSchedule(mode="gr")
    values = GroupValueLocal()
    values.wx[horizon] = wx.mean(axis=0)
    values.wxx[horizon] = wxx
    values.wx_samples[horizon] = wx

    for t in reversed(range(horizon)):
        fx = traj.jac_state(t)
        stage_wxx = wxx if full else wx.T @ wx / batch
        ns = traj.param_players(t)

        ctx = {}
        for n in ns:
            key = dyn.param_key(t, n)
            coeff = cost.coeff(key)
            pj, zbar, g_local, samples = _solver_context(traj, t, n, wx)
            p_vec = coeff * traj.params[key] + pj.vjp_mean(wx)
            check_finite(p_vec, NonFiniteValueError, f"P_theta ({t},{n})")
            solver = engine.param_solver(
                key, p_vec, zbar=zbar, g_local=g_local, samples=samples,
                exact_fn=lambda pj=pj, coeff=coeff:
                    pj.quad_mean(stage_wxx) + coeff * np.eye(pj.size))
            p_tx = None if engine.zero_feedback else pj.cross_state_mean(stage_wxx, fx)
            ctx[n] = dict(key=key, pj=pj, zbar=zbar, g_local=g_local,
                          p=p_vec, px=p_tx, solver=solver)

        stage_gains: Dict[int, Tuple[np.ndarray, Optional[np.ndarray]]] = {}
        if len(ns) == 1 or engine.zero_coupling:
            for n in ns:
                c = ctx[n]
                k = c["solver"].solve(c["p"])
                big_k = None if c["px"] is None else c["solver"].solve(c["px"])
                stage_gains[n] = (k, big_k)
        elif len(ns) == 2 and engine.policy.kind in kron_kinds:
            stage_gains = _coop_pair_kron(engine, ctx, ns)
        elif len(ns) == 2:
            stage_gains = _coop_pair_dense(engine, ctx, ns, stage_wxx)
        elif len(ns) > 2:
            stage_gains = _coop_block_dense(engine, ctx, ns, stage_wxx)

        for n, (k, big_k) in stage_gains.items():
            check_finite(k, NonFiniteValueError, f"cooperative gain ({t},{n})")
            gains.k[(t, n)] = k
            gains.feedback[(t, n)] = big_k

        if t == 0 and not stage0_value:
            break
        new_wx = fx.vjp(wx)
        corr = np.zeros(new_wx.shape[1])
        for n, (k, big_k) in stage_gains.items():
            p_vec, p_tx = ctx[n]["p"], ctx[n]["px"]
            if p_tx is not None:
                corr = corr + 0.5 * (k @ p_tx + p_vec @ big_k)
        wx = new_wx - corr
        if full:
            m = fx.pull(wxx)
            for n, (k, big_k) in stage_gains.items():
                if ctx[n]["px"] is not None:
                    m = m - ctx[n]["px"].T @ big_k
            wxx = symmetrize(m)
            if mode == "top-eigenspace":
                wxx = compress_state_curvature(wxx, engine.state_approx)
        values.wx[t] = wx.mean(axis=0)
        values.wxx[t] = wxx if full else wx.T @ wx / batch
        values.wx_samples[t] = wx
    return gains, values


def _coop_pair_dense(engine, ctx, ns, stage_wxx):
    """Two-player Schur closed form with dense cross blocks."""
    out = {}
    for n, other in ((ns[0], ns[1]), (ns[1], ns[0])):
        cu, cv = ctx[n], ctx[other]
        p_uv = cu["pj"].cross_param_mean(stage_wxx, cv["pj"])
        i_t = cv["solver"].solve(cv["p"])
        m_u = cu["solver"].m_dense(cu["p"].size)
        schur = m_u - p_uv @ cv["solver"].solve(p_uv.T)
        k = psd_pinv_solve(schur, cu["p"] - p_uv @ i_t,
                           warn_label=f"cooperative precondition {cu['key']}")
        big_k = None
        if cu["px"] is not None:
            l_t = cv["solver"].solve(cv["px"])
            big_k = psd_pinv_solve(schur, cu["px"] - p_uv @ l_t)
        out[n] = (k, big_k)
    return out


def _coop_pair_kron(engine, ctx, ns):
    """Two-player solve through factor-wise Schur complements."""
    lam = engine.policy.damping
    out = {}
    for n, other in ((ns[0], ns[1]), (ns[1], ns[0])):
        cu, cv = ctx[n], ctx[other]
        if cu["zbar"] is None or cv["zbar"] is None:
            raise DimensionMismatchError("Kronecker cooperative solve needs dense layers")
        fu = engine.factors(cu["key"], cu["zbar"].shape[1], cu["g_local"].shape[1])
        fv = engine.factors(cv["key"], cv["zbar"].shape[1], cv["g_local"].shape[1])
        pair = engine.pair_factors(cu["key"], cv["key"], cu["zbar"], cv["zbar"],
                                   cu["g_local"], cv["g_local"])
        i_t = cv["solver"].solve(cv["p"])
        k = cooperative_kfac_solve(fu, fv, pair, cu["p"], i_t, lam)
        big_k = None
        if cu["px"] is not None:
            l_t = cv["solver"].solve(cv["px"])
            big_k = cooperative_kfac_solve_mat(fu, fv, pair, cu["px"], l_t, lam)
        out[n] = (k, big_k)
    return out


def _coop_block_dense(engine, ctx, ns, stage_wxx):
    """N-player joint solve by one dense factorization of the block system."""
    sizes = [ctx[n]["p"].size for n in ns]
    blocks = []
    for i, n in enumerate(ns):
        row = []
        for j, m in enumerate(ns):
            if i == j:
                row.append(ctx[n]["solver"].m_dense(sizes[i]))
            else:
                row.append(ctx[n]["pj"].cross_param_mean(stage_wxx, ctx[m]["pj"]))
        blocks.append(row)
    big = np.block(blocks)
    rhs = np.concatenate([ctx[n]["p"] for n in ns])
    sol = psd_pinv_solve(big, rhs, warn_label="cooperative block system")
    feedback = None
    if ctx[ns[0]]["px"] is not None:
        px = np.vstack([ctx[n]["px"] for n in ns])
        feedback = psd_pinv_solve(big, px)
    split = np.cumsum(sizes)[:-1]
    ks = np.split(sol, split)
    fbs = np.split(feedback, split) if feedback is not None else [None] * len(ns)
    return {n: (ks[i], fbs[i]) for i, n in enumerate(ns)}


# ---------------------------------------------------------------------------
# Applying the updates
# ---------------------------------------------------------------------------

def feedback_forward(dynamics: StageDynamics, params: Dict, gains: GainSchedule,
                     traj: Trajectory, step: float,
                     max_halvings: int = 5) -> Tuple[Dict, FeedbackInfo]:
    """Apply theta <- theta - step (k + K dx_t) while re-propagating.

    dx_t is the batch-mean difference between the re-propagated state and
    the stored trajectory.  Open-loop schedules skip the second pass.  If
    the re-propagation goes non-finite the step is halved (up to
    max_halvings, gains reused) and finally the iteration is skipped with
    the parameters returned unchanged.
    """
    by_stage: Dict[int, List] = {}
    for (t, n), k in gains.k.items():
        key = dynamics.param_key(t, n)
        by_stage.setdefault(t, []).append((key, k, gains.feedback.get((t, n))))

    open_loop = gains.mode == "olne" or all(
        m is None for m in gains.feedback.values())
    if open_loop:
        new_params = dict(params)
        for t, entries in by_stage.items():
            for key, k, _ in entries:
                new_params[key] = params[key] - step * k
        return new_params, FeedbackInfo(halvings=0, skipped=False, step_used=step)

    for attempt in range(max_halvings + 1):
        scale = step * (0.5 ** attempt)
        new_params = dict(params)
        x = traj.states[0]
        finite = True
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(dynamics.num_stages):
                dx = (x - traj.states[t]).mean(axis=0)
                for key, k, big_k in by_stage.get(t, []):
                    upd = k if big_k is None else k + big_k @ dx
                    new_params[key] = params[key] - scale * upd
                x = dynamics.eval_stage(t, x, new_params)
                if not np.all(np.isfinite(x)):
                    finite = False
                    break
        if finite:
            return new_params, FeedbackInfo(halvings=attempt, skipped=False,
                                            step_used=scale)
    return dict(params), FeedbackInfo(halvings=max_halvings, skipped=True,
                                      step_used=0.0)
