"""Precondition matrices and their amortized states.

Covers the whole menu used by the optimizer family: identity, adaptive
diagonal (with and without momentum), batch Gauss-Newton, Kronecker
factorization with eigenvalue-corrected variant, and the cooperative
Kronecker factorization whose factor-wise Schur complements approximate
the cooperative precondition of the joint update.

Conventions: dense-layer parameters are the row-major flattened
(out, in + 1) block [W | b]; gradients reshape accordingly.  Factors are
A = E[zbar zbar^T] on the input side and B = E[g g^T] on the output side,
so the flattened curvature is kron(B, A).  The plain solve damps the
Kronecker eigenvalues as (b_i * a_j + damping), matching a densely damped
matrix exactly; the cooperative solve damps each factor by sqrt(damping)
so the factor-wise Schur complements stay well posed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import DimensionMismatchError, SingularFactorError, UninitializedStateError
from .linalg import psd_pinv_solve, symmetrize

logger = logging.getLogger(__name__)

POLICY_KINDS = (
    "identity",
    "adaptive-diag",
    "adaptive-diag-with-momentum",
    "gauss-newton",
    "kfac",
    "kfac-eigencorrected",
    "cooperative-kfac",
    "exact",
)

# Condition number beyond which a cooperative factor Schur complement is
# considered untrustworthy and the solve falls back to the plain factors.
COOP_COND_LIMIT = 1e8


@dataclass(frozen=True)
class PreconditionPolicy:
    """Which curvature stands in for the parameter block, and how damped."""

    kind: str = "identity"
    damping: float = 1e-3
    ema_decay: float = 0.95
    update_period: int = 10
    # Adam moments; only read by the momentum variant.
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise DimensionMismatchError(f"unknown precondition kind {self.kind!r}")
        if self.damping < 0 or not (0 <= self.ema_decay < 1):
            raise DimensionMismatchError("bad damping or ema_decay")
        if self.update_period < 1:
            raise DimensionMismatchError("update_period must be >= 1")


@dataclass(frozen=True)
class StateCurvatureApprox:
    """How state-space curvature is carried between stages."""

    mode: str = "full"          # full | gauss-newton | top-eigenspace
    rank: int = 8

    def __post_init__(self):
        if self.mode not in ("full", "gauss-newton", "top-eigenspace"):
            raise DimensionMismatchError(f"unknown state curvature mode {self.mode!r}")
        if self.rank < 1:
            raise DimensionMismatchError("rank must be positive")


# ---------------------------------------------------------------------------
# Amortization states
# ---------------------------------------------------------------------------

@dataclass
class DiagState:
    ema: np.ndarray
    momentum: Optional[np.ndarray] = None
    steps: int = 0


@dataclass
class KroneckerFactors:
    """Second-moment factors of one layer; eigencaches refresh lazily."""

    a: np.ndarray                     # (in+1, in+1), E[zbar zbar^T]
    b: np.ndarray                     # (out, out),   E[g g^T]
    steps: int = 0
    eig_a: Optional[Tuple[np.ndarray, np.ndarray]] = None
    eig_b: Optional[Tuple[np.ndarray, np.ndarray]] = None
    corr: Optional[np.ndarray] = None  # EKFAC per-coordinate second moments
    refreshed_at: int = -1

    @property
    def in1(self) -> int:
        return self.a.shape[0]

    @property
    def out(self) -> int:
        return self.b.shape[0]


@dataclass
class PairFactors:
    """Cross factors coupling two layers aligned at the same stage."""

    a_uv: np.ndarray                  # E[zbar_u zbar_v^T]
    b_uv: np.ndarray                  # E[g_u g_v^T]
    steps: int = 0
    refreshed_at: int = -1


def init_factors(in1: int, out: int) -> KroneckerFactors:
    return KroneckerFactors(a=np.zeros((in1, in1)), b=np.zeros((out, out)))


def update_factors(state: KroneckerFactors, z: np.ndarray, g: np.ndarray,
                   decay: float = 0.95) -> KroneckerFactors:
    """EMA update of the layer factors from one batch of (zbar, g).

    The first update loads the batch moments directly so a decay of 0
    always reproduces the current batch exactly.
    """
    if z.shape[0] != g.shape[0]:
        raise DimensionMismatchError("activation and derivative batches differ")
    if z.shape[1] != state.in1 or g.shape[1] != state.out:
        raise DimensionMismatchError("factor update width mismatch")
    ma = z.T @ z / z.shape[0]
    mb = g.T @ g / g.shape[0]
    if state.steps == 0 or decay == 0.0:
        state.a, state.b = ma, mb
        state.eig_a = state.eig_b = None
    else:
        state.a = decay * state.a + (1 - decay) * ma
        state.b = decay * state.b + (1 - decay) * mb
    state.steps += 1
    return state


def update_pair_factors(state: PairFactors, z1: np.ndarray, z2: np.ndarray,
                        g1: np.ndarray, g2: np.ndarray,
                        decay: float = 0.95) -> PairFactors:
    if not (z1.shape[0] == z2.shape[0] == g1.shape[0] == g2.shape[0]):
        raise DimensionMismatchError("pair factor batches differ")
    ma = z1.T @ z2 / z1.shape[0]
    mb = g1.T @ g2 / g1.shape[0]
    if state.steps == 0 or decay == 0.0:
        state.a_uv, state.b_uv = ma, mb
    else:
        state.a_uv = decay * state.a_uv + (1 - decay) * ma
        state.b_uv = decay * state.b_uv + (1 - decay) * mb
    state.steps += 1
    return state


def _factor_eigs(state: KroneckerFactors):
    if state.eig_a is None:
        wa, qa = np.linalg.eigh(symmetrize(state.a))
        wb, qb = np.linalg.eigh(symmetrize(state.b))
        state.eig_a = (np.maximum(wa, 0.0), qa)
        state.eig_b = (np.maximum(wb, 0.0), qb)
    return state.eig_a, state.eig_b


def kfac_solve(state: KroneckerFactors, rhs: np.ndarray, damping: float) -> np.ndarray:
    """(kron(B, A) + damping I)^+ applied to a flat gradient or matrix RHS.

    Exploits the two-factor identity through the factor eigenbases, so the
    result matches the densely damped Kronecker matrix exactly.
    """
    (wa, qa), (wb, qb) = _factor_eigs(state)
    out, in1 = state.out, state.in1
    rhs2 = rhs.reshape(out, in1, -1)
    proj = np.einsum("oi,ijc,jk->okc", qb.T, rhs2, qa)
    denom = wb[:, None] * wa[None, :] + damping
    good = denom > 1e-300
    proj = np.where(good[..., None], proj / np.where(good, denom, 1.0)[..., None], 0.0)
    sol = np.einsum("oi,ijc,jk->okc", qb, proj, qa.T)
    return sol.reshape(rhs.shape)


def ekfac_solve(state: KroneckerFactors, rhs: np.ndarray, damping: float) -> np.ndarray:
    """Eigenbasis solve with the EKFAC-corrected diagonal scale."""
    (wa, qa), (wb, qb) = _factor_eigs(state)
    if state.corr is None:
        raise UninitializedStateError("EKFAC correction has not been accumulated")
    out, in1 = state.out, state.in1
    rhs2 = rhs.reshape(out, in1, -1)
    proj = np.einsum("oi,ijc,jk->okc", qb.T, rhs2, qa)
    denom = state.corr.reshape(out, in1)[:, :, None] + damping
    sol = np.einsum("oi,ijc,jk->okc", qb, proj / denom, qa.T)
    return sol.reshape(rhs.shape)


def ekfac_accumulate(state: KroneckerFactors, z: np.ndarray, g: np.ndarray,
                     decay: float) -> None:
    """EMA of squared per-sample gradients projected into the eigenbasis."""
    (wa, qa), (wb, qb) = _factor_eigs(state)
    pg = g @ qb                       # (batch, out)
    pz = z @ qa                       # (batch, in1)
    sq = np.einsum("bo,bj->oj", pg ** 2, pz ** 2) / z.shape[0]
    flat = sq.reshape(-1)
    if state.corr is None:
        state.corr = flat
    else:
        state.corr = decay * state.corr + (1 - decay) * flat


# ---------------------------------------------------------------------------
# Cooperative Kronecker solve
# ---------------------------------------------------------------------------

def _damped(mat: np.ndarray, damping: float) -> np.ndarray:
    return mat + np.sqrt(damping) * np.eye(mat.shape[0]) if damping else mat


def cooperative_schur_factors(fu: KroneckerFactors, fv: KroneckerFactors,
                              pair: PairFactors, damping: float):
    """Factor-wise Schur complements (A_uu - A_uv A_vv^+ A_uv^T, same for B)."""
    a_uu, a_vv = _damped(fu.a, damping), _damped(fv.a, damping)
    b_uu, b_vv = _damped(fu.b, damping), _damped(fv.b, damping)
    try:
        a_t = np.linalg.solve(a_vv, pair.a_uv.T)
        b_t = np.linalg.solve(b_vv, pair.b_uv.T)
    except np.linalg.LinAlgError as exc:
        raise SingularFactorError(str(exc)) from exc
    a_s = symmetrize(a_uu - pair.a_uv @ a_t)
    b_s = symmetrize(b_uu - pair.b_uv @ b_t)
    return a_s, b_s, a_vv, b_vv


def cooperative_kfac_solve(fu: KroneckerFactors, fv: KroneckerFactors,
                           pair: PairFactors, p_u: np.ndarray,
                           i_t: np.ndarray, damping: float = 1e-3) -> np.ndarray:
    """Cooperative open gain through the factor-wise Schur complements.

    p_u is the first player's flat gradient block; i_t the second player's
    plain (non-cooperative) flat gain.  Implements
    vec( Bs^+ (P_u + B_uv unvec(i_t) A_uv^T) As^-T ), falling back to the
    plain factors of player one when a Schur complement is too
    ill-conditioned to trust.
    """
    out_u, in_u = fu.out, fu.in1
    out_v, in_v = fv.out, fv.in1
    if p_u.size != out_u * in_u or i_t.size != out_v * in_v:
        raise DimensionMismatchError("gradient blocks do not match the factor dims")
    a_s, b_s, _, _ = cooperative_schur_factors(fu, fv, pair, damping)
    if _ill_conditioned(a_s) or _ill_conditioned(b_s):
        logger.warning("cooperative factors ill-conditioned; plain solve fallback")
        return kfac_solve(fu, p_u.reshape(-1), damping)
    num = p_u.reshape(out_u, in_u) + pair.b_uv @ i_t.reshape(out_v, in_v) @ pair.a_uv.T
    try:
        half = np.linalg.solve(b_s, num)
        sol = np.linalg.solve(a_s, half.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularFactorError(str(exc)) from exc
    return sol.reshape(-1)


def cooperative_kfac_solve_mat(fu: KroneckerFactors, fv: KroneckerFactors,
                               pair: PairFactors, p_ux: np.ndarray,
                               l_t: np.ndarray, damping: float = 1e-3) -> np.ndarray:
    """Column-wise cooperative solve for the feedback block (p_u x d)."""
    cols = [cooperative_kfac_solve(fu, fv, pair, p_ux[:, c], l_t[:, c], damping)
            for c in range(p_ux.shape[1])]
    return np.stack(cols, axis=1)


def _ill_conditioned(mat: np.ndarray) -> bool:
    w = np.linalg.eigvalsh(mat)
    lo, hi = float(np.min(w)), float(np.max(w))
    return lo <= 0 or hi / lo > COOP_COND_LIMIT


# ---------------------------------------------------------------------------
# State-curvature compression
# ---------------------------------------------------------------------------

def compress_state_curvature(v_xx: Optional[np.ndarray],
                             approx: StateCurvatureApprox,
                             vx_samples: Optional[np.ndarray] = None) -> np.ndarray:
    """Project state curvature onto the configured representation.

    full: the (symmetrized) input unchanged.  top-eigenspace: the best
    rank-r PSD approximation (negative eigenvalues clipped).  gauss-newton:
    the second moment of the supplied per-sample value gradients.
    """
    if approx.mode == "gauss-newton":
        if vx_samples is None:
            raise DimensionMismatchError("gauss-newton compression needs vx samples")
        return vx_samples.T @ vx_samples / vx_samples.shape[0]
    if v_xx is None:
        raise DimensionMismatchError("full/top-eigenspace compression needs a matrix")
    sym = symmetrize(np.asarray(v_xx, dtype=np.float64))
    if approx.mode == "full":
        return sym
    w, q = np.linalg.eigh(sym)
    w = np.maximum(w, 0.0)
    keep = np.argsort(w)[::-1][: approx.rank]
    return (q[:, keep] * w[keep]) @ q[:, keep].T


# ---------------------------------------------------------------------------
# Stateless solve entry point (per-kind dispatch)
# ---------------------------------------------------------------------------

def precondition_solve(policy: PreconditionPolicy, state, grad: np.ndarray,
                       aux: Optional[dict] = None) -> np.ndarray:
    """Apply M^+ grad for the policy's precondition matrix M.

    `state` is the per-layer amortization state (DiagState or
    KroneckerFactors) for the stateful kinds; `aux` carries batch
    quantities (per-sample gradients for gauss-newton).
    """
    if not np.all(np.isfinite(grad)):
        raise DimensionMismatchError("non-finite gradient in precondition solve")
    kind, lam = policy.kind, policy.damping
    if kind == "identity":
        return grad
    if kind == "adaptive-diag":
        if state is None:
            raise UninitializedStateError("adaptive-diag state missing")
        return grad / (np.sqrt(state.ema) + lam)
    if kind == "adaptive-diag-with-momentum":
        if state is None or state.momentum is None:
            raise UninitializedStateError("momentum state missing")
        m_hat = state.momentum / (1 - policy.beta1 ** state.steps)
        v_hat = state.ema / (1 - policy.beta2 ** state.steps)
        return m_hat / (np.sqrt(v_hat) + lam)
    if kind == "gauss-newton":
        samples = None if aux is None else aux.get("samples")
        if samples is None:
            raise UninitializedStateError("gauss-newton solve needs per-sample gradients")
        return _woodbury_solve(samples, grad, lam)
    if kind == "kfac":
        if state is None or state.steps == 0:
            raise UninitializedStateError("kfac factors missing")
        return kfac_solve(state, grad, lam)
    if kind == "kfac-eigencorrected":
        if state is None or state.steps == 0:
            raise UninitializedStateError("ekfac factors missing")
        return ekfac_solve(state, grad, lam)
    raise DimensionMismatchError(f"precondition_solve does not handle kind {kind!r}")


def _woodbury_solve(samples: np.ndarray, rhs: np.ndarray, lam: float) -> np.ndarray:
    """(U^T U / b + lam I)^-1 rhs with U the (batch, p) gradient samples."""
    b = samples.shape[0]
    gram = samples @ samples.T / b + lam * np.eye(b)
    mid = np.linalg.solve(gram, samples @ rhs / b)
    return (rhs - samples.T @ mid) / lam


# ---------------------------------------------------------------------------
# Engine: stateful orchestration for the training loop
# ---------------------------------------------------------------------------

class _BaseSolver:
    """M^+ applied to vectors or stacked-column matrices."""

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def m_dense(self, size: int) -> np.ndarray:
        """The precondition matrix itself (for dense Schur coupling)."""
        raise NotImplementedError


class ExactSolver(_BaseSolver):
    def __init__(self, mat: np.ndarray, damping: float, label: str = ""):
        self._mat = symmetrize(mat) + damping * np.eye(mat.shape[0])
        self._label = label

    def solve(self, rhs):
        return psd_pinv_solve(self._mat, rhs, 0.0, warn_label=self._label)

    def m_dense(self, size):
        return self._mat


class IdentitySolver(_BaseSolver):
    def solve(self, rhs):
        return rhs

    def m_dense(self, size):
        return np.eye(size)


class DiagSolver(_BaseSolver):
    def __init__(self, diag: np.ndarray):
        self._diag = diag

    def solve(self, rhs):
        return rhs / self._diag if rhs.ndim == 1 else rhs / self._diag[:, None]

    def m_dense(self, size):
        return np.diag(self._diag)


class ScaledVecSolver(_BaseSolver):
    """Adam: the direction replaces the gradient outright; feedback blocks
    are still scaled by the adaptive diagonal."""

    def __init__(self, direction: np.ndarray, diag: np.ndarray):
        self._direction = direction
        self._diag = diag

    def solve(self, rhs):
        if rhs.ndim == 1:
            return self._direction
        return rhs / self._diag[:, None]

    def m_dense(self, size):
        return np.diag(self._diag)


class WoodburySolver(_BaseSolver):
    def __init__(self, samples: np.ndarray, damping: float):
        self._samples = samples
        self._damping = damping

    def solve(self, rhs):
        return _woodbury_solve(self._samples, rhs, self._damping)

    def m_dense(self, size):
        b = self._samples.shape[0]
        return self._samples.T @ self._samples / b + self._damping * np.eye(size)


class KfacSolver(_BaseSolver):
    def __init__(self, state: KroneckerFactors, damping: float, corrected: bool):
        self._state = state
        self._damping = damping
        self._corrected = corrected

    def solve(self, rhs):
        if self._corrected:
            return ekfac_solve(self._state, rhs, self._damping)
        return kfac_solve(self._state, rhs, self._damping)

    def m_dense(self, size):
        return np.kron(self._state.b, self._state.a) + self._damping * np.eye(size)


class CurvatureEngine:
    """Owns amortization state across training iterations.

    Layer states are keyed by the dynamics' parameter keys (node ids for
    staged graphs), which are invariant under re-alignment, so factor
    history survives alignment changes; cross factors are keyed per ordered
    pair and appear lazily when two layers first share a stage.
    """

    def __init__(self, policy: PreconditionPolicy = PreconditionPolicy("exact", damping=0.0),
                 state_approx: StateCurvatureApprox = StateCurvatureApprox("full"),
                 zero_feedback: bool = False, zero_coupling: bool = False):
        self.policy = policy
        self.state_approx = state_approx
        self.zero_feedback = zero_feedback          # drop the state cross term
        self.zero_coupling = zero_coupling          # drop inter-player blocks
        self.iteration = 0
        self._diag: Dict = {}
        self._factors: Dict = {}
        self._pairs: Dict = {}

    def begin_step(self):
        self.iteration += 1

    # -- state accessors ----------------------------------------------------

    def diag_state(self, key, size: int) -> DiagState:
        st = self._diag.get(key)
        if st is None:
            st = DiagState(ema=np.zeros(size), momentum=np.zeros(size))
            self._diag[key] = st
        return st

    def factors(self, key, in1: int, out: int) -> KroneckerFactors:
        st = self._factors.get(key)
        if st is None:
            st = init_factors(in1, out)
            self._factors[key] = st
        return st

    def pair(self, key_u, key_v, in_v1: int, out_v: int, fu: KroneckerFactors) -> PairFactors:
        k = (key_u, key_v)
        st = self._pairs.get(k)
        if st is None:
            st = PairFactors(a_uv=np.zeros((fu.in1, in_v1)), b_uv=np.zeros((fu.out, out_v)))
            self._pairs[k] = st
        return st

    # -- solver construction --------------------------------------------------

    def param_solver(self, key, grad: np.ndarray, *, zbar=None, g_local=None,
                     samples=None, exact_fn=None, out_dim=None) -> _BaseSolver:
        """Update the key's state from this iteration's quantities and
        return the solver standing in for the parameter curvature."""
        kind, pol = self.policy.kind, self.policy
        if kind == "exact":
            if exact_fn is None:
                raise UninitializedStateError("exact curvature requested without a builder")
            return ExactSolver(exact_fn(), pol.damping, label=str(key))
        if kind == "identity":
            return IdentitySolver()
        if kind == "adaptive-diag":
            st = self.diag_state(key, grad.size)
            st.ema = pol.ema_decay * st.ema + (1 - pol.ema_decay) * grad ** 2
            st.steps += 1
            return DiagSolver(np.sqrt(st.ema) + pol.damping)
        if kind == "adaptive-diag-with-momentum":
            st = self.diag_state(key, grad.size)
            st.momentum = pol.beta1 * st.momentum + (1 - pol.beta1) * grad
            st.ema = pol.beta2 * st.ema + (1 - pol.beta2) * grad ** 2
            st.steps += 1
            m_hat = st.momentum / (1 - pol.beta1 ** st.steps)
            v_hat = st.ema / (1 - pol.beta2 ** st.steps)
            diag = np.sqrt(v_hat) + pol.damping
            return ScaledVecSolver(m_hat / diag, diag)
        if kind == "gauss-newton":
            if samples is None:
                raise UninitializedStateError("gauss-newton needs per-sample gradients")
            return WoodburySolver(samples, pol.damping)
        if kind in ("kfac", "kfac-eigencorrected", "cooperative-kfac"):
            if zbar is None or g_local is None:
                raise UninitializedStateError("kfac needs activations and derivatives")
            st = self.factors(key, zbar.shape[1], g_local.shape[1])
            update_factors(st, zbar, g_local, pol.ema_decay)
            if st.refreshed_at < 0 or (self.iteration - st.refreshed_at) >= pol.update_period:
                st.eig_a = st.eig_b = None      # eigenbasis refresh
                st.refreshed_at = self.iteration
            if kind == "kfac-eigencorrected":
                ekfac_accumulate(st, zbar, g_local, pol.ema_decay)
                return KfacSolver(st, pol.damping, corrected=True)
            return KfacSolver(st, pol.damping, corrected=False)
        raise DimensionMismatchError(f"no solver for kind {kind!r}")

    def pair_factors(self, key_u, key_v, zbar_u, zbar_v, g_u, g_v) -> PairFactors:
        fu = self.factors(key_u, zbar_u.shape[1], g_u.shape[1])
        st = self.pair(key_u, key_v, zbar_v.shape[1], g_v.shape[1], fu)
        update_pair_factors(st, zbar_u, zbar_v, g_u, g_v, self.policy.ema_decay)
        return st
