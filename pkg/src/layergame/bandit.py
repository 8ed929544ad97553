"""EXP3++ adversarial bandit for online alignment selection.

Implements the gap-aware exploration schedule: per-arm floors
eps_k(m) = min(1/(2M), sqrt(ln M / (k M))/2, xi_k(m)) with
xi_k(m) = beta ln(k+1) / (k gap_k(m)^2), learning rate
eta_k = sqrt(ln M / (k M))/2, and importance-weighted loss estimates
l = (1 - reward)/prob.  Empirical gaps are clamped to [1/sqrt(k), 1].
Rewards are expected in [0, 1] and are clamped there.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import OutOfOrderUpdateError

XI_BETA = 18.0


@dataclass
class BanditState:
    """Cumulative loss estimates and the exploration bookkeeping."""

    arms: int
    rng: np.random.Generator
    round: int = 1
    losses: np.ndarray = field(init=False)
    _pending: Optional[Tuple[int, float]] = None

    def __post_init__(self):
        if self.arms < 1:
            raise ValueError("need at least one arm")
        self.losses = np.zeros(self.arms)


class Exp3PlusPlus:
    """Strict sample -> update alternation over a fixed arm set."""

    def __init__(self, arms: int, seed: int = 0,
                 rng: Optional[np.random.Generator] = None):
        self.state = BanditState(arms=arms, rng=rng or np.random.default_rng(seed))

    @property
    def arms(self) -> int:
        return self.state.arms

    def gaps(self) -> np.ndarray:
        """Empirical per-arm gaps, clamped to [1/sqrt(k), 1]."""
        st = self.state
        raw = (st.losses - np.min(st.losses)) / st.round
        return np.clip(raw, 1.0 / np.sqrt(st.round), 1.0)

    def probabilities(self) -> np.ndarray:
        """The mixed distribution rho~ for the current round."""
        st = self.state
        m = st.arms
        if m == 1:
            return np.ones(1)
        base = 0.5 * np.sqrt(np.log(m) / (st.round * m))
        xi = XI_BETA * np.log(st.round + 1.0) / (st.round * self.gaps() ** 2)
        eps = np.minimum(np.minimum(0.5 / m, base), xi)
        eta = base
        logits = -eta * (st.losses - np.min(st.losses))
        rho = np.exp(logits)
        rho /= rho.sum()
        return (1.0 - eps.sum()) * rho + eps

    def sample(self) -> Tuple[int, float]:
        """Draw an arm; returns (arm, probability it was drawn with)."""
        st = self.state
        probs = self.probabilities()
        arm = int(st.rng.choice(st.arms, p=probs))
        st._pending = (arm, float(probs[arm]))
        return arm, float(probs[arm])

    def update(self, arm: int, reward: float) -> None:
        """Feed back the reward for the arm sampled this round."""
        st = self.state
        if st._pending is None or st._pending[0] != arm:
            raise OutOfOrderUpdateError("update without a matching sample")
        prob = st._pending[1]
        st._pending = None
        reward = float(np.clip(reward, 0.0, 1.0))
        st.losses[arm] += (1.0 - reward) / prob
        st.round += 1
