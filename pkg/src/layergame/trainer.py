"""Training loops over the staged game machinery.

One iteration is: forward with Jacobians, a backward solve picked by the
information mode (open-loop, feedback, cooperative), curvature-policy
solves, and the update pass.  Open-loop mode runs the co-state recursion
and applies theta <- theta - step * M^+ grad directly, which reproduces the
standard optimizers; feedback and cooperative modes add the second forward
pass that applies state feedback.

Fictitious-agent splitting turns a chain network into an N-player game by
dividing each layer's parameter vector into N summands whose sum is the
inference parameter at all times.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .bandit import Exp3PlusPlus
from .curvature import CurvatureEngine, PreconditionPolicy, StateCurvatureApprox
from .errors import ConfigError, NotAChainError
from .game_core import (
    CostModel,
    CrossEntropyLoss,
    GainSchedule,
    feedback_forward,
    fne_backward,
    gr_backward,
    olne_backward,
)
from .netgraph import (
    NetworkGraph,
    StageDynamics,
    StagedGame,
    Trajectory,
    build_staged_game,
    enumerate_alignments,
)

MODES = ("olne", "fne", "gr")
STRATEGIES = ("fixed", "random", "adaptive-bandit")


@dataclass(frozen=True)
class OptimizerConfig:
    """Everything one run needs besides the network and the data."""

    mode: str = "olne"
    precondition: PreconditionPolicy = PreconditionPolicy("identity")
    step: float = 0.1
    step_milestones: Tuple[int, ...] = ()
    step_decay: float = 0.1
    players_split: int = 1
    alignment_strategy: str = "fixed"
    seed: int = 0
    batch_size: int = 128
    max_iterations: int = 1000
    weight_decay: float = 0.0
    state_curvature: StateCurvatureApprox = StateCurvatureApprox("gauss-newton")
    zero_feedback: bool = False
    log_period: int = 10
    bandit_val_size: int = 512
    alignment_cap: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"optimizer.mode: unknown mode {self.mode!r}")
        if self.alignment_strategy not in STRATEGIES:
            raise ConfigError(
                f"optimizer.alignment_strategy: unknown strategy {self.alignment_strategy!r}")
        if self.players_split < 1:
            raise ConfigError("optimizer.players_split: must be >= 1")
        if self.batch_size < 1 or self.max_iterations < 0:
            raise ConfigError("optimizer.batch_size/max_iterations: must be positive")
        if self.precondition.kind == "cooperative-kfac" and self.mode != "gr":
            raise ConfigError("optimizer.precondition: cooperative-kfac requires gr mode")

    def step_at(self, iteration: int) -> float:
        drops = sum(1 for m in self.step_milestones if iteration >= m)
        return self.step * (self.step_decay ** drops)


@dataclass
class StepMetrics:
    iteration: int
    loss: float
    accuracy: float
    step_size: float
    mean_open_gain: float
    mean_feedback_norm: float
    halvings: int
    skipped: bool


@dataclass
class MetricRecord:
    """One logged row; written as CSV by the harness."""

    iteration: int
    train_loss: float
    train_acc: float
    val_acc: float
    step_size: float
    mean_open_gain: float
    mean_feedback_norm: float
    guard_count: int
    chosen_alignment: int

    FIELDS = ("iteration", "train_loss", "train_acc", "val_acc", "step_size",
              "mean_open_gain", "mean_feedback_norm", "guard_count",
              "chosen_alignment")

    def row(self) -> List:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class TrainState:
    """Mutable per-run state threaded through train_step."""

    dynamics: StageDynamics
    params: Dict
    engine: CurvatureEngine
    config: OptimizerConfig
    iteration: int = 0
    guard_count: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train_step(state: TrainState, batch_x: np.ndarray, batch_y: np.ndarray,
               cost: Optional[CostModel] = None) -> StepMetrics:
    """One optimization step on one mini-batch; mutates `state`."""
    cfg = state.config
    cost = cost or CostModel(CrossEntropyLoss(batch_y), weight_decay=cfg.weight_decay)
    lr = cfg.step_at(state.iteration)
    traj = state.dynamics.forward(state.params, batch_x, with_jacobians=True)
    logits = traj.states[-1]
    loss = cost.total_loss(logits, state.params)
    acc = _accuracy(logits, batch_y) if isinstance(cost.terminal, CrossEntropyLoss) else 0.0

    state.engine.begin_step()
    if cfg.mode == "olne":
        gains = _olne_gains(state, traj, cost)
    elif cfg.mode == "fne":
        gains, _ = fne_backward(traj, cost, state.engine, stage0_value=False)
    else:
        gains, _ = gr_backward(traj, cost, state.engine, stage0_value=False)

    new_params, info = feedback_forward(state.dynamics, state.params, gains, traj, lr)
    state.params = new_params
    state.guard_count += info.halvings + (1 if info.skipped else 0)
    state.iteration += 1
    return StepMetrics(iteration=state.iteration, loss=loss, accuracy=acc,
                       step_size=lr, mean_open_gain=gains.mean_open_gain(),
                       mean_feedback_norm=gains.mean_feedback_norm(),
                       halvings=info.halvings, skipped=info.skipped)


def _olne_gains(state: TrainState, traj: Trajectory, cost: CostModel) -> GainSchedule:
    """Preconditioned objective-gradient directions from the co-state pass."""
    costates, grads = olne_backward(traj, cost)
    gains = GainSchedule(mode="olne")
    dyn = state.dynamics
    for (t, n), grad in grads.items():
        key = dyn.param_key(t, n)
        pj = traj.jac_param(t, n)
        p_next = costates.stages[t + 1]
        zbar = getattr(pj, "zbar", None)
        g_local = p_next @ pj.lmap if hasattr(pj, "lmap") else None
        solver = state.engine.param_solver(key, grad, zbar=zbar, g_local=g_local,
                                           samples=pj.vjp(p_next))
        gains.k[(t, n)] = solver.solve(grad)
        gains.feedback[(t, n)] = None
    return gains


# ---------------------------------------------------------------------------
# Fictitious-agent splitting
# ---------------------------------------------------------------------------

class SplitChainDynamics(StageDynamics):
    """Chain dynamics whose layer parameters are split into N summands.

    The stage map evaluates the underlying layer at the sum of the player
    parts, so collapsing the parts by summation reproduces the unsplit
    network exactly; every player sees the same parameter Jacobian.
    """

    def __init__(self, base: StagedGame, n_split: int):
        if not base.graph.is_chain():
            raise NotAChainError("fictitious splitting requires a pure chain")
        self.base = base
        self.n_split = n_split
        self.num_stages = base.num_stages
        self.num_players = n_split

    def state_dim(self, t: int) -> int:
        return self.base.state_dim(t)

    def param_key(self, t: int, n: int):
        node = self.base.param_key(t, 0)
        if node is None or n >= self.n_split:
            return None
        return (node, n)

    def param_size(self, key) -> int:
        return self.base.param_size(key[0])

    def _merged(self, params: Dict) -> Dict:
        merged: Dict = {}
        for (node, _), theta in sorted(params.items()):
            merged[node] = merged[node] + theta if node in merged else theta.copy()
        return merged

    def collapse(self, params: Dict) -> Dict:
        """Inference parameters: the per-node sums over split players."""
        return self._merged(params)

    def eval_stage(self, t: int, x: np.ndarray, params: Dict):
        return self.base.eval_stage(t, x, self._merged(params))

    def linearize_stage(self, t: int, x: np.ndarray, params: Dict):
        x_next, sj, pjs = self.base.linearize_stage(t, x, self._merged(params))
        if pjs:
            shared = pjs[0]
            pjs = {n: shared for n in range(self.n_split)}
        return x_next, sj, pjs


def split_fictitious(game: StagedGame, params: Dict, n_split: int):
    """Divide each layer parameter into n equal summands.

    Returns (SplitChainDynamics, split parameter store).  The uniform
    split keeps the starting network function identical.
    """
    dyn = SplitChainDynamics(game, n_split)
    split = {(node, n): np.asarray(theta, dtype=np.float64) / n_split
             for node, theta in params.items() for n in range(n_split)}
    return dyn, split


# ---------------------------------------------------------------------------
# Experiment driver
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    final_train_loss: float
    final_train_acc: float
    final_val_acc: float
    final_test_acc: float
    wall_time_s: float
    guard_count: int
    iterations: int
    alignment_pulls: Dict[int, int]
    records: List[MetricRecord]
    strategy: str
    final_params: Dict


def evaluate(dynamics: StageDynamics, params: Dict, x: np.ndarray,
             y: np.ndarray, batch: int = 2048) -> Tuple[float, float]:
    """(mean cross-entropy, accuracy) without building Jacobians."""
    losses, hits, n = 0.0, 0.0, x.shape[0]
    for lo in range(0, n, batch):
        xb, yb = x[lo:lo + batch], y[lo:lo + batch]
        traj = dynamics.forward(params, xb, with_jacobians=False)
        logits = traj.states[-1]
        losses += float(np.sum(CrossEntropyLoss(yb).value(logits)))
        hits += float(np.sum(np.argmax(logits, axis=1) == yb))
    return losses / n, hits / n


def run_experiment(graph: NetworkGraph, config: OptimizerConfig, dataset,
                   record_sink=None) -> RunReport:
    """Run max_iterations of train_step over the dataset splits.

    `dataset` carries train/val/test arrays (see harness.datasets).  Under
    the adaptive-bandit strategy each iteration samples an alignment,
    reuses the cached staged game for it, and feeds validation accuracy
    back as the reward.  Emits a MetricRecord every log_period iterations
    through `record_sink` and returns the final report.
    """
    t_start = time.perf_counter()
    rng = np.random.default_rng(config.seed)

    alignments = enumerate_alignments(graph, cap=config.alignment_cap)
    if config.alignment_strategy == "adaptive-bandit" and len(alignments) < 2:
        raise ConfigError("optimizer.alignment_strategy: adaptive-bandit needs >= 2 alignments")
    games = {0: build_staged_game(graph, alignments[0])}

    def game_for(idx: int) -> StagedGame:
        if idx not in games:
            games[idx] = build_staged_game(graph, alignments[idx])
        return games[idx]

    base_game = game_for(0)
    params = base_game.init_params(rng)
    if config.players_split > 1:
        dynamics, params = split_fictitious(base_game, params, config.players_split)
        if config.alignment_strategy != "fixed":
            raise ConfigError("optimizer.players_split: splitting requires fixed alignment")
    else:
        dynamics = base_game

    engine = CurvatureEngine(config.precondition, config.state_curvature,
                             zero_feedback=config.zero_feedback)
    state = TrainState(dynamics=dynamics, params=params, engine=engine,
                       config=config, rng=rng)

    bandit = None
    if config.alignment_strategy == "adaptive-bandit":
        bandit = Exp3PlusPlus(len(alignments), seed=config.seed + 1)

    n_train = dataset.train_x.shape[0]
    val_x, val_y = dataset.val_x, dataset.val_y
    if config.bandit_val_size and val_x.shape[0] > config.bandit_val_size:
        val_x = val_x[: config.bandit_val_size]
        val_y = val_y[: config.bandit_val_size]

    pulls: Dict[int, int] = {}
    records: List[MetricRecord] = []
    chosen = 0
    last_val = float("nan")
    for it in range(config.max_iterations):
        if bandit is not None:
            chosen, _ = bandit.sample()
            state.dynamics = game_for(chosen)
        elif config.alignment_strategy == "random" and len(alignments) > 1:
            chosen = int(rng.integers(len(alignments)))
            state.dynamics = game_for(chosen)
        pulls[chosen] = pulls.get(chosen, 0) + 1

        idx = rng.integers(0, n_train, size=config.batch_size)
        metrics = train_step(state, dataset.train_x[idx], dataset.train_y[idx])

        if bandit is not None:
            _, val_acc = evaluate(state.dynamics, state.params, val_x, val_y)
            bandit.update(chosen, val_acc)
            last_val = val_acc
        if (it + 1) % config.log_period == 0 or it + 1 == config.max_iterations:
            if bandit is None:
                _, last_val = evaluate(state.dynamics, state.params, val_x, val_y)
            rec = MetricRecord(iteration=it + 1, train_loss=metrics.loss,
                               train_acc=metrics.accuracy, val_acc=last_val,
                               step_size=metrics.step_size,
                               mean_open_gain=metrics.mean_open_gain,
                               mean_feedback_norm=metrics.mean_feedback_norm,
                               guard_count=state.guard_count,
                               chosen_alignment=chosen)
            records.append(rec)
            if record_sink is not None:
                record_sink(rec)

    train_loss, train_acc = evaluate(state.dynamics, state.params,
                                     dataset.train_x, dataset.train_y)
    _, val_acc = evaluate(state.dynamics, state.params, dataset.val_x, dataset.val_y)
    _, test_acc = evaluate(state.dynamics, state.params, dataset.test_x, dataset.test_y)
    return RunReport(final_train_loss=train_loss, final_train_acc=train_acc,
                     final_val_acc=val_acc, final_test_acc=test_acc,
                     wall_time_s=time.perf_counter() - t_start,
                     guard_count=state.guard_count,
                     iterations=state.iteration, alignment_pulls=pulls,
                     records=records, strategy=config.alignment_strategy,
                     final_params=state.params)
