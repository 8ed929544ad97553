"""Backward recursions against closed forms and independent oracles."""
import numpy as np
import pytest

from layergame import LinearStagedDynamics, build_staged_game
from layergame.curvature import CurvatureEngine, PreconditionPolicy, StateCurvatureApprox
from layergame.game_core import (
    CostModel,
    CrossEntropyLoss,
    QuadraticLoss,
    feedback_forward,
    fne_backward,
    gr_backward,
    group_olne_backward,
    olne_backward,
)
from layergame.harness.presets import chain_graph, residual_micro_graph
from layergame.linalg import rel_err
from layergame.oracle import (
    dense_joint_solve,
    fd_gradient,
    lq_game_value,
    minimized_stage_quadratic,
)

from test_netgraph import sample_params_and_input


def exact_engine(damping=0.0, zero_feedback=False):
    return CurvatureEngine(PreconditionPolicy("exact", damping=damping),
                           StateCurvatureApprox("full"), zero_feedback=zero_feedback)


class BlockQuadratic(QuadraticLoss):
    """Half squared norm of one contiguous block of the state."""

    def __init__(self, lo, hi, dim):
        super().__init__()
        self.lo, self.hi, self.dim = lo, hi, dim

    def value(self, x):
        return 0.5 * np.sum(x[:, self.lo:self.hi] ** 2, axis=1)

    def grad(self, x):
        g = np.zeros_like(x)
        g[:, self.lo:self.hi] = x[:, self.lo:self.hi]
        return g

    def hess_mean(self, x):
        h = np.zeros((self.dim, self.dim))
        idx = np.arange(self.lo, self.hi)
        h[idx, idx] = 1.0
        return h


def loss_of(game, cost, x0):
    def fn(flat, keys, sizes):
        params, off = {}, 0
        for key, size in zip(keys, sizes):
            params[key] = flat[off:off + size]
            off += size
        traj = game.forward(params, x0, with_jacobians=False)
        return cost.total_loss(traj.states[-1], params)
    return fn


def flatten_params(params):
    keys = sorted(params, key=str)
    sizes = [params[k].size for k in keys]
    flat = np.concatenate([params[k] for k in keys])
    return keys, sizes, flat


class TestOlneBackward:
    def test_scalar_closed_form(self):
        # one linear layer theta*z with quadratic terminal loss
        dyn = LinearStagedDynamics([np.zeros((1, 1))], [[np.array([[2.0]])]])
        params = {(0, 0): np.array([3.0])}
        traj = dyn.forward(params, np.array([2.0]))
        # x1 = B theta = 2*3 = 6 with A = 0 absorbing the state
        cost = CostModel(QuadraticLoss())
        costates, grads = olne_backward(traj, cost)
        assert np.allclose(costates.p(1), [[6.0]])
        assert np.allclose(grads[(0, 0)], [12.0])

    def test_scalar_dense_layer(self):
        g = chain_graph(1, [1], activation=None)
        game = build_staged_game(g)
        params = {0: np.array([3.0, 0.0])}    # W=3, b=0
        traj = game.forward(params, np.array([2.0]))
        cost = CostModel(QuadraticLoss())
        costates, grads = olne_backward(traj, cost)
        assert np.allclose(costates.p(1), [[6.0]])       # p_1 = x_1
        assert np.allclose(grads[(0, 0)], [12.0, 6.0])   # dL/dW, dL/db

    def test_constant_terminal_gives_decay_only(self):
        g = chain_graph(2, [3, 2], activation=None)
        game = build_staged_game(g)
        rng = np.random.default_rng(0)
        params = game.init_params(rng)
        traj = game.forward(params, rng.normal(size=(2, 2)))
        cost = CostModel(QuadraticLoss(target=traj.states[-1].copy()),
                         weight_decay=0.7)
        costates, grads = olne_backward(traj, cost)
        assert np.allclose(costates.p(0), 0.0)
        for (t, n), grad in grads.items():
            key = game.param_key(t, n)
            assert np.allclose(grad, 0.7 * params[key])

    @pytest.mark.parametrize("maker,seed", [
        (lambda: residual_micro_graph(5, width=4, blocks=1, num_classes=3), 0),
        (lambda: chain_graph(4, [5, 4, 2]), 1),
    ])
    def test_gradient_matches_finite_differences(self, maker, seed):
        g = maker()
        game = build_staged_game(g)
        rng = np.random.default_rng(seed)
        params, x0 = sample_params_and_input(game, rng, batch=2)
        labels = rng.integers(0, g.output_dim, size=2)
        cost = CostModel(CrossEntropyLoss(labels), weight_decay=0.01)
        traj = game.forward(params, x0)
        _, grads = olne_backward(traj, cost)

        keys, sizes, flat = flatten_params(params)
        numeric = fd_gradient(lambda th: loss_of(game, cost, x0)(th, keys, sizes), flat)
        analytic = np.concatenate([
            grads[game.coords_of(key)] for key in keys])
        assert rel_err(np.where(np.abs(numeric) < 1e-8, 0, numeric),
                       np.where(np.abs(analytic) < 1e-8, 0, analytic)) <= 1e-6


class TestGroupOlne:
    def test_shared_loss_scales_costate_by_player_count(self):
        g = residual_micro_graph(4, width=3, blocks=1, num_classes=2)
        game = build_staged_game(g)
        rng = np.random.default_rng(1)
        params = game.init_params(rng)
        traj = game.forward(params, rng.normal(size=(3, 4)))
        cost = CostModel(CrossEntropyLoss(rng.integers(0, 2, size=3)))
        single, _ = olne_backward(traj, cost)
        joint, _ = group_olne_backward(traj, cost)
        for t in range(game.num_stages + 1):
            assert np.allclose(joint.p(t), game.num_players * single.p(t))

    def test_single_player_identical_to_olne(self):
        g = chain_graph(3, [4, 2], activation=None)
        game = build_staged_game(g)
        rng = np.random.default_rng(2)
        params = game.init_params(rng)
        traj = game.forward(params, rng.normal(size=(2, 3)))
        cost = CostModel(CrossEntropyLoss(np.array([0, 1])), weight_decay=0.1)
        _, g1 = olne_backward(traj, cost)
        _, g2 = group_olne_backward(traj, cost)
        for k in g1:
            assert np.array_equal(g1[k], g2[k])

    def test_group_gradient_matches_fd_of_summed_losses(self):
        g = residual_micro_graph(4, width=3, blocks=1, num_classes=2)
        game = build_staged_game(g)
        rng = np.random.default_rng(3)
        params, x0 = sample_params_and_input(game, rng, batch=2)
        labels = rng.integers(0, 2, size=2)
        cost = CostModel(CrossEntropyLoss(labels), weight_decay=0.05)
        traj = game.forward(params, x0)
        _, grads = group_olne_backward(traj, cost)
        n_players = game.num_players

        keys, sizes, flat = flatten_params(params)

        def summed_loss(th):
            pp, off = {}, 0
            for key, size in zip(keys, sizes):
                pp[key] = th[off:off + size]
                off += size
            tr = game.forward(pp, x0, with_jacobians=False)
            data = n_players * float(np.mean(cost.terminal.value(tr.states[-1])))
            return data + cost.stage_cost(pp)

        numeric = fd_gradient(summed_loss, flat)
        analytic = np.concatenate([grads[game.coords_of(k)] for k in keys])
        assert rel_err(np.where(np.abs(numeric) < 1e-8, 0, numeric),
                       np.where(np.abs(analytic) < 1e-8, 0, analytic)) <= 1e-6


class TestFneBackward:
    def test_scalar_lq_closed_form(self):
        # T=1, x1 = x + theta, terminal x^2/2, stage theta^2/2, expanded
        # at x0=1, theta=0
        dyn = LinearStagedDynamics([np.eye(1)], [[np.eye(1)]])
        params = dyn.zero_params()
        traj = dyn.forward(params, np.array([1.0]))
        cost = CostModel(QuadraticLoss(), weight_decay=1.0)
        gains, values = fne_backward(traj, cost, exact_engine())
        assert np.isclose(gains.k[(0, 0)][0], 0.5)
        assert np.isclose(gains.feedback[(0, 0)][0, 0], 0.5)
        assert np.isclose(values.vx[(0, 0)][0], 0.5)
        assert np.isclose(values.vxx[(0, 0)][0, 0], 0.5)

    def test_degenerate_curvature_reduces_to_objective_gradient(self):
        # identity parameter curvature and no cross term: open gain equals
        # the co-state gradient and the value gradient equals the co-state
        g = residual_micro_graph(5, width=4, blocks=2, num_classes=3)
        game = build_staged_game(g)
        rng = np.random.default_rng(4)
        params = game.init_params(rng)
        traj = game.forward(params, rng.normal(size=(4, 5)))
        cost = CostModel(CrossEntropyLoss(rng.integers(0, 3, size=4)),
                         weight_decay=0.02)
        costates, grads = olne_backward(traj, cost)
        engine = CurvatureEngine(PreconditionPolicy("identity"),
                                 zero_feedback=True)
        gains, values = fne_backward(traj, cost, engine)
        for tn, grad in grads.items():
            assert np.max(np.abs(gains.k[tn] - grad)) <= 1e-12
        for t in range(game.num_stages + 1):
            for n in range(game.num_players):
                assert np.max(np.abs(values.vx_samples[(t, n)] - costates.p(t, n))) <= 1e-12

    def test_gains_match_dense_lq_oracle(self):
        # random 3-stage linear game: one backward pass equals the exact
        # stagewise solve of the quadratic blocks at dx = 0
        rng = np.random.default_rng(5)
        dims = [4, 3, 3, 2]
        a = [rng.normal(size=(dims[t + 1], dims[t])) for t in range(3)]
        b = [[rng.normal(size=(dims[t + 1], 2))] for t in range(3)]
        dyn = LinearStagedDynamics(a, b)
        params = {k: rng.normal(size=2) for k in dyn.zero_params()}
        traj = dyn.forward(params, rng.normal(size=4))
        cost = CostModel(QuadraticLoss(target=rng.normal(size=2)), weight_decay=0.5)
        gains, values = fne_backward(traj, cost, exact_engine())
        # rebuild each stage's blocks from the value ahead and solve densely
        for t in reversed(range(3)):
            vx1 = values.vx_samples[(t + 1, 0)][0]
            vxx1 = values.vxx[(t + 1, 0)]
            p_vec = 0.5 * params[(t, 0)] + b[t][0].T @ vx1
            ptt = b[t][0].T @ vxx1 @ b[t][0] + 0.5 * np.eye(2)
            ptx = b[t][0].T @ vxx1 @ a[t]
            sol = dense_joint_solve([[ptt]], [p_vec], [ptx])
            assert rel_err(gains.k[(t, 0)], sol.gains[0]) <= 1e-8
            assert rel_err(gains.feedback[(t, 0)], sol.feedback[0]) <= 1e-8


class TestGrBackward:
    def scalar_two_player(self):
        a = [np.eye(1)]
        b = [[np.eye(1), np.eye(1)]]
        return LinearStagedDynamics(a, b)

    def test_scalar_cooperative_closed_form(self):
        dyn = self.scalar_two_player()
        params = dyn.zero_params()
        traj = dyn.forward(params, np.array([1.0]))
        cost = CostModel(QuadraticLoss(), weight_decay=1.0)
        gains, _ = gr_backward(traj, cost, exact_engine())
        assert np.isclose(gains.k[(0, 0)][0], 1.0 / 3.0)
        assert np.isclose(gains.k[(0, 1)][0], 1.0 / 3.0)
        # applying the update reaches the joint minimizer u = v = -1/3
        new_params, _ = feedback_forward(dyn, params, gains, traj, step=1.0)
        assert np.isclose(new_params[(0, 0)][0], -1.0 / 3.0)
        assert np.isclose(new_params[(0, 1)][0], -1.0 / 3.0)

    def test_zero_coupling_matches_fne_on_decoupled_game(self):
        # two independent branches, each player charged on its own branch:
        # the cross blocks vanish identically, so the cooperative gains
        # must equal the per-player feedback gains at every stage and the
        # joint value derivatives equal the summed per-player ones
        rng = np.random.default_rng(6)
        d = 2
        horizon = 3
        a, b = [], []
        for t in range(horizon):
            a1 = rng.normal(size=(d, d))
            a2 = rng.normal(size=(d, d))
            block = np.block([[a1, np.zeros((d, d))], [np.zeros((d, d)), a2]])
            b1 = np.vstack([rng.normal(size=(d, 2)), np.zeros((d, 2))])
            b2 = np.vstack([np.zeros((d, 2)), rng.normal(size=(d, 2))])
            a.append(block)
            b.append([b1, b2])
        dyn = LinearStagedDynamics(a, b)
        params = {k: rng.normal(size=2) * 0.3 for k in dyn.zero_params()}
        traj = dyn.forward(params, rng.normal(size=2 * d))
        cost = CostModel(QuadraticLoss(), weight_decay=0.4,
                         per_player_terminal=[BlockQuadratic(0, d, 2 * d),
                                              BlockQuadratic(d, 2 * d, 2 * d)])

        fne_gains, fne_vals = fne_backward(traj, cost, exact_engine())
        gr_gains, gr_vals = gr_backward(traj, cost, exact_engine())
        for tn in fne_gains.k:
            assert np.max(np.abs(fne_gains.k[tn] - gr_gains.k[tn])) <= 1e-10
            assert np.max(np.abs(fne_gains.feedback[tn] - gr_gains.feedback[tn])) <= 1e-10
        for t in range(horizon + 1):
            vsum = sum(fne_vals.vx[(t, n)] for n in range(2))
            assert np.max(np.abs(gr_vals.wx[t] - vsum)) <= 1e-10
            msum = sum(fne_vals.vxx[(t, n)] for n in range(2))
            assert np.max(np.abs(gr_vals.wxx[t] - msum)) <= 1e-10

    def test_zero_coupling_switch_on_merged_net_last_stage(self):
        # on a coupled stage the P_uv := 0 intervention reproduces the
        # per-player feedback gains of the final stage exactly
        rng = np.random.default_rng(60)
        d = 3
        a = [rng.normal(size=(d, d))]
        b = [[rng.normal(size=(d, 2)), rng.normal(size=(d, 3))]]
        dyn = LinearStagedDynamics(a, b)
        params = {k: rng.normal(size=dyn.param_size(k)) for k in dyn.zero_params()}
        traj = dyn.forward(params, rng.normal(size=d))
        cost = CostModel(QuadraticLoss(), weight_decay=0.5)
        fne_gains, _ = fne_backward(traj, cost, exact_engine())
        engine = CurvatureEngine(PreconditionPolicy("exact", damping=0.0),
                                 StateCurvatureApprox("full"), zero_coupling=True)
        gr_gains, _ = gr_backward(traj, cost, engine)
        for tn in fne_gains.k:
            assert np.max(np.abs(fne_gains.k[tn] - gr_gains.k[tn])) <= 1e-10
            assert np.max(np.abs(fne_gains.feedback[tn] - gr_gains.feedback[tn])) <= 1e-10

    def test_two_player_gains_match_dense_block_oracle(self):
        rng = np.random.default_rng(7)
        dims = [4, 3]
        a = [rng.normal(size=(dims[1], dims[0]))]
        b = [[rng.normal(size=(dims[1], 4)), rng.normal(size=(dims[1], 3))]]
        dyn = LinearStagedDynamics(a, b)
        params = {k: rng.normal(size=s) for k, s in
                  [((0, 0), 4), ((0, 1), 3)]}
        traj = dyn.forward(params, rng.normal(size=4))
        cost = CostModel(QuadraticLoss(target=rng.normal(size=dims[1])),
                         weight_decay=0.8)
        gains, _ = gr_backward(traj, cost, exact_engine())

        wxx = np.eye(dims[1])              # joint objective: task loss once
        wx = traj.states[1][0] - cost.terminal.target
        p_vecs, ptt, ptx = [], [[None] * 2 for _ in range(2)], []
        for i in range(2):
            p_vecs.append(0.8 * params[(0, i)] + b[0][i].T @ wx)
            ptx.append(b[0][i].T @ wxx @ a[0])
            for j in range(2):
                ptt[i][j] = b[0][i].T @ wxx @ b[0][j] \
                    + (0.8 * np.eye(p_vecs[i].size) if i == j else 0)
        sol = dense_joint_solve(ptt, p_vecs, ptx)
        for n in range(2):
            assert rel_err(gains.k[(0, n)], sol.gains[n]) <= 1e-8
            assert rel_err(gains.feedback[(0, n)], sol.feedback[n]) <= 1e-8

    def test_three_player_stage_matches_dense_block_oracle(self):
        rng = np.random.default_rng(8)
        d = 3
        a = [rng.normal(size=(d, d))]
        b = [[rng.normal(size=(d, 2)) for _ in range(3)]]
        dyn = LinearStagedDynamics(a, b)
        params = {k: rng.normal(size=2) for k in dyn.zero_params()}
        traj = dyn.forward(params, rng.normal(size=d))
        cost = CostModel(QuadraticLoss(), weight_decay=0.6)
        gains, _ = gr_backward(traj, cost, exact_engine())

        wxx = np.eye(d)
        wx = traj.states[1][0]
        p_vecs = [0.6 * params[(0, i)] + b[0][i].T @ wx for i in range(3)]
        ptt = [[b[0][i].T @ wxx @ b[0][j] + (0.6 * np.eye(2) if i == j else 0)
                for j in range(3)] for i in range(3)]
        ptx = [b[0][i].T @ wxx @ a[0] for i in range(3)]
        sol = dense_joint_solve(ptt, p_vecs, ptx)
        for n in range(3):
            assert rel_err(gains.k[(0, n)], sol.gains[n]) <= 1e-8


class TestLQExactness:
    @pytest.mark.parametrize("seed", range(6))
    def test_one_cooperative_pass_reaches_joint_optimum(self, seed):
        rng = np.random.default_rng(100 + seed)
        horizon = int(rng.integers(1, 5))
        players = int(rng.integers(1, 4))
        d = int(rng.integers(2, 7))
        a = [rng.normal(size=(d, d)) * 0.7 for _ in range(horizon)]
        b = [[rng.normal(size=(d, int(rng.integers(1, 4)))) for _ in range(players)]
             for _ in range(horizon)]
        c = [rng.normal(size=d) * 0.2 for _ in range(horizon)]
        coeffs = {(t, n): float(rng.uniform(0.3, 1.5))
                  for t in range(horizon) for n in range(players)}
        target = rng.normal(size=d)
        x0 = rng.normal(size=d)
        dyn = LinearStagedDynamics(a, b, c)
        params = {k: rng.normal(size=dyn.param_size(k)) * 0.5
                  for k in dyn.zero_params()}

        cost = CostModel(QuadraticLoss(target=target), per_player_decay={})
        cost.per_player_decay = dict(coeffs)
        traj = dyn.forward(params, x0)
        gains, _ = gr_backward(traj, cost, exact_engine())
        new_params, info = feedback_forward(dyn, params, gains, traj, step=1.0)
        assert not info.skipped

        oracle = lq_game_value(a, b, c, target, coeffs, x0)
        for k in params:
            assert rel_err(new_params[k], oracle.actions[k]) <= 1e-8
        final = dyn.forward(new_params, x0, with_jacobians=False)
        achieved = cost.total_loss(final.states[-1], new_params)
        assert rel_err(np.array([achieved]), np.array([oracle.value])) <= 1e-8


class TestValuePropagation:
    def test_value_derivatives_match_minimized_quadratic(self):
        # directional finite differences of the explicitly minimized stage
        # quadratic against the recursion's V_x / V_xx
        rng = np.random.default_rng(9)
        dims = [4, 4, 3]
        a = [rng.normal(size=(dims[t + 1], dims[t])) for t in range(2)]
        b = [[rng.normal(size=(dims[t + 1], 3))] for t in range(2)]
        dyn = LinearStagedDynamics(a, b)
        params = {k: rng.normal(size=3) * 0.4 for k in dyn.zero_params()}
        x0 = rng.normal(size=4)
        traj = dyn.forward(params, x0)
        cost = CostModel(QuadraticLoss(target=rng.normal(size=3)), weight_decay=0.9)
        gains, values = fne_backward(traj, cost, exact_engine())

        for t in range(2):
            vx1 = values.vx_samples[(t + 1, 0)][0]
            vxx1 = values.vxx[(t + 1, 0)]
            xt = traj.states[t][0]
            p_x = a[t].T @ vx1
            p_xx = a[t].T @ vxx1 @ a[t]
            p_vec = 0.9 * params[(t, 0)] + b[t][0].T @ vx1
            ptt = b[t][0].T @ vxx1 @ b[t][0] + 0.9 * np.eye(3)
            ptx = b[t][0].T @ vxx1 @ a[t]
            m = minimized_stage_quadratic(p_x, p_xx, [p_vec], [[ptt]], [ptx])
            # m is exactly quadratic, so a larger step carries no
            # truncation error and keeps roundoff far below tolerance
            h = 1e-3
            for _ in range(20):
                d = rng.normal(size=xt.size)
                d /= np.linalg.norm(d)
                g_num = (m(h * d) - m(-h * d)) / (2 * h)
                g_ana = float(values.vx[(t, 0)] @ d)
                assert rel_err(np.array([g_num]), np.array([g_ana])) <= 1e-5
                h_num = (m(h * d) - 2 * m(np.zeros_like(d)) + m(-h * d)) / h ** 2
                h_ana = float(d @ values.vxx[(t, 0)] @ d)
                assert rel_err(np.array([h_num]), np.array([h_ana])) <= 1e-5


class TestFeedbackForward:
    def test_zero_gains_leave_params(self):
        g = chain_graph(3, [4, 2], activation=None)
        game = build_staged_game(g)
        rng = np.random.default_rng(10)
        params = game.init_params(rng)
        traj = game.forward(params, rng.normal(size=(2, 3)))
        from layergame.game_core import GainSchedule
        gains = GainSchedule(mode="fne")
        for t in range(game.num_stages):
            for n in traj.param_players(t):
                key = game.param_key(t, n)
                gains.k[(t, n)] = np.zeros_like(params[key])
                gains.feedback[(t, n)] = np.zeros((params[key].size, game.state_dim(t)))
        new_params, info = feedback_forward(game, params, gains, traj, 0.5)
        for k in params:
            assert np.array_equal(new_params[k], params[k])
        assert not info.skipped

    def test_feedback_matches_hand_rolled_repropagation(self):
        rng = np.random.default_rng(11)
        a = [rng.normal(size=(3, 3)), rng.normal(size=(2, 3))]
        b = [[rng.normal(size=(3, 2))], [rng.normal(size=(2, 2))]]
        dyn = LinearStagedDynamics(a, b)
        params = {k: rng.normal(size=2) for k in dyn.zero_params()}
        x0 = rng.normal(size=3)
        traj = dyn.forward(params, x0)
        gains_k = {(t, 0): rng.normal(size=2) for t in range(2)}
        gains_K = {(t, 0): rng.normal(size=(2, dyn.state_dim(t))) for t in range(2)}
        from layergame.game_core import GainSchedule
        gains = GainSchedule(mode="fne", k=gains_k, feedback=gains_K)
        step = 0.3
        new_params, _ = feedback_forward(dyn, params, gains, traj, step)

        # independent sequential re-propagation
        x = x0.copy()
        expect = {}
        for t in range(2):
            dx = x - traj.states[t][0]
            upd = gains_k[(t, 0)] + gains_K[(t, 0)] @ dx
            expect[(t, 0)] = params[(t, 0)] - step * upd
            x = a[t] @ x + b[t][0] @ expect[(t, 0)]
        for k in expect:
            assert np.max(np.abs(new_params[k] - expect[k])) <= 1e-12

    def test_divergence_guard_halves_then_skips(self):
        g = chain_graph(2, [2, 2], activation=None)
        game = build_staged_game(g)
        rng = np.random.default_rng(12)
        params = game.init_params(rng)
        traj = game.forward(params, rng.normal(size=(1, 2)))
        from layergame.game_core import GainSchedule
        gains = GainSchedule(mode="fne")
        for t in range(game.num_stages):
            for n in traj.param_players(t):
                key = game.param_key(t, n)
                gains.k[(t, n)] = np.full(params[key].size, np.nan)
                gains.feedback[(t, n)] = np.zeros((params[key].size, game.state_dim(t)))
        new_params, info = feedback_forward(game, params, gains, traj, 1.0)
        assert info.skipped
        assert info.halvings == 5
        for k in params:
            assert np.array_equal(new_params[k], params[k])
