"""Network DAGs, stage alignment, shared stage dynamics and their derivatives.

A network is a DAG of layer nodes.  Converting it into stagewise shared
dynamics assigns every *compute* node (dense, activations, scale, split) a
(stage, player) coordinate; merge nodes (add, concat) are folded into the
state packing of the stage that first has all their operands, which is why
a residual block with two parallel two-layer paths yields two stages whose
state concatenates the branch states.  The stage state x_t carries every
tensor produced before t that is still needed at or after t.

Forward evaluation is batched: states are (batch, dim) float64 arrays.
Stage Jacobians are exposed through small operator classes so that the
backward recursions can run matrix-free where the dense layout would be
wasteful (a dense layer's parameter Jacobian is never materialized unless
a test asks for it).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    CyclicGraphError,
    DimensionMismatchError,
    ExplosionGuardError,
    InconsistentAlignmentError,
    NonFiniteStateError,
)

INPUT_ID = -1

COMPUTE_KINDS = ("dense", "relu", "tanh", "identity", "scale", "split")
MERGE_KINDS = ("add", "concat")
ACTIVATION_KINDS = ("relu", "tanh")


# ---------------------------------------------------------------------------
# Graph vocabulary
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One layer node.

    kind: dense | relu | tanh | identity | scale | split | add | concat.
    Parameter-free kinds have param_count 0; dense carries a weight matrix
    plus bias, flattened row-major as the (out_dim, in_dim + 1) block
    [W | b].  `scale` multiplies by the fixed constant `scale`; `split`
    selects the contiguous slice [offset, offset + out_dim) of its input.
    """

    kind: str
    in_dim: int
    out_dim: int
    scale: float = 1.0
    offset: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in COMPUTE_KINDS + MERGE_KINDS:
            raise DimensionMismatchError(f"unknown layer kind {self.kind!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise DimensionMismatchError("layer dimensions must be positive")
        if self.kind in ACTIVATION_KINDS + ("identity", "scale") and self.in_dim != self.out_dim:
            raise DimensionMismatchError(f"{self.kind} requires in_dim == out_dim")
        if self.kind == "add" and self.in_dim != self.out_dim:
            raise DimensionMismatchError("add requires in_dim == out_dim (per-input width)")
        if self.kind == "concat" and self.in_dim != self.out_dim:
            raise DimensionMismatchError("concat stores the summed width in both dims")
        if self.kind == "split":
            if self.offset < 0 or self.offset + self.out_dim > self.in_dim:
                raise DimensionMismatchError("split slice exceeds the input width")

    @property
    def param_count(self) -> int:
        return self.out_dim * (self.in_dim + 1) if self.kind == "dense" else 0


@dataclass(frozen=True)
class NetworkGraph:
    """DAG of LayerSpec nodes.

    Edges are (producer, consumer, slot) with producer == INPUT_ID for the
    network input.  Compute nodes take exactly one input (slot 0); merge
    nodes order their operands by slot.  The graph must be acyclic with the
    input as single source and a single sink node whose width equals
    output_dim.
    """

    nodes: Tuple[LayerSpec, ...]
    edges: Tuple[Tuple[int, int, int], ...]
    input_dim: int
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        self._validate()

    # -- structure queries --------------------------------------------------

    def inputs_of(self, node_id: int) -> List[int]:
        """Producer ids feeding node_id, ordered by slot."""
        found = sorted(((s, src) for src, dst, s in self.edges if dst == node_id))
        return [src for _, src in found]

    def consumers_of(self, tensor_id: int) -> List[int]:
        return sorted({dst for src, dst, _ in self.edges if src == tensor_id})

    def tensor_dim(self, tensor_id: int) -> int:
        return self.input_dim if tensor_id == INPUT_ID else self.nodes[tensor_id].out_dim

    @property
    def sink(self) -> int:
        produced = set(range(len(self.nodes)))
        consumed = {src for src, _, _ in self.edges if src != INPUT_ID}
        sinks = sorted(produced - consumed)
        return sinks[0]

    @property
    def compute_nodes(self) -> List[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind in COMPUTE_KINDS]

    @property
    def merge_nodes(self) -> List[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind in MERGE_KINDS]

    def is_chain(self) -> bool:
        """True when every node has one input and one consumer (no merges)."""
        if self.merge_nodes:
            return False
        return all(len(self.consumers_of(t)) == 1
                   for t in [INPUT_ID] + list(range(len(self.nodes) - 1)))

    def param_counts(self) -> Dict[int, int]:
        return {i: n.param_count for i, n in enumerate(self.nodes) if n.param_count}

    def topo_order(self) -> List[int]:
        indeg = {i: 0 for i in range(len(self.nodes))}
        for src, dst, _ in self.edges:
            if src != INPUT_ID:
                indeg[dst] += 1
        ready = sorted(i for i, d in indeg.items() if d == 0)
        order: List[int] = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for src, dst, _ in self.edges:
                if src == v:
                    indeg[dst] -= 1
                    if indeg[dst] == 0:
                        ready.append(dst)
            ready.sort()
        if len(order) != len(self.nodes):
            raise CyclicGraphError("network graph contains a cycle")
        return order

    # -- validation ----------------------------------------------------------

    def _validate(self):
        n = len(self.nodes)
        if n == 0:
            raise DimensionMismatchError("graph has no nodes")
        for src, dst, slot in self.edges:
            if not (0 <= dst < n) or not (INPUT_ID <= src < n) or src == dst:
                raise DimensionMismatchError(f"bad edge ({src}, {dst}, {slot})")
        self.topo_order()  # raises CyclicGraphError

        for i, spec in enumerate(self.nodes):
            slots = sorted(s for src, dst, s in self.edges if dst == i)
            if spec.kind in COMPUTE_KINDS:
                if slots != [0]:
                    raise DimensionMismatchError(
                        f"node {i} ({spec.kind}) needs exactly one input at slot 0")
            else:
                if len(slots) < 2 or slots != list(range(len(slots))):
                    raise DimensionMismatchError(
                        f"merge node {i} needs contiguous slots 0..k-1, got {slots}")
            dims = [self.tensor_dim(src)
                    for src in self.inputs_of(i)]
            if spec.kind == "add":
                if any(d != spec.in_dim for d in dims):
                    raise DimensionMismatchError(f"add node {i}: unequal input widths {dims}")
            elif spec.kind == "concat":
                if sum(dims) != spec.out_dim:
                    raise DimensionMismatchError(
                        f"concat node {i}: input widths {dims} do not sum to {spec.out_dim}")
            else:
                if dims[0] != spec.in_dim:
                    raise DimensionMismatchError(
                        f"node {i} expects width {spec.in_dim}, got {dims[0]}")

        produced = set(range(n))
        consumed = {src for src, _, _ in self.edges if src != INPUT_ID}
        sinks = produced - consumed
        if len(sinks) != 1:
            raise DimensionMismatchError(f"graph must have a single sink, found {sorted(sinks)}")
        if self.nodes[self.sink].out_dim != self.output_dim:
            raise DimensionMismatchError("sink width differs from output_dim")
        if not any(src == INPUT_ID for src, _, _ in self.edges):
            raise DimensionMismatchError("network input is never consumed")

        # reachability both ways
        fwd = {INPUT_ID: True}
        for v in self.topo_order():
            fwd[v] = any(fwd.get(src, False) for src in self.inputs_of(v))
        if not all(fwd.get(v, False) for v in range(n)):
            raise DimensionMismatchError("some nodes are unreachable from the input")
        back = {self.sink}
        for v in reversed(self.topo_order()):
            if any(c in back for c in self.consumers_of(v)):
                back.add(v)
        if back != set(range(n)):
            raise DimensionMismatchError("some nodes do not reach the sink")


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Alignment:
    """Assignment of compute nodes to (stage, player) coordinates.

    `stages` maps compute node id -> stage; players are derived per stage by
    node-id order, and N is the constant player count (max concurrency,
    padded elsewhere with dummy slots).
    """

    stages: Dict[int, int]
    num_stages: int

    def __post_init__(self):
        object.__setattr__(self, "stages", dict(self.stages))

    @property
    def players(self) -> Dict[int, Tuple[int, int]]:
        """node id -> (stage, player index)."""
        by_stage: Dict[int, List[int]] = {}
        for v, t in sorted(self.stages.items()):
            by_stage.setdefault(t, []).append(v)
        out = {}
        for t, vs in by_stage.items():
            for n, v in enumerate(sorted(vs)):
                out[v] = (t, n)
        return out

    @property
    def num_players(self) -> int:
        counts: Dict[int, int] = {}
        for t in self.stages.values():
            counts[t] = counts.get(t, 0) + 1
        return max(counts.values())

    def key(self) -> Tuple[int, ...]:
        return tuple(self.stages[v] for v in sorted(self.stages))


def _tensor_avail(graph: NetworkGraph, stages: Dict[int, int]) -> Dict[int, int]:
    """Stage from which each tensor (input / node output) can be read."""
    avail = {INPUT_ID: 0}
    for v in graph.topo_order():
        ins = [avail[s] for s in graph.inputs_of(v)]
        if graph.nodes[v].kind in MERGE_KINDS:
            avail[v] = max(ins)
        else:
            avail[v] = stages[v] + 1
    return avail


def validate_alignment(graph: NetworkGraph, alignment: Alignment) -> None:
    """Raise InconsistentAlignmentError when a node runs before its inputs."""
    stages = alignment.stages
    if sorted(stages) != graph.compute_nodes:
        raise InconsistentAlignmentError("alignment must cover exactly the compute nodes")
    for v, t in stages.items():
        if not (0 <= t < alignment.num_stages):
            raise InconsistentAlignmentError(f"node {v} staged at {t} outside [0, T)")
    avail = _tensor_avail(graph, stages)
    for v in graph.compute_nodes:
        need = max(avail[s] for s in graph.inputs_of(v))
        if stages[v] < need:
            raise InconsistentAlignmentError(
                f"node {v} at stage {stages[v]} consumes a tensor available at {need}")


def _stage_bounds(graph: NetworkGraph) -> Tuple[Dict[int, int], Dict[int, int], int]:
    """ASAP/ALAP stage bounds for compute nodes; T is the longest path."""
    earliest: Dict[int, int] = {}
    avail = {INPUT_ID: 0}
    for v in graph.topo_order():
        ins = [avail[s] for s in graph.inputs_of(v)]
        if graph.nodes[v].kind in MERGE_KINDS:
            avail[v] = max(ins)
        else:
            earliest[v] = max(ins)
            avail[v] = earliest[v] + 1
    num_stages = max(earliest.values()) + 1

    latest: Dict[int, int] = {}
    need = {graph.sink: num_stages}
    for v in reversed(graph.topo_order()):
        cons = graph.consumers_of(v)
        req = [need[c] for c in cons] + ([num_stages] if v == graph.sink else [])
        here = min(req)
        if graph.nodes[v].kind in MERGE_KINDS:
            need[v] = here
        else:
            latest[v] = here - 1
            need[v] = latest[v]
    return earliest, latest, num_stages


def canonical_alignment(graph: NetworkGraph) -> Alignment:
    """Every node at its earliest stage (longest path from the input)."""
    earliest, _, num_stages = _stage_bounds(graph)
    return Alignment(stages=earliest, num_stages=num_stages)


def enumerate_alignments(graph: NetworkGraph, cap: int = 64) -> List[Alignment]:
    """All valid stagings with T fixed to the longest path length.

    Nodes on the critical path are pinned; slack nodes range over their
    ASAP..ALAP window subject to precedence.  Results are ordered
    lexicographically by the per-node stage tuple (node-id order), so the
    canonical all-earliest alignment comes first.  Raises
    ExplosionGuardError when more than `cap` alignments exist.
    """
    earliest, latest, num_stages = _stage_bounds(graph)
    order = [v for v in graph.topo_order() if graph.nodes[v].kind in COMPUTE_KINDS]
    found: List[Dict[int, int]] = []

    def avail_partial(stages: Dict[int, int], tensor: int) -> Optional[int]:
        if tensor == INPUT_ID:
            return 0
        if graph.nodes[tensor].kind in MERGE_KINDS:
            vals = [avail_partial(stages, s) for s in graph.inputs_of(tensor)]
            return None if any(v is None for v in vals) else max(vals)
        return stages[tensor] + 1 if tensor in stages else None

    def assign(idx: int, stages: Dict[int, int]):
        if len(found) > cap:
            return
        if idx == len(order):
            found.append(dict(stages))
            return
        v = order[idx]
        lo = earliest[v]
        for s in graph.inputs_of(v):
            src_avail = avail_partial(stages, s)
            if src_avail is not None:
                lo = max(lo, src_avail)
        for t in range(lo, latest[v] + 1):
            stages[v] = t
            assign(idx + 1, stages)
            del stages[v]

    assign(0, {})
    if len(found) > cap:
        raise ExplosionGuardError(f"more than {cap} alignments for this graph")
    alignments = [Alignment(stages=st, num_stages=num_stages) for st in found]
    alignments.sort(key=lambda a: a.key())
    for a in alignments:
        validate_alignment(graph, a)
    return alignments


# ---------------------------------------------------------------------------
# Jacobian operators
# ---------------------------------------------------------------------------

class StateJac:
    """Stage Jacobian d x_{t+1} / d x_t, shared or per-sample."""

    def __init__(self, mat: np.ndarray, shared: bool):
        self.mat = mat
        self.shared = shared

    def vjp(self, v: np.ndarray) -> np.ndarray:
        """(batch, d_out) -> (batch, d_in): rows v^T J per sample."""
        if self.shared:
            return v @ self.mat
        return np.einsum("bij,bi->bj", self.mat, v)

    def jvp(self, w: np.ndarray) -> np.ndarray:
        if self.shared:
            return w @ self.mat.T
        return np.einsum("bij,bj->bi", self.mat, w)

    def pull(self, s: np.ndarray) -> np.ndarray:
        """mean_i J_i^T S J_i."""
        if self.shared:
            return self.mat.T @ s @ self.mat
        b = self.mat.shape[0]
        return np.einsum("bki,kl,blj->ij", self.mat, s, self.mat, optimize=True) / b

    def dense(self, batch: int) -> np.ndarray:
        if self.shared:
            return np.broadcast_to(self.mat, (batch,) + self.mat.shape)
        return self.mat


class DenseLayerParamJac:
    """Parameter Jacobian of a dense layer inside a stage map.

    The layer output enters x_{t+1} through the fixed linear map `lmap`
    (selection plus any fused merges), and the local Jacobian against the
    flattened [W | b] block is the Kronecker structure with the homogeneous
    input zbar = [z, 1].  All products are taken without materializing the
    (batch, d_out, p) tensor.
    """

    def __init__(self, lmap: np.ndarray, zbar: np.ndarray, out_dim: int):
        self.lmap = lmap            # (d_next, out_dim), shared
        self.zbar = zbar            # (batch, in_dim + 1)
        self.out_dim = out_dim
        self.in_dim1 = zbar.shape[1]
        self.size = out_dim * self.in_dim1

    def vjp(self, v: np.ndarray) -> np.ndarray:
        """(batch, d_next) -> (batch, p) per-sample F_theta^T v."""
        u = v @ self.lmap
        return np.einsum("bo,bj->boj", u, self.zbar).reshape(v.shape[0], self.size)

    def vjp_mean(self, v: np.ndarray) -> np.ndarray:
        u = v @ self.lmap
        return (np.einsum("bo,bj->oj", u, self.zbar) / v.shape[0]).reshape(self.size)

    def jvp(self, uvec: np.ndarray) -> np.ndarray:
        """(p,) -> (batch, d_next): F_theta @ uvec per sample."""
        umat = uvec.reshape(self.out_dim, self.in_dim1)
        return (self.zbar @ umat.T) @ self.lmap.T

    def quad_mean(self, s: np.ndarray) -> np.ndarray:
        """mean_i F_theta^T S F_theta, exact: kron(L^T S L, E[zbar zbar^T])."""
        m = self.lmap.T @ s @ self.lmap
        a = self.zbar.T @ self.zbar / self.zbar.shape[0]
        return np.kron(m, a)

    def cross_state_mean(self, s: np.ndarray, fx: StateJac) -> np.ndarray:
        """mean_i F_theta^T S F_x  ->  (p, d_prev)."""
        r = self.lmap.T @ s
        if fx.shared:
            r2 = r @ fx.mat
            out = np.einsum("j,oc->ojc", self.zbar.mean(axis=0), r2)
        else:
            r2 = np.einsum("ok,bkc->boc", r, fx.mat)
            out = np.einsum("boc,bj->ojc", r2, self.zbar) / self.zbar.shape[0]
        return out.reshape(self.size, -1)

    def cross_param_mean(self, s: np.ndarray, other: "DenseLayerParamJac") -> np.ndarray:
        """mean_i F_theta1^T S F_theta2  ->  (p1, p2)."""
        m = self.lmap.T @ s @ other.lmap
        c = self.zbar.T @ other.zbar / self.zbar.shape[0]
        return _kron_mixed(m, c, self.in_dim1, other.in_dim1)

    def dense(self, batch: int) -> np.ndarray:
        out = np.einsum("do,bj->bdoj", self.lmap, self.zbar)
        return out.reshape(batch, self.lmap.shape[0], self.size)


class MatrixParamJac:
    """Constant parameter Jacobian (linear dynamics with action matrix B)."""

    def __init__(self, bmat: np.ndarray):
        self.bmat = bmat
        self.size = bmat.shape[1]

    def vjp(self, v: np.ndarray) -> np.ndarray:
        return v @ self.bmat

    def vjp_mean(self, v: np.ndarray) -> np.ndarray:
        return (v @ self.bmat).mean(axis=0)

    def jvp(self, uvec: np.ndarray) -> np.ndarray:
        # 1-D result; broadcasts against (batch, d) states.
        return self.bmat @ uvec

    def quad_mean(self, s: np.ndarray) -> np.ndarray:
        return self.bmat.T @ s @ self.bmat

    def cross_state_mean(self, s: np.ndarray, fx: StateJac) -> np.ndarray:
        if fx.shared:
            return self.bmat.T @ s @ fx.mat
        return np.einsum("ko,kl,blj->oj", self.bmat, s, fx.mat, optimize=True) / fx.mat.shape[0]

    def cross_param_mean(self, s: np.ndarray, other) -> np.ndarray:
        if isinstance(other, MatrixParamJac):
            return self.bmat.T @ s @ other.bmat
        raise DimensionMismatchError("mixed parameter Jacobian kinds in one stage")

    def dense(self, batch: int) -> np.ndarray:
        return np.broadcast_to(self.bmat, (batch,) + self.bmat.shape)


def _kron_mixed(m: np.ndarray, c: np.ndarray, j1: int, j2: int) -> np.ndarray:
    """Block matrix with blocks m[o1,o2] * c, matching row-major [W|b] layout."""
    out = np.einsum("ab,jk->ajbk", m, c)
    return out.reshape(m.shape[0] * j1, m.shape[1] * j2)


ParamJac = Union[DenseLayerParamJac, MatrixParamJac]


# ---------------------------------------------------------------------------
# Staged game construction
# ---------------------------------------------------------------------------

@dataclass
class _Source:
    """One entry of the packing that builds x_{t+1}."""

    kind: str                      # carry | fresh | add | concat
    size: int
    offset: int = 0                # carry: column offset into x_t
    slot: int = -1                 # fresh: producing op slot
    operands: Tuple["_Source", ...] = ()


@dataclass
class StagedNodeOp:
    node_id: int
    spec: LayerSpec
    in_offset: int
    in_size: int


@dataclass
class StageSpec:
    index: int
    in_dim: int
    out_dim: int
    ops: List[Optional[StagedNodeOp]]      # length N, None = dummy player
    pack: List[_Source]


class StageDynamics:
    """Common protocol for stagewise shared dynamics.

    Subclasses provide the stage evaluation and linearization; the forward
    loop, finiteness checks and Trajectory assembly live here.
    """

    num_stages: int
    num_players: int

    def state_dim(self, t: int) -> int:
        raise NotImplementedError

    def param_key(self, t: int, n: int):
        """Hashable parameter-store key for player (t, n), or None if dummy."""
        raise NotImplementedError

    def param_players(self, t: int) -> List[int]:
        """Player indices at stage t that own parameters."""
        return [n for n in range(self.num_players) if self.param_key(t, n) is not None]

    def param_size(self, key) -> int:
        raise NotImplementedError

    def eval_stage(self, t: int, x: np.ndarray, params: Dict) -> np.ndarray:
        raise NotImplementedError

    def linearize_stage(self, t: int, x: np.ndarray, params: Dict):
        """-> (x_next, StateJac, {player_n: ParamJac})."""
        raise NotImplementedError

    def forward(self, params: Dict, x0: np.ndarray, with_jacobians: bool = True) -> "Trajectory":
        x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        if x.shape[1] != self.state_dim(0):
            raise DimensionMismatchError(
                f"input width {x.shape[1]} != state dim {self.state_dim(0)}")
        states = [x]
        sjacs: List[Optional[StateJac]] = []
        pjacs: List[Dict[int, ParamJac]] = []
        for t in range(self.num_stages):
            if with_jacobians:
                x, sj, pj = self.linearize_stage(t, x, params)
            else:
                x, sj, pj = self.eval_stage(t, x, params), None, {}
            if not np.all(np.isfinite(x)):
                raise NonFiniteStateError(f"non-finite state after stage {t}")
            states.append(x)
            sjacs.append(sj)
            pjacs.append(pj)
        return Trajectory(self, states, sjacs, pjacs,
                          {k: np.array(v) for k, v in params.items()})


@dataclass
class Trajectory:
    """States, stage Jacobians and activation caches from one forward pass.

    Re-running `dynamics.forward` from states[0] with the stored parameters
    reproduces the states exactly.  Jacobians are evaluated at the stored
    trajectory; `jac_state(t)` / `jac_param(t, n)` return operator objects
    with `.dense(batch)` materializers for tests.
    """

    dynamics: StageDynamics
    states: List[np.ndarray]
    _state_jacs: List[Optional[StateJac]]
    _param_jacs: List[Dict[int, ParamJac]]
    params: Dict

    @property
    def batch(self) -> int:
        return self.states[0].shape[0]

    @property
    def num_stages(self) -> int:
        return self.dynamics.num_stages

    @property
    def has_jacobians(self) -> bool:
        return self._state_jacs[0] is not None if self._state_jacs else False

    def jac_state(self, t: int) -> StateJac:
        sj = self._state_jacs[t]
        if sj is None:
            raise DimensionMismatchError("trajectory was built with with_jacobians=False")
        return sj

    def jac_param(self, t: int, n: int) -> ParamJac:
        if n not in self._param_jacs[t]:
            raise DimensionMismatchError(f"player ({t},{n}) has no parameters")
        return self._param_jacs[t][n]

    def param_players(self, t: int) -> List[int]:
        return sorted(self._param_jacs[t])


class StagedGame(StageDynamics):
    """A NetworkGraph compiled against an Alignment.

    Composing the stage maps reproduces the direct DAG forward pass exactly
    (identical arithmetic per layer); dummy players fill stage slots so the
    player count stays constant.  Immutable after construction.
    """

    def __init__(self, graph: NetworkGraph, alignment: Alignment):
        validate_alignment(graph, alignment)
        self.graph = graph
        self.alignment = alignment
        self.num_stages = alignment.num_stages
        self.num_players = alignment.num_players
        self._build()

    # -- construction --------------------------------------------------------

    def _build(self):
        g, stages = self.graph, self.alignment.stages
        avail = _tensor_avail(g, stages)
        last: Dict[int, int] = {}

        def use(tensor: int, at: int):
            last[tensor] = max(last.get(tensor, -1), at)

        for v in range(len(g.nodes)):
            spec = g.nodes[v]
            at = stages[v] if spec.kind in COMPUTE_KINDS else avail[v] - 1
            for s in g.inputs_of(v):
                use(s, at)
        use(g.sink, self.num_stages)

        layouts: List[List[Tuple[int, int, int]]] = []   # per t: (tensor, offset, size)
        for t in range(self.num_stages + 1):
            live = [(avail[tid], tid) for tid in [INPUT_ID] + list(range(len(g.nodes)))
                    if avail[tid] <= t <= last.get(tid, -1)]
            layout, off = [], 0
            for _, tid in sorted(live):
                size = g.tensor_dim(tid)
                layout.append((tid, off, size))
                off += size
            layouts.append(layout)
        self._layouts = layouts
        self._dims = [sum(s for _, _, s in lay) for lay in layouts]

        def locate(t: int, tensor: int) -> Tuple[int, int]:
            for tid, off, size in layouts[t]:
                if tid == tensor:
                    return off, size
            raise InconsistentAlignmentError(f"tensor {tensor} not live at stage {t}")

        self.stage_specs: List[StageSpec] = []
        for t in range(self.num_stages):
            nodes_here = sorted(v for v, s in stages.items() if s == t)
            slot_of = {v: i for i, v in enumerate(nodes_here)}
            ops: List[Optional[StagedNodeOp]] = []
            for v in nodes_here:
                off, size = locate(t, g.inputs_of(v)[0])
                ops.append(StagedNodeOp(v, g.nodes[v], off, size))
            ops.extend([None] * (self.num_players - len(ops)))

            def build_source(tid: int) -> _Source:
                if avail[tid] <= t:
                    off, size = locate(t, tid)
                    return _Source("carry", size, offset=off)
                if tid in slot_of:
                    return _Source("fresh", g.nodes[tid].out_dim, slot=slot_of[tid])
                spec = g.nodes[tid]
                if spec.kind not in MERGE_KINDS or avail[tid] != t + 1:
                    raise InconsistentAlignmentError(f"cannot pack tensor {tid} at stage {t}")
                return _Source(spec.kind, spec.out_dim,
                               operands=tuple(build_source(s) for s in g.inputs_of(tid)))

            pack = [build_source(tid) for tid, _, _ in layouts[t + 1]]
            self.stage_specs.append(StageSpec(t, self._dims[t], self._dims[t + 1], ops, pack))

        self._node_coords = self.alignment.players
        self._coord_node = {tn: v for v, tn in self._node_coords.items()}

    # -- StageDynamics interface ----------------------------------------------

    def state_dim(self, t: int) -> int:
        return self._dims[t]

    def param_key(self, t: int, n: int):
        v = self._coord_node.get((t, n))
        if v is None or self.graph.nodes[v].param_count == 0:
            return None
        return v

    def param_size(self, key) -> int:
        return self.graph.nodes[key].param_count

    def param_shapes(self) -> Dict[int, int]:
        return self.graph.param_counts()

    def init_params(self, rng: np.random.Generator) -> Dict[int, np.ndarray]:
        """He-style fan-in uniform weights, zero bias, per dense node."""
        params = {}
        for v, spec in enumerate(self.graph.nodes):
            if spec.param_count:
                bound = np.sqrt(6.0 / spec.in_dim)
                w = rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim))
                mat = np.concatenate([w, np.zeros((spec.out_dim, 1))], axis=1)
                params[v] = mat.reshape(-1)
        return params

    def node_of(self, t: int, n: int) -> Optional[int]:
        return self._coord_node.get((t, n))

    def coords_of(self, node_id: int) -> Tuple[int, int]:
        return self._node_coords[node_id]

    # -- evaluation ------------------------------------------------------------

    def eval_stage(self, t: int, x: np.ndarray, params: Dict) -> np.ndarray:
        x_next, _, _ = self._step(t, x, params, want_jac=False)
        return x_next

    def linearize_stage(self, t: int, x: np.ndarray, params: Dict):
        return self._step(t, x, params, want_jac=True)

    def _step(self, t: int, x: np.ndarray, params: Dict, want_jac: bool):
        spec = self.stage_specs[t]
        batch = x.shape[0]
        outs: List[np.ndarray] = []
        zs: List[Optional[np.ndarray]] = []
        for op in spec.ops:
            if op is None:
                outs.append(None)
                zs.append(None)
                continue
            z = x[:, op.in_offset:op.in_offset + op.in_size]
            outs.append(_apply_layer(op.spec, params.get(op.node_id), z))
            zs.append(z)

        def eval_source(src: _Source) -> np.ndarray:
            if src.kind == "carry":
                return x[:, src.offset:src.offset + src.size]
            if src.kind == "fresh":
                return outs[src.slot]
            parts = [eval_source(o) for o in src.operands]
            if src.kind == "add":
                return reduce(np.add, parts)
            return np.concatenate(parts, axis=1)

        x_next = np.concatenate([eval_source(s) for s in spec.pack], axis=1)
        if not want_jac:
            return x_next, None, {}

        per_sample = any(op is not None and op.spec.kind in ACTIVATION_KINDS
                         for op in spec.ops)
        d1, d2 = spec.in_dim, spec.out_dim
        jac = np.zeros((batch, d2, d1)) if per_sample else np.zeros((d2, d1))
        lmaps: Dict[int, np.ndarray] = {i: np.zeros((d2, op.spec.out_dim))
                                        for i, op in enumerate(spec.ops)
                                        if op is not None and op.spec.param_count}

        def emit(src: _Source, row: int):
            if src.kind == "carry":
                idx = np.arange(src.size)
                jac[..., row + idx, src.offset + idx] += 1.0
                return
            if src.kind == "fresh":
                op, z = spec.ops[src.slot], zs[src.slot]
                _emit_local(jac, lmaps.get(src.slot), op, z, params.get(op.node_id), row)
                return
            sub = row
            for o in src.operands:
                emit(o, sub)
                if src.kind == "concat":
                    sub += o.size

        row = 0
        for src in spec.pack:
            emit(src, row)
            row += src.size

        pjacs: Dict[int, ParamJac] = {}
        for slot, op in enumerate(spec.ops):
            if op is not None and op.spec.param_count:
                zbar = np.concatenate([zs[slot], np.ones((batch, 1))], axis=1)
                pjacs[slot] = DenseLayerParamJac(lmaps[slot], zbar, op.spec.out_dim)
        return x_next, StateJac(jac, shared=not per_sample), pjacs


def _apply_layer(spec: LayerSpec, theta: Optional[np.ndarray], z: np.ndarray) -> np.ndarray:
    if spec.kind == "dense":
        mat = theta.reshape(spec.out_dim, spec.in_dim + 1)
        return z @ mat[:, :-1].T + mat[:, -1]
    if spec.kind == "relu":
        return np.maximum(z, 0.0)
    if spec.kind == "tanh":
        return np.tanh(z)
    if spec.kind == "identity":
        return z
    if spec.kind == "scale":
        return spec.scale * z
    if spec.kind == "split":
        return z[:, spec.offset:spec.offset + spec.out_dim]
    raise DimensionMismatchError(f"cannot evaluate merge kind {spec.kind} as a staged op")


def _emit_local(jac, lmap, op: StagedNodeOp, z, theta, row: int):
    """Add one node's input Jacobian into the stage Jacobian at `row`,
    and mark the output-to-state map for parameter Jacobians."""
    spec, col = op.spec, op.in_offset
    if lmap is not None:
        lmap[row:row + spec.out_dim, :] += np.eye(spec.out_dim)
    if spec.kind == "dense":
        w = theta.reshape(spec.out_dim, spec.in_dim + 1)[:, :-1]
        jac[..., row:row + spec.out_dim, col:col + spec.in_dim] += w
    elif spec.kind in ACTIVATION_KINDS:
        d = (z > 0).astype(np.float64) if spec.kind == "relu" else 1.0 - np.tanh(z) ** 2
        idx = np.arange(spec.out_dim)
        jac[:, row + idx, col + idx] += d
    elif spec.kind == "identity":
        idx = np.arange(spec.out_dim)
        jac[..., row + idx, col + idx] += 1.0
    elif spec.kind == "scale":
        idx = np.arange(spec.out_dim)
        jac[..., row + idx, col + idx] += spec.scale
    elif spec.kind == "split":
        idx = np.arange(spec.out_dim)
        jac[..., row + idx, col + spec.offset + idx] += 1.0


# ---------------------------------------------------------------------------
# Reference DAG evaluation and public builders
# ---------------------------------------------------------------------------

def dag_forward(graph: NetworkGraph, params: Dict[int, np.ndarray],
                x0: np.ndarray) -> np.ndarray:
    """Direct topological evaluation of the DAG, bypassing any staging."""
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    values: Dict[int, np.ndarray] = {INPUT_ID: x}
    for v in graph.topo_order():
        spec = graph.nodes[v]
        ins = [values[s] for s in graph.inputs_of(v)]
        if spec.kind == "add":
            values[v] = reduce(np.add, ins)
        elif spec.kind == "concat":
            values[v] = np.concatenate(ins, axis=1)
        else:
            values[v] = _apply_layer(spec, params.get(v), ins[0])
    return values[graph.sink]


def build_staged_game(graph: NetworkGraph, alignment: Optional[Alignment] = None) -> StagedGame:
    """Compile the graph against `alignment` (canonical when omitted)."""
    if alignment is None:
        alignment = canonical_alignment(graph)
    return StagedGame(graph, alignment)


def forward(game: StagedGame, params: Dict, x0: np.ndarray,
            with_jacobians: bool = True) -> Trajectory:
    """Propagate x0 through the staged dynamics; see StageDynamics.forward."""
    return game.forward(params, x0, with_jacobians)


class LinearStagedDynamics(StageDynamics):
    """x_{t+1} = A_t x_t + sum_n B_{t,n} theta_{t,n} + c_t.

    The action matrices do not depend on the state, so the quadratic game
    model is exact; used by the LQ exactness suite.  Parameters are keyed
    by (t, n).
    """

    def __init__(self, a_mats: Sequence[np.ndarray],
                 b_mats: Sequence[Sequence[np.ndarray]],
                 c_vecs: Optional[Sequence[np.ndarray]] = None):
        self.a_mats = [np.asarray(a, dtype=np.float64) for a in a_mats]
        self.b_mats = [[np.asarray(b, dtype=np.float64) for b in bs] for bs in b_mats]
        self.c_vecs = ([np.zeros(a.shape[0]) for a in self.a_mats]
                       if c_vecs is None else [np.asarray(c) for c in c_vecs])
        self.num_stages = len(self.a_mats)
        self.num_players = max(len(bs) for bs in self.b_mats)

    def state_dim(self, t: int) -> int:
        return self.a_mats[t].shape[1] if t < self.num_stages else self.a_mats[-1].shape[0]

    def param_key(self, t: int, n: int):
        return (t, n) if n < len(self.b_mats[t]) else None

    def param_size(self, key) -> int:
        t, n = key
        return self.b_mats[t][n].shape[1]

    def zero_params(self) -> Dict[Tuple[int, int], np.ndarray]:
        return {(t, n): np.zeros(b.shape[1])
                for t, bs in enumerate(self.b_mats) for n, b in enumerate(bs)}

    def eval_stage(self, t: int, x: np.ndarray, params: Dict) -> np.ndarray:
        out = x @ self.a_mats[t].T + self.c_vecs[t]
        for n, b in enumerate(self.b_mats[t]):
            out = out + params[(t, n)] @ b.T
        return out

    def linearize_stage(self, t: int, x: np.ndarray, params: Dict):
        x_next = self.eval_stage(t, x, params)
        sj = StateJac(self.a_mats[t], shared=True)
        pj = {n: MatrixParamJac(b) for n, b in enumerate(self.b_mats[t])}
        return x_next, sj, pj
