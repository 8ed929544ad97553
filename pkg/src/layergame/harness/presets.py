"""Named network presets used by the experiment configs and tests."""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

from ..netgraph import INPUT_ID, LayerSpec, NetworkGraph


class _Builder:
    """Incremental graph assembly; tensors are referenced by id."""

    def __init__(self, input_dim: int):
        self.input_dim = input_dim
        self.nodes: List[LayerSpec] = []
        self.edges: List[Tuple[int, int, int]] = []

    def dim(self, tensor: int) -> int:
        return self.input_dim if tensor == INPUT_ID else self.nodes[tensor].out_dim

    def add_node(self, spec: LayerSpec, inputs: Sequence[int]) -> int:
        nid = len(self.nodes)
        self.nodes.append(spec)
        for slot, src in enumerate(inputs):
            self.edges.append((src, nid, slot))
        return nid

    def dense(self, src: int, out_dim: int, name: str = "") -> int:
        return self.add_node(LayerSpec("dense", self.dim(src), out_dim, name=name), [src])

    def act(self, src: int, kind: str = "relu") -> int:
        d = self.dim(src)
        return self.add_node(LayerSpec(kind, d, d), [src])

    def identity(self, src: int) -> int:
        d = self.dim(src)
        return self.add_node(LayerSpec("identity", d, d), [src])

    def add(self, srcs: Sequence[int]) -> int:
        d = self.dim(srcs[0])
        return self.add_node(LayerSpec("add", d, d), srcs)

    def concat(self, srcs: Sequence[int]) -> int:
        d = sum(self.dim(s) for s in srcs)
        return self.add_node(LayerSpec("concat", d, d), srcs)

    def graph(self, out_tensor: int) -> NetworkGraph:
        return NetworkGraph(nodes=tuple(self.nodes), edges=tuple(self.edges),
                            input_dim=self.input_dim, output_dim=self.dim(out_tensor))


def chain_graph(input_dim: int, widths: Sequence[int],
                activation: Optional[str] = "relu") -> NetworkGraph:
    """Fully-connected chain; activation after every layer but the last."""
    b = _Builder(input_dim)
    cur = INPUT_ID
    for i, w in enumerate(widths):
        cur = b.dense(cur, w, name=f"fc{i}")
        if activation and i < len(widths) - 1:
            cur = b.act(cur, activation)
    return b.graph(cur)


def residual_micro_graph(input_dim: int, width: int = 24, blocks: int = 3,
                         num_classes: int = 10,
                         shortcut: str = "dense") -> NetworkGraph:
    """Stem + `blocks` residual blocks + linear head.

    Each block runs dense+relu on the main path against a one-layer
    shortcut (projection by default, identity otherwise), merged by
    addition, so every block admits exactly two stage alignments.
    """
    b = _Builder(input_dim)
    cur = b.act(b.dense(INPUT_ID, width, name="stem"))
    for i in range(blocks):
        main = b.act(b.dense(cur, width, name=f"block{i}.main"))
        if shortcut == "dense":
            short = b.dense(cur, width, name=f"block{i}.short")
        else:
            short = b.identity(cur)
        cur = b.add([main, short])
    head = b.dense(cur, num_classes, name="head")
    return b.graph(head)


def inception_micro_graph(input_dim: int, width: int = 16,
                          num_classes: int = 10) -> NetworkGraph:
    """Stem + a four-branch block (lengths 1..3 plus a passthrough) + head.

    The four parallel branches line up as a four-player stage game; the
    concatenation at the block exit is folded into the state packing.
    """
    b = _Builder(input_dim)
    stem = b.act(b.dense(INPUT_ID, width, name="stem"))
    br1 = b.dense(stem, width, name="b1")
    br2 = b.act(b.dense(stem, width, name="b2"))
    br3 = b.dense(b.act(b.dense(stem, width, name="b3a")), width, name="b3b")
    br4 = b.identity(stem)
    merged = b.concat([br1, br2, br3, br4])
    head = b.dense(merged, num_classes, name="head")
    return b.graph(head)


PRESETS = {
    "chain": chain_graph,
    "residual-micro": residual_micro_graph,
    "inception-micro": inception_micro_graph,
}


def build_preset(name: str, input_dim: int, num_classes: int, *,
                 width: int = 24, blocks: int = 3,
                 shortcut: str = "dense") -> NetworkGraph:
    if name == "chain":
        return chain_graph(input_dim, [width, width, num_classes])
    if name == "residual-micro":
        return residual_micro_graph(input_dim, width, blocks, num_classes, shortcut)
    if name == "inception-micro":
        return inception_micro_graph(input_dim, width, num_classes)
    raise KeyError(name)
