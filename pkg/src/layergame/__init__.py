"""Training small networks as stagewise multi-player dynamic games.

The package exposes three information regimes over one machinery: open-loop
updates that reproduce standard optimizers, feedback updates from a
stagewise Bellman recursion, and cooperative updates that solve the joint
objective with Schur-complement (optionally Kronecker-factored) curvature.
"""

from . import errors
from .netgraph import (
    Alignment,
    LayerSpec,
    LinearStagedDynamics,
    NetworkGraph,
    StagedGame,
    Trajectory,
    build_staged_game,
    canonical_alignment,
    dag_forward,
    enumerate_alignments,
    forward,
)

__all__ = [
    "errors",
    "Alignment",
    "LayerSpec",
    "LinearStagedDynamics",
    "NetworkGraph",
    "StagedGame",
    "Trajectory",
    "build_staged_game",
    "canonical_alignment",
    "dag_forward",
    "enumerate_alignments",
    "forward",
]
