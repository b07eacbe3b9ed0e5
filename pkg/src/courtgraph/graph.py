"""Typed proximity graphs over the entities in a scene.

Nodes are humans plus one designated conditioning agent; an undirected edge
joins every pair of entities within the edge radius at the prediction
timestep. Edges carry no identity of their own: everything downstream keys on
the unordered pair of node types.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .dynamics import CourtState

TEAMS = ("Home", "Away")
ROLES = ("C", "PF", "SF", "SG", "PG")
AGENT_TYPE_NAME = "Agent"


@dataclass(frozen=True)
class NodeType:
    """Either a (team, role) player type or the distinguished agent marker."""

    team: str | None = None
    role: str | None = None
    is_agent: bool = False

    def __post_init__(self):
        if self.is_agent:
            if self.team is not None or self.role is not None:
                raise ValueError("agent node type carries no team/role")
            return
        if self.team not in TEAMS:
            raise ValueError(f"unknown team {self.team!r}, expected one of {TEAMS}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}, expected one of {ROLES}")

    @property
    def name(self) -> str:
        return AGENT_TYPE_NAME if self.is_agent else f"{self.team}-{self.role}"

    @classmethod
    def agent(cls) -> "NodeType":
        return cls(is_agent=True)

    @classmethod
    def from_name(cls, name: str) -> "NodeType":
        if name == AGENT_TYPE_NAME:
            return cls.agent()
        team, _, role = name.partition("-")
        return cls(team=team, role=role)


class EdgeType:
    """Unordered pair of node types; (a, b) and (b, a) are the same type."""

    __slots__ = ("pair",)

    def __init__(self, a: NodeType | str, b: NodeType | str):
        na = a.name if isinstance(a, NodeType) else a
        nb = b.name if isinstance(b, NodeType) else b
        self.pair = tuple(sorted((na, nb)))

    @property
    def key(self) -> str:
        return "—".join(self.pair)

    def __eq__(self, other) -> bool:
        return isinstance(other, EdgeType) and self.pair == other.pair

    def __hash__(self) -> int:
        return hash(self.pair)

    def __lt__(self, other: "EdgeType") -> bool:
        return self.pair < other.pair

    def __repr__(self) -> str:
        return f"EdgeType({self.pair[0]!r}, {self.pair[1]!r})"


@dataclass(frozen=True)
class SceneGraph:
    """Immutable snapshot of entity positions, types, and proximity edges."""

    nodes: dict[str, tuple[NodeType, CourtState]]
    edges: frozenset[tuple[str, str]]
    radius: float

    def has_edge(self, i: str, j: str) -> bool:
        return tuple(sorted((i, j))) in self.edges

    def neighbors(self, node: str) -> list[str]:
        if node not in self.nodes:
            raise KeyError(f"unknown node id {node!r}")
        out = [j for (a, b) in self.edges for j in ((b,) if a == node else (a,) if b == node else ())]
        return sorted(out)

    def node_type(self, node: str) -> NodeType:
        return self.nodes[node][0]

    def to_jsonable(self) -> dict:
        return {
            "radius": self.radius,
            "nodes": {
                i: {"type": t.name, "l": s.l, "w": s.w} for i, (t, s) in sorted(self.nodes.items())
            },
            "edges": sorted(list(e) for e in self.edges),
        }


def build_graph(
    states: dict[str, CourtState], types: dict[str, NodeType], radius: float
) -> SceneGraph:
    """Connect every pair of distinct nodes within `radius` meters (inclusive)."""
    if radius <= 0.0:
        raise ValueError(f"edge radius must be positive, got {radius}")
    if not states:
        raise ValueError("graph needs at least one node")
    if set(states) != set(types):
        raise ValueError("states and types must cover the same node ids")
    ids = sorted(states)
    edges = set()
    for a_idx, i in enumerate(ids):
        for j in ids[a_idx + 1 :]:
            si, sj = states[i], states[j]
            if math.hypot(si.l - sj.l, si.w - sj.w) <= radius:
                edges.add((i, j))
    nodes = {i: (types[i], states[i]) for i in ids}
    return SceneGraph(nodes=nodes, edges=frozenset(edges), radius=radius)


def neighbors_by_edge_type(g: SceneGraph, node: str) -> dict[EdgeType, list[str]]:
    """Partition a node's neighbors into buckets keyed by unordered type pair.

    Within a bucket, neighbor ids are ascending; every neighbor lands in
    exactly one bucket.
    """
    own = g.node_type(node)
    buckets: dict[EdgeType, list[str]] = {}
    for j in g.neighbors(node):
        et = EdgeType(own, g.node_type(j))
        buckets.setdefault(et, []).append(j)
    return {et: sorted(members) for et, members in buckets.items()}


def agent_adjacent(g: SceneGraph, node: str, agent_id: str) -> bool:
    if node not in g.nodes:
        raise KeyError(f"unknown node id {node!r}")
    if agent_id not in g.nodes:
        raise KeyError(f"unknown agent id {agent_id!r}")
    return g.has_edge(node, agent_id)
