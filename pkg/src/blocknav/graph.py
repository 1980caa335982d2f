"""Directed street-graph environment with angle-labeled edges.

Nodes are panorama points, edges carry absolute headings in degrees, and
navigation happens through four discrete actions. Blocks (maximal chains of
degree-2 nodes between intersections) are indexed so that per-step progress
labels can be computed for any (node, heading) pair.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

NodeId = int


class GraphError(Exception):
    """Base class for environment errors."""


class MalformedGraph(GraphError):
    pass


class UnknownNode(GraphError):
    pass


class NoForwardEdge(GraphError):
    pass


class SchemaViolation(GraphError):
    """Raised when a serialized world or dataset file violates the format."""


class Action(IntEnum):
    FORWARD = 0
    LEFT = 1
    RIGHT = 2
    STOP = 3


class _Terminal:
    """Sentinel returned by step() once STOP is taken."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Terminal"


TERMINAL = _Terminal()


class _Unreachable:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Unreachable"


UNREACHABLE = _Unreachable()


def wrap_angle(angle: float) -> float:
    """Wrap an angle in degrees into (-180, 180]."""
    a = math.fmod(angle, 360.0)
    if a <= -180.0:
        a += 360.0
    elif a > 180.0:
        a -= 360.0
    return a


def normalize_heading_delta(prev_heading: float, heading: float) -> float:
    """Signed turning angle from prev_heading to heading, scaled into (-1, 1]."""
    return wrap_angle(heading - prev_heading) / 180.0


def long_term_angle(g_history: Sequence[float], t: int, K: int) -> float:
    """Sum of the normalized turning angles over steps t-K..t, zero before step 0."""
    if t >= len(g_history):
        raise IndexError(f"t={t} out of range for history of length {len(g_history)}")
    lo = max(0, t - K)
    return float(sum(g_history[lo : t + 1]))


@dataclass(frozen=True)
class AgentState:
    node: NodeId
    heading: float
    prev_heading: float
    step_index: int = 0


@dataclass(frozen=True)
class TurnSignals:
    g_c: float
    g_l: float
    junction_count: int


@dataclass(frozen=True)
class BlockIndex:
    """Per-world index answering 'how far to the next intersection'.

    remaining_steps and totals are keyed by (node, heading bin); the heading
    bin of the direction faced selects which block the agent is moving along.
    Intersections facing along a block score the full crossing, so the label
    remaining/total is 1.0 at a block entrance and decreases to 1/total just
    before the terminating intersection.
    """

    block_of: dict[NodeId, int]
    remaining_steps: dict[tuple[NodeId, int], int]
    block_size: dict[int, int]
    segment_total: dict[tuple[NodeId, int], int]
    segment_block: dict[tuple[NodeId, int], int]


class EnvGraph:
    """Immutable directed graph with per-node directional feature matrices."""

    def __init__(
        self,
        nodes: Iterable[NodeId],
        edges: Iterable[tuple[NodeId, NodeId, float]],
        features: dict[NodeId, np.ndarray] | None = None,
        num_bins: int = 8,
    ):
        self.nodes: tuple[NodeId, ...] = tuple(nodes)
        if len(set(self.nodes)) != len(self.nodes):
            raise MalformedGraph("duplicate node ids")
        node_set = set(self.nodes)
        adj: dict[NodeId, list[tuple[NodeId, float]]] = {n: [] for n in self.nodes}
        for u, v, ang in edges:
            if u not in node_set or v not in node_set:
                raise MalformedGraph(f"edge ({u},{v}) references unknown node")
            if not (-180.0 < ang <= 180.0):
                raise MalformedGraph(f"edge ({u},{v}) angle {ang} outside (-180, 180]")
            adj[u].append((v, float(ang)))
        for n, lst in adj.items():
            lst.sort(key=lambda e: e[1])
            angles = [a for _, a in lst]
            if len(set(angles)) != len(angles):
                raise MalformedGraph(f"node {n} has duplicate outgoing edge angles")
        self.out_edges: dict[NodeId, tuple[tuple[NodeId, float], ...]] = {
            n: tuple(lst) for n, lst in adj.items()
        }
        self.num_bins = int(num_bins)
        if self.num_bins < 1:
            raise MalformedGraph("num_bins must be positive")
        if features is None:
            features = {}
        self.features: dict[NodeId, np.ndarray] = {}
        d_v = None
        for n in self.nodes:
            f = features.get(n)
            if f is None:
                f = np.zeros((self.num_bins, 1), dtype=np.float64)
            f = np.asarray(f, dtype=np.float64)
            if f.ndim != 2 or f.shape[0] != self.num_bins:
                raise MalformedGraph(
                    f"features for node {n} must have {self.num_bins} rows, got shape {f.shape}"
                )
            if d_v is None:
                d_v = f.shape[1]
            elif f.shape[1] != d_v:
                raise MalformedGraph("inconsistent feature width across nodes")
            f = f.copy()
            f.setflags(write=False)
            self.features[n] = f
        self.d_v = d_v if d_v is not None else 1

    # -- basic queries ----------------------------------------------------

    def junction_count(self, node: NodeId) -> int:
        if node not in self.out_edges:
            raise UnknownNode(f"node {node} not in graph")
        return len(self.out_edges[node])

    def heading_bin(self, heading: float) -> int:
        width = 360.0 / self.num_bins
        return int(round(wrap_angle(heading) / width)) % self.num_bins

    def snap_heading(self, node: NodeId, incoming: float) -> float:
        """Outgoing edge angle of node nearest to the incoming direction.

        The agent's heading must always name one outgoing edge; arriving along
        an edge whose angle has no outgoing twin (grid corners) snaps to the
        closest continuation. Ties break toward the smaller signed delta.
        """
        edges = self.out_edges[node]
        if not edges:
            return wrap_angle(incoming)
        best = min(edges, key=lambda e: (abs(wrap_angle(e[1] - incoming)), wrap_angle(e[1] - incoming)))
        return best[1]

    def observe(self, state: AgentState) -> np.ndarray:
        """Directional features rotated into the agent frame (row 0 = ahead)."""
        f = self.features[state.node]
        base = self.heading_bin(state.heading)
        idx = [(base + j) % self.num_bins for j in range(self.num_bins)]
        return f[idx]

    # -- action semantics -------------------------------------------------

    def step(self, state: AgentState, action: Action) -> AgentState | _Terminal:
        if state.node not in self.out_edges:
            raise UnknownNode(f"node {state.node} not in graph")
        if action == Action.STOP:
            return TERMINAL
        edges = self.out_edges[state.node]
        if action == Action.FORWARD:
            for v, ang in edges:
                if ang == state.heading:
                    return AgentState(
                        node=v,
                        heading=self.snap_heading(v, ang),
                        prev_heading=state.heading,
                        step_index=state.step_index + 1,
                    )
            raise NoForwardEdge(
                f"no outgoing edge at heading {state.heading} from node {state.node}"
            )
        # rotations walk the angle-sorted edge list cyclically
        if not edges:
            raise NoForwardEdge(f"node {state.node} has no edges to rotate through")
        angles = [a for _, a in edges]
        try:
            i = angles.index(state.heading)
        except ValueError:
            raise NoForwardEdge(
                f"heading {state.heading} does not match an edge at node {state.node}"
            ) from None
        j = (i - 1) % len(angles) if action == Action.LEFT else (i + 1) % len(angles)
        return AgentState(
            node=state.node,
            heading=angles[j],
            prev_heading=state.heading,
            step_index=state.step_index + 1,
        )

    # -- distances ---------------------------------------------------------

    def shortest_path_hops(self, u: NodeId, v: NodeId) -> int | _Unreachable:
        if u not in self.out_edges or v not in self.out_edges:
            raise UnknownNode(f"nodes ({u},{v}) must both be in graph")
        if u == v:
            return 0
        dist = {u: 0}
        q = deque([u])
        while q:
            cur = q.popleft()
            for nbr, _ in self.out_edges[cur]:
                if nbr not in dist:
                    dist[nbr] = dist[cur] + 1
                    if nbr == v:
                        return dist[nbr]
                    q.append(nbr)
        return UNREACHABLE

    def neighbors(self, node: NodeId) -> tuple[NodeId, ...]:
        return tuple(v for v, _ in self.out_edges[node])

    # -- block segmentation -------------------------------------------------

    def _is_terminator(self, node: NodeId) -> bool:
        return len(self.out_edges[node]) != 2

    @cached_property
    def block_index(self) -> BlockIndex:
        return segment_blocks(self)


def _walk_forward(graph: EnvGraph, node: NodeId, heading: float) -> list[tuple[NodeId, float]]:
    """Positions visited walking FORWARD until the first terminator ahead.

    Returns [(node, heading), ...] ending at the terminator. Raises
    MalformedGraph if the walk revisits a state without meeting one (a cycle
    of degree-2 nodes entered from outside).
    """
    positions = [(node, heading)]
    seen = {(node, graph.heading_bin(heading))}
    cur, h = node, heading
    while True:
        nxt = None
        for v, ang in graph.out_edges[cur]:
            if ang == h:
                nxt = (v, ang)
                break
        if nxt is None:
            raise MalformedGraph(f"segmentation walk stuck at node {cur} heading {h}")
        v, ang = nxt
        h = graph.snap_heading(v, ang)
        cur = v
        positions.append((cur, h))
        if graph._is_terminator(cur):
            return positions
        key = (cur, graph.heading_bin(h))
        if key in seen:
            raise MalformedGraph(f"segmentation walk cycles through node {cur}")
        seen.add(key)


def segment_blocks(graph: EnvGraph) -> BlockIndex:
    """Partition nodes into blocks and precompute per-heading walk counts.

    Terminators (out-degree != 2) each form their own block; chains of
    degree-2 nodes between them form interior blocks whose size counts the
    chain plus the terminating endpoint, per the remaining/total convention.
    Components with no terminator at all (pure rings) use their smallest node
    id as a virtual terminator.
    """
    block_of: dict[NodeId, int] = {}
    block_size: dict[int, int] = {}
    remaining: dict[tuple[NodeId, int], int] = {}
    totals: dict[tuple[NodeId, int], int] = {}
    seg_block: dict[tuple[NodeId, int], int] = {}
    next_block = 0

    # interior chains: undirected components of degree-2 nodes
    interior = [n for n in graph.nodes if not graph._is_terminator(n)]
    interior_set = set(interior)
    chain_of: dict[NodeId, int] = {}
    undirected: dict[NodeId, set[NodeId]] = {n: set() for n in interior}
    for n in graph.nodes:
        for v, _ in graph.out_edges[n]:
            if n in interior_set and v in interior_set:
                undirected[n].add(v)
                undirected[v].add(n)
    for n in interior:
        if n in chain_of:
            continue
        comp = [n]
        chain_of[n] = next_block
        q = deque([n])
        while q:
            cur = q.popleft()
            for v in undirected[cur]:
                if v not in chain_of:
                    chain_of[v] = next_block
                    comp.append(v)
                    q.append(v)
        block_size[next_block] = len(comp) + 1
        next_block += 1
    block_of.update(chain_of)

    for n in graph.nodes:
        if graph._is_terminator(n):
            block_of[n] = next_block
            block_size[next_block] = 1
            next_block += 1

    degenerate: dict[tuple[NodeId, NodeId], int] = {}

    def segment_id(positions: list[tuple[NodeId, float]]) -> int:
        nonlocal next_block
        inner = [p for p, _ in positions[1:-1]]
        if inner:
            return chain_of[inner[0]]
        pair = (min(positions[0][0], positions[-1][0]), max(positions[0][0], positions[-1][0]))
        if pair not in degenerate:
            degenerate[pair] = next_block
            block_size[next_block] = 1
            next_block += 1
        return degenerate[pair]

    def assign(positions: list[tuple[NodeId, float]], total: int, bid: int) -> None:
        # the arrival position keeps its own launch entries; see module notes
        for i, (p, h) in enumerate(positions[:-1]):
            key = (p, graph.heading_bin(h))
            if key not in remaining:
                remaining[key] = total - i
                totals[key] = total
                seg_block[key] = bid

    for t in sorted(graph.nodes):
        if not graph._is_terminator(t):
            continue
        for _, ang in graph.out_edges[t]:
            positions = _walk_forward(graph, t, ang)
            total = len(positions) - 1
            assign(positions, total, segment_id(positions))

    # pure rings: no terminator launches cover them
    for n in sorted(graph.nodes):
        for _, ang in graph.out_edges[n]:
            if (n, graph.heading_bin(ang)) in remaining:
                continue
            ring = [(n, ang)]
            cur, h = n, ang
            for _ in range(4 * len(graph.nodes) + 4):
                nxt = next(v for v, a in graph.out_edges[cur] if a == h)
                h = graph.snap_heading(nxt, h)
                cur = nxt
                if (cur, h) == (n, ang):
                    break
                ring.append((cur, h))
            else:
                raise MalformedGraph(f"ring walk from node {n} does not close")
            start = min(range(len(ring)), key=lambda i: ring[i][0])
            ordered = ring[start:] + ring[:start] + [ring[start]]
            bid = block_of[ordered[0][0]]
            block_size[bid] = len(ring)
            assign(ordered, len(ring), bid)

    return BlockIndex(
        block_of=block_of,
        remaining_steps=remaining,
        block_size=block_size,
        segment_total=totals,
        segment_block=seg_block,
    )


def block_progress_label(state: AgentState, idx: BlockIndex, graph: EnvGraph) -> float:
    """Remaining-steps fraction for the block the agent is facing along.

    1.0 entering a block, decreasing as the terminating intersection nears,
    0.0 exactly at a node with no way forward.
    """
    if state.node not in idx.block_of:
        raise UnknownNode(f"node {state.node} not in block index")
    key = (state.node, graph.heading_bin(state.heading))
    if key not in idx.remaining_steps:
        if graph.junction_count(state.node) == 0:
            return 0.0
        raise UnknownNode(
            f"no block walk recorded for node {state.node} heading {state.heading}"
        )
    return idx.remaining_steps[key] / idx.segment_total[key]


def turn_signals(
    graph: EnvGraph, state: AgentState, g_history: Sequence[float], K: int
) -> TurnSignals:
    """Current and long-term turning angles plus the junction degree.

    g_history holds the g_c values of the previous steps; the current one is
    appended before the windowed sum so the K+1 terms include this step.
    """
    g_c = normalize_heading_delta(state.prev_heading, state.heading)
    hist = list(g_history) + [g_c]
    g_l = long_term_angle(hist, len(hist) - 1, K)
    return TurnSignals(g_c=g_c, g_l=g_l, junction_count=graph.junction_count(state.node))


# -- world file serialization ------------------------------------------------


def save_world(graph: EnvGraph, path: str) -> None:
    """Write the world as versioned JSON, one node/edge object per line."""
    lines = ['{"version": 1,', '"nodes": [']
    for i, n in enumerate(sorted(graph.nodes)):
        feat = graph.features[n]
        rows = ", ".join(
            "[" + ", ".join(repr(float(x)) for x in row) + "]" for row in feat
        )
        comma = "," if i < len(graph.nodes) - 1 else ""
        lines.append('{"id": %d, "features": [%s]}%s' % (n, rows, comma))
    lines.append("],")
    lines.append('"edges": [')
    all_edges = [
        (u, v, ang) for u in sorted(graph.nodes) for v, ang in graph.out_edges[u]
    ]
    for i, (u, v, ang) in enumerate(all_edges):
        comma = "," if i < len(all_edges) - 1 else ""
        lines.append(
            '{"from": %d, "to": %d, "angle_deg": %s}%s' % (u, v, repr(float(ang)), comma)
        )
    lines.append("]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _world_error(raw: str, path: str, needle: str, index: int, reason: str) -> SchemaViolation:
    line = None
    count = -1
    for ln, text in enumerate(raw.splitlines(), start=1):
        count += text.count(needle)
        if count >= index:
            line = ln
            break
    loc = f"{path} (line {line})" if line is not None else path
    return SchemaViolation(f"world file invalid at {loc}: {reason}")


def load_world(path: str, num_bins: int | None = None) -> EnvGraph:
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise SchemaViolation(f"world file {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict) or doc.get("version") != 1:
        raise SchemaViolation(f"world file {path}: missing or unsupported version")
    for field in ("nodes", "edges"):
        if not isinstance(doc.get(field), list):
            raise SchemaViolation(f"world file {path}: '{field}' must be a list")
    nodes = []
    features = {}
    width = None
    bins = num_bins
    for i, nd in enumerate(doc["nodes"]):
        if not isinstance(nd, dict) or "id" not in nd or "features" not in nd:
            raise _world_error(raw, path, '"id"', i, f"nodes[{i}] needs id and features")
        nid = nd["id"]
        if not isinstance(nid, int):
            raise _world_error(raw, path, '"id"', i, f"nodes[{i}].id must be an integer")
        feat = nd["features"]
        if not isinstance(feat, list) or not feat:
            raise _world_error(raw, path, '"id"', i, f"nodes[{i}].features must be a nonempty matrix")
        if bins is None:
            bins = len(feat)
        if len(feat) != bins:
            raise _world_error(
                raw, path, '"id"', i,
                f"nodes[{i}].features has {len(feat)} rows, expected {bins}",
            )
        for r, row in enumerate(feat):
            if not isinstance(row, list) or (width is not None and len(row) != width):
                raise _world_error(
                    raw, path, '"id"', i,
                    f"nodes[{i}].features row {r} malformed",
                )
            if width is None:
                width = len(row)
            if not all(isinstance(x, (int, float)) for x in row):
                raise _world_error(
                    raw, path, '"id"', i,
                    f"nodes[{i}].features row {r} contains non-numeric entries",
                )
        nodes.append(nid)
        features[nid] = np.array(feat, dtype=np.float64)
    edges = []
    node_set = set(nodes)
    for i, ed in enumerate(doc["edges"]):
        if not isinstance(ed, dict) or not {"from", "to", "angle_deg"} <= set(ed):
            raise _world_error(raw, path, '"from"', i, f"edges[{i}] needs from/to/angle_deg")
        u, v, ang = ed["from"], ed["to"], ed["angle_deg"]
        if u not in node_set or v not in node_set:
            raise _world_error(raw, path, '"from"', i, f"edges[{i}] references unknown node")
        if not isinstance(ang, (int, float)) or not (-180.0 < float(ang) <= 180.0):
            raise _world_error(
                raw, path, '"from"', i,
                f"edges[{i}].angle_deg {ang} outside (-180, 180]",
            )
        edges.append((u, v, float(ang)))
    try:
        return EnvGraph(nodes, edges, features, num_bins=bins or 8)
    except MalformedGraph as e:
        raise SchemaViolation(f"world file invalid at {path}: {e}") from None


def world_content_hash(path: str) -> str:
    import hashlib

    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
