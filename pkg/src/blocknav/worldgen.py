"""Procedural street worlds, gold routes, and templated instructions.

Worlds are grid graphs with random edge deletions, repaired to stay strongly
connected. Each node carries a landmark; a node's directional features show
the landmarks of the neighbors faced, so "turn left at the bakery" is
decidable from the forward feature bin. Labels (sentence relevance per
timestep, block progress per timestep) are exact by construction.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from blocknav.graph import (
    Action,
    AgentState,
    EnvGraph,
    SchemaViolation,
    block_progress_label,
    save_world,
    wrap_angle,
)


class GenerationFailed(Exception):
    pass


class RouteFailed(Exception):
    pass


LANDMARK_BANK = (
    "bakery", "fountain", "statue", "library", "church", "market",
    "garden", "museum", "pharmacy", "hotel", "theater", "gallery",
    "tower", "bridge", "plaza", "station", "diner", "bookshop",
    "florist", "barber", "arcade", "chapel", "kiosk", "cinema",
)

MOVE_WORDS = ("go", "to", "past", "straight", "the", "at", "turn", "left", "right", "around", "stop", "you", "will", "pass", ".")


@dataclass(frozen=True)
class WorldParams:
    seed: int
    grid_w: int = 6
    grid_h: int = 6
    edge_keep_prob: float = 0.85
    landmark_vocab_size: int = 12
    feature_noise_sigma: float = 0.05
    d_v: int = 16
    num_bins: int = 8

    def validate(self) -> None:
        if self.grid_w < 1 or self.grid_h < 1:
            raise ValueError("grid dimensions must be positive")
        if not (0.0 < self.edge_keep_prob <= 1.0):
            raise ValueError("edge_keep_prob must lie in (0, 1]")
        if self.landmark_vocab_size < 1:
            raise ValueError("landmark_vocab_size must be positive")
        if self.d_v < self.landmark_vocab_size:
            raise ValueError("d_v must be at least landmark_vocab_size (one-hot rows)")
        if self.feature_noise_sigma < 0:
            raise ValueError("feature_noise_sigma must be nonnegative")


@dataclass(frozen=True)
class GeneratedWorld:
    """EnvGraph plus the landmark assignment the instructions talk about."""

    graph: EnvGraph
    landmark_of: dict[int, int]
    landmark_names: tuple[str, ...]
    params: WorldParams


class Route(NamedTuple):
    gold_path: list[int]
    gold_actions: list[Action]
    initial_heading: float


@dataclass
class InstructionRecord:
    tokens: list[int]
    sentence_spans: list[tuple[int, int]]
    gold_path: list[int]
    gold_actions: list[Action]
    initial_heading: float
    relevance_labels: np.ndarray
    progress_labels: list[float]
    episode_id: str = "ep00000"
    world_hash: str = ""


@dataclass
class Dataset:
    vocab: list[str]
    records: list[InstructionRecord]
    graphs: dict[str, EnvGraph]

    def graph_for(self, record: InstructionRecord) -> EnvGraph:
        return self.graphs[record.world_hash]


def landmark_names(vocab_size: int) -> tuple[str, ...]:
    names = []
    for i in range(vocab_size):
        base = LANDMARK_BANK[i % len(LANDMARK_BANK)]
        if i >= len(LANDMARK_BANK):
            base = f"{base}{i // len(LANDMARK_BANK)}"
        names.append(base)
    return tuple(names)


def build_vocab(lm_names: Sequence[str]) -> list[str]:
    return sorted(set(MOVE_WORDS) | set(lm_names))


def _strongly_connected(nodes: Sequence[int], adj: dict[int, set[int]]) -> bool:
    if not nodes:
        return True
    radj: dict[int, set[int]] = {n: set() for n in nodes}
    for u, outs in adj.items():
        for v in outs:
            radj[v].add(u)
    for graph_dir in (adj, radj):
        seen = {nodes[0]}
        q = deque([nodes[0]])
        while q:
            cur = q.popleft()
            for v in graph_dir[cur]:
                if v not in seen:
                    seen.add(v)
                    q.append(v)
        if len(seen) != len(nodes):
            return False
    return True


def generate_world(params: WorldParams) -> GeneratedWorld:
    """Deterministic grid-with-deletions world with landmark features."""
    params.validate()
    rng = np.random.default_rng([params.seed, 0x570])
    w, h = params.grid_w, params.grid_h

    def nid(r: int, c: int) -> int:
        return r * w + c

    nodes = list(range(w * h))
    undirected = []
    for r in range(h):
        for c in range(w):
            if c + 1 < w:
                undirected.append(((r, c), (r, c + 1)))
            if r + 1 < h:
                undirected.append(((r, c), (r + 1, c)))
    keep_draws = rng.random(len(undirected))
    kept = [e for e, draw in zip(undirected, keep_draws) if draw < params.edge_keep_prob]
    removed = [e for e, draw in zip(undirected, keep_draws) if draw >= params.edge_keep_prob]

    def adjacency(edge_list):
        adj = {n: set() for n in nodes}
        for (r1, c1), (r2, c2) in edge_list:
            adj[nid(r1, c1)].add(nid(r2, c2))
            adj[nid(r2, c2)].add(nid(r1, c1))
        return adj

    attempts = 0
    while not _strongly_connected(nodes, adjacency(kept)):
        if not removed:
            raise GenerationFailed("cannot repair connectivity: no removed edges left")
        attempts += 1
        if attempts > len(undirected) + 1:
            raise GenerationFailed("connectivity repair did not converge")
        i = int(rng.integers(0, len(removed)))
        kept.append(removed.pop(i))

    def angle(src, dst) -> float:
        (r1, c1), (r2, c2) = src, dst
        return wrap_angle(np.degrees(np.arctan2(r2 - r1, c2 - c1)))

    edges = []
    for a, b in kept:
        edges.append((nid(*a), nid(*b), angle(a, b)))
        edges.append((nid(*b), nid(*a), angle(b, a)))

    lm_ids = rng.integers(0, params.landmark_vocab_size, size=len(nodes))
    landmark_of = {n: int(lm_ids[n]) for n in nodes}

    out_by_node: dict[int, list[tuple[int, float]]] = {n: [] for n in nodes}
    for u, v, ang in edges:
        out_by_node[u].append((v, ang))

    width = 360.0 / params.num_bins
    features = {}
    for n in nodes:
        mat = rng.normal(0.0, params.feature_noise_sigma, size=(params.num_bins, params.d_v))
        for v, ang in out_by_node[n]:
            b = int(round(wrap_angle(ang) / width)) % params.num_bins
            mat[b, landmark_of[v]] += 1.0
        features[n] = mat

    graph = EnvGraph(nodes, edges, features, num_bins=params.num_bins)
    return GeneratedWorld(
        graph=graph,
        landmark_of=landmark_of,
        landmark_names=landmark_names(params.landmark_vocab_size),
        params=params,
    )


def generate_route(
    graph: EnvGraph, seed, min_blocks: int = 1, max_blocks: int = 3, max_steps: int | None = None
) -> Route:
    """Random route covering a whole number of blocks, actions by inverting step().

    The walk enters a block, crosses it fully, and either stops at the
    terminator or rotates onto a non-reverse exit and keeps going. U-turns
    appear only at dead ends.
    """
    if min_blocks < 1 or max_blocks < min_blocks:
        raise ValueError("need 1 <= min_blocks <= max_blocks")
    rng = np.random.default_rng(seed)
    if max_steps is None:
        max_steps = 12 * len(graph.nodes) + 20
    n_blocks = int(rng.integers(min_blocks, max_blocks + 1))

    for _ in range(40):
        start = int(rng.choice(graph.nodes))
        exits = graph.out_edges[start]
        if not exits:
            continue
        _, heading = exits[int(rng.integers(0, len(exits)))]
        state = AgentState(node=start, heading=heading, prev_heading=heading, step_index=0)
        path = [start]
        actions: list[Action] = []
        blocks_done = 0
        ok = True
        while blocks_done < n_blocks:
            # cross the block the agent currently faces
            while True:
                traversed = state.heading
                nxt = graph.step(state, Action.FORWARD)
                actions.append(Action.FORWARD)
                path.append(nxt.node)
                state = nxt
                if len(actions) > max_steps:
                    ok = False
                    break
                if graph.junction_count(state.node) != 2:
                    break
            if not ok:
                break
            blocks_done += 1
            if blocks_done == n_blocks:
                break
            # rotate onto a random non-reverse exit
            reverse = wrap_angle(traversed + 180.0)
            options = [a for _, a in graph.out_edges[state.node] if a != reverse]
            if not options:
                options = [a for _, a in graph.out_edges[state.node]]
            if not options:
                ok = False
                break
            target = options[int(rng.integers(0, len(options)))]
            angles = [a for _, a in graph.out_edges[state.node]]
            i, j = angles.index(state.heading), angles.index(target)
            n = len(angles)
            lefts, rights = (i - j) % n, (j - i) % n
            rot = Action.LEFT if lefts <= rights else Action.RIGHT
            for _ in range(min(lefts, rights)):
                state = graph.step(state, rot)
                actions.append(rot)
            if len(actions) > max_steps:
                ok = False
                break
        if ok and blocks_done == n_blocks:
            actions.append(Action.STOP)
            return Route(gold_path=path, gold_actions=actions, initial_heading=heading)
    raise RouteFailed(
        f"no route of {min_blocks}..{max_blocks} blocks found within {max_steps} steps"
    )


def replay_states(graph: EnvGraph, route: Route) -> list[AgentState]:
    """State before each action; length equals len(gold_actions)."""
    state = AgentState(
        node=route.gold_path[0],
        heading=route.initial_heading,
        prev_heading=route.initial_heading,
        step_index=0,
    )
    states = [state]
    for a in route.gold_actions[:-1]:
        state = graph.step(state, a)
        states.append(state)
    return states


def generate_instruction(
    world: GeneratedWorld,
    route: Route,
    rng=None,
    filler_prob: float = 0.0,
    episode_id: str = "ep00000",
) -> InstructionRecord:
    """Sentences per block maneuver plus a stop sentence, with exact labels."""
    graph = world.graph
    if rng is None:
        rng = np.random.default_rng(0)
    states = replay_states(graph, route)
    actions = route.gold_actions
    T = len(actions)

    seg_of_t = []
    seg = 0
    for t, (st, a) in enumerate(zip(states, actions)):
        if a == Action.STOP:
            seg_of_t.append(-1)
            continue
        if a == Action.FORWARD and t > 0 and graph.junction_count(st.node) != 2:
            seg += 1
        seg_of_t.append(seg)
    n_move = seg + 1

    # terminator node and net turn for each move segment
    seg_end_node: list[int] = []
    seg_phrase: list[str] = []
    for i in range(n_move):
        ts = [t for t, s in enumerate(seg_of_t) if s == i]
        last = ts[-1]
        end_state = states[last + 1] if last + 1 < T else states[T - 1]
        end_node = end_state.node
        seg_end_node.append(end_node)
        if i == n_move - 1:
            seg_phrase.append("go to the {lm} .")
            continue
        next_ts = [t for t, s in enumerate(seg_of_t) if s == i + 1]
        fwd_ts = [t for t in ts if actions[t] == Action.FORWARD]
        h_arr = states[fwd_ts[-1] + 1].heading  # snapped heading on arrival, before rotations
        h_out = states[next_ts[0]].heading
        delta = wrap_angle(h_out - h_arr)
        if graph.junction_count(end_node) == 1 or delta == 180.0:
            seg_phrase.append("turn around at the {lm} .")
        elif delta == 0.0:
            seg_phrase.append("go past the {lm} .")
        elif delta < 0.0:
            seg_phrase.append("turn left at the {lm} .")
        else:
            seg_phrase.append("turn right at the {lm} .")

    names = world.landmark_names
    sentences: list[str] = []
    col_of_seg: dict[int, int] = {}
    for i in range(n_move):
        col_of_seg[i] = len(sentences)
        sentences.append(seg_phrase[i].format(lm=names[world.landmark_of[seg_end_node[i]]]))
        if filler_prob > 0 and rng.random() < filler_prob:
            lm = names[int(rng.integers(0, len(names)))]
            sentences.append(f"you will pass the {lm} .")
    stop_col = len(sentences)
    sentences.append("stop .")

    vocab = build_vocab(names)
    tok_id = {w: i for i, w in enumerate(vocab)}
    tokens: list[int] = []
    spans: list[tuple[int, int]] = []
    for s in sentences:
        words = s.split()
        spans.append((len(tokens), len(tokens) + len(words)))
        tokens.extend(tok_id[w] for w in words)

    relevance = np.zeros((T, len(sentences)), dtype=np.int64)
    for t, s in enumerate(seg_of_t):
        relevance[t, stop_col if s == -1 else col_of_seg[s]] = 1

    idx = graph.block_index
    progress = [block_progress_label(st, idx, graph) for st in states]

    return InstructionRecord(
        tokens=tokens,
        sentence_spans=spans,
        gold_path=route.gold_path,
        gold_actions=list(actions),
        initial_heading=route.initial_heading,
        relevance_labels=relevance,
        progress_labels=progress,
        episode_id=episode_id,
    )


def build_records(
    world: GeneratedWorld,
    count: int,
    seed: int,
    min_blocks: int = 1,
    max_blocks: int = 3,
    filler_prob: float = 0.0,
    id_prefix: str = "ep",
) -> list[InstructionRecord]:
    """Independent records; record i's randomness comes from (seed, i) only."""
    records = []
    for i in range(count):
        route = generate_route(world.graph, [seed, i, 1], min_blocks, max_blocks)
        rec_rng = np.random.default_rng([seed, i, 2])
        rec = generate_instruction(
            world, route, rng=rec_rng, filler_prob=filler_prob, episode_id=f"{id_prefix}{i:05d}"
        )
        records.append(rec)
    return records


# -- dataset serialization ----------------------------------------------------


def save_dataset(
    records: Sequence[InstructionRecord],
    worlds: Sequence[GeneratedWorld | EnvGraph],
    path: str,
    vocab: Sequence[str] | None = None,
) -> None:
    """JSON-lines dataset; world files written alongside, referenced by hash."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    world_entries = []
    hashes = []
    for wobj in worlds:
        graph = wobj.graph if isinstance(wobj, GeneratedWorld) else wobj
        tmp = os.path.join(directory, "_world_tmp.json")
        save_world(graph, tmp)
        with open(tmp, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        final = os.path.join(directory, f"world-{digest[:12]}.json")
        os.replace(tmp, final)
        world_entries.append({"file": os.path.basename(final), "sha256": digest})
        hashes.append(digest)
    if vocab is None:
        sizes = {
            w.params.landmark_vocab_size
            for w in worlds
            if isinstance(w, GeneratedWorld)
        }
        if len(sizes) > 1:
            raise ValueError("worlds in one dataset must share landmark_vocab_size")
        vocab = build_vocab(landmark_names(sizes.pop())) if sizes else build_vocab(())
    header = {"version": 1, "worlds": world_entries, "vocab": list(vocab)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            whash = rec.world_hash or hashes[0]
            doc = {
                "episode_id": rec.episode_id,
                "world": whash,
                "tokens": rec.tokens,
                "sentence_spans": [list(s) for s in rec.sentence_spans],
                "gold_path": rec.gold_path,
                "gold_actions": [int(a) for a in rec.gold_actions],
                "initial_heading": rec.initial_heading,
                "relevance_labels": rec.relevance_labels.astype(int).tolist(),
                "progress_labels": rec.progress_labels,
            }
            fh.write(json.dumps(doc, sort_keys=True) + "\n")


def _require(cond: bool, path: str, where: str, reason: str) -> None:
    if not cond:
        raise SchemaViolation(f"dataset {path}: {where}: {reason}")


def load_dataset(path: str) -> Dataset:
    from blocknav.graph import load_world

    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    _require(len(lines) >= 1, path, "header", "file empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise SchemaViolation(f"dataset {path}: header: not valid JSON ({e})") from None
    _require(isinstance(header, dict) and header.get("version") == 1, path, "header.version", "unsupported version")
    _require(isinstance(header.get("worlds"), list) and header["worlds"], path, "header.worlds", "must be nonempty list")
    _require(isinstance(header.get("vocab"), list), path, "header.vocab", "must be a list")
    directory = os.path.dirname(os.path.abspath(path))
    graphs = {}
    for i, entry in enumerate(header["worlds"]):
        _require(
            isinstance(entry, dict) and "file" in entry and "sha256" in entry,
            path, f"header.worlds[{i}]", "needs file and sha256",
        )
        wpath = os.path.join(directory, entry["file"])
        _require(os.path.exists(wpath), path, f"header.worlds[{i}].file", f"{entry['file']} not found")
        with open(wpath, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        _require(
            digest == entry["sha256"],
            path, f"header.worlds[{i}].sha256", "world file content hash mismatch",
        )
        graphs[digest] = load_world(wpath)
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"records[line {ln}]"
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaViolation(f"dataset {path}: {where}: not valid JSON ({e})") from None
        for fieldname in (
            "episode_id", "world", "tokens", "sentence_spans", "gold_path",
            "gold_actions", "initial_heading", "relevance_labels", "progress_labels",
        ):
            _require(fieldname in doc, path, f"{where}.{fieldname}", "missing")
        _require(doc["world"] in graphs, path, f"{where}.world", "unknown world hash")
        spans = [tuple(s) for s in doc["sentence_spans"]]
        pos = 0
        for s in spans:
            _require(
                len(s) == 2 and s[0] == pos and s[1] > s[0],
                path, f"{where}.sentence_spans", "spans must tile the token sequence",
            )
            pos = s[1]
        _require(pos == len(doc["tokens"]), path, f"{where}.sentence_spans", "spans must cover all tokens")
        actions = [Action(a) for a in doc["gold_actions"]]
        _require(actions and actions[-1] == Action.STOP, path, f"{where}.gold_actions", "must end in STOP")
        rel = np.asarray(doc["relevance_labels"], dtype=np.int64)
        _require(
            rel.ndim == 2 and rel.shape == (len(actions), len(spans)),
            path, f"{where}.relevance_labels", "must be T x N_s",
        )
        _require(bool((rel.sum(axis=1) >= 1).all()), path, f"{where}.relevance_labels", "every row needs a 1")
        _require(
            len(doc["progress_labels"]) == len(actions),
            path, f"{where}.progress_labels", "length must equal T",
        )
        records.append(
            InstructionRecord(
                tokens=list(doc["tokens"]),
                sentence_spans=spans,
                gold_path=list(doc["gold_path"]),
                gold_actions=actions,
                initial_heading=float(doc["initial_heading"]),
                relevance_labels=rel,
                progress_labels=[float(x) for x in doc["progress_labels"]],
                episode_id=str(doc["episode_id"]),
                world_hash=str(doc["world"]),
            )
        )
    return Dataset(vocab=list(header["vocab"]), records=records, graphs=graphs)
