"""Deterministic toy navigation worlds.

Grid graphs with landmark objects stand in for scanned indoor scenes:
panoramas are k angular sectors carrying discrete feature ids, episodes
pair a shortest path with a templated instruction whose nouns are the
landmarks passed along the way, and a teacher policy supplies optimal
actions for imitation learning.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

NOUNS = (
    "couch", "table", "lamp", "door", "window", "plant", "shelf", "sink",
    "bed", "chair", "mirror", "stove", "piano", "rug", "desk", "clock",
    "vase", "bench", "cabinet", "fridge", "sofa", "stairs", "painting", "tv",
)
VERBS = ("go", "walk", "head", "move", "proceed", "continue")
DIRECTIONS = ("forward", "straight", "left", "right", "back")
FUNCTION_WORDS = ("the", "a", "past", "toward", "near", "at", "to", "then",
                  "and", "stop", "there", "until")

VOCAB = NOUNS + VERBS + DIRECTIONS + FUNCTION_WORDS
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
NOUN_IDS = frozenset(WORD_TO_ID[w] for w in NOUNS)

EMPTY_FEATURE = len(NOUNS)  # sentinel feature id for views with no object
NUM_FEATURES = len(NOUNS) + 1

OBJECT_OFFSET = 0.4  # objects sit slightly off their node along their bearing
GENERATION_ATTEMPTS = 20


def words(ids: Iterable[int]) -> list[str]:
    return [VOCAB[i] for i in ids]


def normalize_angle(a: float) -> float:
    """Wrap to [-pi, pi)."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a < 0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class WorldSpec:
    width: int = 4
    height: int = 4
    object_density: float = 0.5
    k: int = 8
    edge_keep: float = 1.0
    visibility_radius: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError("grid extent must be at least 2x2")
        if not (0.0 < self.object_density <= 1.0):
            raise ValueError("object density must lie in (0, 1]")
        if self.k < 2:
            raise ValueError("need at least two views")


@dataclass(frozen=True)
class WorldObject:
    node: int
    landmark: int  # index into NOUNS
    bearing: float


@dataclass
class World:
    spec: WorldSpec
    positions: dict[int, tuple[float, float]]
    adjacency: dict[int, tuple[int, ...]]
    objects: tuple[WorldObject, ...]
    _dist_cache: dict[int, dict[int, float]] = field(default_factory=dict, repr=False)

    @property
    def k(self) -> int:
        return self.spec.k

    def nodes(self) -> list[int]:
        return sorted(self.positions)

    def edge_length(self, a: int, b: int) -> float:
        (xa, ya), (xb, yb) = self.positions[a], self.positions[b]
        return math.hypot(xa - xb, ya - yb)

    def distances_from(self, source: int) -> dict[int, float]:
        """Geodesic distances from `source`; memoized per source node."""
        cached = self._dist_cache.get(source)
        if cached is not None:
            return cached
        dist = {source: 0.0}
        frontier = [(0.0, source)]
        while frontier:
            d, node = heapq.heappop(frontier)
            if d > dist.get(node, math.inf):
                continue
            for nbr in self.adjacency[node]:
                nd = d + self.edge_length(node, nbr)
                if nd < dist.get(nbr, math.inf) - 1e-12:
                    dist[nbr] = nd
                    heapq.heappush(frontier, (nd, nbr))
        self._dist_cache[source] = dist
        return dist

    def geodesic(self, a: int, b: int) -> float:
        return self.distances_from(a).get(b, math.inf)

    def visible_objects(self, node: int) -> list[tuple[float, float, WorldObject]]:
        """(distance, world angle, object) for objects within the radius."""
        x0, y0 = self.positions[node]
        out = []
        for obj in self.objects:
            ox, oy = self.positions[obj.node]
            ox += OBJECT_OFFSET * math.cos(obj.bearing)
            oy += OBJECT_OFFSET * math.sin(obj.bearing)
            d = math.hypot(ox - x0, oy - y0)
            if d <= self.spec.visibility_radius:
                out.append((d, math.atan2(oy - y0, ox - x0), obj))
        return out


@dataclass(frozen=True)
class View:
    features: tuple[int, ...]
    angle: float  # sector center relative to the current heading


@dataclass(frozen=True)
class Candidate:
    node: int | None  # None for the STOP pseudo-candidate
    angle: float
    features: tuple[int, ...]
    is_stop: bool = False


@dataclass(frozen=True)
class Observation:
    views: tuple[View, ...]
    candidates: tuple[Candidate, ...]

    @property
    def stop_index(self) -> int:
        return len(self.candidates) - 1

    @property
    def num_moves(self) -> int:
        return len(self.candidates) - 1


@dataclass(frozen=True)
class Episode:
    instruction: tuple[int, ...]
    landmark_truth: tuple[int, ...]
    path: tuple[int, ...]
    goal: int
    seed: int

    @property
    def start(self) -> int:
        return self.path[0]

    def instruction_text(self) -> str:
        return " ".join(words(self.instruction))


@dataclass(frozen=True)
class NavState:
    current: int
    heading: float
    elapsed: int
    history: tuple[tuple[Observation, float], ...]
    goal: int
    max_steps: int = 15
    success_radius: float = 0.0
    terminated: bool = False
    success: bool = False


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _grid_edges(width: int, height: int) -> list[tuple[int, int]]:
    edges = []
    for y in range(height):
        for x in range(width):
            node = y * width + x
            if x + 1 < width:
                edges.append((node, node + 1))
            if y + 1 < height:
                edges.append((node, node + width))
    return edges


def _connected(n_nodes: int, adjacency: dict[int, tuple[int, ...]]) -> bool:
    seen = {0}
    stack = [0]
    while stack:
        for nbr in adjacency[stack.pop()]:
            if nbr not in seen:
                seen.add(nbr)
                stack.append(nbr)
    return len(seen) == n_nodes


def generate_world(spec: WorldSpec) -> World:
    """Build a connected grid world; deterministic given the spec's seed.

    The RNG consumption order is fixed and documented so tests can replay
    it: optional edge-keep draws (one uniform per grid edge, only when
    edge_keep < 1), then per node in id order one density draw, plus a
    landmark-class and a bearing draw for each placed object. Sampling is
    retried a bounded number of times if it disconnects the graph or
    places no object.
    """
    rng = np.random.default_rng(spec.seed)
    n_nodes = spec.width * spec.height
    positions = {i: (float(i % spec.width), float(i // spec.width))
                 for i in range(n_nodes)}
    all_edges = _grid_edges(spec.width, spec.height)

    for _ in range(GENERATION_ATTEMPTS):
        if spec.edge_keep < 1.0:
            kept = [e for e in all_edges if rng.random() < spec.edge_keep]
        else:
            kept = list(all_edges)
        adjacency: dict[int, list[int]] = {i: [] for i in range(n_nodes)}
        for a, b in kept:
            adjacency[a].append(b)
            adjacency[b].append(a)
        if not _connected(n_nodes, adjacency):
            continue
        objects = []
        for node in range(n_nodes):
            if rng.random() < spec.object_density:
                landmark = int(rng.integers(0, len(NOUNS)))
                bearing = float(rng.uniform(-math.pi, math.pi))
                objects.append(WorldObject(node, landmark, bearing))
        if not objects:
            continue
        return World(
            spec=spec,
            positions=positions,
            adjacency={n: tuple(sorted(v)) for n, v in adjacency.items()},
            objects=tuple(objects),
        )
    raise RuntimeError("world generation failed: disconnected graph or no objects "
                       f"after {GENERATION_ATTEMPTS} attempts")


def _nearest_landmark(world: World, node: int) -> int | None:
    """Noun id of the closest visible object, or None."""
    visible = world.visible_objects(node)
    if not visible:
        return None
    best = min(visible, key=lambda item: (item[0], item[2].landmark, item[2].node))
    return best[2].landmark


def generate_episode(world: World, seed: int, min_hops: int = 3,
                     max_hops: int = 8) -> Episode:
    """Sample a teacher path and render its templated instruction.

    The path is produced by replaying the teacher policy, so later
    teacher-forced rollouts reproduce it exactly. Every arrival node with
    a visible landmark contributes one noun; the goal always does.
    """
    rng = np.random.default_rng(seed)
    nodes = world.nodes()
    for _ in range(GENERATION_ATTEMPTS * 5):
        start = int(rng.choice(nodes))
        dist = world.distances_from(start)
        viable = [v for v in nodes
                  if min_hops - 1e-9 <= dist.get(v, math.inf) <= max_hops + 1e-9
                  and _nearest_landmark(world, v) is not None]
        if not viable:
            continue
        goal = int(rng.choice(sorted(viable)))
        path = _teacher_path(world, start, goal)
        instruction, truth = _render_instruction(world, path, rng)
        return Episode(instruction=tuple(instruction), landmark_truth=tuple(truth),
                       path=tuple(path), goal=goal, seed=seed)
    raise RuntimeError("episode generation failed: no landmark visible near any "
                       "reachable goal")


def _teacher_path(world: World, start: int, goal: int) -> list[int]:
    state = initial_state(world, start, goal)
    path = [start]
    while not state.terminated:
        action = teacher_action(world, state, goal)
        state = step(world, state, action)
        if state.current != path[-1]:
            path.append(state.current)
    return path


def _render_instruction(world: World, path: list[int], rng) -> tuple[list[int], list[int]]:
    instruction: list[int] = []
    truth: list[int] = []
    heading = 0.0
    for prev, here in zip(path[:-1], path[1:]):
        (xa, ya), (xb, yb) = world.positions[prev], world.positions[here]
        edge_angle = math.atan2(yb - ya, xb - xa)
        turn = normalize_angle(edge_angle - heading)
        heading = edge_angle
        verb = VERBS[int(rng.integers(0, len(VERBS)))]
        direction = _turn_word(turn, rng)
        instruction += [WORD_TO_ID[verb], WORD_TO_ID[direction]]
        landmark = _nearest_landmark(world, here)
        if landmark is not None and here != path[-1]:
            connector = "past" if rng.random() < 0.5 else "toward"
            instruction += [WORD_TO_ID[connector], WORD_TO_ID["the"],
                            WORD_TO_ID[NOUNS[landmark]]]
            truth.append(WORD_TO_ID[NOUNS[landmark]])
    goal_landmark = _nearest_landmark(world, path[-1])
    if goal_landmark is None:
        raise RuntimeError("no landmark visible at the goal")
    instruction += [WORD_TO_ID["stop"], WORD_TO_ID["at"], WORD_TO_ID["the"],
                    WORD_TO_ID[NOUNS[goal_landmark]]]
    truth.append(WORD_TO_ID[NOUNS[goal_landmark]])
    return instruction, truth


def _turn_word(turn: float, rng) -> str:
    quarter = math.pi / 2.0
    if abs(turn) < quarter / 2.0:
        return "forward" if rng.random() < 0.5 else "straight"
    if abs(abs(turn) - math.pi) < quarter / 2.0:
        return "back"
    return "left" if turn > 0 else "right"


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------

def initial_state(world: World, start: int, goal: int, max_steps: int = 15,
                  success_radius: float = 0.0) -> NavState:
    return NavState(current=start, heading=0.0, elapsed=0, history=(),
                    goal=goal, max_steps=max_steps, success_radius=success_radius)


def observe(world: World, state: NavState) -> Observation:
    """Panoramic observation: k angular sectors plus move candidates and STOP."""
    k = world.k
    sector = 2.0 * math.pi / k
    slot_features: list[list[int]] = [[] for _ in range(k)]
    for _, angle, obj in sorted(world.visible_objects(state.current),
                                key=lambda it: (it[0], it[2].landmark, it[2].node)):
        rel = normalize_angle(angle - state.heading)
        slot = int(round(rel / sector)) % k
        if obj.landmark not in slot_features[slot]:
            slot_features[slot].append(obj.landmark)
    views = tuple(
        View(features=tuple(slot_features[i]) or (EMPTY_FEATURE,),
             angle=normalize_angle(i * sector))
        for i in range(k))
    candidates = []
    x0, y0 = world.positions[state.current]
    for nbr in world.adjacency[state.current]:
        xn, yn = world.positions[nbr]
        rel = normalize_angle(math.atan2(yn - y0, xn - x0) - state.heading)
        slot = int(round(rel / sector)) % k
        candidates.append(Candidate(node=nbr, angle=rel,
                                    features=views[slot].features))
    candidates.append(Candidate(node=None, angle=0.0, features=(EMPTY_FEATURE,),
                                is_stop=True))
    return Observation(views=views, candidates=tuple(candidates))


def teacher_action(world: World, state: NavState, goal: int) -> int:
    """Index of the candidate on a shortest path to `goal` (STOP at the goal).

    Ties prefer the smallest |relative angle|, then the smallest node id.
    """
    dist = world.distances_from(goal)
    if state.current not in dist:
        raise ValueError(f"goal {goal} unreachable from node {state.current}")
    obs = observe(world, state)
    if state.current == goal:
        return obs.stop_index
    here = dist[state.current]
    best: tuple[float, int] | None = None
    best_index = None
    for index, cand in enumerate(obs.candidates):
        if cand.is_stop:
            continue
        via = dist.get(cand.node, math.inf) + world.edge_length(state.current, cand.node)
        if via > here + 1e-9:
            continue
        key = (abs(cand.angle), cand.node)
        if best is None or key < best:
            best = key
            best_index = index
    if best_index is None:
        raise ValueError("no candidate advances toward the goal")
    return best_index


def step(world: World, state: NavState, action: int) -> NavState:
    """Execute one candidate (or STOP); returns the successor state."""
    if state.terminated:
        raise ValueError("cannot step a terminated episode")
    obs = observe(world, state)
    if not (0 <= action < len(obs.candidates)):
        raise ValueError(f"invalid candidate index {action}")
    cand = obs.candidates[action]
    if cand.is_stop:
        success = world.geodesic(state.current, state.goal) <= state.success_radius + 1e-9
        return replace(state, elapsed=state.elapsed + 1, terminated=True,
                       success=success, history=state.history + ((obs, 0.0),))
    x0, y0 = world.positions[state.current]
    xn, yn = world.positions[cand.node]
    new_heading = math.atan2(yn - y0, xn - x0)
    turned = normalize_angle(new_heading - state.heading)
    elapsed = state.elapsed + 1
    nxt = replace(state, current=cand.node, heading=new_heading, elapsed=elapsed,
                  history=state.history + ((obs, turned),))
    if elapsed >= state.max_steps:
        success = world.geodesic(cand.node, state.goal) <= state.success_radius + 1e-9
        nxt = replace(nxt, terminated=True, success=success)
    return nxt


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1


def world_to_json(world: World) -> str:
    payload = {
        "version": FORMAT_VERSION,
        "spec": {
            "width": world.spec.width, "height": world.spec.height,
            "object_density": world.spec.object_density, "k": world.spec.k,
            "edge_keep": world.spec.edge_keep,
            "visibility_radius": world.spec.visibility_radius,
            "seed": world.spec.seed,
        },
        "positions": {str(n): list(p) for n, p in sorted(world.positions.items())},
        "adjacency": {str(n): list(v) for n, v in sorted(world.adjacency.items())},
        "objects": [[o.node, o.landmark, o.bearing] for o in world.objects],
    }
    return json.dumps(payload, sort_keys=True, indent=1)


def world_from_json(text: str) -> World:
    payload = json.loads(text)
    if payload.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported world format version: {payload.get('version')}")
    spec = WorldSpec(**payload["spec"])
    return World(
        spec=spec,
        positions={int(n): tuple(p) for n, p in payload["positions"].items()},
        adjacency={int(n): tuple(v) for n, v in payload["adjacency"].items()},
        objects=tuple(WorldObject(int(n), int(l), float(b))
                      for n, l, b in payload["objects"]),
    )


def episode_to_json(episode: Episode) -> str:
    payload = {
        "version": FORMAT_VERSION,
        "instruction": list(episode.instruction),
        "landmark_truth": list(episode.landmark_truth),
        "path": list(episode.path),
        "goal": episode.goal,
        "seed": episode.seed,
    }
    return json.dumps(payload, sort_keys=True, indent=1)


def episode_from_json(text: str) -> Episode:
    payload = json.loads(text)
    if payload.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported episode format version: {payload.get('version')}")
    return Episode(
        instruction=tuple(payload["instruction"]),
        landmark_truth=tuple(payload["landmark_truth"]),
        path=tuple(payload["path"]),
        goal=int(payload["goal"]),
        seed=int(payload["seed"]),
    )
