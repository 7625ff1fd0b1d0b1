"""Network graphs: geometric generation, degree capping, and Sybil placement.

Honest overlays are random geometric graphs on the unit square, thinned to a
degree bound while staying connected.  Attack edges are spread over the
honest graph by hop distance using K-medoids and then grouped onto the
fewest Sybils that respect the degree bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, Optional, Tuple

import numpy as np

# Reporting boundary between the sparse and distributed attack regimes.  It
# labels plans only and affects no placement decision.
SPARSE_EPSILON = 0.25

CONNECT_RETRY_BUDGET = 100


class GenerationFailure(RuntimeError):
    """Raised when a connected graph cannot be generated within the retry budget."""


class CappingFailure(RuntimeError):
    """Raised when no edge can be removed without disconnecting the graph."""


class PlanningFailure(RuntimeError):
    """Raised when attack edges cannot be placed within the degree bound."""


class AttachmentFailure(RuntimeError):
    """Raised when attaching Sybils would violate a topology invariant."""


Edge = Tuple[int, int]


def _norm_edge(a: int, b: int) -> Edge:
    if a == b:
        raise ValueError(f"self-loop on node {a}")
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class Topology:
    """Undirected graph of honest nodes plus Sybils, with a degree bound."""

    honest: FrozenSet[int]
    sybils: FrozenSet[int]
    edges: FrozenSet[Edge]
    degree_bound: int

    def __post_init__(self):
        object.__setattr__(self, "honest", frozenset(self.honest))
        object.__setattr__(self, "sybils", frozenset(self.sybils))
        object.__setattr__(
            self, "edges", frozenset(_norm_edge(a, b) for a, b in self.edges)
        )

    @property
    def nodes(self) -> FrozenSet[int]:
        return self.honest | self.sybils

    def neighbors(self, node: int) -> list[int]:
        """Neighbor ids in ascending order."""
        out = [b if a == node else a for a, b in self.edges if node in (a, b)]
        return sorted(out)

    def adjacency(self) -> Dict[int, list[int]]:
        adj: Dict[int, list[int]] = {n: [] for n in self.nodes}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return {n: sorted(v) for n, v in adj.items()}

    def degree(self, node: int) -> int:
        return sum(1 for a, b in self.edges if node in (a, b))

    def to_json_dict(self) -> dict:
        return {
            "nodes": sorted(self.honest),
            "sybils": sorted(self.sybils),
            "edges": sorted([a, b] for a, b in self.edges),
            "degree_bound": self.degree_bound,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "Topology":
        return cls(
            honest=frozenset(obj["nodes"]),
            sybils=frozenset(obj.get("sybils", [])),
            edges=frozenset(tuple(e) for e in obj["edges"]),
            degree_bound=int(obj["degree_bound"]),
        )


def _is_connected(nodes: Iterable[int], adj: Dict[int, list[int]]) -> bool:
    nodes = set(nodes)
    if len(nodes) <= 1:
        return True
    start = next(iter(nodes))
    seen = {start}
    stack = [start]
    while stack:
        for m in adj[stack.pop()]:
            if m in nodes and m not in seen:
                seen.add(m)
                stack.append(m)
    return seen == nodes


def validate_topology(t: Topology) -> None:
    """Check every structural invariant; raise ValueError on the first breach."""
    if t.honest & t.sybils:
        raise ValueError("honest and sybil id sets overlap")
    adj = t.adjacency()
    for a, b in t.edges:
        if a not in t.nodes or b not in t.nodes:
            raise ValueError(f"edge ({a}, {b}) touches an unknown node")
    for node in sorted(t.nodes):
        if len(adj[node]) > t.degree_bound:
            raise ValueError(
                f"node {node} has degree {len(adj[node])} > bound {t.degree_bound}"
            )
        if not any(m in t.honest for m in adj[node]):
            raise ValueError(f"node {node} has no honest neighbor")
    honest_adj = {
        n: [m for m in adj[n] if m in t.honest] for n in t.honest
    }
    if not _is_connected(t.honest, honest_adj):
        raise ValueError("honest subgraph is not connected")


def random_geometric_graph(n: int, radius: float, seed: int) -> Topology:
    """Connected random geometric graph of ``n`` honest nodes on the unit square.

    Points are uniform; nodes are joined when closer than ``radius``.  Point
    sets are redrawn from fresh sub-seeds until the graph comes out connected,
    up to a fixed retry budget.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    if not 0 < radius <= math.sqrt(2):
        raise ValueError("radius must lie in (0, sqrt(2)]")
    root = np.random.SeedSequence(seed)
    for attempt_seed in root.spawn(CONNECT_RETRY_BUDGET):
        rng = np.random.default_rng(attempt_seed)
        points = rng.uniform(0.0, 1.0, (n, 2))
        diff = points[:, None, :] - points[None, :, :]
        close = np.sqrt((diff ** 2).sum(axis=2)) < radius
        edges = frozenset(
            (i, j) for i in range(n) for j in range(i + 1, n) if close[i, j]
        )
        topo = Topology(
            honest=frozenset(range(n)),
            sybils=frozenset(),
            edges=edges,
            degree_bound=n,
        )
        if _is_connected(topo.honest, topo.adjacency()):
            return topo
    raise GenerationFailure(
        f"no connected geometric graph after {CONNECT_RETRY_BUDGET} attempts "
        f"(n={n}, radius={radius})"
    )


def cap_degrees(g: Topology, e: int, seed: int) -> Topology:
    """Remove random edges until every degree is within ``e``.

    Only edges touching an over-degree node are candidates, and only those
    whose removal keeps the graph in a single connected component.
    """
    if e < 2:
        raise ValueError("degree bound must be >= 2")
    rng = np.random.default_rng(seed)
    edges = set(g.edges)
    degree = {n: 0 for n in g.nodes}
    for a, b in edges:
        degree[a] += 1
        degree[b] += 1

    def removal_keeps_connected(edge: Edge) -> bool:
        trial = edges - {edge}
        adj: Dict[int, list[int]] = {n: [] for n in g.nodes}
        for a, b in trial:
            adj[a].append(b)
            adj[b].append(a)
        return _is_connected(g.nodes, adj)

    while True:
        over = [n for n in g.nodes if degree[n] > e]
        if not over:
            break
        candidates = sorted(
            edge
            for edge in edges
            if (degree[edge[0]] > e or degree[edge[1]] > e)
            and removal_keeps_connected(edge)
        )
        if not candidates:
            raise CappingFailure(
                f"nodes {sorted(over)} exceed degree {e} but every incident edge is a bridge"
            )
        a, b = candidates[rng.integers(len(candidates))]
        edges.discard((a, b))
        degree[a] -= 1
        degree[b] -= 1

    return Topology(g.honest, g.sybils, frozenset(edges), min(g.degree_bound, max(e, 2)))


def bfs_distances(g: Topology, sources: Iterable[int]) -> Dict[int, int]:
    """Multi-source shortest hop counts; unreachable nodes are absent."""
    sources = set(sources)
    if not sources:
        raise ValueError("sources must be non-empty")
    adj = g.adjacency()
    dist = {s: 0 for s in sources}
    frontier = sorted(sources)
    hops = 0
    while frontier:
        hops += 1
        nxt = []
        for node in frontier:
            for m in adj[node]:
                if m not in dist:
                    dist[m] = hops
                    nxt.append(m)
        frontier = sorted(set(nxt))
    return dist


def _kmedoids_cost(dist: np.ndarray, medoids: list[int]) -> float:
    return float(dist[:, medoids].min(axis=1).sum())


def kmedoids(dist: np.ndarray, k: int, seed: int) -> list[int]:
    """PAM-style K-medoids over a symmetric distance matrix.

    Starts from a seeded random medoid set and greedily applies the best
    improving (medoid, non-medoid) swap until the total within-cluster
    distance stops decreasing.  Returns the medoid indices sorted ascending.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if dist.shape != (n, n):
        raise ValueError("dist must be square")
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    medoids = sorted(rng.choice(n, size=k, replace=False).tolist())
    cost = _kmedoids_cost(dist, medoids)
    improved = True
    while improved:
        improved = False
        best = (cost, None)
        medoid_set = set(medoids)
        for m in medoids:
            for o in range(n):
                if o in medoid_set:
                    continue
                trial = sorted(medoid_set - {m} | {o})
                trial_cost = _kmedoids_cost(dist, trial)
                if trial_cost < best[0] - 1e-12:
                    best = (trial_cost, trial)
        if best[1] is not None:
            cost, medoids = best
            improved = True
    return sorted(medoids)


def classify_scenario(phi: float, epsilon: float = SPARSE_EPSILON) -> str:
    """Label an attack density: dense (phi >= 2), sparse (phi <= epsilon), else distributed."""
    if phi >= 2:
        return "dense"
    if phi <= epsilon:
        return "sparse"
    return "distributed"


@dataclass(frozen=True)
class SSPPlan:
    """Attack-edge placement: which Sybil connects to which honest node."""

    phi: float
    attack_edges: Tuple[Tuple[int, int], ...]  # (sybil id, honest id)
    sybil_count: int

    @property
    def scenario(self) -> str:
        return classify_scenario(self.phi)

    def edges_per_honest(self) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for _, honest in self.attack_edges:
            counts[honest] = counts.get(honest, 0) + 1
        return counts

    def to_json_dict(self) -> dict:
        return {
            "phi": self.phi,
            "scenario": self.scenario,
            "sybil_count": self.sybil_count,
            "attack_edges": sorted([s, h] for s, h in self.attack_edges),
        }


def plan_ssp_attack(g: Topology, phi: float, seed: int) -> SSPPlan:
    """Place ceil(|N| * phi) attack edges, spread as evenly as possible.

    Every honest node receives floor(phi) base edges; the remainder goes to
    the K-medoids of the honest graph's hop-distance matrix, which spreads
    the extra edges as far apart as hop distance allows.  Edge endpoints are
    then dealt onto the minimum number of Sybils such that no Sybil exceeds
    the degree bound or connects twice to the same honest node.
    """
    if phi <= 0:
        raise ValueError("phi must be > 0")
    honest = sorted(g.honest)
    n = len(honest)
    adj = g.adjacency()
    if not _is_connected(g.honest, adj):
        raise ValueError("honest graph must be connected")

    # Guard float fuzz so e.g. 10 * 0.2 still counts as exactly 2 edges.
    total = math.ceil(n * phi - 1e-9)
    base = math.floor(phi + 1e-9)
    counts = {node: base for node in honest}
    extra = total - base * n
    if extra > 0:
        index_of = {node: i for i, node in enumerate(honest)}
        dist = np.zeros((n, n))
        for node in honest:
            hops = bfs_distances(g, {node})
            for other in honest:
                dist[index_of[node], index_of[other]] = hops[other]
        for medoid_index in kmedoids(dist, extra, seed):
            counts[honest[medoid_index]] += 1

    # Honest nodes near the degree bound cannot take all their edges; push the
    # excess to the nearest honest node (by hops) that still has room.
    capacity = {node: g.degree_bound - len(adj[node]) for node in honest}
    for node in honest:
        while counts[node] > capacity[node]:
            hops = bfs_distances(g, {node})
            room = [
                m for m in honest if m != node and counts[m] < capacity[m]
            ]
            if not room:
                raise PlanningFailure(
                    f"{total} attack edges cannot fit under degree bound {g.degree_bound}"
                )
            room.sort(key=lambda m: (hops.get(m, math.inf), m))
            counts[node] -= 1
            counts[room[0]] += 1

    # Deal endpoints onto Sybils: copies of one honest node sit consecutively,
    # so round-robin over max(ceil(total/bound), max count) Sybils keeps them
    # on distinct Sybils and under the degree bound.
    max_count = max(counts.values(), default=0)
    sybil_count = max(math.ceil(total / g.degree_bound), max_count)
    first_sybil = max(honest) + 1
    items = [node for node in honest for _ in range(counts[node])]
    attack_edges = tuple(
        (first_sybil + position % sybil_count, node)
        for position, node in enumerate(items)
    )
    return SSPPlan(phi=phi, attack_edges=attack_edges, sybil_count=sybil_count)


def build_attack_network(
    n: int,
    radius: float,
    degree_bound: int,
    phi: Optional[float],
    seed: int,
) -> Tuple[Topology, Optional[SSPPlan], Topology]:
    """Full network pipeline: generate, cap, plan the attack, attach Sybils.

    The honest graph is capped at ``degree_bound`` minus the largest
    per-node attack-edge count (ceil(phi)), so attack edges never push any
    honest node over the bound and the even spread survives intact.
    Returns (honest graph, plan, full graph); without an attack the plan is
    None and both graphs are the same object.
    """
    if degree_bound < 2:
        raise ValueError("degree_bound must be >= 2")
    headroom = 0 if phi is None else math.ceil(phi - 1e-9)
    honest_cap = degree_bound - headroom
    if honest_cap < 2:
        raise ValueError(
            f"degree bound {degree_bound} leaves no room for "
            f"{headroom} attack edges per node plus an honest graph"
        )
    sub = np.random.SeedSequence(seed).generate_state(3)
    g = random_geometric_graph(n, radius, int(sub[0]))
    capped = cap_degrees(g, honest_cap, int(sub[1]))
    honest = Topology(
        honest=capped.honest,
        sybils=frozenset(),
        edges=capped.edges,
        degree_bound=degree_bound,
    )
    if phi is None:
        return honest, None, honest
    plan = plan_ssp_attack(honest, phi, int(sub[2]))
    return honest, plan, attach_sybils(honest, plan)


def attach_sybils(g: Topology, plan: SSPPlan) -> Topology:
    """Add the plan's Sybil nodes and attack edges to an honest graph."""
    degree = {node: g.degree(node) for node in g.honest}
    for _, honest in plan.attack_edges:
        if honest not in g.honest:
            raise AttachmentFailure(f"attack edge targets unknown node {honest}")
        degree[honest] += 1
    over = sorted(node for node, d in degree.items() if d > g.degree_bound)
    if over:
        raise AttachmentFailure(
            f"attack edges push honest nodes {over} over degree {g.degree_bound}"
        )
    sybils = frozenset(s for s, _ in plan.attack_edges)
    topo = Topology(
        honest=g.honest,
        sybils=g.sybils | sybils,
        edges=g.edges | {_norm_edge(s, h) for s, h in plan.attack_edges},
        degree_bound=g.degree_bound,
    )
    validate_topology(topo)
    return topo
