"""Relaxed-parsimony haplotype networks and the trees they contain.

A network holds the observed haplotypes plus inferred intermediates; a
tree is the network minus ``n_loop`` deleted edges. Trees are keyed by the
sorted tuple of deleted edge indices, which doubles as the hashing key.
"""

from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EnumerationUnavailable, SaturationError
from .seqio import HaplotypeData

DEFAULT_NODE_BUDGET = 5000
DEFAULT_TREE_CAP = 12


@dataclass(frozen=True)
class Network:
    codes: np.ndarray  # (V, L) state codes; rows [0, n_observed) are the observed haplotypes
    counts: np.ndarray  # observation count per node, 0 for intermediates
    edges: list[tuple[int, int]]
    adjacency: list[list[int]]
    loop_edges: list[list[int]]  # fundamental cycles as lists of edge indices
    edge_index: dict[tuple[int, int], int] = field(repr=False)
    cotree: tuple[int, ...] = ()  # edges outside the DFS tree, one per loop

    @property
    def n_nodes(self) -> int:
        return self.codes.shape[0]

    @property
    def n_observed(self) -> int:
        return int((self.counts > 0).sum())

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_loop(self) -> int:
        return len(self.loop_edges)

    @property
    def cycle_edges(self) -> list[int]:
        """Edges lying on at least one loop, i.e. the deletable ones."""
        return sorted({e for loop in self.loop_edges for e in loop})

    def edge_id(self, u: int, v: int) -> int:
        return self.edge_index[(u, v) if u < v else (v, u)]

    def to_json(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "counts": [int(c) for c in self.counts],
            "codes": self.codes.tolist(),
            "edges": [list(e) for e in self.edges],
            "loops": self.loop_edges,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Network":
        codes = np.asarray(doc["codes"], dtype=np.int8).reshape(doc["n_nodes"], -1)
        return _assemble(codes, np.asarray(doc["counts"], dtype=int), [tuple(e) for e in doc["edges"]])


@dataclass(frozen=True)
class TreeState:
    deleted: tuple[int, ...]
    root: int


def _hamming_rows(codes: np.ndarray, row: np.ndarray) -> np.ndarray:
    return (codes != row).sum(axis=1)


def _distance_one_edges(codes: np.ndarray, start: int = 0) -> set[tuple[int, int]]:
    """Edges at Hamming distance 1 involving at least one node >= start."""
    out = set()
    for i in range(start, codes.shape[0]):
        dist = _hamming_rows(codes, codes[i])
        for j in np.flatnonzero(dist == 1):
            j = int(j)
            if j == i:
                continue
            out.add((j, i) if j < i else (i, j))
    return out


def _components(n: int, edges) -> np.ndarray:
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in edges:
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
    roots = [find(i) for i in range(n)]
    relabel: dict[int, int] = {}
    return np.array([relabel.setdefault(r, len(relabel)) for r in roots], dtype=int)


def _fundamental_cycles(n: int, edges, adjacency, edge_index) -> list[list[int]]:
    parent = [-1] * n
    depth = [-1] * n
    tree_edges = set()
    for s in range(n):
        if depth[s] >= 0:
            continue
        depth[s] = 0
        stack = [s]
        while stack:
            u = stack.pop()
            for v in adjacency[u]:
                if depth[v] < 0:
                    depth[v] = depth[u] + 1
                    parent[v] = u
                    tree_edges.add(edge_index[(min(u, v), max(u, v))])
                    stack.append(v)
    loops = []
    for k, (u, v) in enumerate(edges):
        if k in tree_edges:
            continue
        cyc = [k]
        a, b = u, v
        while a != b:
            if depth[a] >= depth[b]:
                cyc.append(edge_index[(min(a, parent[a]), max(a, parent[a]))])
                a = parent[a]
            else:
                cyc.append(edge_index[(min(b, parent[b]), max(b, parent[b]))])
                b = parent[b]
        loops.append(sorted(cyc))
    cotree = tuple(k for k in range(len(edges)) if k not in tree_edges)
    return loops, cotree


def _assemble(codes: np.ndarray, counts: np.ndarray, edge_set) -> Network:
    edges = sorted(edge_set)
    edge_index = {e: k for k, e in enumerate(edges)}
    adjacency: list[list[int]] = [[] for _ in range(codes.shape[0])]
    for u, v in edges:
        adjacency[u].append(v)
        adjacency[v].append(u)
    for nb in adjacency:
        nb.sort()
    loops, cotree = _fundamental_cycles(codes.shape[0], edges, adjacency, edge_index)
    return Network(
        codes=codes,
        counts=np.asarray(counts, dtype=int),
        edges=edges,
        adjacency=adjacency,
        loop_edges=loops,
        edge_index=edge_index,
        cotree=cotree,
    )


def network_from_edges(n_nodes: int, edges, counts=None) -> Network:
    """Build a Network directly from an edge list (toy graphs, tests)."""
    counts = np.ones(n_nodes, dtype=int) if counts is None else np.asarray(counts, dtype=int)
    edge_set = {(min(u, v), max(u, v)) for u, v in edges}
    codes = np.zeros((n_nodes, 0), dtype=np.int8)
    return _assemble(codes, counts, edge_set)


def build_network(h: HaplotypeData, ds: int = 0, node_budget: int = DEFAULT_NODE_BUDGET) -> Network:
    """Connect haplotypes under relaxed parsimony.

    Haplotypes one mutation apart are joined. While the graph is
    disconnected, every cross-component pair within ``d_min + ds``
    mutations contributes all intermediates on its shortest mutation
    paths, and distance-1 edges are recomputed over the enlarged node set.
    """
    if ds < 0 or ds > 20:
        raise ValueError(f"ds must be in [0, 20], got {ds}")
    codes = np.array(h.codes, dtype=np.int8, copy=True)
    counts = list(int(c) for c in h.counts)
    seen = {row.tobytes(): i for i, row in enumerate(codes)}
    edges = _distance_one_edges(codes)
    n_inferred = 0

    while True:
        comp = _components(codes.shape[0], edges)
        if comp.max() == 0:
            break
        pairs = []
        d_min = None
        for i in range(codes.shape[0]):
            dist = _hamming_rows(codes[i + 1:], codes[i])
            other = comp[i + 1:] != comp[i]
            if not other.any():
                continue
            dm = int(dist[other].min())
            d_min = dm if d_min is None else min(d_min, dm)
            pairs.append((i, dist, other))
        threshold = d_min + ds
        new_rows = []
        for i, dist, other in pairs:
            for off in np.flatnonzero(other & (dist <= threshold)):
                j = i + 1 + int(off)
                a, b = codes[i], codes[j]
                diff = np.flatnonzero(a != b)
                if 2 ** len(diff) - 2 > node_budget:
                    raise SaturationError(
                        f"connecting haplotypes {i} and {j} ({len(diff)} mutations apart) exceeds the "
                        f"budget of {node_budget} inferred intermediates; the data may show mutational "
                        "saturation or excessive homoplasy, try a smaller ds"
                    )
                for choice in itertools.product((0, 1), repeat=len(diff)):
                    if all(choice) or not any(choice):
                        continue
                    row = a.copy()
                    for site, take_b in zip(diff, choice):
                        if take_b:
                            row[site] = b[site]
                    key = row.tobytes()
                    if key not in seen:
                        seen[key] = len(seen)
                        new_rows.append(row)
                if n_inferred + len(new_rows) > node_budget:
                    raise SaturationError(
                        f"more than {node_budget} inferred intermediates needed; the data may show "
                        "mutational saturation or excessive homoplasy, try a smaller ds"
                    )
        start = codes.shape[0]
        if new_rows:
            codes = np.vstack([codes, np.array(new_rows, dtype=np.int8)])
            counts.extend([0] * len(new_rows))
            n_inferred += len(new_rows)
        if not new_rows:
            raise RuntimeError("network construction made no progress")
        edges |= _distance_one_edges(codes, start)
    return _assemble(codes, np.asarray(counts), edges)


# --------------------------------------------------------------------------
# trees inside the network


def tree_adjacency(net: Network, deleted) -> list[list[int]]:
    gone = set(deleted)
    adj: list[list[int]] = [[] for _ in range(net.n_nodes)]
    for k, (u, v) in enumerate(net.edges):
        if k not in gone:
            adj[u].append(v)
            adj[v].append(u)
    return adj


def is_spanning_tree(net: Network, deleted) -> bool:
    deleted = set(deleted)
    if len(deleted) != net.n_loop:
        return False
    kept = [e for k, e in enumerate(net.edges) if k not in deleted]
    return len(kept) == net.n_nodes - 1 and _components(net.n_nodes, kept).max() == 0


def enumerate_trees(net: Network, cap: int = DEFAULT_TREE_CAP) -> tuple[int, list[tuple[int, ...]]]:
    """All spanning trees of the network as sorted deleted-edge tuples.

    Backtracks over the deletable edges with a union-find on kept edges.
    """
    if net.n_loop > cap:
        raise EnumerationUnavailable(f"network has {net.n_loop} loops, enumeration cap is {cap}")
    if net.n_loop == 0:
        return 1, [()]
    candidates = net.cycle_edges
    forced = [e for k, e in enumerate(net.edges) if k not in set(candidates)]
    base = list(range(net.n_nodes))

    def find(parent, x):
        while parent[x] != x:
            x = parent[x]
        return x

    for u, v in forced:
        ru, rv = find(base, u), find(base, v)
        base[ru] = rv
    out: list[tuple[int, ...]] = []
    need = net.n_loop

    def rec(pos, parent, deleted):
        if len(deleted) > need:
            return
        if pos == len(candidates):
            if len(deleted) == need:
                out.append(tuple(deleted))
            return
        k = candidates[pos]
        u, v = net.edges[k]
        ru, rv = find(parent, u), find(parent, v)
        if ru != rv:
            p2 = parent.copy()
            p2[ru] = rv
            rec(pos + 1, p2, deleted)
        if len(deleted) < need:
            rec(pos + 1, parent, deleted + [k])

    rec(0, base, [])
    return len(out), out


def tree_cycle(net: Network, deleted, edge: int) -> list[int]:
    """Edges of the unique cycle created by restoring ``edge`` to the tree.

    ``deleted`` describes the tree and must contain ``edge``.
    """
    if edge not in deleted:
        raise ValueError(f"edge {edge} is already in the tree")
    adj = tree_adjacency(net, deleted)
    u, v = net.edges[edge]
    prev = {u: None}
    queue = deque([u])
    while queue:
        x = queue.popleft()
        if x == v:
            break
        for y in adj[x]:
            if y not in prev:
                prev[y] = x
                queue.append(y)
    path = []
    x = v
    while prev[x] is not None:
        path.append(net.edge_id(x, prev[x]))
        x = prev[x]
    return sorted(path + [edge])


def propose_tree(net: Network, deleted: tuple[int, ...], rng) -> tuple[int, ...]:
    """Restore one deleted edge and delete a uniform edge of the loop it closes.

    Symmetric: the reverse move restores the newly deleted edge and closes
    the same loop.
    """
    if not deleted:
        return deleted
    e = deleted[rng.integers(len(deleted))]
    cyc = tree_cycle(net, deleted, e)
    f = cyc[rng.integers(len(cyc))]
    if f == e:
        return deleted
    return tuple(sorted([d for d in deleted if d != e] + [f]))


def default_tree(net: Network) -> tuple[int, ...]:
    """Deterministic starting tree: the DFS tree used for the loop basis."""
    return tuple(net.cotree)


def rooted_children(adj: list[list[int]], root: int) -> tuple[list[list[int]], list[int]]:
    """Children lists and BFS order for a tree rooted at ``root``."""
    children: list[list[int]] = [[] for _ in adj]
    order = [root]
    seen = {root}
    i = 0
    while i < len(order):
        u = order[i]
        i += 1
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                children[u].append(v)
                order.append(v)
    return children, order


# --------------------------------------------------------------------------
# tree hashing and edge posteriors


def tree_key(deleted, n_edges: int) -> int:
    """Mixed-radix integer for a sorted deleted-edge vector; injective."""
    key = 0
    for e in deleted:
        key = key * (n_edges + 1) + (e + 1)
    return key


def tree_from_key(key: int, n_edges: int, n_loop: int) -> tuple[int, ...]:
    out = []
    for _ in range(n_loop):
        key, digit = divmod(key, n_edges + 1)
        out.append(digit - 1)
    return tuple(reversed(out))


class TreeHashTable:
    """Visit counts per tree, keyed by the exact integer encoding of the tree."""

    def __init__(self, n_edges: int, n_loop: int):
        self.n_edges = n_edges
        self.n_loop = n_loop
        self.counts: dict[int, int] = {}
        self.total = 0

    def record(self, deleted, weight: int = 1) -> None:
        if len(deleted) != self.n_loop:
            raise ValueError(f"deleted vector has length {len(deleted)}, expected {self.n_loop}")
        key = tree_key(deleted, self.n_edges)
        self.counts[key] = self.counts.get(key, 0) + weight
        self.total += weight

    def count(self, deleted) -> int:
        return self.counts.get(tree_key(deleted, self.n_edges), 0)

    def items(self):
        for key, c in sorted(self.counts.items()):
            yield tree_from_key(key, self.n_edges, self.n_loop), c

    def mode(self) -> tuple[int, ...]:
        key = min(self.counts, key=lambda k: (-self.counts[k], k))
        return tree_from_key(key, self.n_edges, self.n_loop)

    def merge(self, other: "TreeHashTable") -> "TreeHashTable":
        out = TreeHashTable(self.n_edges, self.n_loop)
        for table in (self, other):
            for key, c in table.counts.items():
                out.counts[key] = out.counts.get(key, 0) + c
            out.total += table.total
        return out

    def to_json(self) -> dict:
        return {
            "n_edges": self.n_edges,
            "n_loop": self.n_loop,
            "total": self.total,
            "trees": [{"deleted": list(d), "count": c} for d, c in self.items()],
        }

    @classmethod
    def from_json(cls, doc) -> "TreeHashTable":
        table = cls(doc["n_edges"], doc["n_loop"])
        for entry in doc["trees"]:
            table.record(tuple(entry["deleted"]), entry["count"])
        return table


def hash_tree(t: TreeState, table: TreeHashTable) -> TreeHashTable:
    table.record(t.deleted)
    return table


def edge_posterior(samples, net: Network) -> np.ndarray:
    """Fraction of sampled trees containing each network edge.

    ``samples`` is an iterable of TreeState or deleted-edge tuples.
    """
    deleted_counts = np.zeros(net.n_edges)
    n = 0
    for s in samples:
        deleted = s.deleted if isinstance(s, TreeState) else s
        for e in deleted:
            deleted_counts[e] += 1
        n += 1
    if n == 0:
        raise ValueError("edge_posterior needs at least one sample")
    return 1.0 - deleted_counts / n


def write_edge_list(net: Network, path, deleted=()) -> None:
    gone = set(deleted)
    lines = [f"{u + 1} {v + 1}" for k, (u, v) in enumerate(net.edges) if k not in gone]
    Path(path).write_text("\n".join(lines) + "\n")


def write_network_json(net: Network, path) -> None:
    Path(path).write_text(json.dumps(net.to_json(), indent=1))
