"""Temporal orderings of replication and mutation events on a rooted tree.

Starting from one copy of the root, each node replicates
``count + children - 1`` times and mutates once into each child. A
mutation consumes a copy of the parent and creates the child with one
copy. An ordering is valid when no event acts on a node with zero copies.
Replications of one node are interchangeable; mutations into distinct
children are not.

The number of valid orderings for a root and tree is proportional to the
posterior of that (root, tree) pair. It is counted exactly by memoised
recursion for small trees and estimated without bias by ``1/q`` of a
sequentially drawn ordering otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EnumerationUnavailable
from .haplonet import Network, TreeState, enumerate_trees, rooted_children, tree_adjacency

DEFAULT_EVENT_CAP = 22

REPLICATE = "replicate"
MUTATE = "mutate"


@dataclass(frozen=True)
class EventSchedule:
    root: int
    counts: tuple[int, ...]
    children: tuple[tuple[int, ...], ...]
    parent: tuple[int, ...]
    replications: tuple[int, ...]

    @property
    def n_nodes(self) -> int:
        return len(self.counts)

    @property
    def total_events(self) -> int:
        return sum(self.replications) + sum(len(c) for c in self.children)

    @property
    def feasible(self) -> bool:
        return all(r >= 0 for r in self.replications)


@dataclass
class OrderingDraw:
    events: list[tuple[int, str, int]]  # (node, kind, child or -1)
    log_q: float


def schedule_from_children(counts, children, root: int) -> EventSchedule:
    counts = tuple(int(c) for c in counts)
    children = tuple(tuple(int(x) for x in ch) for ch in children)
    parent = [-1] * len(counts)
    for u, ch in enumerate(children):
        for v in ch:
            parent[v] = u
    repl = tuple(counts[h] + len(children[h]) - 1 for h in range(len(counts)))
    return EventSchedule(root, counts, children, tuple(parent), repl)


def event_schedule(net: Network, t: TreeState) -> EventSchedule:
    adj = tree_adjacency(net, t.deleted)
    children, _ = rooted_children(adj, t.root)
    return schedule_from_children(net.counts, children, t.root)


# --------------------------------------------------------------------------
# exact counting


def count_schedule_exact(s: EventSchedule, cap: int = DEFAULT_EVENT_CAP) -> int:
    """Number of valid orderings, by memoised recursion over remaining budgets."""
    if not s.feasible:
        return 0
    if s.total_events > cap:
        raise EnumerationUnavailable(f"{s.total_events} events exceeds the exact-count cap of {cap}")
    n = s.n_nodes
    child_bit = [[1 << k for k in range(len(s.children[h]))] for h in range(n)]
    memo: dict[tuple, int] = {}

    # state: (copies..., repl_left..., mut_mask...)
    def rec(state: tuple) -> int:
        hit = memo.get(state)
        if hit is not None:
            return hit
        copies, repl, mask = state[:n], state[n:2 * n], state[2 * n:]
        total = 0
        done = True
        for h in range(n):
            c = copies[h]
            if c == 0:
                continue
            r, mk = repl[h], mask[h]
            if r == 0 and mk == 0:
                continue
            done = False
            remaining = r + bin(mk).count("1")
            if r > 0:
                nc = list(state)
                nc[h] += 1
                nc[n + h] -= 1
                total += rec(tuple(nc))
            if mk and (c >= 2 or remaining == 1):
                for k, bit in enumerate(child_bit[h]):
                    if mk & bit:
                        child = s.children[h][k]
                        nc = list(state)
                        nc[h] -= 1
                        nc[2 * n + h] = mk & ~bit
                        nc[child] = 1
                        total += rec(tuple(nc))
        if done:
            total = 1 if all(copies[h] == s.counts[h] for h in range(n)) else 0
        memo[state] = total
        return total

    copies0 = [0] * n
    copies0[s.root] = 1
    masks = [(1 << len(s.children[h])) - 1 for h in range(n)]
    return rec(tuple(copies0) + tuple(s.replications) + tuple(masks))


def count_schedule_naive(s: EventSchedule) -> int:
    """Independent oracle: enumerate event sequences, requiring only that
    every event acts on a node currently holding at least one copy."""
    if not s.feasible:
        return 0
    n = s.n_nodes
    copies = [0] * n
    copies[s.root] = 1
    repl = list(s.replications)
    pending = [list(ch) for ch in s.children]

    def rec() -> int:
        if not any(repl) and not any(pending):
            return 1
        total = 0
        for h in range(n):
            if copies[h] < 1:
                continue
            if repl[h]:
                repl[h] -= 1
                copies[h] += 1
                total += rec()
                copies[h] -= 1
                repl[h] += 1
            for child in list(pending[h]):
                pending[h].remove(child)
                copies[h] -= 1
                copies[child] += 1
                total += rec()
                copies[child] -= 1
                copies[h] += 1
                pending[h].append(child)
                pending[h].sort()
        return total

    return rec()


def count_orderings_exact(net: Network, t: TreeState, cap: int = DEFAULT_EVENT_CAP) -> int:
    return count_schedule_exact(event_schedule(net, t), cap)


# --------------------------------------------------------------------------
# sequential draws


def draw_schedule(s: EventSchedule, rng) -> OrderingDraw:
    """Draw an ordering by picking uniformly among available moves."""
    if not s.feasible:
        raise ValueError("schedule is infeasible: an unobserved haplotype would be a leaf")
    n = s.n_nodes
    copies = [0] * n
    copies[s.root] = 1
    repl = list(s.replications)
    pending = [list(ch) for ch in s.children]
    active = [s.root]
    events = []
    log_q = 0.0
    for _ in range(s.total_events):
        moves = []
        for h in active:
            c = copies[h]
            r = repl[h]
            p = pending[h]
            if r:
                moves.append((h, REPLICATE, -1))
            if p and (c >= 2 or (r == 0 and len(p) == 1)):
                for child in p:
                    moves.append((h, MUTATE, child))
        if not moves:
            raise RuntimeError("ordering draw reached a dead end")
        log_q -= math.log(len(moves))
        h, kind, child = moves[int(rng.integers(len(moves)))] if len(moves) > 1 else moves[0]
        events.append((h, kind, child))
        if kind == REPLICATE:
            copies[h] += 1
            repl[h] -= 1
        else:
            copies[h] -= 1
            pending[h].remove(child)
            copies[child] = 1
            if repl[child] or pending[child]:
                active.append(child)
        if not repl[h] and not pending[h]:
            active.remove(h)
    return OrderingDraw(events, log_q)


def draw_ordering(net: Network, t: TreeState, rng) -> OrderingDraw:
    return draw_schedule(event_schedule(net, t), rng)


def estimate_orderings(net: Network, t: TreeState, rng) -> float:
    """One draw of ``1/q``; an unbiased estimate of the ordering count."""
    s = event_schedule(net, t)
    if not s.feasible:
        return 0.0
    return math.exp(-draw_schedule(s, rng).log_q)


def log_estimate_schedule(s: EventSchedule, rng) -> float:
    """log of one ``1/q`` draw, or -inf for an infeasible orientation."""
    if not s.feasible:
        return -math.inf
    return -draw_schedule(s, rng).log_q


def check_ordering(s: EventSchedule, events) -> bool:
    """Replay an event list and check every invariant of a valid ordering."""
    n = s.n_nodes
    copies = [0] * n
    copies[s.root] = 1
    repl = list(s.replications)
    pending = [set(ch) for ch in s.children]
    for h, kind, child in events:
        if copies[h] < 1:
            return False
        if kind == REPLICATE:
            if repl[h] <= 0:
                return False
            repl[h] -= 1
            copies[h] += 1
        else:
            if child not in pending[h]:
                return False
            pending[h].discard(child)
            copies[h] -= 1
            copies[child] += 1
            if copies[h] == 0 and (repl[h] or pending[h]):
                return False
    return not any(repl) and not any(pending) and all(copies[h] == s.counts[h] for h in range(n))


def sample_log_inv_q(s: EventSchedule, rng, size: int) -> np.ndarray:
    """Vectorised ``log(1/q)`` for ``size`` independent draws."""
    if not s.feasible:
        return np.full(size, -np.inf)
    n = s.n_nodes
    kids = [c for c in range(n) if c != s.root]
    par = np.array([s.parent[c] for c in kids], dtype=int)
    kids_arr = np.array(kids, dtype=int)
    copies = np.zeros((size, n), dtype=np.int64)
    copies[:, s.root] = 1
    repl = np.tile(np.array(s.replications, dtype=np.int64), (size, 1))
    mut_left = np.tile(np.array([len(c) for c in s.children], dtype=np.int64), (size, 1))
    created = np.zeros((size, len(kids)), dtype=bool)
    log_inv_q = np.zeros(size)
    rows = np.arange(size)
    for _ in range(s.total_events):
        rep_ok = (copies > 0) & (repl > 0)
        pc = copies[:, par]
        mut_ok = (~created) & (pc > 0) & ((pc >= 2) | ((repl[:, par] == 0) & (mut_left[:, par] == 1)))
        avail = np.concatenate([rep_ok, mut_ok], axis=1)
        cum = np.cumsum(avail, axis=1)
        total = cum[:, -1]
        log_inv_q += np.log(total)
        pick = np.floor(rng.random(size) * total).astype(np.int64)
        idx = (cum > pick[:, None]).argmax(axis=1)
        is_rep = idx < n
        r = rows[is_rep]
        h = idx[is_rep]
        copies[r, h] += 1
        repl[r, h] -= 1
        m = rows[~is_rep]
        k = idx[~is_rep] - n
        p = par[k]
        copies[m, p] -= 1
        mut_left[m, p] -= 1
        copies[m, kids_arr[k]] = 1
        created[m, k] = True
    return log_inv_q


# --------------------------------------------------------------------------
# exact root/tree posterior


@dataclass
class RootPosterior:
    trees: list[tuple[int, ...]]
    counts: list[list[int]]  # [tree][root] ordering counts
    joint: np.ndarray  # P(r, T | S), shape (n_trees, n_nodes)

    @property
    def root_marginal(self) -> np.ndarray:
        return self.joint.sum(axis=0)

    @property
    def tree_marginal(self) -> np.ndarray:
        return self.joint.sum(axis=1)

    def root_given_tree(self) -> np.ndarray:
        tot = self.joint.sum(axis=1, keepdims=True)
        return np.divide(self.joint, tot, out=np.zeros_like(self.joint), where=tot > 0)

    def tree_given_root(self) -> np.ndarray:
        tot = self.joint.sum(axis=0, keepdims=True)
        return np.divide(self.joint, tot, out=np.zeros_like(self.joint), where=tot > 0)

    def to_json(self) -> dict:
        return {
            "trees": [list(t) for t in self.trees],
            "counts": [[str(c) for c in row] for row in self.counts],
            "joint": self.joint.tolist(),
            "root_marginal": self.root_marginal.tolist(),
        }


def root_posterior_exact(net: Network, event_cap: int = DEFAULT_EVENT_CAP, tree_cap: int = 12) -> RootPosterior:
    """Exact P(r, T | S) proportional to the ordering counts."""
    _, trees = enumerate_trees(net, tree_cap)
    counts = [
        [count_orderings_exact(net, TreeState(t, r), event_cap) for r in range(net.n_nodes)]
        for t in trees
    ]
    total = sum(sum(row) for row in counts)
    if total == 0:
        raise ValueError("no (root, tree) pair admits a valid ordering")
    # exact integer ratios before converting to float
    joint = np.array([[c / total for c in row] for row in counts], dtype=float)
    return RootPosterior(trees=trees, counts=counts, joint=joint)
