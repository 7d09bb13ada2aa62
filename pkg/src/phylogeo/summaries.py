"""Posterior summaries and exports.

All probabilities are computed by counting over the saved, relabelled
draws of every chain, except the tree-level quantities (MAP tree and edge
probabilities) which use the full post-burn-in tree tables.
"""

from __future__ import annotations

import json
import logging
import math
import re
import xml.etree.ElementTree as ET
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm as normal_dist

from .clustmodel import NormalizedData
from .haplonet import Network, TreeHashTable, rooted_children, tree_adjacency

log = logging.getLogger(__name__)

HALF_MODE_RADIUS = math.sqrt(2 * math.log(2))
KML_NS = "http://www.opengis.net/kml/2.2"


@dataclass
class SummaryReport:
    root_probs: np.ndarray
    root_loc_probs: np.ndarray
    mig_probs: np.ndarray
    cluster_probs: np.ndarray  # (n_nodes, k_max + 1)
    edge_total_probs: np.ndarray
    map_tree: tuple[int, ...]  # deleted edges
    map_edges: list[tuple[int, int]]
    map_root: int
    levels: np.ndarray
    chain_means: list[list[list[float] | None]]  # [chain][label] -> raw-unit mean or None
    convergence: dict = field(default_factory=dict)

    @property
    def top_locations(self) -> list[int]:
        return top_k(self.root_loc_probs, 3)

    def to_json(self) -> dict:
        return {
            "rootProbs": self.root_probs.tolist(),
            "rootLocProbs": self.root_loc_probs.tolist(),
            "migProbs": self.mig_probs.tolist(),
            "clusterProbs": self.cluster_probs.tolist(),
            "edgeTotalProbs": self.edge_total_probs.tolist(),
            "mapTreeDeleted": list(self.map_tree),
            "mapTreeEdges": [list(e) for e in self.map_edges],
            "mapRoot": self.map_root,
            "levels": self.levels.tolist(),
            "chainMeans": self.chain_means,
            "topLocations": self.top_locations,
            "convergence": self.convergence,
        }


def top_k(p, k: int) -> list[int]:
    """Indices of the k largest entries, ties broken by lower index."""
    p = np.asarray(p)
    return sorted(range(len(p)), key=lambda i: (-p[i], i))[:k]


def tree_levels(net: Network, deleted, root: int) -> np.ndarray:
    """Mutation depth of every node from ``root`` in the tree."""
    adj = tree_adjacency(net, deleted)
    lev = np.full(net.n_nodes, -1, dtype=int)
    lev[root] = 0
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if lev[v] < 0:
                lev[v] = lev[u] + 1
                queue.append(v)
    return lev


def edge_probs_from_table(net: Network, table: TreeHashTable) -> np.ndarray:
    total = 0
    absent = np.zeros(net.n_edges)
    for deleted, c in table.items():
        total += c
        for e in deleted:
            absent[e] += c
    if total == 0:
        return np.ones(net.n_edges)
    return 1.0 - absent / total


def _oldest_observed(net: Network, adj, root: int) -> list[int]:
    """Observed nodes at minimal depth from ``root`` along unobserved paths."""
    if net.counts[root] > 0:
        return [root]
    seen = {root}
    frontier = [root]
    while frontier:
        hits, nxt = [], []
        for u in frontier:
            for v in adj[u]:
                if v in seen:
                    continue
                seen.add(v)
                (hits if net.counts[v] > 0 else nxt).append(v)
        if hits:
            return sorted(hits)
        frontier = nxt
    return []


def ancestral_locations(draws, net: Network, obs_nodes, location_index, n_locations: int) -> np.ndarray:
    """Posterior probability that each sampling location holds the ancestral copies.

    Each draw spreads one unit of mass evenly over every copy of its root
    haplotype, or, for an unobserved root, over every copy of the oldest
    observed descendants.
    """
    obs_nodes = np.asarray(obs_nodes)
    location_index = np.asarray(location_index)
    out = np.zeros(n_locations)
    cache: dict = {}
    for dr in draws:
        key = (tuple(dr["deleted"]), int(dr["root"]))
        share = cache.get(key)
        if share is None:
            adj = tree_adjacency(net, key[0])
            nodes = _oldest_observed(net, adj, key[1])
            mask = np.isin(obs_nodes, nodes)
            share = np.bincount(location_index[mask], minlength=n_locations) / max(mask.sum(), 1)
            cache[key] = share
        out += share
    return out / max(len(draws), 1)


def cluster_probs(draws, obs_nodes, n_nodes: int, n_labels: int) -> np.ndarray:
    """P(node in cluster k); migrating nodes use the split of their own observations."""
    obs_nodes = np.asarray(obs_nodes)
    out = np.zeros((n_nodes, n_labels))
    for dr in draws:
        nl = np.asarray(dr["node_labels"])
        c = np.asarray(dr["c"])
        ok = nl >= 0
        out[np.flatnonzero(ok), nl[ok]] += 1
        for v in np.flatnonzero(~ok):
            lab = c[obs_nodes == v]
            if len(lab):
                out[v] += np.bincount(lab, minlength=n_labels) / len(lab)
            else:
                out[v] += 1.0 / n_labels
    return out / max(len(draws), 1)


def summarize(archive, net: Network, obs_nodes, obs, norm: NormalizedData) -> SummaryReport:
    draws = archive.draws
    if not draws:
        raise ValueError("archive holds no saved draws")
    k_max = archive.config.max_mig
    n_lab = k_max + 1
    roots = np.array([d["root"] for d in draws])
    root_probs = np.bincount(roots, minlength=net.n_nodes) / len(draws)
    eff = np.array([d["effective"] for d in draws])
    mig_probs = np.bincount(eff - 1, minlength=n_lab)[:n_lab] / len(draws)
    table = archive.tree_table
    map_tree = table.mode() if table.counts else tuple(draws[0]["deleted"])
    map_root = top_k(root_probs, 1)[0]
    gone = set(map_tree)
    map_edges = [e for k, e in enumerate(net.edges) if k not in gone]
    chain_means = []
    for ch in archive.chains:
        per = []
        for k in range(n_lab):
            sel = [d["mu"][k] for d in ch.draws if np.any(np.asarray(d["c"]) == k)]
            per.append(norm.inverse(np.mean(sel, axis=0)).tolist() if sel else None)
        chain_means.append(per)
    return SummaryReport(
        root_probs=root_probs,
        root_loc_probs=ancestral_locations(draws, net, obs_nodes, obs.location_index, obs.n_locations),
        mig_probs=mig_probs,
        cluster_probs=cluster_probs(draws, obs_nodes, net.n_nodes, n_lab),
        edge_total_probs=edge_probs_from_table(net, table),
        map_tree=tuple(map_tree),
        map_edges=map_edges,
        map_root=int(map_root),
        levels=tree_levels(net, map_tree, map_root),
        chain_means=chain_means,
        convergence={
            "root_converged": bool(archive.diagnostics.get("root_converged", True)),
            "clustering_converged": bool(archive.diagnostics.get("clustering_converged", True)),
        },
    )


# --------------------------------------------------------------------------
# contours and bands


@dataclass
class Ellipse:
    center: tuple[float, float]
    semi_axes: tuple[float, float]  # major, minor
    angle: float  # radians, major axis anticlockwise from the longitude axis
    label: int

    def points(self, n: int = 72) -> np.ndarray:
        t = np.linspace(0, 2 * np.pi, n + 1)
        a, b = self.semi_axes
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        x = a * np.cos(t)
        y = b * np.sin(t)
        return np.column_stack([self.center[0] + ca * x - sa * y, self.center[1] + sa * x + ca * y])


def half_mode_ellipse(mean, cov, label: int = 0) -> Ellipse:
    """Level set where a bivariate Gaussian density is half its maximum."""
    cov = np.asarray(cov, dtype=float)[:2, :2]
    vals, vecs = np.linalg.eigh(cov)
    major = vecs[:, 1]
    return Ellipse(
        center=(float(mean[0]), float(mean[1])),
        semi_axes=(float(HALF_MODE_RADIUS * math.sqrt(vals[1])), float(HALF_MODE_RADIUS * math.sqrt(vals[0]))),
        angle=float(math.atan2(major[1], major[0])),
        label=label,
    )


@dataclass
class ContourSet:
    per_draw: list[list[Ellipse]]
    means: list[Ellipse]


def contours(draws, norm: NormalizedData, min_presence: float = 0.5) -> ContourSet:
    """Half-mode ellipses in raw units for every non-empty cluster of every draw.

    Mean ellipses use the posterior mean of mu and Sigma over the draws in
    which the cluster is non-empty, for clusters non-empty in at least
    ``min_presence`` of the draws.
    """
    per_draw = []
    acc: dict[int, list] = {}
    for dr in draws:
        row = []
        for k in sorted(set(int(x) for x in np.asarray(dr["c"]))):
            mu = norm.inverse(dr["mu"][k][:2])
            cov = norm.inverse_cov(dr["sigma"][k][:2, :2])
            row.append(half_mode_ellipse(mu, cov, k))
            acc.setdefault(k, []).append((mu, cov))
        per_draw.append(row)
    means = []
    for k in sorted(acc):
        if len(acc[k]) >= min_presence * len(draws):
            mu = np.mean([a for a, _ in acc[k]], axis=0)
            cov = np.mean([b for _, b in acc[k]], axis=0)
            means.append(half_mode_ellipse(mu, cov, k))
    return ContourSet(per_draw, means)


def covariate_bands(draws, norm: NormalizedData, probs=(0.05, 0.5, 0.95)) -> dict[int, np.ndarray]:
    """Per cluster: (n_covariates, len(probs)) medians over draws of each draw's Normal quantiles, raw units."""
    if not draws or np.shape(draws[0]["mu"])[1] < 3:
        return {}
    z = normal_dist.ppf(np.asarray(probs))
    acc: dict[int, list] = {}
    for dr in draws:
        for k in sorted(set(int(x) for x in np.asarray(dr["c"]))):
            mu = norm.inverse(dr["mu"][k])[2:]
            sd = np.sqrt(np.diag(norm.inverse_cov(dr["sigma"][k])))[2:]
            acc.setdefault(k, []).append(mu[:, None] + sd[:, None] * z[None, :])
    return {k: np.median(np.stack(v), axis=0) for k, v in sorted(acc.items())}


# --------------------------------------------------------------------------
# KML


def _kml_root():
    ET.register_namespace("", KML_NS)
    kml = ET.Element(f"{{{KML_NS}}}kml")
    doc = ET.SubElement(kml, f"{{{KML_NS}}}Document")
    return kml, doc


def _sub(parent, tag, text=None):
    el = ET.SubElement(parent, f"{{{KML_NS}}}{tag}")
    if text is not None:
        el.text = text
    return el


def _coords(points) -> str:
    return " ".join(f"{float(x)!r},{float(y)!r},0" for x, y in points)


PALETTE = ["ff0000ff", "ffff0000", "ff00aa00", "ff00aaff", "ffaa00aa", "ff777777", "ff00ffff", "ff990099"]


def _styles(doc, n_labels: int) -> None:
    for k in range(n_labels):
        st = _sub(doc, "Style")
        st.set("id", f"cluster{k}")
        ls = _sub(st, "LineStyle")
        _sub(ls, "color", PALETTE[k % len(PALETTE)])
        _sub(ls, "width", "2")
        ps = _sub(st, "PolyStyle")
        _sub(ps, "color", "33" + PALETTE[k % len(PALETTE)][2:])


def _write_xml(kml, path) -> None:
    tree = ET.ElementTree(kml)
    ET.indent(tree)
    tree.write(path, encoding="UTF-8", xml_declaration=True)


def export_kml_contours(cs: ContourSet, path, max_draws: int = 200, name: str = "cluster contours") -> None:
    """One polygon placemark per mean ellipse and per draw ellipse, in raw degrees."""
    kml, doc = _kml_root()
    _sub(doc, "name", name)
    labels = {e.label for e in cs.means} | {e.label for row in cs.per_draw for e in row}
    _styles(doc, max(labels) + 1 if labels else 1)
    for e in cs.means:
        _polygon(doc, e, f"cluster {e.label + 1} mean")
    for i in _thin(len(cs.per_draw), max_draws):
        for e in cs.per_draw[i]:
            _polygon(doc, e, f"draw {i + 1} cluster {e.label + 1}")
    _write_xml(kml, path)


def _polygon(doc, e: Ellipse, title: str) -> None:
    pm = _sub(doc, "Placemark")
    _sub(pm, "name", title)
    _sub(pm, "styleUrl", f"#cluster{e.label}")
    poly = _sub(pm, "Polygon")
    ring = _sub(_sub(poly, "outerBoundaryIs"), "LinearRing")
    _sub(ring, "coordinates", _coords(e.points()))


def _thin(n: int, k: int) -> list[int]:
    if n <= k:
        return list(range(n))
    return sorted(set(int(x) for x in np.linspace(0, n - 1, k).round()))


def node_positions(net: Network, obs_nodes, values) -> np.ndarray:
    """Mean raw location of each haplotype's observations; unobserved nodes
    take the mean of already-placed neighbours, repeatedly."""
    obs_nodes = np.asarray(obs_nodes)
    pos = np.full((net.n_nodes, 2), np.nan)
    for v in range(net.n_nodes):
        sel = obs_nodes == v
        if sel.any():
            pos[v] = np.asarray(values)[sel, :2].mean(axis=0)
    for _ in range(net.n_nodes):
        missing = [v for v in range(net.n_nodes) if np.isnan(pos[v, 0])]
        if not missing:
            break
        for v in missing:
            nb = [pos[u] for u in net.adjacency[v] if not np.isnan(pos[u, 0])]
            if nb:
                pos[v] = np.mean(nb, axis=0)
    return pos


def export_kml_tree(net: Network, deleted, pos: np.ndarray, path, labels=None, edge_probs=None) -> None:
    """Point placemark per haplotype and line placemark per tree edge."""
    kml, doc = _kml_root()
    _sub(doc, "name", "haplotype tree")
    gone = set(deleted)
    for v in range(net.n_nodes):
        pm = _sub(doc, "Placemark")
        _sub(pm, "name", labels[v] if labels else f"H{v + 1}")
        _sub(pm, "description", f"observations: {int(net.counts[v])}")
        _sub(_sub(pm, "Point"), "coordinates", _coords([pos[v]]))
    for k, (u, v) in enumerate(net.edges):
        if k in gone:
            continue
        pm = _sub(doc, "Placemark")
        _sub(pm, "name", f"H{u + 1}-H{v + 1}")
        if edge_probs is not None:
            _sub(pm, "description", f"posterior probability {float(edge_probs[k]):.4f}")
        _sub(_sub(pm, "LineString"), "coordinates", _coords([pos[u], pos[v]]))
    _write_xml(kml, path)


# --------------------------------------------------------------------------
# Newick


def node_name(net: Network, v: int) -> str:
    return f"H{v + 1}" if net.counts[v] > 0 else ""


def export_newick(net: Network, deleted, root: int) -> str:
    """Rooted Newick of a tree; observed haplotypes named H<index>, intermediates unnamed."""
    children, _ = rooted_children(tree_adjacency(net, deleted), root)

    def rec(v: int) -> str:
        name = node_name(net, v)
        if not children[v]:
            return name
        return "(" + ",".join(rec(c) + ":1" for c in children[v]) + ")" + name

    prefix = ""
    if net.counts[root] == 0:
        log.warning("root is an unobserved intermediate haplotype; exported as an unnamed root")
        prefix = "[unobserved root]"
    return prefix + rec(root) + ";"


@dataclass
class NewickNode:
    name: str
    children: list["NewickNode"] = field(default_factory=list)
    length: float | None = None


def parse_newick(text: str) -> NewickNode:
    """Minimal Newick reader: names, branch lengths, nested brackets, [comments]."""
    s = re.sub(r"\[[^\]]*\]", "", text).strip()
    if not s.endswith(";"):
        raise ValueError("Newick string must end with ';'")
    s = s[:-1]
    pos = 0

    def read_label() -> str:
        nonlocal pos
        start = pos
        while pos < len(s) and s[pos] not in "(),:;":
            pos += 1
        return s[start:pos].strip()

    def read_length():
        nonlocal pos
        if pos < len(s) and s[pos] == ":":
            pos += 1
            start = pos
            while pos < len(s) and s[pos] not in "(),;":
                pos += 1
            return float(s[start:pos])
        return None

    def node() -> NewickNode:
        nonlocal pos
        kids = []
        if pos < len(s) and s[pos] == "(":
            pos += 1
            while True:
                kids.append(node())
                if pos >= len(s):
                    raise ValueError("unbalanced brackets in Newick string")
                if s[pos] == ",":
                    pos += 1
                    continue
                if s[pos] == ")":
                    pos += 1
                    break
                raise ValueError(f"unexpected {s[pos]!r} at {pos}")
        out = NewickNode(read_label(), kids)
        out.length = read_length()
        return out

    tree = node()
    if pos != len(s):
        raise ValueError(f"trailing text at {pos}")
    return tree


def canonical_newick(t: NewickNode) -> str:
    """Order-independent form of a rooted tree, for topology comparison."""
    if not t.children:
        return t.name
    return "(" + ",".join(sorted(canonical_newick(c) for c in t.children)) + ")" + t.name


def canonical_tree(net: Network, deleted, root: int) -> str:
    children, _ = rooted_children(tree_adjacency(net, deleted), root)

    def rec(v):
        if not children[v]:
            return node_name(net, v)
        return "(" + ",".join(sorted(rec(c) for c in children[v])) + ")" + node_name(net, v)

    return rec(root)


# --------------------------------------------------------------------------
# JSON and SVG


def export_tree_json(net: Network, deleted, root: int, cluster_p, edge_probs, levels=None) -> dict:
    gone = set(deleted)
    levels = tree_levels(net, deleted, root) if levels is None else levels
    return {
        "root": int(root),
        "nodes": [
            {
                "id": v,
                "name": node_name(net, v) or None,
                "size": int(net.counts[v]),
                "level": int(levels[v]),
                "clusterProbs": [float(x) for x in cluster_p[v]],
            }
            for v in range(net.n_nodes)
        ],
        "edges": [
            {"source": u, "target": v, "probability": float(edge_probs[k]), "inMapTree": k not in gone}
            for k, (u, v) in enumerate(net.edges)
        ],
    }


def write_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


SVG_COLORS = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f", "#17becf", "#8c564b"]


def export_svg(cs: ContourSet, obs, root_loc_probs, path, max_draws: int = 200, width: int = 800) -> None:
    """Contour figure: faint per-draw ellipses, mean ellipses, sampling points and
    the three most probable ancestral locations enlarged."""
    pts = np.asarray(obs.values)[:, :2]
    boxes = [pts]
    for e in cs.means:
        boxes.append(e.points(16))
    allp = np.vstack(boxes)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = max(float((hi - lo).max()), 1e-9)
    lo = lo - 0.1 * span
    span *= 1.2
    scale = width / span
    height = int(math.ceil((hi[1] - lo[1] + 0.1 * span) * scale)) + 1

    def xy(p):
        return (float(p[0] - lo[0]) * scale, float(height - (p[1] - lo[1]) * scale))

    def ellipse_el(e: Ellipse, opacity: float, stroke: float) -> str:
        cx, cy = xy(e.center)
        col = SVG_COLORS[e.label % len(SVG_COLORS)]
        rot = -math.degrees(e.angle)
        return (
            f'<ellipse cx="{cx:.3f}" cy="{cy:.3f}" rx="{e.semi_axes[0] * scale:.3f}" ry="{e.semi_axes[1] * scale:.3f}" '
            f'transform="rotate({rot:.3f} {cx:.3f} {cy:.3f})" fill="{col}" fill-opacity="{opacity}" '
            f'stroke="{col}" stroke-width="{stroke}"/>'
        )

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">']
    out.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    for i in _thin(len(cs.per_draw), max_draws):
        for e in cs.per_draw[i]:
            out.append(ellipse_el(e, 0.02, 0.2))
    for e in cs.means:
        out.append(ellipse_el(e, 0.0, 2.0))
    for p in np.unique(pts, axis=0):
        x, y = xy(p)
        out.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="3" fill="black"/>')
    for rank, loc in enumerate(top_k(root_loc_probs, 3)):
        if root_loc_probs[loc] <= 0:
            continue
        x, y = xy(obs.locations[loc])
        out.append(
            f'<circle cx="{x:.3f}" cy="{y:.3f}" r="{10 - 2 * rank}" fill="none" stroke="black" stroke-width="2"/>'
        )
        out.append(f'<text x="{x + 12:.3f}" y="{y:.3f}" font-size="12">{100 * root_loc_probs[loc]:.0f}%</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
