import importlib.util
import math
import re
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from lxml import etree
from scipy.sparse.csgraph import shortest_path
from scipy.stats import multivariate_normal, norm as normal_dist

from phylogeo import clustmodel as cm
from phylogeo import summaries as sm
from phylogeo.haplonet import TreeHashTable, network_from_edges
from phylogeo.seqio import parse_coords

from conftest import path3, square, star4

# the OGC KML 2.2 schema ships with pykml
_PYKML = importlib.util.find_spec("pykml")
SCHEMA = Path(_PYKML.origin).parent / "schemas" / "ogckml22.xsd" if _PYKML else Path("ogckml22.xsd")

# three locations; haplotypes 1..4 map to nodes 0..3 of a star centred at 0
COORDS = "40.0 45.0 1 2\n41.0 46.0 2 3\n42.5 44.0 4 4\n"


def kml_schema():
    if not SCHEMA.exists():
        pytest.skip("KML schema not installed")
    return etree.XMLSchema(etree.parse(str(SCHEMA)))


def draw(root, c, node_labels, mu, sigma, deleted=()):
    c = np.asarray(c)
    return {
        "root": root,
        "deleted": tuple(deleted),
        "c": c,
        "node_labels": np.asarray(node_labels),
        "mu": np.asarray(mu, dtype=float),
        "sigma": np.asarray(sigma, dtype=float),
        "effective": len(np.unique(c)),
    }


def random_tree_net(rng, n):
    edges = [(int(rng.integers(v)), v) for v in range(1, n)]
    counts = rng.integers(0, 3, size=n)
    counts[0] = max(counts[0], 1)
    return network_from_edges(n, edges, counts)


class TestCounting:
    def test_top_k_ties(self):
        assert sm.top_k([0.2, 0.5, 0.2, 0.1], 3) == [1, 0, 2]

    def test_ancestral_locations(self):
        obs = parse_coords(COORDS, 2)
        net = star4()
        net = network_from_edges(4, net.edges, counts=[1, 2, 1, 2])
        nodes = obs.haplotype_ids - 1
        draws = [draw(0, [0] * 6, [0] * 4, [[0, 0]], [np.eye(2)]), draw(3, [0] * 6, [0] * 4, [[0, 0]], [np.eye(2)])]
        got = sm.ancestral_locations(draws, net, nodes, obs.location_index, obs.n_locations)
        # root 0: its one copy is at the first location; root 3: both copies at the third
        loc0 = obs.location_index[nodes == 0]
        loc3 = obs.location_index[nodes == 3]
        want = 0.5 * np.bincount(loc0, minlength=3) / len(loc0) + 0.5 * np.bincount(loc3, minlength=3) / len(loc3)
        assert np.allclose(got, want) and got.sum() == pytest.approx(1.0)

    def test_unobserved_root_uses_oldest_observed(self):
        net = network_from_edges(4, [(0, 1), (0, 2), (2, 3)], counts=[0, 1, 0, 1])
        nodes = np.array([1, 3])
        got = sm.ancestral_locations([draw(0, [0, 0], [0] * 4, [[0, 0]], [np.eye(2)])], net, nodes, np.array([0, 1]), 2)
        assert got.tolist() == [1.0, 0.0]
        got = sm.ancestral_locations([draw(2, [0, 0], [0] * 4, [[0, 0]], [np.eye(2)])], net, nodes, np.array([0, 1]), 2)
        assert got.tolist() == [0.0, 1.0]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_cluster_probs(self, seed):
        rng = np.random.default_rng(seed)
        n, L = 5, 3
        obs_nodes = np.repeat(np.arange(n), 2)
        draws = []
        for _ in range(12):
            c = rng.integers(L, size=len(obs_nodes))
            nl = np.array([c[2 * v] if c[2 * v] == c[2 * v + 1] else -1 for v in range(n)])
            draws.append(draw(0, c, nl, np.zeros((L, 2)), [np.eye(2)] * L))
        got = sm.cluster_probs(draws, obs_nodes, n, L)
        # every node holds two copies, so its probability is the mean label share
        want = np.zeros((n, L))
        for d in draws:
            for i, v in enumerate(obs_nodes):
                want[v, d["c"][i]] += 0.5
        assert np.allclose(got, want / len(draws))
        assert np.allclose(got.sum(1), 1.0)

    def test_edge_probs(self):
        t = TreeHashTable(4, 1)
        t.record((0,), 3)
        t.record((2,), 1)
        assert np.allclose(sm.edge_probs_from_table(square(), t), [0.25, 1.0, 0.75, 1.0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 12))
    def test_levels(self, seed, n):
        rng = np.random.default_rng(seed)
        net = random_tree_net(rng, n)
        root = int(rng.integers(n))
        A = np.zeros((n, n))
        for u, v in net.edges:
            A[u, v] = A[v, u] = 1
        want = shortest_path(A, unweighted=True)[root]
        assert sm.tree_levels(net, (), root).tolist() == want.astype(int).tolist()

    def test_summarize_counts(self):
        obs = parse_coords(COORDS, 2)
        net = network_from_edges(4, star4().edges, counts=[1, 2, 1, 2])
        nodes = obs.haplotype_ids - 1
        norm = cm.normalize(obs)
        mu = np.array([[0.0, 0.0], [1.0, 1.0]])
        sig = np.stack([np.eye(2)] * 2)
        draws = [
            draw(0, [0] * 6, [0] * 4, mu, sig),
            draw(0, [0, 0, 0, 1, 1, 1], [0, -1, 0, 1], mu, sig),
            draw(1, [0, 0, 0, 1, 1, 1], [0, -1, 0, 1], mu, sig),
        ]
        table = TreeHashTable(net.n_edges, 0)
        table.record((), 30)
        arch = SimpleNamespace(
            draws=draws,
            config=SimpleNamespace(max_mig=1),
            tree_table=table,
            chains=[SimpleNamespace(draws=draws)],
            diagnostics={},
        )
        rep = sm.summarize(arch, net, nodes, obs, norm)
        assert np.allclose(rep.root_probs, [2 / 3, 1 / 3, 0, 0])
        assert np.allclose(rep.mig_probs, [1 / 3, 2 / 3])
        assert rep.map_root == 0 and rep.map_tree == ()
        assert np.allclose(rep.chain_means[0][1], norm.inverse(mu[1]))
        assert set(rep.to_json()) >= {"rootProbs", "migProbs", "clusterProbs", "topLocations"}


class TestContours:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_half_mode(self, seed):
        rng = np.random.default_rng(seed)
        mean = rng.normal(size=2) * 10
        cov = cm.sample_sigma_prior(2, 6, 1.0, rng, size=1)[0]
        e = sm.half_mode_ellipse(mean, cov)
        mvn = multivariate_normal(mean, cov)
        dens = mvn.pdf(e.points(36))
        assert np.allclose(dens, 0.5 * mvn.pdf(mean), rtol=1e-9)

    def test_raw_units(self):
        obs = parse_coords(COORDS, 2)
        norm = cm.normalize(obs)
        mu = norm.transform(np.array([[41.0, 45.0]]))
        sig = np.eye(2)[None] * 0.01
        cs = sm.contours([draw(0, [0] * 6, [0] * 4, mu, sig)], norm)
        e = cs.means[0]
        assert e.center == pytest.approx((41.0, 45.0))
        raw_cov = norm.inverse_cov(sig[0])
        assert e.semi_axes[0] == pytest.approx(sm.HALF_MODE_RADIUS * math.sqrt(np.linalg.eigvalsh(raw_cov)[1]))

    def test_presence_threshold(self):
        obs = parse_coords(COORDS, 2)
        norm = cm.normalize(obs)
        mu = np.zeros((2, 2))
        sig = np.stack([np.eye(2)] * 2)
        draws = [draw(0, [0] * 6, [0] * 4, mu, sig)] * 3 + [draw(0, [0, 0, 0, 1, 1, 1], [0, -1, 0, 1], mu, sig)]
        cs = sm.contours(draws, norm)
        assert [e.label for e in cs.means] == [0]
        assert len(cs.per_draw[-1]) == 2

    def test_bands_quantile_oracle(self):
        obs = parse_coords("40 45 10 1\n41 46 20 2\n42 47 40 3\n", 3)
        norm = cm.normalize(obs)
        mu = np.array([[0.1, -0.2, 0.5]])
        sig = np.diag([1.0, 1.0, 0.3])[None]
        bands = sm.covariate_bands([draw(0, [0, 0, 0], [0] * 3, mu, sig)], norm)
        raw_mu = norm.inverse(mu[0])[2]
        raw_sd = math.sqrt(norm.inverse_cov(sig[0])[2, 2])
        z = normal_dist.ppf(0.95)
        assert bands[0][0] == pytest.approx([raw_mu - z * raw_sd, raw_mu, raw_mu + z * raw_sd])

    def test_no_bands_without_covariates(self):
        obs = parse_coords(COORDS, 2)
        norm = cm.normalize(obs)
        assert sm.covariate_bands([draw(0, [0] * 6, [0] * 4, np.zeros((1, 2)), [np.eye(2)])], norm) == {}


def kml_coordinates(path):
    doc = etree.parse(str(path))
    out = []
    for el in doc.iter("{%s}coordinates" % sm.KML_NS):
        pts = [tuple(float(x) for x in p.split(",")) for p in el.text.split()]
        out.append(np.array(pts))
    return doc, out


class TestKml:
    def contour_set(self, rng):
        obs = parse_coords(COORDS, 2)
        norm = cm.normalize(obs)
        mu = rng.normal(size=(2, 2))
        sig = cm.sample_sigma_prior(2, 6, 1.0, rng, size=2)
        draws = [draw(0, [0, 0, 0, 1, 1, 1], [0, -1, 0, 1], mu + 0.01 * i, sig) for i in range(5)]
        return sm.contours(draws, norm)

    def test_contours_schema_and_coordinates(self, tmp_path, rng):
        schema = kml_schema()
        cs = self.contour_set(rng)
        path = tmp_path / "c.kml"
        sm.export_kml_contours(cs, path)
        doc, coords = kml_coordinates(path)
        schema.assertValid(doc)
        expected = [e.points() for e in cs.means] + [e.points() for row in cs.per_draw for e in row]
        assert len(coords) == len(expected)
        for got, want in zip(coords, expected):
            assert np.max(np.abs(got[:, :2] - want)) < 1e-9
            assert np.all(got[:, 2] == 0)
            assert np.array_equal(got[0], got[-1])  # closed ring

    def test_tree_schema(self, tmp_path):
        schema = kml_schema()
        obs = parse_coords(COORDS, 2)
        net = network_from_edges(5, [(0, 1), (0, 2), (0, 3), (3, 4)], counts=[1, 2, 1, 2, 0])
        nodes = obs.haplotype_ids - 1
        pos = sm.node_positions(net, nodes, obs.values)
        assert not np.isnan(pos).any()
        assert np.allclose(pos[4], pos[3])  # placed from its only neighbour
        path = tmp_path / "t.kml"
        sm.export_kml_tree(net, (), pos, path, edge_probs=np.ones(4))
        doc, coords = kml_coordinates(path)
        schema.assertValid(doc)
        assert len(coords) == net.n_nodes + net.n_edges
        for v in range(net.n_nodes):
            assert np.max(np.abs(coords[v][0, :2] - pos[v])) < 1e-9


class TestNewick:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 15))
    def test_round_trip(self, seed, n):
        rng = np.random.default_rng(seed)
        net = random_tree_net(rng, n) if n > 1 else network_from_edges(1, [], counts=[1])
        root = int(rng.integers(n))
        text = sm.export_newick(net, (), root)
        tree = sm.parse_newick(text)
        assert sm.canonical_newick(tree) == sm.canonical_tree(net, (), root)
        names = re.findall(r"H\d+", text)
        assert sorted(names) == sorted(f"H{v + 1}" for v in range(n) if net.counts[v] > 0)

    def test_loop_tree(self):
        net = square()
        text = sm.export_newick(net, (1,), 0)
        assert sm.canonical_newick(sm.parse_newick(text)) == sm.canonical_tree(net, (1,), 0)

    def test_parse_errors(self):
        with pytest.raises(ValueError):
            sm.parse_newick("(A,B)")
        with pytest.raises(ValueError):
            sm.parse_newick("(A,B;")

    def test_lengths_and_comments(self):
        t = sm.parse_newick("[note](A:0.5,(B,C)D:2)R;")
        assert t.name == "R" and t.children[0].length == 0.5 and t.children[1].name == "D"


class TestJsonSvg:
    def test_tree_json(self):
        net = path3()
        doc = sm.export_tree_json(net, (), 1, np.full((3, 2), 0.5), np.ones(2))
        assert doc["root"] == 1
        assert [n["level"] for n in doc["nodes"]] == [1, 0, 1]
        assert all(e["inMapTree"] for e in doc["edges"])

    def test_svg_parses(self, tmp_path, rng):
        obs = parse_coords(COORDS, 2)
        cs = TestKml().contour_set(rng)
        path = tmp_path / "c.svg"
        sm.export_svg(cs, obs, np.array([0.6, 0.3, 0.1]), path)
        root = etree.parse(str(path)).getroot()
        assert root.tag.endswith("svg")
        assert len(root.findall("{http://www.w3.org/2000/svg}ellipse")) == len(cs.means) + 10
