import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats

from phylogeo import clustmodel as cm
from phylogeo.clustmodel import (
    ClusterState,
    Layout,
    PriorConfig,
    clustering_log_prior,
    cluster_loglik,
    default_prior,
    gibbs_mu,
    gibbs_sigma,
    is_valid_clustering,
    log_likelihood,
    log_params_prior,
    log_prior,
    log_propose_params,
    normalize,
    propose_params,
    sample_iw_2x2,
    sample_sigma_prior,
)


def star_adj(k):
    adj = [list(range(1, k + 1))] + [[0] for _ in range(k)]
    return adj


@st.composite
def tiny_instances(draw):
    n = draw(st.integers(2, 5))
    adj = [[] for _ in range(n)]
    for v in range(1, n):
        u = draw(st.integers(0, v - 1))
        adj[u].append(v)
        adj[v].append(u)
    per_node = draw(st.lists(st.integers(0, 2), min_size=n, max_size=n))
    obs_nodes = [v for v in range(n) for _ in range(per_node[v])]
    assume(1 <= len(obs_nodes) <= 5)
    observed = sorted(set(obs_nodes))
    K = draw(st.integers(0, 2))
    m = tuple(sorted(draw(st.lists(st.sampled_from(observed), min_size=K, max_size=K))))
    return adj, np.array(obs_nodes), m


def reachable_labelings(adj, obs_nodes, m):
    lay = Layout(adj, obs_nodes, m)
    out = set()
    for slots in itertools.product(*[range(k) for k in lay.dec_nopt]):
        gid = lay.groups(slots)
        for lam in itertools.permutations(range(lay.K + 1)):
            out.add(tuple(np.asarray(lam)[gid[lay.obs_element]].tolist()))
    return out


class TestNormalize:
    def test_two_points(self):
        nd = normalize(np.array([[0.0, 0.0], [2.0, 0.0]]))
        # var(col1) = 1, var(col2) = 0, so the scale sets the average to 1
        assert np.allclose(nd.Y, [[-math.sqrt(2), 0], [math.sqrt(2), 0]])
        assert nd.Y[:, :2].var(axis=0).mean() == pytest.approx(1.0)

    def test_idempotent(self, rng):
        nd = normalize(rng.normal(size=(20, 4)) * [3, 1, 5, 2])
        again = normalize(nd.Y)
        assert np.allclose(again.Y, nd.Y, atol=1e-12)

    def test_zero_variance(self):
        with pytest.raises(ValueError):
            normalize(np.array([[1.0, 2.0], [1.0, 2.0]]))
        with pytest.raises(ValueError):
            normalize(np.array([[1.0, 2.0, 3.0], [2.0, 2.0, 3.0]]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 30), st.integers(2, 5), st.integers(0, 2**32 - 1))
    def test_invariants_and_inverse(self, n, d, seed):
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(n, d)) * rng.uniform(0.1, 50, size=d) + rng.uniform(-100, 100, size=d)
        nd = normalize(raw)
        Y = nd.Y
        assert np.allclose(Y.mean(axis=0), 0, atol=1e-10)
        assert Y[:, :2].var(axis=0).mean() == pytest.approx(1.0)
        assert np.allclose(Y[:, 2:].var(axis=0), 1)
        # same factor on lon and lat
        assert np.allclose(Y[:, :2] / nd.geo_scale + nd.geo_center, raw[:, :2])
        assert np.allclose(nd.inverse(Y), raw, atol=1e-10 * np.abs(raw).max())
        sig = np.diag(rng.uniform(0.5, 2, size=d))
        back = nd.inverse_cov(sig)
        assert np.allclose(back * np.outer(nd.scales, nd.scales), sig)


class TestValidity:
    def test_k0(self):
        assert is_valid_clustering([0, 0, 0], (), star_adj(2), [0, 1, 2])

    def test_adjacent_non_migrating(self):
        assert not is_valid_clustering([0, 1], (), [[1], [0]], [0, 1])
        assert not is_valid_clustering([0, 1], (2,), [[1], [0, 2], [1]], [0, 1])

    def test_central_haplotype_three_copies(self):
        # a hub with three copies founds clusters on three branches; the fourth keeps the original
        adj = star_adj(4)
        obs = [0, 0, 0, 1, 2, 3, 4]
        assert is_valid_clustering([0, 1, 2, 0, 1, 2, 3], (0, 0, 0), adj, obs)
        assert not is_valid_clustering([0, 1, 2, 0, 1, 2, 3], (0, 0), adj, obs)

    @settings(max_examples=60, deadline=None)
    @given(tiny_instances())
    def test_layout_matches_validity_exhaustively(self, inst):
        adj, obs_nodes, m = inst
        K = len(m)
        reach = reachable_labelings(adj, obs_nodes, m)
        valid = {
            c for c in itertools.product(range(K + 1), repeat=len(obs_nodes))
            if is_valid_clustering(c, m, adj, obs_nodes)
        }
        assert reach == valid

    @settings(max_examples=40, deadline=None)
    @given(tiny_instances(), st.integers(0, 10_000))
    def test_label_values_irrelevant(self, inst, seed):
        # relabelled draws may use any label values, including ones above K
        adj, obs_nodes, m = inst
        K = len(m)
        perm = np.random.default_rng(seed).permutation(K + 3)
        for c in reachable_labelings(adj, obs_nodes, m):
            assert is_valid_clustering(perm[list(c)], m, adj, obs_nodes)

    def test_groups_count(self, rng):
        adj = [[1], [0, 2, 3], [1], [1]]
        lay = Layout(adj, np.array([0, 1, 1, 1, 2, 3]), (1, 1))
        for _ in range(50):
            slots = [int(rng.integers(k)) for k in lay.dec_nopt]
            assert len(np.unique(lay.groups(slots))) == 3


def oracle_log_prior(state, cfg, weights, adj, obs_counts):
    """Term-by-term prior with scipy densities."""
    K = state.K
    d = state.mu.shape[1]
    out = -math.log(cfg.k_max + 1)
    hubs = sorted(set(state.m))
    if K:
        x = np.zeros(len(weights), dtype=int)
        for h in state.m:
            x[h] += 1
        out += stats.multinomial.logpmf(x, K, weights)
    out += clustering_log_prior(state.m, obs_counts, [len(a) for a in adj])
    out -= math.lgamma(K + 2)  # uniform bijection of groups onto labels
    out -= math.log(cfg.g - 3)
    for k in range(cfg.k_max + 1):
        S = state.sigma[k]
        out += stats.invwishart.logpdf(S[:2, :2], df=state.gamma, scale=cfg.psi * np.eye(2))
        for j in range(2, d):
            out += stats.invgamma.logpdf(S[j, j], a=state.gamma, scale=cfg.psi)
        out += stats.multivariate_normal.logpdf(state.mu[k], np.zeros(d), cfg.V)
    return out


class TestPrior:
    def test_empty_product(self):
        assert clustering_log_prior((), [1, 1], [1, 1]) == 0.0

    def test_one_copy_degree_two(self):
        assert clustering_log_prior((1,), [0, 1, 0], [1, 2, 1]) == pytest.approx(3 * math.log(0.5))

    def test_slots_match_product(self, rng):
        adj = [[1], [0, 2, 3], [1], [1]]
        obs = np.array([0, 1, 1, 2, 3, 3])
        counts = np.bincount(obs, minlength=4)
        for m in [(1,), (1, 1), (1, 3), (3, 3, 1)]:
            lay = Layout(adj, obs, m)
            assert lay.log_prior_slots == pytest.approx(clustering_log_prior(m, counts, [len(a) for a in adj]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_random_state_against_oracle(self, seed):
        rng = np.random.default_rng(seed)
        adj = [[1], [0, 2, 3], [1, 4], [1], [2]]
        obs = np.array([0, 1, 1, 2, 3, 3, 4, 4])
        counts = np.bincount(obs, minlength=5)
        weights = cm.haplotype_weights(counts)
        d = int(rng.integers(2, 5))
        cfg = PriorConfig(k_max=3, psi=float(rng.uniform(0.5, 3)), g=12, V=np.diag(rng.uniform(1, 5, size=d)))
        K = int(rng.integers(0, 4))
        m = tuple(sorted(int(x) for x in rng.choice(5, size=K, p=weights)))
        lay = Layout(adj, obs, m)
        slots = np.array([int(rng.integers(k)) for k in lay.dec_nopt])
        gamma = int(rng.integers(4, 13))
        mu, sigma = cm.sample_params_prior(cfg, d, gamma, rng)
        state = ClusterState(lay, slots, rng.permutation(K + 1), mu, sigma, gamma)
        got = log_prior(state, cfg, weights)
        assert got == pytest.approx(oracle_log_prior(state, cfg, weights, adj, counts), abs=1e-10)

    def test_multinomial_order_irrelevant(self):
        w = np.array([0.2, 0.5, 0.3])
        assert cm.log_multinomial_m((0, 1, 1), w) == pytest.approx(cm.log_multinomial_m((1, 0, 1), w))

    def test_gamma_bounds(self):
        cfg = PriorConfig(1, 1.0, g=10, V=np.eye(2))
        mu = np.zeros((2, 2))
        sig = np.stack([np.eye(2)] * 2)
        assert log_params_prior(mu, sig, 3, cfg) == -math.inf
        assert log_params_prior(mu, sig, 11, cfg) == -math.inf
        assert np.isfinite(log_params_prior(mu, sig, 10, cfg))

    def test_default_psi(self, rng):
        nd = normalize(rng.normal(size=(50, 2)))
        cfg = default_prior(nd, 3)
        rng_ = np.ptp(nd.Y, axis=0).max()
        sd = math.sqrt(cfg.prior_mean_sigma(2)[0, 0])
        assert sd == pytest.approx(0.15 * rng_)
        assert np.allclose(cfg.V, 4 * np.eye(2))

    def test_config_errors(self):
        with pytest.raises(ValueError):
            PriorConfig(-1, 1.0)
        with pytest.raises(ValueError):
            PriorConfig(1, 0.0)
        with pytest.raises(ValueError):
            PriorConfig(1, 1.0, g=3)


class TestLikelihood:
    def test_at_mode(self):
        val = log_likelihood(np.zeros((1, 2)), [0], np.zeros((1, 2)), np.eye(2)[None])
        assert val == pytest.approx(-math.log(2 * math.pi))

    def test_translation(self, rng):
        Y = rng.normal(size=(8, 3))
        c = rng.integers(2, size=8)
        mu = rng.normal(size=(2, 3))
        sig = sample_sigma_prior(3, 6, 1.0, rng, size=2)
        shift = rng.normal(size=3)
        assert log_likelihood(Y, c, mu, sig) == pytest.approx(log_likelihood(Y + shift, c, mu + shift, sig))

    def test_per_point_oracle(self, rng):
        Y = rng.normal(size=(10, 3))
        c = np.array([0, 1] * 5)
        mu = rng.normal(size=(3, 3))
        sig = sample_sigma_prior(3, 6, 1.0, rng, size=3)
        sig[:, 0, 1] = sig[:, 1, 0] = 0.1
        ref = sum(stats.multivariate_normal.logpdf(Y[i], mu[c[i]], sig[c[i]]) for i in range(10))
        assert log_likelihood(Y, c, mu, sig) == pytest.approx(ref, abs=1e-10)

    def test_not_pd(self):
        with pytest.raises(np.linalg.LinAlgError):
            cluster_loglik(1, np.zeros(2), np.zeros((2, 2)), np.zeros(2), -np.eye(2))


class TestGibbs:
    def cfg(self, d=2, V=4.0):
        return PriorConfig(k_max=1, psi=2.0, g=10, V=V * np.eye(d))

    def test_empty_mu_is_prior(self, rng):
        cfg = self.cfg(3)
        n = np.zeros(1)
        draws = np.array([gibbs_mu(n, np.zeros((1, 3)), np.eye(3)[None], cfg, rng)[0] for _ in range(20000)])
        assert np.allclose(draws.mean(axis=0), 0, atol=0.05)
        assert np.allclose(np.cov(draws.T), 4 * np.eye(3), atol=0.15)

    def test_empty_sigma_is_prior(self, rng):
        cfg = self.cfg(3)
        gamma = 8
        k = 100_000
        sig = gibbs_sigma(np.zeros(k), np.zeros((k, 3)), np.zeros((k, 3, 3)), np.zeros((k, 3)), gamma, cfg, rng)
        # IW(gamma, psi I2) marginal mean psi / (gamma - 3), IG(gamma, psi) mean psi / (gamma - 1)
        assert sig[:, 0, 0].mean() == pytest.approx(2.0 / 5, rel=0.02)
        assert sig[:, 2, 2].mean() == pytest.approx(2.0 / 7, rel=0.02)
        assert abs(sig[:, 0, 1].mean()) < 0.01

    def test_huge_V_mean(self, rng):
        cfg = self.cfg(2, V=1e8)
        pts = rng.normal(loc=[1.5, -0.5], size=(200, 2))
        n, s = np.array([200.0]), pts.sum(axis=0)[None]
        draws = np.array([gibbs_mu(n, s, np.eye(2)[None], cfg, rng)[0] for _ in range(4000)])
        se = draws.std(axis=0) / math.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - pts.mean(axis=0)) < 3 * se + 1e-12)
        assert np.allclose(draws.var(axis=0), 1 / 200, rtol=0.1)

    def test_sigma_conditional_moments(self, rng):
        cfg = self.cfg(2)
        pts = rng.normal(size=(30, 2)) @ np.array([[1.0, 0.3], [0.0, 0.8]])
        mu = np.zeros((1, 2))
        n, s, Q = np.array([30.0]), pts.sum(0)[None], (pts.T @ pts)[None]
        k = 50_000
        sig = gibbs_sigma(np.repeat(n, k), np.repeat(s, k, 0), np.repeat(Q, k, 0), np.repeat(mu, k, 0), 6, cfg, rng)
        # analytic IW(gamma + n, psi I + S) mean is scale / (df - 3)
        expect = (2.0 * np.eye(2) + Q[0]) / (6 + 30 - 3)
        assert np.allclose(sig.mean(axis=0), expect, rtol=0.03, atol=0.003)

    def test_deterministic(self):
        cfg = self.cfg(2)
        a = gibbs_mu(np.array([3.0]), np.ones((1, 2)), np.eye(2)[None], cfg, np.random.default_rng(5))
        b = gibbs_mu(np.array([3.0]), np.ones((1, 2)), np.eye(2)[None], cfg, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_iw_sampler_against_scipy(self, rng):
        scale = np.array([[2.0, 0.4], [0.4, 1.0]])
        x = sample_iw_2x2(np.full(100_000, 9.0), scale, rng)
        assert np.allclose(x.mean(axis=0), stats.invwishart.mean(df=9, scale=scale), rtol=0.02, atol=0.003)

    def test_iw_sampler_distribution(self, rng):
        scale = np.array([[1.5, -0.6], [-0.6, 0.8]])
        x = sample_iw_2x2(np.full(20_000, 5.0), scale, rng)
        ref = stats.invwishart.rvs(df=5, scale=scale, size=20_000, random_state=1)
        for f in (lambda m: m[:, 0, 0], lambda m: m[:, 0, 1], lambda m: m[:, 1, 1], np.linalg.det):
            assert stats.ks_2samp(f(x), f(ref)).pvalue > 1e-3

    def test_proposal_density(self, rng):
        cfg = PriorConfig(k_max=2, psi=1.5, g=10, V=3 * np.eye(3))
        pts = rng.normal(size=(12, 3))
        c = np.array([0] * 7 + [1] * 5)
        st_ = cm.ObsStats(pts)
        n, s, Q = st_.by_label(c, 3)
        mu, sig, lq = propose_params(n, s, Q, 7, cfg, rng)
        assert lq == pytest.approx(log_propose_params(mu, sig, n, s, Q, 7, cfg))
        # oracle: scipy densities for the same construction
        ref = 0.0
        for k in range(3):
            ybar = s[k] / max(n[k], 1)
            S = Q[k] - n[k] * np.outer(ybar, ybar) if n[k] else np.zeros((3, 3))
            ref += stats.invwishart.logpdf(sig[k, :2, :2], df=7 + n[k], scale=1.5 * np.eye(2) + S[:2, :2])
            ref += stats.invgamma.logpdf(sig[k, 2, 2], a=7 + n[k] / 2, scale=1.5 + S[2, 2] / 2)
            prec = np.linalg.inv(cfg.V) + n[k] * np.linalg.inv(sig[k])
            cov = np.linalg.inv(prec)
            ref += stats.multivariate_normal.logpdf(mu[k], cov @ np.linalg.inv(sig[k]) @ s[k], cov)
        assert lq == pytest.approx(ref, abs=1e-8)
