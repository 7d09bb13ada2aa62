"""Tree-constrained clustering model: normalisation, priors, likelihood, Gibbs kernels.

Migrations are a multiset ``m`` of observed haplotypes ("hubs"). Removing
the hubs from the tree leaves components whose observations must share a
cluster. A hub with multiplicity ``k`` owns ``k + 1`` local slots, and each
of its copies and each of its incident edges picks one slot. Gluing slots
to the components and edges they were picked by yields exactly ``K + 1``
groups, which a bijection ``lam`` maps onto the cluster labels ``0..K``.

Cluster parameters exist for all ``K_max + 1`` labels at all times; labels
above ``K`` are inactive and carry draws from the prior.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.special import gammaln

from .seqio import ObservationTable

LOG_2PI = math.log(2 * math.pi)


# --------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class NormalizedData:
    Y: np.ndarray
    geo_center: np.ndarray
    geo_scale: float  # multiplies centred lon/lat
    cov_centers: np.ndarray
    cov_scales: np.ndarray  # multiplies centred covariates

    @property
    def d(self) -> int:
        return self.Y.shape[1]

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def centers(self) -> np.ndarray:
        return np.concatenate([self.geo_center, self.cov_centers])

    @property
    def scales(self) -> np.ndarray:
        return np.concatenate([[self.geo_scale, self.geo_scale], self.cov_scales])

    def transform(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        d = raw.shape[-1]
        return (raw - self.centers[:d]) * self.scales[:d]

    def inverse(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        d = y.shape[-1]
        return y / self.scales[:d] + self.centers[:d]

    def inverse_cov(self, sigma) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=float)
        d = sigma.shape[-1]
        inv = 1.0 / self.scales[:d]
        return sigma * np.multiply.outer(inv, inv)


def normalize(obs: ObservationTable | np.ndarray) -> NormalizedData:
    """Centre everything; scale lon/lat by one shared factor so their average
    variance is 1, and each covariate to unit variance."""
    raw = obs.values if isinstance(obs, ObservationTable) else np.asarray(obs, dtype=float)
    if raw.shape[0] < 2:
        raise ValueError("need at least two observations to normalise")
    if raw.shape[1] < 2:
        raise ValueError("observations need longitude and latitude")
    geo = raw[:, :2]
    center = geo.mean(axis=0)
    avg_var = geo.var(axis=0).mean()
    if avg_var <= 0:
        raise ValueError("all observations share one location; geographic variance is zero")
    geo_scale = 1.0 / math.sqrt(avg_var)
    covs = raw[:, 2:]
    cov_centers = covs.mean(axis=0)
    cov_sd = covs.std(axis=0)
    if np.any(cov_sd <= 0):
        bad = [int(j) + 3 for j in np.flatnonzero(cov_sd <= 0)]
        raise ValueError(f"covariate column(s) {bad} have zero variance")
    cov_scales = 1.0 / cov_sd
    Y = np.empty_like(raw)
    Y[:, :2] = (geo - center) * geo_scale
    Y[:, 2:] = (covs - cov_centers) * cov_scales
    return NormalizedData(Y, center, geo_scale, cov_centers, cov_scales)


# --------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class PriorConfig:
    k_max: int
    psi: float
    g: int = 30
    V: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.k_max < 0:
            raise ValueError("k_max must be >= 0")
        if self.psi <= 0:
            raise ValueError("psi must be positive")
        if self.g < 4:
            raise ValueError("g must be >= 4")

    @cached_property
    def V_inv(self) -> np.ndarray:
        return np.linalg.inv(self.V)

    @cached_property
    def V_logdet(self) -> float:
        return float(np.linalg.slogdet(self.V)[1])

    @cached_property
    def psi_block(self) -> np.ndarray:
        return self.psi * np.eye(2)[None]

    @cached_property
    def V_diagonal(self) -> bool:
        return bool(np.count_nonzero(self.V - np.diag(np.diag(self.V))) == 0)

    def prior_mean_sigma(self, d: int, gamma: float | None = None) -> np.ndarray:
        gamma = self.g / 2 if gamma is None else gamma
        diag = np.full(d, self.psi / (gamma - 1))
        diag[:2] = self.psi / (gamma - 3)
        return np.diag(diag)

    def to_json(self) -> dict:
        return {"k_max": self.k_max, "psi": self.psi, "g": self.g, "V": self.V.tolist()}

    @classmethod
    def from_json(cls, doc) -> "PriorConfig":
        return cls(doc["k_max"], doc["psi"], doc["g"], np.asarray(doc["V"], dtype=float))


def default_prior(Y: NormalizedData | np.ndarray, k_max: int, g: int = 30, v_scale: float = 4.0,
                  psi: float | None = None) -> PriorConfig:
    """Prior whose mean cluster spread is 30% of the normalised geographic range.

    The mean of an IW(gamma, psi I2) marginal variance is psi / (gamma - 3);
    psi is set so that at gamma = g/2 the implied standard deviation equals
    0.15 of the range.
    """
    arr = Y.Y if isinstance(Y, NormalizedData) else np.asarray(Y)
    d = arr.shape[1]
    if psi is None:
        rng_ = float(np.ptp(arr[:, :2], axis=0).max())
        psi = (g / 2 - 3) * (0.3 * rng_ / 2) ** 2
    return PriorConfig(k_max=k_max, psi=psi, g=g, V=v_scale * np.eye(d))


def log_iw_2x2(X: np.ndarray, df: float, psi: float) -> float:
    """log IW(X; df, psi * I2)."""
    a, b, c = X[0, 0], X[0, 1], X[1, 1]
    det = a * c - b * b
    if det <= 0 or a <= 0:
        return -math.inf
    tr_inv = (a + c) / det
    log_mgamma = 0.5 * math.log(math.pi) + math.lgamma(df / 2) + math.lgamma(df / 2 - 0.5)
    return (
        df * math.log(psi)
        - df * math.log(2)
        - log_mgamma
        - 0.5 * (df + 3) * math.log(det)
        - 0.5 * psi * tr_inv
    )


def log_ig(x: float, shape: float, scale: float) -> float:
    if x <= 0:
        return -math.inf
    return shape * math.log(scale) - math.lgamma(shape) - (shape + 1) * math.log(x) - scale / x


def log_sigma_prior(sigma: np.ndarray, gamma: float, psi: float) -> float:
    out = log_iw_2x2(sigma[:2, :2], gamma, psi)
    for j in range(2, sigma.shape[0]):
        out += log_ig(sigma[j, j], gamma, psi)
    return out


def log_mvn(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    diff = x - mean
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        return -math.inf
    return -0.5 * (len(x) * LOG_2PI + logdet + diff @ np.linalg.solve(cov, diff))


def log_multinomial_m(m, weights: np.ndarray) -> float:
    """log P(m) for an unordered multiset of K independent weighted draws."""
    K = len(m)
    out = math.lgamma(K + 1)
    for h, k in Counter(m).items():
        if weights[h] <= 0:
            return -math.inf
        out += k * math.log(weights[h]) - math.lgamma(k + 1)
    return out


# --------------------------------------------------------------------------
# constrained clustering layout


class Layout:
    """Decision variables and glue structure for one (tree, hubs) pair.

    Elements are numbered: components of the tree minus the hubs, then one
    element per hub observation, one per hub-hub edge, then hub slots.
    A decision picks a slot for its hub and glues that slot to its target
    element.
    """

    def __init__(self, adj: list[list[int]], obs_nodes: np.ndarray, m):
        self.m = tuple(sorted(m))
        self.K = len(self.m)
        self.mult = dict(Counter(self.m))
        hubs = sorted(self.mult)
        hubset = set(hubs)
        V = len(adj)
        comp = [-1] * V
        C = 0
        for s in range(V):
            if s in hubset or comp[s] >= 0:
                continue
            comp[s] = C
            stack = [s]
            while stack:
                u = stack.pop()
                for v in adj[u]:
                    if v not in hubset and comp[v] < 0:
                        comp[v] = C
                        stack.append(v)
            C += 1
        self.n_components = C
        self.comp_of_node = comp
        obs_nodes = np.asarray(obs_nodes, dtype=int)
        self.obs_nodes = obs_nodes

        nxt = C
        obs_element = np.empty(len(obs_nodes), dtype=int)
        hub_obs: dict[int, list[int]] = {h: [] for h in hubs}
        for i, node in enumerate(obs_nodes):
            node = int(node)
            if node in hubset:
                hub_obs[node].append(i)
            else:
                obs_element[i] = comp[node]
        for h in hubs:
            for i in hub_obs[h]:
                obs_element[i] = nxt
                nxt += 1
        edge_element = {}
        for h in hubs:
            for x in adj[h]:
                if x in hubset and h < x:
                    edge_element[(h, x)] = nxt
                    nxt += 1
        slot_base = {}
        for h in hubs:
            slot_base[h] = nxt
            nxt += self.mult[h] + 1
        self.n_elements = nxt
        self.obs_element = obs_element
        self.slot_base = slot_base

        keys, dec_hub, dec_target, dec_nopt = [], [], [], []
        for h in hubs:
            for i in hub_obs[h]:
                keys.append(("o", i))
                dec_hub.append(h)
                dec_target.append(int(obs_element[i]))
                dec_nopt.append(self.mult[h] + 1)
            for x in adj[h]:
                keys.append(("e", h, x))
                dec_hub.append(h)
                dec_target.append(comp[x] if x not in hubset else edge_element[(min(h, x), max(h, x))])
                dec_nopt.append(self.mult[h] + 1)
        self.keys = keys
        self.key_index = {k: j for j, k in enumerate(keys)}
        self.dec_hub = dec_hub
        self.dec_target = dec_target
        self.dec_nopt = dec_nopt
        self.log_prior_slots = -float(sum(math.log(k) for k in dec_nopt))

    @property
    def n_decisions(self) -> int:
        return len(self.keys)

    def slot_element(self, d: int, j: int) -> int:
        return self.slot_base[self.dec_hub[d]] + j

    def groups(self, slots) -> np.ndarray:
        """Canonical group index (0..K) of every element."""
        parent = list(range(self.n_elements))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for d, j in enumerate(slots):
            a = find(self.slot_element(d, int(j)))
            b = find(self.dec_target[d])
            if a != b:
                if a < b:
                    parent[b] = a
                else:
                    parent[a] = b
        relabel: dict[int, int] = {}
        out = np.empty(self.n_elements, dtype=int)
        for e in range(self.n_elements):
            out[e] = relabel.setdefault(find(e), len(relabel))
        if len(relabel) != self.K + 1:
            raise RuntimeError(f"glue produced {len(relabel)} groups, expected {self.K + 1}")
        return out

    def labels(self, slots, lam) -> np.ndarray:
        gid = self.groups(slots)
        return np.asarray(lam)[gid[self.obs_element]]


# --------------------------------------------------------------------------
# state


@dataclass
class ClusterState:
    layout: Layout
    slots: np.ndarray
    lam: np.ndarray  # group -> label, a permutation of 0..K
    mu: np.ndarray  # (k_max + 1, d)
    sigma: np.ndarray  # (k_max + 1, d, d)
    gamma: int
    c: np.ndarray = None
    gid: np.ndarray = None  # canonical group of every layout element

    def __post_init__(self):
        if self.gid is None:
            self.gid = self.layout.groups(self.slots)
        if self.c is None:
            self.c = np.asarray(self.lam)[self.gid[self.layout.obs_element]]

    @property
    def K(self) -> int:
        return self.layout.K

    @property
    def m(self) -> tuple[int, ...]:
        return self.layout.m

    def copy(self) -> "ClusterState":
        return replace(
            self,
            slots=self.slots.copy(),
            lam=self.lam.copy(),
            mu=self.mu.copy(),
            sigma=self.sigma.copy(),
            c=self.c.copy(),
            gid=self.gid.copy(),
        )

    def effective_clusters(self) -> int:
        return len(np.unique(self.c))


# --------------------------------------------------------------------------
# validity


def _steiner_nodes(adj, terminals: set[int]) -> set[int]:
    if len(terminals) <= 1:
        return set(terminals)
    alive = set(range(len(adj)))
    deg = {u: len(adj[u]) for u in alive}
    leaves = [u for u in alive if deg[u] <= 1 and u not in terminals]
    while leaves:
        u = leaves.pop()
        if u not in alive:
            continue
        alive.discard(u)
        for v in adj[u]:
            if v in alive:
                deg[v] -= 1
                if deg[v] <= 1 and v not in terminals:
                    leaves.append(v)
    return alive


def is_valid_clustering(c, m, adj, obs_nodes) -> bool:
    """Whether observation labels ``c`` can arise from migrations ``m`` on the tree.

    Checked directly on the tree: each label's observations span a subtree,
    and those subtrees may not share a non-migrating component or a
    hub-to-hub edge. Every label on or next to hub ``h`` takes one of its
    ``mult(h) + 1`` slots. Observation-free components and edges must also
    find slots, which a small dynamic programme over the hub/element tree
    decides exactly.
    """
    c = np.asarray(c, dtype=int)
    obs_nodes = np.asarray(obs_nodes, dtype=int)
    K = len(m)
    # label values are arbitrary (relabelled draws); only the partition matters
    if len(c) and (c.min() < 0 or len(np.unique(c)) > K + 1):
        return False
    mult = Counter(int(h) for h in m)
    hubset = set(mult)
    V = len(adj)
    comp = [-1] * V
    C = 0
    for s in range(V):
        if s in hubset or comp[s] >= 0:
            continue
        comp[s] = C
        stack = [s]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in hubset and comp[v] < 0:
                    comp[v] = C
                    stack.append(v)
        C += 1
    comp_label = [-1] * C
    terminals: dict[int, set[int]] = {}
    for lab, node in zip(c, obs_nodes):
        lab, node = int(lab), int(node)
        terminals.setdefault(lab, set()).add(node)
        if node not in hubset:
            k = comp[node]
            if comp_label[k] not in (-1, lab):
                return False
            comp_label[k] = lab
    hub_labels: dict[int, set[int]] = {h: set() for h in hubset}
    hub_edges: dict[tuple[int, int], int] = {}
    for lab, terms in terminals.items():
        tree = _steiner_nodes(adj, terms)
        for u in tree:
            if u in hubset:
                hub_labels[u].add(lab)
                for v in adj[u]:
                    if v in hubset and v in tree:
                        e = (min(u, v), max(u, v))
                        if hub_edges.setdefault(e, lab) != lab:
                            return False
            else:
                k = comp[u]
                if comp_label[k] not in (-1, lab):
                    return False
                comp_label[k] = lab

    # Slots used at each hub: every label on an adjacent element occupies one,
    # whether or not that label's subtree passes through the hub.
    hub_of_obs: dict[int, set[int]] = {h: set() for h in hubset}
    for lab, node in zip(c, obs_nodes):
        if int(node) in hubset:
            hub_of_obs[int(node)].add(int(lab))
    F = {h: hub_labels[h] | hub_of_obs[h] for h in hubset}
    # unlabeled elements: observation-free components and hub-hub edges off every subtree
    elem_hubs: dict[tuple, list[int]] = {}
    for h in hubset:
        for x in adj[h]:
            if x in hubset:
                e = (min(h, x), max(h, x))
                if e in hub_edges:
                    F[h].add(hub_edges[e])
                else:
                    elem_hubs.setdefault(("e", e), [])
                    if h not in elem_hubs[("e", e)]:
                        elem_hubs[("e", e)].append(h)
            else:
                k = comp[x]
                if comp_label[k] >= 0:
                    F[h].add(comp_label[k])
                else:
                    elem_hubs.setdefault(("c", k), []).append(h)
    cap = {h: mult[h] + 1 for h in hubset}
    if any(len(F[h]) > cap[h] for h in hubset):
        return False
    hub_elems: dict[int, list[tuple]] = {h: [] for h in hubset}
    for el, hs in elem_hubs.items():
        for h in hs:
            hub_elems[h].append(el)

    def solve(el, parent_hub) -> tuple[bool, bool]:
        """(feasible with el's group label-free below, feasible with it labeled below)."""
        hub_opts = []
        for h in elem_hubs[el]:
            if h == parent_hub:
                continue
            n_used = 0
            for child in hub_elems[h]:
                if child == el:
                    continue
                free, used = solve(child, h)
                if free:
                    continue  # joins this group at h at no cost
                if not used:
                    return False, False
                n_used += 1  # carries a label up; needs its own slot unless it joins
            base = len(F[h]) + 1 + n_used
            keep = base <= cap[h]
            take = (bool(F[h]) or n_used > 0) and base - 1 <= cap[h]
            hub_opts.append((keep, take))
        free = all(k for k, _ in hub_opts)
        used = any(
            t and all(k for j, (k, _) in enumerate(hub_opts) if j != i) for i, (_, t) in enumerate(hub_opts)
        )
        return free, used

    seen: set[tuple] = set()
    for el in elem_hubs:
        if el in seen:
            continue
        stack = [el]
        seen.add(el)
        while stack:
            cur = stack.pop()
            for h in elem_hubs[cur]:
                for nxt in hub_elems[h]:
                    if nxt not in seen:
                        seen.add(nxt)
                        stack.append(nxt)
        if not any(solve(el, None)):
            return False
    return True


# --------------------------------------------------------------------------
# statistics, likelihood and prior


class ObsStats:
    """Per-observation sufficient statistics for fast group aggregation."""

    def __init__(self, Y: np.ndarray):
        self.Y = np.asarray(Y, dtype=float)
        self.N, self.d = self.Y.shape
        self.outer = np.einsum("ni,nj->nij", self.Y, self.Y).reshape(self.N, -1)

    def by_label(self, c: np.ndarray, n_labels: int):
        onehot = np.zeros((n_labels, self.N))
        onehot[c, np.arange(self.N)] = 1.0
        n = onehot.sum(axis=1)
        s = onehot @ self.Y
        Q = (onehot @ self.outer).reshape(n_labels, self.d, self.d)
        return n, s, Q


def cluster_loglik(n, s, Q, mu, sigma) -> float:
    """Gaussian log-likelihood of a cluster from (count, sum, sum of outer products)."""
    if n == 0:
        return 0.0
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("cluster covariance is not positive definite") from None
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    S = Q - np.outer(mu, s) - np.outer(s, mu) + n * np.outer(mu, mu)
    prec = np.linalg.inv(sigma)
    return -0.5 * (n * (len(mu) * LOG_2PI + logdet) + float(np.sum(prec * S)))


def log_likelihood(Y, c, mu, sigma, stats: ObsStats | None = None) -> float:
    """sum_i log N(Y_i; mu_{c_i}, Sigma_{c_i}); empty clusters contribute nothing."""
    Y = Y.Y if isinstance(Y, NormalizedData) else np.asarray(Y)
    stats = stats or ObsStats(Y)
    c = np.asarray(c, dtype=int)
    n_labels = max(int(c.max()) + 1, len(mu))
    n, s, Q = stats.by_label(c, n_labels)
    return sum(cluster_loglik(n[k], s[k], Q[k], mu[k], sigma[k]) for k in range(n_labels) if n[k] > 0)


def log_sigma_prior_batch(sigma: np.ndarray, gamma: float, psi: float) -> np.ndarray:
    """log prior of each covariance in a stack (IW lon/lat block, IG covariates)."""
    a, b, c = sigma[:, 0, 0], sigma[:, 0, 1], sigma[:, 1, 1]
    det = a * c - b * b
    ok = (det > 0) & (a > 0)
    all_ok = bool(ok.all())
    if not all_ok:
        det = np.where(ok, det, 1.0)
    log_mgamma = 0.5 * math.log(math.pi) + math.lgamma(gamma / 2) + math.lgamma(gamma / 2 - 0.5)
    const = gamma * math.log(psi) - gamma * math.log(2) - log_mgamma
    out = const - 0.5 * (gamma + 3) * np.log(det) - 0.5 * psi * (a + c) / det
    if not all_ok:
        out = np.where(ok, out, -np.inf)
    d = sigma.shape[1]
    if d > 2:
        x = np.diagonal(sigma, axis1=1, axis2=2)[:, 2:]
        with np.errstate(divide="ignore", invalid="ignore"):
            ig = gamma * math.log(psi) - math.lgamma(gamma) - (gamma + 1) * np.log(x) - psi / x
        out = out + np.where(x > 0, ig, -np.inf).sum(axis=1)
    return out


def log_params_prior(mu, sigma, gamma, cfg: PriorConfig) -> float:
    if not 4 <= gamma <= cfg.g:
        return -math.inf
    mu = np.asarray(mu, dtype=float)
    out = -math.log(cfg.g - 3) + float(np.sum(log_sigma_prior_batch(np.asarray(sigma, dtype=float), gamma, cfg.psi)))
    quad = np.einsum("ki,ij,kj->k", mu, cfg.V_inv, mu)
    return out + float(np.sum(-0.5 * (mu.shape[1] * LOG_2PI + cfg.V_logdet + quad)))


@dataclass(frozen=True)
class PriorSums:
    """Sums over labels that make the mu and Sigma prior closed-form in gamma."""

    n_labels: int
    n_cov: int
    logdet_block: float  # sum of log|lon/lat block|
    trace_block: float  # sum of tr(block^-1)
    log_cov: float  # sum of log covariate variances
    inv_cov: float  # sum of covariate precisions
    log_mu: float  # Normal(0, V) log density of every mean, summed

    def log_sigma_prior(self, gamma: float, psi: float) -> float:
        lg = math.log(psi)
        log_mgamma = 0.5 * math.log(math.pi) + math.lgamma(gamma / 2) + math.lgamma(gamma / 2 - 0.5)
        out = self.n_labels * (gamma * lg - gamma * math.log(2) - log_mgamma)
        out -= 0.5 * (gamma + 3) * self.logdet_block + 0.5 * psi * self.trace_block
        out += self.n_labels * self.n_cov * (gamma * lg - math.lgamma(gamma))
        return out - (gamma + 1) * self.log_cov - psi * self.inv_cov

    def log_prior(self, gamma: float, cfg: PriorConfig) -> float:
        """Equals ``log_params_prior`` for the parameters these sums came from."""
        if not 4 <= gamma <= cfg.g:
            return -math.inf
        return -math.log(cfg.g - 3) + self.log_sigma_prior(gamma, cfg.psi) + self.log_mu


def prior_sums(mu, sigma, prec, logdet, cfg: PriorConfig) -> PriorSums:
    """PriorSums from positive-definite parameters and their precisions."""
    k, d = mu.shape
    x = np.diagonal(sigma, axis1=1, axis2=2)[:, 2:]
    log_cov = float(np.log(x).sum())
    quad = np.einsum("ki,ij,kj->", mu, cfg.V_inv, mu)
    return PriorSums(
        n_labels=k,
        n_cov=d - 2,
        logdet_block=float(logdet.sum()) - log_cov,
        trace_block=float((prec[:, 0, 0] + prec[:, 1, 1]).sum()),
        log_cov=log_cov,
        inv_cov=float(np.diagonal(prec, axis1=1, axis2=2)[:, 2:].sum()),
        log_mu=-0.5 * (k * (d * LOG_2PI + cfg.V_logdet) + float(quad)),
    )


def log_structure_prior(layout: Layout, weights: np.ndarray, k_max: int) -> float:
    """K, m, slot and label terms; does not depend on the cluster parameters."""
    K = layout.K
    if K > k_max:
        return -math.inf
    return (
        -math.log(k_max + 1)
        + log_multinomial_m(layout.m, weights)
        + layout.log_prior_slots
        - math.lgamma(K + 2)
    )


def log_prior(state: ClusterState, cfg: PriorConfig, weights: np.ndarray) -> float:
    """Full prior: K, m, clustering (slots and labels), Sigma, mu and gamma."""
    return log_structure_prior(state.layout, weights, cfg.k_max) + log_params_prior(
        state.mu, state.sigma, state.gamma, cfg
    )


def clustering_log_prior(m, counts, degrees) -> float:
    """prod over distinct migrating haplotypes of (1/|C|)^(copies + degree), |C| = mult + 1."""
    out = 0.0
    for h, k in Counter(m).items():
        out -= (counts[h] + degrees[h]) * math.log(k + 1)
    return out


def haplotype_weights(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    return counts / counts.sum()


# --------------------------------------------------------------------------
# sampling from priors and full conditionals


def block_inverse(M: np.ndarray):
    """Inverse and log-determinant of a stack of covariances that are a full
    2x2 lon/lat block plus a diagonal over the covariates.

    Returns ``(inv, logdet, ok)``; ``ok`` is False where a matrix is not
    positive definite (its entries are then meaningless).
    """
    a, b, c = M[:, 0, 0], M[:, 0, 1], M[:, 1, 1]
    det = a * c - b * b
    ok = (det > 0) & (a > 0)
    if not ok.all():
        det = np.where(ok, det, 1.0)
    d = M.shape[1]
    inv = np.zeros_like(M)
    inv[:, 0, 0] = c / det
    inv[:, 1, 1] = a / det
    inv[:, 0, 1] = inv[:, 1, 0] = -b / det
    if d == 2:
        return inv, np.log(det), ok
    logdet = np.log(det)
    if d > 2:
        x = np.diagonal(M, axis1=1, axis2=2)[:, 2:]
        pos = x > 0
        ok = ok & pos.all(axis=1)
        x = np.where(pos, x, 1.0)
        j = np.arange(2, M.shape[1])
        inv[:, j, j] = 1.0 / x
        logdet = logdet + np.log(x).sum(axis=1)
    return inv, logdet, ok


def block_cholesky(M: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a stack of block-structured covariances."""
    L = np.zeros_like(M)
    l00 = np.sqrt(M[:, 0, 0])
    l10 = M[:, 1, 0] / l00
    L[:, 0, 0] = l00
    L[:, 1, 0] = l10
    L[:, 1, 1] = np.sqrt(M[:, 1, 1] - l10 * l10)
    if M.shape[1] > 2:
        j = np.arange(2, M.shape[1])
        L[:, j, j] = np.sqrt(M[:, j, j])
    return L


def _inv2(a, b, c):
    det = a * c - b * b
    return c / det, -b / det, a / det, det


def sample_iw_2x2(df, scale, rng) -> np.ndarray:
    """Draw from IW(df, scale) in two dimensions via the Bartlett decomposition.

    With scale = L L^T and A the Bartlett factor of a Wishart(df, I) draw,
    X = L A^-T A^-1 L^T. ``df`` may be a vector and ``scale`` a stack of
    2x2 matrices, giving one independent draw per entry.
    """
    df = np.atleast_1d(np.asarray(df, dtype=float))
    scale = np.asarray(scale, dtype=float).reshape(-1, 2, 2)
    k = max(len(df), len(scale))
    if len(df) != k:
        df = np.broadcast_to(df, (k,))
    s00, s01, s11 = scale[:, 0, 0], 0.5 * (scale[:, 0, 1] + scale[:, 1, 0]), scale[:, 1, 1]
    if len(scale) != k:
        s00, s01, s11 = (np.broadcast_to(x, (k,)) for x in (s00, s01, s11))
    l00 = np.sqrt(s00)
    l10 = s01 / l00
    l11 = np.sqrt(s11 - l10 * l10)
    a00 = np.sqrt(rng.chisquare(df))
    a11 = np.sqrt(rng.chisquare(df - 1))
    a10 = rng.standard_normal(k)
    # M = L A^-T, upper-right entry of A^-T is -a10 / (a00 a11)
    u = -a10 / (a00 * a11)
    m00 = l00 / a00
    m01 = l00 * u
    m10 = l10 / a00
    m11 = l10 * u + l11 / a11
    out = np.empty((k, 2, 2))
    out[:, 0, 0] = m00 * m00 + m01 * m01
    out[:, 0, 1] = out[:, 1, 0] = m00 * m10 + m01 * m11
    out[:, 1, 1] = m10 * m10 + m11 * m11
    return out


def sample_ig(shape, scale, rng):
    return scale / rng.gamma(shape)


def sample_sigma_prior(d: int, gamma: float, psi: float, rng, size: int = 1) -> np.ndarray:
    """``size`` covariance draws, shape (size, d, d)."""
    sigma = np.zeros((size, d, d))
    sigma[:, :2, :2] = sample_iw_2x2(np.full(size, float(gamma)), np.broadcast_to(psi * np.eye(2), (size, 2, 2)), rng)
    for j in range(2, d):
        sigma[:, j, j] = sample_ig(np.full(size, float(gamma)), psi, rng)
    return sigma


def sample_params_prior(cfg: PriorConfig, d: int, gamma: float, rng):
    n = cfg.k_max + 1
    mu = rng.multivariate_normal(np.zeros(d), cfg.V, size=n)
    return mu, sample_sigma_prior(d, gamma, cfg.psi, rng, size=n)


def scatter(n, s, Q, mu) -> np.ndarray:
    """Per-cluster sum of (y - mu)(y - mu)^T from sufficient statistics."""
    ms = np.einsum("ki,kj->kij", mu, s)
    return Q - ms - ms.transpose(0, 2, 1) + n[:, None, None] * np.einsum("ki,kj->kij", mu, mu)


def gibbs_mu(n, s, sigma, cfg: PriorConfig, rng, temper: float = 1.0) -> np.ndarray:
    """Draw every cluster mean from its Normal full conditional.

    ``n`` (k,), ``s`` (k, d) and ``sigma`` (k, d, d); empty clusters, or
    ``temper == 0``, draw from the prior.
    """
    n = np.asarray(n, dtype=float)
    s = np.asarray(s, dtype=float)
    mean, cov = _mu_conditional(temper * n, s, sigma, cfg, temper)
    z = rng.standard_normal(s.shape)
    return mean + np.einsum("kij,kj->ki", _cholesky(cov, cfg), z)


def gibbs_sigma(n, s, Q, mu, gamma, cfg: PriorConfig, rng, temper: float = 1.0) -> np.ndarray:
    """Draw every cluster covariance: IW for lon/lat, IG for each covariate."""
    n = np.asarray(n, dtype=float)
    k, d = np.shape(mu)
    w = temper * n
    S = scatter(n, s, Q, mu) * (temper * (n > 0))[:, None, None]
    sigma = np.zeros((k, d, d))
    sigma[:, :2, :2] = sample_iw_2x2(gamma + w, cfg.psi_block + S[:, :2, :2], rng)
    for j in range(2, d):
        sigma[:, j, j] = sample_ig(gamma + 0.5 * w, cfg.psi + 0.5 * S[:, j, j], rng)
    return sigma


# --------------------------------------------------------------------------
# data-driven parameter proposal


def log_iw_2x2_batch(X: np.ndarray, df: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """log IW(X_k; df_k, scale_k) for stacks of 2x2 matrices."""
    s01 = 0.5 * (scale[:, 0, 1] + scale[:, 1, 0])
    detS = scale[:, 0, 0] * scale[:, 1, 1] - s01 * s01
    i00, i01, i11, detX = _inv2(X[:, 0, 0], X[:, 0, 1], X[:, 1, 1])
    tr = scale[:, 0, 0] * i00 + 2.0 * s01 * i01 + scale[:, 1, 1] * i11
    log_mgamma = 0.5 * math.log(math.pi) + gammaln(df / 2) + gammaln(df / 2 - 0.5)
    return 0.5 * df * np.log(detS) - df * math.log(2) - log_mgamma - 0.5 * (df + 3) * np.log(detX) - 0.5 * tr


def _proposal_terms(n, s, Q, gamma, cfg: PriorConfig, temper: float):
    n = np.asarray(n, dtype=float)
    w = temper * n
    ybar = s / np.maximum(n, 1.0)[:, None]
    # scatter about the sample mean; exactly zero for empty labels
    S = Q - np.einsum("ki,kj->kij", s, ybar)
    if temper != 1.0:
        S = temper * S
    return w, S, cfg.psi_block + S[:, :2, :2]


def _mu_conditional(w, s, sigma, cfg: PriorConfig, temper: float):
    if not cfg.V_diagonal:
        sig_inv = block_inverse(sigma)[0]
        cov = np.linalg.inv(cfg.V_inv[None] + w[:, None, None] * sig_inv)
        cov = 0.5 * (cov + cov.transpose(0, 2, 1))
        mean = np.einsum("kij,kj->ki", cov, temper * np.einsum("kij,kj->ki", sig_inv, s))
        return mean, cov
    # block-structured Sigma and diagonal V: work on the lon/lat components
    k, d = s.shape
    vinv = np.diag(cfg.V_inv)
    i00, i01, i11, _ = _inv2(sigma[:, 0, 0], sigma[:, 0, 1], sigma[:, 1, 1])
    c00, c01, c11, _ = _inv2(vinv[0] + w * i00, w * i01, vinv[1] + w * i11)
    t0 = temper * (i00 * s[:, 0] + i01 * s[:, 1])
    t1 = temper * (i01 * s[:, 0] + i11 * s[:, 1])
    mean = np.empty((k, d))
    mean[:, 0] = c00 * t0 + c01 * t1
    mean[:, 1] = c01 * t0 + c11 * t1
    cov = np.zeros((k, d, d))
    cov[:, 0, 0] = c00
    cov[:, 0, 1] = cov[:, 1, 0] = c01
    cov[:, 1, 1] = c11
    for j in range(2, d):
        x = sigma[:, j, j]
        v = 1.0 / (vinv[j] + w / x)
        cov[:, j, j] = v
        mean[:, j] = v * temper * s[:, j] / x
    return mean, cov


def _cholesky(cov, cfg: PriorConfig) -> np.ndarray:
    return block_cholesky(cov) if cfg.V_diagonal else np.linalg.cholesky(cov)


def _log_mvn_batch(x, mean, cov, cfg: PriorConfig) -> np.ndarray:
    diff = x - mean
    if not cfg.V_diagonal:
        _, logdet = np.linalg.slogdet(cov)
        quad = np.einsum("ki,ki->k", diff, np.linalg.solve(cov, diff[..., None])[..., 0])
        return -0.5 * (x.shape[1] * LOG_2PI + logdet + quad)
    i00, i01, i11, det = _inv2(cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1])
    e0, e1 = diff[:, 0], diff[:, 1]
    quad = i00 * e0 * e0 + 2.0 * i01 * e0 * e1 + i11 * e1 * e1
    logdet = np.log(det)
    for j in range(2, x.shape[1]):
        v = cov[:, j, j]
        quad = quad + diff[:, j] ** 2 / v
        logdet = logdet + np.log(v)
    return -0.5 * (x.shape[1] * LOG_2PI + logdet + quad)


def propose_params(n, s, Q, gamma, cfg: PriorConfig, rng, temper: float = 1.0):
    """Draw (mu, Sigma) for every label given a clustering's statistics.

    Sigma comes from the conjugate update centred on each cluster's sample
    mean, then mu from its exact full conditional given that Sigma. Empty
    labels draw from the prior. Returns ``(mu, sigma, log_q)``.
    """
    k, d = np.shape(s)
    w, S, scale = _proposal_terms(n, s, Q, gamma, cfg, temper)
    sigma = np.zeros((k, d, d))
    sigma[:, :2, :2] = sample_iw_2x2(gamma + w, scale, rng)
    for j in range(2, d):
        sigma[:, j, j] = sample_ig(gamma + 0.5 * w, cfg.psi + 0.5 * S[:, j, j], rng)
    mean, cov = _mu_conditional(w, s, sigma, cfg, temper)
    mu = mean + np.einsum("kij,kj->ki", _cholesky(cov, cfg), rng.standard_normal((k, d)))
    return mu, sigma, _log_q_params(mu, sigma, w, S, scale, mean, cov, gamma, cfg)


def log_propose_params(mu, sigma, n, s, Q, gamma, cfg: PriorConfig, temper: float = 1.0) -> float:
    """Log-density of ``propose_params`` producing (mu, sigma)."""
    w, S, scale = _proposal_terms(n, s, Q, gamma, cfg, temper)
    mean, cov = _mu_conditional(w, s, sigma, cfg, temper)
    return _log_q_params(mu, sigma, w, S, scale, mean, cov, gamma, cfg)


def _log_q_params(mu, sigma, w, S, scale, mean, cov, gamma, cfg: PriorConfig) -> float:
    out = log_iw_2x2_batch(sigma[:, :2, :2], gamma + w, scale)
    for j in range(2, mu.shape[1]):
        a = gamma + 0.5 * w
        b = cfg.psi + 0.5 * S[:, j, j]
        x = sigma[:, j, j]
        out = out + a * np.log(b) - gammaln(a) - (a + 1) * np.log(x) - b / x
    return float(np.sum(out + _log_mvn_batch(mu, mean, cov, cfg)))
