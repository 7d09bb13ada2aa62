"""MCMC over roots, trees, migrations and constrained clusterings.

One iteration runs, in order: a root move; a clustering move (every
``tree_every`` iterations this also proposes a new tree and changes one
migrating haplotype); Gibbs refreshes of every cluster's mean and
covariance; a move changing the number of migrations; and, every
``hyper_every`` iterations, an update of the concentration ``gamma``.

Root and tree moves use a freshly drawn ordering estimate for the proposed
pair and the stored estimate for the current one. The stored estimate is
only replaced on acceptance, so root moves are pseudo-marginal.
"""

from __future__ import annotations

import logging
import math
import sys
from collections import Counter, OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import clustmodel as cm
from .errors import ConfigError
from .haplonet import (
    Network,
    TreeHashTable,
    default_tree,
    propose_tree,
    rooted_children,
    tree_adjacency,
)
from .ordering import EventSchedule, log_estimate_schedule, sample_log_inv_q, schedule_from_children

log = logging.getLogger(__name__)

FIT_EPS = 0.05
WC_STEP = 0.5


@dataclass
class RunConfig:
    max_mig: int
    iterations: int
    post_samples: int
    dims: int = 2
    ds: int = 0
    seed: int = 0
    chains: int = 2
    burn_in_fraction: float = 0.9
    tree_every: int = 5
    hyper_every: int = 1
    temper: float = 1.0
    g: int = 30
    v_scale: float = 4.0
    psi: float | None = None
    threads: int = 1
    root_tv_threshold: float = 0.1
    mean_threshold: float = 0.5
    ordering_draws: int = 1
    progress: bool = False

    def validate(self) -> None:
        if self.iterations < self.post_samples:
            raise ConfigError(f"iterations ({self.iterations}) must be >= post_samples ({self.post_samples})")
        if self.post_samples < 1:
            raise ConfigError("post_samples must be >= 1")
        if self.max_mig < 0:
            raise ConfigError("max_mig must be >= 0")
        if self.dims < 2:
            raise ConfigError("dims must be >= 2")
        if self.chains < 1:
            raise ConfigError("chains must be >= 1")
        if not 0 <= self.burn_in_fraction < 1:
            raise ConfigError("burn_in_fraction must be in [0, 1)")
        if self.g < 4:
            raise ConfigError("g must be >= 4")
        if self.ordering_draws < 1:
            raise ConfigError("ordering_draws must be >= 1")

    @property
    def burn_in(self) -> int:
        return min(int(self.iterations * self.burn_in_fraction), self.iterations - self.post_samples)

    def save_indices(self) -> np.ndarray:
        span = self.iterations - self.burn_in
        return self.burn_in + (np.arange(self.post_samples) * span) // self.post_samples


@dataclass
class ChainState:
    deleted: tuple[int, ...]
    root: int
    log_est: float
    clust: cm.ClusterState
    w_c: float = 0.5
    iteration: int = 0
    cache: object = None
    # cached terms of the current state; None means stale
    stats: tuple | None = None  # (n, s, Q) per label of the current clustering
    lp: float | None = None  # structure prior plus tempered likelihood
    pp: float | None = None  # prior of mu, Sigma and gamma

    def params(self) -> "ParamCache":
        if self.cache is None:
            self.cache = ParamCache(self.clust.mu, self.clust.sigma)
        return self.cache

    def label_stats(self, ctx: "Context") -> tuple:
        if self.stats is None:
            self.stats = ctx.stats.by_label(self.clust.c, ctx.cfg.k_max + 1)
        return self.stats

    def log_post(self, ctx: "Context") -> float:
        if self.lp is None:
            self.lp = _clust_logpost(ctx, self.clust, self.params(), self.label_stats(ctx))
        return self.lp

    def log_params_prior(self, ctx: "Context") -> float:
        if self.pp is None:
            cl = self.clust
            self.pp = self.params().log_prior(cl.gamma, ctx.cfg)
        return self.pp

    def set_clustering(self, clust, cache, stats, lp, pp=None) -> None:
        self.clust, self.cache, self.stats, self.lp = clust, cache, stats, lp
        if pp is not None:
            self.pp = pp

    def params_changed(self) -> None:
        self.cache = self.lp = self.pp = None


class Context:
    """Everything a chain needs that does not change while it runs."""

    def __init__(self, net: Network, obs_nodes, Y: cm.NormalizedData, cfg: cm.PriorConfig, temper: float = 1.0,
                 ordering_draws: int = 1):
        self.net = net
        self.obs_nodes = np.asarray(obs_nodes, dtype=int)
        self.Y = Y
        self.stats = cm.ObsStats(Y.Y)
        self.cfg = cfg
        self.temper = float(temper)
        counts = np.bincount(self.obs_nodes, minlength=net.n_nodes).astype(float)
        if not np.array_equal(counts, net.counts):
            raise ValueError("observation-to-node map disagrees with network counts")
        self.weights = counts / counts.sum()
        self.observed_nodes = np.flatnonzero(counts > 0)
        self.d = Y.d
        self.prior_var = np.diag(cfg.prior_mean_sigma(self.d)).tolist()
        self.refresh_prob = 0.5
        self.ordering_draws = int(ordering_draws)
        self._adj: OrderedDict = OrderedDict()
        self._layouts: OrderedDict = OrderedDict()
        self._sched: OrderedDict = OrderedDict()

    def adjacency(self, deleted):
        hit = self._adj.get(deleted)
        if hit is None:
            hit = tree_adjacency(self.net, deleted)
            self._adj[deleted] = hit
            if len(self._adj) > 512:
                self._adj.popitem(last=False)
        return hit

    def schedule(self, deleted, root) -> EventSchedule:
        key = (deleted, root)
        hit = self._sched.get(key)
        if hit is None:
            children, _ = rooted_children(self.adjacency(deleted), root)
            hit = schedule_from_children(self.net.counts, children, root)
            self._sched[key] = hit
            if len(self._sched) > 2048:
                self._sched.popitem(last=False)
        return hit

    def log_estimate(self, deleted, root, rng) -> float:
        """log of an unbiased estimate of the ordering count: the mean of
        ``ordering_draws`` independent ``1/q`` draws."""
        s = self.schedule(deleted, root)
        if self.ordering_draws == 1:
            return log_estimate_schedule(s, rng)
        if not s.feasible:
            return -math.inf
        v = sample_log_inv_q(s, rng, self.ordering_draws)
        top = float(v.max())
        return top + math.log(float(np.mean(np.exp(v - top))))

    def layout(self, deleted, m) -> cm.Layout:
        key = (deleted, tuple(sorted(m)))
        hit = self._layouts.get(key)
        if hit is None:
            hit = cm.Layout(self.adjacency(deleted), self.obs_nodes, key[1])
            _attach_element_stats(hit, self.stats)
            self._layouts[key] = hit
            if len(self._layouts) > 1024:
                self._layouts.popitem(last=False)
        return hit


def _attach_element_stats(layout: cm.Layout, stats: cm.ObsStats) -> None:
    E = layout.n_elements
    onehot = np.zeros((E, stats.N))
    onehot[layout.obs_element, np.arange(stats.N)] = 1.0
    layout.elem_n = onehot.sum(axis=1)
    layout.elem_s = onehot @ stats.Y
    layout.elem_Q = (onehot @ stats.outer).reshape(E, stats.d, stats.d)
    # plain lists for the sequential regrowth loop
    layout.elem_n_list = layout.elem_n.tolist()
    layout.elem_s_list = layout.elem_s.tolist()
    layout.elem_ss_list = (onehot @ (stats.Y ** 2)).tolist()


# --------------------------------------------------------------------------
# likelihood helpers


class ParamCache:
    """Precisions and derived terms of the current cluster parameters."""

    def __init__(self, mu: np.ndarray, sigma: np.ndarray):
        self.prec, self.logdet, ok = cm.block_inverse(np.asarray(sigma, dtype=float))
        if not ok.all():
            raise np.linalg.LinAlgError("cluster covariance is not positive definite")
        self.pmu = np.einsum("kij,kj->ki", self.prec, mu)
        self.mupmu = np.einsum("ki,ki->k", mu, self.pmu)
        self.d = mu.shape[1]
        self.mu, self.sigma = mu, sigma
        self._sums = None

    def prior_sums(self, cfg: cm.PriorConfig) -> cm.PriorSums:
        if self._sums is None:
            self._sums = cm.prior_sums(self.mu, self.sigma, self.prec, self.logdet, cfg)
        return self._sums

    def log_prior(self, gamma: float, cfg: cm.PriorConfig) -> float:
        """log prior of (mu, Sigma) at ``gamma``; equals ``cm.log_params_prior``."""
        return self.prior_sums(cfg).log_prior(gamma, cfg)

    def loglik_matrix(self, n, s, Q) -> np.ndarray:
        """ll[g, l]: log-likelihood of group g under label l's parameters."""
        tr = np.einsum("gij,lij->gl", Q, self.prec)
        cross = s @ self.pmu.T
        base = self.d * cm.LOG_2PI + self.logdet
        return -0.5 * (n[:, None] * (base[None, :] + self.mupmu[None, :]) + tr - 2.0 * cross)

    def loglik_diag(self, n, s, Q) -> float:
        """Total log-likelihood when group k is assigned to label k."""
        tr = np.einsum("kij,kij->k", Q, self.prec)
        cross = np.einsum("ki,ki->k", s, self.pmu)
        base = self.d * cm.LOG_2PI + self.logdet
        return float(-0.5 * np.sum(n * (base + self.mupmu) + tr - 2.0 * cross))


def state_loglik(ctx: Context, c: np.ndarray, cache: ParamCache, stats=None) -> float:
    n, s, Q = ctx.stats.by_label(c, len(cache.logdet)) if stats is None else stats
    return cache.loglik_diag(n, s, Q)


# --------------------------------------------------------------------------
# clustering proposal


def _fit_scores(n, s, ss, target: int, groups: list[int], prior_var: list[float], temper: float) -> list[float]:
    """Tempered predictive log-fit of the target group's observations to each candidate group."""
    n_in = n[target]
    if n_in == 0 or temper == 0:
        return [0.0] * len(groups)
    s_in, ss_in = s[target], ss[target]
    log2pi = math.log(2 * math.pi)
    out = []
    for g in groups:
        ng = n[g]
        sg, ssg = s[g], ss[g]
        tot = 0.0
        for j, v0 in enumerate(prior_var):
            if ng > 0:
                mean = sg[j] / (ng + 1.0)
                scat = ssg[j] - sg[j] * sg[j] / ng
                var = (2.0 * v0 + (scat if scat > 0 else 0.0)) / (ng + 2.0) * (1.0 + 1.0 / (ng + 1.0))
            else:
                mean = 0.0
                var = 2.0 * v0
            quad = ss_in[j] - 2.0 * mean * s_in[j] + n_in * mean * mean
            tot += -0.5 * n_in * (log2pi + math.log(var)) - 0.5 * quad / var
        out.append(temper * tot)
    return out


def _mix_probs(scores: list[float]) -> list[float]:
    top = max(scores)
    w = [math.exp(x - top) for x in scores]
    tot = sum(w)
    k = len(w)
    return [(1 - FIT_EPS) * x / tot + FIT_EPS / k for x in w]


def _pick(p: list[float], rng) -> int:
    u = rng.random()
    acc = 0.0
    for j, x in enumerate(p):
        acc += x
        if u < acc:
            return j
    return len(p) - 1


def regrow_slots(layout: cm.Layout, ctx: Context, prev: dict, w_c: float, priority: dict, rng,
                 target=None) -> tuple[np.ndarray, float, np.ndarray]:
    """Sequentially allocate every decision of ``layout``.

    Decisions are visited in order of ``priority``. Each keeps its slot in
    ``prev`` with probability ``w_c`` when that slot still exists, and
    otherwise picks a slot by how well the incoming observations fit the
    slot's running group. With ``target`` given, returns its log-density
    instead of sampling. Also returns the canonical group of every element.
    """
    keys = layout.keys
    for key in keys:
        if key not in priority:
            priority[key] = rng.random()
    order = sorted(range(len(keys)), key=lambda j: priority[keys[j]])
    parent = list(range(layout.n_elements))
    n = list(layout.elem_n_list)
    s = [row[:] for row in layout.elem_s_list]
    ss = [row[:] for row in layout.elem_ss_list]

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    slots = [0] * len(keys)
    logq = 0.0
    fit = ctx.temper > 0
    for dj in order:
        nopt = layout.dec_nopt[dj]
        tgt = find(layout.dec_target[dj])
        base = layout.slot_base[layout.dec_hub[dj]]
        groups = [find(base + j) for j in range(nopt)]
        if fit:
            p = _mix_probs(_fit_scores(n, s, ss, tgt, groups, ctx.prior_var, ctx.temper))
        else:
            p = [1.0 / nopt] * nopt
        old = prev.get(keys[dj])
        if old is not None and old < nopt:
            p = [(1 - w_c) * x for x in p]
            p[old] += w_c
        if target is None:
            j = _pick(p, rng) if nopt > 1 else 0
        else:
            j = int(target[dj])
        logq += math.log(p[j])
        slots[dj] = j
        g = groups[j]
        parent[tgt] = g
        n[g] += n[tgt]
        sg, st = s[g], s[tgt]
        ssg, sst = ss[g], ss[tgt]
        for i in range(len(sg)):
            sg[i] += st[i]
            ssg[i] += sst[i]
    canon: dict[int, int] = {}
    gid = np.array([canon.setdefault(find(e), len(canon)) for e in range(layout.n_elements)], dtype=int)
    if len(canon) != layout.K + 1:
        raise RuntimeError(f"glue produced {len(canon)} groups, expected {layout.K + 1}")
    return np.array(slots, dtype=int), logq, gid


def assign_labels(layout: cm.Layout, gid, ctx: Context, cache: ParamCache, rng,
                  target=None) -> tuple[np.ndarray, float]:
    """Map the K+1 groups onto labels 0..K by fit to the current cluster parameters.

    Groups are handled largest first; each picks an unused label with
    probability from a tempered softmax of its log-likelihood under that
    label's parameters, mixed with a uniform floor.
    """
    K = layout.K
    G = K + 1
    if G == 1:
        return np.zeros(1, dtype=int), 0.0
    onehot = np.zeros((G, layout.n_elements))
    onehot[gid, np.arange(layout.n_elements)] = 1.0
    n = onehot @ layout.elem_n
    fit = ctx.temper > 0
    if fit:
        s = onehot @ layout.elem_s
        Q = np.einsum("ge,eij->gij", onehot, layout.elem_Q)
        ll = (ctx.temper * cache.loglik_matrix(n, s, Q)[:, :G]).tolist()
    order = sorted(range(G), key=lambda g: (-n[g], g))
    free = list(range(G))
    lam = np.empty(G, dtype=int)
    logq = 0.0
    for g in order:
        if n[g] == 0 or not fit:
            p = [1.0 / len(free)] * len(free)
        else:
            p = _mix_probs([ll[g][l] for l in free])
        if target is None:
            k = _pick(p, rng) if len(free) > 1 else 0
        else:
            k = free.index(int(target[g]))
        logq += math.log(p[k])
        lam[g] = free.pop(k)
    return lam, logq


def _prev_map(layout: cm.Layout, slots) -> dict:
    return {k: int(slots[j]) for j, k in enumerate(layout.keys)}


def propose_clustering(state: ChainState, ctx: Context, new_deleted, new_m, rng, w_new=None, refresh=False):
    """Regrow slots and labels for (new tree, new m).

    Labels are fitted to the current cluster parameters. With ``refresh``
    the parameters are then redrawn from a data-driven proposal given the
    new clustering. Returns ``(clust', cache', log_q_fwd, log_q_rev)``; the
    reverse density evaluates the move back from ``clust'``, including its
    label fit under the refreshed parameters.
    """
    old = state.clust
    w_new = state.w_c if w_new is None else w_new
    cache = state.params()
    new_layout = ctx.layout(tuple(new_deleted), new_m)
    priority: dict = {}
    slots, lq_s, gid = regrow_slots(new_layout, ctx, _prev_map(old.layout, old.slots), w_new, priority, rng)
    lam, lq_l = assign_labels(new_layout, gid, ctx, cache, rng)
    new = cm.ClusterState(new_layout, slots, lam, old.mu, old.sigma, old.gamma, gid=gid)
    lq, rq = lq_s + lq_l, 0.0
    new_cache = cache
    new_stats = ctx.stats.by_label(new.c, ctx.cfg.k_max + 1)
    if refresh:
        nn, sn, Qn = new_stats
        new.mu, new.sigma, lq_p = cm.propose_params(nn, sn, Qn, old.gamma, ctx.cfg, rng, ctx.temper)
        no, so, Qo = state.label_stats(ctx)
        rq += cm.log_propose_params(old.mu, old.sigma, no, so, Qo, old.gamma, ctx.cfg, ctx.temper)
        lq += lq_p
        new_cache = ParamCache(new.mu, new.sigma)
    _, rq_s, _ = regrow_slots(old.layout, ctx, _prev_map(new_layout, slots), state.w_c, priority, rng,
                              target=old.slots)
    _, rq_l = assign_labels(old.layout, old.gid, ctx, new_cache, rng, target=old.lam)
    return new, new_cache, lq, rq + rq_s + rq_l, new_stats


def _block_log_alpha(ctx: Context, state: ChainState, new: cm.ClusterState, new_cache, new_stats):
    """Target log-ratio of a proposed clustering; also returns its cached terms."""
    lp = _clust_logpost(ctx, new, new_cache, new_stats)
    out = lp - state.log_post(ctx)
    pp = None
    if new_cache is not state.params():
        pp = new_cache.log_prior(new.gamma, ctx.cfg)
        out += pp - state.log_params_prior(ctx)
    return out, lp, pp


# --------------------------------------------------------------------------
# moves


@dataclass
class Counters:
    proposed: Counter = field(default_factory=Counter)
    accepted: Counter = field(default_factory=Counter)

    def add(self, name: str, ok: bool) -> None:
        self.proposed[name] += 1
        if ok:
            self.accepted[name] += 1

    def rates(self) -> dict:
        return {k: self.accepted[k] / v for k, v in sorted(self.proposed.items()) if v}


def _accept(log_alpha: float, rng) -> bool:
    if log_alpha >= 0:
        return True
    if not math.isfinite(log_alpha):
        return False
    return math.log(rng.random()) < log_alpha


def step_root(state: ChainState, ctx: Context, rng, counters: Counters | None = None) -> ChainState:
    """Propose a uniform new root with a fresh ordering estimate."""
    r_new = int(rng.integers(ctx.net.n_nodes))
    if r_new == state.root:
        if counters:
            counters.add("root", True)
        return state
    le = ctx.log_estimate(state.deleted, r_new, rng)
    ok = _accept(le - state.log_est, rng)
    if counters:
        counters.add("root", ok)
    if ok:
        state.root = r_new
        state.log_est = le
    return state


def _clust_logpost(ctx: Context, clust: cm.ClusterState, cache: ParamCache, stats=None) -> float:
    out = cm.log_structure_prior(clust.layout, ctx.weights, ctx.cfg.k_max)
    if ctx.temper:
        out += ctx.temper * state_loglik(ctx, clust.c, cache, stats)
    return out


def step_tree_and_clustering(state: ChainState, ctx: Context, rng, change_tree: bool = True,
                             counters: Counters | None = None) -> ChainState:
    """Joint block: optional tree and migrating-haplotype change, regrown clustering, w_c."""
    old = state.clust
    new_deleted = state.deleted
    new_m = list(old.m)
    log_extra = 0.0
    new_est = state.log_est
    w_new = state.w_c
    name = "clustering"
    if change_tree:
        name = "tree"
        if ctx.net.n_loop:
            new_deleted = propose_tree(ctx.net, state.deleted, rng)
            if new_deleted != state.deleted:
                new_est = ctx.log_estimate(new_deleted, state.root, rng)
                if not math.isfinite(new_est):
                    if counters:
                        counters.add(name, False)
                    return state
                log_extra += new_est - state.log_est
        if old.K:
            slot = int(rng.integers(old.K))
            a = new_m[slot]
            b = int(rng.choice(ctx.net.n_nodes, p=ctx.weights))
            if a != b:
                mult_old = Counter(old.m)
                new_m[slot] = b
                mult_new = Counter(new_m)
                log_extra += math.log(mult_new[b] * ctx.weights[a]) - math.log(mult_old[a] * ctx.weights[b])
    else:
        u = math.log(state.w_c / (1 - state.w_c)) + WC_STEP * rng.standard_normal()
        w_new = 1.0 / (1.0 + math.exp(-u))
        w_new = min(max(w_new, 1e-12), 1 - 1e-12)
        log_extra += math.log(w_new * (1 - w_new)) - math.log(state.w_c * (1 - state.w_c))
    refresh = change_tree or rng.random() < ctx.refresh_prob
    if not refresh and old.K == 0 and new_deleted == state.deleted:
        # nothing to regrow: the proposal returns the current clustering with
        # zero log-density both ways, so only the w_c terms remain
        ok = _accept(log_extra, rng)
        if counters:
            counters.add(name, ok)
        if ok:
            state.w_c = w_new
        return state
    new, new_cache, lq_f, lq_r, new_stats = propose_clustering(state, ctx, new_deleted, new_m, rng, w_new=w_new,
                                                               refresh=refresh)
    target, lp, pp = _block_log_alpha(ctx, state, new, new_cache, new_stats)
    ok = _accept(target + lq_r - lq_f + log_extra, rng)
    if counters:
        counters.add(name, ok)
    if ok:
        state.set_clustering(new, new_cache, new_stats, lp, pp)
        state.deleted = tuple(new_deleted)
        state.log_est = new_est
        state.w_c = w_new
    return state


def _p_up(K: int, k_max: int) -> float:
    if k_max == 0:
        return 0.0
    if K == 0:
        return 1.0
    if K == k_max:
        return 0.0
    return 0.5


def step_dimension(state: ChainState, ctx: Context, rng, counters: Counters | None = None) -> ChainState:
    """Add or remove one migration, regrowing the clustering."""
    k_max = ctx.cfg.k_max
    if k_max == 0:
        return state
    old = state.clust
    K = old.K
    up = rng.random() < _p_up(K, k_max)
    m = list(old.m)
    if up:
        b = int(rng.choice(ctx.net.n_nodes, p=ctx.weights))
        new_m = m + [b]
        q_f = math.log(_p_up(K, k_max)) + math.log(ctx.weights[b])
        q_r = math.log(1 - _p_up(K + 1, k_max)) + math.log(Counter(new_m)[b] / (K + 1))
    else:
        slot = int(rng.integers(K))
        a = m[slot]
        new_m = m[:slot] + m[slot + 1:]
        q_f = math.log(1 - _p_up(K, k_max)) + math.log(Counter(m)[a] / K)
        q_r = math.log(_p_up(K - 1, k_max)) + math.log(ctx.weights[a])
    new, new_cache, lq_f, lq_r, new_stats = propose_clustering(state, ctx, state.deleted, new_m, rng, refresh=True)
    target, lp, pp = _block_log_alpha(ctx, state, new, new_cache, new_stats)
    ok = _accept(target + lq_r - lq_f + q_r - q_f, rng)
    if counters:
        counters.add("birth" if up else "death", ok)
    if ok:
        state.set_clustering(new, new_cache, new_stats, lp, pp)
    return state


def step_gibbs(state: ChainState, ctx: Context, rng) -> ChainState:
    """Refresh every cluster mean, then every covariance, from full conditionals."""
    cl = state.clust
    n, s, Q = state.label_stats(ctx)
    cl.mu = cm.gibbs_mu(n, s, cl.sigma, ctx.cfg, rng, ctx.temper)
    cl.sigma = cm.gibbs_sigma(n, s, Q, cl.mu, cl.gamma, ctx.cfg, rng, ctx.temper)
    state.params_changed()
    return state


def step_hyper(state: ChainState, ctx: Context, rng, counters: Counters | None = None) -> ChainState:
    """Uniform independence proposal for gamma, accepted against the covariance priors."""
    cl = state.clust
    g_new = int(rng.integers(4, ctx.cfg.g + 1))
    if g_new == cl.gamma:
        return state
    sums = state.params().prior_sums(ctx.cfg)
    la = sums.log_sigma_prior(g_new, ctx.cfg.psi) - sums.log_sigma_prior(cl.gamma, ctx.cfg.psi)
    ok = _accept(la, rng)
    if counters:
        counters.add("gamma", ok)
    if ok:
        cl.gamma = g_new
        state.pp = None
    return state


# --------------------------------------------------------------------------
# label switching


def pivot_cost(c_star, Y, mu, sigma) -> np.ndarray:
    """cost[j, l] = log-likelihood of the pivot's cluster j under parameters l."""
    Y = Y.Y if isinstance(Y, cm.NormalizedData) else np.asarray(Y)
    n_lab = len(mu)
    stats = cm.ObsStats(Y)
    n, s, Q = stats.by_label(np.asarray(c_star), n_lab)
    cost = ParamCache(np.asarray(mu), np.asarray(sigma)).loglik_matrix(n, s, Q)
    cost[n == 0] = 0.0
    return cost


def pivot_permutation(c_star, Y, mu, sigma) -> np.ndarray:
    """perm[j] = label whose parameters should become label j.

    Pivot clusters with members are matched by maximum total likelihood;
    the rest take the leftover labels in increasing order.
    """
    cost = pivot_cost(c_star, Y, mu, sigma)
    n_lab = len(mu)
    used_rows = sorted(set(int(x) for x in np.asarray(c_star)))
    perm = np.full(n_lab, -1, dtype=int)
    rows, cols = linear_sum_assignment(cost[used_rows], maximize=True)
    for r, col in zip(rows, cols):
        perm[used_rows[r]] = col
    left_cols = [l for l in range(n_lab) if l not in set(perm.tolist())]
    left_rows = [j for j in range(n_lab) if perm[j] < 0]
    for j, l in zip(left_rows, left_cols):
        perm[j] = l
    return perm


def apply_permutation(perm, mu, sigma, c):
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return mu[perm], sigma[perm], inv[np.asarray(c)]


def relabel(sample: dict, c_star, Y) -> dict:
    """Permute a saved draw's labels to best match the pivot clustering."""
    perm = pivot_permutation(c_star, Y, sample["mu"], sample["sigma"])
    mu, sigma, c = apply_permutation(perm, sample["mu"], sample["sigma"], sample["c"])
    out = dict(sample)
    out["mu"], out["sigma"], out["c"] = mu, sigma, c
    if "node_labels" in sample:
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        nl = np.asarray(sample["node_labels"])
        out["node_labels"] = np.where(nl >= 0, inv[np.maximum(nl, 0)], -1)
    out["perm"] = perm
    return out


# --------------------------------------------------------------------------
# initial states and chain driver


def _feasible_start(ctx: Context, rng) -> tuple[tuple[int, ...], int, float]:
    deleted = default_tree(ctx.net)
    root = int(ctx.observed_nodes[np.argmax(ctx.net.counts[ctx.observed_nodes])])
    for _ in range(10_000):
        le = ctx.log_estimate(deleted, root, rng)
        if math.isfinite(le):
            return deleted, root, le
        if rng.random() < 0.5 and ctx.net.n_loop:
            deleted = propose_tree(ctx.net, deleted, rng)
        else:
            root = int(rng.integers(ctx.net.n_nodes))
    raise RuntimeError("could not find a tree and root admitting a valid ordering")


def initial_state(ctx: Context, K: int, rng) -> ChainState:
    deleted, root, le = _feasible_start(ctx, rng)
    d = ctx.d
    gamma = int(rng.integers(4, ctx.cfg.g + 1))
    mu, sigma = cm.sample_params_prior(ctx.cfg, d, gamma, rng)
    m = sorted(int(x) for x in rng.choice(ctx.net.n_nodes, size=K, p=ctx.weights)) if K else []
    layout = ctx.layout(deleted, m)
    slots = np.array([rng.integers(k) for k in layout.dec_nopt], dtype=int)
    lam = rng.permutation(K + 1)
    clust = cm.ClusterState(layout, slots, lam, mu, sigma, gamma)
    return ChainState(deleted=deleted, root=root, log_est=le, clust=clust, w_c=0.5)


def node_labels(ctx: Context, clust: cm.ClusterState) -> np.ndarray:
    """Cluster label of every non-migrating node; -1 for hubs."""
    lay = clust.layout
    gid = clust.gid
    out = np.full(ctx.net.n_nodes, -1, dtype=int)
    for v, comp in enumerate(lay.comp_of_node):
        if comp >= 0:
            out[v] = clust.lam[gid[comp]]
    return out


@dataclass
class ChainResult:
    draws: list[dict]
    root_tally: np.ndarray
    tree_table: TreeHashTable
    acceptance: dict
    pivot: np.ndarray
    pivot_logpost: float
    eff_tally: np.ndarray
    K_tally: np.ndarray
    gamma_tally: np.ndarray


# burn-in iterations between pivot (highest posterior clustering) checks
PIVOT_EVERY = 10


def run_chain(ctx: Context, config: RunConfig, seed_seq, chain_id: int) -> ChainResult:
    rng = np.random.default_rng(seed_seq)
    k_start = 0 if chain_id == 0 else config.max_mig
    state = initial_state(ctx, k_start, rng)
    counters = Counters()
    burn = config.burn_in
    save_at = set(int(i) for i in config.save_indices())
    root_tally = np.zeros(ctx.net.n_nodes, dtype=np.int64)
    eff_tally = np.zeros(config.max_mig + 2, dtype=np.int64)
    K_tally = np.zeros(config.max_mig + 1, dtype=np.int64)
    gamma_tally = np.zeros(config.g + 1, dtype=np.int64)
    table = TreeHashTable(ctx.net.n_edges, ctx.net.n_loop)
    draws = []
    best_lp = -math.inf
    pivot = state.clust.c.copy()
    tick = max(config.iterations // 20, 1)
    for it in range(config.iterations):
        state.iteration = it
        step_root(state, ctx, rng, counters)
        step_tree_and_clustering(state, ctx, rng, change_tree=(it % config.tree_every == 0), counters=counters)
        step_gibbs(state, ctx, rng)
        step_dimension(state, ctx, rng, counters)
        if it % config.hyper_every == 0:
            step_hyper(state, ctx, rng, counters)
        cl = state.clust
        if it < burn and chain_id == 0 and it % PIVOT_EVERY == 0:
            lp = state.log_post(ctx) + state.log_params_prior(ctx)
            if lp > best_lp:
                best_lp = lp
                pivot = cl.c.copy()
        if it >= burn:
            root_tally[state.root] += 1
            table.record(state.deleted)
            eff = cl.effective_clusters()
            eff_tally[eff] += 1
            K_tally[cl.K] += 1
            gamma_tally[cl.gamma] += 1
        if it in save_at:
            draws.append(
                {
                    "iteration": it,
                    "root": state.root,
                    "deleted": tuple(state.deleted),
                    "K": cl.K,
                    "m": tuple(cl.m),
                    "c": cl.c.copy(),
                    "node_labels": node_labels(ctx, cl),
                    "mu": cl.mu.copy(),
                    "sigma": cl.sigma.copy(),
                    "gamma": cl.gamma,
                    "w_c": state.w_c,
                    "effective": cl.effective_clusters(),
                }
            )
        if config.progress and (it + 1) % tick == 0:
            done = (it + 1) * 20 // config.iterations
            print(f"\rChain {chain_id + 1}: |{'=' * done}{' ' * (20 - done)}|{5 * done}%", end="", file=sys.stderr)
    if config.progress:
        print(file=sys.stderr)
    return ChainResult(
        draws=draws,
        root_tally=root_tally,
        tree_table=table,
        acceptance=counters.rates(),
        pivot=pivot,
        pivot_logpost=best_lp,
        eff_tally=eff_tally,
        K_tally=K_tally,
        gamma_tally=gamma_tally,
    )


@dataclass
class PosteriorArchive:
    config: RunConfig
    prior: cm.PriorConfig
    chains: list[ChainResult]
    pivot: np.ndarray
    diagnostics: dict

    @property
    def draws(self) -> list[dict]:
        return [d for ch in self.chains for d in ch.draws]

    @property
    def tree_table(self) -> TreeHashTable:
        table = self.chains[0].tree_table
        for ch in self.chains[1:]:
            table = table.merge(ch.tree_table)
        return table

    @property
    def converged(self) -> bool:
        return bool(self.diagnostics.get("root_converged", True) and self.diagnostics.get("clustering_converged", True))


def _tv(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())


def diagnostics(chains: list[ChainResult], config: RunConfig) -> dict:
    out: dict = {"acceptance": [ch.acceptance for ch in chains]}
    if len(chains) < 2:
        out["root_converged"] = True
        out["clustering_converged"] = True
        out["note"] = "single chain: two-chain diagnostics unavailable"
        return out
    a, b = chains[0], chains[1]
    root_tv = _tv(a.root_tally, b.root_tally)
    map_a = int(np.argmax(a.eff_tally))
    map_b = int(np.argmax(b.eff_tally))
    disc = []
    for k in range(config.max_mig + 1):
        means = []
        for ch in (a, b):
            sel = [dr["mu"][k] for dr in ch.draws if np.any(dr["c"] == k)]
            if len(sel) * 2 >= len(ch.draws) and sel:
                means.append(np.mean(sel, axis=0))
        if len(means) == 2:
            disc.append(float(np.linalg.norm(means[0][:2] - means[1][:2])))
    max_disc = max(disc) if disc else 0.0
    out.update(
        root_tv=root_tv,
        root_converged=root_tv < config.root_tv_threshold,
        map_effective_clusters=[map_a, map_b],
        cluster_mean_discrepancy=max_disc,
        clustering_converged=(map_a == map_b) and max_disc < config.mean_threshold,
    )
    return out


def _run_one(args):
    ctx, config, ss, cid = args
    return run_chain(ctx, config, ss, cid)


def run(config: RunConfig, net: Network, obs_nodes, Y: cm.NormalizedData, prior: cm.PriorConfig | None = None) -> PosteriorArchive:
    """Run ``config.chains`` independent chains and collect a relabelled archive."""
    config.validate()
    prior = prior or cm.default_prior(Y, config.max_mig, g=config.g, v_scale=config.v_scale, psi=config.psi)
    ctx = Context(net, obs_nodes, Y, prior, temper=config.temper, ordering_draws=config.ordering_draws)
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    jobs = [(ctx, config, seeds[i], i) for i in range(config.chains)]
    if config.threads > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.threads, config.chains)) as pool:
            chains = list(pool.map(_run_one, jobs))
    else:
        chains = [_run_one(j) for j in jobs]
    pivot = chains[0].pivot
    for ch in chains:
        ch.draws = [relabel(dr, pivot, Y) for dr in ch.draws]
    return PosteriorArchive(config=config, prior=prior, chains=chains, pivot=pivot, diagnostics=diagnostics(chains, config))


# --------------------------------------------------------------------------
# archive directory

DRAW_COLUMNS = ("chain", "iteration", "root", "K", "effective", "gamma", "w_c", "deleted", "m", "c", "node_labels", "mu", "sigma")


def _join(values) -> str:
    return ";".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(int(v)) for v in values)


def _split_ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(";")) if text else ()


def _split_floats(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.split(";")]) if text else np.zeros(0)


def write_draws_csv(archive: PosteriorArchive, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DRAW_COLUMNS)
        for cid, ch in enumerate(archive.chains):
            for dr in ch.draws:
                w.writerow(
                    [
                        cid,
                        dr["iteration"],
                        dr["root"],
                        dr["K"],
                        dr["effective"],
                        dr["gamma"],
                        repr(float(dr["w_c"])),
                        _join(dr["deleted"]),
                        _join(dr["m"]),
                        _join(dr["c"]),
                        _join(dr["node_labels"]),
                        _join(np.asarray(dr["mu"], dtype=float).ravel()),
                        _join(np.asarray(dr["sigma"], dtype=float).ravel()),
                    ]
                )


def read_draws_csv(path, n_labels: int, d: int) -> dict[int, list[dict]]:
    import csv

    out: dict[int, list[dict]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["chain"]), []).append(
                {
                    "iteration": int(row["iteration"]),
                    "root": int(row["root"]),
                    "K": int(row["K"]),
                    "effective": int(row["effective"]),
                    "gamma": int(row["gamma"]),
                    "w_c": float(row["w_c"]),
                    "deleted": _split_ints(row["deleted"]),
                    "m": _split_ints(row["m"]),
                    "c": np.array(_split_ints(row["c"]), dtype=int),
                    "node_labels": np.array(_split_ints(row["node_labels"]), dtype=int),
                    "mu": _split_floats(row["mu"]).reshape(n_labels, d),
                    "sigma": _split_floats(row["sigma"]).reshape(n_labels, d, d),
                }
            )
    return out


def write_archive(archive: PosteriorArchive, path) -> None:
    """Write draws, tree tables, tallies, diagnostics and config under ``path``."""
    import json
    from pathlib import Path

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    write_draws_csv(archive, root / "draws.csv")
    chains = []
    for ch in archive.chains:
        chains.append(
            {
                "acceptance": ch.acceptance,
                "root_tally": ch.root_tally.tolist(),
                "eff_tally": ch.eff_tally.tolist(),
                "K_tally": ch.K_tally.tolist(),
                "gamma_tally": ch.gamma_tally.tolist(),
                "pivot_logpost": ch.pivot_logpost if math.isfinite(ch.pivot_logpost) else None,
                "trees": ch.tree_table.to_json(),
            }
        )
    (root / "chains.json").write_text(json.dumps(chains, indent=1, sort_keys=True) + "\n")
    (root / "diagnostics.json").write_text(json.dumps(_jsonable(archive.diagnostics), indent=1, sort_keys=True) + "\n")
    (root / "trees.json").write_text(json.dumps(archive.tree_table.to_json(), indent=1) + "\n")
    meta = {
        "config": asdict(archive.config),
        "prior": archive.prior.to_json(),
        "pivot": [int(x) for x in archive.pivot],
    }
    (root / "posterior.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_archive(path) -> PosteriorArchive:
    import json
    from pathlib import Path

    root = Path(path)
    meta = json.loads((root / "posterior.json").read_text())
    config = RunConfig(**meta["config"])
    prior = cm.PriorConfig.from_json(meta["prior"])
    d = prior.V.shape[0]
    draws = read_draws_csv(root / "draws.csv", prior.k_max + 1, d)
    chains = []
    for cid, doc in enumerate(json.loads((root / "chains.json").read_text())):
        lp = doc["pivot_logpost"]
        chains.append(
            ChainResult(
                draws=draws.get(cid, []),
                root_tally=np.asarray(doc["root_tally"], dtype=np.int64),
                tree_table=TreeHashTable.from_json(doc["trees"]),
                acceptance=doc["acceptance"],
                pivot=np.asarray(meta["pivot"], dtype=int),
                pivot_logpost=-math.inf if lp is None else lp,
                eff_tally=np.asarray(doc["eff_tally"], dtype=np.int64),
                K_tally=np.asarray(doc["K_tally"], dtype=np.int64),
                gamma_tally=np.asarray(doc["gamma_tally"], dtype=np.int64),
            )
        )
    diag = json.loads((root / "diagnostics.json").read_text())
    return PosteriorArchive(config, prior, chains, np.asarray(meta["pivot"], dtype=int), diag)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x
