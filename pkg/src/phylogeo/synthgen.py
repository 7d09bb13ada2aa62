"""Forward simulation of sequences, locations and covariates with known truth.

A random rooted tree is grown over the haplotypes, each edge mutating its
own previously unused site so the tree is recoverable exactly. Migrating
haplotypes found new clusters: every node belongs to the cluster of its
nearest migrating ancestor, and a migrating haplotype with several copies
leaves its first copy behind in the ancestral cluster. Observations are
Gaussian around their cluster's centre.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .seqio import ObservationTable, SequenceSet, parse_coords, parse_nexus, write_coords, write_nexus

BASES = np.array(list("ACGT"))


@dataclass
class SynthConfig:
    n_haplotypes: int = 8
    n_observations: int = 60
    effective_sites: int | None = None  # defaults to n_haplotypes - 1
    true_K: int = 1
    separation: float = 6.0  # distance between consecutive cluster centres, in cluster SDs
    sigma_scale: float = 1.0
    n_covariates: int = 0
    degree_scale: float = 0.5  # degrees per normalised unit
    origin: tuple[float, float] = (44.0, 42.0)
    min_cluster_fraction: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.n_haplotypes < 2:
            raise ValueError("need at least two haplotypes")
        if self.true_K < 0 or self.true_K >= self.n_haplotypes:
            raise ValueError("true_K must be in [0, n_haplotypes - 1]")
        if self.n_observations < self.n_haplotypes:
            raise ValueError("every haplotype must be observed at least once")
        if self.separation < 0:
            raise ValueError("separation must be non-negative")
        if self.sites < self.n_haplotypes - 1:
            raise ValueError(
                f"{self.n_haplotypes - 1} sites are needed for one unique mutation per tree edge, got {self.sites}"
            )

    @property
    def sites(self) -> int:
        return self.n_haplotypes - 1 if self.effective_sites is None else self.effective_sites

    @property
    def dims(self) -> int:
        return 2 + self.n_covariates


@dataclass
class GroundTruth:
    parent: list[int]  # parent haplotype of every haplotype, -1 for the root
    root: int
    K: int
    migrations: list[int]  # migrating haplotypes (sorted)
    labels: list[int]  # cluster label of every observation
    obs_haplotype: list[int]  # haplotype of every observation
    centres: list[list[float]]  # per-cluster means, raw units
    cov_scale: list[float]  # per-dimension SD, raw units

    @property
    def edges(self) -> list[tuple[int, int]]:
        return sorted((min(p, c), max(p, c)) for c, p in enumerate(self.parent) if p >= 0)

    def to_json(self) -> dict:
        return asdict(self)


def _random_tree(n: int, rng) -> list[int]:
    parent = [-1] * n
    for v in range(1, n):
        parent[v] = int(rng.integers(v))
    return parent


def _node_clusters(parent: list[int], hubs: list[int]) -> list[int]:
    """Cluster of every node: index of its nearest migrating ancestor (inclusive), 0 if none."""
    index = {h: k + 1 for k, h in enumerate(hubs)}
    out = []
    for v in range(len(parent)):
        u = v
        while u >= 0 and u not in index:
            u = parent[u]
        out.append(index.get(u, 0))
    return out


def _observation_labels(parent, hubs, obs_hap) -> list[int]:
    node_cl = _node_clusters(parent, hubs)
    labels = []
    seen_hub: set[int] = set()
    counts = np.bincount(obs_hap, minlength=len(parent))
    for h in obs_hap:
        lab = node_cl[h]
        if h in hubs and counts[h] > 1 and h not in seen_hub:
            # first copy of a migrating haplotype stays behind
            seen_hub.add(h)
            lab = node_cl[parent[h]]
        labels.append(lab)
    return labels


def generate(cfg: SynthConfig) -> tuple[SequenceSet, ObservationTable, GroundTruth]:
    """Simulate a dataset; returns the sequence set, observation table and truth."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, N = cfg.n_haplotypes, cfg.n_observations

    parent = _random_tree(n, rng)
    seqs_h = np.tile(rng.choice(BASES, size=cfg.sites), (n, 1))
    for v in range(1, n):  # parents precede children
        seqs_h[v] = seqs_h[parent[v]]
        site = v - 1
        seqs_h[v, site] = rng.choice([b for b in BASES if b != seqs_h[parent[v], site]])

    obs_hap = np.concatenate([np.arange(n), rng.integers(n, size=N - n)])
    obs_hap = np.sort(obs_hap)

    min_size = max(1, int(cfg.min_cluster_fraction * N / (cfg.true_K + 1)))
    for _ in range(2000):
        hubs = sorted(int(x) for x in rng.choice(np.arange(1, n), size=cfg.true_K, replace=False))
        labels = np.array(_observation_labels(parent, hubs, obs_hap.tolist()), dtype=int)
        if np.all(np.bincount(labels, minlength=cfg.true_K + 1) >= min_size):
            break
    else:
        raise ValueError("could not place migrations giving every cluster enough observations; lower min_cluster_fraction")

    d = cfg.dims
    centres = np.zeros((cfg.true_K + 1, d))
    angle = rng.uniform(0, 2 * np.pi)
    step = cfg.separation * cfg.sigma_scale
    for k in range(1, cfg.true_K + 1):
        centres[k, 0] = k * step * np.cos(angle)
        centres[k, 1] = k * step * np.sin(angle)
        centres[k, 2:] = k * 0.5 * step
    Y = centres[labels] + cfg.sigma_scale * rng.standard_normal((N, d))

    raw = np.empty_like(Y)
    raw[:, 0] = cfg.origin[0] + cfg.degree_scale * Y[:, 0]
    raw[:, 1] = cfg.origin[1] + cfg.degree_scale * Y[:, 1]
    raw[:, 2:] = 10.0 + Y[:, 2:]
    raw = np.round(raw, 6)

    residues = seqs_h[obs_hap]
    labels_seq = [f"s{i + 1}" for i in range(N)]
    seqs = SequenceSet(labels_seq, residues)
    obs = _table(raw, np.arange(1, N + 1))

    scale = np.full(d, cfg.sigma_scale)
    scale[:2] *= cfg.degree_scale
    raw_centres = np.empty_like(centres)
    raw_centres[:, 0] = cfg.origin[0] + cfg.degree_scale * centres[:, 0]
    raw_centres[:, 1] = cfg.origin[1] + cfg.degree_scale * centres[:, 1]
    raw_centres[:, 2:] = 10.0 + centres[:, 2:]
    truth = GroundTruth(
        parent=parent,
        root=0,
        K=cfg.true_K,
        migrations=hubs,
        labels=labels.tolist(),
        obs_haplotype=obs_hap.tolist(),
        centres=raw_centres.tolist(),
        cov_scale=scale.tolist(),
    )
    return seqs, obs, truth


def _table(values, ids) -> ObservationTable:
    lines = "\n".join(" ".join(repr(float(v)) for v in row) + f" {int(i)}" for row, i in zip(values, ids))
    return parse_coords(lines + "\n", values.shape[1], name="<synthetic>")


def write_dataset(seqs: SequenceSet, obs: ObservationTable, truth: GroundTruth, outdir, stem: str = "synth") -> dict:
    """Write NEXUS, coordinate table and ground-truth JSON; returns the paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "seqs": out / f"{stem}.nex",
        "coords": out / f"{stem}_coords.txt",
        "truth": out / f"{stem}_truth.json",
    }
    write_nexus(seqs, paths["seqs"])
    write_coords(obs.values, obs.haplotype_ids, paths["coords"])
    paths["truth"].write_text(json.dumps(truth.to_json(), indent=1) + "\n")
    return {k: str(v) for k, v in paths.items()}


def read_truth(path) -> GroundTruth:
    return GroundTruth(**json.loads(Path(path).read_text()))


def reparse(seqs: SequenceSet, obs: ObservationTable, outdir) -> tuple[SequenceSet, ObservationTable]:
    """Round-trip a dataset through its files (used to check the writers)."""
    out = Path(outdir)
    write_nexus(seqs, out / "rt.nex")
    write_coords(obs.values, obs.haplotype_ids, out / "rt.txt")
    return parse_nexus(out / "rt.nex"), parse_coords(out / "rt.txt", obs.d)
