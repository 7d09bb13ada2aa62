"""From input files to everything the sampler needs."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import clustmodel as cm
from .errors import ParseError
from .haplonet import Network, build_network
from .seqio import (
    HaplotypeData,
    ObservationTable,
    SequenceSet,
    check_observations,
    collapse_haplotypes,
    parse_coords,
    parse_nexus,
)


@dataclass
class Dataset:
    seqs: SequenceSet
    obs: ObservationTable
    haps: HaplotypeData
    net: Network
    obs_nodes: np.ndarray  # network node of every observation
    norm: cm.NormalizedData


def observation_nodes(obs: ObservationTable, haps: HaplotypeData) -> np.ndarray:
    """Haplotype index of every observation via its 1-based sequence number."""
    return haps.label_map[np.asarray(obs.haplotype_ids, dtype=int) - 1]


def prepare(seqs: SequenceSet, obs: ObservationTable, ds: int = 0, node_budget: int | None = None) -> Dataset:
    """Collapse, build the network and normalise.

    Node counts are taken from the observation table, so a sequence that is
    referenced twice counts twice and an unreferenced one counts zero.
    """
    check_observations(obs, seqs)
    haps = collapse_haplotypes(seqs)
    kw = {} if node_budget is None else {"node_budget": node_budget}
    net = build_network(haps, ds=ds, **kw)
    nodes = observation_nodes(obs, haps)
    counts = np.bincount(nodes, minlength=net.n_nodes)
    net = replace(net, counts=counts)
    return Dataset(seqs, obs, haps, net, nodes, cm.normalize(obs))


def load(seqs_source, coords_source, dims: int, ds: int = 0) -> Dataset:
    seqs = parse_nexus(seqs_source)
    obs = parse_coords(coords_source, dims)
    if obs.n_observations < 2:
        raise ParseError("need at least two observations")
    return prepare(seqs, obs, ds=ds)
