"""Command-line driver.

    phylogeo run --seqs h.nex --coords c.txt --max-mig 3 --iter 10000 \\
        --ds 3 --post-samples 1000 --dims 8 --seed 108 --out run1
    phylogeo summarize --archive run1
    phylogeo export --archive run1 --format all
    phylogeo simulate --out synth --seed 1
    phylogeo validate --seqs h.nex --coords c.txt --dims 2

Exit status is 0 on success, 1 on any error and 2 when a run finished and
wrote its results but the convergence checks failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import clustmodel as cm
from . import dataset as dsmod
from . import sampler as sp
from . import summaries as su
from . import synthgen
from .errors import EnumerationUnavailable, PhylogeoError
from .haplonet import Network
from .ordering import root_posterior_exact
from .seqio import ObservationTable, parse_coords, parse_nexus

OUT_ENV = "PHYLOGEO_OUT"
EXIT_NOT_CONVERGED = 2

log = logging.getLogger("phylogeo")


# --------------------------------------------------------------------------
# archive data files


def _data_doc(ds: dsmod.Dataset) -> dict:
    obs = ds.obs
    return {
        "values": obs.values.tolist(),
        "haplotype_ids": [int(x) for x in obs.haplotype_ids],
        "line_index": [int(x) for x in obs.line_index],
        "location_index": [int(x) for x in obs.location_index],
        "locations": obs.locations.tolist(),
        "covariate_names": list(obs.covariate_names),
        "obs_nodes": [int(x) for x in ds.obs_nodes],
        "n_sequences": int(ds.seqs.n_sequences),
        "sequence_length": int(ds.seqs.length),
        "effective_length": int(ds.haps.effective_length),
        "n_haplotypes_observed": int(ds.haps.n),
        "label_map": [int(x) for x in ds.haps.label_map],
    }


def _load_archive_inputs(archive_dir: Path):
    data = json.loads((archive_dir / "data.json").read_text())
    net = Network.from_json(json.loads((archive_dir / "network.json").read_text()))
    obs = ObservationTable(
        values=np.asarray(data["values"], dtype=float),
        haplotype_ids=np.asarray(data["haplotype_ids"], dtype=int),
        line_index=np.asarray(data["line_index"], dtype=int),
        location_index=np.asarray(data["location_index"], dtype=int),
        locations=np.asarray(data["locations"], dtype=float).reshape(-1, 2),
        covariate_names=data["covariate_names"],
    )
    obs_nodes = np.asarray(data["obs_nodes"], dtype=int)
    return net, obs, obs_nodes, cm.normalize(obs), data


def location_lines(obs: ObservationTable) -> list[int]:
    """1-based data line of the first row at each location."""
    first = {}
    for loc, line in zip(obs.location_index, obs.line_index):
        first.setdefault(int(loc), int(line) + 1)
    return [first[k] for k in range(obs.n_locations)]


def write_exports(out: Path, report: su.SummaryReport, archive, net, obs, obs_nodes, norm, formats) -> list[str]:
    written = []
    draws = archive.draws
    need_contours = {"kml", "svg"} & formats
    cs = su.contours(draws, norm) if need_contours else None
    if "kml" in formats:
        su.export_kml_contours(cs, out / "contours.kml")
        pos = su.node_positions(net, obs_nodes, obs.values)
        su.export_kml_tree(net, report.map_tree, pos, out / "tree.kml", edge_probs=report.edge_total_probs)
        written += ["contours.kml", "tree.kml"]
    if "newick" in formats:
        (out / "tree.nwk").write_text(su.export_newick(net, report.map_tree, report.map_root) + "\n")
        written.append("tree.nwk")
    if "json" in formats:
        doc = su.export_tree_json(net, report.map_tree, report.map_root, report.cluster_probs,
                                  report.edge_total_probs, report.levels)
        su.write_json(doc, out / "tree.json")
        written.append("tree.json")
    if "svg" in formats:
        su.export_svg(cs, obs, report.root_loc_probs, out / "contours.svg")
        written.append("contours.svg")
    if "bands" in formats:
        bands = su.covariate_bands(draws, norm)
        if bands:
            with open(out / "bands.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["cluster", "covariate", "q05", "q50", "q95"])
                for k, arr in bands.items():
                    for j, row in enumerate(arr):
                        w.writerow([k + 1, j + 1] + [repr(float(x)) for x in row])
            written.append("bands.csv")
    return written


ALL_FORMATS = {"kml", "newick", "json", "svg", "bands"}


# --------------------------------------------------------------------------
# subcommands


def _say(lines: list[str], text: str = "") -> None:
    lines.append(text)
    print(text)


def cmd_run(args) -> int:
    out = Path(args.out or os.environ.get(OUT_ENV, "phylogeo_out"))
    if args.seqs == "-" and args.coords == "-":
        raise PhylogeoError("only one of --seqs and --coords can be read from standard input")
    logl: list[str] = []
    _say(logl, "Starting phylogeo...")
    seqs = parse_nexus(args.seqs)
    obs = parse_coords(args.coords, args.dims)
    _say(logl, "Inferring possible missing sequences....")
    ds = dsmod.prepare(seqs, obs, ds=args.ds)
    net = ds.net
    _say(logl, "Counting loops in the network...")
    _say(logl)
    if net.n_loop == 0:
        _say(logl, "The program found no loops that need to be resolved in the network")
    else:
        _say(logl, f"The network has {net.n_loop} loops to resolve")
    _say(logl)
    config = sp.RunConfig(
        max_mig=args.max_mig,
        iterations=args.iter,
        post_samples=args.post_samples,
        dims=args.dims,
        ds=args.ds,
        seed=args.seed,
        chains=args.chains,
        burn_in_fraction=args.burn_in,
        temper=args.temper,
        g=args.g,
        v_scale=args.v_scale,
        psi=args.psi,
        threads=args.threads,
        ordering_draws=args.ordering_draws,
        progress=not args.quiet,
    )
    config.validate()
    _say(logl, f"Number of iterations is {config.iterations}")
    _say(logl, f"Number of saved iterations {config.post_samples}")
    _say(logl, f"Sample size is {obs.n_observations}")
    _say(logl, f"Effective sequence length is {ds.haps.effective_length}")
    _say(logl, f"Total number of haplotypes (including missing) {net.n_nodes}")
    _say(logl, f"Dimension is {args.dims}")
    _say(logl, f"Parsimony relaxation is {args.ds}")
    _say(logl, f"Maximum number of migrations is {args.max_mig}")
    _say(logl)
    _say(logl, f"Starting MCMC sampler (burn-in ends at {round(100 * config.burn_in_fraction)}%)")
    archive = sp.run(config, net, ds.obs_nodes, ds.norm)

    out.mkdir(parents=True, exist_ok=True)
    sp.write_archive(archive, out)
    (out / "network.json").write_text(json.dumps(net.to_json(), indent=1) + "\n")
    (out / "data.json").write_text(json.dumps(_data_doc(ds), indent=1) + "\n")
    report = su.summarize(archive, net, ds.obs_nodes, obs, ds.norm)
    su.write_json(report.to_json(), out / "summary.json")
    lines = location_lines(obs)
    _say(logl)
    _say(logl, f"The most likely root node is {report.map_root + 1}")
    _say(logl, "The most likely ancestral locations are " + ",".join(str(lines[k]) for k in report.top_locations))
    _say(logl, f"The most likely number of migrations is {int(np.argmax(report.mig_probs))}")
    if args.dump_exact:
        try:
            exact = root_posterior_exact(net)
            su.write_json(exact.to_json(), out / "exact_root_posterior.json")
        except (EnumerationUnavailable, ValueError) as exc:
            _say(logl, f"exact root posterior unavailable: {exc}")
    written = write_exports(out, report, archive, net, obs, ds.obs_nodes, ds.norm, ALL_FORMATS)
    status = 0
    if not report.convergence["root_converged"]:
        _say(logl, "NO ROOT CONVERGENCE: You need to re-run the sampler with more iterations")
        status = EXIT_NOT_CONVERGED
    if not report.convergence["clustering_converged"]:
        _say(logl, "NO CLUSTERING CONVERGENCE: You need to re-run the sampler with more iterations")
        status = EXIT_NOT_CONVERGED
    manifest = {
        "program": "phylogeo",
        "version": __version__,
        "numpy": np.__version__,
        "command": "run",
        "inputs": {"seqs": str(args.seqs), "coords": str(args.coords)},
        "config": asdict(config),
        "files": sorted(
            ["draws.csv", "chains.json", "diagnostics.json", "trees.json", "posterior.json", "network.json",
             "data.json", "summary.json", "run.log"] + written
        ),
    }
    su.write_json(manifest, out / "manifest.json")
    (out / "run.log").write_text("\n".join(logl) + "\n")
    return status


def _summary_from_archive(archive_dir: Path) -> tuple[su.SummaryReport, tuple]:
    archive = sp.read_archive(archive_dir)
    net, obs, obs_nodes, norm, data = _load_archive_inputs(archive_dir)
    report = su.summarize(archive, net, obs_nodes, obs, norm)
    return report, (archive, net, obs, obs_nodes, norm, data)


def cmd_summarize(args) -> int:
    arch = Path(args.archive)
    report, (archive, net, obs, _, _, data) = _summary_from_archive(arch)
    doc = report.to_json()
    if args.json:
        print(json.dumps(doc, indent=1))
    else:
        cfg = archive.config
        lines = location_lines(obs)
        print("phylogeo ran with the following settings:")
        print(f"Number of input sequences {data['n_sequences']}")
        print(f"Input sequence length {data['sequence_length']}")
        print(f"Number of iterations {cfg.iterations}")
        print(f"Number of saved iterations {cfg.post_samples}")
        print(f"Dimensions {cfg.dims}")
        print(f"Parsimony relaxation {cfg.ds}")
        print(f"Maximum number of migrations {cfg.max_mig}")
        print()
        print("The results are:")
        missing = net.n_nodes - int((net.counts > 0).sum())
        print(f"Number of haplotypes (including missing) {net.n_nodes}")
        print(f"of which {missing} are missing")
        print(f"Effective sequence length {data['effective_length']}")
        print(f"The most likely number of migrations is {int(np.argmax(report.mig_probs))}")
        print(f"The most likely root node is {report.map_root + 1}")
        print("The most likely ancestral locations are " + ",".join(str(lines[k]) for k in report.top_locations))
        if not report.convergence["root_converged"]:
            print("NO ROOT CONVERGENCE: You need to re-run the sampler with more iterations")
        if not report.convergence["clustering_converged"]:
            print("NO CLUSTERING CONVERGENCE: You need to re-run the sampler with more iterations")
    if args.out:
        su.write_json(doc, args.out)
    return 0


def cmd_export(args) -> int:
    arch = Path(args.archive)
    report, (archive, net, obs, obs_nodes, norm, _) = _summary_from_archive(arch)
    formats = ALL_FORMATS if "all" in args.format else set(args.format)
    out = Path(args.out) if args.out else arch
    out.mkdir(parents=True, exist_ok=True)
    for name in write_exports(out, report, archive, net, obs, obs_nodes, norm, formats):
        print(out / name)
    return 0


def cmd_simulate(args) -> int:
    cfg = synthgen.SynthConfig(
        n_haplotypes=args.haplotypes,
        n_observations=args.observations,
        effective_sites=args.sites,
        true_K=args.true_k,
        separation=args.separation,
        n_covariates=args.covariates,
        seed=args.seed,
    )
    seqs, obs, truth = synthgen.generate(cfg)
    out = Path(args.out or os.environ.get(OUT_ENV, "phylogeo_sim"))
    paths = synthgen.write_dataset(seqs, obs, truth, out, stem=args.stem)
    for key in ("seqs", "coords", "truth"):
        print(paths[key])
    return 0


def cmd_validate(args) -> int:
    seqs = parse_nexus(args.seqs) if args.seqs else None
    obs = parse_coords(args.coords, args.dims)
    ids = sorted(set(int(x) for x in obs.haplotype_ids))
    print(f"{obs.n_observations} observations, {obs.n_locations} locations, {len(ids)} haplotype ids")
    if seqs is not None:
        ds = dsmod.prepare(seqs, obs, ds=args.ds)
        print(f"{seqs.n_sequences} sequences of length {seqs.length}")
        print(f"{ds.haps.n} haplotypes over {ds.haps.effective_length} effective sites")
        print(f"network: {ds.net.n_nodes} nodes, {ds.net.n_edges} edges, {ds.net.n_loop} loops")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phylogeo", description="Bayesian phylogeographic clustering on haplotype trees.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the sampler and write an archive")
    r.add_argument("--seqs", required=True, help="NEXUS alignment, or - for stdin")
    r.add_argument("--coords", required=True, help="coordinate table, or - for stdin")
    r.add_argument("--max-mig", type=int, required=True, help="maximum number of migrations")
    r.add_argument("--iter", type=int, required=True, help="MCMC iterations per chain")
    r.add_argument("--ds", type=int, default=0, help="parsimony relaxation (default 0)")
    r.add_argument("--post-samples", type=int, required=True, help="saved draws per chain")
    r.add_argument("--dims", type=int, required=True, help="numeric columns per row: lon, lat, covariates")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--threads", type=int, default=1, help="chains run concurrently")
    r.add_argument("--chains", type=int, default=2)
    r.add_argument("--burn-in", type=float, default=0.9, help="burn-in fraction (default 0.9)")
    r.add_argument("--temper", type=float, default=1.0, help="likelihood tempering factor")
    r.add_argument("--g", type=int, default=30, help="upper bound of the gamma prior")
    r.add_argument("--psi", type=float, default=None, help="covariance prior scale (default from data range)")
    r.add_argument("--v-scale", type=float, default=4.0, help="prior variance of cluster means")
    r.add_argument("--ordering-draws", type=int, default=1, help="ordering draws averaged per estimate")
    r.add_argument("--out", help=f"archive directory (default ${OUT_ENV} or ./phylogeo_out)")
    r.add_argument("--quiet", action="store_true", help="no progress bars")
    r.add_argument("--dump-exact", action="store_true", help=argparse.SUPPRESS)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("summarize", help="summarise an existing archive")
    s.add_argument("--archive", required=True)
    s.add_argument("--json", action="store_true", help="print the full JSON report")
    s.add_argument("--out", help="also write the JSON report here")
    s.set_defaults(func=cmd_summarize)

    e = sub.add_parser("export", help="write KML, Newick, JSON, SVG or band files from an archive")
    e.add_argument("--archive", required=True)
    e.add_argument("--format", nargs="+", default=["all"], choices=sorted(ALL_FORMATS | {"all"}))
    e.add_argument("--out", help="output directory (default: the archive)")
    e.set_defaults(func=cmd_export)

    m = sub.add_parser("simulate", help="write a synthetic dataset with known truth")
    m.add_argument("--out")
    m.add_argument("--stem", default="synth")
    m.add_argument("--haplotypes", type=int, default=8)
    m.add_argument("--observations", type=int, default=60)
    m.add_argument("--sites", type=int, default=None)
    m.add_argument("--true-k", type=int, default=1)
    m.add_argument("--separation", type=float, default=6.0)
    m.add_argument("--covariates", type=int, default=0)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_simulate)

    v = sub.add_parser("validate", help="check input files")
    v.add_argument("--seqs")
    v.add_argument("--coords", required=True)
    v.add_argument("--dims", type=int, required=True)
    v.add_argument("--ds", type=int, default=0)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (PhylogeoError, ValueError, OSError) as exc:
        print(f"phylogeo: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
