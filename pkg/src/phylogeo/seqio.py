"""Input parsing: NEXUS alignments, coordinate tables, haplotype collapsing."""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateDataError, ParseError

NUCLEOTIDES = frozenset("ACGT-")
AMBIGUITY_CODES = frozenset("RYSWKMBDHVN?")
VALID_RESIDUES = NUCLEOTIDES | AMBIGUITY_CODES


@dataclass(frozen=True)
class SequenceSet:
    labels: list[str]
    residues: np.ndarray  # (N, L) array of single characters

    @property
    def n_sequences(self) -> int:
        return self.residues.shape[0]

    @property
    def length(self) -> int:
        return self.residues.shape[1]

    def sequence(self, i: int) -> str:
        return "".join(self.residues[i])


@dataclass(frozen=True)
class ObservationTable:
    """One row per sampled individual.

    ``values`` holds longitude, latitude and then any covariates, in the
    units of the input file. ``haplotype_ids`` are 1-based sequence numbers
    as written in the file. ``line_index`` is the 0-based data line each
    row came from and ``location_index`` groups rows sharing coordinates.
    """

    values: np.ndarray
    haplotype_ids: np.ndarray
    line_index: np.ndarray
    location_index: np.ndarray
    locations: np.ndarray  # (n_locations, 2) distinct lon/lat, first-seen order
    covariate_names: list[str] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def n_observations(self) -> int:
        return self.values.shape[0]

    @property
    def n_locations(self) -> int:
        return self.locations.shape[0]


@dataclass(frozen=True)
class HaplotypeData:
    haplotypes: np.ndarray  # (n, effective_length) residues at representative sites
    codes: np.ndarray  # (n, effective_length) small-integer state codes
    counts: np.ndarray
    label_map: np.ndarray  # raw sequence index -> haplotype index
    site_map: np.ndarray  # effective site -> representative original column
    site_groups: list[list[int]]  # effective site -> all original columns merged into it
    dropped_sites: list[int]
    constant_sites: list[int]
    seq_labels: list[str]

    @property
    def n(self) -> int:
        return self.haplotypes.shape[0]

    @property
    def effective_length(self) -> int:
        return self.haplotypes.shape[1]

    @property
    def n_sequences(self) -> int:
        return int(self.counts.sum())


def _read_source(source) -> tuple[str, str]:
    """Return (text, name) from a path, '-', bytes, or text."""
    if isinstance(source, bytes):
        return source.decode("utf-8", errors="replace"), "<bytes>"
    if str(source) == "-":
        return sys.stdin.read(), "<stdin>"
    if isinstance(source, Path) or (
        isinstance(source, str) and "\n" not in source and Path(source).is_file()
    ):
        p = Path(source)
        return p.read_text(encoding="utf-8", errors="replace"), str(p)
    if hasattr(source, "read"):
        data = source.read()
        if isinstance(data, bytes):
            data = data.decode("utf-8", errors="replace")
        return data, getattr(source, "name", "<stream>")
    return str(source), "<text>"


def _strip_comments(text: str) -> str:
    # NEXUS comments are [ ... ]; keep newlines so line numbers stay valid.
    out = []
    depth = 0
    for ch in text:
        if ch == "[":
            depth += 1
            continue
        if ch == "]" and depth:
            depth -= 1
            continue
        if depth and ch != "\n":
            continue
        out.append(ch)
    return "".join(out)


_TOKEN = re.compile(r"'((?:[^']|'')*)'|(\S+)")


def _split_label(line: str) -> tuple[str, str]:
    m = _TOKEN.match(line.lstrip())
    if m is None:
        return "", ""
    if m.group(1) is not None:
        label = m.group(1).replace("''", "'")
    else:
        label = m.group(2)
    rest = line.lstrip()[m.end():]
    return label, rest


def parse_nexus(source, name: str | None = None) -> SequenceSet:
    """Parse the DATA or CHARACTERS block of a NEXUS file.

    Interleaved and sequential matrices are both accepted. Gaps are kept
    as ``-``; the declared missing symbol becomes ``?`` and the match
    character is expanded against the first sequence.
    """
    text, src = _read_source(source)
    src = name or src
    lines = _strip_comments(text).splitlines()

    start = None
    for i, line in enumerate(lines):
        if re.match(r"\s*begin\s+(data|characters)\s*;", line, re.I):
            start = i
            break
    if start is None:
        raise ParseError("no DATA or CHARACTERS block found", source=src)

    ntax = nchar = None
    interleave = False
    missing, matchchar, gap = "?", None, "-"
    i = start + 1
    matrix_start = None
    while i < len(lines):
        stripped = lines[i].strip()
        low = stripped.lower()
        if re.match(r"end(block)?\s*;", low):
            break
        if low.startswith("dimensions"):
            m = re.search(r"ntax\s*=\s*(\d+)", low)
            ntax = int(m.group(1)) if m else ntax
            m = re.search(r"nchar\s*=\s*(\d+)", low)
            nchar = int(m.group(1)) if m else nchar
        elif low.startswith("format"):
            interleave = bool(re.search(r"\binterleave(\s*=\s*yes)?\b", low)) and not re.search(
                r"interleave\s*=\s*no", low
            )
            m = re.search(r"missing\s*=\s*(\S)", stripped, re.I)
            missing = m.group(1) if m else missing
            m = re.search(r"matchchar\s*=\s*(\S)", stripped, re.I)
            matchchar = m.group(1) if m else matchchar
            m = re.search(r"gap\s*=\s*(\S)", stripped, re.I)
            gap = m.group(1) if m else gap
        elif low.startswith("matrix"):
            matrix_start = i
            break
        i += 1
    if matrix_start is None:
        raise ParseError("data block has no MATRIX command", line=start + 1, source=src)

    seqs: dict[str, list[str]] = {}
    first_line: dict[str, int] = {}
    order: list[str] = []
    current = None
    terminated = False
    first_row = lines[matrix_start].strip()[len("matrix"):]
    rows = [(matrix_start, first_row)] + [(j, lines[j]) for j in range(matrix_start + 1, len(lines))]
    for lineno, raw in rows:
        line = raw.strip()
        if not line:
            continue
        if line.endswith(";"):
            line = line[:-1].strip()
            terminated = True
        if line:
            continuation = (
                not interleave
                and current is not None
                and nchar is not None
                and len(seqs[current]) < nchar
            )
            if continuation:
                chunk = line
            else:
                label, chunk = _split_label(line)
                if label in seqs and not interleave:
                    raise ParseError(f"duplicate sequence label {label!r}", line=lineno + 1, source=src)
                if label not in seqs:
                    seqs[label] = []
                    first_line[label] = lineno + 1
                    order.append(label)
                current = label
            chunk = re.sub(r"\s+", "", chunk).upper()
            seqs[current].extend(chunk)
        if terminated:
            break
    if not terminated:
        raise ParseError("MATRIX is not terminated by ';'", line=matrix_start + 1, source=src)
    if len(order) < 2:
        raise ParseError("need at least two sequences", line=matrix_start + 1, source=src)
    if ntax is not None and ntax != len(order):
        raise ParseError(f"ntax={ntax} but matrix has {len(order)} sequences", line=matrix_start + 1, source=src)

    ref_len = nchar if nchar is not None else len(seqs[order[0]])
    gap_u, missing_u = gap.upper(), missing.upper()
    match_u = matchchar.upper() if matchchar else None
    first = seqs[order[0]]
    for label in order:
        s = seqs[label]
        if len(s) != ref_len:
            raise ParseError(
                f"ragged alignment: sequence {label!r} has length {len(s)}, expected {ref_len}",
                line=first_line[label],
                source=src,
            )
        for k, ch in enumerate(s):
            if ch == gap_u:
                s[k] = "-"
            elif ch == missing_u:
                s[k] = "?"
            elif match_u is not None and ch == match_u:
                s[k] = first[k]
            elif ch == "U":
                s[k] = "T"
            if s[k] not in VALID_RESIDUES:
                raise ParseError(f"invalid residue {ch!r} in sequence {label!r}", line=first_line[label], source=src)
    residues = np.array([seqs[label] for label in order], dtype="<U1").reshape(len(order), ref_len)
    return SequenceSet(labels=order, residues=residues)


def parse_coords(source, dims: int, name: str | None = None) -> ObservationTable:
    """Parse a whitespace-delimited coordinate table.

    Each line holds ``dims`` numbers (longitude, latitude, covariates) and
    then one or more 1-based sequence numbers; every sequence number becomes
    one observation row.
    """
    if dims < 2:
        raise ParseError(f"dims must be at least 2, got {dims}")
    text, src = _read_source(source)
    src = name or src
    values, ids, line_idx = [], [], []
    data_line = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) < dims + 1:
            raise ParseError(
                f"expected {dims} numeric fields and at least one haplotype id, got {len(fields)} fields",
                line=lineno,
                source=src,
            )
        try:
            coords = [float(f) for f in fields[:dims]]
        except ValueError as exc:
            raise ParseError(f"non-numeric coordinate field: {exc}", line=lineno, source=src) from None
        for tok in fields[dims:]:
            try:
                hid = int(tok)
            except ValueError:
                raise ParseError(f"haplotype id {tok!r} is not an integer", line=lineno, source=src) from None
            if hid < 1:
                raise ParseError(f"haplotype id {hid} must be >= 1", line=lineno, source=src)
            values.append(coords)
            ids.append(hid)
            line_idx.append(data_line)
        data_line += 1
    if not values:
        raise ParseError("no observations found", source=src)
    values = np.asarray(values, dtype=float)
    loc_map: dict[tuple[float, float], int] = {}
    loc_index = np.empty(len(values), dtype=int)
    for r, (lon, lat) in enumerate(values[:, :2]):
        loc_index[r] = loc_map.setdefault((lon, lat), len(loc_map))
    locations = np.array(list(loc_map.keys()), dtype=float).reshape(-1, 2)
    return ObservationTable(
        values=values,
        haplotype_ids=np.asarray(ids, dtype=int),
        line_index=np.asarray(line_idx, dtype=int),
        location_index=loc_index,
        locations=locations,
        covariate_names=[f"cov{j}" for j in range(1, dims - 1)],
    )


def check_observations(obs: ObservationTable, seqs: SequenceSet) -> None:
    bad = sorted(set(int(h) for h in obs.haplotype_ids if h > seqs.n_sequences))
    if bad:
        raise ParseError(
            f"haplotype ids {bad} refer to sequences beyond the {seqs.n_sequences} in the alignment"
        )


def _partition(column) -> tuple[int, ...]:
    seen: dict[str, int] = {}
    return tuple(seen.setdefault(ch, len(seen)) for ch in column)


def collapse_haplotypes(seqs: SequenceSet) -> HaplotypeData:
    """Collapse sequences to distinct haplotypes over effective sites.

    Columns with any ambiguity code are dropped, gaps count as a fifth
    state, constant columns are removed, and columns that split the
    haplotypes into the same groups are merged into one effective site.
    Raises DegenerateDataError (carrying ``.data``) when a single
    haplotype remains.
    """
    res = seqs.residues
    n_seq, length = res.shape
    ambiguous = np.zeros(length, dtype=bool)
    for code in AMBIGUITY_CODES:
        ambiguous |= (res == code).any(axis=0)
    dropped = [int(j) for j in np.flatnonzero(ambiguous)]
    kept = np.flatnonzero(~ambiguous)

    rows: dict[str, int] = {}
    label_map = np.empty(n_seq, dtype=int)
    reps: list[int] = []
    for i in range(n_seq):
        key = "".join(res[i, kept])
        if key not in rows:
            rows[key] = len(rows)
            reps.append(i)
        label_map[i] = rows[key]
    counts = np.bincount(label_map, minlength=len(reps))
    hap_full = res[reps]  # (n, L)

    groups: dict[tuple[int, ...], list[int]] = {}
    constant = []
    for j in kept:
        part = _partition(hap_full[:, j])
        if max(part) == 0:
            constant.append(int(j))
            continue
        groups.setdefault(part, []).append(int(j))
    site_groups = list(groups.values())
    site_map = np.array([g[0] for g in site_groups], dtype=int)
    haplotypes = hap_full[:, site_map] if len(site_map) else np.empty((len(reps), 0), dtype="<U1")
    codes = np.array(list(groups.keys()), dtype=np.int8).T.reshape(len(reps), len(site_map))

    data = HaplotypeData(
        haplotypes=haplotypes,
        codes=np.ascontiguousarray(codes),
        counts=counts,
        label_map=label_map,
        site_map=site_map,
        site_groups=site_groups,
        dropped_sites=dropped,
        constant_sites=constant,
        seq_labels=list(seqs.labels),
    )
    if data.n == 1:
        err = DegenerateDataError("all sequences collapse to a single haplotype; nothing to infer")
        err.data = data
        raise err
    return data


def write_nexus(seqs: SequenceSet, path) -> None:
    width = max(len(l) for l in seqs.labels)
    out = [
        "#NEXUS",
        "begin data;",
        f"dimensions ntax={seqs.n_sequences} nchar={seqs.length};",
        "format datatype=dna missing=? gap=-;",
        "matrix",
    ]
    for label, row in zip(seqs.labels, seqs.residues):
        out.append(f"{label.ljust(width)}  {''.join(row)}")
    out += [";", "end;", ""]
    Path(path).write_text("\n".join(out))


def write_coords(values: np.ndarray, haplotype_ids, path) -> None:
    """One line per observation: values then the 1-based sequence number."""
    lines = []
    for row, hid in zip(np.atleast_2d(values), haplotype_ids):
        lines.append(" ".join(repr(float(v)) for v in row) + f" {int(hid)}")
    Path(path).write_text("\n".join(lines) + "\n")
