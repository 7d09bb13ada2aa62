import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phylogeo.errors import DegenerateDataError, ParseError
from phylogeo.seqio import collapse_haplotypes, parse_coords, parse_nexus, write_coords, write_nexus, SequenceSet

from conftest import nexus_text

COMBINED = "40.3 45.2    1    2    2\n45.3 50.1    2    3\n"
THREE_LINES = "40.3 45.2    1 \n40.3 45.2    2    2\n45.3 50.1    2    3\n"
SPLIT = "40.3 45.2 1\n40.3 45.2 2\n40.3 45.2 2\n45.3 50.1 2\n45.3 50.1 3\n"
TEMPERATURE = "40.3 45.2 18.1    1 \n40.3 45.2 22.5    2    2\n45.3 50.1 25.0    2    3\n"


def same_table(a, b):
    return (
        np.array_equal(a.values, b.values)
        and np.array_equal(a.haplotype_ids, b.haplotype_ids)
        and np.array_equal(a.location_index, b.location_index)
        and np.array_equal(a.locations, b.locations)
        and a.d == b.d
    )


class TestCoords:
    def test_example(self):
        t = parse_coords(COMBINED, 2)
        assert t.n_observations == 5
        assert t.n_locations == 2
        assert sorted(t.haplotype_ids.tolist()) == [1, 2, 2, 2, 3]
        assert t.line_index.tolist() == [0, 0, 0, 1, 1]

    def test_variants_identical(self):
        a, b, c = (parse_coords(x, 2) for x in (COMBINED, THREE_LINES, SPLIT))
        assert same_table(a, b) and same_table(a, c)

    def test_covariate(self):
        t = parse_coords("40.3 45.2 18.1 1", 3)
        assert t.n_observations == 1
        assert t.values[0, 2] == pytest.approx(18.1)
        t = parse_coords(TEMPERATURE, 3)
        assert t.values[:, 2].tolist() == [18.1, 22.5, 22.5, 25.0, 25.0]
        assert t.n_locations == 2

    def test_stream_and_file(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text(COMBINED)
        assert same_table(parse_coords(p, 2), parse_coords(io.StringIO(COMBINED), 2))

    @pytest.mark.parametrize(
        "text,line",
        [("40.3 45.2 1\n40.x 45.2 2\n", 2), ("40.3 45.2\n", 1), ("1 2 0\n", 1), ("1 2 a\n", 1)],
    )
    def test_errors_name_line(self, text, line):
        with pytest.raises(ParseError) as ei:
            parse_coords(text, 2)
        assert ei.value.line == line

    def test_dims_too_small(self):
        with pytest.raises(ParseError):
            parse_coords(COMBINED, 1)

    @given(st.lists(st.lists(st.integers(1, 9), min_size=1, max_size=4), min_size=1, max_size=8))
    def test_row_count_is_token_count(self, lines):
        text = "\n".join(f"{i}.5 {i}.25 " + " ".join(map(str, ids)) for i, ids in enumerate(lines))
        t = parse_coords(text, 2)
        assert t.n_observations == sum(len(x) for x in lines)
        assert t.haplotype_ids.tolist() == [h for ids in lines for h in ids]

    def test_write_roundtrip(self, tmp_path):
        t = parse_coords(TEMPERATURE, 3)
        write_coords(t.values, t.haplotype_ids, tmp_path / "o.txt")
        assert same_table(t, parse_coords(tmp_path / "o.txt", 3))


class TestNexus:
    def test_minimal(self):
        s = parse_nexus(nexus_text(["ACGT", "ACGA"]))
        assert (s.n_sequences, s.length) == (2, 4)

    def test_gap_preserved(self):
        s = parse_nexus(nexus_text(["AC-T", "ACGA"]))
        assert s.sequence(0) == "AC-T"

    def test_ragged(self):
        with pytest.raises(ParseError) as ei:
            parse_nexus(nexus_text(["ACGT", "ACG"]))
        assert ei.value.line is not None

    def test_duplicate_labels(self):
        with pytest.raises(ParseError):
            parse_nexus(nexus_text(["ACGT", "ACGA"], labels=["a", "a"]))

    def test_missing_block(self):
        with pytest.raises(ParseError):
            parse_nexus("#NEXUS\nbegin trees;\nend;\n")

    def test_interleaved(self):
        text = (
            "#NEXUS\nbegin data;\ndimensions ntax=2 nchar=8;\nformat datatype=dna interleave;\nmatrix\n"
            "a ACGT\nb ACGA\n\na TTTT\nb TTTC\n;\nend;\n"
        )
        s = parse_nexus(text)
        assert s.sequence(0) == "ACGTTTTT" and s.sequence(1) == "ACGATTTC"

    def test_comments_ignored(self):
        s = parse_nexus(nexus_text(["ACGT", "ACGA"]).replace("t1 ACGT", "t1 AC[note]GT"))
        assert s.sequence(0) == "ACGT"

    def test_write_roundtrip(self, tmp_path):
        s = parse_nexus(nexus_text(["AC-T", "ACGA", "TTGA"]))
        write_nexus(s, tmp_path / "x.nex")
        r = parse_nexus(tmp_path / "x.nex")
        assert r.labels == s.labels and np.array_equal(r.residues, s.residues)


def partitions(cols):
    seen = {}
    return [tuple(seen.setdefault(c, len(seen)) for c in col) for col in cols]


class TestCollapse:
    def test_identical_degenerate(self):
        with pytest.raises(DegenerateDataError):
            collapse_haplotypes(parse_nexus(nexus_text(["ACGT"] * 40)))

    def test_same_split_sites_merge(self):
        # sites 2 and 5 (1-based) both split {1} from {2, 3}
        s = parse_nexus(nexus_text(["AAAAAA", "ACAACA", "ACAACT"]))
        h = collapse_haplotypes(s)
        assert h.n == 3
        # oracle: distinct non-constant column partitions, by hand
        cols = ["".join(s.residues[:, j]) for j in range(s.length)]
        parts = {p for p in partitions(cols) if max(p) > 0}
        assert h.effective_length == len(parts) == 2
        assert [1, 4] in h.site_groups

    def test_ambiguity_and_gap(self):
        h = collapse_haplotypes(parse_nexus(nexus_text(["ANGT-", "ACGTA", "ACGAA"])))
        assert h.dropped_sites == [1]
        assert h.effective_length == 2  # gap column kept as its own state
        assert h.n == 3

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_properties(self, data):
        n = data.draw(st.integers(2, 7))
        L = data.draw(st.integers(2, 10))
        alphabet = st.sampled_from("ACGT-N")
        rows = [
            "".join(data.draw(st.lists(alphabet, min_size=L, max_size=L)))
            for _ in range(n)
        ]
        s = SequenceSet([f"s{i}" for i in range(n)], np.array([list(r) for r in rows]))
        try:
            h = collapse_haplotypes(s)
        except DegenerateDataError:
            return
        assert h.counts.sum() == n
        assert len({tuple(r) for r in h.haplotypes}) == h.n
        # every retained column reproduced through label_map
        for i in range(n):
            assert "".join(h.haplotypes[h.label_map[i]]) == "".join(s.residues[i, h.site_map])
        covered = set(h.dropped_sites) | set(h.constant_sites) | {j for g in h.site_groups for j in g}
        assert covered == set(range(L))
        parts = partitions(["".join(h.haplotypes[:, j]) for j in range(h.effective_length)])
        assert len(set(parts)) == len(parts)
        # permuting the input changes numbering only
        perm = data.draw(st.permutations(range(n)))
        h2 = collapse_haplotypes(SequenceSet([s.labels[i] for i in perm], s.residues[list(perm)]))
        assert h2.n == h.n and h2.effective_length == h.effective_length
        assert sorted(h2.counts) == sorted(h.counts)
