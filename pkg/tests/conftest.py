import numpy as np
import pytest

from phylogeo.haplonet import network_from_edges


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def path3():
    return network_from_edges(3, [(0, 1), (1, 2)], counts=[1, 1, 1])


def star4():
    return network_from_edges(4, [(0, 1), (0, 2), (0, 3)], counts=[1, 1, 1, 1])


def square():
    return network_from_edges(4, [(0, 1), (1, 2), (2, 3), (0, 3)], counts=[1, 1, 1, 1])


def nexus_text(rows, labels=None):
    labels = labels or [f"t{i + 1}" for i in range(len(rows))]
    body = "\n".join(f"{l} {r}" for l, r in zip(labels, rows))
    return (
        "#NEXUS\nbegin data;\n"
        f"dimensions ntax={len(rows)} nchar={len(rows[0])};\n"
        "format datatype=dna gap=-;\nmatrix\n"
        f"{body}\n;\nend;\n"
    )


def rand_index(a, b) -> float:
    """Fraction of observation pairs on which two partitions agree."""
    a = np.asarray(a)
    b = np.asarray(b)
    iu = np.triu_indices(len(a), 1)
    same_a = (a[:, None] == a[None, :])[iu]
    same_b = (b[:, None] == b[None, :])[iu]
    return float(np.mean(same_a == same_b))
