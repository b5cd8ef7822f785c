import os
from pathlib import Path

import numpy as np
import pytest

from kgrelpred.graph import KnowledgeGraph, load_dataset

REPO = Path(__file__).resolve().parent.parent
DATA = REPO / "data"


def write_dataset(directory: Path, train, valid=("a\tr0\tb",), test=("a\tr0\tb",)):
    directory.mkdir(parents=True, exist_ok=True)
    for split, rows in (("train", train), ("valid", valid), ("test", test)):
        (directory / f"{split}.txt").write_text("\n".join(rows) + "\n")
    return directory


def graph_from_triples(tmp_path, train, valid=None, test=None):
    """Tiny graph fixture builder; valid/test default to the first train row."""
    valid = valid if valid is not None else [train[0]]
    test = test if test is not None else [train[0]]
    return load_dataset(write_dataset(tmp_path / "ds", train, valid, test))


def random_graph(rng: np.random.Generator, n_entities=8, n_relations=3, n_edges=14):
    """A random multigraph written through the loader (so ids are realistic)."""
    rows = []
    for _ in range(n_edges):
        h = int(rng.integers(n_entities))
        t = int(rng.integers(n_entities))
        r = int(rng.integers(n_relations))
        rows.append(f"e{h}\trel{r}\te{t}")
    return rows


@pytest.fixture(scope="session")
def umls():
    return load_dataset(DATA / "umls")


@pytest.fixture(scope="session")
def kinship():
    return load_dataset(DATA / "kinship")


@pytest.fixture()
def toy_graph(tmp_path):
    # a small connected multigraph with a parallel edge and a self-loop
    rows = [
        "a\tplays\tb",
        "b\tknows\tc",
        "c\tplays\td",
        "d\tknows\ta",
        "a\tplays\tc",
        "b\tplays\td",
        "a\tknows\tb",  # parallel to edge 0 with another relation
        "c\tknows\tc",  # self-loop
    ]
    return graph_from_triples(tmp_path, rows, valid=["a\tknows\tc"], test=["b\tplays\tc"])
