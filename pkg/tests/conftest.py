import json
from pathlib import Path

import numpy as np
import pytest

from mignn.graphdata import Graph


def write_tu(directory: Path, name: str, graphs, attributes=True, label_columns=1, categories=(8,)):
    """Write a collection in the multi-file format.

    ``graphs`` is a list of (node_count, local edge list); node labels cycle
    through each column's category count so every category appears.
    """
    directory.mkdir(parents=True, exist_ok=True)
    a_lines, ind_lines, lab_lines, attr_lines = [], [], [], []
    offset, node = 0, 0
    for gid, (n, edges) in enumerate(graphs, 1):
        for u, v in edges:
            a_lines.append(f"{u + offset + 1}, {v + offset + 1}")
            a_lines.append(f"{v + offset + 1}, {u + offset + 1}")
        for _ in range(n):
            ind_lines.append(str(gid))
            lab_lines.append(", ".join(str((node + j) % categories[j]) for j in range(label_columns)))
            attr_lines.append(", ".join(f"{0.1 * ((node * 7 + k) % 11):.3f}" for k in range(3)))
            node += 1
        offset += n
    (directory / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (directory / f"{name}_graph_indicator.txt").write_text("\n".join(ind_lines) + "\n")
    (directory / f"{name}_node_labels.txt").write_text("\n".join(lab_lines) + "\n")
    if attributes:
        (directory / f"{name}_node_attributes.txt").write_text("\n".join(attr_lines) + "\n")
    return directory


def write_jsonl(path: Path, records) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


@pytest.fixture
def triangle_record():
    return {"n": 3, "edges": [[0, 1], [1, 2], [0, 2]], "x": [[1, 0], [0, 1], [1, 1]], "y": [0, 1, 0],
            "labeled": [True, True, True]}


def small_graph(n=6, d=3, c=2, seed=0, p=0.45) -> Graph:
    rng = np.random.default_rng(seed)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p] or [(0, 1)]
    return Graph(n, np.array(pairs), rng.normal(size=(n, d)), rng.integers(0, c, size=n), np.ones(n, dtype=bool),
                 name=f"small{seed}")
