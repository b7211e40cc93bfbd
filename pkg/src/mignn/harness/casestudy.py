"""Accuracy as a function of how much a test graph resembles the training set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..encoders import EncoderSpec, ParamVector
from ..errors import ContractError
from ..graphdata import EpisodeSplit, Graph, GraphCollection, sample_episode, synth_collection
from ..meta import HyperParams, MetaState, graph_embedding, predict
from .baselines import Splits, evaluate, induct_predict, train_supervised, transduct_predict

GROUPS = ("high", "medium", "low")
CASE_METHODS = ("transduct", "induct", "mignn")


def group_sizes(n: int) -> tuple[int, int, int]:
    """Equal thirds by rank; the remainder goes to the middle group."""
    if n < 3:
        raise ContractError(f"need at least 3 test graphs to form three groups, got {n}")
    k = n // 3
    return k, n - 2 * k, k


def similarities(train_graphs, test_graphs, w_att: np.ndarray) -> np.ndarray:
    """Mean negative Euclidean distance from each test embedding to every training embedding."""
    train_emb = np.stack([graph_embedding(g.features, w_att).data for g in train_graphs])
    out = []
    for g in test_graphs:
        e = graph_embedding(g.features, w_att).data
        out.append(-float(np.mean(np.linalg.norm(train_emb - e, axis=1))))
    return np.array(out)


def similarity_groups(train_graphs, test_graphs, w_att: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Indices of the high / medium / low similarity groups (stable order on ties)."""
    sim = similarities(train_graphs, test_graphs, w_att)
    order = np.argsort(-sim, kind="stable")
    a, b, _ = group_sizes(len(sim))
    return [order[:a], order[a:a + b], order[a + b:]], sim


@dataclass
class GroupResult:
    group: str
    method: str
    size: int
    similarity: float
    accuracy: float
    micro_f1: float


def similarity_case_study(train_graphs: GraphCollection, test_graphs: GraphCollection,
                          episodes: list[EpisodeSplit], state: MetaState, spec: EncoderSpec, hp: HyperParams,
                          seed: int, induct_theta: ParamVector | None = None, val_graphs: GraphCollection | None = None,
                          transduct_epochs: int = 100) -> list[GroupResult]:
    """Evaluate transduct, induct and the meta-trained state on each similarity group."""
    groups, sim = similarity_groups(train_graphs.graphs, test_graphs.graphs, state.prior["att"])
    multi, c = train_graphs.multi_label, train_graphs.num_categories
    if induct_theta is None:
        val = val_graphs if val_graphs is not None else train_graphs.subset([])
        induct_theta, _ = train_supervised(train_graphs, val, spec, hp, seed)
    fns = {
        "transduct": lambda g, s: transduct_predict(g, s, spec, hp, multi, seed, transduct_epochs),
        "induct": lambda g, s: induct_predict(induct_theta, g, s, spec, multi),
        "mignn": lambda g, s: predict(g, s, state, spec, hp, multi),
    }
    out = []
    for name, idx in zip(GROUPS, groups):
        gs = [test_graphs.graphs[i] for i in idx]
        es = [episodes[i] for i in idx]
        for method in CASE_METHODS:
            counts = evaluate(fns[method], gs, es, multi, c)
            out.append(GroupResult(name, method, len(idx), float(sim[idx].mean()), counts.accuracy, counts.micro_f1))
    return out


def drops(results: list[GroupResult]) -> dict[str, dict[str, float]]:
    """Per method: accuracy drop from the high to the low group, and max-min across groups."""
    out = {}
    for method in CASE_METHODS:
        acc = {r.group: r.accuracy for r in results if r.method == method}
        vals = [acc[g] for g in GROUPS]
        out[method] = {"drop": acc["high"] - acc["low"], "spread": max(vals) - min(vals)}
    return out


def mean_drops(per_seed: list[list[GroupResult]]) -> dict[str, dict[str, float]]:
    """Average the per-group accuracies over seeds, then take drops and spreads."""
    merged = []
    for group in GROUPS:
        for method in CASE_METHODS:
            accs = [r.accuracy for res in per_seed for r in res if r.group == group and r.method == method]
            f1s = [r.micro_f1 for res in per_seed for r in res if r.group == group and r.method == method]
            sims = [r.similarity for res in per_seed for r in res if r.group == group and r.method == method]
            size = next(r.size for r in per_seed[0] if r.group == group)
            merged.append(GroupResult(group, method, size, float(np.mean(sims)), float(np.mean(accs)),
                                      float(np.mean(f1s))))
    return drops(merged)


def shifted_case_collection(seed: int = 0, n_train: int = 24, n_val: int = 6, n_test: int = 12,
                            shift: float = 2.0, d: int = 8, num_classes: int = 3, homophily: float = 0.9,
                            nodes_range=(20, 30)) -> Splits:
    """Train/val graphs from one feature distribution; the last third of the test graphs
    have every class mean displaced along a common direction."""
    n = n_train + n_val + n_test
    n_shift = n_test // 3
    coll = synth_collection(n, nodes_range, d, num_classes, homophily, seed, shift=shift,
                            shift_fraction=n_shift / n, name="shifted")
    train = coll.subset(range(n_train), "shifted/train")
    val = coll.subset(range(n_train, n_train + n_val), "shifted/val")
    test = coll.subset(range(n_train + n_val, n), "shifted/test")
    rng = np.random.default_rng([seed, 7])
    episodes = [sample_episode(g, 0.5, rng) for g in test.graphs]
    return Splits(train, val, test, episodes)
