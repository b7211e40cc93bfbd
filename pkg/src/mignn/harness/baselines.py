"""Comparison methods and the per-seed runner shared by every CLI subcommand.

Methods:

- ``mignn``         dual adaptation (graph prior + task prior)
- ``meta_gnn``      task-level adaptation only (scale/shift frozen at zero)
- ``task_only``     same model as ``meta_gnn``, named for the ablation table
- ``graph_only``    graph-level adaptation only (no inner gradient steps)
- ``induct``        one supervised encoder over all training nodes, applied frozen
- ``finetune_agf``  ``induct`` followed by inner gradient steps on each test support
- ``knn``           ``induct`` hidden representations + nearest labeled support node
- ``transduct``     a fresh encoder trained on each test graph's support only
"""

from __future__ import annotations

import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..encoders import EncoderSpec, ParamVector, forward, init_params, node_loss
from ..errors import ConfigError, ContractError
from ..gradcore import Tape, Tensor, backward
from ..graphdata import EpisodeSplit, Graph, GraphCollection, label_targets, partition_graphs, sample_episode
from ..meta import HyperParams, MetaState, decide, predict, task_adapt, train, zero_graph_prior
from ..optim import Adam
from .metrics import Counts, Metrics

METHODS = ("mignn", "induct", "transduct", "finetune_agf", "knn", "meta_gnn", "graph_only", "task_only")


@dataclass
class Splits:
    train: GraphCollection
    val: GraphCollection
    test: GraphCollection
    test_episodes: list

    @property
    def multi_label(self) -> bool:
        return self.train.multi_label

    @property
    def num_categories(self) -> int:
        return self.train.num_categories


def make_splits(collection: GraphCollection, split_seed: int = 0, support_fraction: float = 0.5,
                ratios=(0.6, 0.2, 0.2)) -> Splits:
    """Partition graphs and fix one support/query split per test graph."""
    tr, va, te = partition_graphs(collection, ratios, split_seed)
    rng = np.random.default_rng([split_seed, 7])
    episodes = [sample_episode(g, support_fraction, rng) for g in te.graphs]
    return Splits(tr, va, te, episodes)


def evaluate(predict_fn: Callable[[Graph, EpisodeSplit], np.ndarray], graphs: Sequence[Graph],
             episodes: Sequence[EpisodeSplit], multi_label: bool, num_categories: int) -> Counts:
    """Pool query decisions over all test graphs."""
    counts = Counts()
    for g, split in zip(graphs, episodes):
        if split.query_labels is None:
            raise ContractError(f"test graph {g.name!r} has no query labels to score against")
        counts.add(predict_fn(g, split), split.query_labels, multi_label, num_categories)
    return counts


def evaluate_state(state: MetaState, graphs, episodes, spec: EncoderSpec, hp: HyperParams,
                   multi_label: bool) -> Counts:
    return evaluate(lambda g, s: predict(g, s, state, spec, hp, multi_label), graphs, episodes,
                    multi_label, spec.output_dim)


# ---------------------------------------------------------------------------
# supervised encoder (Induct-GNN and its two-stage variants)
# ---------------------------------------------------------------------------

def _all_labeled(g: Graph) -> tuple[np.ndarray, np.ndarray]:
    nodes = g.labeled_nodes
    return nodes, g.labels[nodes]


def train_supervised(train_graphs: GraphCollection, val_graphs: GraphCollection, spec: EncoderSpec,
                     hp: HyperParams, seed: int) -> tuple[ParamVector, list]:
    """Summed cross-entropy over every labeled training node, Adam, early stopping
    on the summed query loss of the (fixed) validation episodes."""
    multi = train_graphs.multi_label
    rng_init = np.random.default_rng([seed, 0])
    theta = init_params(spec, rng_init).data
    params = {"theta": theta}
    adam = Adam(["theta"], [theta.shape], lr=hp.outer_lr)
    rng = np.random.default_rng([seed, 1])
    val_rng = np.random.default_rng([seed, 2])
    val_list = list(val_graphs.graphs)
    val_eps = [sample_episode(g, hp.support_fraction, val_rng) for g in val_list]
    graphs = list(train_graphs.graphs)

    def val_score(th):
        if not val_list:
            return math.inf
        t = Tensor(th)
        losses = [float(node_loss(forward(spec, g, t), s.query, label_targets(s.query_labels, spec.output_dim),
                                  multi).data) for g, s in zip(val_list, val_eps)]
        return float(np.mean(losses))

    best_theta, best_val, bad, log = params["theta"].copy(), val_score(params["theta"]), 0, []
    for epoch in range(1, hp.max_epochs + 1):
        order = rng.permutation(len(graphs))
        losses = []
        for start in range(0, len(order), hp.batch_size):
            total = np.zeros_like(params["theta"])
            for gi in order[start:start + hp.batch_size]:
                g = graphs[gi]
                nodes, labels = _all_labeled(g)
                with Tape() as tape:
                    t = tape.watch(params["theta"])
                    loss = node_loss(forward(spec, g, t), nodes, label_targets(labels, spec.output_dim), multi)
                    (gr,) = backward(loss, [t])
                losses.append(float(loss.data))
                total = total + gr.data
            adam.step(params, {"theta": total})
        score = val_score(params["theta"])
        log.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_query_loss": score})
        if score < best_val:
            best_theta, best_val, bad = params["theta"].copy(), score, 0
        else:
            bad += 1
            if bad >= hp.patience:
                break
    return ParamVector(best_theta, spec.shapes, spec.arch), log


def induct_predict(theta: ParamVector, g: Graph, split: EpisodeSplit, spec: EncoderSpec,
                   multi_label: bool) -> np.ndarray:
    return decide(forward(spec, g, theta).data[split.query], multi_label)


def finetune_predict(theta: ParamVector, g: Graph, split: EpisodeSplit, spec: EncoderSpec, hp: HyperParams,
                     multi_label: bool) -> np.ndarray:
    tuned = task_adapt(g, split, Tensor(theta.data), hp.replace(second_order=False), spec, multi_label)
    return decide(forward(spec, g, tuned).data[split.query], multi_label)


def knn_predict(theta: ParamVector, g: Graph, split: EpisodeSplit, spec: EncoderSpec, multi_label: bool,
                k: int = 1) -> np.ndarray:
    """Label each query node by its k nearest support nodes in the hidden layer (Euclidean)."""
    _, hidden = forward(spec, g, theta, return_hidden=True)
    h = hidden.data
    sup, qry = h[split.support], h[split.query]
    d2 = ((qry[:, None, :] - sup[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    labels = np.asarray(split.support_labels)
    if multi_label:
        votes = labels[nearest].mean(axis=1)
        return (votes >= 0.5).astype(np.float64)
    out = np.empty(len(qry), dtype=np.int64)
    for i, row in enumerate(nearest):
        counts = np.bincount(labels[row], minlength=spec.output_dim)
        out[i] = int(np.argmax(counts))
    return out


def transduct_predict(g: Graph, split: EpisodeSplit, spec: EncoderSpec, hp: HyperParams, multi_label: bool,
                      seed: int, epochs: int = 100) -> np.ndarray:
    """Train a fresh encoder on this graph's support nodes alone, then label its queries.

    The initialization is seeded by the graph's name, so results do not depend
    on where the graph sits in the test list.
    """
    key = zlib.crc32(g.name.encode("utf-8"))
    theta = init_params(spec, np.random.default_rng([seed, 5, key])).data
    params = {"theta": theta}
    adam = Adam(["theta"], [theta.shape], lr=hp.outer_lr)
    targets = label_targets(split.support_labels, spec.output_dim)
    for _ in range(epochs):
        with Tape() as tape:
            t = tape.watch(params["theta"])
            (gr,) = backward(node_loss(forward(spec, g, t), split.support, targets, multi_label), [t])
        adam.step(params, {"theta": gr.data})
    return decide(forward(spec, g, Tensor(params["theta"])).data[split.query], multi_label)


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    method: str
    seed: int
    accuracy: float
    micro_f1: float
    counts: Counts
    state: MetaState | None = None
    theta: ParamVector | None = None
    film_norm: float = float("nan")
    runtime: float = 0.0
    log: list = field(default_factory=list)
    spec: EncoderSpec | None = None
    hp: HyperParams | None = None

    def checkpoint_state(self) -> MetaState | None:
        """The trained model as a meta state (supervised encoders get a zero graph prior)."""
        if self.state is not None:
            return self.state
        if self.theta is not None:
            return collapse_state(self.theta, self.spec, self.hp, self.seed)
        return None


@dataclass
class BaselineOptions:
    knn_k: int = 1
    transduct_epochs: int = 100

    def __post_init__(self) -> None:
        if self.knn_k < 1:
            raise ConfigError("knn requires k >= 1")
        if self.transduct_epochs < 0:
            raise ConfigError("transduct_epochs must be >= 0")


def method_hyperparams(method: str, hp: HyperParams) -> HyperParams:
    if method in ("meta_gnn", "task_only"):
        return hp.replace(graph_adaptation=False)
    if method == "graph_only":
        return hp.replace(inner_steps=0)
    return hp


def run_method(method: str, splits: Splits, spec: EncoderSpec, hp: HyperParams, seed: int,
               options: BaselineOptions | None = None, induct_theta: ParamVector | None = None) -> RunResult:
    """Train (where applicable) and evaluate one method for one seed."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    options = options or BaselineOptions()
    multi, c = splits.multi_label, splits.num_categories
    test, eps = splits.test.graphs, splits.test_episodes
    t0 = time.perf_counter()
    state = theta = None
    log: list = []
    film_norm = float("nan")

    if method in ("mignn", "meta_gnn", "task_only", "graph_only"):
        mhp = method_hyperparams(method, hp)
        state = train(splits.train, splits.val, spec, mhp, seed)
        log = state.log
        counts = evaluate_state(state, test, eps, spec, mhp, multi)
        if mhp.graph_adaptation and test:
            film_norm = float(np.mean([state.film_norms(g) for g in test]))
    elif method == "transduct":
        counts = evaluate(lambda g, s: transduct_predict(g, s, spec, hp, multi, seed, options.transduct_epochs),
                          test, eps, multi, c)
    else:
        if induct_theta is None:
            theta, log = train_supervised(splits.train, splits.val, spec, hp, seed)
        else:
            theta = induct_theta
        if method == "induct":
            fn = lambda g, s: induct_predict(theta, g, s, spec, multi)
        elif method == "finetune_agf":
            fn = lambda g, s: finetune_predict(theta, g, s, spec, hp, multi)
        else:
            fn = lambda g, s: knn_predict(theta, g, s, spec, multi, options.knn_k)
        counts = evaluate(fn, test, eps, multi, c)
    return RunResult(method, seed, counts.accuracy, counts.micro_f1, counts, state, theta, film_norm,
                     time.perf_counter() - t0, log, spec, hp)


def _run_one(args):
    return run_method(*args)


def run_seeds(method: str, splits: Splits, spec: EncoderSpec, hp: HyperParams, seeds: Sequence[int],
              options: BaselineOptions | None = None, workers: int = 1) -> tuple[Metrics, list[RunResult]]:
    """One run per seed; with ``workers > 1`` seeds run in separate processes.

    Each run is self-contained and seeded, so results are identical either way;
    they are always assembled in the order of ``seeds``.
    """
    jobs = [(method, splits, spec, hp, s, options) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    extra = {}
    norms = [r.film_norm for r in results if not math.isnan(r.film_norm)]
    if norms:
        extra["film_norm"] = float(np.mean(norms))
    metrics = Metrics.from_runs([r.accuracy for r in results], [r.micro_f1 for r in results],
                                sum(r.runtime for r in results), extra)
    return metrics, results


def collapse_state(theta: ParamVector, spec: EncoderSpec, hp: HyperParams, seed: int = 0) -> MetaState:
    """A meta state whose graph prior is identically zero around the given task prior."""
    from ..meta import config_snapshot

    prior = zero_graph_prior(spec.input_dim, spec.size, hp.hyper_hidden)
    return MetaState(theta.copy(), prior, config_snapshot(spec, hp, False, seed), seed)
