"""Meta-inductive node classification: graph-conditioned scale/shift of the
task prior followed by a few gradient steps on the support nodes.

The trained quantities are the task prior ``theta`` (flat encoder weights)
and the graph prior: an attention-pooling projection plus two one-hidden-layer
MLPs mapping a graph embedding to per-parameter scale and shift vectors.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from .encoders import EncoderSpec, ParamVector, forward, init_params, node_loss
from .errors import ContractError, TrainingError
from .gradcore import Tape, Tensor, backward
from .graphdata import EpisodeSplit, Graph, GraphCollection, label_targets, sample_episode
from .optim import Adam

logger = logging.getLogger(__name__)

PRIOR_NAMES = ("att", "gamma_w1", "gamma_b1", "gamma_w2", "gamma_b2",
               "beta_w1", "beta_b1", "beta_w2", "beta_b2")
LEAKY_SLOPE = 0.01


@dataclass
class HyperParams:
    alpha: float = 0.5
    inner_steps: int = 2
    lam: float = 0.001
    outer_lr: float = 0.01
    batch_size: int = 8
    max_epochs: int = 500
    patience: int = 30
    second_order: bool = True
    support_fraction: float = 0.5
    hyper_hidden: int = 32
    graph_adaptation: bool = True
    fixed_episode: bool = False

    def __post_init__(self) -> None:
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ContractError(f"alpha must be a finite non-negative number, got {self.alpha}")
        if self.lam < 0:
            raise ContractError(f"lambda must be >= 0, got {self.lam}")
        if self.inner_steps < 0:
            raise ContractError(f"inner_steps must be >= 0, got {self.inner_steps}")
        if self.batch_size < 1 or self.hyper_hidden < 1:
            raise ContractError("batch_size and hyper_hidden must be positive")
        if not 0 < self.support_fraction < 1:
            raise ContractError("support_fraction must lie in (0, 1)")

    def replace(self, **kw) -> "HyperParams":
        return dataclasses.replace(self, **kw)


@dataclass
class FilmFactors:
    gamma: Tensor
    beta: Tensor


def init_graph_prior(d: int, d_theta: int, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform attention and hidden layers; output layers start at zero so
    the first forward pass leaves the task prior untouched."""

    def glorot(r, c):
        lim = np.sqrt(6.0 / (r + c))
        return rng.uniform(-lim, lim, size=(r, c))

    prior = {"att": glorot(d, d)}
    for head in ("gamma", "beta"):
        prior[f"{head}_w1"] = glorot(d, hidden)
        prior[f"{head}_b1"] = np.zeros(hidden)
        prior[f"{head}_w2"] = np.zeros((hidden, d_theta))
        prior[f"{head}_b2"] = np.zeros(d_theta)
    return prior


def zero_graph_prior(d: int, d_theta: int, hidden: int) -> dict[str, np.ndarray]:
    return {"att": np.zeros((d, d)),
            **{f"{h}_{k}": np.zeros(s) for h in ("gamma", "beta")
               for k, s in (("w1", (d, hidden)), ("b1", (hidden,)), ("w2", (hidden, d_theta)), ("b2", (d_theta,)))}}


# ---------------------------------------------------------------------------
# graph-level adaptation
# ---------------------------------------------------------------------------

def graph_embedding(features: np.ndarray, w_att) -> Tensor:
    """Attention pooling of raw node features.

    context ``c = tanh(mean_v W x_v)``, weights ``a_v = sigmoid(x_v^T W c)``,
    result ``sum_v a_v W x_v``.
    """
    x = Tensor(np.asarray(features, dtype=np.float64))
    w = gc.as_tensor(w_att)
    n = x.shape[0]
    if n == 0:
        raise ContractError("graph embedding of an empty graph")
    projected = gc.matmul(x, gc.transpose(w))
    context = gc.tanh(gc.scale(gc.reduce_sum(projected, 0), 1.0 / n))
    weights = gc.sigmoid(gc.matmul(gc.matmul(x, w), context))
    return gc.matmul(weights, projected)


def _mlp(g: Tensor, w1, b1, w2, b2) -> Tensor:
    h = gc.leaky_relu(gc.add(gc.matmul(g, w1), b1), LEAKY_SLOPE)
    return gc.add(gc.matmul(h, w2), b2)


def film(g_vec: Tensor, prior: dict) -> FilmFactors:
    """Scale and shift vectors from two one-hidden-layer MLPs."""
    p = {k: gc.as_tensor(v) for k, v in prior.items()}
    g_vec = gc.as_tensor(g_vec)
    if p["gamma_w1"].shape[0] != g_vec.shape[0] or p["beta_w1"].shape[0] != g_vec.shape[0]:
        raise ContractError(f"graph embedding of size {g_vec.shape[0]} does not fit the hypernetwork")
    gamma = _mlp(g_vec, p["gamma_w1"], p["gamma_b1"], p["gamma_w2"], p["gamma_b2"])
    beta = _mlp(g_vec, p["beta_w1"], p["beta_b1"], p["beta_w2"], p["beta_b2"])
    return FilmFactors(gamma, beta)


def graph_adapt(theta, factors: FilmFactors) -> Tensor:
    """``(gamma + 1) * theta + beta``, elementwise."""
    theta = gc.as_tensor(theta.data if isinstance(theta, ParamVector) else theta)
    if factors.gamma.shape != theta.shape or factors.beta.shape != theta.shape:
        raise ContractError(f"scale/shift of shape {factors.gamma.shape}/{factors.beta.shape} "
                            f"cannot modulate parameters of shape {theta.shape}")
    one = Tensor(np.ones(theta.shape))
    return gc.add(gc.hadamard(gc.add(factors.gamma, one), theta), factors.beta)


# ---------------------------------------------------------------------------
# task-level adaptation
# ---------------------------------------------------------------------------

def support_loss(g: Graph, split: EpisodeSplit, theta_i, spec: EncoderSpec, multi_label: bool = False) -> Tensor:
    if len(split.support) == 0:
        raise ContractError("support set is empty")
    logits = forward(spec, g, theta_i)
    return node_loss(logits, split.support, label_targets(split.support_labels, spec.output_dim), multi_label)


def query_loss(g: Graph, split: EpisodeSplit, theta, spec: EncoderSpec, multi_label: bool = False,
               logits: Tensor | None = None) -> Tensor:
    if split.query_labels is None:
        raise ContractError("query labels are required for the query loss")
    if len(split.query) == 0:
        raise ContractError("query set is empty")
    if logits is None:
        logits = forward(spec, g, theta)
    return node_loss(logits, split.query, label_targets(split.query_labels, spec.output_dim), multi_label)


def task_adapt(g: Graph | None, split: EpisodeSplit | None, theta_i, hp: HyperParams, spec: EncoderSpec | None,
               multi_label: bool = False, loss_fn: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """``hp.inner_steps`` plain gradient steps on the support loss.

    Inside a recording tape with ``hp.second_order`` the inner gradients stay
    on the tape, so an outer backward sees their dependence on ``theta_i``.
    Otherwise they are constants (first-order approximation).
    """
    theta = gc.as_tensor(theta_i.data if isinstance(theta_i, ParamVector) else theta_i)
    if hp.inner_steps == 0:
        return theta
    if loss_fn is None:
        loss_fn = lambda t: support_loss(g, split, t, spec, multi_label)

    tape = gc._active_tape()
    if theta.node is None or tape is None or not tape.active or theta.node.tape is not tape:
        with Tape() as local:
            t = local.watch(theta)
            for _ in range(hp.inner_steps):
                (gr,) = backward(loss_fn(t), [t])
                t = gc.sub(t, gc.scale(gr, hp.alpha))
        return Tensor(t.data)

    for _ in range(hp.inner_steps):
        (gr,) = backward(loss_fn(theta), [theta], create_graph=hp.second_order)
        theta = gc.sub(theta, gc.scale(gr, hp.alpha))
    return theta


# ---------------------------------------------------------------------------
# meta-objective
# ---------------------------------------------------------------------------

@dataclass
class EpisodeResult:
    objective: Tensor
    query_loss: Tensor
    reg: Tensor
    adapted: Tensor
    logits: Tensor
    factors: FilmFactors | None


def dual_adapt(g: Graph, split: EpisodeSplit, theta, prior, hp: HyperParams, spec: EncoderSpec,
               multi_label: bool = False):
    """Graph-level then task-level adaptation; returns (theta', factors or None)."""
    theta = gc.as_tensor(theta.data if isinstance(theta, ParamVector) else theta)
    factors = None
    if hp.graph_adaptation:
        factors = film(graph_embedding(g.features, prior["att"]), prior)
        theta = graph_adapt(theta, factors)
    return task_adapt(g, split, theta, hp, spec, multi_label), factors


def episode_objective(g: Graph, split: EpisodeSplit, theta, prior, hp: HyperParams, spec: EncoderSpec,
                      multi_label: bool = False, lam=None) -> EpisodeResult:
    """Query loss after dual adaptation plus ``lam * (|gamma|_2 + |beta|_2)``.

    ``lam`` defaults to ``hp.lam``; pass a 0-d tensor to differentiate with respect to it.
    """
    if split.query_labels is None:
        raise ContractError("episode objective needs query labels")
    adapted, factors = dual_adapt(g, split, theta, prior, hp, spec, multi_label)
    logits = forward(spec, g, adapted)
    q = query_loss(g, split, adapted, spec, multi_label, logits=logits)
    if factors is not None:
        reg = gc.add(gc.l2_norm(factors.gamma), gc.l2_norm(factors.beta))
    else:
        reg = Tensor(np.array(0.0))
    lam = hp.lam if lam is None else lam
    penalty = gc.scale(reg, lam) if isinstance(lam, Tensor) else gc.scale(reg, float(lam))
    return EpisodeResult(gc.add(q, penalty), q, reg, adapted, logits, factors)


# ---------------------------------------------------------------------------
# state, training, prediction
# ---------------------------------------------------------------------------

@dataclass
class MetaState:
    theta: ParamVector
    prior: dict
    config: dict
    seed: int
    adam: dict = field(default_factory=lambda: {"t": 0, "m": {}, "v": {}})
    log: list = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)
    best_epoch: int = 0

    def params(self) -> dict[str, np.ndarray]:
        return {"theta": self.theta.data, **self.prior}

    def copy(self) -> "MetaState":
        return copy.deepcopy(self)

    def film_norms(self, g: Graph) -> float:
        """``|gamma|_2 + |beta|_2`` for one graph under the current graph prior."""
        f = film(graph_embedding(g.features, self.prior["att"]), self.prior)
        return float(np.linalg.norm(f.gamma.data) + np.linalg.norm(f.beta.data))


def config_snapshot(spec: EncoderSpec, hp: HyperParams, multi_label: bool, seed: int) -> dict:
    return {"encoder": dataclasses.asdict(spec), "hyperparams": dataclasses.asdict(hp),
            "multi_label": bool(multi_label), "seed": int(seed)}


def spec_from_config(config: dict) -> EncoderSpec:
    return EncoderSpec(**config["encoder"])


def hp_from_config(config: dict) -> HyperParams:
    return HyperParams(**config["hyperparams"])


def init_state(spec: EncoderSpec, hp: HyperParams, seed: int, multi_label: bool = False) -> MetaState:
    rng = np.random.default_rng([seed, 0])
    theta = init_params(spec, rng)
    prior = init_graph_prior(spec.input_dim, spec.size, hp.hyper_hidden, rng)
    return MetaState(theta, prior, config_snapshot(spec, hp, multi_label, seed), seed)


def _trainable(hp: HyperParams) -> list[str]:
    return ["theta"] + (list(PRIOR_NAMES) if hp.graph_adaptation else [])


def episode_gradients(g: Graph, split: EpisodeSplit, params: dict, names: Sequence[str], hp: HyperParams,
                      spec: EncoderSpec, multi_label: bool) -> tuple[float, float, dict[str, np.ndarray]]:
    """Objective value, query loss and gradients for one episode on a private tape."""
    with Tape() as tape:
        leaves = {n: tape.watch(params[n]) if n in names else Tensor(params[n]) for n in params}
        theta = leaves["theta"]
        prior = {k: leaves[k] for k in PRIOR_NAMES}
        res = episode_objective(g, split, theta, prior, hp, spec, multi_label)
        grads = backward(res.objective, [leaves[n] for n in names])
    return float(res.objective.data), float(res.query_loss.data), {n: gr.data for n, gr in zip(names, grads)}


def validate(graphs: Sequence[Graph], episodes: Sequence[EpisodeSplit], params: dict, hp: HyperParams,
             spec: EncoderSpec, multi_label: bool) -> dict:
    """Mean objective, mean query loss and pooled query accuracy on fixed episodes."""
    hp_eval = hp.replace(second_order=False)
    objs, qls, correct, total = [], [], 0, 0
    prior = {k: params[k] for k in PRIOR_NAMES}
    for g, split in zip(graphs, episodes):
        with Tape() as tape:
            theta = tape.watch(params["theta"])
            res = episode_objective(g, split, theta, prior, hp_eval, spec, multi_label)
        objs.append(float(res.objective.data))
        qls.append(float(res.query_loss.data))
        pred = decide(res.logits.data[split.query], multi_label)
        c, t = _count_correct(pred, split.query_labels, multi_label)
        correct += c
        total += t
    if not graphs:
        return {"objective": float("nan"), "query_loss": float("nan"), "accuracy": float("nan")}
    return {"objective": float(np.mean(objs)), "query_loss": float(np.mean(qls)),
            "accuracy": correct / total if total else float("nan")}


def _count_correct(pred: np.ndarray, truth: np.ndarray, multi_label: bool) -> tuple[int, int]:
    truth = np.asarray(truth)
    if multi_label:
        return int((pred == truth).sum()), int(truth.size)
    return int((pred == truth).sum()), int(len(truth))


def train(train_graphs: GraphCollection, val_graphs: GraphCollection, spec: EncoderSpec, hp: HyperParams,
          seed: int, init: MetaState | None = None) -> MetaState:
    """Batched meta-training with Adam and validation-based early stopping.

    Each visit to a training graph draws a fresh support/query split unless
    ``hp.fixed_episode``.  Validation episodes are drawn once from their own
    seeded stream.  Returns the state with the best validation objective.
    """
    graphs = list(train_graphs.graphs)
    if not graphs:
        raise ContractError("no training graphs")
    for g in graphs:
        if g.labeled_mask.sum() < 2:
            raise ContractError(f"training graph {g.name!r} has fewer than 2 labeled nodes")
    multi = train_graphs.multi_label
    state = init.copy() if init is not None else init_state(spec, hp, seed, multi)
    state.config = config_snapshot(spec, hp, multi, seed)
    params = {k: np.array(v) for k, v in state.params().items()}
    names = _trainable(hp)
    adam = Adam(names, [params[n].shape for n in names], lr=hp.outer_lr)

    rng = np.random.default_rng([seed, 1])
    val_rng = np.random.default_rng([seed, 2])
    val_list = list(val_graphs.graphs)
    val_eps = [sample_episode(g, hp.support_fraction, val_rng) for g in val_list]
    fixed = None
    if hp.fixed_episode:
        fixed_rng = np.random.default_rng([seed, 3])
        fixed = [sample_episode(g, hp.support_fraction, fixed_rng) for g in graphs]

    def snapshot(epoch):
        s = MetaState(ParamVector(params["theta"].copy(), spec.shapes, spec.arch),
                      {k: params[k].copy() for k in PRIOR_NAMES}, state.config, seed,
                      adam.state(), list(log), rng.bit_generator.state, epoch)
        return s

    log: list[dict] = []
    best_val = math.inf
    best = None
    if val_list:
        best_val = validate(val_list, val_eps, params, hp, spec, multi)["objective"]
    best = snapshot(0)
    bad = 0
    for epoch in range(1, hp.max_epochs + 1):
        order = rng.permutation(len(graphs))
        losses = []
        for start in range(0, len(order), hp.batch_size):
            total = {n: np.zeros_like(params[n]) for n in names}
            for gi in order[start:start + hp.batch_size]:
                g = graphs[gi]
                split = fixed[gi] if fixed is not None else sample_episode(g, hp.support_fraction, rng)
                obj, _, grads = episode_gradients(g, split, params, names, hp, spec, multi)
                if not math.isfinite(obj) or not all(np.all(np.isfinite(v)) for v in grads.values()):
                    raise TrainingError(f"objective diverged at epoch {epoch} on graph {g.name!r}")
                losses.append(obj)
                for n in names:
                    total[n] = total[n] + grads[n]
            adam.step(params, total)
        entry = {"epoch": epoch, "train_objective": float(np.mean(losses))}
        if val_list:
            v = validate(val_list, val_eps, params, hp, spec, multi)
            entry.update({f"val_{k}": val for k, val in v.items()})
            score = v["objective"]
        else:
            score = entry["train_objective"]
        log.append(entry)
        logger.debug("epoch %d %s", epoch, entry)
        if score < best_val:
            best_val, bad = score, 0
            best = snapshot(epoch)
        else:
            bad += 1
            if bad >= hp.patience:
                break
    best.log = list(log)
    return best


def decide(logits: np.ndarray, multi_label: bool) -> np.ndarray:
    """Argmax with ties to the lowest index, or per-category ``sigmoid >= 0.5``."""
    logits = np.asarray(logits)
    if multi_label:
        return (logits >= 0.0).astype(np.float64)
    return np.argmax(logits, axis=1)


def adapted_theta(g: Graph, split: EpisodeSplit, state: MetaState, spec: EncoderSpec, hp: HyperParams,
                  multi_label: bool = False) -> np.ndarray:
    if len(split.support) == 0:
        raise ContractError("support set is empty")
    with Tape() as tape:
        theta = tape.watch(state.theta.data)
        adapted, _ = dual_adapt(g, split, theta, state.prior, hp.replace(second_order=False), spec, multi_label)
    return adapted.data


def predict(g: Graph, split: EpisodeSplit, state: MetaState, spec: EncoderSpec, hp: HyperParams,
            multi_label: bool = False) -> np.ndarray:
    """Labels for ``split.query`` after adapting on ``split.support``."""
    theta_p = adapted_theta(g, split, state, spec, hp, multi_label)
    logits = forward(spec, g, Tensor(theta_p)).data
    return decide(logits[split.query], multi_label)
