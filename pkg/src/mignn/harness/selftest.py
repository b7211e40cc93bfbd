"""Gradient-check suite: every primitive, every encoder, and the full episode objective.

Each check draws fresh random instances and reports the worst relative error
against central finite differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import gradcore as gc
from ..encoders import ARCHS, EncoderSpec, forward, init_params
from ..gradcore import SparseMatrix, Tensor, fd_check, hessian_vector_check
from ..graphdata import EpisodeSplit, Graph
from ..meta import PRIOR_NAMES, HyperParams, episode_objective, init_graph_prior

PRIMITIVE_TOL = 1e-5
SECOND_ORDER_TOL = 1e-4
OBJECTIVE_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    worst: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name:<28} worst {self.worst:.2e} (tol {self.tolerance:.0e}, n={self.instances})"


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return gc.reduce_sum(gc.hadamard(out, Tensor(w)))


def _weights(rng, shape) -> np.ndarray:
    """Projection weights with magnitude in [0.5, 1.5] and random sign.

    Central differences carry an absolute error near 1e-10 here, so a weight
    that happens to be tiny would produce a tiny gradient component whose
    relative error measures round-off rather than the derivative.
    """
    return rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _random_sparse(rng, n: int, m: int) -> SparseMatrix:
    dense = rng.normal(size=(n, m)) * (rng.random((n, m)) < 0.5)
    return SparseMatrix.from_dense(dense)


# Each builder returns (f, x): a scalar function of one tensor and the point to check.
def _primitive_builders() -> dict[str, Callable]:
    def unary(op, shape=(3, 4), positive=False, kink=False):
        def build(rng):
            x = rng.normal(size=shape)
            if positive:
                x = np.abs(x) + 0.5
            if kink:  # finite differences need f smooth at x: stay clear of the kink at 0
                x = np.where(np.abs(x) < 1e-3, np.sign(x + 1e-300) * 1e-3 + x, x)
            w = _weights(rng, np.shape(op(Tensor(x)).data))
            return (lambda t: _weighted(op(t), w)), x
        return build

    def binary(op, shape_a, shape_b, which, positive_b=False):
        def build(rng):
            a = rng.normal(size=shape_a)
            b = rng.normal(size=shape_b)
            if positive_b:
                b = np.abs(b) + 0.5
            w = _weights(rng, op(Tensor(a), Tensor(b)).shape)
            if which == 0:
                return (lambda t: _weighted(op(t, Tensor(b)), w)), a
            return (lambda t: _weighted(op(Tensor(a), t), w)), b
        return build

    def spmm_case(rng):
        s = _random_sparse(rng, 4, 5)
        x = rng.normal(size=(5, 3))
        w = _weights(rng, (4, 3))
        return (lambda t: _weighted(gc.spmm(s, t), w)), x

    def scale_tensor(rng):
        a = rng.normal(size=(3, 3))
        s = np.array(rng.normal())
        w = _weights(rng, (3, 3))
        return (lambda t: _weighted(gc.scale(Tensor(a), t), w)), s

    def take_case(rng):
        idx = rng.integers(0, 5, size=7)
        w = _weights(rng, (7, 3))
        return (lambda t: _weighted(gc.take(t, idx), w)), rng.normal(size=(5, 3))

    def put_case(rng):
        idx = rng.integers(0, 6, size=4)
        w = _weights(rng, (6, 2))
        return (lambda t: _weighted(gc.put(t, idx, (6, 2)), w)), rng.normal(size=(4, 2))

    def ce_case(rng):
        y = rng.integers(0, 4, size=5)
        targets = np.eye(4)[y]
        return (lambda t: gc.softmax_cross_entropy_rows(t, targets)), rng.normal(size=(5, 4))

    def bce_case(rng):
        targets = (rng.random((4, 3)) < 0.5).astype(np.float64)
        return (lambda t: gc.sigmoid_bce(t, targets)), rng.normal(size=(4, 3))

    def l2_case(rng):
        return (lambda t: gc.l2_norm(t)), rng.normal(size=6)

    return {
        "matmul[a]": binary(gc.matmul, (3, 4), (4, 2), 0),
        "matmul[b]": binary(gc.matmul, (3, 4), (4, 2), 1),
        "matmul[vec]": binary(gc.matmul, (4,), (4, 3), 0),
        "transpose": unary(gc.transpose),
        "spmm": spmm_case,
        "add": binary(gc.add, (3, 4), (3, 4), 0),
        "sub[b]": binary(gc.sub, (3, 4), (3, 4), 1),
        "hadamard": binary(gc.hadamard, (3, 4), (3, 4), 1),
        "divide[a]": binary(gc.divide, (3, 4), (3, 4), 0, positive_b=True),
        "divide[b]": binary(gc.divide, (3, 4), (3, 4), 1, positive_b=True),
        "scale[a]": unary(lambda t: gc.scale(t, 1.7)),
        "scale[s]": scale_tensor,
        "leaky_relu": unary(lambda t: gc.leaky_relu(t, 0.01), kink=True),
        "sigmoid": unary(gc.sigmoid),
        "tanh": unary(gc.tanh),
        "reshape": unary(lambda t: gc.reshape(t, (4, 3))),
        "take": take_case,
        "put": put_case,
        "concat_cols": binary(gc.concat_cols, (3, 2), (3, 4), 1),
        "reduce_sum[axis0]": unary(lambda t: gc.reduce_sum(t, 0)),
        "reduce_sum[axis1]": unary(lambda t: gc.reduce_sum(t, 1)),
        "broadcast": unary(lambda t: gc.broadcast(t, (5, 4), 0), shape=(4,)),
        "softmax_rows": unary(gc.softmax_rows),
        "softmax_cross_entropy": ce_case,
        "sigmoid_bce": bce_case,
        "l2_norm": l2_case,
    }


def _second_order_builders() -> dict[str, Callable]:
    def chain(rng):
        w1 = rng.normal(size=(4, 3))
        targets = np.eye(3)[rng.integers(0, 3, size=5)]
        x0 = rng.normal(size=(5, 4))
        f = lambda t: gc.softmax_cross_entropy_rows(gc.matmul(gc.tanh(t), Tensor(w1)), targets)
        return f, x0

    def film_like(rng):
        theta = rng.normal(size=6)
        f = lambda t: gc.l2_norm(gc.add(gc.hadamard(gc.sigmoid(t), Tensor(theta)), t))
        return f, rng.normal(size=6)

    def bce_leaky(rng):
        w = rng.normal(size=(3, 2))
        targets = (rng.random((4, 2)) < 0.5).astype(np.float64)
        f = lambda t: gc.sigmoid_bce(gc.matmul(gc.leaky_relu(t, 0.01), Tensor(w)), targets)
        return f, rng.normal(size=(4, 3))

    def ratio(rng):
        f = lambda t: gc.reduce_sum(gc.divide(gc.softmax_rows(t), gc.add(gc.sigmoid(t), Tensor(np.ones((3, 3))))))
        return f, rng.normal(size=(3, 3))

    return {"tanh-matmul-ce": chain, "film-l2": film_like, "leaky-bce": bce_leaky, "softmax-ratio": ratio}


def _small_graph(rng, n: int = 6, d: int = 3, c: int = 2) -> Graph:
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.45]
    if not pairs:
        pairs = [(0, 1)]
    return Graph(n, np.array(pairs), rng.normal(size=(n, d)), rng.integers(0, c, size=n), np.ones(n, dtype=bool),
                 name="check")


def _encoder_builder(arch: str) -> Callable:
    def build(rng):
        g = _small_graph(rng)
        spec = EncoderSpec(arch, 3, hidden_dim=4, output_dim=2)
        w = _weights(rng, (g.node_count, 2))
        return (lambda t: _weighted(forward(spec, g, t), w)), init_params(spec, rng).data
    return build


def _objective_builder(inner_steps: int, multi_label: bool = False) -> Callable:
    """Objective as a function of one flat vector holding theta and every prior array."""
    def build(rng):
        g = _small_graph(rng)
        if multi_label:
            g = Graph(g.node_count, g.edges, g.features, (rng.random((g.node_count, 2)) < 0.5).astype(np.float64),
                      g.labeled_mask, name="check")
        spec = EncoderSpec("sgc", 3, hidden_dim=4, output_dim=2)
        hp = HyperParams(alpha=0.3, inner_steps=inner_steps, lam=0.1, second_order=True, hyper_hidden=4)
        support = np.array([0, 2, 4])
        query = np.array([1, 3, 5])
        split = EpisodeSplit(support, g.labels[support], query, g.labels[query])
        theta = init_params(spec, rng).data
        prior = init_graph_prior(3, spec.size, 4, rng)
        for k in PRIOR_NAMES:  # the output layers start at zero; move off that degenerate point
            prior[k] = prior[k] + 0.3 * rng.normal(size=prior[k].shape)
        parts = [("theta", theta.shape)] + [(k, prior[k].shape) for k in PRIOR_NAMES]
        x0 = np.concatenate([theta] + [prior[k].reshape(-1) for k in PRIOR_NAMES])

        def f(t: Tensor) -> Tensor:
            pos, vals = 0, {}
            for name, shape in parts:
                size = int(np.prod(shape))
                vals[name] = gc.reshape(gc.take(t, slice(pos, pos + size)), shape)
                pos += size
            res = episode_objective(g, split, vals["theta"], {k: vals[k] for k in PRIOR_NAMES}, hp, spec,
                                    multi_label)
            return res.objective
        return f, x0
    return build


def run_checks(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, build in _primitive_builders().items():
        worst = max(fd_check(*build(rng)) for _ in range(instances))
        results.append(CheckResult(f"primitive {name}", worst, PRIMITIVE_TOL, instances))
    for name, build in _second_order_builders().items():
        worst = 0.0
        for _ in range(instances):
            f, x = build(rng)
            worst = max(worst, hessian_vector_check(f, x, rng.normal(size=x.shape)))
        results.append(CheckResult(f"second-order {name}", worst, SECOND_ORDER_TOL, instances))
    for arch in ARCHS:
        build = _encoder_builder(arch)
        worst = max(fd_check(*build(rng)) for _ in range(instances))
        results.append(CheckResult(f"encoder {arch}", worst, PRIMITIVE_TOL, instances))
    for steps in (0, 1, 2):
        build = _objective_builder(steps)
        worst = max(fd_check(*build(rng)) for _ in range(instances))
        results.append(CheckResult(f"objective steps={steps}", worst, OBJECTIVE_TOL, instances))
    build = _objective_builder(2, multi_label=True)
    worst = max(fd_check(*build(rng)) for _ in range(instances))
    results.append(CheckResult("objective multi-label", worst, OBJECTIVE_TOL, instances))
    return results


def main(instances: int = 20, seed: int = 0, echo=print) -> bool:
    t0 = time.perf_counter()
    results = run_checks(instances, seed)
    for r in results:
        echo(r.line())
    ok = all(r.passed for r in results)
    echo(f"{'PASS' if ok else 'FAIL'} {sum(r.passed for r in results)}/{len(results)} checks "
         f"in {time.perf_counter() - t0:.1f}s")
    return ok
