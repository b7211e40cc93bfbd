import math

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import logsumexp

from conftest import small_graph
from mignn import gradcore as gc
from mignn.encoders import EncoderSpec, ParamVector, forward, init_params
from mignn.errors import ContractError, EpisodeError
from mignn.gradcore import Tape, Tensor, backward
from mignn.graphdata import EpisodeSplit, Graph, partition_graphs, propagated_features, synth_collection
from mignn.harness.selftest import OBJECTIVE_TOL, _objective_builder
from mignn.meta import (PRIOR_NAMES, FilmFactors, HyperParams, MetaState, decide, episode_gradients,
                        episode_objective, film, graph_adapt, graph_embedding, init_graph_prior, init_state,
                        predict, support_loss, task_adapt, train, zero_graph_prior)


def _split(g, support=(0, 2, 4), query=(1, 3, 5)):
    s, q = np.array(support), np.array(query)
    return EpisodeSplit(s, g.labels[s], q, g.labels[q])


def _leaky(x):
    return np.where(x > 0, x, 0.01 * x)


# --- graph embedding and FiLM -----------------------------------------------

def test_embedding_zero_projection():
    out = graph_embedding(np.random.default_rng(0).normal(size=(5, 3)), np.zeros((3, 3))).data
    assert np.all(out == 0.0)


def test_embedding_zero_features():
    assert np.all(graph_embedding(np.zeros((1, 3)), np.eye(3)).data == 0.0)


def test_embedding_two_identical_nodes_doubles():
    x = np.array([[0.3, -1.2, 0.7]])
    w = np.random.default_rng(1).normal(size=(3, 3))
    one = graph_embedding(x, w).data
    two = graph_embedding(np.vstack([x, x]), w).data
    # hand evaluation for the single node
    wx = w @ x[0]
    c = np.tanh(wx)
    a = 1 / (1 + np.exp(-(x[0] @ w @ c)))
    np.testing.assert_allclose(one, a * wx, rtol=1e-14)
    np.testing.assert_allclose(two, 2 * one, rtol=1e-14)


def test_embedding_is_node_order_invariant():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(6, 4)), rng.normal(size=(4, 4))
    np.testing.assert_allclose(graph_embedding(x[::-1], w).data, graph_embedding(x, w).data, rtol=1e-13)


def test_embedding_empty_graph():
    with pytest.raises(ContractError):
        graph_embedding(np.zeros((0, 3)), np.eye(3))


def test_film_zero_and_bias_only():
    prior = zero_graph_prior(3, 5, 4)
    f = film(Tensor(np.ones(3)), prior)
    assert np.all(f.gamma.data == 0) and np.all(f.beta.data == 0)
    prior["gamma_b2"] = np.arange(5.0)
    for g in (np.zeros(3), np.array([4.0, -2.0, 9.0])):
        np.testing.assert_array_equal(film(Tensor(g), prior).gamma.data, np.arange(5.0))


def test_film_matches_direct_evaluation():
    rng = np.random.default_rng(3)
    prior = {k: rng.normal(size=v.shape) for k, v in init_graph_prior(3, 7, 4, rng).items()}
    g = rng.normal(size=3)
    f = film(Tensor(g), prior)
    for head, out in (("gamma", f.gamma.data), ("beta", f.beta.data)):
        expected = _leaky(g @ prior[f"{head}_w1"] + prior[f"{head}_b1"]) @ prior[f"{head}_w2"] + prior[f"{head}_b2"]
        np.testing.assert_allclose(out, expected, rtol=1e-13)


def test_film_dimension_mismatch():
    with pytest.raises(ContractError):
        film(Tensor(np.ones(4)), zero_graph_prior(3, 5, 4))


def test_graph_adapt_examples():
    theta = np.array([2.0, -1.0])
    out = graph_adapt(theta, FilmFactors(Tensor(np.array([0.5, 0.0])), Tensor(np.array([0.0, 3.0]))))
    np.testing.assert_array_equal(out.data, [3.0, 2.0])
    theta = np.random.default_rng(0).normal(size=6)
    zero = Tensor(np.zeros(6))
    assert graph_adapt(theta, FilmFactors(zero, zero)).data.tobytes() == theta.tobytes()
    b = np.arange(6.0)
    np.testing.assert_array_equal(graph_adapt(theta, FilmFactors(Tensor(-np.ones(6)), Tensor(b))).data, b)
    with pytest.raises(ContractError):
        graph_adapt(np.zeros(3), FilmFactors(zero, zero))


# --- task-level adaptation --------------------------------------------------

def _zero_logit_graph(n, c):
    return Graph(n, np.zeros((0, 2)), np.ones((n, 1)), np.zeros(n, dtype=np.int64), np.ones(n, bool))


def test_support_loss_examples():
    g = _zero_logit_graph(3, 7)
    spec = EncoderSpec("sgc", 1, 2, 7)
    zero = np.zeros(spec.size)
    one = EpisodeSplit([0], [0], [1], [0])
    assert support_loss(g, one, zero, spec).item() == pytest.approx(math.log(7), rel=1e-14)
    two = EpisodeSplit([0, 1], [0, 3], [2], [0])
    assert support_loss(g, two, zero, spec).item() == pytest.approx(2 * math.log(7), rel=1e-14)
    spec2 = EncoderSpec("sgc", 1, 2, 2)
    ml = EpisodeSplit([0], [[1.0, 0.0]], [1], [[0.0, 1.0]])
    assert support_loss(g, ml, np.zeros(spec2.size), spec2, True).item() == pytest.approx(2 * math.log(2), rel=1e-14)


def test_task_adapt_identities():
    g = small_graph()
    spec = EncoderSpec("sgc", 3, 4, 2)
    theta = init_params(spec, np.random.default_rng(0)).data
    split = _split(g)
    for hp in (HyperParams(inner_steps=0), HyperParams(alpha=0.0, inner_steps=3)):
        assert task_adapt(g, split, theta, hp, spec).data.tobytes() == theta.tobytes()


def test_task_adapt_quadratic_surrogate():
    hp = HyperParams(alpha=0.25, inner_steps=1)
    out = task_adapt(None, None, np.array([1.0]), hp, None, loss_fn=lambda t: gc.reduce_sum(gc.hadamard(t, t)))
    assert out.data.tolist() == [0.5]


def test_task_adapt_fixed_point():
    hp = HyperParams(alpha=0.3, inner_steps=2)
    out = task_adapt(None, None, np.array([0.0, 0.0]), hp, None, loss_fn=lambda t: gc.reduce_sum(gc.hadamard(t, t)))
    assert np.all(out.data == 0.0)


def test_task_adapt_matches_manual_steps():
    g = small_graph(seed=3)
    spec = EncoderSpec("gcn", 3, 4, 2)
    theta = init_params(spec, np.random.default_rng(1)).data
    split = _split(g)
    hp = HyperParams(alpha=0.2, inner_steps=2)
    t = theta.copy()
    for _ in range(2):
        with Tape() as tape:
            w = tape.watch(t)
            (gr,) = backward(support_loss(g, split, w, spec), [w])
        t = t - 0.2 * gr.data
    np.testing.assert_allclose(task_adapt(g, split, theta, hp, spec).data, t, rtol=1e-13, atol=1e-15)


# --- episode objective ------------------------------------------------------

def test_objective_reduces_to_query_loss():
    g = small_graph(seed=1)
    spec = EncoderSpec("sgc", 3, 4, 2)
    theta = init_params(spec, np.random.default_rng(0)).data
    split = _split(g)
    res = episode_objective(g, split, theta, zero_graph_prior(3, spec.size, 4), HyperParams(lam=0.0, inner_steps=0),
                            spec)
    logits = forward(spec, g, theta).data[split.query]
    ce = -(logits[np.arange(3), split.query_labels] - logsumexp(logits, axis=1)).sum()
    assert res.objective.item() == pytest.approx(ce, rel=1e-13)


def _nonzero_prior(spec, seed=0):
    rng = np.random.default_rng(seed)
    prior = init_graph_prior(spec.input_dim, spec.size, 4, rng)
    return {k: v + 0.3 * rng.normal(size=v.shape) for k, v in prior.items()}


def test_objective_regularizer_is_additive():
    g = small_graph(seed=2)
    spec = EncoderSpec("sgc", 3, 4, 2)
    theta = init_params(spec, np.random.default_rng(0)).data
    prior = _nonzero_prior(spec)
    hp = HyperParams(alpha=0.1, inner_steps=1, lam=0.0, hyper_hidden=4)
    base = episode_objective(g, _split(g), theta, prior, hp, spec)
    big = episode_objective(g, _split(g), theta, prior, hp.replace(lam=1e3), spec)
    norms = np.linalg.norm(base.factors.gamma.data) + np.linalg.norm(base.factors.beta.data)
    assert big.objective.item() - base.objective.item() == pytest.approx(1e3 * norms, rel=1e-12)


def test_objective_gradient_wrt_lambda_is_factor_norm():
    g = small_graph(seed=2)
    spec = EncoderSpec("sgc", 3, 4, 2)
    theta = init_params(spec, np.random.default_rng(0)).data
    prior = _nonzero_prior(spec)
    with Tape() as tape:
        lam = tape.watch(np.array(0.01))
        res = episode_objective(g, _split(g), theta, prior, HyperParams(hyper_hidden=4), spec, lam=lam)
        (glam,) = backward(res.objective, [lam])
    assert glam.item() == res.reg.item() >= 0


def test_objective_needs_query_labels():
    g = small_graph()
    spec = EncoderSpec("sgc", 3, 4, 2)
    split = EpisodeSplit([0, 1], g.labels[[0, 1]], [2, 3])
    with pytest.raises(ContractError):
        episode_objective(g, split, np.zeros(spec.size), zero_graph_prior(3, spec.size, 4), HyperParams(), spec)


@pytest.mark.parametrize("steps", [0, 1, 2])
def test_objective_gradient_against_finite_differences(steps):
    # The bound applies to every component, including those whose size is near the
    # round-off floor of central differences (about 1e-10 absolute for this loss).
    # Such components can exceed the relative bound; the stencil test below is the
    # independent check of the values themselves.
    rng = np.random.default_rng(100 + steps)
    worst = max(gc.fd_check(*_objective_builder(steps)(rng)) for _ in range(5))
    assert worst <= OBJECTIVE_TOL


def test_objective_gradient_matches_high_order_stencil():
    # Independent oracle with a 4th-order five-point stencil: much smaller truncation
    # error, so absolute agreement is checked component by component.
    f, x = _objective_builder(2)(np.random.default_rng(7))
    with Tape() as tape:
        t = tape.watch(x)
        (grad,) = backward(f(t), [t])
    num = np.zeros_like(x)
    for i in range(x.size):
        h = 1e-3 * (1 + abs(x[i]))
        vals = []
        for k in (-2, -1, 1, 2):
            xk = x.copy()
            xk[i] += k * h
            vals.append(float(f(Tensor(xk)).data))
        num[i] = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
    np.testing.assert_allclose(grad.data, num, rtol=1e-5, atol=1e-8)


def test_first_and_second_order_agree_without_inner_steps():
    g = small_graph(seed=5)
    spec = EncoderSpec("sgc", 3, 4, 2)
    params = {"theta": init_params(spec, np.random.default_rng(0)).data, **_nonzero_prior(spec)}
    names = ["theta", *PRIOR_NAMES]
    hp = HyperParams(inner_steps=0, hyper_hidden=4)
    _, _, a = episode_gradients(g, _split(g), params, names, hp, spec, False)
    _, _, b = episode_gradients(g, _split(g), params, names, hp.replace(second_order=False), spec, False)
    for n in names:
        assert a[n].tobytes() == b[n].tobytes()


def test_second_order_differs_from_first_order_with_steps():
    g = small_graph(seed=5)
    spec = EncoderSpec("sgc", 3, 4, 2)
    params = {"theta": init_params(spec, np.random.default_rng(0)).data, **_nonzero_prior(spec)}
    hp = HyperParams(alpha=0.3, inner_steps=2, hyper_hidden=4)
    _, _, a = episode_gradients(g, _split(g), params, ["theta"], hp, spec, False)
    _, _, b = episode_gradients(g, _split(g), params, ["theta"], hp.replace(second_order=False), spec, False)
    assert not np.allclose(a["theta"], b["theta"])


# --- training ---------------------------------------------------------------

@pytest.fixture(scope="module")
def homophilous():
    coll = synth_collection(40, (20, 40), 8, 3, 1.0, seed=0)
    return partition_graphs(coll, seed=0)


def _logistic_oracle(train_graphs, val_graphs):
    """Multinomial logistic regression on twice-propagated features."""
    x = np.vstack([propagated_features(g, 2) for g in train_graphs])
    y = np.concatenate([g.labels for g in train_graphs])
    xb = np.hstack([x, np.ones((len(x), 1))])
    c = int(y.max()) + 1

    def nll(w):
        z = xb @ w.reshape(-1, c)
        return -(z[np.arange(len(y)), y] - logsumexp(z, axis=1)).sum() + 1e-3 * (w ** 2).sum()

    w = minimize(nll, np.zeros(xb.shape[1] * c), method="L-BFGS-B").x.reshape(-1, c)
    xv = np.vstack([propagated_features(g, 2) for g in val_graphs])
    yv = np.concatenate([g.labels for g in val_graphs])
    return float(((np.hstack([xv, np.ones((len(xv), 1))]) @ w).argmax(1) == yv).mean())


def test_training_on_homophilous_graphs(homophilous):
    tr, va, _ = homophilous
    spec = EncoderSpec("sgc", 8, 16, 3)
    state = train(tr, va, spec, HyperParams(max_epochs=100), seed=0)
    acc = state.log[state.best_epoch - 1]["val_accuracy"]
    oracle = _logistic_oracle(tr, va)
    assert oracle >= 0.9
    assert acc >= 0.9 and acc >= oracle - 0.05


def test_training_is_deterministic(homophilous):
    tr, va, _ = homophilous
    spec = EncoderSpec("sgc", 8, 4, 3)
    hp = HyperParams(max_epochs=3, hyper_hidden=4)
    a, b = train(tr, va, spec, hp, seed=1), train(tr, va, spec, hp, seed=1)
    assert a.theta.data.tobytes() == b.theta.data.tobytes()
    for k in PRIOR_NAMES:
        assert a.prior[k].tobytes() == b.prior[k].tobytes()
    assert a.log == b.log and a.best_epoch == b.best_epoch


def test_zero_epochs_returns_initial_state(homophilous):
    tr, va, _ = homophilous
    spec = EncoderSpec("sgc", 8, 4, 3)
    hp = HyperParams(max_epochs=0, hyper_hidden=4)
    state = train(tr, va, spec, hp, seed=2)
    init = init_state(spec, hp, 2)
    assert state.theta.data.tobytes() == init.theta.data.tobytes()
    assert all(state.prior[k].tobytes() == init.prior[k].tobytes() for k in PRIOR_NAMES)
    assert state.best_epoch == 0 and state.log == []


def test_training_rejects_underlabeled_graph():
    g = Graph(3, [[0, 1]], np.ones((3, 2)), [0, 1, 0], [True, False, False], name="thin")
    from mignn.graphdata import GraphCollection
    coll = GraphCollection([g], 2, 2)
    with pytest.raises(ContractError, match="thin"):
        train(coll, coll.subset([]), EncoderSpec("sgc", 2, 4, 2), HyperParams(), seed=0)


# --- prediction -------------------------------------------------------------

def test_decide_tie_breaks_low():
    assert decide(np.array([[0.2, 0.9, 0.9]]), False).tolist() == [1]
    assert decide(np.array([[0.0, -0.1, 2.0]]), True).tolist() == [[1.0, 0.0, 1.0]]


def _state(spec, theta, prior):
    return MetaState(ParamVector(theta, spec.shapes, spec.arch), prior, {}, 0)


def test_identity_collapse_equals_plain_forward():
    g = small_graph(n=8, seed=6)
    spec = EncoderSpec("gcn", 3, 4, 2)
    theta = init_params(spec, np.random.default_rng(4)).data
    state = _state(spec, theta, zero_graph_prior(3, spec.size, 4))
    split = _split(g, (0, 1, 2), (3, 4, 5, 6, 7))
    pred = predict(g, split, state, spec, HyperParams(inner_steps=0, hyper_hidden=4))
    assert pred.tolist() == np.argmax(forward(spec, g, theta).data[split.query], axis=1).tolist()


def test_forced_one_hot_logits_are_perfect():
    # collapsed SGC on one-hot features of an edgeless graph: theta = identity reproduces the labels
    n, c = 6, 3
    labels = np.arange(n) % c
    g = Graph(n, np.zeros((0, 2)), np.eye(c)[labels], labels, np.ones(n, bool))
    spec = EncoderSpec("sgc", c, 4, c, sgc_collapsed=True)
    state = _state(spec, np.eye(c).reshape(-1) * 10, zero_graph_prior(c, spec.size, 4))
    split = _split(g)
    assert np.array_equal(predict(g, split, state, spec, HyperParams(hyper_hidden=4)), split.query_labels)


def test_prediction_matches_step_by_step_reevaluation():
    g = small_graph(n=8, seed=8)
    spec = EncoderSpec("sgc", 3, 4, 2)
    theta = init_params(spec, np.random.default_rng(0)).data
    prior = _nonzero_prior(spec, seed=3)
    hp = HyperParams(alpha=0.4, inner_steps=2, hyper_hidden=4)
    split = _split(g, (0, 1, 2, 3), (4, 5, 6, 7))
    # graph embedding, FiLM and modulation by hand
    x, wa = g.features, prior["att"]
    proj = x @ wa.T
    ctx = np.tanh(proj.mean(axis=0))
    emb = (1 / (1 + np.exp(-(x @ wa @ ctx)))) @ proj
    gamma = _leaky(emb @ prior["gamma_w1"] + prior["gamma_b1"]) @ prior["gamma_w2"] + prior["gamma_b2"]
    beta = _leaky(emb @ prior["beta_w1"] + prior["beta_b1"]) @ prior["beta_w2"] + prior["beta_b2"]
    t = (gamma + 1) * theta + beta
    # inner steps with the closed-form softmax cross-entropy gradient of the two linear maps
    p = propagated_features(g, 2)
    y = np.eye(2)[split.support_labels]
    for _ in range(2):
        w1, w2 = t[:12].reshape(3, 4), t[12:].reshape(4, 2)
        h = p[split.support] @ w1
        z = h @ w2
        sm = np.exp(z - logsumexp(z, axis=1, keepdims=True))
        dz = sm - y
        t = t - 0.4 * np.concatenate([(p[split.support].T @ (dz @ w2.T)).reshape(-1), (h.T @ dz).reshape(-1)])
    expected = np.argmax((p @ t[:12].reshape(3, 4) @ t[12:].reshape(4, 2))[split.query], axis=1)
    state = _state(spec, theta, prior)
    assert predict(g, split, state, spec, hp).tolist() == expected.tolist()


def test_predict_needs_support():
    with pytest.raises(EpisodeError):
        EpisodeSplit([], [], [0], [0])
