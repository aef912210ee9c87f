import hashlib
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riemtg import data as D
from riemtg import eval as E
from riemtg import manifold as M
from riemtg import rgnn as R
from riemtg import ssl as S
from riemtg import tensor as T
from riemtg.tensor import Tensor


class FixedModel:
    """Embeds every node at a fixed origin tangent, whatever the time."""

    def __init__(self, tangents, kappa=-1.0):
        self.tangents = np.asarray(tangents, dtype=np.float64)
        self.kappa = kappa

    def encode(self, graph, nodes, times):
        nodes = np.asarray(nodes)
        return R.Embedding(nodes, np.asarray(times), Tensor(self.tangents[nodes]),
                           Tensor(np.full((len(nodes), 1), self.kappa)))


def two_cliques(repeats=6):
    """Nodes 0-3 and 4-7 form two cliques whose edges recur ``repeats`` times."""
    pairs = [p for c in (range(4), range(4, 8)) for p in itertools.combinations(c, 2)]
    src, dst = zip(*(pairs * repeats))
    ts = np.arange(len(src), dtype=np.float64)
    labels = (np.array(src) >= 4).astype(int)
    return D.from_events(8, src, dst, ts, features=np.eye(8), labels=labels)


def checksum(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.value.tobytes())
    return h.hexdigest()


# -- decoder ----------------------------------------------------------------------------------


def test_fermi_dirac_reference_values():
    fd = E.FermiDirac()
    assert abs(fd(0.0) - 1.0 / (1.0 + math.exp(-2.0))) < 1e-15
    assert abs(fd(0.0) - 0.8808) < 1e-4
    assert abs(fd(math.sqrt(2.0)) - 0.5) < 1e-15
    assert fd(40.0) < 1e-300 or fd(40.0) == 0.0
    with pytest.raises(ValueError):
        E.FermiDirac(temp=0.0)


def test_fermi_dirac_is_monotone_decreasing():
    rng = np.random.default_rng(0)
    d = rng.uniform(0, 3, size=(1000, 2))
    fd = E.FermiDirac(r=1.5, temp=0.7)
    p = fd(d)
    assert np.all((p[:, 0] > p[:, 1]) == (d[:, 0] < d[:, 1]))
    lo = fd.log_odds(d)
    assert np.all((lo[:, 0] > lo[:, 1]) == (d[:, 0] < d[:, 1]))


def test_fermi_dirac_tensor_path_matches_numpy():
    d = np.linspace(0, 4, 9)
    fd = E.FermiDirac()
    assert np.allclose(fd(Tensor(d)).value, fd(d), rtol=1e-13)


@pytest.mark.parametrize("kappa", [-1.0, 0.7])
def test_link_probability_at_coincident_points(kappa):
    h = M.expmap0(Tensor(np.array([[0.3, -0.1, 0.2]])), kappa)
    assert abs(E.link_probability(h, h, kappa).item() - 0.8807970779778823) < 1e-12


# -- centroid head ---------------------------------------------------------------------------


@pytest.mark.parametrize("kappa", [-0.8, 0.5])
def test_centroid_encoding_contract(kappa):
    head = E.CentroidHead(d=6, n_centroids=5, seed=1)
    mu = head.points(kappa)
    M.check_point(mu, kappa, tol=1e-7)
    xi = E.centroid_encode(mu, head, kappa).value
    assert np.allclose(np.diag(xi), 0.0, atol=1e-7)
    rng = np.random.default_rng(2)
    h = M.expmap0(Tensor(rng.normal(size=(7, 6)) * 0.4), kappa)
    xi = E.centroid_encode(h, head, kappa).value
    assert np.all(xi >= 0)
    perm = rng.permutation(5)
    head_p = E.CentroidHead(d=6, n_centroids=5, seed=1)
    head_p.tangent.value = head.tangent.value[perm]
    assert np.allclose(E.centroid_encode(h, head_p, kappa).value, xi[:, perm], atol=1e-13)


@pytest.mark.parametrize("kappa", [-1.2, 0.4])
def test_chart_encoding_agrees_with_ambient(kappa):
    head = E.CentroidHead(d=4, n_centroids=3, seed=3)
    rng = np.random.default_rng(3)
    tan = rng.normal(size=(6, 4)) * 0.5
    chart = M.ball_exp0(Tensor(tan), kappa)
    amb = M.expmap0(Tensor(tan), kappa)
    a = E.chart_centroid_encode(chart, np.full((6, 1), kappa), head).value
    b = E.centroid_encode(amb, head, kappa).value
    assert np.max(np.abs(a - b)) < 1e-10


def test_zero_logistic_weights_give_one_half():
    head = E.CentroidHead(d=4, n_centroids=3)
    h = M.expmap0(Tensor(np.random.default_rng(0).normal(size=(5, 4))), -1.0)
    assert np.allclose(E.classify(h, head, -1.0).value, 0.5)


def test_head_fits_separable_data():
    rng = np.random.default_rng(4)
    kappa = -1.0
    y = np.r_[np.zeros(30), np.ones(30)].astype(bool)
    tan = rng.normal(size=(60, 4)) * 0.2
    tan[y, 0] += 1.5
    tan[~y, 0] -= 1.5
    chart = M.ball_exp0(Tensor(tan), kappa).value
    kap = np.full((60, 1), kappa)
    head = E.fit_head(chart, kap, y, n_centroids=4, seed=0)
    assert E.auc(E.predict_head(head, chart, kap), y) > 0.99


# -- metric ----------------------------------------------------------------------------------


def test_auc_reference_cases():
    assert E.auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert E.auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert E.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert E.auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(E.EvalError):
        E.auc([0.1, 0.2], [1, 1])


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
@settings(max_examples=100, deadline=None)
def test_auc_matches_pair_enumeration(rows):
    scores = [float(s) for s, _ in rows]
    labels = [y for _, y in rows]
    if len(set(labels)) < 2:
        with pytest.raises(E.EvalError):
            E.auc(scores, labels)
        return
    assert abs(E.auc(scores, labels) - brute_auc(scores, labels)) < 1e-12


def test_auc_invariant_under_increasing_transform():
    rng = np.random.default_rng(5)
    s = rng.normal(size=200)
    y = rng.random(200) < 0.4
    assert E.auc(s, y) == E.auc(np.exp(s), y)


def test_random_scorer_is_near_one_half():
    rng = np.random.default_rng(6)
    a = E.auc(rng.random(2000), np.r_[np.ones(1000), np.zeros(1000)])
    assert abs(a - 0.5) < 0.05


# -- protocols -------------------------------------------------------------------------------


def test_negatives_were_never_linked_before_the_event():
    g = D.two_community(20, 300, seed=1)
    sp = D.split(g)
    negs = E.sample_negatives(g, sp.test, np.random.default_rng(0))
    for e, w in zip(sp.test, negs):
        if w < 0:
            continue
        u, t = g.src[e], g.ts[e]
        assert w != u
        before = g.ts <= t
        linked = ((g.src == u) & (g.dst == w)) | ((g.src == w) & (g.dst == u))
        assert not np.any(linked & before)


def test_perfect_scorer_gives_auc_one():
    g = two_cliques()
    sp = D.split(g)
    tangents = np.zeros((8, 3))
    tangents[:4, 0], tangents[4:, 0] = 1.0, -1.0
    report = E.link_eval(g, sp, FixedModel(tangents), n_runs=4)
    assert report.auc_mean == 1.0 and report.auc_ci95 == 0.0 and report.n_runs == 4


def test_link_eval_is_repeatable_and_formats_a_record():
    g = D.two_community(20, 300, seed=2)
    sp = D.split(g)
    model = FixedModel(np.random.default_rng(0).normal(size=(20, 4)) * 0.5)
    a = E.link_eval(g, sp, model, n_runs=3, seed=5)
    b = E.link_eval(g, sp, model, n_runs=3, seed=5)
    assert a == b
    lines = a.format().splitlines()
    assert lines[0] == "task,split,auc_mean,auc_ci95,n_runs,seed"
    assert lines[1].startswith("link,transductive,") and lines[1].endswith(",3,5")


def test_inductive_link_eval_requires_held_out_endpoints():
    g = D.two_community(40, 600, seed=3)
    sp = D.split(g, D.SplitSpec(mode="inductive", seed=1))
    model = FixedModel(np.random.default_rng(1).normal(size=(40, 4)) * 0.5)
    report = E.link_eval(g, sp, model, n_runs=2)
    assert report.split == "inductive"
    bad = D.Split(sp.train, sp.val, np.setdiff1d(D.split(g).test, sp.test)[:5], sp.held_out, "inductive")
    with pytest.raises(E.EvalError):
        E.link_eval(g, bad, model)


def test_empty_test_partition_is_an_error():
    g = D.two_community(20, 300, seed=2)
    sp = D.split(g)
    empty = D.Split(sp.train, sp.val, np.array([], dtype=np.int64), sp.held_out, sp.mode)
    with pytest.raises(E.EvalError):
        E.link_eval(g, empty, FixedModel(np.zeros((20, 2))))


def test_node_eval_needs_labels():
    g = D.tree_growth(20)
    sp = D.split(g)
    with pytest.raises(E.EvalError):
        E.node_eval(g, sp, FixedModel(np.zeros((20, 2))))


def test_node_eval_separable_communities():
    g = two_cliques(repeats=8)
    sp = D.split(g)
    tangents = np.zeros((8, 3))
    tangents[:4, 0], tangents[4:, 0] = 0.8, -0.8
    tangents += np.random.default_rng(0).normal(size=(8, 3)) * 0.05
    report = E.node_eval(g, sp, FixedModel(tangents), n_runs=2, epochs=150)
    assert report.task == "node" and report.auc_mean > 0.99


def test_evaluation_leaves_the_model_untouched():
    g = D.two_community(16, 200, seed=4)
    sp = D.split(g)
    lo, hi = g.time_span
    model = S.SelfRGNN(g.feature_dim, d=8, k_max=5, d_c=8, d_g=8, t_max=(hi - lo) / g.mean_gap(),
                       time_scale=g.mean_gap(), seed=0)
    before = checksum(model.parameters())
    E.link_eval(g, sp, model, n_runs=2)
    E.node_eval(g, sp, model, n_runs=1, epochs=20)
    assert checksum(model.parameters()) == before
    assert all(p.grad is None for p in model.parameters())
