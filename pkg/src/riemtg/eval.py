"""Downstream evaluation on frozen embeddings: link prediction and node classification."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import manifold as M
from . import tensor as T
from .tensor import Tensor

REPORT_COLUMNS = ("task", "split", "auc_mean", "auc_ci95", "n_runs", "seed")


class EvalError(ValueError):
    """Evaluation inputs that cannot produce a metric."""


# -- decoders and heads ---------------------------------------------------------------------


@dataclass(frozen=True)
class FermiDirac:
    """``1 / (exp((d^2 - r) / temp) + 1)``."""

    r: float = 2.0
    temp: float = 1.0

    def __post_init__(self):
        if not self.temp > 0:
            raise ValueError("temp must be positive")

    def __call__(self, dist):
        if isinstance(dist, Tensor):
            return T.sigmoid((self.r - dist * dist) / self.temp)
        d = np.asarray(dist, dtype=np.float64)
        return 0.5 * (1.0 + np.tanh(0.5 * self.log_odds(d)))

    def log_odds(self, dist) -> np.ndarray:
        """``(r - d^2) / temp``: the probability's logit, strictly monotone and free of saturation."""
        d = np.asarray(dist, dtype=np.float64)
        return (self.r - d * d) / self.temp


def link_probability(h_i, h_j, kappa, decoder: FermiDirac = FermiDirac()) -> Tensor:
    """Link probability of two ambient points at the shared curvature ``kappa``."""
    return decoder(M.distance(h_i, h_j, kappa)[..., 0])


class CentroidHead:
    """``C`` learnable centroids plus a logistic layer over distances to them.

    Centroids are stored as origin tangents, so at any curvature they are the
    manifold points ``exp_O(tangent)``.
    """

    def __init__(self, d: int, n_centroids: int = 16, seed: int = 0, sigma: float = 0.1):
        rng = np.random.default_rng(seed)
        self.tangent = T.parameter(rng.normal(scale=sigma, size=(n_centroids, d)), "centroids")
        self.w = T.parameter(np.zeros(n_centroids), "logistic_w")
        self.bias = T.parameter(np.zeros(()), "bias")

    @property
    def n_centroids(self) -> int:
        return self.tangent.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.tangent, self.w, self.bias]

    def points(self, kappa) -> Tensor:
        return M.expmap0(self.tangent, kappa)

    def logits(self, xi: Tensor) -> Tensor:
        return T.matmul(xi, self.w) + self.bias


def centroid_encode(h, head: CentroidHead, kappa) -> Tensor:
    """Distances from ambient points ``h (n, d+1)`` to every centroid, shape ``(n, C)``."""
    h = T.as_tensor(h)
    mu = head.points(kappa)
    return M.distance(h.reshape(h.shape[0], 1, -1), mu.reshape(1, *mu.shape), kappa)[..., 0]


def chart_centroid_encode(c, kappa, head: CentroidHead) -> Tensor:
    """:func:`centroid_encode` for chart coordinates ``c (n, d)`` with one curvature per row."""
    c = T.as_tensor(c)
    n, d = c.shape
    k3 = T.as_tensor(kappa).reshape(n, 1, 1)
    mu = M.ball_exp0(head.tangent.reshape(1, head.n_centroids, d), k3)
    return M.ball_distance(c.reshape(n, 1, d), mu, k3)[..., 0]


def classify(h, head: CentroidHead, kappa) -> Tensor:
    """Class probability of ambient points ``h``."""
    return T.sigmoid(head.logits(centroid_encode(h, head, kappa)))


def _bce(logits: Tensor, y: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with logits, ``softplus(z) - y z``."""
    zero = Tensor(np.zeros(logits.shape))
    soft = T.stack([zero, logits], axis=-1).logsumexp(axis=-1)
    return (soft - logits * Tensor(y.astype(np.float64))).mean()


def fit_head(chart, kappa, y, n_centroids: int = 16, seed: int = 0, lr: float = 1e-2,
             epochs: int = 300) -> CentroidHead:
    """Train a :class:`CentroidHead` on frozen chart embeddings with binary labels ``y``."""
    chart = Tensor(np.asarray(chart, dtype=np.float64))
    kappa = Tensor(np.asarray(kappa, dtype=np.float64).reshape(-1, 1))
    y = np.asarray(y)
    head = CentroidHead(chart.shape[1], n_centroids, seed=seed)
    opt = T.Adam(head.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss = _bce(head.logits(chart_centroid_encode(chart, kappa, head)), y)
        loss.backward()
        opt.step()
    return head


def predict_head(head: CentroidHead, chart, kappa) -> np.ndarray:
    with T.no_grad():
        xi = chart_centroid_encode(Tensor(np.asarray(chart, dtype=np.float64)),
                                   Tensor(np.asarray(kappa, dtype=np.float64).reshape(-1, 1)), head)
        return T.sigmoid(head.logits(xi)).value


# -- metric ---------------------------------------------------------------------------------


def auc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic, ties counted half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if len(s) != len(y):
        raise EvalError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvalError("AUC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    # average ranks over tied blocks
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class EvalReport:
    task: str
    split: str
    auc_mean: float
    auc_ci95: float
    n_runs: int
    seed: int
    aucs: tuple[float, ...] = ()

    def format(self) -> str:
        row = [self.task, self.split, repr(self.auc_mean), repr(self.auc_ci95), str(self.n_runs),
               str(self.seed)]
        return ",".join(REPORT_COLUMNS) + "\n" + ",".join(row) + "\n"


def _summarise(task, split, aucs, seed) -> EvalReport:
    a = np.asarray(aucs, dtype=np.float64)
    ci = 1.96 * a.std(ddof=1) / math.sqrt(len(a)) if len(a) > 1 else 0.0
    return EvalReport(task, split, float(a.mean()), float(ci), len(a), int(seed), tuple(a.tolist()))


# -- protocols ------------------------------------------------------------------------------


def frozen_embeddings(model, graph, nodes, times) -> tuple[np.ndarray, np.ndarray]:
    """Chart coordinates ``(n, d)`` and curvatures ``(n, 1)``, detached from the model."""
    with T.no_grad():
        emb = model.encode(graph, np.asarray(nodes, dtype=np.int64), np.asarray(times, dtype=np.float64))
        kap = np.broadcast_to(emb.kappa.value, (len(emb.nodes), 1)).copy()
        chart = M.ball_exp0(emb.tangent, Tensor(kap)).value
    return chart, kap


def sample_negatives(graph, events: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For each event ``(u, v, t)`` a uniform node never linked to ``u`` up to ``t`` (``-1`` if none)."""
    n = graph.n_nodes
    linked = np.zeros((n, n), dtype=bool)
    linked[np.arange(n), np.arange(n)] = True
    out = np.full(len(events), -1, dtype=np.int64)
    order = np.argsort(events, kind="stable")
    done = 0
    for pos in order:
        e = events[pos]
        t = graph.ts[e]
        hi = int(np.searchsorted(graph.ts, t, side="right"))
        linked[graph.src[done:hi], graph.dst[done:hi]] = True
        linked[graph.dst[done:hi], graph.src[done:hi]] = True
        done = max(done, hi)
        free = np.flatnonzero(~linked[graph.src[e]])
        if len(free):
            out[pos] = free[int(rng.integers(len(free)))]
    return out


def link_eval(graph, split, model, n_runs: int = 10, seed: int = 0,
              decoder: FermiDirac = FermiDirac()) -> EvalReport:
    """Test-edge link AUC against one negative per positive, repeated over ``n_runs`` samplings.

    Each pair is encoded just before its event time, so the edge itself is unseen.
    Pairs are ranked by the decoder's log-odds, which orders them exactly like the
    probability but cannot collapse far pairs into ties at 0.
    """
    test = np.asarray(split.test, dtype=np.int64)
    if len(test) == 0:
        raise EvalError("empty test partition")
    if n_runs < 1:
        raise EvalError("need at least one run")
    if split.mode == "inductive":
        held = np.asarray(split.held_out)
        ok = np.isin(graph.src[test], held) | np.isin(graph.dst[test], held)
        if not ok.all():
            raise EvalError("inductive test edge without a held-out endpoint")
    u, v = graph.src[test], graph.dst[test]
    tq = np.nextafter(graph.ts[test], -np.inf)
    negs = [sample_negatives(graph, test, np.random.default_rng([seed, r])) for r in range(n_runs)]
    nodes = np.concatenate([u, v] + negs)
    times = np.tile(tq, 2 + n_runs)
    valid = nodes >= 0
    c, k = frozen_embeddings(model, graph, nodes[valid], times[valid])
    chart = np.zeros((len(nodes), c.shape[1]))
    kap = np.zeros((len(nodes), 1))
    chart[valid], kap[valid] = c, k
    m = len(test)

    def prob(a, b):
        with T.no_grad():
            d = M.ball_distance(Tensor(chart[a]), Tensor(chart[b]), Tensor(kap[a])).value[:, 0]
        return decoder.log_odds(d)

    p_pos = prob(np.arange(m), np.arange(m, 2 * m))
    aucs = []
    for r in range(n_runs):
        rows = np.arange((2 + r) * m, (3 + r) * m)
        keep = valid[rows]
        p_neg = prob(np.arange(m)[keep], rows[keep])
        aucs.append(auc(np.r_[p_pos[keep], p_neg], np.r_[np.ones(keep.sum()), np.zeros(keep.sum())]))
    return _summarise("link", split.mode, aucs, seed)


def node_eval(graph, split, model, n_runs: int = 5, seed: int = 0, n_centroids: int = 16,
              epochs: int = 300, lr: float = 1e-2) -> EvalReport:
    """Event-level node classification: embed ``src`` at each event time, fit on train, score on test.

    Several classes are handled one-vs-rest with the macro-averaged AUC.
    """
    if graph.labels is None:
        raise EvalError("node classification needs labels")
    train = np.asarray(split.train, dtype=np.int64)
    test = np.asarray(split.test, dtype=np.int64)
    if len(test) == 0 or len(train) == 0:
        raise EvalError("empty train or test partition")
    classes = np.unique(graph.labels[train])
    if len(classes) < 2:
        raise EvalError("training labels contain a single class")
    ev = np.concatenate([train, test])
    chart, kap = frozen_embeddings(model, graph, graph.src[ev], graph.ts[ev])
    n_tr = len(train)
    y_tr, y_te = graph.labels[train], graph.labels[test]
    binary = len(classes) == 2
    targets = classes[1:] if binary else classes
    aucs = []
    for r in range(n_runs):
        per_class = []
        for c in targets:
            if len(np.unique(y_te == c)) < 2:
                continue
            head = fit_head(chart[:n_tr], kap[:n_tr], y_tr == c, n_centroids, seed=seed * 1000 + r,
                            lr=lr, epochs=epochs)
            per_class.append(auc(predict_head(head, chart[n_tr:], kap[n_tr:]), y_te == c))
        if not per_class:
            raise EvalError("test labels contain a single class")
        aucs.append(float(np.mean(per_class)))
    return _summarise("node", split.mode, aucs, seed)
