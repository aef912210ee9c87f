"""Learned curvature over time, Ollivier-Ricci edge curvature and the recurrent estimator."""

from __future__ import annotations

import os
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

for _backend in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")
import ot  # noqa: E402

from . import manifold as M  # noqa: E402
from . import tensor as T  # noqa: E402
from .tensor import Tensor  # noqa: E402
from .timeenc import TimeEncoder  # noqa: E402

OT_MAX_SUPPORT = 64
DIST_EPS = 1e-8


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


# -- CurNN ------------------------------------------------------------------------------------


class CurNN:
    """``kappa(t) = m(t)^T W4 m(t)`` with ``m`` a two-layer tanh MLP of ``phi0(t)``."""

    def __init__(self, encoder: TimeEncoder, hidden: int = 32, rng: np.random.Generator | None = None,
                 kappa_max: float = M.KAPPA_MAX, w4_scale: float = 0.1):
        rng = np.random.default_rng(0) if rng is None else rng
        self.encoder = encoder
        self.kappa_max = kappa_max
        d_in = encoder.dim
        self.w_a = T.parameter(_glorot(rng, d_in, hidden), "curnn.w_a")
        self.b_a = T.parameter(np.zeros(hidden), "curnn.b_a")
        self.w_b = T.parameter(_glorot(rng, hidden, hidden), "curnn.w_b")
        self.b_b = T.parameter(np.zeros(hidden), "curnn.b_b")
        self.w4 = T.parameter(rng.normal(scale=w4_scale / hidden, size=(hidden, hidden)), "curnn.w4")

    def parameters(self) -> list[Tensor]:
        return [self.w_a, self.b_a, self.w_b, self.b_b, self.w4]

    def features(self, t) -> Tensor:
        phi = self.encoder.encode_euclidean(t)
        h = T.tanh(T.matmul(phi, self.w_a) + self.b_a)
        return T.tanh(T.matmul(h, self.w_b) + self.b_b)

    def curvature_at(self, t) -> Tensor:
        """Curvature at times ``t``; shape ``(..., 1)`` for ``t`` of shape ``(...)``."""
        m = self.features(t)
        k = (T.matmul(m, self.w4) * m).sum(axis=-1, keepdims=True)
        return T.clamp(k, -self.kappa_max, self.kappa_max)


# -- optimal transport and Ricci curvature ---------------------------------------------------


@dataclass(frozen=True)
class RicciMeasure:
    """Lazy random-walk measure: mass ``lam`` on ``support[0]``, the rest shared by its neighbours."""

    support: tuple[int, ...]
    mass: np.ndarray

    @classmethod
    def lazy(cls, node: int, neighbors: Sequence[int], lam: float = 0.5) -> "RicciMeasure":
        nbrs = [int(v) for v in neighbors if int(v) != int(node)]
        if len(set(nbrs)) != len(nbrs):
            raise ValueError("neighbour list must be distinct")
        if not nbrs:
            return cls((int(node),), np.array([1.0]))
        mass = np.full(len(nbrs) + 1, (1.0 - lam) / len(nbrs))
        mass[0] = lam
        return cls((int(node), *nbrs), mass)

    def __post_init__(self):
        if abs(float(np.sum(self.mass)) - 1.0) > 1e-12:
            raise ValueError("measure masses must sum to 1")
        if len(self.mass) != len(self.support):
            raise ValueError("mass and support lengths differ")


def wasserstein(mu: RicciMeasure, nu: RicciMeasure, cost: np.ndarray) -> float:
    """Exact W1 between two discrete measures (network simplex).

    ``cost[i, j]`` is the ground distance between ``mu.support[i]`` and
    ``nu.support[j]``.
    """
    for m in (mu, nu):
        if len(m.support) > OT_MAX_SUPPORT:
            raise ValueError(f"support of size {len(m.support)} exceeds OT_MAX_SUPPORT={OT_MAX_SUPPORT}; "
                             "subsample the neighbourhood first")
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape != (len(mu.support), len(nu.support)):
        raise ValueError(f"cost matrix shape {cost.shape} does not match supports")
    if np.any(cost < 0) or not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite and nonnegative")
    return float(ot.emd2(mu.mass, nu.mass, cost))


CostFn = Callable[[Sequence[int], Sequence[int]], np.ndarray]


def manifold_cost(points: np.ndarray, kappa: float) -> CostFn:
    """Ground cost from manifold distances between fixed embeddings (rows of ``points``)."""
    pts = np.asarray(points, dtype=np.float64)

    def cost(a, b):
        with T.no_grad():
            x = Tensor(pts[np.asarray(a)][:, None, :])
            y = Tensor(pts[np.asarray(b)][None, :, :])
            return M.distance(x, y, kappa).value[..., 0]

    return cost


def matrix_cost(dist: np.ndarray) -> CostFn:
    """Ground cost read from a precomputed node-by-node distance matrix."""
    dist = np.asarray(dist, dtype=np.float64)
    return lambda a, b: dist[np.ix_(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))]


def hop_cost(adjacency: Sequence[set], max_hops: int = 8) -> CostFn:
    """Ground cost from shortest-path hop counts (truncated BFS)."""

    def bfs(s):
        dist = {s: 0}
        q = deque([s])
        while q:
            u = q.popleft()
            if dist[u] >= max_hops:
                continue
            for w in adjacency[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    q.append(w)
        return dist

    def cost(a, b):
        out = np.empty((len(a), len(b)))
        for i, s in enumerate(a):
            d = bfs(int(s))
            out[i] = [d.get(int(t), max_hops + 1) for t in b]
        return out

    return cost


def ricci_from_measures(mu: RicciMeasure, nu: RicciMeasure, cost_fn: CostFn) -> float | None:
    """``1 - W(mu, nu) / d(u, v)``; None when the endpoints coincide."""
    d_uv = float(cost_fn([mu.support[0]], [nu.support[0]])[0, 0])
    if d_uv <= DIST_EPS:
        warnings.warn(f"edge ({mu.support[0]}, {nu.support[0]}) has coincident endpoints; skipped",
                      RuntimeWarning, stacklevel=2)
        return None
    w = wasserstein(mu, nu, cost_fn(list(mu.support), list(nu.support)))
    return 1.0 - w / d_uv


def ricci_edge(neighbors: Callable[[int], Sequence[int]], u: int, v: int, cost_fn: CostFn,
               lam: float = 0.5) -> float | None:
    """Ollivier-Ricci curvature of the edge ``u - v``.

    ``neighbors(x)`` returns the distinct neighbours of ``x`` (most recent
    first); lists longer than ``OT_MAX_SUPPORT - 1`` are truncated.
    """
    nu_ = list(neighbors(u))[: OT_MAX_SUPPORT - 1]
    nv_ = list(neighbors(v))[: OT_MAX_SUPPORT - 1]
    return ricci_from_measures(RicciMeasure.lazy(u, nu_, lam), RicciMeasure.lazy(v, nv_, lam), cost_fn)


def static_ricci(adjacency: Sequence[set], u: int, v: int, lam: float = 0.5) -> float:
    """Edge curvature of a static graph under the hop metric."""
    return ricci_edge(lambda x: sorted(adjacency[x]), u, v, hop_cost(adjacency), lam)


# -- recurrent estimator --------------------------------------------------------------------------


class GRU:
    """Single-layer gated recurrent unit over padded, masked batches."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.w_x = T.parameter(_glorot(rng, d_in, 3 * hidden), "gru.w_x")
        self.w_h = T.parameter(_glorot(rng, hidden, 3 * hidden), "gru.w_h")
        self.b_x = T.parameter(np.zeros(3 * hidden), "gru.b_x")
        self.b_h = T.parameter(np.zeros(3 * hidden), "gru.b_h")

    def parameters(self) -> list[Tensor]:
        return [self.w_x, self.w_h, self.b_x, self.b_h]

    def zero_(self) -> None:
        for p in self.parameters():
            p.value = np.zeros_like(p.value)

    def run(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """Final hidden state for inputs ``(B, L, d_in)``; masked steps leave ``h`` unchanged.

        The recurrence is one graph node with a hand-written backward pass
        through time.
        """
        x = T.as_tensor(x)
        mask = np.asarray(mask, dtype=bool)
        b, steps = mask.shape
        hd = self.hidden
        xv = x.value
        wx, wh, bx, bh = self.w_x.value, self.w_h.value, self.b_x.value, self.b_h.value
        gx = xv @ wx + bx
        h = np.zeros((b, hd))
        tape = []
        for s in range(steps):
            m = mask[:, s]
            if not m.any():
                continue
            g = gx[:, s, :]
            gh = h @ wh + bh
            z = _sig(g[:, :hd] + gh[:, :hd])
            r = _sig(g[:, hd:2 * hd] + gh[:, hd:2 * hd])
            n = np.tanh(g[:, 2 * hd:] + r * gh[:, 2 * hd:])
            new = (1.0 - z) * n + z * h
            tape.append((s, m, h, z, r, n, gh[:, 2 * hd:]))
            h = np.where(m[:, None], new, h)

        def bw(dh):
            dh = np.array(dh, dtype=np.float64)
            dgx = np.zeros_like(gx)
            dwh = np.zeros_like(wh)
            dbh = np.zeros_like(bh)
            for s, m, hp, z, r, n, ghn in reversed(tape):
                mm = m[:, None]
                dnew = np.where(mm, dh, 0.0)
                dn = dnew * (1.0 - z)
                dz = dnew * (hp - n)
                dan = dn * (1.0 - n * n)
                dar = dan * ghn * r * (1.0 - r)
                daz = dz * z * (1.0 - z)
                dgh = np.concatenate([daz, dar, dan * r], axis=1)
                dgx[:, s, :] = np.concatenate([daz, dar, dan], axis=1)
                dwh += hp.T @ dgh
                dbh += dgh.sum(axis=0)
                dh = np.where(mm, dnew * z + dgh @ wh.T, dh)
            flat = dgx.reshape(-1, dgx.shape[-1])
            dwx = xv.reshape(-1, xv.shape[-1]).T @ flat
            return (dgx @ wx.T, dwx, dwh, flat.sum(axis=0), dbh)

        return T.make_op(h, (x, self.w_x, self.w_h, self.b_x, self.b_h), bw)


def _sig(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


class CurvatureEstimator:
    """GRU over chronological ``[kappa_ij || phi0(t - t_e)]`` with a bilinear read-out."""

    def __init__(self, encoder: TimeEncoder, hidden: int = 32, rng: np.random.Generator | None = None,
                 kappa_max: float = M.KAPPA_MAX):
        rng = np.random.default_rng(1) if rng is None else rng
        self.encoder = encoder
        self.kappa_max = kappa_max
        self.gru = GRU(1 + encoder.dim, hidden, rng)
        self.w5 = T.parameter(rng.normal(scale=0.1 / hidden, size=(hidden, hidden)), "est.w5")

    def parameters(self) -> list[Tensor]:
        return self.gru.parameters() + [self.w5]

    def estimate(self, kappas: np.ndarray, deltas: np.ndarray, mask: np.ndarray) -> Tensor:
        """Batched estimate from padded ``(B, L)`` arrays; returns ``(B, 1)``."""
        kappas = np.asarray(kappas, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ValueError("every sequence needs at least one edge")
        phi = self.encoder.encode_euclidean(np.where(mask, deltas, 0.0))
        x = T.concat([Tensor(np.where(mask, kappas, 0.0)[..., None]), phi], axis=-1)
        h = self.gru.run(x, mask)
        k = (T.matmul(h, self.w5) * h).sum(axis=-1, keepdims=True)
        return T.clamp(k, -self.kappa_max, self.kappa_max)

    def estimate_kappa_hat(self, edges: Sequence[tuple[float, float]], t: float | None = None) -> Tensor:
        """Estimate from one chronological list of ``(kappa_ij, t_e)``.

        Edge times are encoded relative to ``t`` (default: the last edge time).
        """
        if not edges:
            raise ValueError("estimate_kappa_hat needs a non-empty edge list")
        k = np.array([e[0] for e in edges], dtype=np.float64)
        te = np.array([e[1] for e in edges], dtype=np.float64)
        if np.any(np.diff(te) < 0):
            raise ValueError("edges must be sorted by time")
        ref = te[-1] if t is None else float(t)
        return self.estimate(k[None, :], (ref - te)[None, :], np.ones((1, len(k)), dtype=bool))[0]


def curvature_loss(kappa: Tensor, kappa_hat: Tensor) -> Tensor:
    """``sum_t |kappa(t) - kappa_hat(t)|``."""
    return T.abs_(kappa - kappa_hat).sum()


# -- Ricci supervision windows ---------------------------------------------------------------------


@dataclass
class RicciWindow:
    """Edge curvatures of the most recent edges up to a reference time."""

    t: float
    kappas: np.ndarray
    times: np.ndarray
    n_edges_seen: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.kappas)) if len(self.kappas) else 0.0


def distinct_recent_neighbors(index, v: int, t: float, limit: int) -> list[int]:
    """Distinct neighbours of ``v`` through events ``<= t``, most recent first."""
    deg = int(index.degree_before([v], [t])[0])
    if deg == 0:
        return []
    nbr, _, _, mask = index.query([v], [t], deg)
    seen, out = set(), []
    for w in nbr[0][mask[0]].tolist():
        if w not in seen:
            seen.add(w)
            out.append(w)
            if len(out) == limit:
                break
    return out


def ricci_window(graph, t: float, cost_fn: CostFn, length: int = 64, lam: float = 0.5) -> RicciWindow:
    """Curvatures of the latest ``length`` events with timestamp ``<= t``.

    Measures use the temporal neighbourhoods at ``t``; edges with coincident
    endpoints are skipped.
    """
    hi = int(np.searchsorted(graph.ts, t, side="right"))
    lo = max(0, hi - length)
    cache: dict[int, list[int]] = {}

    def nbrs(x):
        if x not in cache:
            cache[x] = distinct_recent_neighbors(graph.index, x, t, OT_MAX_SUPPORT - 1)
        return cache[x]

    ks, ts = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for e in range(lo, hi):
            k = ricci_edge(nbrs, int(graph.src[e]), int(graph.dst[e]), cost_fn, lam)
            if k is not None:
                ks.append(k)
                ts.append(float(graph.ts[e]))
    return RicciWindow(float(t), np.array(ks), np.array(ts), hi)


def pad_windows(windows: Sequence[RicciWindow]):
    """Stack windows into right-padded ``(kappas, deltas, mask)`` arrays."""
    width = max(1, max(len(w.kappas) for w in windows))
    b = len(windows)
    kap = np.zeros((b, width))
    dlt = np.zeros((b, width))
    mask = np.zeros((b, width), dtype=bool)
    for i, w in enumerate(windows):
        n = len(w.kappas)
        kap[i, :n] = w.kappas
        dlt[i, :n] = w.t - w.times
        mask[i, :n] = True
    return kap, dlt, mask
