"""Curvature-varying temporal attention encoder.

Every embedding is stored as its tangent vector at the origin together with
the curvature of the time it belongs to; the manifold point is
``exp_O^kappa(tangent)``.  Moving an embedding to another curvature is then
``exp_O^kappa'(log_O^kappa(h)) = exp_O^kappa'(tangent)``, so neighbour
embeddings computed at their own event times can be re-used at the query
time's curvature for free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import manifold as M
from . import tensor as T
from .tensor import Tensor
from .timeenc import TimeEncoder

KappaFn = Callable[[np.ndarray], Tensor]


class CausalityError(ValueError):
    """A message would flow from the future into the past."""


def _glorot(rng, fan_out, fan_in):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


def constant_kappa(value: float) -> KappaFn:
    def fn(times):
        return Tensor(np.full((len(np.atleast_1d(times)), 1), float(value)))
    return fn


@dataclass
class Embedding:
    """Embeddings of ``(node, time)`` queries: origin tangents plus curvature per row."""

    nodes: np.ndarray
    times: np.ndarray
    tangent: Tensor
    kappa: Tensor

    @property
    def points(self) -> Tensor:
        """Ambient coordinates; near-zero curvatures are nudged off the flat case."""
        return self.at(self.kappa)

    def at(self, kappa) -> Tensor:
        """Manifold points re-expressed at curvature ``kappa`` (scalar or per row)."""
        k = M.kappa_tensor(kappa)
        if not np.all(np.abs(k.value) < M.KAPPA_EPS):
            k = M.nudge(k)
        return M.expmap0(self.tangent, k)


class RgnnLayer:
    """One temporal attention layer; ``W1``-``W3`` act on origin tangents."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.d = d
        self.w1 = T.parameter(_glorot(rng, d, d), "w1")
        self.w2 = T.parameter(_glorot(rng, d, d), "w2")
        self.w3 = T.parameter(_glorot(rng, d, d), "w3")
        self.theta = T.parameter(rng.normal(scale=1.0 / np.sqrt(2 * d), size=2 * d), "theta")

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.w2, self.w3, self.theta]

    def message(self, h_tan: Tensor, phi: Tensor, kappa) -> Tensor:
        """``(W1 (x) h) (+) (W2 (x) phi_kappa(dt))`` in chart coordinates.

        ``h_tan`` is the origin tangent of ``h`` and ``phi`` the Euclidean time
        encoding, which is the origin tangent of its lift while ``kappa < pi^2``.
        """
        a = M.ball_exp0(T.matmul(h_tan, self.w1.T), kappa)
        b = M.ball_exp0(T.matmul(phi, self.w2.T), kappa)
        return M.mobius_add(a, b, kappa)

    def temporal_message(self, h_tan: Tensor, dt, encoder: TimeEncoder, kappa) -> Tensor:
        """Message of a neighbour with origin tangent ``h_tan`` seen ``dt`` ago."""
        dt = np.asarray(dt, dtype=np.float64)
        if np.any(dt < 0):
            raise CausalityError("negative time delta: message from the future")
        return self.message(h_tan, encoder.encode_euclidean(dt), kappa)

    def attention_logits(self, m_self: Tensor, m_nbr: Tensor, kappa_self, kappa_nbr) -> Tensor:
        d = self.d
        p_self = T.matmul(M.ball_log0(m_self, kappa_self), self.w3.T)
        p_nbr = T.matmul(M.ball_log0(m_nbr, kappa_nbr), self.w3.T)
        s = T.matmul(p_self, self.theta[:d])[..., None] + T.matmul(p_nbr, self.theta[d:])
        return T.sigmoid(s)

    def aggregate(self, h: Tensor, m_nbr: Tensor, alpha: Tensor, kappa: Tensor) -> Tensor:
        """``exp_h(sum_j alpha_j log_h m_j)`` with ``h (Q, d)``, ``m_nbr (Q, K, d)``."""
        q = h.shape[0]
        v = M.ball_log(h.reshape(q, 1, self.d), m_nbr, kappa.reshape(q, 1, 1))
        step = (v * alpha[..., None]).sum(axis=1)
        return M.ball_exp(h, step, kappa)

    def forward(self, self_tan: Tensor, nbr_tan: Tensor, phi_nbr: Tensor, phi_zero: Tensor,
                mask: np.ndarray, kappa: Tensor) -> tuple[Tensor, Tensor]:
        """Layer output (origin tangents) and attention weights on a padded neighbourhood.

        Shapes: ``self_tan (Q, d)``, ``nbr_tan (Q, K, d)``, ``phi_nbr (Q, K, d)``,
        ``phi_zero (d,)``, ``mask (Q, K)``, ``kappa (Q, 1)``.
        """
        q, k = mask.shape
        rows, cols = np.nonzero(mask)
        flat = rows * k + cols
        nbr = T.take(nbr_tan.reshape(q * k, self.d), flat, axis=0)
        phi = T.take(T.as_tensor(phi_nbr).reshape(q * k, self.d), flat, axis=0)
        out, alpha = self.forward_pairs(self_tan, nbr, phi, phi_zero, rows, kappa)
        return out, T.segment_sum(alpha, flat, q * k).reshape(q, k)

    def forward_pairs(self, self_tan: Tensor, nbr_tan: Tensor, phi_nbr: Tensor, phi_zero: Tensor,
                      rows: np.ndarray, kappa: Tensor) -> tuple[Tensor, Tensor]:
        """Layer on a ragged neighbourhood: pair ``p`` links neighbour ``p`` to query ``rows[p]``.

        Shapes: ``self_tan (Q, d)``, ``nbr_tan (P, d)``, ``phi_nbr (P, d)``,
        ``rows (P,)`` sorted, ``kappa (Q, 1)``.  Returns outputs and per-pair weights.
        A query without pairs keeps ``h``, since ``exp_h(0) = h``.
        """
        q, d = self_tan.shape
        h = M.ball_exp0(self_tan, kappa)
        if len(rows) == 0:
            return T.relu(M.ball_log0(h, kappa)), Tensor(np.zeros(0))
        kp = T.take(kappa, rows, axis=0)
        m_self = self.message(self_tan, phi_zero.reshape(1, d), kappa)
        m_nbr = self.message(nbr_tan, phi_nbr, kp)
        p_self = T.matmul(T.matmul(M.ball_log0(m_self, kappa), self.w3.T), self.theta[:d])
        p_nbr = T.matmul(T.matmul(M.ball_log0(m_nbr, kp), self.w3.T), self.theta[d:])
        alpha = segment_softmax(T.sigmoid(T.take(p_self, rows, axis=0) + p_nbr), rows, q)
        v = M.ball_log(T.take(h, rows, axis=0), m_nbr, kp)
        step = T.segment_sum(v * alpha[:, None], rows, q)
        out = M.ball_exp(h, step, kappa)
        return T.relu(M.ball_log0(out, kappa)), alpha


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; empty rows give zeros."""
    mask = np.asarray(mask, dtype=bool)
    lv = np.where(mask, logits.value, -np.inf)
    shift = np.max(lv, axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = T.exp(logits - Tensor(shift)) * mask.astype(np.float64)
    total = e.sum(axis=-1, keepdims=True)
    return e / T.where(total.value > 0, total, Tensor(1.0))


def segment_softmax(logits: Tensor, rows: np.ndarray, n: int) -> Tensor:
    """Softmax of ``logits (P,)`` within each group of equal ``rows``."""
    shift = np.full(n, -np.inf)
    np.maximum.at(shift, rows, logits.value)
    e = T.exp(logits - Tensor(shift[rows]))
    total = T.segment_sum(e, rows, n)
    return e / T.take(total, rows, axis=0)


@dataclass
class _Level:
    nodes: np.ndarray
    times: np.ndarray
    self_idx: np.ndarray
    nbr_idx: np.ndarray
    nbr_dt: np.ndarray
    mask: np.ndarray


class RiemannianEncoder:
    """Stack of :class:`RgnnLayer` over most-recent temporal neighbourhoods."""

    def __init__(self, feature_dim: int, d: int = 32, layers: int = 2, k_max: int = 20,
                 time_encoder: TimeEncoder | None = None, rng: np.random.Generator | None = None):
        if d % 2:
            raise ValueError("embedding dimension must be even")
        rng = np.random.default_rng(0) if rng is None else rng
        self.d = d
        self.k_max = int(k_max)
        self.encoder = TimeEncoder(d // 2) if time_encoder is None else time_encoder
        if self.encoder.dim != d:
            raise ValueError(f"time encoding has {self.encoder.dim} dims, expected {d}")
        self.w_in = T.parameter(_glorot(rng, d, feature_dim), "w_in")
        self.layers = [RgnnLayer(d, rng) for _ in range(layers)]

    def parameters(self) -> list[Tensor]:
        ps = [self.w_in]
        for layer in self.layers:
            ps.extend(layer.parameters())
        return ps

    def input_tangent(self, features) -> Tensor:
        return T.matmul(Tensor(np.asarray(features, dtype=np.float64)), self.w_in.T)

    def input_lift(self, features, kappa) -> Tensor:
        return M.expmap0(self.input_tangent(features), kappa)

    def plan(self, index, nodes: np.ndarray, times: np.ndarray) -> list[_Level]:
        """Deduplicated query sets per layer, top layer last."""
        levels = []
        q_nodes = np.asarray(nodes, dtype=np.int64)
        q_times = np.asarray(times, dtype=np.float64)
        for depth in range(len(self.layers), 0, -1):
            nbr, ts, _, mask = index.query(q_nodes, q_times, self.k_max)
            dt = np.where(mask, q_times[:, None] - ts, 0.0)
            if np.any(dt < 0):
                raise CausalityError("neighbour event later than the query time")
            if depth == 1:
                levels.append(_Level(q_nodes, q_times, q_nodes, np.where(mask, nbr, 0), dt, mask))
                break
            cand_n = np.concatenate([q_nodes, nbr[mask]])
            cand_t = np.concatenate([q_times, ts[mask]])
            uniq, inv = np.unique(np.stack([cand_n.astype(np.float64), cand_t], axis=1), axis=0,
                                  return_inverse=True)
            inv = inv.reshape(-1)
            self_idx = inv[: len(q_nodes)]
            nbr_idx = np.zeros(mask.shape, dtype=np.int64)
            nbr_idx[mask] = inv[len(q_nodes):]
            levels.append(_Level(q_nodes, q_times, self_idx, nbr_idx, dt, mask))
            q_nodes = uniq[:, 0].astype(np.int64)
            q_times = uniq[:, 1]
        return levels[::-1]

    def encode(self, graph, nodes, times, kappa_fn: KappaFn, features=None) -> Embedding:
        """Embeddings ``h_i(t)`` for the query pairs ``(nodes[k], times[k])``.

        ``kappa_fn`` maps an array of times to curvatures of shape ``(n, 1)``.
        """
        nodes = np.atleast_1d(np.asarray(nodes, dtype=np.int64))
        times = np.broadcast_to(np.asarray(times, dtype=np.float64), nodes.shape).copy()
        feats = graph.features if features is None else features
        levels = self.plan(graph.index, nodes, times)
        all_t = np.unique(np.concatenate([lv.times for lv in levels]))
        kap_all = kappa_fn(all_t)
        base = self.input_tangent(feats)
        phi_zero = self.encoder.encode_euclidean(0.0)
        tan = base
        for layer, lv in zip(self.layers, levels):
            kap = T.take(kap_all, np.searchsorted(all_t, lv.times), axis=0)
            rows = np.nonzero(lv.mask)[0]
            self_tan = T.take(tan, lv.self_idx, axis=0)
            nbr_tan = T.take(tan, lv.nbr_idx[lv.mask], axis=0)
            phi = self.encoder.encode_euclidean(lv.nbr_dt[lv.mask])
            tan, _ = layer.forward_pairs(self_tan, nbr_tan, phi, phi_zero, rows, kap)
        top = levels[-1]
        kap_top = T.take(kap_all, np.searchsorted(all_t, top.times), axis=0)
        return Embedding(nodes, times, tan, kap_top)



def write_embeddings(emb: Embedding, path) -> None:
    """CSV ``node_id,t,kappa,c0..cd`` of ambient coordinates, one row per query."""
    pts = emb.points.value
    kap = np.broadcast_to(emb.kappa.value, (len(emb.nodes), 1))[:, 0]
    header = "node_id,t,kappa," + ",".join(f"c{i}" for i in range(pts.shape[1]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for n, t, k, row in zip(emb.nodes, emb.times, kap, pts):
            fh.write(",".join([str(int(n)), repr(float(t)), repr(float(k))] + [repr(float(c)) for c in row]) + "\n")
