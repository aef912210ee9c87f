"""Self-supervised training: self-augmented views, reweighted contrast, curvature supervision."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import curvature as C
from . import manifold as M
from . import tensor as T
from .rgnn import Embedding, RiemannianEncoder
from .tensor import Tensor
from .timeenc import TimeEncoder

CLAMP_MIN = math.exp(-20.0)


class TrainingDiverged(RuntimeError):
    """Raised after too many consecutive non-finite losses."""


@dataclass(frozen=True)
class ContrastConfig:
    xi: float = 1.0
    tau_plus: float = 0.0
    n_negatives: int = 32
    w: float = 1.0
    t_scale: float = 1.0

    def __post_init__(self):
        if self.xi < 0:
            raise ValueError("xi must be nonnegative")
        if not 0.0 <= self.tau_plus < 1.0:
            raise ValueError("tau_plus must lie in [0, 1)")
        if self.n_negatives < 1:
            raise ValueError("need at least one negative")
        if self.t_scale <= 0:
            raise ValueError("t_scale must be positive")

    @property
    def tau_minus(self) -> float:
        return 1.0 - self.tau_plus


# -- views and scores --------------------------------------------------------------------------


def riemannian_proj(h, kappa_from, kappa_to) -> Tensor:
    """Carry ambient points from curvature ``kappa_from`` to ``kappa_to`` through the origin."""
    return M.expmap0(M.logmap0(h, kappa_from), kappa_to)


def time_weight(encoder: TimeEncoder, ta, tb, kappa) -> Tensor:
    """``|K_R(ta, tb)| / |K_R(t, t)|`` at curvature ``kappa``.

    Equal to ``|cos_k(sqrt|k|)^2 + sign(k) sin_k(sqrt|k|)^2 K_E(ta, tb)|``; it is 1
    for coincident times and stays finite as ``kappa -> 0``.
    """
    k = M.kappa_tensor(kappa)
    s = np.where(k.value < 0, -1.0, 1.0)
    r = M.sqrt_abs(k)
    ke = encoder.euclidean_kernel(ta, tb)
    c = M.kcos(r, s)
    sn = M.ksin(r, s)
    return T.abs_(c * c + Tensor(s) * sn * sn * ke)


def score(h_a, h_b, t_a, t_b, kappa, encoder: TimeEncoder, t_scale: float = 1.0) -> Tensor:
    """``-|K| d(h_a, h_b) / t_scale`` for ambient points at a common curvature."""
    return -time_weight(encoder, t_a, t_b, kappa) * M.distance(h_a, h_b, kappa) / t_scale


def chart_score(c_a, c_b, weight, kappa, t_scale: float = 1.0) -> Tensor:
    """:func:`score` for chart coordinates with a precomputed time weight."""
    return -as_t(weight) * M.ball_distance(c_a, c_b, kappa)[..., 0] / t_scale


def as_t(x) -> Tensor:
    return T.as_tensor(x)


# -- reweighted contrast -----------------------------------------------------------------------------


def hardness_weights(s: Tensor, xi: float) -> Tensor:
    """Per-row importance weights ``e^{xi s} / sum e^{xi s}``; uniform when ``xi = 0``."""
    s = T.as_tensor(s)
    if xi == 0:
        return Tensor(np.full(s.shape, 1.0 / s.shape[-1]))
    z = T.exp((s - Tensor(s.value.max(axis=-1, keepdims=True))) * xi)
    return z / z.sum(axis=-1, keepdims=True)


def _shifted_terms(s_pos: Tensor, s_neg: Tensor, cfg: ContrastConfig):
    """Row shift ``m`` and the clamped negative term divided by ``e^m``."""
    m = np.maximum(s_pos.value.max(axis=1, keepdims=True), s_neg.value.max(axis=1, keepdims=True))
    e_neg = T.exp(s_neg - Tensor(m))
    e_pos = T.exp(s_pos - Tensor(m))

    def weighted_mean(s, e):
        if cfg.xi == 0:
            return e.mean(axis=1, keepdims=True)
        return (hardness_weights(s, cfg.xi) * e).sum(axis=1, keepdims=True)

    term = weighted_mean(s_neg, e_neg)
    if cfg.tau_plus > 0:
        term = term - weighted_mean(s_pos, e_pos) * cfg.tau_plus
    term = term * (1.0 / cfg.tau_minus)
    floor = np.exp(np.minimum(np.log(CLAMP_MIN) - m, 700.0))
    term = T.where(term.value > floor, term, Tensor(floor))
    return m, term, e_pos


def reweighted_negative_term(s_pos: Tensor, s_neg: Tensor, cfg: ContrastConfig) -> Tensor:
    """Debiased, hardness-weighted estimate of ``E_{p-}[e^s]`` per anchor, shape ``(B, 1)``.

    ``s_pos`` is ``(B, P)`` and ``s_neg`` is ``(B, N)``.
    """
    m, term, _ = _shifted_terms(T.as_tensor(s_pos), T.as_tensor(s_neg), cfg)
    return term * Tensor(np.exp(m))


def contrast_direction(s_pos: Tensor, s_neg: Tensor, cfg: ContrastConfig) -> Tensor:
    """Batch mean of ``s+ - log(e^{s+} + N * negative_term)`` (to be maximised)."""
    s_pos, s_neg = T.as_tensor(s_pos), T.as_tensor(s_neg)
    n = s_neg.shape[1]
    m, term, e_pos = _shifted_terms(s_pos, s_neg, cfg)
    log_den = T.log(e_pos[:, :1] + term * float(n)) + Tensor(m)
    return (s_pos[:, :1] - log_den).mean()


@dataclass
class ContrastBatch:
    """Two views of the same node rows plus anchor/negative row indices.

    ``alpha`` and ``beta`` are chart coordinates at the anchor curvature; row
    ``anchors[b]`` of ``beta`` is the positive of anchor ``b``.
    """

    alpha: Tensor
    beta: Tensor
    anchors: np.ndarray
    negatives: np.ndarray
    weight: Tensor
    kappa: Tensor
    times: tuple[float, float]

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.int64)
        self.negatives = np.asarray(self.negatives, dtype=np.int64)
        if self.negatives.ndim != 2 or len(self.negatives) != len(self.anchors):
            raise ValueError("negatives must have one row per anchor")
        if self.negatives.shape[1] == 0:
            raise ValueError("need at least one negative per anchor")
        if np.any(self.negatives == self.anchors[:, None]):
            raise ValueError("negatives must exclude the anchor's own node")

    def scores(self, direction: str, t_scale: float = 1.0) -> tuple[Tensor, Tensor]:
        if direction == "ab":
            src, dst = self.alpha, self.beta
        elif direction == "ba":
            src, dst = self.beta, self.alpha
        else:
            raise ValueError(f"unknown direction {direction!r}")
        b, n = self.negatives.shape
        d = src.shape[1]
        anc = T.take(src, self.anchors, axis=0)
        pos = T.take(dst, self.anchors, axis=0)
        neg = T.take(dst, self.negatives.reshape(-1), axis=0).reshape(b, n, d)
        s_pos = chart_score(anc, pos, self.weight, self.kappa, t_scale).reshape(b, 1)
        s_neg = chart_score(anc.reshape(b, 1, d), neg, self.weight, self.kappa.reshape(1, 1, 1), t_scale)
        return s_pos, s_neg


def contrast_loss(batch: ContrastBatch, cfg: ContrastConfig) -> Tensor:
    """``-L(alpha, beta) - L(beta, alpha)``."""
    total = None
    for direction in ("ab", "ba"):
        s_pos, s_neg = batch.scores(direction, cfg.t_scale)
        term = contrast_direction(s_pos, s_neg, cfg)
        total = -term if total is None else total - term
    return total


# -- model -----------------------------------------------------------------------------------------


class SelfRGNN:
    """Encoder, curvature network and Ricci estimator sharing one time encoding."""

    def __init__(self, feature_dim: int, d: int = 32, layers: int = 2, k_max: int = 20,
                 d_c: int = 32, d_g: int = 32, t_max: float = 1.0, time_scale: float = 1.0,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = dict(feature_dim=feature_dim, d=d, layers=layers, k_max=k_max, d_c=d_c,
                           d_g=d_g, t_max=t_max, time_scale=time_scale, seed=seed)
        self.time = TimeEncoder(d // 2, t_max=t_max, time_scale=time_scale)
        self.encoder = RiemannianEncoder(feature_dim, d=d, layers=layers, k_max=k_max,
                                         time_encoder=self.time, rng=rng)
        self.curnn = C.CurNN(self.time, hidden=d_c, rng=rng)
        self.estimator = C.CurvatureEstimator(self.time, hidden=d_g, rng=rng)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"time.omegas": self.time.omegas, "encoder.w_in": self.encoder.w_in}
        for i, layer in enumerate(self.encoder.layers):
            for name in ("w1", "w2", "w3", "theta"):
                out[f"encoder.layer{i}.{name}"] = getattr(layer, name)
        for name in ("w_a", "b_a", "w_b", "b_b", "w4"):
            out[f"curnn.{name}"] = getattr(self.curnn, name)
        g = self.estimator.gru
        for name in ("w_x", "w_h", "b_x", "b_h"):
            out[f"estimator.gru.{name}"] = getattr(g, name)
        out["estimator.w5"] = self.estimator.w5
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def kappa(self, t) -> Tensor:
        return self.curnn.curvature_at(np.asarray(t, dtype=np.float64))

    def encode(self, graph, nodes, times) -> Embedding:
        return self.encoder.encode(graph, nodes, times, self.curnn.curvature_at)


# -- training loop ------------------------------------------------------------------------------------


LOG_COLUMNS = ("step", "loss_total", "loss_contrast", "loss_curvature", "kappa_t1", "grad_norm")


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 5e-3
    batch_size: int = 128
    batch_events: int = 64
    view_window: float = 0.1
    max_supervision: int = 8
    ricci_grid: int = 16
    ricci_refresh: int = 200
    ricci_window: int = 64
    ricci_lambda: float = 0.5
    ricci_cost: str = "manifold"
    calibration: float = 1.0
    max_nonfinite: int = 10
    clip_norm: float = 5.0
    seed: int = 0
    contrast: ContrastConfig = field(default_factory=ContrastConfig)

    def __post_init__(self):
        if self.ricci_cost not in ("manifold", "hop"):
            raise ValueError("ricci_cost must be 'manifold' or 'hop'")
        if self.steps < 0 or self.batch_size < 2 or self.batch_events < 1:
            raise ValueError("invalid step or batch settings")


class Trainer:
    """Runs the self-supervised loop on the events of ``graph``."""

    def __init__(self, model: SelfRGNN, graph, cfg: TrainConfig):
        if graph.n_events < 2:
            raise ValueError("training needs at least two events")
        self.model = model
        self.graph = graph
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed + 7919)
        self.opt = T.Adam(model.parameters(), lr=cfg.lr)
        self.step_count = 0
        self.log: list[tuple] = []
        self.windows: list[C.RicciWindow] = []
        self._nonfinite = 0
        ts = graph.ts
        self.grid = np.unique(ts[np.linspace(0, len(ts) - 1, cfg.ricci_grid).round().astype(int)])
        self._first_end = int(np.searchsorted(ts, ts[0], side="right"))
        if self._first_end >= len(ts):
            raise ValueError("training needs at least two distinct event times")
        lo, hi = graph.time_span
        self.view_span = cfg.view_window * (hi - lo)

    # -- Ricci supervision cache ---------------------------------------------------------------

    def refresh_ricci(self) -> None:
        """Recompute edge-curvature windows on the grid from the current (detached) model."""
        out = []
        for t in self.grid:
            win = self.window_at(float(t))
            if win is None:
                warnings.warn("non-finite embedding distances; Ricci cache not refreshed",
                              RuntimeWarning, stacklevel=2)
                return
            out.append(win)
        self.windows = out

    def window_at(self, t: float) -> C.RicciWindow | None:
        """Ricci window at ``t`` under the configured cost; ``None`` if distances are non-finite."""
        g, cfg = self.graph, self.cfg
        with T.no_grad():
            if cfg.ricci_cost == "hop":
                hi = int(np.searchsorted(g.ts, t, side="right"))
                adj = [set() for _ in range(g.n_nodes)]
                for s, d in zip(g.src[:hi], g.dst[:hi]):
                    adj[s].add(int(d))
                    adj[d].add(int(s))
                cost = C.hop_cost(adj)
            else:
                dist = self._distances(t)
                if not np.all(np.isfinite(dist)):
                    return None
                cost = C.matrix_cost(dist)
            return C.ricci_window(g, float(t), cost, cfg.ricci_window, cfg.ricci_lambda)

    def kappa_hat(self, windows) -> Tensor:
        """Estimator output ``(B, 1)`` for non-empty windows (clipped Ricci inputs)."""
        kap, dlt, mask = C.pad_windows(windows)
        return self.model.estimator.estimate(np.clip(kap, -M.KAPPA_MAX, 1.0), dlt, mask)

    def _distances(self, t: float) -> np.ndarray:
        n = self.graph.n_nodes
        emb = self.model.encode(self.graph, np.arange(n), float(t))
        k = emb.kappa[:1]
        c = M.ball_exp0(emb.tangent, k)
        return M.ball_distance(c.reshape(n, 1, -1), c.reshape(1, n, -1), k.reshape(1, 1, 1)).value[..., 0]

    # -- batch assembly ----------------------------------------------------------------------------

    def sample_batch(self):
        g, cfg, rng = self.graph, self.cfg, self.rng
        end = int(rng.integers(self._first_end, g.n_events))
        start = max(0, end - cfg.batch_events + 1)
        t1 = float(g.ts[end])
        pairs = np.stack([g.src[start:end + 1], g.dst[start:end + 1]], axis=1).reshape(-1)
        _, first = np.unique(pairs, return_index=True)
        anchors = pairs[np.sort(first)][: cfg.batch_size]
        if len(anchors) < 2:
            raise ValueError("degenerate batch: fewer than two nodes")
        times = np.unique(g.ts)
        cand = times[(times >= t1 - self.view_span) & (times < t1)]
        if len(cand) == 0:
            cand = times[times < t1][-1:]
        t2 = float(cand[int(rng.integers(len(cand)))])
        n_neg = min(cfg.contrast.n_negatives, g.n_nodes - 1)
        negs = np.empty((len(anchors), n_neg), dtype=np.int64)
        for i, a in enumerate(anchors):
            others = np.delete(np.arange(g.n_nodes), a)
            negs[i] = rng.choice(others, size=n_neg, replace=False)
        sup = np.unique(g.ts[start:end + 1])
        if len(sup) > cfg.max_supervision:
            sup = sup[np.linspace(0, len(sup) - 1, cfg.max_supervision).round().astype(int)]
        return anchors, negs, t1, t2, sup

    # -- losses ------------------------------------------------------------------------------------

    def views(self, anchors, negs, t1: float, t2: float) -> ContrastBatch:
        """Alpha view at ``t1`` and beta view at ``t2`` projected to ``kappa(t1)``, as chart points."""
        if not t2 < t1:
            raise ValueError("the beta view needs t2 < t1")
        nodes, inv = np.unique(np.concatenate([anchors, np.asarray(negs).reshape(-1)]), return_inverse=True)
        if len(nodes) < 2:
            raise ValueError("degenerate batch: fewer than two nodes")
        inv = inv.reshape(-1)
        a_rows, n_rows = inv[: len(anchors)], inv[len(anchors):].reshape(np.shape(negs))
        n = len(nodes)
        # one call for both views: neighbour embeddings depend only on their own event times
        both = self.model.encode(self.graph, np.concatenate([nodes, nodes]),
                                 np.concatenate([np.full(n, t1), np.full(n, t2)]))
        k1 = both.kappa[:1]
        chart = M.ball_exp0(both.tangent, k1)
        return ContrastBatch(
            alpha=chart[:n], beta=chart[n:], anchors=a_rows, negatives=n_rows,
            weight=time_weight(self.model.time, t1, t2, k1).reshape(()),
            kappa=k1, times=(t1, t2))

    def losses(self, anchors, negs, t1, t2, sup):
        batch = self.views(anchors, negs, t1, t2)
        l_con = contrast_loss(batch, self.cfg.contrast)
        l_cur = self.curvature_term(sup)
        total = l_con + l_cur * self.cfg.contrast.w if l_cur is not None else l_con
        return total, l_con, l_cur, float(batch.kappa.value.reshape(-1)[0])

    def curvature_term(self, sup) -> Tensor | None:
        """``sum |kappa - kappa_hat|`` on grid points covering ``sup``, plus estimator calibration."""
        if not self.windows:
            return None
        idx = np.unique(np.searchsorted(self.grid, sup, side="right") - 1)
        idx = [i for i in idx if i >= 0 and len(self.windows[i].kappas)]
        if not idx:
            return None
        wins = [self.windows[i] for i in idx]
        k_hat = self.kappa_hat(wins)
        k_t = self.model.kappa(self.grid[idx])
        loss = C.curvature_loss(k_t, k_hat)
        if self.cfg.calibration:
            target = Tensor(np.array([[np.clip(w.mean, -M.KAPPA_MAX, 1.0)] for w in wins]))
            loss = loss + T.abs_(k_hat - target).sum() * self.cfg.calibration
        return loss

    # -- state -------------------------------------------------------------------------------------

    def state_dict(self) -> dict:
        """Everything beyond the model parameters needed to resume bit-for-bit."""
        return {
            "step": self.step_count,
            "nonfinite": self._nonfinite,
            "rng": self.rng.bit_generator.state,
            "adam": self.opt.state_dict(),
            "windows": [(w.t, w.kappas.copy(), w.times.copy(), w.n_edges_seen) for w in self.windows],
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self._nonfinite = int(state["nonfinite"])
        self.rng.bit_generator.state = state["rng"]
        self.opt.load_state_dict(state["adam"])
        self.windows = [C.RicciWindow(float(t), np.asarray(k, dtype=np.float64), np.asarray(ts, dtype=np.float64), int(n))
                        for t, k, ts, n in state["windows"]]

    # -- loop --------------------------------------------------------------------------------------

    def step(self) -> tuple:
        cfg = self.cfg
        if self.step_count % cfg.ricci_refresh == 0:
            self.refresh_ricci()
        batch = self.sample_batch()
        self.opt.zero_grad()
        total, l_con, l_cur, k1 = self.losses(*batch)
        value = total.item()
        gnorm = float("nan")
        if math.isfinite(value):
            total.backward()
            gnorm = T.clip_grad_norm(self.opt.params, cfg.clip_norm) if cfg.clip_norm else T.grad_norm(self.opt.params)
            self.opt.step()
        if math.isfinite(value) and not self.opt.last_skipped:
            self._nonfinite = 0
        else:
            self._nonfinite += 1
            if self._nonfinite >= cfg.max_nonfinite:
                raise TrainingDiverged(f"{self._nonfinite} consecutive non-finite losses at step {self.step_count}")
        row = (self.step_count, value, l_con.item(), 0.0 if l_cur is None else l_cur.item(), k1, gnorm)
        self.log.append(row)
        self.step_count += 1
        return row

    def run(self, steps: int | None = None, callback: Callable[[tuple], None] | None = None) -> list[tuple]:
        n = self.cfg.steps if steps is None else steps
        for _ in range(n):
            row = self.step()
            if callback is not None:
                callback(row)
        return self.log


def format_log(rows) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for r in rows:
        lines.append(",".join([str(int(r[0]))] + [repr(float(x)) for x in r[1:]]))
    return "\n".join(lines) + "\n"
