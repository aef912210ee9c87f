"""Temporal graphs: CSV ingestion, chronological splits, neighbourhood index, generators."""

from __future__ import annotations

import csv
import hashlib
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed input data or an impossible split."""


@dataclass
class TemporalGraph:
    """Timestamped undirected interaction events over ``n_nodes`` nodes.

    Events are stored sorted by ``(ts, src, dst)``.  ``labels`` holds one
    integer per event when present (the state of ``src`` at that event);
    ``edge_features`` keeps the raw per-event feature columns of a CSV source.
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    ts: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    edge_features: np.ndarray | None = None
    _index: "NeighborIndex | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.ts = np.asarray(self.ts, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        n = len(self.src)
        if len(self.dst) != n or len(self.ts) != n:
            raise DataError("src, dst and ts must have equal length")
        if n and (self.src.min() < 0 or self.dst.min() < 0
                  or max(self.src.max(), self.dst.max()) >= self.n_nodes):
            raise DataError("node id outside [0, n_nodes)")
        if np.any(self.src == self.dst):
            raise DataError("self-loops are not allowed")
        if np.any(np.diff(self.ts) < 0):
            raise DataError("timestamps must be nondecreasing")
        if self.features.shape[0] != self.n_nodes:
            raise DataError(f"features have {self.features.shape[0]} rows, expected {self.n_nodes}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def n_events(self) -> int:
        return len(self.ts)

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        return list(zip(self.src.tolist(), self.dst.tolist(), self.ts.tolist()))

    @property
    def time_span(self) -> tuple[float, float]:
        if not self.n_events:
            return (0.0, 0.0)
        return (float(self.ts[0]), float(self.ts[-1]))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def index(self) -> "NeighborIndex":
        if self._index is None:
            self._index = NeighborIndex(self)
        return self._index

    def subgraph(self, events: np.ndarray) -> "TemporalGraph":
        """Keep only the given event indices (node set and features unchanged)."""
        events = np.sort(np.asarray(events, dtype=np.int64))
        return TemporalGraph(
            self.n_nodes, self.src[events], self.dst[events], self.ts[events], self.features,
            None if self.labels is None else self.labels[events],
            None if self.edge_features is None else self.edge_features[events],
        )

    def mean_gap(self) -> float:
        """Mean gap between distinct event times (1.0 when undefined)."""
        u = np.unique(self.ts)
        if len(u) < 2:
            return 1.0
        return float((u[-1] - u[0]) / (len(u) - 1))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.src, self.dst, self.ts, self.features):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def _argsort_events(src, dst, ts) -> np.ndarray:
    return np.lexsort((dst, src, ts))


def from_events(n_nodes: int, src, dst, ts, features=None, labels=None,
                edge_features=None) -> TemporalGraph:
    """Build a graph from unsorted events; sorts stably by ``(ts, src, dst)``."""
    src, dst, ts = np.asarray(src, np.int64), np.asarray(dst, np.int64), np.asarray(ts, np.float64)
    order = _argsort_events(src, dst, ts)
    if features is None:
        features = np.zeros((n_nodes, 1))
    return TemporalGraph(
        n_nodes, src[order], dst[order], ts[order], features,
        None if labels is None else np.asarray(labels)[order],
        None if edge_features is None else np.asarray(edge_features)[order],
    )


# -- CSV ---------------------------------------------------------------------------------


def _parse_header(header: list[str]) -> tuple[bool, int]:
    cols = [c.strip() for c in header]
    if cols[:3] != ["src", "dst", "ts"]:
        raise DataError("line 1: header must start with src,dst,ts")
    rest = cols[3:]
    has_label = bool(rest) and rest[0] == "label"
    feats = rest[1:] if has_label else rest
    if feats != [f"f{i}" for i in range(len(feats))]:
        raise DataError("line 1: feature columns must be named f0, f1, ...")
    return has_label, len(feats)


def load_csv(path, n_nodes: int | None = None) -> TemporalGraph:
    """Read ``src,dst,ts[,label][,f0..fk]`` rows.

    Duplicate rows are dropped and self-loops filtered, each with a warning.
    Timestamps are shifted to start at 0.  A node's feature vector is the
    feature row of its first event; without feature columns every node gets
    a zero vector.
    """
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("line 1: empty file") from None
    has_label, n_feat = _parse_header(header)
    width = 3 + int(has_label) + n_feat
    rows, seen, dupes, loops = [], set(), 0, 0
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise DataError(f"line {lineno}: expected {width} fields, got {len(row)}")
        try:
            s, d = int(row[0]), int(row[1])
            t = float(row[2])
            lab = int(row[3]) if has_label else 0
            f = tuple(float(x) for x in row[3 + int(has_label):])
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        if s < 0 or d < 0:
            raise DataError(f"line {lineno}: negative node id")
        if not np.isfinite(t) or t < 0:
            raise DataError(f"line {lineno}: timestamp must be a nonnegative real")
        key = (s, d, t, lab, f)
        if key in seen:
            dupes += 1
            continue
        seen.add(key)
        if s == d:
            loops += 1
            continue
        rows.append(key)
    if dupes:
        warnings.warn(f"dropped {dupes} duplicate rows", stacklevel=2)
    if loops:
        warnings.warn(f"dropped {loops} self-loop rows", stacklevel=2)
    if not rows:
        raise DataError("no events in file")
    src = np.array([r[0] for r in rows], dtype=np.int64)
    dst = np.array([r[1] for r in rows], dtype=np.int64)
    ts = np.array([r[2] for r in rows], dtype=np.float64)
    ts = ts - ts.min()
    n = int(max(src.max(), dst.max()) + 1) if n_nodes is None else int(n_nodes)
    labels = np.array([r[3] for r in rows], dtype=np.int64) if has_label else None
    efeat = np.array([r[4] for r in rows], dtype=np.float64) if n_feat else None
    order = _argsort_events(src, dst, ts)
    src, dst, ts = src[order], dst[order], ts[order]
    if labels is not None:
        labels = labels[order]
    if efeat is not None:
        efeat = efeat[order]
        feats = np.zeros((n, n_feat))
        filled = np.zeros(n, dtype=bool)
        for i in range(len(src)):
            for v in (src[i], dst[i]):
                if not filled[v]:
                    feats[v] = efeat[i]
                    filled[v] = True
    else:
        warnings.warn("no feature columns; using zero node features", stacklevel=2)
        feats = np.zeros((n, 1))
    return TemporalGraph(n, src, dst, ts, feats, labels, efeat)


def save_csv(graph: TemporalGraph, path) -> None:
    """Write the graph in the format read by :func:`load_csv` (floats as ``repr``)."""
    has_label = graph.labels is not None
    n_feat = 0 if graph.edge_features is None else graph.edge_features.shape[1]
    header = ["src", "dst", "ts"] + (["label"] if has_label else []) + [f"f{i}" for i in range(n_feat)]
    lines = [",".join(header)]
    for i in range(graph.n_events):
        row = [str(int(graph.src[i])), str(int(graph.dst[i])), repr(float(graph.ts[i]))]
        if has_label:
            row.append(str(int(graph.labels[i])))
        if n_feat:
            row.extend(repr(float(x)) for x in graph.edge_features[i])
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


# -- neighbourhood index --------------------------------------------------------------


class NeighborIndex:
    """Per-node time-sorted adjacency with binary-search queries.

    Each event is indexed under both endpoints.  Entries of one node are in
    event order, which is time order with ``(src, dst)`` tie-breaking.
    """

    def __init__(self, graph: TemporalGraph):
        n_ev = graph.n_events
        ev = np.arange(n_ev)
        owner = np.concatenate([graph.src, graph.dst])
        other = np.concatenate([graph.dst, graph.src])
        eid = np.concatenate([ev, ev])
        order = np.lexsort((eid, owner))
        self.owner = owner[order]
        self.nbr = other[order]
        self.event = eid[order]
        self.ts = graph.ts[self.event]
        self.indptr = np.searchsorted(self.owner, np.arange(graph.n_nodes + 1))
        self._times = np.unique(graph.ts)
        rank = np.searchsorted(self._times, self.ts, side="right")
        self._base = len(self._times) + 1
        self._key = self.owner * self._base + rank

    def degree_before(self, nodes, times) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        hi = self._upper(nodes, times)
        return hi - self.indptr[nodes]

    def _upper(self, nodes, times) -> np.ndarray:
        r = np.searchsorted(self._times, np.asarray(times, dtype=np.float64), side="right")
        return np.searchsorted(self._key, nodes * self._base + r, side="right")

    def neighbors_before(self, v: int, t: float, k: int) -> list[tuple[int, float]]:
        """The ``k`` most recent events of ``v`` with timestamp ``<= t``, newest first."""
        nbr, ts, _, mask = self.query(np.array([v]), np.array([t]), k)
        m = mask[0]
        return list(zip(nbr[0][m].tolist(), ts[0][m].tolist()))

    def query(self, nodes, times, k: int):
        """Batched :meth:`neighbors_before`.

        Returns ``(nbr, ts, event, mask)`` arrays of shape ``(len(nodes), k)``,
        newest first, padded where ``mask`` is False.
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        times = np.asarray(times, dtype=np.float64)
        k = int(k)
        hi = self._upper(nodes, times)
        lo = self.indptr[nodes]
        pos = hi[:, None] - 1 - np.arange(k)[None, :]
        mask = pos >= lo[:, None]
        pos = np.where(mask, pos, 0)
        if len(self.nbr) == 0:
            z = np.zeros((len(nodes), k), dtype=np.int64)
            return z, np.zeros((len(nodes), k)), z.copy(), np.zeros((len(nodes), k), dtype=bool)
        nbr = np.where(mask, self.nbr[pos], 0)
        ts = np.where(mask, self.ts[pos], 0.0)
        event = np.where(mask, self.event[pos], -1)
        return nbr, ts, event, mask


# -- splits ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "transductive"
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    inductive_node_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("transductive", "inductive"):
            raise DataError(f"unknown split mode {self.mode!r}")
        if abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) < 0:
            raise DataError("split fractions must be nonnegative and sum to 1")


@dataclass
class Split:
    """Event-index partitions; ``held_out`` lists the inductive nodes."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    held_out: np.ndarray
    mode: str

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.train, self.val, self.test, self.held_out):
            h.update(np.ascontiguousarray(a, dtype=np.int64).tobytes())
        return h.hexdigest()


def _cut(ts: np.ndarray, target: int) -> int:
    """Smallest boundary ``>= target`` that does not separate equal timestamps."""
    n = len(ts)
    if target <= 0 or target >= n:
        return max(0, min(target, n))
    return int(np.searchsorted(ts, ts[target - 1], side="right"))


def split(graph: TemporalGraph, spec: SplitSpec = SplitSpec()) -> Split:
    """Chronological split by event count; ties in time stay in one partition."""
    n = graph.n_events
    a = _cut(graph.ts, int(round(spec.fractions[0] * n)))
    b = _cut(graph.ts, int(round((spec.fractions[0] + spec.fractions[1]) * n)))
    idx = np.arange(n)
    train, val, test = idx[:a], idx[a:b], idx[b:]
    held = np.array([], dtype=np.int64)
    if spec.mode == "inductive":
        rng = np.random.default_rng(spec.seed)
        n_held = max(1, int(round(spec.inductive_node_fraction * graph.n_nodes)))
        held = np.sort(rng.choice(graph.n_nodes, size=n_held, replace=False))
        touches = np.isin(graph.src, held) | np.isin(graph.dst, held)
        train = train[~touches[train]]
        val = val[touches[val]]
        test = test[touches[test]]
    for name, part in (("train", train), ("val", val), ("test", test)):
        if len(part) == 0:
            hint = " (try a different seed)" if spec.mode == "inductive" else ""
            raise DataError(f"{name} partition is empty{hint}")
    return Split(train, val, test, held, spec.mode)


# -- synthetic generators -----------------------------------------------------------------


def tree_growth(n_nodes: int = 50, seed: int = 0, feature_dim: int = 8) -> TemporalGraph:
    """Preferential-attachment tree: node ``i`` joins at time ``i`` with one edge."""
    if n_nodes < 2:
        raise DataError("tree_growth needs at least 2 nodes")
    rng = np.random.default_rng(seed)
    deg = np.zeros(n_nodes)
    src, dst = [], []
    for i in range(1, n_nodes):
        w = deg[:i] + 1.0
        j = int(rng.choice(i, p=w / w.sum()))
        src.append(i)
        dst.append(j)
        deg[i] += 1
        deg[j] += 1
    ts = np.arange(1, n_nodes, dtype=np.float64)
    feats = rng.normal(size=(n_nodes, feature_dim))
    return from_events(n_nodes, src, dst, ts - ts[0], feats)


def clique_growth(n_nodes: int = 50, n_events: int = 400, seed: int = 0,
                  feature_dim: int = 8) -> TemporalGraph:
    """Triangle-closing growth.

    New nodes attach to both ends of a random existing edge; every other event
    closes a wedge ``u - v - w`` with the edge ``u - w``.
    """
    if n_nodes < 3:
        raise DataError("clique_growth needs at least 3 nodes")
    if n_events < 2 * n_nodes - 3:
        raise DataError(f"clique_growth needs n_events >= {2 * n_nodes - 3}")
    rng = np.random.default_rng(seed)
    adj = [set() for _ in range(n_nodes)]
    events = [(0, 1), (1, 2), (0, 2)]
    for a, b in events:
        adj[a].add(b)
        adj[b].add(a)
    n_close = n_events - (2 * n_nodes - 3)
    schedule = np.zeros(n_close + n_nodes - 3, dtype=bool)
    schedule[rng.choice(len(schedule), size=n_nodes - 3, replace=False)] = True
    present = 3
    for arrive in schedule:
        if arrive:
            u, v = events[int(rng.integers(len(events)))]
            pairs = [(present, u), (present, v)]
            present += 1
        else:
            u = int(rng.integers(present))
            v = int(rng.choice(sorted(adj[u])))
            w = int(rng.choice(sorted(adj[v] - {u})))
            pairs = [(u, w)]
        for a, b in pairs:
            events.append((a, b))
            adj[a].add(b)
            adj[b].add(a)
    src = [e[0] for e in events]
    dst = [e[1] for e in events]
    ts = np.arange(len(events), dtype=np.float64)
    feats = rng.normal(size=(n_nodes, feature_dim))
    return from_events(n_nodes, src, dst, ts, feats)


def two_community(n_nodes: int = 40, n_events: int = 600, p_intra: float = 0.9, seed: int = 0,
                  feature_dim: int = 8) -> TemporalGraph:
    """Two equal communities with mostly intra-community events.

    Node features are Gaussian noise independent of the community, so any
    community signal has to come from the interaction structure.  Each event
    carries the community of its ``src`` as label.
    """
    if n_nodes < 4:
        raise DataError("two_community needs at least 4 nodes")
    rng = np.random.default_rng(seed)
    comm = np.zeros(n_nodes, dtype=np.int64)
    comm[n_nodes // 2:] = 1
    members = [np.flatnonzero(comm == c) for c in (0, 1)]
    src = rng.integers(n_nodes, size=n_events)
    dst = np.empty(n_events, dtype=np.int64)
    for i, s in enumerate(src):
        c = comm[s] if rng.random() < p_intra else 1 - comm[s]
        pool = members[c][members[c] != s]
        dst[i] = rng.choice(pool)
    ts = np.sort(rng.uniform(0.0, float(n_events), size=n_events))
    ts -= ts[0]
    feats = rng.normal(size=(n_nodes, feature_dim))
    return from_events(n_nodes, src, dst, ts, feats, labels=comm[src])


def concat_streams(first: TemporalGraph, second: TemporalGraph, gap: float = 1.0) -> TemporalGraph:
    """Disjoint union with ``second`` shifted to start after ``first`` ends."""
    off = first.n_nodes
    shift = first.time_span[1] + gap - second.time_span[0]
    fd = max(first.feature_dim, second.feature_dim)
    feats = np.zeros((first.n_nodes + second.n_nodes, fd))
    feats[:off, :first.feature_dim] = first.features
    feats[off:, :second.feature_dim] = second.features
    return from_events(
        first.n_nodes + second.n_nodes,
        np.concatenate([first.src, second.src + off]),
        np.concatenate([first.dst, second.dst + off]),
        np.concatenate([first.ts, second.ts + shift]),
        feats,
    )


GENERATORS = {"tree_growth": tree_growth, "clique_growth": clique_growth, "two_community": two_community}


def synth(kind: str, seed: int = 0, **params) -> TemporalGraph:
    if kind not in GENERATORS:
        raise DataError(f"unknown generator {kind!r}; choose from {sorted(GENERATORS)}")
    return GENERATORS[kind](seed=seed, **params)
