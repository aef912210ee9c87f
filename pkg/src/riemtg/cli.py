"""Command-line entry point: training, evaluation, curvature traces, synthetic data and export.

Configuration is flat ``key=value`` text.  Every key has a default (see
``OPTIONS``); a config file overrides the defaults and ``--set key=value``,
``--seed`` and ``--out`` override the file.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import eval as E
from . import rgnn as R
from . import ssl as S
from . import tensor as T

CHECKPOINT_VERSION = 1
CHECKPOINT_FORMAT = "riemtg-checkpoint"
CHECKPOINT_NAME = "checkpoint.ckpt"
LOG_NAME = "train_log.csv"
TRACE_COLUMNS = ("t", "kappa_curnn", "kappa_hat", "n_edges_seen")

# keys that fix parameter shapes; a checkpoint and a config must agree on them
SHAPE_KEYS = ("d", "layers", "k_max", "d_c", "d_g")


class UsageError(ValueError):
    """Bad command line, config or checkpoint; exit code 1."""


@dataclass(frozen=True)
class Option:
    default: object
    help: str


OPTIONS: dict[str, Option] = {
    # data
    "data": Option("", "CSV event file (src,dst,ts[,label][,f0..]); empty selects a synthetic graph"),
    "synth": Option("two_community", "synthetic generator: two_community, clique_growth or tree_growth"),
    "synth_nodes": Option(40, "synthetic node count"),
    "synth_events": Option(600, "synthetic event count (ignored by tree_growth)"),
    "synth_seed": Option(0, "synthetic generator seed"),
    "split_mode": Option("transductive", "transductive or inductive"),
    "split_seed": Option(0, "seed choosing the inductive held-out nodes"),
    # model
    "d": Option(32, "embedding dimension"),
    "layers": Option(2, "attention layers"),
    "k_max": Option(20, "most recent temporal neighbours per node and layer"),
    "d_c": Option(32, "curvature network hidden width"),
    "d_g": Option(32, "Ricci estimator GRU width"),
    # objective
    "xi": Option(1.0, "hardness of negative reweighting (0 gives uniform weights)"),
    "tau_plus": Option(0.0, "class prior for debiasing, in [0, 1)"),
    "n_negatives": Option(32, "negatives per anchor (capped at n_nodes - 1)"),
    "w": Option(1.0, "weight of the curvature loss"),
    "t_scale": Option(1.0, "score temperature"),
    # optimisation
    "lr": Option(5e-3, "Adam learning rate"),
    "steps": Option(2000, "training steps"),
    "batch_size": Option(128, "anchor nodes per step"),
    "batch_events": Option(64, "recent events an anchor batch is drawn from"),
    "view_window": Option(0.1, "beta-view look-back as a fraction of the time span"),
    "max_supervision": Option(8, "curvature supervision times per step"),
    "clip_norm": Option(5.0, "global gradient-norm clip (0 disables)"),
    "seed": Option(0, "model initialisation and batch sampling seed"),
    # Ricci supervision
    "ricci_grid": Option(16, "times at which edge curvature windows are cached"),
    "ricci_refresh": Option(200, "steps between cache refreshes"),
    "ricci_window": Option(64, "most recent edges per curvature window"),
    "ricci_lambda": Option(0.5, "idleness of the random-walk measures"),
    "ricci_cost": Option("manifold", "transport ground cost: manifold or hop"),
    "calibration": Option(1.0, "weight tying the estimator to the window's mean curvature"),
    # evaluation and tracing
    "eval_runs": Option(10, "negative samplings averaged by link evaluation"),
    "node_runs": Option(5, "head fits averaged by node evaluation"),
    "n_centroids": Option(16, "centroids of the node classification head"),
    "head_epochs": Option(300, "training epochs of the classification head"),
    "head_lr": Option(1e-2, "learning rate of the classification head"),
    "fd_r": Option(2.0, "link decoder radius"),
    "fd_temp": Option(1.0, "link decoder temperature"),
    "trace_samples": Option(32, "time points of a curvature trace"),
    "out": Option("runs", "output directory"),
}

DEFAULTS = {k: o.default for k, o in OPTIONS.items()}


# -- configuration ------------------------------------------------------------------------------


def _coerce(key: str, text: str):
    if key not in OPTIONS:
        raise UsageError(f"unknown config key {key!r}")
    kind = type(OPTIONS[key].default)
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise UsageError(f"{key}: expected {kind.__name__}, got {text!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = _coerce(key, value)
        except UsageError as exc:
            raise UsageError(f"{source}:{n}: {exc}") from None
    return out


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def resolve(explicit: dict, base: dict | None = None) -> dict:
    cfg = dict(DEFAULTS if base is None else base)
    for k, v in explicit.items():
        if k not in OPTIONS:
            raise UsageError(f"unknown config key {k!r}")
        cfg[k] = v
    return cfg


def format_config(cfg: dict) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in OPTIONS)


def contrast_config(cfg: dict) -> S.ContrastConfig:
    return S.ContrastConfig(xi=cfg["xi"], tau_plus=cfg["tau_plus"], n_negatives=cfg["n_negatives"],
                            w=cfg["w"], t_scale=cfg["t_scale"])


def train_config(cfg: dict) -> S.TrainConfig:
    return S.TrainConfig(
        steps=cfg["steps"], lr=cfg["lr"], batch_size=cfg["batch_size"], batch_events=cfg["batch_events"],
        view_window=cfg["view_window"], max_supervision=cfg["max_supervision"],
        ricci_grid=cfg["ricci_grid"], ricci_refresh=cfg["ricci_refresh"], ricci_window=cfg["ricci_window"],
        ricci_lambda=cfg["ricci_lambda"], ricci_cost=cfg["ricci_cost"], calibration=cfg["calibration"],
        clip_norm=cfg["clip_norm"], seed=cfg["seed"], contrast=contrast_config(cfg))


def validate(cfg: dict) -> None:
    """Reject values no command could run with, before any data is touched."""
    try:
        train_config(cfg)
        D.SplitSpec(mode=cfg["split_mode"], seed=cfg["split_seed"])
        E.FermiDirac(cfg["fd_r"], cfg["fd_temp"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not cfg["data"] and cfg["synth"] not in D.GENERATORS:
        raise UsageError(f"unknown generator {cfg['synth']!r}; choose from {sorted(D.GENERATORS)}")
    for key in SHAPE_KEYS + ("steps", "eval_runs", "node_runs", "n_centroids", "trace_samples"):
        if cfg[key] < (0 if key == "steps" else 1):
            raise UsageError(f"{key} must be positive")
    if cfg["d"] % 2:
        raise UsageError("d must be even (the time encoding pairs cosines with sines)")


# -- data and model -------------------------------------------------------------------------------


def load_graph(cfg: dict) -> D.TemporalGraph:
    if cfg["data"]:
        return D.load_csv(cfg["data"])
    kind = cfg["synth"]
    params = {"n_nodes": cfg["synth_nodes"]}
    if kind != "tree_growth":
        params["n_events"] = cfg["synth_events"]
    return D.synth(kind, seed=cfg["synth_seed"], **params)


def make_split(cfg: dict, graph: D.TemporalGraph, mode: str | None = None) -> D.Split:
    return D.split(graph, D.SplitSpec(mode=mode or cfg["split_mode"], seed=cfg["split_seed"]))


def build_model(cfg: dict, train_graph: D.TemporalGraph) -> S.SelfRGNN:
    """Model sized by ``cfg``; the time encoding is scaled to the training span."""
    lo, hi = train_graph.time_span
    gap = train_graph.mean_gap()
    return S.SelfRGNN(train_graph.feature_dim, d=cfg["d"], layers=cfg["layers"], k_max=cfg["k_max"],
                      d_c=cfg["d_c"], d_g=cfg["d_g"], t_max=max((hi - lo) / gap, 1.0),
                      time_scale=gap, seed=cfg["seed"])


# -- checkpoints ------------------------------------------------------------------------------------

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy(a) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, cfg: dict, model: S.SelfRGNN, trainer: S.Trainer) -> None:
    """Zip container of named ``.npy`` blobs plus a JSON manifest, byte-stable for equal content."""
    params = model.named_parameters()
    state = trainer.state_dict()
    adam = state["adam"]
    blobs = {}
    for i, (name, p) in enumerate(params.items()):
        blobs[f"param/{name}.npy"] = p.value
        blobs[f"adam_m/{name}.npy"] = adam["m"][i]
        blobs[f"adam_v/{name}.npy"] = adam["v"][i]
    windows = []
    for i, (t, kappas, times, n_seen) in enumerate(state["windows"]):
        blobs[f"ricci/{i}/kappas.npy"] = kappas
        blobs[f"ricci/{i}/times.npy"] = times
        windows.append({"t": t, "n_edges_seen": n_seen})
    blobs["log.npy"] = np.asarray(trainer.log, dtype=np.float64).reshape(-1, len(S.LOG_COLUMNS))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        # the output location is not part of the run, so copies of one run stay identical
        "config": {k: v for k, v in cfg.items() if k != "out"},
        "model": model.config,
        "parameters": list(params),
        "trainer": {"step": state["step"], "nonfinite": state["nonfinite"], "rng": state["rng"],
                    "adam_t": adam["t"], "windows": windows},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        entries = [("manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())]
        entries += [(k, _npy(v)) for k, v in blobs.items()]
        for name, payload in entries:
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, payload)


@dataclass
class Checkpoint:
    path: Path
    manifest: dict
    blobs: dict[str, np.ndarray]

    @property
    def config(self) -> dict:
        return self.manifest["config"]

    @property
    def model_config(self) -> dict:
        return self.manifest["model"]


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != CHECKPOINT_FORMAT:
                raise UsageError(f"{path} is not a checkpoint")
            if manifest.get("version") != CHECKPOINT_VERSION:
                raise UsageError(f"{path}: checkpoint version {manifest.get('version')} is not supported "
                                 f"(this build reads version {CHECKPOINT_VERSION}); retrain to regenerate it")
            blobs = {n: np.load(io.BytesIO(zf.read(n)), allow_pickle=False)
                     for n in zf.namelist() if n.endswith(".npy")}
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: unreadable checkpoint ({exc})") from None
    return Checkpoint(path, manifest, blobs)


def model_from_checkpoint(ckpt: Checkpoint) -> S.SelfRGNN:
    model = S.SelfRGNN(**ckpt.model_config)
    for name, p in model.named_parameters().items():
        blob = ckpt.blobs[f"param/{name}.npy"]
        if blob.shape != p.shape:
            raise UsageError(f"checkpoint parameter {name} has shape {blob.shape}, model expects {p.shape}")
        p.value = blob.astype(np.float64)
    return model


def restore_trainer(ckpt: Checkpoint, trainer: S.Trainer) -> None:
    names = ckpt.manifest["parameters"]
    st = ckpt.manifest["trainer"]
    wins = [(w["t"], ckpt.blobs[f"ricci/{i}/kappas.npy"], ckpt.blobs[f"ricci/{i}/times.npy"], w["n_edges_seen"])
            for i, w in enumerate(st["windows"])]
    trainer.load_state_dict({
        "step": st["step"], "nonfinite": st["nonfinite"], "rng": st["rng"], "windows": wins,
        "adam": {"t": st["adam_t"], "m": [ckpt.blobs[f"adam_m/{n}.npy"] for n in names],
                 "v": [ckpt.blobs[f"adam_v/{n}.npy"] for n in names]},
    })
    trainer.log = [(int(r[0]), *map(float, r[1:])) for r in ckpt.blobs["log.npy"]]


def merge_with_checkpoint(ckpt: Checkpoint, explicit: dict) -> dict:
    """Checkpoint config overridden by explicit keys; shape keys must agree.

    Outputs go next to the checkpoint unless ``out`` is given.
    """
    base = resolve(ckpt.config)
    base["out"] = str(ckpt.path.parent)
    for key in SHAPE_KEYS:
        if key in explicit and explicit[key] != base[key]:
            raise UsageError(f"dimension mismatch: checkpoint has {key}={base[key]}, "
                             f"config has {key}={explicit[key]}")
    return resolve(explicit, base)


def check_features(model: S.SelfRGNN, graph: D.TemporalGraph) -> None:
    want = model.config["feature_dim"]
    if graph.feature_dim != want:
        raise UsageError(f"dimension mismatch: checkpoint has feature_dim={want}, "
                         f"data has feature_dim={graph.feature_dim}")


# -- commands ---------------------------------------------------------------------------------------


def cmd_train(cfg: dict, resume=None, explicit: dict | None = None, progress=None) -> S.Trainer:
    """Train on the split's training events; writes the checkpoint and the per-step log."""
    ckpt = None
    if resume is not None:
        ckpt = read_checkpoint(resume)
        cfg = merge_with_checkpoint(ckpt, explicit or {})
    validate(cfg)
    graph = load_graph(cfg)
    train_graph = graph.subgraph(make_split(cfg, graph).train)
    model = build_model(cfg, train_graph) if ckpt is None else model_from_checkpoint(ckpt)
    check_features(model, graph)
    trainer = S.Trainer(model, train_graph, train_config(cfg))
    if ckpt is not None:
        restore_trainer(ckpt, trainer)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        while trainer.step_count < cfg["steps"]:
            row = trainer.step()
            if progress is not None:
                progress(row)
    finally:
        (out / LOG_NAME).write_text(S.format_log(trainer.log))
    save_checkpoint(out / CHECKPOINT_NAME, cfg, model, trainer)
    return trainer


def _from_checkpoint(checkpoint, explicit: dict):
    ckpt = read_checkpoint(checkpoint)
    cfg = merge_with_checkpoint(ckpt, explicit)
    validate(cfg)
    model = model_from_checkpoint(ckpt)
    graph = load_graph(cfg)
    check_features(model, graph)
    return cfg, model, graph


def cmd_eval(checkpoint, explicit: dict, task: str, split_mode: str | None = None) -> E.EvalReport:
    """Frozen-encoder link or node evaluation; writes and returns the report."""
    cfg, model, graph = _from_checkpoint(checkpoint, explicit)
    sp = make_split(cfg, graph, split_mode)
    if task == "link":
        report = E.link_eval(graph, sp, model, n_runs=cfg["eval_runs"], seed=cfg["seed"],
                             decoder=E.FermiDirac(cfg["fd_r"], cfg["fd_temp"]))
    elif task == "node":
        report = E.node_eval(graph, sp, model, n_runs=cfg["node_runs"], seed=cfg["seed"],
                             n_centroids=cfg["n_centroids"], epochs=cfg["head_epochs"], lr=cfg["head_lr"])
    else:
        raise UsageError(f"unknown task {task!r}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / f"eval_{task}_{sp.mode}.csv").write_text(report.format())
    return report


def curvature_trace(model: S.SelfRGNN, graph: D.TemporalGraph, cfg: dict, n_samples: int) -> list[tuple]:
    """``(t, kappa_curnn, kappa_hat, n_edges_seen)`` at evenly spaced times over the data span."""
    if n_samples < 1:
        raise UsageError("n_samples must be positive")
    lo, hi = graph.time_span
    times = np.linspace(lo, hi, n_samples) if n_samples > 1 else np.array([lo])
    trainer = S.Trainer(model, graph, train_config(cfg))
    rows = []
    with T.no_grad():
        k_curnn = model.kappa(times).value.reshape(-1)
        for t, k in zip(times, k_curnn):
            win = trainer.window_at(float(t))
            k_hat = float("nan")
            seen = int(np.searchsorted(graph.ts, t, side="right"))
            if win is not None:
                seen = win.n_edges_seen
                if len(win.kappas):
                    k_hat = float(trainer.kappa_hat([win]).value.reshape(-1)[0])
            rows.append((float(t), float(k), k_hat, seen))
    return rows


def format_trace(rows) -> str:
    lines = [",".join(TRACE_COLUMNS)]
    lines += [f"{t!r},{k!r},{h!r},{int(n)}" for t, k, h, n in rows]
    return "\n".join(lines) + "\n"


def cmd_curvature_trace(checkpoint, explicit: dict, n_samples: int | None = None) -> list[tuple]:
    cfg, model, graph = _from_checkpoint(checkpoint, explicit)
    rows = curvature_trace(model, graph, cfg, n_samples or cfg["trace_samples"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "curvature_trace.csv").write_text(format_trace(rows))
    return rows


def cmd_synth(cfg: dict) -> Path:
    validate(cfg)
    graph = load_graph(dict(cfg, data=""))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{cfg['synth']}.csv"
    D.save_csv(graph, path)
    return path


def cmd_export(checkpoint, explicit: dict, t: float | None = None) -> Path:
    """Ambient embeddings of every node at ``t`` (default: the end of the data span)."""
    cfg, model, graph = _from_checkpoint(checkpoint, explicit)
    t = graph.time_span[1] if t is None else float(t)
    with T.no_grad():
        emb = model.encode(graph, np.arange(graph.n_nodes), np.full(graph.n_nodes, t))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "embeddings.csv"
    R.write_embeddings(emb, path)
    return path


# -- argument parsing -------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k} (default {o.default!r}): {o.help}" for k, o in OPTIONS.items())
    parser = _Parser(prog="riemtg", description="Curvature-varying Riemannian temporal graph embeddings.",
                     epilog="config keys:\n" + keys, formatter_class=argparse.RawDescriptionHelpFormatter)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="override the seed key")
    common.add_argument("--out", help="override the out key")
    common.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="self-supervised training")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint")
    for name, text in (("eval", "frozen-encoder evaluation"), ("curvature-trace", "sample learned curvature"),
                       ("export-embeddings", "write node embeddings")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help=f"checkpoint file (default OUT/{CHECKPOINT_NAME})")
        if name == "eval":
            p.add_argument("--task", choices=("link", "node"), default="link")
            p.add_argument("--split", choices=("transductive", "inductive"), help="override split_mode")
        if name == "curvature-trace":
            p.add_argument("--samples", type=int, help="override trace_samples")
        if name == "export-embeddings":
            p.add_argument("--time", type=float, help="embedding time (default: end of the data)")
    sub.add_parser("synth", parents=[common],
                   help="write a synthetic event stream (with labels, without node features) as CSV")
    return parser


def explicit_settings(args) -> dict:
    explicit = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        explicit.update(parse_config_text(path.read_text(), str(path)))
    explicit.update(parse_overrides(args.set))
    if args.seed is not None:
        explicit["seed"] = args.seed
    if args.out is not None:
        explicit["out"] = args.out
    return explicit


def _progress(row):
    step = row[0]
    if step % 100 == 0:
        print(f"step {step} loss {row[1]:.6g} kappa {row[4]:.4g}", file=sys.stderr, flush=True)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    explicit = explicit_settings(args)
    if args.command in ("train", "synth") and not getattr(args, "resume", None):
        cfg = resolve(explicit)
        validate(cfg)
        if args.dry_run:
            sys.stdout.write(format_config(cfg))
            return 0
        if args.command == "synth":
            print(cmd_synth(cfg))
        else:
            cmd_train(cfg, progress=_progress)
        return 0
    checkpoint = getattr(args, "resume", None) or args.checkpoint or \
        str(Path(explicit.get("out", DEFAULTS["out"])) / CHECKPOINT_NAME)
    if args.dry_run:
        cfg = merge_with_checkpoint(read_checkpoint(checkpoint), explicit)
        validate(cfg)
        sys.stdout.write(format_config(cfg))
        return 0
    if args.command == "train":
        cmd_train(None, resume=checkpoint, explicit=explicit, progress=_progress)
    elif args.command == "eval":
        sys.stdout.write(cmd_eval(checkpoint, explicit, args.task, args.split).format())
    elif args.command == "curvature-trace":
        sys.stdout.write(format_trace(cmd_curvature_trace(checkpoint, explicit, args.samples)))
    else:
        print(cmd_export(checkpoint, explicit, args.time))
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except S.TrainingDiverged as exc:
        print(f"riemtg: training diverged: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"riemtg: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"riemtg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
