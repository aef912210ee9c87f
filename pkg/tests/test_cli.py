import dataclasses

import numpy as np
import pytest

from riemtg import cli
from riemtg import data as D
from riemtg import ssl as S
from riemtg import tensor as T

SMALL = {"d": 8, "k_max": 5, "d_c": 8, "d_g": 8, "layers": 2, "synth_nodes": 16, "synth_events": 200,
         "batch_size": 32, "n_negatives": 8, "ricci_window": 16, "ricci_refresh": 3, "steps": 6}


def small_cfg(out, **kw):
    return cli.resolve({**SMALL, "out": str(out), **kw})


def set_args(**kw):
    return [a for k, v in {**SMALL, **kw}.items() for a in ("--set", f"{k}={v}")]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = small_cfg(out)
    trainer = cli.cmd_train(cfg)
    return out, cfg, trainer


# -- configuration --------------------------------------------------------------------------------


def test_defaults_match_library_defaults():
    tcfg = cli.train_config(cli.DEFAULTS)
    assert tcfg == S.TrainConfig()
    assert cli.contrast_config(cli.DEFAULTS) == S.ContrastConfig()
    assert (cli.DEFAULTS["d"], cli.DEFAULTS["layers"], cli.DEFAULTS["k_max"]) == (32, 2, 20)
    assert (cli.DEFAULTS["steps"], cli.DEFAULTS["batch_size"], cli.DEFAULTS["lr"]) == (2000, 128, 5e-3)
    assert all(o.help for o in cli.OPTIONS.values())


def test_config_text_parsing():
    text = "# comment\n\nd = 16\nlr=0.01  # trailing\nricci_cost=hop\n"
    assert cli.parse_config_text(text) == {"d": 16, "lr": 0.01, "ricci_cost": "hop"}
    with pytest.raises(cli.UsageError, match="unknown config key 'dim'"):
        cli.parse_config_text("dim=3")
    with pytest.raises(cli.UsageError, match="line|:1:"):
        cli.parse_config_text("d")
    with pytest.raises(cli.UsageError, match="expected int"):
        cli.parse_config_text("d=3.5")


def test_flags_override_the_file(tmp_path, capsys):
    conf = tmp_path / "run.conf"
    conf.write_text("seed=3\nsteps=10\nout=elsewhere\n")
    rc = cli.main(["train", "--config", str(conf), "--seed", "4", "--set", "steps=11", "--out",
                   str(tmp_path / "o"), "--dry-run"])
    assert rc == 0
    lines = capsys.readouterr().out.splitlines()
    assert "seed=4" in lines and "steps=11" in lines and f"out={tmp_path / 'o'}" in lines


def test_dry_run_prints_every_default_and_writes_nothing(tmp_path, capsys):
    assert cli.main(["train", "--dry-run", "--out", str(tmp_path / "o")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == len(cli.OPTIONS)
    assert "d=32" in lines and "k_max=20" in lines and "lr=0.005" in lines
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["train", "--set", "nope=1", "--dry-run"],
    ["train", "--set", "tau_plus=1.5", "--dry-run"],
    ["train", "--set", "d=7", "--dry-run"],
    ["train", "--config", "/nonexistent/run.conf"],
    ["eval", "--checkpoint", "/nonexistent/checkpoint.ckpt"],
])
def test_usage_errors_exit_one(argv, capsys):
    assert cli.main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_numerical_failure_exits_two(tmp_path, monkeypatch, capsys):
    def diverge(self):
        raise S.TrainingDiverged("10 consecutive non-finite losses at step 9")
    monkeypatch.setattr(S.Trainer, "step", diverge)
    assert cli.main(["train", "--out", str(tmp_path)] + set_args()) == 2
    assert "diverged" in capsys.readouterr().err
    assert (tmp_path / cli.LOG_NAME).read_text().startswith("step,")


# -- training and checkpoints ---------------------------------------------------------------------


def test_train_writes_checkpoint_and_log(trained):
    out, cfg, trainer = trained
    log = (out / cli.LOG_NAME).read_text().splitlines()
    assert log[0] == ",".join(S.LOG_COLUMNS)
    assert len(log) == 1 + cfg["steps"]
    ckpt = cli.read_checkpoint(out / cli.CHECKPOINT_NAME)
    assert ckpt.manifest["version"] == cli.CHECKPOINT_VERSION
    assert set(ckpt.manifest["parameters"]) == set(trainer.model.named_parameters())
    assert "param/time.omegas.npy" in ckpt.blobs and "param/estimator.gru.w_x.npy" in ckpt.blobs
    assert ckpt.manifest["trainer"]["step"] == cfg["steps"]


def test_checkpoint_round_trip_gives_identical_forward(trained):
    out, cfg, trainer = trained
    model = cli.model_from_checkpoint(cli.read_checkpoint(out / cli.CHECKPOINT_NAME))
    graph = cli.load_graph(cfg)
    nodes = np.arange(graph.n_nodes)
    times = np.linspace(*graph.time_span, graph.n_nodes)
    with T.no_grad():
        a = trainer.model.encode(graph, nodes, times)
        b = model.encode(graph, nodes, times)
    assert np.array_equal(a.tangent.value, b.tangent.value)
    assert np.array_equal(a.kappa.value, b.kappa.value)


def test_checkpoint_version_bump_is_rejected(trained, monkeypatch):
    out, _, _ = trained
    monkeypatch.setattr(cli, "CHECKPOINT_VERSION", cli.CHECKPOINT_VERSION + 1)
    with pytest.raises(cli.UsageError, match="version"):
        cli.read_checkpoint(out / cli.CHECKPOINT_NAME)


def test_non_checkpoint_file_is_rejected(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"not a zip")
    with pytest.raises(cli.UsageError):
        cli.read_checkpoint(bad)


def test_identical_runs_are_bitwise_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["train", "--out", str(tmp_path / name)] + set_args(steps=4)) == 0
    for f in (cli.CHECKPOINT_NAME, cli.LOG_NAME):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_resume_reproduces_the_next_step_bitwise(tmp_path):
    straight = cli.cmd_train(small_cfg(tmp_path / "a", steps=5))
    cli.cmd_train(small_cfg(tmp_path / "b", steps=4))
    resumed = cli.cmd_train(None, resume=tmp_path / "b" / cli.CHECKPOINT_NAME,
                            explicit={"steps": 5, "out": str(tmp_path / "b")})
    assert resumed.log[-1] == straight.log[-1]
    assert resumed.log == straight.log
    for f in (cli.CHECKPOINT_NAME, cli.LOG_NAME):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_resume_rejects_changed_dimensions(trained):
    out, _, _ = trained
    with pytest.raises(cli.UsageError, match="checkpoint has d=8, config has d=16"):
        cli.cmd_train(None, resume=out / cli.CHECKPOINT_NAME, explicit={"d": 16})


def test_smoke_training_lowers_the_loss(tmp_path):
    trainer = cli.cmd_train(cli.resolve({"steps": 300, "out": str(tmp_path)}))
    loss = np.array([r[1] for r in trainer.log])
    assert np.all(np.isfinite(loss))
    assert loss[-25:].mean() < loss[:25].mean()


# -- evaluation, tracing, export ------------------------------------------------------------------


def test_eval_reports_are_repeatable(trained, capsys):
    out, _, _ = trained
    argv = ["eval", "--out", str(out), "--task", "link", "--set", "eval_runs=3"]
    assert cli.main(argv) == 0
    first = capsys.readouterr().out
    assert cli.main(argv) == 0
    assert capsys.readouterr().out == first
    assert first.splitlines()[0] == "task,split,auc_mean,auc_ci95,n_runs,seed"
    assert (out / "eval_link_transductive.csv").read_text() == first


def test_eval_node_task_and_inductive_selector(trained):
    out, _, _ = trained
    ckpt = out / cli.CHECKPOINT_NAME
    rep = cli.cmd_eval(ckpt, {"node_runs": 1, "head_epochs": 20}, "node")
    assert rep.task == "node" and 0.0 <= rep.auc_mean <= 1.0
    rep = cli.cmd_eval(ckpt, {"eval_runs": 2}, "link", "inductive")
    assert rep.split == "inductive"


def test_eval_dimension_mismatch_names_both(trained, capsys):
    out, _, _ = trained
    assert cli.main(["eval", "--out", str(out), "--set", "d=16"]) == 1
    assert "checkpoint has d=8, config has d=16" in capsys.readouterr().err
    with pytest.raises(cli.UsageError, match="feature_dim=8.*feature_dim=4"):
        g = D.two_community(16, 200, feature_dim=4)
        path = out / "f4.csv"
        D.save_csv(dataclasses.replace(g, edge_features=g.features[g.src]), path)
        cli.cmd_eval(out / cli.CHECKPOINT_NAME, {"data": str(path)}, "link")


def test_node_eval_without_labels_is_a_usage_error(tmp_path, capsys):
    cfg = small_cfg(tmp_path, synth="tree_growth", steps=2)
    cli.cmd_train(cfg)
    assert cli.main(["eval", "--out", str(tmp_path), "--task", "node"]) == 1
    assert "labels" in capsys.readouterr().err


@pytest.mark.parametrize("n", [1, 4])
def test_curvature_trace_rows(trained, n):
    out, cfg, _ = trained
    rows = cli.cmd_curvature_trace(out / cli.CHECKPOINT_NAME, {}, n)
    assert len(rows) == n
    graph = cli.load_graph(cfg)
    lo, hi = graph.time_span
    assert rows[0][0] == lo
    if n > 1:
        assert rows[-1][0] == hi and rows[-1][3] == graph.n_events
    assert all(np.isfinite(r[1]) for r in rows)
    text = (out / "curvature_trace.csv").read_text().splitlines()
    assert text[0] == "t,kappa_curnn,kappa_hat,n_edges_seen" and len(text) == n + 1


def test_curvature_trace_matches_the_learned_curvature(trained):
    out, cfg, trainer = trained
    rows = cli.cmd_curvature_trace(out / cli.CHECKPOINT_NAME, {}, 3)
    with T.no_grad():
        k = trainer.model.kappa(np.array([r[0] for r in rows])).value.reshape(-1)
    assert np.array_equal(k, [r[1] for r in rows])


def test_export_embeddings_format(trained, capsys):
    out, cfg, _ = trained
    assert cli.main(["export-embeddings", "--out", str(out), "--time", "50"]) == 0
    lines = (out / "embeddings.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header[:3] == ["node_id", "t", "kappa"] and header[3:] == [f"c{i}" for i in range(cfg["d"] + 1)]
    assert len(lines) == 1 + cfg["synth_nodes"]
    row = lines[1].split(",")
    assert row[0] == "0" and float(row[1]) == 50.0


def test_synth_writes_a_loadable_graph(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path), "--set", "synth=clique_growth",
                     "--set", "synth_nodes=12", "--set", "synth_events=40"]) == 0
    with pytest.warns(UserWarning, match="zero node features"):
        g = D.load_csv(tmp_path / "clique_growth.csv")
    ref = D.clique_growth(12, 40, seed=0)
    assert np.array_equal(g.src, ref.src) and np.array_equal(g.dst, ref.dst) and np.array_equal(g.ts, ref.ts)
