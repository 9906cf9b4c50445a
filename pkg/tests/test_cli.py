import hashlib
import json
import subprocess
import sys

import pytest

from mhstm.cli import main, resolve_settings


def run(*argv):
    return main([str(a) for a in argv])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    """A small generated corpus and a short fit on it."""
    d = tmp_path_factory.mktemp("small")
    assert run("generate", "--hierarchy", "2(2,2)", "--n-terms", 40, "--brands", 3, "--docs", 20,
               "--seed", 1, "--out", d) == 0
    assert run("train", "--corpus", d / "corpus.json", "--iters", 4, "--gamma", 0.5, "--min-df", 1,
               "--seed", 2, "--out", d / "model.json") == 0
    return d


def test_generate_grid(tmp_path, capsys):
    assert run("generate", "--scenario", "grid", "--out", tmp_path) == 0
    corpus = json.loads((tmp_path / "corpus.json").read_text())
    assert len(corpus["reviews"]) == 2000
    assert len(corpus["vocabulary"]["terms"]) == 9
    assert "reviews=2000" in capsys.readouterr().out


def test_generate_is_byte_identical(tmp_path):
    for sub in ("a", "b"):
        assert run("generate", "--hierarchy", "3(3,2,4)", "--eta", 0.1, "--seed", 7, "--brands", 2,
                   "--docs", 10, "--out", tmp_path / sub) == 0
    for name in ("corpus.json", "truth.json"):
        assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)


def test_generate_deeper_hierarchy(tmp_path):
    assert run("generate", "--hierarchy", "4(6,5,2,4)", "--brands", 2, "--docs", 5, "--out", tmp_path) == 0
    truth = json.loads((tmp_path / "truth.json").read_text())
    levels = truth["tree"]["level"]
    assert [levels.count(l) for l in range(3)] == [1, 4, 17]


def test_generate_bad_hierarchy_exits_nonzero(tmp_path):
    assert run("generate", "--hierarchy", "3(1,2)", "--out", tmp_path) != 0


def test_train_defaults():
    s = resolve_settings("train", {})
    assert s["rho2"] == 0.5 and s["eta"] == 0.1


def test_train_iters_zero_is_an_error(small):
    assert run("train", "--corpus", small / "corpus.json", "--iters", 0, "--out", small / "x.json") == 1


def test_unknown_config_key(small, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("gamma: 0.5\nbogus: 1\n")
    assert run("train", "--config", cfg, "--corpus", small / "corpus.json") == 1


def test_config_file_then_flags(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("gamma: 0.25\nalpha: 2\nepsilon: none\n")
    s = resolve_settings("train", {"config": str(cfg), "alpha": 3.0})
    assert s["gamma"] == 0.25 and s["alpha"] == 3.0 and s["epsilon"] is None


def test_missing_file_exit_code(tmp_path):
    assert run("train", "--corpus", tmp_path / "nope.json", "--iters", 1) == 2
    assert run("rank", "--model", tmp_path / "nope.json") == 2


def test_model_file_is_deterministic(small):
    out = small / "again.json"
    assert run("train", "--corpus", small / "corpus.json", "--iters", 4, "--gamma", 0.5, "--min-df", 1,
               "--seed", 2, "--out", out) == 0
    assert digest(out) == digest(small / "model.json")


def test_rank_topic(small, capsys):
    model = json.loads((small / "model.json").read_text())
    nodes = model["tree"]["nodes"]
    parents = {n["parent"] for n in nodes}
    leaf = next(n["id"] for n in nodes if n["id"] not in parents)
    assert run("rank", "--model", small / "model.json", "--topic", leaf, "--format", "csv") == 0
    rows = capsys.readouterr().out.strip().splitlines()[1:]
    assert len(rows) == 3
    scores = [float(r.split(",")[3]) for r in rows]
    assert scores == sorted(scores, reverse=True)
    assert run("rank", "--model", small / "model.json", "--topic", 10**6) == 2


def test_export_tree_dot(small, capsys):
    assert run("export-tree", "--model", small / "model.json") == 0
    dot = capsys.readouterr().out
    model = json.loads((small / "model.json").read_text())
    n = len(model["tree"]["nodes"])
    assert dot.startswith("digraph")
    assert dot.count("shape=record") == n and dot.count("->") == n - 1
    assert run("export-tree", "--model", small / "model.json", "--format", "json", "--out", small / "t.json") == 0
    assert len(json.loads((small / "t.json").read_text())) == n


def test_evaluate_reports_every_metric(small, capsys):
    assert run("evaluate", "--model", small / "model.json", "--corpus", small / "corpus.json",
               "--truth", small / "truth.json", "--particles", 50) == 0
    summary = json.loads(capsys.readouterr().out)["summary"]
    for key in ("spearman", "kendall", "ap@5", "topic_accuracy", "coherence", "hierarchical_affinity",
                "held_out_per_word"):
        assert summary[key] is not None, key
    assert run("evaluate", "--model", small / "model.json", "--corpus", small / "corpus.json",
               "--particles", 20, "--format", "csv") == 0
    assert capsys.readouterr().out.startswith("scenario,seed,metric,value")


def test_likelihood(small, capsys):
    assert run("likelihood", "--model", small / "model.json", "--corpus", small / "corpus.json",
               "--particles", 20) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["per_word"] < 0 and out["tokens"] > 0


def test_profile(small, capsys):
    assert run("profile", "--corpus", small / "corpus.json", "--depths", "2,3", "--iters", 1, "--warmup", 0) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["depth"] for r in rows] == [2, 3]
    assert all(r["path_seconds"] > 0 and r["level_seconds"] > 0 for r in rows)


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mhstm.cli", "train", "--iters", "0", "--corpus", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert "error" in proc.stderr
