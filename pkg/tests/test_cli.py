import json
import re
import subprocess
import sys

import numpy as np
import pytest

from phgcn.bench import BENCH_COLUMNS, bench_global, read_embeddings, write_bench
from phgcn.cli import build_parser, main
from phgcn.gradcheck import random_graph
from phgcn.graph import load_graph, save_graph
from phgcn.model import Model, make_config, save_model
from phgcn.training import METRICS_COLUMNS, read_metrics

REPORT_LINE = re.compile(r"^(\S+)\s+max_rel_err (\S+)\s+tol (\S+)\s+(PASS|FAIL)$")


@pytest.fixture
def tsv_graph(tmp_path, rng):
    g = random_graph(rng, 40, 120, 5, n_classes=3)
    nodes, edges = tmp_path / "g.nodes.tsv", tmp_path / "g.edges.tsv"
    save_graph(g, nodes, edges)
    return nodes, edges


def test_subcommands():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"train", "motif", "gradcheck", "bench", "dump-embeddings"}


class TestGradcheck:
    def test_default_passes(self, capsys):
        assert main(["gradcheck", "--seed", "0"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        rows = [REPORT_LINE.match(line) for line in lines[:-1]]
        assert all(rows)
        names = {m.group(1) for m in rows}
        assert {"matmul", "lattice_features", "lattice_positions", "global_aggregate_lattice"} <= names
        assert any(n.startswith("model:") for n in names)
        assert all(float(m.group(2)) < float(m.group(3)) for m in rows)
        assert lines[-1] == f"{len(rows)}/{len(rows)} checks passed"

    @pytest.mark.parametrize("op", ["matmul", "lattice_filter"])
    def test_corrupted_backward_fails(self, capsys, op):
        assert main(["gradcheck", "--corrupt", op]) == 1
        out = capsys.readouterr().out
        assert "FAIL" in out

    def test_exit_code_from_process(self):
        proc = subprocess.run([sys.executable, "-m", "phgcn", "gradcheck", "--corrupt", "elu"],
                              capture_output=True, text=True)
        assert proc.returncode != 0
        assert "checks passed" in proc.stdout


class TestBench:
    def test_single_size_one_row(self, tmp_path, capsys):
        assert main(["bench", "--sizes", "1000", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "bench.csv").read_text().splitlines()
        assert lines[0] == ",".join(BENCH_COLUMNS)
        assert len(lines) == 2
        row = dict(zip(BENCH_COLUMNS, lines[1].split(",")))
        assert row["size"] == "1000"
        assert float(row["lattice_ms"]) > 0 and float(row["exact_ms"]) > 0
        assert row["threads"] == "1"

    def test_sizes_echoed(self, tmp_path):
        rows = bench_global([50, 120, 300], repeats=1)
        write_bench(rows, tmp_path / "b.csv")
        sizes = [int(line.split(",")[0]) for line in (tmp_path / "b.csv").read_text().splitlines()[1:]]
        assert sizes == [50, 120, 300]

    def test_skip_exact(self):
        (row,) = bench_global([100], exact=False, repeats=1)
        assert np.isnan(row["exact_ms"])

    def test_descending_rejected(self):
        with pytest.raises(ValueError):
            bench_global([200, 100])


class TestDumpEmbeddings:
    def wisconsin_shaped(self, tmp_path, rng):
        g = random_graph(rng, 251, 500, 12, n_classes=5)
        nodes, edges = tmp_path / "w.nodes.tsv", tmp_path / "w.edges.tsv"
        save_graph(g, nodes, edges)
        model = Model(make_config("phgcn", 12, 5, hidden=4, heads=2, embed_dim=2, seed=3))
        save_model(model, tmp_path / "ckpt")
        return model, nodes, edges

    def test_two_heads_251_rows_round_trip(self, tmp_path, rng, capsys):
        model, nodes, edges = self.wisconsin_shaped(tmp_path, rng)
        out = tmp_path / "emb"
        assert main(["dump-embeddings", "--checkpoint", str(tmp_path / "ckpt"), "--nodes", str(nodes),
                     "--edges", str(edges), "--out", str(out)]) == 0
        files = sorted(out.glob("*.csv"))
        assert [f.name for f in files] == ["embeddings_layer0_head0.csv", "embeddings_layer0_head1.csv"]
        graph = load_graph(nodes, edges)
        expected = model.embeddings(graph, 0)
        for a, f in enumerate(files):
            ids, labels, coords = read_embeddings(f)
            assert len(ids) == 251 and coords.shape == (251, 2)
            assert np.all(np.isfinite(coords))
            np.testing.assert_array_equal(labels, graph.labels)
            np.testing.assert_array_equal(coords, expected[a])
        assert f.read_text().splitlines()[0] == "node_id,label,x0,x1"

    def test_dimension_mismatch(self, tmp_path, rng):
        _, nodes, edges = self.wisconsin_shaped(tmp_path, rng)
        wrong = Model(make_config("phgcn", 7, 5, embed_dim=2))
        save_model(wrong, tmp_path / "bad")
        with pytest.raises(ValueError):
            main(["dump-embeddings", "--checkpoint", str(tmp_path / "bad"), "--nodes", str(nodes),
                  "--edges", str(edges), "--out", str(tmp_path / "x")])


class TestTrain:
    def run(self, tmp_path, tsv_graph, name, *extra):
        nodes, edges = tsv_graph
        out = tmp_path / name
        argv = ["train", "--nodes", str(nodes), "--edges", str(edges), "--out", str(out),
                "--max-iters", "4", "--deterministic", *extra]
        assert main(argv) == 0
        return out

    def test_outputs(self, tmp_path, tsv_graph, capsys):
        out = self.run(tmp_path, tsv_graph, "a")
        assert {p.name for p in out.iterdir()} >= {"metrics.csv", "config.json", "checkpoint.bin",
                                                   "train_config.json", "summary.json"}
        assert (out / "metrics.csv").read_text().splitlines()[0] == ",".join(METRICS_COLUMNS)
        recs = read_metrics(out / "metrics.csv")
        assert [r.iteration for r in recs] == [0, 1, 2, 3]
        assert all(r.wall_ms == 0.0 for r in recs)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["test_acc"] == recs[-1].test_acc

    def test_deterministic_bytes(self, tmp_path, tsv_graph, capsys):
        a = self.run(tmp_path, tsv_graph, "a", "--seed", "11")
        b = self.run(tmp_path, tsv_graph, "b", "--seed", "11")
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()

    def test_flags_override_config(self, tmp_path, tsv_graph, capsys):
        cfg = tmp_path / "cfg.json"
        model = {"hidden": 3, "heads": 1, "dropout": 0.0, "attn_dropout": 0.0}
        cfg.write_text(json.dumps({"lr": 0.1, "max_iters": 2, "model": model}))
        out = self.run(tmp_path, tsv_graph, "c", "--config", str(cfg), "--lr", "0.0")
        used = json.loads((out / "train_config.json").read_text())
        assert used["lr"] == 0.0 and used["max_iters"] == 4
        assert used["model"]["hidden"] == 3 and used["model"]["embed_dim"] == 4
        losses = [r.train_loss for r in read_metrics(out / "metrics.csv")]
        assert len(set(losses)) == 1

    def test_missing_data(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["train", "--out", str(tmp_path)])

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("[1, 2")
        with pytest.raises(SystemExit):
            main(["train", "--config", str(cfg)])


class TestMotifCommand:
    def test_smoke(self, tmp_path, capsys):
        cfg = tmp_path / "m.json"
        cfg.write_text(json.dumps({"iterations": 2, "eval_every": 1, "eval_graphs": 3}))
        assert main(["motif", "--config", str(cfg), "--kind", "gat", "--out", str(tmp_path / "m"),
                     "--deterministic"]) == 0
        recs = read_metrics(tmp_path / "m" / "metrics.csv")
        assert [r.iteration for r in recs] == [0, 1, 2]
        summary = json.loads((tmp_path / "m" / "summary.json").read_text())
        assert summary["kind"] == "gat"

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "m.json"
        cfg.write_text(json.dumps({"itterations": 2}))
        with pytest.raises(SystemExit):
            main(["motif", "--config", str(cfg)])
