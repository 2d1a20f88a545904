import json
import os

import numpy as np
import pytest

from rcinfer import cli
from rcinfer.convtree import marginals
from rcinfer.learning import format_dataset, load_dataset
from rcinfer.model import RCModel, hard_count_table, load_model, model_to_dict
from rcinfer.synthetic import random_rc_model


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def model_file(tmp_path):
    m = random_rc_model(np.random.default_rng(7), 9)
    return m, write_json(tmp_path / "m.json", model_to_dict(m))


class TestMarginals:
    def test_rows_and_round_trip(self, tmp_path, model_file):
        m, path = model_file
        out = tmp_path / "out.csv"
        assert cli.main(["marginals", path, "--out", str(out)]) == 0
        leaf, counts, log_z = cli.read_marginals_csv(out.read_text())
        assert leaf.size == m.D
        ref = marginals(m)
        assert f"{log_z:.12g}" == f"{ref.log_z:.12g}"
        for a, b in zip(leaf, ref.leaf_marginals):
            assert f"{a:.12g}" == f"{b:.12g}"
        assert set(counts) == set(ref.count_marginals)

    def test_malformed_tree(self, tmp_path, capsys):
        doc = {"num_vars": 2, "unaries": [[0, 0], [0, 0]],
               "tree": {"vars": [0, 1], "children": [{"vars": [0]}, {"vars": [0]}]}}
        out = tmp_path / "out.csv"
        assert cli.main(["marginals", write_json(tmp_path / "bad.json", doc),
                         "--out", str(out)]) == 2
        assert "node 0" in capsys.readouterr().err
        assert not out.exists()

    def test_zero_mass(self, tmp_path):
        doc = model_to_dict(RCModel.standard(np.full(3, -np.inf), hard_count_table(3, {2})))
        out = tmp_path / "out.csv"
        assert cli.main(["marginals", write_json(tmp_path / "z.json", doc),
                         "--out", str(out)]) == 3
        assert not out.exists()
        assert not [f for f in os.listdir(tmp_path) if f.startswith(".tmp-")]


class TestSample:
    def test_empty(self, tmp_path, model_file):
        out = tmp_path / "s.txt"
        assert cli.main(["sample", model_file[1], "-n", "0", "--out", str(out)]) == 0
        assert out.read_bytes() == b""

    def test_seeded_identical(self, tmp_path, model_file):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        for p in (a, b):
            cli.main(["sample", model_file[1], "-n", "50", "--seed", "11", "--out", str(p)])
        assert a.read_bytes() == b.read_bytes()
        assert load_dataset(a).shape == (50, 9)

    def test_hard_root(self, tmp_path):
        doc = model_to_dict(RCModel.standard(np.zeros(8), hard_count_table(8, {3})))
        out = tmp_path / "s.txt"
        cli.main(["sample", write_json(tmp_path / "h.json", doc), "-n", "200", "--out", str(out)])
        assert np.all(load_dataset(out).sum(axis=1) == 3)


class TestBench:
    def test_small_run(self, tmp_path):
        out = tmp_path / "b.csv"
        assert cli.main(["bench", "--d-min", "16", "--d-max", "64", "--out", str(out)]) == 0
        recs = cli.read_bench_csv(out.read_text())
        assert len(recs) == 9
        assert all(r.seconds > 0 and r.reps >= 3 for r in recs)

    def test_memory_budget_dnf(self):
        recs = cli.run_bench(["chain", "fft_tree"], 64, 256, memory_budget=200_000)
        chain = {r.D: r.status for r in recs if r.algorithm == "chain"}
        assert chain == {64: "ok", 128: "DNF", 256: "DNF"}
        assert all(r.status == "ok" for r in recs if r.algorithm == "fft_tree")

    def test_all_dnf_exit_code(self, tmp_path):
        assert cli.main(["bench", "--algorithms", "chain", "--d-min", "64", "--d-max", "64",
                         "--memory-budget", "10", "--out", str(tmp_path / "b.csv")]) == 5

    @pytest.mark.parametrize("args", [["--d-min", "48"], ["--d-min", "64", "--d-max", "32"],
                                      ["--reps", "2"], ["--algorithms", "magic"]])
    def test_bad_arguments(self, args, tmp_path):
        assert cli.main(["bench", "--d-max", "64", *args, "--out",
                         str(tmp_path / "b.csv")]) == 2

    def test_slope_helper(self):
        recs = [cli.BenchRecord("x", d, 1e-6 * d * d, 0) for d in (2, 4, 8, 16)]
        assert cli.loglog_slope(recs, "x") == pytest.approx(2.0)


class TestMatch:
    def test_permanent(self, tmp_path, capsys):
        path = write_json(tmp_path / "p.json", {"theta": [[0, 0], [0, 0]],
                                                "row_allowed": [1], "col_allowed": [1]})
        assert cli.main(["match", path]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "i,j,p"
        assert all(float(line.split(",")[2]) == pytest.approx(0.5) for line in lines[1:])

    def test_infeasible(self, tmp_path):
        path = write_json(tmp_path / "p.json", {"theta": [[0, 0], [0, 0]],
                                                "row_allowed": [2], "col_allowed": [0]})
        assert cli.main(["match", path]) == 3


class TestFitAndStruct:
    def test_struct_two_variables(self, tmp_path):
        data = tmp_path / "d.txt"
        data.write_text("01\n11\n00\n")
        out = tmp_path / "s.json"
        assert cli.main(["struct", str(data), "--out", str(out)]) == 0
        m = load_model(out)
        assert m.tree.internal_nodes().size == 1

    def test_fit_unary_then_marginals(self, tmp_path, capsys):
        Y = np.random.default_rng(2).integers(0, 2, (300, 6))
        data = tmp_path / "d.txt"
        data.write_text(format_dataset(Y))
        fitted = tmp_path / "f.json"
        assert cli.main(["fit", str(data), "--structure", "unary", "--iters", "400",
                         "--step", "4", "--out", str(fitted)]) == 0
        assert cli.main(["marginals", str(fitted)]) == 0
        leaf, _, _ = cli.read_marginals_csv(capsys.readouterr().out)
        np.testing.assert_allclose(leaf, Y.mean(axis=0), atol=1e-4)

    @pytest.mark.parametrize("structure", ["balanced", "adaptive", "anti"])
    def test_fit_structures(self, tmp_path, structure):
        data = tmp_path / "d.txt"
        data.write_text(format_dataset(np.random.default_rng(3).integers(0, 2, (50, 5))))
        out = tmp_path / "f.json"
        assert cli.main(["fit", str(data), "--structure", structure, "--iters", "10",
                         "--out", str(out)]) == 0
        assert load_model(out).tables

    def test_fit_bad_data(self, tmp_path):
        data = tmp_path / "d.txt"
        data.write_text("01\n2\n")
        assert cli.main(["fit", str(data)]) == 2

    def test_divergence_exit_code(self, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise cli.learning.DivergenceError("non-finite objective at iteration 3", 3)
        monkeypatch.setattr(cli.learning, "fit", diverge)
        data = tmp_path / "d.txt"
        data.write_text("01\n")
        out = tmp_path / "f.json"
        assert cli.main(["fit", str(data), "--out", str(out)]) == 4
        assert not out.exists()


class TestMil:
    def test_runs(self, tmp_path):
        bags = tmp_path / "b.txt"
        bags.write_text("label 1\n1 0\n0 1\nlabel 0\n-1 0\nlabel 1\n2 1\n")
        out = tmp_path / "w.json"
        assert cli.main(["mil", str(bags), "--model", "noisy-or", "--iters", "5",
                         "--threads", "2", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert len(doc["weights"]) == 2 and len(doc["bags"]) == 3
        assert all(0 <= b["p_positive"] <= 1 for b in doc["bags"])


class TestIsing:
    def test_generates(self, tmp_path):
        out = tmp_path / "d.txt"
        assert cli.main(["ising", "--height", "3", "--width", "4", "-n", "10", "--out",
                         str(out)]) == 0
        assert load_dataset(out).shape == (10, 12)

