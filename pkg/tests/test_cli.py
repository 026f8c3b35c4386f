import json

import pytest

from evrec.cli import main
from evrec.config import ExperimentConfig
from evrec.records import dumps_table, read_table


@pytest.fixture
def tiny_config(tmp_path):
    cfg = ExperimentConfig().to_dict()
    cfg["recognizer"].update(epochs=2, hidden=8)
    cfg["stage1"].update(train_episodes=30, val_episodes=10, ood_samples=20)
    cfg["policy"].update(updates=2, episodes_per_update=8, minibatch=4, epochs=1, hidden=8,
                         pool_size=16, checkpoint_every=1)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def run(*argv):
    return main([str(a) for a in argv])


class TestGenDataset:
    def test_bytes_reproducible(self, tmp_path, capsys):
        a, b = tmp_path / "a" / "t.jsonl", tmp_path / "b" / "t.jsonl"
        assert run("gen-dataset", "--n", 50, "--seed", 7, "--out", a) == 0
        assert run("gen-dataset", "--n", 50, "--seed", 7, "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()
        assert (a.parent / "resolved_config.json").read_bytes() == (b.parent / "resolved_config.json").read_bytes()
        assert a.with_suffix(".summary.csv").exists()
        out = capsys.readouterr().out
        assert "Easy" in out and "total" in out

    def test_bad_config_path(self, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        assert run("gen-dataset", "--out", tmp_path / "t.jsonl", "--config", missing) == 2
        assert str(missing) in capsys.readouterr().err

    def test_bad_config_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"bench": {"n": 5, "colour": 1}}))
        assert run("gen-dataset", "--out", tmp_path / "t.jsonl", "--config", p) == 2


class TestPipeline:
    def test_policy_needs_recognizer(self, tmp_path, tiny_config, capsys):
        assert run("train", "--stage", "policy", "--config", tiny_config, "--out", tmp_path / "r") == 2
        assert "recognizer" in capsys.readouterr().err

    def test_end_to_end(self, tmp_path, tiny_config):
        run_dir, ev_dir, rep_dir = tmp_path / "run", tmp_path / "ev", tmp_path / "rep"
        assert run("gen-dataset", "--n", 40, "--seed", 3, "--out", tmp_path / "t.jsonl") == 0
        assert run("train", "--stage", "all", "--config", tiny_config, "--out", run_dir) == 0
        for name in ("recognizer.json", "policy.json", "recognizer_metrics.csv", "policy_metrics.csv",
                     "resolved_config.json"):
            assert (run_dir / name).exists(), name
        rc = run("evaluate", "--agent", "ours,fixation,random,singleview",
                 "--fusion", "average,vote,last,max,evidential", "--sigma-list", "0,2",
                 "--testset", tmp_path / "t.jsonl", "--ckpt", run_dir, "--out", ev_dir)
        assert rc == 0
        _, rows = read_table(ev_dir / "evaluation.csv", "evaluation")
        assert len(rows) == 4 * 5 * 2 * 4
        assert all(r["top3"] >= r["top1"] for r in rows)
        _, curves = read_table(ev_dir / "step_curves.csv", "step-curve")
        assert max(r["step"] for r in curves) == 10
        assert "Hard" in (ev_dir / "summary.txt").read_text()
        first = (ev_dir / "evaluation.csv").read_bytes()
        assert run("evaluate", "--agent", "ours,fixation,random,singleview",
                   "--fusion", "average,vote,last,max,evidential", "--sigma-list", "0,2",
                   "--testset", tmp_path / "t.jsonl", "--ckpt", run_dir, "--out", ev_dir) == 0
        assert (ev_dir / "evaluation.csv").read_bytes() == first
        assert run("report", "--in", tmp_path, "--out", rep_dir) == 0
        rep = json.loads((rep_dir / "report.json").read_text())
        assert rep["evaluation"] and rep["step_curves"]
        dat = sorted(rep_dir.glob("*.dat"))
        assert dat and "# step success u_fused" in dat[0].read_text()

    def test_resume(self, tmp_path, tiny_config):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run("train", "--stage", "all", "--config", tiny_config, "--out", a, "--updates", 3) == 0
        assert run("train", "--stage", "recognizer", "--config", tiny_config, "--out", b) == 0
        assert run("train", "--stage", "policy", "--config", tiny_config, "--out", b,
                   "--updates", 3, "--stop-after", 1) == 0
        assert run("train", "--stage", "policy", "--config", tiny_config, "--out", b,
                   "--updates", 3, "--resume") == 0
        assert (a / "policy.json").read_bytes() == (b / "policy.json").read_bytes()
        assert (a / "policy_metrics.csv").read_bytes() == (b / "policy_metrics.csv").read_bytes()

    def test_evaluate_missing_inputs(self, tmp_path):
        assert run("evaluate", "--testset", tmp_path / "none.jsonl", "--out", tmp_path / "o") == 2
        assert run("gen-dataset", "--n", 5, "--seed", 1, "--out", tmp_path / "t.jsonl") == 0
        assert run("evaluate", "--agent", "ours", "--testset", tmp_path / "t.jsonl",
                   "--ckpt", tmp_path / "missing", "--out", tmp_path / "o") == 2

    def test_oracle_evaluation(self, tmp_path):
        assert run("gen-dataset", "--n", 30, "--seed", 1, "--out", tmp_path / "t.jsonl") == 0
        assert run("evaluate", "--agent", "fixation", "--recognizer", "oracle",
                   "--testset", tmp_path / "t.jsonl", "--out", tmp_path / "o") == 0


class TestReport:
    def test_empty_dir(self, tmp_path, capsys):
        (tmp_path / "in").mkdir()
        assert run("report", "--in", tmp_path / "in", "--out", tmp_path / "out") == 0
        assert "warning" in capsys.readouterr().err

    def test_mixed_versions(self, tmp_path, capsys):
        d = tmp_path / "in"
        d.mkdir()
        row = {"agent": "ours", "fusion": "evidential", "sigma": 0.0, "step": 1, "success": 0.5,
               "mean_u_prefuse": 0.9, "mean_u_fused": 0.9}
        good = dumps_table("step-curve", [row])
        (d / "a.csv").write_text(good)
        (d / "b.csv").write_text(good.replace(" v1\n", " v2\n", 1))
        assert run("report", "--in", d, "--out", tmp_path / "out") == 2
        assert "v2" in capsys.readouterr().err

    def test_reshapes_curve(self, tmp_path):
        d = tmp_path / "in"
        d.mkdir()
        rows = [{"agent": "ours", "fusion": "evidential", "sigma": 2.0, "step": s, "success": 0.5 + s / 100,
                 "mean_u_prefuse": 0.9, "mean_u_fused": 0.9 - s / 100} for s in (2, 1, 3)]
        (d / "c.csv").write_text(dumps_table("step-curve", rows))
        assert run("report", "--in", d, "--out", tmp_path / "out") == 0
        rep = json.loads((tmp_path / "out" / "report.json").read_text())
        (curve,) = rep["step_curves"].values()
        assert curve["step"] == [1, 2, 3]
        assert curve["u_fused"] == pytest.approx([0.89, 0.88, 0.87])


class TestMisc:
    def test_print_config(self, capsys):
        assert run("--print-config") == 0
        cfg = json.loads(capsys.readouterr().out)
        assert ExperimentConfig.from_dict(cfg).to_dict() == cfg

    def test_no_command(self):
        assert run() == 2

    def test_bad_flag(self):
        assert run("train", "--stage", "nonsense") == 2
