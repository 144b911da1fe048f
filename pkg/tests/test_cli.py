import json
import subprocess
import sys
from importlib import resources

import pytest

from pflab.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, RunConfig, main
from pflab.dataset import read_dataset
from pflab.models import load_model

TINY = {"epochs": 3, "hidden_sizes": [16, 8], "batch_size": 8}


def write_config(tmp_path, out="run", **extra):
    cfg = {
        "case_path": "cases/ieee14.json",
        "n_samples": 25,
        "seed": 1,
        "output_dir": str(tmp_path / out),
        "models": {"gnn": TINY, "dnn": TINY, "cnn": TINY},
        **extra,
    }
    path = tmp_path / f"{out}.json"
    path.write_text(json.dumps(cfg))
    return path


class TestSolve:
    @pytest.mark.parametrize("method", ["acpf", "dcpf"])
    def test_ok(self, method, capsys, tmp_path):
        out = tmp_path / "sol.json"
        assert main(["solve", "cases/ieee14.json", "--method", method, "--json", str(out)]) == EXIT_OK
        text = capsys.readouterr().out
        assert "converged=True" in text
        doc = json.loads(out.read_text())
        assert len(doc["buses"]) == 14 and len(doc["branches"]) == 20
        assert doc["buses"][0]["id"] == 1

    def test_not_converged(self, capsys):
        assert main(["solve", "ieee14", "--max-iter", "1"]) == EXIT_NUMERICAL

    def test_missing_file(self, tmp_path, capsys):
        assert main(["solve", str(tmp_path / "missing.json")]) == EXIT_USAGE
        assert "error" in capsys.readouterr().err

    def test_malformed_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{oops")
        assert main(["solve", str(bad)]) == EXIT_USAGE

    def test_invalid_case(self, tmp_path, capsys):
        doc = json.loads(resources.files("pflab.cases").joinpath("ieee14.json").read_text())
        doc["buses"][1]["kind"] = "Slack"
        bad = tmp_path / "two_slack.json"
        bad.write_text(json.dumps(doc))
        assert main(["solve", str(bad)]) == EXIT_VALIDATION

    def test_bad_arguments(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["solve"])
        assert info.value.code == EXIT_USAGE
        with pytest.raises(SystemExit) as info:
            main(["frobnicate"])
        assert info.value.code == EXIT_USAGE

    def test_console_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "pflab.cli", "solve", "ieee14", "--method", "dcpf"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "DCPF" in proc.stdout


class TestConfig:
    def test_seed_from_environment(self, monkeypatch):
        monkeypatch.setenv("PFLAB_SEED", "42")
        assert RunConfig.load(None, {}).seed == 42
        assert RunConfig.load(None, {"seed": 3}).seed == 3

    def test_unknown_key(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"n_sample": 10}))
        assert main(["generate", "--config", str(path)]) == EXIT_USAGE

    def test_hash_changes_with_content(self):
        assert RunConfig(seed=1).hash != RunConfig(seed=2).hash
        assert RunConfig(seed=1).hash == RunConfig(seed=1).hash


class TestPipeline:
    def test_generate_train_evaluate(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert main(["generate", "--config", str(cfg)]) == EXIT_OK
        ds = read_dataset(out / "dataset.pfds")
        assert len(ds.samples) == 25 and len(ds.val_idx) == 5
        assert ds.seed == 1 and "config_hash" in ds.extra

        assert main(["train", "--config", str(cfg), "--model", "gnn"]) == EXIT_OK
        model = load_model(out / "gnn" / "model.pfw")
        assert model.epochs == 3
        assert model.manifest_["case_id"] == "ieee14"
        history = (out / "gnn" / "loss_history.csv").read_text().splitlines()
        assert len(history) == 4

        assert main(["evaluate", "--config", str(cfg), "--model", str(out / "gnn" / "model.pfw")]) == EXIT_OK
        report = json.loads((out / "reports" / "gnn.json").read_text())
        assert report["n_samples"] == 5
        assert (out / "reports" / "gnn_errors.csv").is_file()
        assert main(["evaluate", "--config", str(cfg), "--model", "dcpf"]) == EXIT_OK
        assert "DCPF" not in capsys.readouterr().err

    def test_compare_dcpf_only(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["compare", "--config", str(cfg), "--models", "dcpf"]) == EXIT_OK
        text = (tmp_path / "run" / "compare.txt").read_text()
        rows = [ln for ln in text.splitlines() if ln.startswith(("GNN", "DNN", "CNN", "DCPF"))]
        assert rows and all(r.startswith("DCPF") for r in rows)
        assert len(rows) == 4

    def test_compare_rejects_unknown_or_empty(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["compare", "--config", str(cfg), "--models", "svm"]) == EXIT_USAGE
        assert main(["compare", "--config", str(cfg), "--models", ","]) == EXIT_USAGE

    def test_compare_reproducible(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        folder = tmp_path / "run"
        snapshots = []
        for _ in range(2):
            assert main(["compare", "--config", str(cfg), "--models", "gnn,dnn,cnn,dcpf"]) == EXIT_OK
            snapshots.append({p.relative_to(folder).as_posix(): p.read_bytes() for p in folder.rglob("*") if p.is_file()})
            for p in folder.rglob("*.pf*"):
                p.unlink()
        assert snapshots[0] == snapshots[1]
        assert {"compare.txt", "compare.json", "dataset.pfds", "gnn/model.pfw"} <= snapshots[0].keys()

    def test_compare_reuse(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["compare", "--config", str(cfg), "--models", "cnn"]) == EXIT_OK
        first = (tmp_path / "run" / "compare.txt").read_text()
        assert main(["compare", "--config", str(cfg), "--models", "cnn", "--reuse"]) == EXIT_OK
        assert (tmp_path / "run" / "compare.txt").read_text() == first
