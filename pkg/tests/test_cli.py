"""CLI dispatch tests: exit codes, subcommand plumbing, output determinism."""

import json

import pytest

from ntfusion.checkpoint import load_checkpoint
from ntfusion.cli import cli_dispatch


@pytest.fixture()
def workdir(tmp_path):
    (tmp_path / "train.json").write_text(json.dumps({
        "dataset": {"kind": "blobs", "n": 300, "classes": 3, "dim": 4,
                    "spread": 0.5, "seed": 5},
        "arch": {"type": "mlp", "in_features": 4, "hidden": [16], "classes": 3},
        "train": {"epochs": 2, "lr": 0.05, "batch": {"batch_size": 32}},
        "seed": 1,
    }))
    (tmp_path / "data.json").write_text(json.dumps(
        {"kind": "blobs", "n": 300, "classes": 3, "dim": 4, "spread": 0.5, "seed": 5}))
    return tmp_path


def run(args):
    return cli_dispatch([str(a) for a in args])


class TestExitCodes:
    def test_fuse_single_input_is_usage_error(self, workdir, capsys):
        assert run(["train", "--spec", workdir / "train.json",
                    "--out", workdir / "a.ckpt"]) == 0
        code = run(["fuse", "--method", "nt", "--in", workdir / "a.ckpt",
                    "--out", workdir / "x.ckpt"])
        assert code == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(self, capsys):
        assert run(["eval", "--nope", "x"]) == 1

    def test_runtime_error_is_exit_2(self, workdir, capsys):
        bad = workdir / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        assert run(["eval", "--in", bad, "--data", workdir / "data.json"]) == 2

    def test_prune_needs_exactly_one_policy(self, workdir):
        assert run(["train", "--spec", workdir / "train.json",
                    "--out", workdir / "a.ckpt"]) == 0
        assert run(["prune", "--in", workdir / "a.ckpt", "--out", workdir / "p.ckpt"]) == 1
        assert run(["prune", "--in", workdir / "a.ckpt", "--sparsity", "0.5",
                    "--keep-counts", "8", "--out", workdir / "p.ckpt"]) == 1


class TestPlumbing:
    def test_avg_of_identical_checkpoints_keeps_accuracy(self, workdir, capsys):
        assert run(["train", "--spec", workdir / "train.json",
                    "--out", workdir / "a.ckpt"]) == 0
        assert run(["eval", "--in", workdir / "a.ckpt",
                    "--data", workdir / "data.json"]) == 0
        member = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert run(["fuse", "--method", "avg", "--in", workdir / "a.ckpt",
                    workdir / "a.ckpt", "--out", workdir / "avg.ckpt"]) == 0
        assert run(["eval", "--in", workdir / "avg.ckpt",
                    "--data", workdir / "data.json"]) == 0
        fused = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert fused["accuracy"] == member["accuracy"]

    def test_nt_fuse_and_prune_roundtrip(self, workdir, capsys):
        run(["train", "--spec", workdir / "train.json", "--out", workdir / "a.ckpt"])
        spec2 = json.loads((workdir / "train.json").read_text())
        spec2["seed"] = 2
        (workdir / "train2.json").write_text(json.dumps(spec2))
        run(["train", "--spec", workdir / "train2.json", "--out", workdir / "b.ckpt"])
        assert run(["fuse", "--method", "nt", "--in", workdir / "a.ckpt",
                    workdir / "b.ckpt", "--out", workdir / "nt.ckpt"]) == 0
        net, _ = load_checkpoint(workdir / "nt.ckpt")
        member, _ = load_checkpoint(workdir / "a.ckpt")
        assert net.arch_id == member.arch_id
        assert run(["prune", "--in", workdir / "a.ckpt", "--sparsity", "0.5",
                    "--out", workdir / "small.ckpt"]) == 0
        small, _ = load_checkpoint(workdir / "small.ckpt")
        assert small.specs[1].dims == (4, 8)

    def test_distill_subcommand(self, workdir, capsys):
        run(["train", "--spec", workdir / "train.json", "--out", workdir / "a.ckpt"])
        assert run(["distill", "--student", workdir / "a.ckpt",
                    "--teachers", workdir / "a.ckpt", workdir / "a.ckpt",
                    "--data", workdir / "data.json", "--temperature", "2",
                    "--soft-weight", "1", "--epochs", "1",
                    "--out", workdir / "kd.ckpt"]) == 0
        assert (workdir / "kd.ckpt").exists()

    def test_inline_json_data_descriptor(self, workdir, capsys):
        run(["train", "--spec", workdir / "train.json", "--out", workdir / "a.ckpt"])
        desc = (workdir / "data.json").read_text()
        assert run(["eval", "--in", workdir / "a.ckpt", "--data", desc]) == 0


class TestExperimentCommand:
    def exp_doc(self):
        return {
            "name": "cli-exp", "experiment": "pipeline",
            "dataset": {"kind": "blobs", "n": 300, "classes": 3, "dim": 4,
                        "spread": 0.5, "seed": 5},
            "arch": {"type": "mlp", "in_features": 4, "hidden": [16], "classes": 3},
            "k": 2, "seeds": [1, 2],
            "train": {"epochs": 2, "lr": 0.05, "batch": {"batch_size": 32}},
            "plan": {"method": "nt",
                     "finetune": {"epochs": 2, "lr": 0.05, "batch": {"batch_size": 32}}},
        }

    def test_outputs_and_determinism(self, workdir, capsys):
        (workdir / "exp.json").write_text(json.dumps(self.exp_doc()))
        assert run(["experiment", "--spec", workdir / "exp.json",
                    "--out", workdir / "r1"]) == 0
        assert run(["experiment", "--spec", workdir / "exp.json",
                    "--out", workdir / "r2"]) == 0
        for name in ("report.csv", "report.json"):
            assert (workdir / "r1" / name).read_bytes() == \
                (workdir / "r2" / name).read_bytes()

    def test_report_rerender_formats(self, workdir, capsys):
        (workdir / "exp.json").write_text(json.dumps(self.exp_doc()))
        run(["experiment", "--spec", workdir / "exp.json", "--out", workdir / "r"])
        assert run(["report", "--in", workdir / "r", "--format", "svg"]) == 0
        svg = (workdir / "r" / "report.svg").read_text()
        assert svg.count("<polyline") == 1
        assert run(["report", "--in", workdir / "r", "--format", "csv"]) == 0
        from ntfusion.reporting import read_csv

        rows = read_csv(workdir / "r" / "report.csv")
        assert any(m == "immediate_acc" for (_, _, _, _, m, _) in rows)
