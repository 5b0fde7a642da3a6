import json

import numpy as np
import pytest

from csvr import trainer
from csvr.cli import EXIT_DIVERGED, EXIT_IO, EXIT_OK, EXIT_USAGE, main
from csvr.config import TrainConfig, dump_config
from csvr.containers import save_arrays

from conftest import tiny_model_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = root / "tiny.conf"
    conf.write_text(dump_config(tiny_model_config(), TrainConfig(batch_size=4, epochs=1, warmup_epochs=1)))
    data = root / "data"
    assert main(["gen-data", "--config", str(conf), "--episodes", "5", "--classes", "0,1,4,5",
                 "--out", str(data)]) == EXIT_OK
    runs = root / "runs"
    assert main(["pretrain", "--config", str(conf), "--data", str(data), "--out", str(runs)]) == EXIT_OK
    final = next(runs.rglob("final.safetensors"))
    return {"root": root, "conf": conf, "data": data, "runs": runs, "final": final}


def manifest(directory, command):
    return json.loads((directory / f"run_manifest_{command}.json").read_text())


def test_gen_data_outputs(workspace):
    data = workspace["data"]
    info = json.loads((data / "manifest.json").read_text())
    assert len(info["episodes"]) == 20
    m = manifest(data, "gen-data")
    assert m["exit_status"] == 0 and m["outputs"]["episodes"] == 20


def test_pretrain_outputs(workspace):
    run = workspace["final"].parent
    assert (run / "metric_log.csv").exists() and (run / "config.txt").exists()
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == [
        "joint_epoch002.safetensors", "warmup_epoch001.safetensors"]
    assert manifest(workspace["runs"], "pretrain")["outputs"]["checkpoint"] == str(workspace["final"])


def test_finetune_retrieve_report_plot(workspace):
    root, data = workspace["root"], workspace["data"]
    evals_dir = root / "evals"
    for source in ("scratch", "f_i_full"):
        args = ["finetune", "--data", str(data), "--out", str(evals_dir), "--source", source, "--epochs", "1"]
        if source == "scratch":
            args += ["--config", str(workspace["conf"])]
        else:
            args += ["--checkpoint", str(workspace["final"])]
        assert main(args) == EXIT_OK
    reports = sorted(evals_dir.rglob("eval_*.json"))
    assert [p.name for p in reports] == ["eval_f_i_full.json", "eval_scratch.json"]

    assert main(["retrieve", "--data", str(data), "--out", str(root / "ret"), "--checkpoint",
                 str(workspace["final"]), "--k", "1,5", "--random-control"]) == EXIT_OK
    ret = json.loads((root / "ret" / "retrieval.json").read_text())
    assert set(ret["recalls"]) == {"1", "5"} and set(ret["random_control"]) == {"1", "5"}

    assert main(["report", *map(str, reports), "--out", str(root / "rep")]) == EXIT_OK
    ordering = (root / "rep" / "ordering.csv").read_text().splitlines()
    assert ordering[0] == "feature_source,seed,top1" and len(ordering) == 3

    assert main(["plot", str(workspace["runs"]), str(root / "rep"), "--out", str(root / "fig")]) == EXIT_OK
    names = {p.name for p in (root / "fig").iterdir() if p.suffix == ".png"}
    assert "per_class.png" in names and any(n.startswith("loss_") for n in names)


@pytest.mark.parametrize("argv", [
    ["plot", "--out", "{root}/p0"],
    ["pretrain", "--data", "{root}/nowhere", "--out", "{root}/p1"],
    ["finetune", "--data", "{data}", "--out", "{root}/p2", "--source", "f_d"],
    ["retrieve", "--data", "{data}", "--out", "{root}/p3", "--checkpoint", "{final}", "--k", "0"],
    ["report", "--out", "{root}/p4"],
    ["gen-data", "--episodes", "0", "--out", "{root}/p5"],
    ["pretrain", "--data", "{data}", "--out", "{root}/p6", "--set", "temperature=0"],
    ["pretrain", "--data", "{data}", "--out", "{root}/p7", "--set", "nonsense"],
])
def test_usage_errors(workspace, argv):
    argv = [a.format(root=workspace["root"], data=workspace["data"], final=workspace["final"]) for a in argv]
    assert main(argv) == EXIT_USAGE


def test_unknown_subcommand():
    assert main(["frobnicate"]) == EXIT_USAGE


def test_old_checkpoint_is_io_error(workspace):
    old = workspace["root"] / "old.safetensors"
    save_arrays(old, {"x": np.zeros(1, np.float32)}, {"format_version": 0})
    out = workspace["root"] / "old_ret"
    assert main(["retrieve", "--data", str(workspace["data"]), "--out", str(out),
                 "--checkpoint", str(old)]) == EXIT_IO
    assert manifest(out, "retrieve")["exit_status"] == EXIT_IO


def test_divergence_exit_code(workspace, monkeypatch):
    real = trainer.compute_losses

    def poisoned(state, batch, flags=None):
        out = real(state, batch, flags)
        out["L_total"] = out["L_total"] * float("nan")
        return out

    monkeypatch.setattr(trainer, "compute_losses", poisoned)
    out = workspace["root"] / "div"
    assert main(["pretrain", "--config", str(workspace["conf"]), "--data", str(workspace["data"]),
                 "--out", str(out), "--warmup-epochs", "0"]) == EXIT_DIVERGED
    m = manifest(out, "pretrain")
    assert m["exit_status"] == EXIT_DIVERGED and m["outputs"]["last_checkpoint"].endswith("last_finite.safetensors")
