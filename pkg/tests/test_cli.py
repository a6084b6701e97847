"""End-to-end command-line flows and exit codes."""
import json

import pytest

from sward.cli import main
from sward.model import load_checkpoint

MODEL_SECTION = {"input_size": 16, "conv_channels": [4, 8],
                 "embedding_dim": 10, "projection_dim": 6}


@pytest.fixture(scope="module")
def flow(tmp_path_factory):
    """synth -> pretrain -> finetune artifacts shared by the tests below."""
    root = tmp_path_factory.mktemp("cli_flow")
    data = root / "data"
    cfg_path = root / "run.json"
    cfg_path.write_text(json.dumps({
        "model": MODEL_SECTION,
        "pretrain": {"epochs": 2, "batch_size": 4, "lr": 0.05},
        "finetune": {"epochs": 3, "batch_size": 4, "lr": 0.05},
    }))

    assert main(["synth", "--out", str(data), "--labeled", "6", "--val", "4",
                 "--test", "2", "--unlabeled", "8", "--size", "16", "--seed", "3"]) == 0
    pre = root / "pre.ckpt"
    assert main(["pretrain", "--unlabeled", str(data / "unlabeled.csv"),
                 "--out", str(pre), "--config", str(cfg_path), "--seed", "1"]) == 0
    fine = root / "fine.ckpt"
    assert main(["finetune", "--manifest", str(data / "manifest.csv"),
                 "--out", str(fine), "--config", str(cfg_path), "--seed", "1",
                 "--init", str(pre)]) == 0
    return {"root": root, "data": data, "config": cfg_path, "pre": pre, "fine": fine}


def run_json(capsys, argv):
    rc = main(argv)
    out = capsys.readouterr().out
    return rc, json.loads(out)


def test_synth_payload(tmp_path, capsys):
    rc, payload = run_json(capsys, ["synth", "--out", str(tmp_path / "d"),
                                    "--labeled", "2", "--unlabeled", "1",
                                    "--size", "16", "--seed", "0"])
    assert rc == 0
    assert payload["labeled_images"] == 2
    assert payload["unlabeled_images"] == 1
    assert (tmp_path / "d" / "manifest.csv").exists()
    assert (tmp_path / "d" / "unlabeled.csv").exists()


def test_pretrain_artifacts(flow):
    ckpt = load_checkpoint(flow["pre"])
    assert ckpt.provenance == "imix_pretrained"
    log_lines = (flow["root"] / "pre.ckpt.log.jsonl").read_text().splitlines()
    assert len(log_lines) == 1 + 2  # header + one line per epoch
    head = json.loads(log_lines[0])
    assert head["config"]["model"]["input_size"] == 16
    assert head["config"]["epochs"] == 2
    cfg_blob = json.loads((flow["root"] / "pre.ckpt.config.json").read_text())
    assert cfg_blob == head["config"]


def test_finetune_artifacts(flow):
    ckpt = load_checkpoint(flow["fine"])
    assert ckpt.provenance == "finetuned"
    assert ckpt.norm_stats is not None
    assert ckpt.config.n_species == 3
    log_lines = (flow["root"] / "fine.ckpt.log.jsonl").read_text().splitlines()
    assert len(log_lines) == 1 + 3
    last = json.loads(log_lines[-1])
    assert last["val_loss"] is not None


def test_flag_overrides_config_file(flow, tmp_path, capsys):
    out = tmp_path / "override.ckpt"
    rc, payload = run_json(capsys, [
        "finetune", "--manifest", str(flow["data"] / "manifest.csv"),
        "--out", str(out), "--config", str(flow["config"]),
        "--epochs", "1", "--seed", "2"])
    assert rc == 0
    lines = (tmp_path / "override.ckpt.log.jsonl").read_text().splitlines()
    assert len(lines) == 1 + 1  # --epochs 1 beat the file's 3
    assert json.loads(lines[0])["config"]["seed"] == 2
    assert payload["best_val_loss"] is not None


def test_eval_writes_reports_and_stdout(flow, tmp_path, capsys):
    stem = tmp_path / "rep" / "report"
    rc = main(["eval", "--checkpoint", str(flow["fine"]),
               "--manifest", str(flow["data"] / "manifest.csv"),
               "--split", "val", "--report", str(stem)])
    out = capsys.readouterr().out
    assert rc == 0
    blob = json.loads(out)
    assert blob["split"] == "val"
    assert blob["n_images"] == 4
    assert (tmp_path / "rep" / "report.json").read_text() == out
    md = (tmp_path / "rep" / "report.md").read_text()
    assert "HRMSE Total" in md and "HRE" in md and "HE" in md
    csv_lines = (tmp_path / "rep" / "report_predictions.csv").read_text().splitlines()
    assert csv_lines[0] == "path,grass,clover,weeds,total_mass,height"
    assert len(csv_lines) == 1 + 4


def test_eval_deterministic(flow, tmp_path, capsys):
    argv = lambda stem: ["eval", "--checkpoint", str(flow["fine"]),
                         "--manifest", str(flow["data"] / "manifest.csv"),
                         "--split", "val", "--report", str(tmp_path / stem)]
    assert main(argv("a")) == 0
    assert main(argv("b")) == 0
    capsys.readouterr()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.md").read_bytes() == (tmp_path / "b.md").read_bytes()
    assert (tmp_path / "a_predictions.csv").read_bytes() == \
           (tmp_path / "b_predictions.csv").read_bytes()


def test_predict_matches_eval_csv(flow, tmp_path, capsys):
    stem = tmp_path / "report"
    assert main(["eval", "--checkpoint", str(flow["fine"]),
                 "--manifest", str(flow["data"] / "manifest.csv"),
                 "--split", "val", "--report", str(stem)]) == 0
    capsys.readouterr()
    rows = (tmp_path / "report_predictions.csv").read_text().splitlines()[1:]
    first = rows[0].split(",")

    rc, payload = run_json(capsys, ["predict", "--checkpoint", str(flow["fine"]),
                                    "--image", first[0]])
    assert rc == 0
    assert payload["path"] == first[0]
    comp = payload["composition_pct"]
    assert set(comp) == {"grass", "clover", "weeds"}
    assert [comp["grass"], comp["clover"], comp["weeds"]] == \
           [float(first[1]), float(first[2]), float(first[3])]
    assert payload["mass_kg_dm_ha"] == float(first[4])
    assert payload["height_cm"] == float(first[5])
    assert sum(comp.values()) == pytest.approx(100.0, abs=1e-3)


def test_predict_on_pretrained_checkpoint_has_no_scalars(flow, capsys):
    img = json.loads((flow["root"] / "pre.ckpt.config.json").read_text())  # config exists
    del img
    first_unlabeled = (flow["data"] / "unlabeled.csv").read_text().splitlines()[1]
    rc = main(["predict", "--checkpoint", str(flow["pre"]),
               "--image", str(flow["data"] / first_unlabeled)])
    # pretrained checkpoints carry no composition head
    assert rc == 2


# ---------------------------------------------------------------------------
# exit codes


def test_exit_code_bad_input(flow, tmp_path, capsys):
    assert main(["finetune", "--manifest", str(tmp_path / "absent.csv"),
                 "--out", str(tmp_path / "x.ckpt")]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "absent.ckpt"),
                 "--manifest", str(flow["data"] / "manifest.csv")]) == 2

    corrupt = tmp_path / "corrupt.ckpt"
    corrupt.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(corrupt),
                 "--manifest", str(flow["data"] / "manifest.csv")]) == 2
    capsys.readouterr()


def test_exit_code_bad_config(flow, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mystery": {}}))
    assert main(["pretrain", "--unlabeled", str(flow["data"] / "unlabeled.csv"),
                 "--out", str(tmp_path / "x.ckpt"), "--config", str(bad)]) == 2

    bad2 = tmp_path / "bad2.json"
    bad2.write_text(json.dumps({"finetune": {"not_a_field": 1}}))
    assert main(["finetune", "--manifest", str(flow["data"] / "manifest.csv"),
                 "--out", str(tmp_path / "y.ckpt"), "--config", str(bad2)]) == 2

    notjson = tmp_path / "notjson.json"
    notjson.write_text("{oops")
    assert main(["finetune", "--manifest", str(flow["data"] / "manifest.csv"),
                 "--out", str(tmp_path / "z.ckpt"), "--config", str(notjson)]) == 2
    capsys.readouterr()


def test_exit_code_incompatible_checkpoint(flow, tmp_path, capsys):
    gc4 = tmp_path / "gc4"
    assert main(["synth", "--out", str(gc4), "--labeled", "2", "--size", "16",
                 "--schema", "grassclover4", "--seed", "0"]) == 0
    rc = main(["eval", "--checkpoint", str(flow["fine"]),
               "--manifest", str(gc4 / "manifest.csv"),
               "--schema", "grassclover4", "--split", "train",
               "--report", str(tmp_path / "r")])
    assert rc == 3
    capsys.readouterr()


def test_exit_code_empty_selection(flow, tmp_path, capsys):
    rc = main(["eval", "--checkpoint", str(flow["fine"]),
               "--manifest", str(flow["data"] / "manifest.csv"),
               "--split", "val", "--source", "phone",
               "--report", str(tmp_path / "r")])
    assert rc == 4
    capsys.readouterr()


def test_error_messages_go_to_stderr_not_stdout(flow, tmp_path, capsys):
    rc = main(["finetune", "--manifest", str(tmp_path / "absent.csv"),
               "--out", str(tmp_path / "x.ckpt")])
    captured = capsys.readouterr()
    assert rc == 2
    assert captured.out == ""
    assert "error:" in captured.err
