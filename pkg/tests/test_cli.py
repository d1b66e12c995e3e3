import json

import numpy as np
import pytest

from admmq import cli
from admmq.checkpoint import load_checkpoint, read_manifest

BLOBS = {
    "model": {"arch": "mlp", "in_features": 2, "hidden": [8], "num_classes": 2},
    "data": {"kind": "blobs", "n_per_class": 100},
    "pretrain": {"epochs": 20, "optimizer": "sgd", "lr": 0.05, "lr_decay": 1.0, "batch_size": 20},
    "admm": {
        "epochs_per_w_update": 5,
        "max_admm_iterations": 15,
        "optimizer": "sgd",
        "lr": 0.05,
        "batch_size": 20,
        "rho": {"rho_initial": 0.05, "growth_factor": 1.5, "period": 1, "rho_max": 5.0},
    },
    "progressive": {"num_steps": 2},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(BLOBS))
    return path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


def test_pretrain_quantize_evaluate_export(tmp_path, config, capsys):
    out = tmp_path / "run"
    code, res, _ = run(capsys, "pretrain", "--config", config, "--out", out, "--seed", 3)
    assert code == 0 and res["val_accuracy"] == 1.0 and res["test_accuracy"] == 1.0
    assert (out / "baseline" / "manifest.json").exists()

    code, summary, _ = run(capsys, "quantize", "--config", config, "--out", out, "--seed", 3)
    assert code == 0
    on_disk = json.loads((out / "summary.json").read_text())
    assert on_disk["quantized_test_accuracy"] == summary["quantized_test_accuracy"]
    assert set(on_disk["bits_per_layer"]) == {"dense1.weight", "dense2.weight"}
    assert all(v["bits_per_weight"] == 1 for v in on_disk["bits_per_layer"].values())
    assert summary["quantized_test_accuracy"] >= 0.95
    header = (out / "trace.csv").read_text().splitlines()[0]
    assert header == "k,layer,rho,residual,train_loss,val_accuracy"

    model, scheme, _ = load_checkpoint(out / "quantized")  # feasibility checked on load
    code, report, _ = run(capsys, "evaluate", "--checkpoint", out / "quantized")
    assert code == 0 and report["test_accuracy"] == summary["quantized_test_accuracy"]
    assert report["effective_bits"] == 1.0
    assert all(len(layer["histogram"]) == 2 for layer in report["layers"].values())

    code, packed, _ = run(capsys, "export", "--checkpoint", out / "quantized", "--out", out / "export")
    assert code == 0 and (out / "export" / cli.PACKED_NAME).exists()
    assert packed["weight_payload_bytes"] == 2 + 2  # two 16-weight layers at 1 bit each


def test_pretrain_is_deterministic(tmp_path, config, capsys):
    for name in ("a", "b"):
        assert run(capsys, "pretrain", "--config", config, "--out", tmp_path / name, "--seed", 7)[0] == 0
    ta = read_manifest(tmp_path / "a" / "baseline")["tensors"]
    tb = read_manifest(tmp_path / "b" / "baseline")["tensors"]
    assert {k: v["sha256"] for k, v in ta.items()} == {k: v["sha256"] for k, v in tb.items()}


def test_missing_dataset_exits_with_data_error(tmp_path, capsys):
    code, _, err = run(capsys, "pretrain", "--dataset", tmp_path / "nowhere", "--out", tmp_path / "r")
    assert code == cli.EXIT_DATA and "nowhere" in err


def test_unknown_config_key_exits_with_config_error(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"admm": {"epochs": 3}}))
    code, _, err = run(capsys, "pretrain", "--config", path)
    assert code == cli.EXIT_CONFIG and "epochs" in err


def test_architecture_mismatch_rejected(tmp_path, config, capsys):
    out = tmp_path / "run"
    assert run(capsys, "pretrain", "--config", config, "--out", out)[0] == 0
    other = dict(BLOBS, model={"arch": "mlp", "in_features": 2, "hidden": [4], "num_classes": 2})
    path = tmp_path / "other.json"
    path.write_text(json.dumps(other))
    code, _, err = run(capsys, "quantize", "--config", path, "--out", out)
    assert code == cli.EXIT_DATA and "architecture" in err


def test_corrupt_checkpoint_rejected(tmp_path, config, capsys):
    out = tmp_path / "run"
    assert run(capsys, "pretrain", "--config", config, "--out", out)[0] == 0
    blob = next((out / "baseline" / "tensors").iterdir())
    blob.write_bytes(b"\x00" + blob.read_bytes()[1:])
    code, _, err = run(capsys, "evaluate", "--checkpoint", out / "baseline")
    assert code == cli.EXIT_DATA and "integrity" in err


def test_export_needs_quantized_checkpoint(tmp_path, config, capsys):
    out = tmp_path / "run"
    assert run(capsys, "pretrain", "--config", config, "--out", out)[0] == 0
    assert run(capsys, "export", "--checkpoint", out / "baseline", "--out", out / "x")[0] == cli.EXIT_DATA


def test_divergence_exit_code(tmp_path, capsys):
    cfg = dict(BLOBS, pretrain={"epochs": 3, "optimizer": "sgd", "lr": 1e300, "lr_decay": 1.0, "batch_size": 20})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    with np.errstate(all="ignore"):
        code, _, err = run(capsys, "pretrain", "--config", path, "--out", tmp_path / "r")
    assert code == cli.EXIT_DIVERGED


def test_one_step_without_rho_growth(tmp_path, capsys):
    cfg = json.loads(json.dumps(BLOBS))
    cfg["progressive"] = {"num_steps": 1}
    cfg["admm"]["rho"]["growth_factor"] = 1.0
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "run"
    assert run(capsys, "pretrain", "--config", path, "--out", out)[0] == 0
    code, summary, _ = run(capsys, "quantize", "--config", path, "--out", out)
    assert code == 0
    rows = [r.split(",") for r in (out / "trace.csv").read_text().splitlines()[1:]]
    assert {r[2] for r in rows} == {"0.05"}
    assert len([r for r in rows if r[1] == "step0"]) == 1


def test_reference_config_verb(capsys):
    code, ref, _ = run(capsys, "reference-config")
    assert code == 0 and ref["admm"]["rho"]["rho_initial"] == 1e-3
