import json
import re
from pathlib import Path

import numpy as np
import pytest

from conftest import TINY_MODEL
from point2vec.checkpoint import load_checkpoint
from point2vec.cli import FINETUNE_LOG_HEADER, LOG_HEADER, format_log_line, main
from point2vec.config import RunConfig, load_config

ROOT = Path(__file__).resolve().parents[1]


def tiny_config(data_dir: Path, **overrides) -> dict:
    cfg = {
        "seed": 0,
        "data": {"manifest": str(data_dir / "manifest.json"), "source_points": 256, "num_points": 128,
                 "num_centers": 8, "group_size": 8, "resample_per_epoch": True},
        "model": {k: list(v) if isinstance(v, tuple) else v for k, v in TINY_MODEL.items()},
        "pretrain": {"batch_size": 4, "epochs": 2, "warmup_epochs": 1, "tau_warmup_epochs": 1,
                     "target_layers": 2, "decoder_depth": 1, "save_every": 1},
        "finetune": {"epochs": 2, "batch_size": 4, "warmup_epochs": 1, "freeze_epochs": 1, "head_dims": [8, 8]},
        "partseg": {"epochs": 1, "batch_size": 4, "warmup_epochs": 1, "num_points": 64, "num_centers": 8,
                    "group_size": 8, "feature_layers": [1, 2], "head_dims": [8, 8]},
        "fewshot": {"way": 2, "shot": 1, "query": 1, "runs": 2},
        "analysis": {"strategies": ["random"], "ratios": [0.5], "samples": 2},
    }
    for section, values in overrides.items():
        if isinstance(values, dict):
            cfg[section] = {**cfg.get(section, {}), **values}
        else:
            cfg[section] = values
    return cfg


def write_config(path: Path, cfg: dict) -> str:
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "cls"), "--train", "2", "--test", "1", "--points", "256"]) == 0
    assert main(["gen-data", "--kind", "partseg", "--out", str(root / "seg"), "--train", "4", "--test", "2",
                 "--points", "128"]) == 0
    cfg = write_config(root / "cfg.json", tiny_config(root / "cls"))
    assert main(["pretrain", "--config", cfg, "--out", str(root / "pre"), "--strict"]) == 0
    return root, cfg


# -- config -------------------------------------------------------------------------------------
def test_shipped_defaults_equal_builtin_defaults():
    assert load_config(ROOT / "configs" / "full_scale.json") == RunConfig()


TABLE_BACKED = {
    "data": ["num_points", "num_centers", "group_size"],
    "model": ["embed_first", "embed_second", "depth", "dim", "heads"],
    "pretrain": ["mask_strategy", "mask_ratio", "target_layers", "decoder_depth", "batch_size", "lr", "epochs",
                 "warmup_epochs", "weight_decay", "tau_start", "tau_end", "tau_warmup_epochs"],
    "finetune": ["epochs", "batch_size", "lr", "scratch_lr", "weight_decay", "warmup_epochs", "freeze_epochs",
                 "drop_path", "head_dims", "head_dropout", "label_smoothing"],
    "partseg": ["epochs", "batch_size", "lr", "weight_decay", "warmup_epochs", "drop_path", "num_points",
                "num_centers", "group_size", "head_dims", "head_dropout"],
}


def test_table_backed_defaults_cite_their_table():
    section = None
    cited = set()
    for line in (ROOT / "configs" / "full_scale.json").read_text().splitlines():
        m = re.match(r'^  "(\w+)": \{', line)
        if m:
            section = m.group(1)
        m = re.match(r'^    "(\w+)":.*//.*table', line)
        if m:
            cited.add((section, m.group(1)))
    missing = [(s, k) for s, keys in TABLE_BACKED.items() for k in keys if (s, k) not in cited]
    assert not missing


def test_desk_config_loads():
    cfg = load_config(ROOT / "configs" / "desk.json")
    assert cfg.model.dim == 64 and cfg.partseg.feature_layers == (2, 4, 6)


def test_unknown_key_rejected_with_path(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"pretrain": {"mask_ratoi": 0.5}})
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "pretrain.mask_ratoi" in capsys.readouterr().err


def test_data2vec_rejects_decoder_keys(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"pretrain": {"mode": "data2vec_pc", "decoder_depth": 2}})
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "decoder" in capsys.readouterr().err


def test_comments_in_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  // a comment\n  "seed": 3, // trailing\n  "data": {"manifest": "a//b.json"}\n}\n')
    cfg = load_config(p)
    assert cfg.seed == 3 and cfg.data.manifest == "a//b.json"


# -- exit codes ----------------------------------------------------------------------------------
def test_no_command_is_usage_error():
    assert main([]) == 1


def test_bad_flag_is_usage_error():
    assert main(["pretrain", "--out", "x", "--bogus"]) == 1


def test_missing_manifest_is_data_error(tmp_path):
    cfg = write_config(tmp_path / "c.json", tiny_config(tmp_path / "nowhere"))
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_truncated_checkpoint_is_data_error(workspace, tmp_path, capsys):
    root, cfg = workspace
    data = (root / "pre" / "pretrain_last.p2vc").read_bytes()
    bad = tmp_path / "cut.p2vc"
    bad.write_bytes(data[:-10])
    assert main(["finetune", "--config", cfg, "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "truncated" in capsys.readouterr().err


def test_diverging_run_is_numeric_error(workspace, tmp_path):
    root, _ = workspace
    cfg = write_config(tmp_path / "c.json", tiny_config(root / "cls", pretrain={"lr": 1e30, "warmup_epochs": 0}))
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


# -- pretraining ---------------------------------------------------------------------------------
def test_pretrain_outputs(workspace):
    root, _ = workspace
    out = root / "pre"
    names = sorted(p.name for p in out.iterdir())
    assert names == ["pretrain_epoch0001.p2vc", "pretrain_epoch0002.p2vc", "pretrain_last.p2vc", "pretrain_log.tsv"]
    tensors, meta = load_checkpoint(out / "pretrain_last.p2vc")
    assert meta["kind"] == "pretrain" and meta["epoch"] == 2 and meta["step"] == 6
    assert any(k.startswith("teacher.") for k in tensors)
    assert any(k.startswith("decoder.") for k in tensors)
    assert "mask_embedding" in tensors
    assert any(k.startswith("optim.m.") for k in tensors)


def test_pretrain_log_format(workspace):
    root, _ = workspace
    lines = (root / "pre" / "pretrain_log.tsv").read_text().splitlines()
    assert lines[0] == LOG_HEADER == "step\tepoch\tlr\ttau\tloss"
    assert len(lines) == 7
    pattern = re.compile(r"^\d+\t\d+\t\d\.\d{6}e[+-]\d{2}\t\d\.\d{8}\t\d+\.\d{8}$")
    assert all(pattern.match(line) for line in lines[1:])
    assert [line.split("\t")[0] for line in lines[1:]] == [str(i) for i in range(6)]


def test_log_line_golden():
    assert format_log_line(12, 3, 1e-3, 0.9998, 0.123456789) == "12\t3\t1.000000e-03\t0.99980000\t0.12345679"


def test_resume_reproduces_uninterrupted_run(workspace, tmp_path):
    root, cfg = workspace
    part = tmp_path / "part"
    assert main(["pretrain", "--config", cfg, "--out", str(part), "--epochs", "1", "--strict"]) == 0
    assert main(["pretrain", "--config", cfg, "--out", str(part), "--checkpoint",
                 str(part / "pretrain_last.p2vc"), "--strict"]) == 0
    full = (root / "pre" / "pretrain_log.tsv").read_text()
    assert (part / "pretrain_log.tsv").read_text() == full
    assert (part / "pretrain_last.p2vc").read_bytes() == (root / "pre" / "pretrain_last.p2vc").read_bytes()


def test_resume_rejects_other_mode(workspace, tmp_path):
    root, _ = workspace
    cfg = write_config(tmp_path / "c.json", tiny_config(root / "cls", pretrain={"mode": "data2vec_pc",
                                                                                "decoder_depth": None}))
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "o"),
                 "--checkpoint", str(root / "pre" / "pretrain_last.p2vc")]) == 2


# -- fine-tuning ------------------------------------------------------------------------------------------
def test_finetune_scratch_and_pretrained(workspace, tmp_path):
    root, cfg = workspace
    ckpt = str(root / "pre" / "pretrain_last.p2vc")
    assert main(["finetune", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    assert main(["finetune", "--config", cfg, "--checkpoint", ckpt, "--out", str(tmp_path / "p")]) == 0
    ms = json.loads((tmp_path / "s" / "metrics.json").read_text())
    mp = json.loads((tmp_path / "p" / "metrics.json").read_text())
    assert not ms["pretrained"] and mp["pretrained"]
    assert mp["source_mode"] == "point2vec" and mp["decoder_in_checkpoint"]
    for m in (ms, mp):
        assert 0.0 <= m["initial_test_accuracy"] <= 1.0
        assert {"overall_accuracy", "per_class_recall", "per_class_precision", "confusion"} <= set(m)
    log = (tmp_path / "p" / "finetune_log.tsv").read_text().splitlines()
    assert log[0] == FINETUNE_LOG_HEADER
    assert [row.split("\t")[3] for row in log[1:]] == ["1", "0"]
    assert [row.split("\t")[3] for row in (tmp_path / "s" / "finetune_log.tsv").read_text().splitlines()[1:]] == \
        ["0", "0"]


def test_freeze_window_at_cli_level(workspace, tmp_path):
    root, cfg = workspace
    ckpt = str(root / "pre" / "pretrain_last.p2vc")
    assert main(["finetune", "--config", cfg, "--checkpoint", ckpt, "--epochs", "1",
                 "--out", str(tmp_path / "f")]) == 0
    pre, _ = load_checkpoint(ckpt)
    fine, _ = load_checkpoint(tmp_path / "f" / "finetune_last.p2vc")
    for name, v in fine.items():
        if name.startswith("encoder.") and not name.startswith("encoder.encoder.norm."):
            assert v.tobytes() == pre["student." + name[len("encoder."):]].tobytes(), name


def test_cross_mode_checkpoint_loads(workspace, tmp_path):
    root, _ = workspace
    d2v = tiny_config(root / "cls", pretrain={"mode": "data2vec_pc", "decoder_depth": None, "epochs": 1})
    cfg = write_config(tmp_path / "d.json", d2v)
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "d2v")]) == 0
    assert main(["finetune", "--config", cfg, "--checkpoint", str(tmp_path / "d2v" / "pretrain_last.p2vc"),
                 "--epochs", "1", "--out", str(tmp_path / "f")]) == 0
    m = json.loads((tmp_path / "f" / "metrics.json").read_text())
    assert m["source_mode"] == "data2vec_pc" and m["decoder_in_checkpoint"] is False


def test_checkpoint_shape_mismatch_names_tensor(workspace, tmp_path, capsys):
    root, _ = workspace
    bigger = tiny_config(root / "cls", model={"pos_hidden": 7})
    cfg = write_config(tmp_path / "c.json", bigger)
    assert main(["finetune", "--config", cfg, "--checkpoint", str(root / "pre" / "pretrain_last.p2vc"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "pos_encoder.fc1.weight" in capsys.readouterr().err


def test_partseg_metrics(workspace, tmp_path):
    root, _ = workspace
    cfg = write_config(tmp_path / "c.json", tiny_config(root / "seg"))
    assert main(["finetune", "--config", cfg, "--task", "partseg", "--out", str(tmp_path / "o")]) == 0
    m = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert {"mIoU_C", "mIoU_I", "accuracy"} <= set(m)


def test_partseg_needs_part_labels(workspace, tmp_path):
    root, cfg = workspace
    assert main(["finetune", "--config", cfg, "--task", "partseg", "--out", str(tmp_path / "o")]) == 2


def test_eval_writes_normalized_confusions(workspace, tmp_path):
    root, cfg = workspace
    assert main(["finetune", "--config", cfg, "--epochs", "1", "--out", str(tmp_path / "f")]) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "f" / "finetune_last.p2vc"),
                 "--out", str(tmp_path / "e")]) == 0
    rep = json.loads((tmp_path / "e" / "eval_metrics.json").read_text())
    fin = json.loads((tmp_path / "f" / "metrics.json").read_text())
    assert rep["overall_accuracy"] == fin["overall_accuracy"]
    rows = np.array(rep["confusion_row_normalized"])
    assert np.allclose(rows.sum(1)[rows.sum(1) > 0], 1.0)


def test_eval_needs_checkpoint(tmp_path):
    assert main(["eval", "--out", str(tmp_path)]) == 1


# -- few-shot -------------------------------------------------------------------------------------------
def test_fewshot_single_run_std_zero_and_reproducible(workspace, tmp_path):
    root, cfg = workspace
    args = ["fewshot", "--config", cfg, "--epochs", "1"]
    assert main(args + ["--runs", "1", "--out", str(tmp_path / "a")]) == 0
    one = json.loads((tmp_path / "a" / "fewshot.json").read_text())
    assert one["std"] == 0.0 and len(one["accuracies"]) == 1
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert main(args + ["--out", str(tmp_path / "c")]) == 0
    b = json.loads((tmp_path / "b" / "fewshot.json").read_text())
    c = json.loads((tmp_path / "c" / "fewshot.json").read_text())
    assert b["accuracies"] == c["accuracies"] and b["runs"] == 2
    assert b["mean"] == pytest.approx(np.mean(b["accuracies"]))


def test_fewshot_too_few_instances(workspace, tmp_path):
    root, cfg = workspace
    assert main(["fewshot", "--config", cfg, "--shot", "5", "--out", str(tmp_path / "o")]) == 1


# -- analysis ------------------------------------------------------------------------------------------------
def test_analyze_mask_report(tmp_path):
    cfg = write_config(tmp_path / "c.json", {
        "data": {"source_points": 2048, "num_points": 1024, "num_centers": 64, "group_size": 32},
        "analysis": {"strategies": ["random", "block"], "ratios": [0.01, 0.65], "samples": 2}})
    assert main(["analyze-mask", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rows = json.loads((tmp_path / "o" / "mask_report.json").read_text())
    assert len(rows) == 4
    for r in rows:
        total = r["masked_only"] + r["visible_only"] + r["both"] + r["uncovered"]
        assert total == pytest.approx(1.0, abs=1e-12)
        if r["ratio"] == 0.65:
            assert r["num_masked"] == 42 and r["masked_only"] > 0
        else:
            assert r["num_masked"] == 1 and r["masked_only"] <= 32 / 1024
    tsv = (tmp_path / "o" / "mask_report.tsv").read_text().splitlines()
    assert tsv[0].split("\t") == ["strategy", "ratio", "num_masked", "masked_only", "visible_only", "both",
                                  "uncovered"]
    xyz = sorted((tmp_path / "o").glob("mask_random_0.65_*.xyz"))
    assert len(xyz) == 2
    body = [line.split() for line in xyz[0].read_text().splitlines() if not line.startswith("#")]
    assert len(body) == 1024 and {int(row[3]) for row in body} <= {0, 1, 2, 3}


def test_export_pca(workspace, tmp_path):
    root, cfg = workspace
    ckpt = str(root / "pre" / "pretrain_last.p2vc")
    assert main(["export-pca", "--config", cfg, "--checkpoint", ckpt, "--out", str(tmp_path / "p")]) == 0
    assert main(["export-pca", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    files = sorted((tmp_path / "p").glob("pca_*.xyz"))
    assert len(files) == 2
    pre = np.concatenate([np.loadtxt(f) for f in files])
    rand = np.concatenate([np.loadtxt(f) for f in sorted((tmp_path / "r").glob("pca_*.xyz"))])
    assert pre.shape == (16, 6)  # 8 tokens per shape, xyz + rgb
    assert pre[:, 3:].min() >= 0 and pre[:, 3:].max() <= 1
    assert np.linalg.norm(pre[:, 3:] - rand[:, 3:]) > 0
