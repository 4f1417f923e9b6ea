import json
import subprocess
import sys

import pytest

from timeline_rag import config as cfgmod
from timeline_rag.cli import main

TINY = """
[data]
patients = 120
seed = 3
[retrieval]
chunk_strategy = visit
history_chunk_size = 32
history_chunk_overlap = 4
query_chunk_size = 32
num_retrieved = 4
[model]
d = 8
prototypes = 8
[training]
max_epochs = 2
batch_size = 16
mlm_steps = 3
mlm_batch_size = 4
[eval]
n_boot = 40
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    assert run("--config", cfg, "gen-data", "--out", root / "data") == 0
    assert run("--config", cfg, "build-index", "--data", root / "data", "--out", root / "index") == 0
    assert run("--config", cfg, "train", "--data", root / "data", "--index", root / "index", "--out", root / "model") == 0
    return root, cfg


class TestConfig:
    def test_defaults_and_sections(self):
        c = cfgmod.parse_config(TINY)
        assert c.patients == 120 and c.num_retrieved == 4 and c.t_q == 0.05
        d = cfgmod.RunConfig()
        assert (d.history_chunk_size, d.num_retrieved, d.prototypes, d.lambda_u) == (256, 24, 128, 0.005)

    def test_unknown_and_duplicate_keys(self):
        with pytest.raises(ValueError, match="unknown config key"):
            cfgmod.parse_config("[a]\nnot_a_key = 1\n")
        with pytest.raises(ValueError, match="set in both"):
            cfgmod.parse_config("[a]\nd = 4\n[b]\nd = 8\n")
        with pytest.raises(ValueError):
            cfgmod.parse_config("[a]\nrotary = maybe\n")

    def test_dump_round_trip(self):
        c = cfgmod.desk_scale(seed=7)
        assert cfgmod.parse_config(cfgmod.dump_config(c)) == c
        assert c.digest() == cfgmod.desk_scale(seed=7).digest() != cfgmod.desk_scale().digest()


def test_gen_data_outputs(pipeline):
    root, _ = pipeline
    data = root / "data"
    for name in ("events.jsonl", "labels.jsonl", "manifest.json", "vocab.tsv", "splits.json", "run.json"):
        assert (data / name).exists()
    manifest = json.loads((data / "run.json").read_text())
    assert manifest["seed"] == 3 and manifest["patients"] == 120
    assert manifest["outputs"]["events.jsonl"]
    splits = json.loads((data / "splits.json").read_text())
    assert sum(len(v) for v in splits.values()) == 120


def test_retrieve_rows(pipeline, capsys):
    root, cfg = pipeline
    capsys.readouterr()
    assert run("--config", cfg, "retrieve", "--data", root / "data", "--index", root / "index", "--patient", "P000", "--m", 3) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("patient_id\tstrategy")
    assert 1 <= len(lines) - 1 <= 3
    assert all(r.split("\t")[0] == "P000" for r in lines[1:])


def test_eval_and_inspect(pipeline, capsys):
    root, cfg = pipeline
    common = ["--config", cfg]
    args = ["--data", root / "data", "--index", root / "index", "--model", root / "model"]
    assert run(*common, "eval", *args, "--out", root / "eval") == 0
    rep = json.loads((root / "eval" / "metrics.json").read_text())
    assert rep["n_boot"] == 40 and rep["auroc_ci_low"] <= rep["auroc"] <= rep["auroc_ci_high"]
    printed = json.loads(capsys.readouterr().out)
    assert printed == rep
    assert run(*common, "inspect", *args, "--out", root / "inspect", "--limit", 5) == 0
    rows = (root / "inspect" / "inspection.jsonl").read_text().splitlines()
    assert len(rows) == 5
    for name in ("visit_weights.csv", "stage_weights.csv", "prototype_usage.json", "run.json"):
        assert (root / "inspect" / name).exists()


def test_train_variants_are_comparable(pipeline):
    root, cfg = pipeline
    for lam in ("0", "0.005"):
        out = root / f"lam{lam}"
        assert run("--config", cfg, "train", "--data", root / "data", "--index", root / "index", "--out", out, "--lambda-u", lam) == 0
        man = json.loads((out / "run.json").read_text())
        assert man["config"]["lambda_u"] == float(lam)
        assert (out / "train_log.csv").read_text().splitlines()[0] == "epoch,train_loss,val_auroc,val_auprc,H_qbar,H_hbar,lr"


def test_pretrain_then_index(pipeline):
    root, cfg = pipeline
    assert run("--config", cfg, "pretrain-mlm", "--data", root / "data", "--out", root / "mlm") == 0
    assert (root / "mlm" / "mlm_loss.csv").read_text().count("\n") == 4
    assert run("--config", cfg, "build-index", "--data", root / "data", "--encoder", root / "mlm", "--out", root / "index2") == 0
    man = json.loads((root / "index2" / "run.json").read_text())
    assert any(k.endswith("encoder.ragp") for k in man["inputs"])


def test_build_vocab(pipeline):
    root, cfg = pipeline
    assert run("build-vocab", "--events", root / "data" / "events.jsonl", "--out", root / "vocab") == 0
    assert "MARKER//PLANTED" in (root / "vocab" / "vocab.tsv").read_text()


def test_missing_file_fails_cleanly(tmp_path, capsys):
    out = tmp_path / "idx"
    assert run("build-index", "--data", tmp_path / "nowhere", "--out", out) == 1
    assert "missing file" in capsys.readouterr().err
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []


def test_unknown_patient_and_flag(pipeline, capsys):
    root, cfg = pipeline
    code = run("--config", cfg, "retrieve", "--data", root / "data", "--index", root / "index", "--patient", "ZZZ")
    assert code == 1 and "unknown patient" in capsys.readouterr().err
    assert run("gen-data", "--out", root / "x", "--bogus") != 0
    assert "unrecognized arguments" in capsys.readouterr().err
    assert not (root / "x").exists()


def test_bad_config_reports_error(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[a]\nnope = 1\n")
    assert run("--config", bad, "gen-data", "--out", tmp_path / "d") == 1
    assert "unknown config key" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "timeline_rag", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
