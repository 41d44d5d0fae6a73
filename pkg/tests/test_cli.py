import hashlib
import json
import time
from pathlib import Path

import pytest
import yaml

from platediff.cli import main

FAST = ["--set", "synthetic.count=8", "--set", "train.stage1_epochs=1", "--set", "train.stage2_epochs=1"]


def run(cmd, out, *extra):
    return main([cmd, "--out", str(out), *FAST, *extra])


def digests(folder):
    return {e["path"]: e["sha256"] for e in json.loads((folder / "artifacts.json").read_text())["files"]}


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for cmd in ("synth-gen", "train-stage1", "train-stage2", "eval", "eval-diff", "heatmap"):
        assert run(cmd, out) == 0, cmd
    return out


def test_every_file_is_listed_with_its_digest(chain):
    for name in ("synthetic", "stage1", "stage2", "eval", "eval-diff", "heatmap"):
        folder = chain / name
        listed = digests(folder)
        on_disk = {p.relative_to(folder).as_posix() for p in folder.rglob("*") if p.is_file()} - {"artifacts.json"}
        assert set(listed) == on_disk, name
        for rel, sha in listed.items():
            assert hashlib.sha256((folder / rel).read_bytes()).hexdigest() == sha


def test_effective_config_is_echoed(chain):
    cfg = yaml.safe_load((chain / "stage1" / "config.yaml").read_text())
    assert cfg["synthetic"]["count"] == 8 and cfg["train"]["stage1_epochs"] == 1
    assert cfg["encoder"]["backend"] == "stub"


def test_reports_and_train_summary(chain, capsys):
    rep = json.loads((chain / "eval-diff" / "report.json").read_text())
    strata = [r["stratum"] for r in rep["reports"]]
    assert "all" in strata and "mean_predictor_baseline" in strata
    assert rep["metadata"]["stage"] == "difference"
    summary = json.loads((chain / "stage2" / "train_report.json").read_text())
    assert summary["encoder_digest_before"] == summary["encoder_digest_after"]
    assert summary["final_lr"] == 0.0
    assert (chain / "eval-diff" / "histogram.png").exists()


def test_rerun_reproduces_digests(chain, tmp_path):
    for cmd in ("synth-gen", "train-stage1", "eval"):
        assert run(cmd, tmp_path) == 0
    for name in ("synthetic", "stage1", "eval"):
        assert digests(tmp_path / name) == digests(chain / name), name


def test_bad_config_key_exits_2(tmp_path, capsys):
    assert main(["train-stage1", "--out", str(tmp_path), "--set", "train.learning_rate=1"]) == 2
    assert "train.learning_rate" in capsys.readouterr().err
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  depth: 3\n")
    assert main(["eval", "--out", str(tmp_path), "--config", str(cfg)]) == 2
    assert "model.depth" in capsys.readouterr().err


def test_config_file_and_override_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("synthetic:\n  count: 5\n  seed: 9\n")
    assert main(["synth-gen", "--out", str(tmp_path), "--config", str(cfg), "--set", "synthetic.count=3"]) == 0
    eff = yaml.safe_load((tmp_path / "synthetic" / "config.yaml").read_text())
    assert eff["synthetic"]["count"] == 3 and eff["synthetic"]["seed"] == 9
    assert len((tmp_path / "synthetic" / "manifest.jsonl").read_text().splitlines()) == 3


def test_missing_checkpoint_exits_3(chain, tmp_path):
    assert main(["eval", "--out", str(tmp_path), "--set", f"data.manifest={chain / 'synthetic' / 'manifest.jsonl'}"]) == 3
    assert main(["eval", "--out", str(tmp_path)]) == 3  # no manifest either


def test_training_blowup_exits_4(chain, tmp_path):
    manifest = chain / "synthetic" / "manifest.jsonl"
    code = main(["train-stage1", "--out", str(tmp_path), *FAST, "--set", f"data.manifest={manifest}",
                 "--set", "train.base_lr=1e30", "--set", "train.stage1_epochs=3"])
    assert code == 4


def test_provider_failure_exits_5(chain, monkeypatch):
    monkeypatch.delenv("VLM_API_KEY", raising=False)
    code = run("vlm-bench", chain, "--set", "vlm.provider=openai-compatible", "--set", "vlm.base_url=http://vlm.invalid")
    assert code == 5


def test_vlm_bench_echo_then_replay(chain):
    assert run("vlm-bench", chain, "--set", "vlm.provider=echo") == 0
    rep = json.loads((chain / "vlm" / "report.json").read_text())
    assert rep["reports"][0]["mae"] == 0.0
    store = chain / "vlm" / "responses.jsonl"
    assert store.exists()
    replay = chain / "replay"
    args = ["--set", "vlm.provider=replay", "--set", f"vlm.replay_store={store}",
            "--set", f"data.manifest={chain / 'synthetic' / 'manifest.jsonl'}"]
    assert main(["vlm-bench", "--out", str(replay), *FAST, *args]) == 0
    assert json.loads((replay / "vlm" / "report.json").read_text())["reports"][0]["mae"] == 0.0


def test_ablation_flag_reaches_model(chain, tmp_path):
    manifest = chain / "synthetic" / "manifest.jsonl"
    assert main(["train-stage1", "--out", str(tmp_path), *FAST, "--set", f"data.manifest={manifest}",
                 "--ablation", "text_only"]) == 0
    from platediff.model import Checkpoint

    assert Checkpoint.load(tmp_path / "stage1" / "checkpoint.pt").config.ablation == "text_only"
    # stage 2 refuses a checkpoint whose ablation differs from the request
    assert main(["train-stage2", "--out", str(tmp_path), *FAST, "--set", f"data.manifest={manifest}"]) == 3


def test_default_chain_under_ten_minutes(tmp_path):
    t0 = time.perf_counter()
    for cmd in ("synth-gen", "train-stage1", "train-stage2", "eval-diff"):
        assert main([cmd, "--out", str(tmp_path)]) == 0, cmd
    assert time.perf_counter() - t0 < 600
