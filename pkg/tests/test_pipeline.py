import json
import subprocess
import sys

import numpy as np
import pytest

from changeguide.cli import main
from changeguide.netpbm import read_pgm_mask, write_pgm_mask
from changeguide.pipeline import ConfigError, PipelineConfig

TINY = {
    "sft": {"epochs": 3},
    "grpo": {"epochs": None, "steps": 3, "batch_size": 4, "group_size": 4},
    "mgd": {"channels": [4, 8, 16]},
    "decoder": {"epochs": 1, "batch_size": 4},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("CHANGEGUIDE_CONFIG", raising=False)
    return tmp_path


def write_config(path, data=TINY):
    path.write_text(json.dumps(data))
    return str(path)


def checksums(run_file):
    return json.loads(run_file.read_text())["checksums"]


def test_gen_data_writes_triples_and_is_deterministic(workdir):
    assert main(["gen-data", "--n", "10"]) == 0
    files = sorted(p.name for p in (workdir / "data/train").iterdir())
    assert len(files) == 31 and "manifest.json" in files
    first = checksums(workdir / "reports/runs/gen-data-train.json")
    assert len(first) == 31
    assert main(["gen-data", "--n", "10"]) == 0
    assert checksums(workdir / "reports/runs/gen-data-train.json") == first


def test_invalid_field_exit_2(workdir, capsys):
    assert main(["gen-data", "--n", "2", "--set", "gen.change_rate=1.5"]) == 2
    assert "gen.change_rate" in capsys.readouterr().err
    assert main(["gen-data", "--n", "2", "--set", "gen.bogus=1"]) == 2
    assert main(["gen-data", "--n", "2", "--set", "paths.reports_dir=data"]) == 2
    assert main(["gen-data", "--n", "2", "--grid", "5x5"]) == 2


def test_io_error_exit_3(workdir):
    (workdir / "blocker").write_text("not a directory")
    assert main(["gen-data", "--n", "1", "--set", "paths.data_dir=blocker"]) == 3
    (workdir / "bad.pgm").write_bytes(b"P5\n8 8\n255\n\x00")
    assert main(["encode", "bad.pgm"]) == 3


def test_missing_artifact_exit_4_with_run_record(workdir):
    assert main(["grpo"]) == 4
    record = json.loads((workdir / "reports/runs/grpo.json").read_text())
    assert record["status"] == "error" and "reasoner_sft.ckpt" in record["error"]
    assert main(["infer"]) == 4
    assert main(["encode", "nope.pgm"]) == 4


def test_encode_decode(workdir, capsys):
    for runs in ("0-2,5,7", "63", "10-20,40-63"):
        assert main(["decode", runs, "--out", "m.pgm"]) == 0
        capsys.readouterr()
        assert main(["encode", "m.pgm"]) == 0
        assert capsys.readouterr().out.strip() == runs
    assert main(["decode", "", "--out", "z.pgm"]) == 0
    assert not read_pgm_mask("z.pgm").any()
    write_pgm_mask("full.pgm", np.ones((64, 64)))
    capsys.readouterr()
    main(["encode", "full.pgm"])
    assert capsys.readouterr().out.strip() == "0-63"
    assert main(["decode", "5-3", "--out", "r.pgm"]) == 2


def test_grid_flag(workdir, capsys):
    write_pgm_mask("full.pgm", np.ones((64, 64)))
    main(["encode", "full.pgm", "--grid", "4x4"])
    assert capsys.readouterr().out.strip() == "0-15"


def test_score(workdir):
    main(["gen-data", "--n", "6"])
    manifest = json.loads((workdir / "data/train/manifest.json").read_text())
    lines = [{"raw_text": f"<think>t</think><answer>{s['gt_runs']}</answer>", "gt_runs": s["gt_runs"]}
             for s in manifest["scenes"]]
    lines.append({"raw_text": "<answer>0</answer>", "gt_runs": "0"})
    lines.append({"raw_text": "<think>t</think><answer>1</answer>", "scene": 0})
    (workdir / "pred.jsonl").write_text("".join(json.dumps(x) + "\n" for x in lines))
    assert main(["score", "pred.jsonl", "--manifest", "data/train/manifest.json"]) == 0
    scored = [json.loads(x) for x in (workdir / "reports/score.jsonl").read_text().splitlines()]
    assert [s["total"] for s in scored[:6]] == [3.0] * 6
    assert scored[6]["total"] == 0.0 and scored[6]["r_format"] == 0
    summary = json.loads((workdir / "reports/score.summary.json").read_text())
    assert summary["mean_total"] == pytest.approx(np.mean([s["total"] for s in scored]), abs=1e-12)
    (workdir / "bad.jsonl").write_text("{not json\n")
    assert main(["score", "bad.jsonl"]) == 2


def test_eval_identical_dirs(workdir):
    main(["gen-data", "--n", "4", "--split", "test"])
    assert main(["eval", "--pred", "data/test", "--gt", "data/test"]) == 0
    report = json.loads((workdir / "reports/eval_test.json").read_text())
    assert all(v == 1.0 for v in report["aggregate"].values())
    assert all(v == 100.0 for v in report["aggregate_percent"].values())
    assert len(report["per_scene"]) == 4


def test_config_hash_ignores_key_order(workdir):
    a = PipelineConfig.from_dict({"seed": 3, "gen": {"change_rate": 0.2, "noise_sigma": 0.01}})
    b = PipelineConfig.from_dict({"gen": {"noise_sigma": 0.01, "change_rate": 0.2}, "seed": 3})
    assert a.config_hash() == b.config_hash() != PipelineConfig().config_hash()
    assert PipelineConfig.from_dict(a.to_dict()) == a


def test_partial_sections_keep_defaults():
    cfg = PipelineConfig.from_dict({"grpo": {"lr": 0.01}})
    assert cfg.grpo.epochs == PipelineConfig().grpo.epochs and cfg.grpo.lr == 0.01
    with pytest.raises(ConfigError, match="reward"):
        PipelineConfig.from_dict({"reward": {"beta": 2.0}})


def test_env_config(workdir, monkeypatch):
    write_config(workdir / "c.json", {"paths": {"data_dir": "elsewhere"}})
    monkeypatch.setenv("CHANGEGUIDE_CONFIG", str(workdir / "c.json"))
    assert main(["gen-data", "--n", "1"]) == 0
    assert (workdir / "elsewhere/train/manifest.json").is_file()


def test_full_chain_tiny(workdir):
    cfg = write_config(workdir / "tiny.json")
    for argv in (["gen-data", "--n", "8"], ["gen-data", "--n", "4", "--split", "test"], ["sft"], ["grpo"],
                 ["train-decoder"], ["infer"], ["eval"]):
        assert main(argv + ["--config", cfg]) == 0, argv
    pred = workdir / "reports/pred/test"
    assert len(list(pred.glob("*_pred.pgm"))) == 4
    sidecar = json.loads((pred / "prediction.json").read_text())
    assert sidecar["threshold"] == 0.5 and len(sidecar["alphas"]) == 3
    report = json.loads((workdir / "reports/eval_test.json").read_text())
    assert set(report["aggregate"]) == {"precision", "recall", "f1", "iou", "oa"}
    for stage in ("sft", "grpo", "train-decoder", "infer-test", "eval-test"):
        assert json.loads((workdir / f"reports/runs/{stage}.json").read_text())["status"] == "ok"

    # stage outputs are reproducible
    sft = checksums(workdir / "reports/runs/sft.json")
    assert main(["sft", "--config", cfg]) == 0
    assert checksums(workdir / "reports/runs/sft.json") == sft

    # oracle coarse masks bypass the reasoner entirely
    (workdir / "checkpoints/reasoner_grpo.ckpt").unlink()
    assert main(["infer", "--config", cfg]) == 4
    assert main(["infer", "--config", cfg, "--coarse", "oracle"]) == 0
    assert main(["infer", "--config", cfg, "--coarse", "oracle", "--no-guidance"]) == 0
    assert json.loads((pred / "prediction.json").read_text())["alphas"] == [0.0, 0.0, 0.0]


def test_console_entry_point(workdir):
    out = subprocess.run([sys.executable, "-m", "changeguide.cli", "--threads", "1", "decode", "0", "--out", "a.pgm"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and (workdir / "a.pgm").is_file()
    out = subprocess.run([sys.executable, "-m", "changeguide.cli", "sft"], capture_output=True, text=True)
    assert out.returncode == 4
