import argparse
import json
from pathlib import Path

import numpy as np
import pytest

from cdet import microdiff as md
from cdet.cli import build_parser, main, resolve_config
from cdet.errors import ConfigError
from cdet.network import NetworkConfig, RefineNet
from cdet.pipeline import network_config_for, TrainConfig

FIXTURES = Path(__file__).parent / "fixtures"
TINY = [
    "--set", "network.image_size=[64,64]",
    "--set", "network.stem_channels=[2,2]",
    "--set", "network.level_channels=[4,4,4,4]",
    "--set", "network.tcb_channels=4",
    "--set", "data.image_size=[64,64]",
    "--log-level", "WARNING",
]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_anchors_320_prints_6375_records(capsys):
    code, out, _ = run(capsys, "anchors", "--size", "320", "--log-level", "WARNING")
    assert code == 0
    lines = out.splitlines()
    assert len(lines) == 6375
    assert all(len(l.split("\t")) == 8 for l in lines)


def test_anchors_512_count(capsys):
    code, out, _ = run(capsys, "anchors", "--size", "512", "--count-only", "--log-level", "WARNING")
    assert code == 0 and out.strip() == "16320"


def test_eval_golden_report(tmp_path, capsys):
    out = tmp_path / "report.txt"
    code, _, _ = run(
        capsys,
        "eval",
        "--detections", str(FIXTURES / "eval3" / "detections.tsv"),
        "--annotations", str(FIXTURES / "eval3" / "annotations.jsonl"),
        "--out", str(out),
        "--pr-dir", str(tmp_path / "pr"),
        "--log-level", "WARNING",
    )
    assert code == 0
    assert out.read_bytes() == (FIXTURES / "eval3" / "report.txt").read_bytes()
    pr = (tmp_path / "pr" / "pr_class1.tsv").read_text().splitlines()
    assert pr[0] == "recall\tprecision" and len(pr) == 7


def test_eval_eleven_point_flag(capsys):
    code, out, _ = run(
        capsys,
        "eval",
        "--detections", str(FIXTURES / "eval3" / "detections.tsv"),
        "--annotations", str(FIXTURES / "eval3" / "annotations.jsonl"),
        "--eleven-point",
        "--log-level", "WARNING",
    )
    assert code == 0 and out.startswith("interpolation\t11-point")


def test_analyze_table(capsys):
    code, out, _ = run(
        capsys,
        "analyze",
        "--detections", str(FIXTURES / "eval3" / "detections.tsv"),
        "--annotations", str(FIXTURES / "eval3" / "annotations.jsonl"),
        "--log-level", "WARNING",
    )
    assert code == 0
    assert out.splitlines()[-1] == "all\t-\t-\t5\t20.0\t40.0\t0.0\t40.0"


def test_train_zero_steps_writes_initialization(tmp_path, capsys):
    data, ckpt = tmp_path / "d", tmp_path / "m.cdet"
    assert run(capsys, "gen-data", "--out", str(data), "--count", "2", "--seed", "1", *TINY)[0] == 0
    code, _, _ = run(capsys, "train", "--data", str(data), "--out", str(ckpt), "--steps", "0", "--seed", "5", *TINY)
    assert code == 0
    cfg, values = md.load_checkpoint(ckpt)
    net_cfg = NetworkConfig.from_dict(cfg["network"])
    assert cfg["train"]["seed"] == 5 and cfg["train"]["max_steps"] == 0
    ref = RefineNet(network_config_for(net_cfg, TrainConfig(**cfg["train"])))
    ref.initialize(5)
    for name, t in ref.store:
        assert np.array_equal(values[name], t.value)


def _pipeline(tmp_path, capsys, tag):
    root = tmp_path / tag
    data, ckpt, dets, rep = root / "d", root / "m.cdet", root / "dets.tsv", root / "report.txt"
    assert run(capsys, "gen-data", "--out", str(data), "--count", "3", "--seed", "2", "--threads", "2", *TINY)[0] == 0
    assert run(
        capsys, "train", "--data", str(data), "--out", str(ckpt), "--steps", "3",
        "--set", "train.batch_size=2", "--log", str(root / "log.jsonl"),
        "--dump-assignments", str(root / "assign.tsv"), *TINY,
    )[0] == 0
    assert run(capsys, "infer", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(dets), "--threads", "2", "--batch", "2", *TINY)[0] == 0
    assert run(capsys, "eval", "--detections", str(dets), "--annotations", str(data / "annotations.jsonl"), "--out", str(rep), *TINY)[0] == 0
    return root


def test_pipeline_byte_for_byte_reproducible(tmp_path, capsys):
    a = _pipeline(tmp_path, capsys, "a")
    b = _pipeline(tmp_path, capsys, "b")
    for name in ("m.cdet", "dets.tsv", "report.txt", "log.jsonl", "assign.tsv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert len((a / "log.jsonl").read_text().splitlines()) == 3
    stages = {l.split("\t")[0] for l in (a / "assign.tsv").read_text().splitlines()}
    assert stages == {"arm", "odm"}


def test_seed_env_fallback(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CDET_SEED", "7")
    assert run(capsys, "gen-data", "--out", str(tmp_path / "e"), "--count", "1", *TINY)[0] == 0
    assert json.loads((tmp_path / "e" / "dataset.json").read_text())["seed"] == 7
    assert run(capsys, "gen-data", "--out", str(tmp_path / "f"), "--count", "1", "--seed", "8", *TINY)[0] == 0
    assert json.loads((tmp_path / "f" / "dataset.json").read_text())["seed"] == 8
    monkeypatch.setenv("CDET_SEED", "x")
    assert run(capsys, "gen-data", "--out", str(tmp_path / "g"), "--count", "1", *TINY)[0] == 2


def test_resolved_config_is_logged(tmp_path, capsys):
    code, _, err = run(capsys, "anchors", "--count-only", "--set", "train.max_steps=9")
    assert code == 0
    line = next(l for l in err.splitlines() if "resolved config" in l)
    cfg = json.loads(line.split("resolved config ", 1)[1])
    assert cfg["train"]["max_steps"] == 9 and set(cfg) == {"network", "train", "data", "eval"}


def test_config_file_and_unknown_keys(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"train": {"max_steps": 3}, "eval": {"eleven_point": True}}))
    cfg = resolve_config(str(good), ["train.batch_size=2"])
    assert cfg.train.max_steps == 3 and cfg.train.batch_size == 2 and cfg.eval["eleven_point"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"max_stepz": 3}}))
    with pytest.raises(ConfigError):
        resolve_config(str(bad), [])
    assert run(capsys, "anchors", "--config", str(bad))[0] == 2
    assert run(capsys, "anchors", "--set", "bogus.x=1")[0] == 2
    assert run(capsys, "anchors", "--config", str(tmp_path / "missing.json"))[0] == 3


def test_exit_codes(tmp_path, capsys):
    assert run(capsys, "train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m"), *TINY)[0] == 3
    assert run(capsys, "anchors", "--size", "100")[0] == 2
    data = tmp_path / "d"
    run(capsys, "gen-data", "--out", str(data), "--count", "2", *TINY)
    code, _, err = run(
        capsys, "train", "--data", str(data), "--out", str(tmp_path / "m"), "--steps", "40",
        "--set", "train.lr_schedule=[[0, 10000.0]]", *TINY,
    )
    assert code == 4 and "numeric abort" in err
    (tmp_path / "bad.tsv").write_text("1\t2\n")
    code, _, _ = run(capsys, "eval", "--detections", str(tmp_path / "bad.tsv"), "--annotations", str(data / "annotations.jsonl"))
    assert code == 3


def test_help_documents_every_flag():
    parser = build_parser()
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    assert set(subs.choices) == {"gen-data", "train", "infer", "eval", "analyze", "anchors", "ablate", "bench"}
    for name, sp in subs.choices.items():
        text = sp.format_help()
        for action in sp._actions:
            assert action.help, f"{name}: {action.option_strings} lacks help"
            for opt in action.option_strings:
                assert opt in text, f"{name}: {opt} missing from --help"


def test_bench_reports_percentiles(capsys):
    code, out, _ = run(capsys, "bench", "--reps", "2", *TINY)
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("op\treps\tmean_ms\tp50_ms\tp99_ms")
    assert any(l.startswith("infer_end_to_end\t2\t") for l in lines)
