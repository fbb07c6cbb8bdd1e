import json

import pytest

from cogrind import cli
from cogrind import io as cio

TINY = ["--channels", "4,6,8,8", "--embed-dim", "6", "--hidden-dim", "5", "--batch-size", "4",
        "--epochs", "2", "--lr", "1e-3"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen", "--out", str(d / "data"), "--num-videos", "6", "--seed", "4"]) == 0
    for mode in ("baseline", "cg-sl-att"):
        assert cli.main(["train", "--data", str(d / "data"), "--out", str(d / mode), "--mode", mode] + TINY) == 0
        assert cli.main(["infer", "--ckpt", str(d / mode / "checkpoint.zip"), "--data", str(d / "data"),
                         "--out", str(d / f"{mode}.jsonl"), "--topk", "3"]) == 0
    return d


def test_pipeline_outputs(workdir, capsys):
    d = workdir
    assert (d / "data" / "manifest.json").exists() and (d / "data" / "run_manifest.json").exists()
    assert (d / "cg-sl-att" / "history.csv").exists()
    man = json.loads((d / "cg-sl-att.run_manifest.json").read_text())
    assert man["subcommand"] == "infer" and "wall_clock_seconds" in man and man["seed"] == 0
    assert cli.main(["stabilize", "--pred", str(d / "cg-sl-att.jsonl"), "--out", str(d / "stab.jsonl"),
                     "--topk", "3", "--window", "5"]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--pred", str(d / "baseline.jsonl"), str(d / "cg-sl-att.jsonl"), str(d / "stab.jsonl"),
                     "--names", "Baseline,CG-SL-Att,CG-SL-Att+P5", "--data", str(d / "data"),
                     "--out", str(d / "report")]) == 0
    out = capsys.readouterr().out
    assert "Ablation" in out and "CG-SL-Att+P5" in out
    rep = json.loads((d / "report" / "Baseline.report.json").read_text())
    assert set(rep) >= {"acc_at_05", "miou", "success_auc", "precision_20"}
    assert (d / "report" / "table.txt").exists() and (d / "report" / "CG-SL-Att.curves.csv").exists()


def test_stabilize_p1_keeps_selection(workdir):
    d = workdir
    assert cli.main(["stabilize", "--pred", str(d / "cg-sl-att.jsonl"), "--out", str(d / "p1.jsonl"),
                     "--topk", "3", "--window", "1"]) == 0
    a, b = cio.read_predictions(d / "cg-sl-att.jsonl"), cio.read_predictions(d / "p1.jsonl")
    assert [r["selected_idx"] for r in a] == [r["selected_idx"] for r in b]


def test_occluded_frame_eval(workdir):
    d = workdir
    assert cli.main(["eval", "--pred", str(d / "baseline.jsonl"), "--data", str(d / "data"),
                     "--out", str(d / "occ"), "--frames", "occluded", "--classes", "occlusion"]) == 0


def test_identical_runs_identical_files(workdir, tmp_path):
    d = workdir
    args = ["--data", str(d / "data"), "--mode", "cg-sl-att"] + TINY
    assert cli.main(["train", "--out", str(tmp_path / "again")] + args) == 0
    assert (tmp_path / "again" / "checkpoint.zip").read_bytes() == (d / "cg-sl-att" / "checkpoint.zip").read_bytes()
    assert cli.main(["infer", "--ckpt", str(tmp_path / "again" / "checkpoint.zip"), "--data", str(d / "data"),
                     "--out", str(tmp_path / "p.jsonl"), "--topk", "3"]) == 0
    assert (tmp_path / "p.jsonl").read_bytes() == (d / "cg-sl-att.jsonl").read_bytes()


def test_config_file_and_errors(workdir, tmp_path, capsys):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("num-videos = 2\nT = 4\nmix = location-only=1.0\n")
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    man = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert len(man) == 2 and all(m["ambiguity_class"] == "location-only" for m in man)
    assert len(man[0]["gt_tube"]) == 4
    cfg.write_text("num_videos = 2\ncolour = red\n")
    with pytest.raises(SystemExit):
        cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "h")])
    assert "unknown config key 'colour'; valid keys:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["stabilize", "--pred", "x", "--out", "y", "--window", "2"])
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"video_id": 1,\n')
    assert cli.main(["stabilize", "--pred", str(bad), "--out", str(tmp_path / "o.jsonl")]) == 2
    assert "bad.jsonl:1" in capsys.readouterr().err


def test_attention_dump(workdir, tmp_path):
    d = workdir
    assert cli.main(["infer", "--ckpt", str(d / "cg-sl-att" / "checkpoint.zip"), "--data", str(d / "data"),
                     "--out", str(tmp_path / "p.jsonl"), "--dump-attention", str(tmp_path / "maps")]) == 0
    dump = json.loads((tmp_path / "maps" / "v00000.json").read_text())
    assert len(dump["frames"]) == 8 and len(dump["frames"][0]["S"]) == 4 and len(dump["frames"][0]["L"][0]) == 4
