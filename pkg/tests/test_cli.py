import json

import numpy as np
import pytest

from sasnet import cli, crops, evaluation, net, train
from sasnet import tensor as T
from sasnet.crops import BBox


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def toy_params(tmp_path_factory):
    path = tmp_path_factory.mktemp("p") / "toy.sasn"
    net.save_params(net.init_params(0, net.TOY_WIDTHS), path)
    return path


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_passes_and_is_deterministic(capsys, tmp_path):
    code, out, _ = run(capsys, "gradcheck", "--seeds", 2, "--out", tmp_path / "a.txt")
    assert code == 0
    assert "sigmoid" in out and "end_to_end" in out
    run(capsys, "gradcheck", "--seeds", 2, "--out", tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_text() == (tmp_path / "b.txt").read_text()


def test_gradcheck_fault_injection_names_sigmoid(capsys, monkeypatch):
    monkeypatch.setattr(T, "_sigmoid_grad", lambda y: 1.1 * y * (1 - y))
    code, _, err = run(capsys, "gradcheck", "--seeds", 2)
    assert code == 1
    assert "sigmoid" in err


# ---------------------------------------------------------------- synth


def test_synth_sequences(capsys, tmp_path):
    code, _, _ = run(capsys, "synth", "--out", tmp_path / "a", "--sequences", 1, "--frames", 10, "--seed", 4)
    assert code == 0
    seq = tmp_path / "a" / "seq_0001"
    assert len(list(seq.glob("*.ppm"))) == 10
    assert len(crops.read_groundtruth(seq / "groundtruth.txt")) == 10
    run(capsys, "synth", "--out", tmp_path / "b", "--sequences", 1, "--frames", 10, "--seed", 4)
    for f in sorted(seq.iterdir()):
        if f.name != "run_config.json":
            assert f.read_bytes() == (tmp_path / "b" / "seq_0001" / f.name).read_bytes()


def test_synth_needs_one_mode(capsys, tmp_path):
    assert run(capsys, "synth", "--out", tmp_path)[0] == 2
    assert run(capsys, "synth", "--out", tmp_path, "--pairs", 1, "--sequences", 1)[0] == 2


# ---------------------------------------------------------------- train


def test_train_echoes_defaults(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "stage1", "--synthetic-pairs", 2, "--widths", "2,3,3,3,4",
                       "--iterations", 1, "--out", tmp_path / "s1")
    assert code == 0
    assert "lr=0.001 batch=4" in out
    echoed = json.loads((tmp_path / "s1" / "run_config.json").read_text())
    assert echoed["lr_stage1"] == 0.001 and echoed["batch_pairs"] == 4
    code, out, _ = run(capsys, "train", "stage2", "--synthetic-pairs", 2, "--init", tmp_path / "s1" / "params.sasn",
                       "--iterations", 1, "--out", tmp_path / "s2")
    assert code == 0
    assert "lr_theta_s=0.0001 lr_theta_att=0.001 batch=4" in out


def test_train_errors(capsys, tmp_path):
    assert run(capsys, "train", "stage2", "--synthetic-pairs", 2, "--out", tmp_path)[0] == 2
    assert run(capsys, "train", "stage1", "--out", tmp_path)[0] == 2
    assert run(capsys, "train", "stage1", "--data", tmp_path / "missing", "--out", tmp_path)[0] == 3


def test_train_resume_matches_uninterrupted(capsys, tmp_path):
    common = ["--synthetic-pairs", 3, "--widths", "2,3,3,3,4", "--checkpoint-every", 2]
    run(capsys, "train", "stage1", *common, "--iterations", 4, "--out", tmp_path / "full")
    run(capsys, "train", "stage1", *common, "--iterations", 2, "--out", tmp_path / "part")
    code, _, _ = run(capsys, "train", "stage1", *common, "--iterations", 4, "--resume", "--out", tmp_path / "part")
    assert code == 0
    full = train.read_log(tmp_path / "full" / "train_log.csv")
    part = train.read_log(tmp_path / "part" / "train_log.csv")
    assert [r[0] for r in part] == [1, 2, 3, 4]
    np.testing.assert_allclose([r[1] for r in part], [r[1] for r in full], rtol=0, atol=1e-10)


# ---------------------------------------------------------------- track / eval


def test_track_single_frame(capsys, tmp_path, toy_params):
    seq = tmp_path / "seq"
    seq.mkdir()
    crops.write_ppm(seq / "000001.ppm", np.full((120, 160, 3), 90, np.uint8))
    code, _, _ = run(capsys, "track", "--params", toy_params, "--seq", seq, "--init", "40,30,50,40",
                     "--out", tmp_path / "r.csv")
    assert code == 0
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows == ["frame,x,y,w,h,score", "1,40.000000,30.000000,50.000000,40.000000,1.000000"]


def test_track_errors(capsys, tmp_path, toy_params):
    seq = tmp_path / "seq"
    seq.mkdir()
    crops.write_ppm(seq / "000001.ppm", np.zeros((120, 160, 3), np.uint8))
    assert run(capsys, "track", "--params", toy_params, "--seq", seq, "--init", "1,2,3",
               "--out", tmp_path / "r.csv")[0] == 2
    assert run(capsys, "track", "--params", tmp_path / "nope", "--seq", seq, "--init", "1,2,30,30",
               "--out", tmp_path / "r.csv")[0] == 3
    assert run(capsys, "track", "--params", toy_params, "--seq", seq, "--init-from-gt",
               "--out", tmp_path / "r.csv")[0] == 3


def write_results(path, boxes):
    lines = ["frame,x,y,w,h,score"] + [f"{i},{b.to_xywh()[0]},{b.to_xywh()[1]},{b.w},{b.h},1" for i, b in
                                       enumerate(boxes, 1)]
    path.write_text("\n".join(lines) + "\n")


def test_eval_fixture(capsys, tmp_path):
    gt = [BBox.from_xywh(0, 0, 10, 10)] * 3
    pred = [gt[0], BBox.from_xywh(0, 0, 10, 5), BBox.from_xywh(50, 50, 10, 10)]
    crops.write_groundtruth(tmp_path / "gt.txt", gt)
    write_results(tmp_path / "res.csv", pred)
    code, _, _ = run(capsys, "eval", "--results", tmp_path / "res.csv", "--gt", tmp_path / "gt.txt",
                     "--report", tmp_path / "out" / "report.csv")
    assert code == 0
    sec = evaluation.read_report(tmp_path / "out" / "report.csv")
    at = {round(r["threshold"], 2): r["value"] for r in sec["success"]}
    assert at[0.4] == pytest.approx(2 / 3, abs=1e-6)
    assert {p.name for p in (tmp_path / "out").glob("*.png")} == {"success.png", "precision.png", "overlap.png"}


def test_eval_perfect_and_mismatch(capsys, tmp_path):
    gt = [BBox.from_xywh(5, 5, 10, 10)] * 4
    crops.write_groundtruth(tmp_path / "gt.txt", gt)
    write_results(tmp_path / "res.csv", gt)
    run(capsys, "eval", "--results", tmp_path / "res.csv", "--gt", tmp_path / "gt.txt",
        "--report", tmp_path / "r.csv", "--no-figures")
    summary = evaluation.read_report(tmp_path / "r.csv")["summary"][0]
    assert summary["precision_at_20"] == 1.0
    assert summary["auc"] >= 1.0 - 0.05
    write_results(tmp_path / "short.csv", gt[:3])
    code, _, err = run(capsys, "eval", "--results", tmp_path / "short.csv", "--gt", tmp_path / "gt.txt",
                       "--report", tmp_path / "r2.csv", "--no-figures")
    assert code == 1
    assert "3 result rows vs 4" in err


def test_bench_prints_flop_ratio(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--repeats", 10, "--out", tmp_path / "b.csv")
    assert code == 0
    assert out.splitlines()[2].split(",")[4] == "1.70"


# ---------------------------------------------------------------- config


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"iterations": 7, "lr-stage1": 0.01, "seed": 3}))
    conf = cli.resolve("train", {"seed": 5}, cfg)
    assert conf["iterations"] == 7 and conf["lr_stage1"] == 0.01 and conf["seed"] == 5
    assert conf["batch_pairs"] == 4


def test_run_config_reproduces(capsys, tmp_path):
    run(capsys, "synth", "--out", tmp_path / "a", "--sequences", 1, "--frames", 3, "--seed", 9)
    echoed = tmp_path / "a" / "run_config.json"
    conf = json.loads(echoed.read_text())
    conf["out"] = str(tmp_path / "b")
    (tmp_path / "c.json").write_text(json.dumps(conf))
    assert run(capsys, "--config", tmp_path / "c.json", "synth")[0] == 0
    a = (tmp_path / "a" / "seq_0001" / "000003.ppm").read_bytes()
    assert a == (tmp_path / "b" / "seq_0001" / "000003.ppm").read_bytes()


def test_bad_config_and_threads(capsys, tmp_path, monkeypatch):
    (tmp_path / "bad.json").write_text("{nope")
    assert run(capsys, "--config", tmp_path / "bad.json", "bench")[0] == 2
    assert run(capsys, "--config", tmp_path / "missing.json", "bench")[0] == 3
    monkeypatch.setenv("SASNET_THREADS", "zero")
    assert run(capsys, "bench", "--repeats", 10)[0] == 2


def test_argparse_usage_error(capsys):
    assert run(capsys, "track", "--bogus")[0] == 2
