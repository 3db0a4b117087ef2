import json

import pytest

from growthcast.cli import main
from growthcast.fid import fid_protocol, provider_from_source
from growthcast.preprocess import load_and_pad

SYNTH = ["--profile", "synthetic"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> pair -> train -> predict on a tiny dataset, shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", *SYNTH, "--n-plants", "12", "--out", str(root / "data")]) == 0
    assert main(["pair", *SYNTH, "--records", str(root / "data/records.csv"), "--out", str(root / "pairs")]) == 0
    assert main(["train", *SYNTH, "--pairs", str(root / "pairs"), "--epochs", "2",
                 "--set", "model.base_channels=8", "--set", "disc.base_channels=8",
                 "--out", str(root / "train")]) == 0
    assert main(["predict", *SYNTH, "--checkpoint", str(root / "train/model.ckpt"),
                 "--pairs", str(root / "pairs"), "--split", "all", "--out", str(root / "pred")]) == 0
    return root


def test_pipeline_artifacts(workspace):
    assert (workspace / "pairs/pairs.jsonl").exists()
    assert (workspace / "pairs/counts.csv").read_text().startswith("transition,")
    assert (workspace / "train/history.csv").read_text().splitlines()[0] == "epoch,loss_d,loss_g_adv,loss_g_l1,lr"
    for d in ("data", "pairs", "train", "pred"):
        assert (workspace / d / "run_config.txt").exists()
    n_pairs = len((workspace / "pairs/pairs.jsonl").read_text().splitlines())
    assert len(list((workspace / "pred/images").glob("*.png"))) == n_pairs


def test_evaluate_matches_direct_call(workspace, capsys):
    code, out, _ = run(capsys, "evaluate", *SYNTH, "--generated", workspace / "pred/images",
                       "--reference-test", workspace / "data/images",
                       "--reference-train", workspace / "data/images", "--out", workspace / "eval")
    assert code == 0
    got = json.loads((workspace / "eval/fid.json").read_text())

    def load(d):
        return [load_and_pad(p) for p in sorted(d.glob("*.png")) if not p.name.endswith(".mask.png")]

    direct = fid_protocol(provider_from_source("random-projection:dim=64,size=32,seed=0"),
                          load(workspace / "data/images"), load(workspace / "pred/images"),
                          load(workspace / "data/images"))
    assert got["fid_rg"] == direct.fid_rg and got["fid_rt"] == direct.fid_rt
    assert got["verdict"] == direct.verdict() == out.strip()


def test_segment_and_report(workspace, capsys):
    assert run(capsys, "segment", *SYNTH, "--records", workspace / "data/records.csv",
               "--out", workspace / "segref")[0] == 0
    assert run(capsys, "segment", *SYNTH, "--records", workspace / "pred/records.csv",
               "--out", workspace / "seggen")[0] == 0
    code, _, err = run(capsys, "report", *SYNTH, "--predictions", workspace / "pred/predictions.csv",
                       "--reference-traits", workspace / "segref/traits.csv",
                       "--generated-traits", workspace / "seggen/traits.csv", "--out", workspace / "report")
    assert code == 0, err
    summary = json.loads((workspace / "report/summary.json").read_text())
    assert "all" in summary["regressions"]
    assert summary["std_divisor"] == "n"


def test_reproducible_pairing(workspace, tmp_path):
    args = ["pair", *SYNTH, "--records", str(workspace / "data/records.csv")]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    for name in ("pairs.jsonl", "records.csv", "counts.csv", "run_config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_dry_run_has_no_side_effects(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--pairs", "x", "--profile", "cauliflower", "--dry-run",
                       "--out", tmp_path / "never")
    assert code == 0
    lines = dict(line.split("=", 1) for line in out.splitlines())
    assert (lines["train.epochs"], lines["train.lambda_l1"], lines["train.learning_rate"],
            lines["train.batch_size"]) == ("160", "100.0", "0.0001", "1")
    assert not (tmp_path / "never").exists()


def test_pair_flags_reach_config(tmp_path, capsys):
    code, out, _ = run(capsys, "pair", "--records", "r.csv", "--horizon", "3", "--threshold", "0.02",
                       "--dry-run", "--out", tmp_path)
    assert code == 0 and "pair.horizon=3" in out and "pair.threshold=0.02" in out


def test_set_beats_profile_and_flag_beats_set(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--profile", "synthetic", "--set", "synth.n_plants=12",
                       "--set", "synth.stages=4", "--stages", "5", "--dry-run", "--out", tmp_path)
    assert code == 0 and "synth.n_plants=12" in out and "synth.stages=5" in out


@pytest.mark.parametrize("argv,code,kind", [
    (["train", "--out", "o"], 2, "ConfigError"),
    (["train", "--pairs", "p", "--bogus", "--out", "o"], 2, "ConfigError"),
    (["train", "--pairs", "p", "--set", "train.nope=1", "--out", "o"], 2, "ConfigError"),
    (["train", "--pairs", "{tmp}/missing", "--out", "{tmp}/o"], 3, "DataError"),
    (["evaluate", "--generated", "{imgs}", "--reference-test", "{imgs}", "--reference-train", "{imgs}",
      "--fid-model", "{tmp}/missing.pt", "--out", "{tmp}/e"], 5, "EmbeddingLoadError"),
])
def test_exit_codes(workspace, tmp_path, capsys, argv, code, kind):
    argv = [a.format(tmp=tmp_path, imgs=workspace / "pred/images") for a in argv]
    got, _, err = run(capsys, *argv)
    assert got == code
    [line] = err.strip().splitlines()
    payload = json.loads(line)
    assert payload["exit_code"] == code and payload["error"] == kind


def test_numeric_error_exit_code(tmp_path, capsys, monkeypatch):
    import growthcast.cli as cli
    from growthcast.errors import NumericError

    def boom(cfg, args, out):
        raise NumericError("non-finite loss at epoch 1, step 1")

    monkeypatch.setitem(cli.COMMANDS, "synth", (boom, ""))
    code, _, err = run(capsys, "synth", "--out", tmp_path)
    assert code == 4 and json.loads(err)["error"] == "NumericError"


def test_help_documents_exit_codes(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for c in ("0  success", "2  configuration", "3  data", "4  numeric", "5  backend"):
        assert c in out
