"""End-to-end tests for the command-line interface.

Each test drives ``cli.main`` in-process with an argv list; exit codes
and emitted files are the assertions. A shared tiny dataset and one
short training run keep the suite fast.
"""

import json
import warnings

import numpy as np
import pytest

from graphda.cli import main
from graphda.datasets import Domain, read_dataset

scipy_stats = pytest.importorskip("scipy.stats")


# tiny but non-degenerate: 8-sample batches, 8-wide layers, 2 epochs
TINY_TRAIN = [
    "--epochs", "2", "--batch", "8", "--hidden", "8", "--phi-dim", "8",
    "--backbone-hidden", "8", "--threshold-percentile", "30", "--seed", "1",
]


@pytest.fixture(autouse=True)
def _no_ambient_seed(monkeypatch):
    monkeypatch.delenv("HDA_SEED", raising=False)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen", "--out", str(d), "--per-class", "30", "--seed", "7"]) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    d = tmp_path_factory.mktemp("run")
    code = main(["train", "--source", str(data_dir / "source.hda"),
                 "--target", str(data_dir / "target.hda"),
                 "--labels", str(data_dir / "target_labels.hda"),
                 "--out", str(d), *TINY_TRAIN])
    assert code == 0
    return d


def read_manifest(path):
    out = {}
    for line in path.read_text().splitlines():
        key, _, val = line.partition("=")
        out[key] = val
    return out


# -- gen -----------------------------------------------------------------------


def test_gen_writes_both_domains_and_sidecar(data_dir):
    source = read_dataset(data_dir / "source.hda", Domain.SOURCE)
    target = read_dataset(data_dir / "target.hda", Domain.TARGET)
    assert len(source) == 60 and len(target) == 60
    assert source.feature_dims == (2,)
    assert (target.labels == -1).all()
    manifest = read_manifest(data_dir / "manifest.txt")
    assert manifest["command"] == "gen"
    assert manifest["gen.per_class"] == "30"
    assert len(manifest["digest.source"]) == 64


def test_gen_refuses_overwrite_without_force(data_dir, capsys):
    before = (data_dir / "source.hda").read_bytes()
    assert main(["gen", "--out", str(data_dir), "--per-class", "30"]) == 2
    assert "--force" in capsys.readouterr().err
    assert (data_dir / "source.hda").read_bytes() == before
    assert main(["gen", "--out", str(data_dir), "--per-class", "30",
                 "--seed", "8", "--force"]) == 0
    assert (data_dir / "source.hda").read_bytes() != before
    # restore the fixture's seed for the tests that share this directory
    assert main(["gen", "--out", str(data_dir), "--per-class", "30",
                 "--seed", "7", "--force"]) == 0


def test_gen_missing_output_dir_writes_nothing(tmp_path, capsys):
    missing = tmp_path / "not_created" / "deeper"
    assert main(["gen", "--out", str(missing)]) == 2
    assert "does not exist" in capsys.readouterr().err
    assert not missing.exists() and not (tmp_path / "not_created").exists()


def test_gen_rotate_zero_matches_distributions(tmp_path):
    d = tmp_path / "flat"
    d.mkdir()
    assert main(["gen", "--out", str(d), "--per-class", "300", "--rotate", "0",
                 "--seed", "3"]) == 0
    source = read_dataset(d / "source.hda", Domain.SOURCE)
    target = read_dataset(d / "target.hda", Domain.TARGET)
    for channel in range(2):
        _, p = scipy_stats.ks_2samp(source.features[:, channel],
                                    target.features[:, channel])
        assert p > 0.01


def test_gen_rotate_45_shifts_marginals(tmp_path):
    d = tmp_path / "rot"
    d.mkdir()
    assert main(["gen", "--out", str(d), "--per-class", "300", "--seed", "3"]) == 0
    source = read_dataset(d / "source.hda", Domain.SOURCE)
    target = read_dataset(d / "target.hda", Domain.TARGET)
    # the first channel's bimodal spread contracts under a 45 degree turn
    _, p = scipy_stats.ks_2samp(source.features[:, 0], target.features[:, 0])
    assert p < 0.01


def test_gen_rejects_bad_shape_args(tmp_path, capsys):
    d = tmp_path / "bad"
    d.mkdir()
    assert main(["gen", "--out", str(d), "--classes", "1"]) == 2
    capsys.readouterr()


# -- train ---------------------------------------------------------------------


def test_train_smoke_artifacts(run_dir):
    for name in ("manifest.txt", "metrics.csv", "steps.csv", "pseudo.csv",
                 "checkpoint_final.hdap"):
        assert (run_dir / name).exists(), name
    rows = (run_dir / "metrics.csv").read_text().splitlines()
    assert rows[0].startswith("epoch,precision,accuracy")
    assert len(rows) == 3


def test_manifest_written_with_resolved_config(run_dir):
    manifest = read_manifest(run_dir / "manifest.txt")
    assert manifest["command"] == "train"
    assert manifest["config.epochs"] == "2"
    assert manifest["config.batch_size"] == "8"
    assert manifest["config.lr"] == "0.001"          # untouched default, materialized
    assert manifest["config.weight_decay"] == "1e-06"
    assert manifest["config.use_gnn"] == "true"
    assert len(manifest["digest.target"]) == 64
    assert manifest["digest.source"] != manifest["digest.target"]


def test_train_defaults_match_protocol(data_dir, tmp_path):
    # flag-free invocation must resolve to the published hyperparameters;
    # 0 epochs is invalid, so read them from the manifest of a 1-epoch run
    d = tmp_path / "defaults"
    code = main(["train", "--source", str(data_dir / "source.hda"),
                 "--target", str(data_dir / "target.hda"),
                 "--out", str(d), "--epochs", "1", "--batch", "8"])
    assert code == 0
    manifest = read_manifest(d / "manifest.txt")
    assert manifest["config.lr"] == "0.001"
    assert manifest["config.weight_decay"] == "1e-06"
    assert manifest["config.epsilon"] == "0.97"
    assert manifest["config.threshold"] == "150.0"
    assert manifest["config.epochs"] == "1"          # the only overrides
    assert manifest["config.batch_size"] == "8"


def test_unknown_flag_rejected(capsys):
    assert main(["train", "--source", "a", "--target", "b", "--out", "c",
                 "--frobnicate", "1"]) == 2
    assert "unrecognized arguments" in capsys.readouterr().err


def test_malformed_magic_is_format_error(tmp_path, data_dir, capsys):
    bad = tmp_path / "bad.hda"
    bad.write_bytes(b"XXXXjunk")
    code = main(["train", "--source", str(bad),
                 "--target", str(data_dir / "target.hda"),
                 "--out", str(tmp_path / "run")])
    assert code == 3
    err = capsys.readouterr().err
    assert "byte 0" in err and "magic" in err
    assert not (tmp_path / "run").exists()


def test_divergence_exit_code(data_dir, tmp_path, capsys):
    d = tmp_path / "blowup"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # the overflow IS the point
        code = main(["train", "--source", str(data_dir / "source.hda"),
                     "--target", str(data_dir / "target.hda"),
                     "--out", str(d), *TINY_TRAIN, "--lr", "1e50"])
    assert code == 4
    assert "non-finite loss" in capsys.readouterr().err
    assert (d / "divergence.txt").exists()


def test_no_gnn_flag_disables_graph(data_dir, tmp_path):
    d = tmp_path / "nognn"
    code = main(["train", "--source", str(data_dir / "source.hda"),
                 "--target", str(data_dir / "target.hda"),
                 "--labels", str(data_dir / "target_labels.hda"),
                 "--out", str(d), *TINY_TRAIN, "--no-gnn"])
    assert code == 0
    assert read_manifest(d / "manifest.txt")["config.use_gnn"] == "false"
    last = (d / "metrics.csv").read_text().splitlines()[-1].split(",")
    assert last[8] == "0" and last[9] == "0"  # edge columns stay empty


# -- config file and precedence --------------------------------------------------


def test_flag_beats_config_file_beats_default(data_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs=3\nseed=5\nmargin=4.0\n# comment\n\n")
    d = tmp_path / "prec"
    code = main(["train", "--source", str(data_dir / "source.hda"),
                 "--target", str(data_dir / "target.hda"),
                 "--out", str(d), "--config", str(cfg),
                 "--epochs", "1", "--batch", "8"])
    assert code == 0
    manifest = read_manifest(d / "manifest.txt")
    assert manifest["config.epochs"] == "1"      # flag wins
    assert manifest["config.seed"] == "5"        # file wins over default
    assert manifest["config.margin"] == "4.0"
    assert manifest["config.lr"] == "0.001"      # default survives


def test_env_seed_lowest_precedence(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("HDA_SEED", "9")
    base = ["train", "--source", str(data_dir / "source.hda"),
            "--target", str(data_dir / "target.hda"),
            "--epochs", "1", "--batch", "8"]

    d1 = tmp_path / "env_only"
    assert main(base + ["--out", str(d1)]) == 0
    assert read_manifest(d1 / "manifest.txt")["config.seed"] == "9"

    cfg = tmp_path / "seeded.cfg"
    cfg.write_text("seed=5\n")
    d2 = tmp_path / "env_file"
    assert main(base + ["--out", str(d2), "--config", str(cfg)]) == 0
    assert read_manifest(d2 / "manifest.txt")["config.seed"] == "5"

    d3 = tmp_path / "env_flag"
    assert main(base + ["--out", str(d3), "--seed", "4"]) == 0
    assert read_manifest(d3 / "manifest.txt")["config.seed"] == "4"


def test_bad_env_seed_is_usage_error(data_dir, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("HDA_SEED", "not-a-number")
    code = main(["train", "--source", str(data_dir / "source.hda"),
                 "--target", str(data_dir / "target.hda"),
                 "--out", str(tmp_path / "x"), "--epochs", "1"])
    assert code == 2
    assert "HDA_SEED" in capsys.readouterr().err


@pytest.mark.parametrize("line", ["nonsense=1", "epochs", "epochs=x"])
def test_bad_config_file_is_usage_error(data_dir, tmp_path, line, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(line + "\n")
    code = main(["train", "--source", str(data_dir / "source.hda"),
                 "--target", str(data_dir / "target.hda"),
                 "--out", str(tmp_path / "x"), "--config", str(cfg)])
    assert code == 2
    assert "bad.cfg:1" in capsys.readouterr().err


def test_run_reproducible_from_manifest_alone(data_dir, run_dir, tmp_path):
    # feeding the manifest's config section back in must replay the run
    manifest = read_manifest(run_dir / "manifest.txt")
    cfg = tmp_path / "replay.cfg"
    cfg.write_text("".join(
        f"{k.removeprefix('config.')}={v}\n"
        for k, v in manifest.items() if k.startswith("config.")
    ))
    d = tmp_path / "replay"
    code = main(["train", "--source", manifest["source"],
                 "--target", manifest["target"],
                 "--labels", manifest["eval_labels"],
                 "--out", str(d), "--config", str(cfg)])
    assert code == 0
    for name in ("metrics.csv", "checkpoint_final.hdap"):
        assert (d / name).read_bytes() == (run_dir / name).read_bytes(), name


# -- eval ------------------------------------------------------------------------


def test_eval_matches_final_metrics_row(run_dir, data_dir, tmp_path, capsys):
    out = tmp_path / "eval.csv"
    code = main(["eval", "--checkpoint", str(run_dir / "checkpoint_final.hdap"),
                 "--target", str(data_dir / "target.hda"),
                 "--labels", str(data_dir / "target_labels.hda"),
                 "--out", str(out)])
    assert code == 0
    printed = capsys.readouterr().out
    last = (run_dir / "metrics.csv").read_text().splitlines()[-1].split(",")
    epoch, precision, accuracy = last[0], last[1], last[2]
    assert f"precision={precision}" in printed
    assert f"accuracy={accuracy}" in printed
    header, row = out.read_text().splitlines()
    assert header == "epoch,precision,accuracy"
    assert row == f"{epoch},{precision},{accuracy}"


def test_eval_json_carries_same_numbers(run_dir, data_dir, tmp_path, capsys):
    out = tmp_path / "eval.csv"
    code = main(["eval", "--checkpoint", str(run_dir / "checkpoint_final.hdap"),
                 "--target", str(data_dir / "target.hda"),
                 "--labels", str(data_dir / "target_labels.hda"),
                 "--out", str(out), "--json"])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    _, row = out.read_text().splitlines()
    epoch, precision, accuracy = row.split(",")
    assert payload["epoch"] == int(epoch)
    assert payload["precision"] == float(precision)
    assert payload["accuracy"] == float(accuracy)
    assert isinstance(payload["precision_defined"], bool)


def test_eval_appends_rows(run_dir, data_dir, tmp_path):
    out = tmp_path / "eval.csv"
    args = ["eval", "--checkpoint", str(run_dir / "checkpoint_final.hdap"),
            "--target", str(data_dir / "target.hda"),
            "--labels", str(data_dir / "target_labels.hda"), "--out", str(out)]
    assert main(args) == 0 and main(args) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 3 and lines[1] == lines[2]


def test_eval_corrupt_checkpoint_writes_nothing(data_dir, tmp_path, capsys):
    bad = tmp_path / "bad.hdap"
    bad.write_bytes(b"NOPE" + b"\0" * 16)
    out = tmp_path / "eval.csv"
    code = main(["eval", "--checkpoint", str(bad),
                 "--target", str(data_dir / "target.hda"),
                 "--labels", str(data_dir / "target_labels.hda"),
                 "--out", str(out)])
    assert code == 3
    assert "magic" in capsys.readouterr().err
    assert not out.exists()


def test_eval_shape_mismatch_clear_error(run_dir, tmp_path, capsys):
    wide = tmp_path / "wide"
    wide.mkdir()
    assert main(["gen", "--out", str(wide), "--per-class", "10", "--dim", "5"]) == 0
    code = main(["eval", "--checkpoint", str(run_dir / "checkpoint_final.hdap"),
                 "--target", str(wide / "target.hda"),
                 "--labels", str(wide / "target_labels.hda"),
                 "--out", str(tmp_path / "e.csv")])
    assert code == 3
    assert "does not match checkpoint" in capsys.readouterr().err


# -- export ----------------------------------------------------------------------


def test_export_layout_and_determinism(run_dir, data_dir, tmp_path):
    args = ["export", "--checkpoint", str(run_dir / "checkpoint_final.hdap"),
            "--source", str(data_dir / "source.hda"),
            "--target", str(data_dir / "target.hda"),
            "--labels", str(data_dir / "target_labels.hda")]
    d1, d2 = tmp_path / "e1", tmp_path / "e2"
    assert main(args + ["--out", str(d1)]) == 0
    assert main(args + ["--out", str(d2)]) == 0

    emb = d1 / "embeddings_epoch002.csv"
    edges = d1 / "edges_epoch002.csv"
    lines = emb.read_text().splitlines()
    assert len(lines) == 1 + 60 + 60  # header + N_s + N_t
    assert lines[0].startswith("epoch,id,domain,label,phi_0")
    assert all(line.startswith("2,") for line in lines[1:])

    header, row = edges.read_text().splitlines()
    assert header == "epoch,right,wrong,unknown,total"
    fields = [int(v) for v in row.split(",")]
    assert fields[0] == 2
    assert fields[3] == 0                       # sidecar given: nothing unknown
    assert fields[1] + fields[2] == fields[4]

    for name in (emb.name, edges.name):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name


def test_export_without_sidecar_counts_unknown(run_dir, data_dir, tmp_path):
    d = tmp_path / "e"
    code = main(["export", "--checkpoint", str(run_dir / "checkpoint_final.hdap"),
                 "--source", str(data_dir / "source.hda"),
                 "--target", str(data_dir / "target.hda"), "--out", str(d)])
    assert code == 0
    row = (d / "edges_epoch002.csv").read_text().splitlines()[1]
    assert int(row.split(",")[3]) > 0


def test_export_shape_mismatch_is_format_error(run_dir, tmp_path, capsys):
    wide = tmp_path / "wide"
    wide.mkdir()
    assert main(["gen", "--out", str(wide), "--per-class", "10", "--dim", "5"]) == 0
    code = main(["export", "--checkpoint", str(run_dir / "checkpoint_final.hdap"),
                 "--source", str(wide / "source.hda"),
                 "--target", str(wide / "target.hda"),
                 "--out", str(tmp_path / "e")])
    assert code == 3
    capsys.readouterr()


# -- entry point ------------------------------------------------------------------


def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == 2
    capsys.readouterr()


def test_version_flag(capsys):
    assert main(["--version"]) == 0
    assert "graphda" in capsys.readouterr().out
