import json
import os
import re

import pytest

from shrinknet.experiments import DATA_ROOT_ENV
from shrinknet.main import LAST_GOOD_FILE, MODEL_FILE, SPLIT_FILE, unwalled_main

TINY_FLAGS = [
    "--synthetic-per-class=6",
    "--synthetic-width=32",
    "--epochs=1",
    "--batch-size=8",
    "--lr-epochs=10",
    "--rf-trees=3",
    "--rf-max-depth=3",
]


@pytest.fixture(autouse=True)
def no_data_root_env(monkeypatch):
    monkeypatch.delenv(DATA_ROOT_ENV, raising=False)


def test_no_args_prints_usage(capsys):
    assert unwalled_main([]) == 2
    assert re.search(r"^usage", capsys.readouterr().err)


def test_unknown_enum_value_is_rejected_by_the_parser(capsys):
    with pytest.raises(SystemExit) as info:
        unwalled_main(["table1", "--synthetic", "--mode=sideways"])
    assert info.value.code == 2
    assert "invalid value for mode: 'sideways'" in capsys.readouterr().err


def test_invalid_option_maps_to_configuration_exit_code(capsys):
    assert unwalled_main(["table2", "--synthetic", "--epoch-list=3,0"]) == 2
    err = capsys.readouterr().err
    assert err.startswith("ConfigurationError:")
    assert "epoch_list" in err


def test_missing_dataset_maps_to_data_exit_code(tmp_path, capsys):
    assert unwalled_main(["table1", "--out", str(tmp_path)]) == 3
    err = capsys.readouterr().err
    assert err.startswith("DataError:")
    assert "--synthetic" in err


def test_unreadable_checkpoint(tmp_path, capsys):
    bogus = tmp_path / "bogus.shrk"
    bogus.write_bytes(b"not a checkpoint")
    split_path = tmp_path / "split.npz"
    split_path.write_bytes(b"")
    assert unwalled_main(["eval", str(bogus), "--split", str(split_path)]) == 3
    assert "Checkpoint" in capsys.readouterr().err


def test_unwritable_output_maps_to_data_exit_code(tmp_path, capsys):
    blocker = tmp_path / "occupied"
    blocker.write_text("")
    args = ["table2", "--synthetic", "--epoch-list=1", "--out", str(blocker)] + TINY_FLAGS
    assert unwalled_main(args) == 3
    assert capsys.readouterr().err.startswith("FileExistsError:")


@pytest.mark.parametrize("mode", ["cs", "cw"])
def test_gradcheck_passes(mode, capsys):
    assert unwalled_main(["gradcheck", "--mode", mode]) == 0
    out = capsys.readouterr().out
    assert f"{mode} gradients agree" in out
    assert "fc.weight" in out


def test_gradcheck_reports_a_failure_above_tolerance(capsys):
    assert unwalled_main(["gradcheck", "--tolerance=-1"]) == 1
    assert "gradient check failed" in capsys.readouterr().err


def test_noise_cannot_apply_to_a_prepared_split(tmp_path, capsys):
    split_path = tmp_path / "split.npz"
    split_path.write_bytes(b"")
    assert unwalled_main(["train", "--noise", "--split", str(split_path)]) == 2
    assert 'field "noise"' in capsys.readouterr().err


def test_noisy_train_records_the_noise(tmp_path, capsys):
    args = ["train", "--synthetic", "--noise", "--snr-db=0", "--out", str(tmp_path)] + TINY_FLAGS
    assert unwalled_main(args) == 0
    with open(tmp_path / "manifest.json") as fh:
        assert json.load(fh)["dataset"]["noise"] == {"kind": "gaussian", "snr_db": 0.0}


def test_synth_requires_a_destination(capsys):
    assert unwalled_main(["synth"]) == 2


def test_synth_writes_the_dataset_layout(tmp_path, capsys):
    root = tmp_path / "myo"
    args = ["synth", "--out", str(root), "--subjects=2", "--timesteps=50"]
    assert unwalled_main(args) == 0
    assert "wrote 16 recordings" in capsys.readouterr().out
    assert sorted(os.listdir(root)) == ["01", "02"]
    assert sorted(os.listdir(root / "02"))[0] == "0.txt"


@pytest.mark.smoke
def test_prepare_train_and_eval_from_disk(tmp_path, capsys):
    root, prepared, trained = (str(tmp_path / d) for d in ("myo", "prep", "run"))
    assert unwalled_main(["synth", "--out", root, "--subjects=2", "--timesteps=400"]) == 0
    common = ["--subjects=2", "--allow-truncation=yes"]
    assert unwalled_main(["prepare", "--data-root", root, "--out", prepared] + common) == 0
    assert "prepared 128 training and 32 test samples" in capsys.readouterr().out
    with open(os.path.join(prepared, "split.json")) as fh:
        assert json.load(fh)["window"] == [8, 40]

    split_path = os.path.join(prepared, SPLIT_FILE)
    args = ["train", "--split", split_path, "--out", trained, "--epochs=1", "--batch-size=32"]
    assert unwalled_main(args) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split() == ["model", "train_accuracy", "test_accuracy"]
    assert os.path.exists(os.path.join(trained, "metrics.csv"))
    assert not os.path.exists(os.path.join(trained, LAST_GOOD_FILE))

    checkpoint = os.path.join(trained, MODEL_FILE)
    assert unwalled_main(["eval", checkpoint, "--split", split_path]) == 0
    out = capsys.readouterr().out
    assert re.search(r"^drsn on 32 test samples: accuracy \d\.\d{4}", out)
    assert len(out.splitlines()) == 1 + 8


@pytest.mark.smoke
def test_table1_prints_and_writes_its_table(tmp_path, capsys):
    out_dir = tmp_path / "t1"
    args = ["table1", "--synthetic", "--seed=3", "--out", str(out_dir)] + TINY_FLAGS
    assert unwalled_main(args) == 0
    header = capsys.readouterr().out.splitlines()[0].split()
    assert header == ["logistic_regression", "random_forest", "cnn", "drsn"]
    with open(out_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["options"]["seed"] == 3
    assert manifest["options"]["mode"] == "cw"


@pytest.mark.smoke
def test_table3_uses_the_noise_flags(tmp_path, capsys):
    args = [
        "table3",
        "--synthetic",
        "--snr-db=10",
        "--noise-kind=pink",
        "--noise-seeds=1",
        "--out",
        str(tmp_path),
    ] + TINY_FLAGS
    assert unwalled_main(args) == 0
    rows = capsys.readouterr().out.splitlines()
    assert [r.split()[0] for r in rows[1:]] == ["clean", "noisy"]
    with open(tmp_path / "manifest.json") as fh:
        assert json.load(fh)["dataset"]["noise"] == {"kind": "pink", "snr_db": 10.0}
