import json

import numpy as np
import pytest

from eqfreedm import dataset
from eqfreedm.cli import ConfigError, main, merge_config


def run(tmp_path, *argv):
    return main(list(argv) + ["--output-dir", str(tmp_path)])


def test_merge_config_rejects_unknown_and_bad_types():
    with pytest.raises(ConfigError, match="'model.speed'"):
        merge_config({"model": {"speed": 1.0}})
    with pytest.raises(ConfigError, match="'nonsense'"):
        merge_config({"nonsense": 1})
    with pytest.raises(ConfigError, match="integer"):
        merge_config({"model": {"n_cars": 2.5}})
    cfg = merge_config({"model": {"v0": 1}})
    assert cfg["model"]["v0"] == 1.0 and cfg["model"]["n_cars"] == 30


def test_invalid_config_key_exit_2(tmp_path, capsys):
    conf = tmp_path / "run.toml"
    conf.write_text("[simulate]\nbogus_key = 3\n")
    assert run(tmp_path, "simulate", "--config", str(conf)) == 2
    assert "bogus_key" in capsys.readouterr().err
    conf.write_text("[simulate\n")
    assert run(tmp_path, "simulate", "--config", str(conf)) == 2


def test_missing_dataset_exit_2(tmp_path, capsys):
    assert run(tmp_path, "continue-macro", "--input", str(tmp_path / "nope.csv")) == 2
    assert "does not exist" in capsys.readouterr().err
    assert run(tmp_path, "embed") == 2


def test_simulate_zero_amplitude(tmp_path):
    assert run(tmp_path, "simulate", "--amplitude", "0", "--t-end", "50") == 0
    rows = np.loadtxt(tmp_path / "sigma.csv", delimiter=",", skiprows=1)
    assert rows.shape == (51, 2) and np.abs(rows[:, 1]).max() <= 1e-9
    man = json.loads((tmp_path / "simulate.manifest.json").read_text())
    assert man["config"]["simulate"]["amplitude"] == 0.0
    assert man["rng_seed"] == 20211220 and "wall_time_s" in man


def test_simulate_jam_grows(tmp_path):
    assert run(tmp_path, "simulate", "--t-end", "1000") == 0
    sig = np.loadtxt(tmp_path / "sigma.csv", delimiter=",", skiprows=1)[:, 1]
    # rises from the initial bump and levels off (v0 = 1 is close to the Hopf point,
    # so the final approach is slow)
    assert sig[-1] > 0.4 and sig[-1] > sig[0] + 0.1
    assert abs(sig[-1] - sig[-100]) < 0.02 * sig[-1] < sig[500] - sig[0]
    H = np.loadtxt(tmp_path / "headways.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(H[:, 1:].sum(axis=1), 60.0, rtol=1e-9)


def test_generate_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(d, "generate", "--n-samples", "4") == 0
    for name in ("dataset.csv", "dataset.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ma = json.loads((a / "generate.manifest.json").read_text())
    assert ma["results"]["n_rows"] == 4


def test_pipeline_stages_from_files(tmp_path):
    assert run(tmp_path, "generate", "--n-samples", "40") == 0
    src = str(tmp_path / "dataset.csv")
    assert run(tmp_path, "align", "--input", src) == 0
    al = dataset.load(tmp_path / "aligned.csv")
    assert al.aligned and len(al) == 40
    man = json.loads((tmp_path / "align.manifest.json").read_text())
    assert list(man["inputs"]) == [src] and len(man["inputs"][src]) == 64
    assert run(tmp_path, "align", "--input", str(tmp_path / "aligned.csv")) == 2
    assert run(tmp_path, "continue-macro", "--input", src, "--dimension", "1") == 2


def test_embed_aligned_reports_d1(tmp_path, aligned_data):
    path = tmp_path / "aligned.csv"
    dataset.save(aligned_data, path)
    assert run(tmp_path, "embed", "--input", str(path)) == 0
    man = json.loads((tmp_path / "embed.manifest.json").read_text())
    lines = (tmp_path / "selection.csv").read_text().splitlines()
    assert lines[0] == "j,r_j,selected"
    assert man["results"]["dimension"] == 1


def test_continue_micro_fold(tmp_path):
    assert run(tmp_path, "continue-micro") == 0
    man = json.loads((tmp_path / "continue-micro.manifest.json").read_text())
    folds = man["results"]["folds"]
    assert len(folds) == 1
    assert folds[0]["v0"] == pytest.approx(0.97, abs=0.01)
    assert folds[0]["sigma"] == pytest.approx(0.25, abs=0.02)
    head = (tmp_path / "micro_branch.csv").read_text().splitlines()[0]
    assert head == "index,v0,c,d,sigma,stable,residual,fold"
