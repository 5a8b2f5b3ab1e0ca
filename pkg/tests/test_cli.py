import subprocess
import sys

import pytest

from finsurrogate import __version__
from finsurrogate.cli import main
from finsurrogate.config import ConfigError, RunConfig, load_config, parse_config_text


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def sanity_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = main(["gen", "--out", str(root / "data"), "--n", "20", "--resolution", "32",
                 "--labels", "pixel_fraction", "--seed", "3", "--workers", "1"])  # fmt: skip
    assert code == 0
    return root


def test_gen_writes_manifest_and_config(sanity_dir):
    data = sanity_dir / "data"
    assert (data / "manifest.txt").is_file()
    cfg = (data / "config.txt").read_text()
    assert cfg.startswith("# command: gen\n")
    assert f"finsurrogate {__version__}" in cfg
    assert "n_samples = 20" in cfg and "labels = pixel_fraction" in cfg


def test_gen_is_byte_deterministic(sanity_dir, capsys):
    code, _, _ = run(capsys, "gen", "--out", str(sanity_dir / "again"), "--n", "20", "--resolution", "32",
                     "--labels", "pixel_fraction", "--seed", "3", "--workers", "1")  # fmt: skip
    assert code == 0
    assert (sanity_dir / "again/manifest.txt").read_bytes() == (sanity_dir / "data/manifest.txt").read_bytes()


def test_train_eval_predict_pipeline(sanity_dir, capsys):
    data, model, report = sanity_dir / "data", sanity_dir / "model", sanity_dir / "eval"
    code, out, _ = run(capsys, "train", "--dataset", str(data), "--out", str(model), "--epochs", "3",
                       "--batch-size", "8")  # fmt: skip
    assert code == 0 and "trained 3 epochs" in out
    assert (model / "weights.fsrw").is_file() and (model / "history.csv").is_file()
    code, out, _ = run(capsys, "eval", "--dataset", str(data), "--bundle", str(model), "--out", str(report),
                       "--split", "val")  # fmt: skip
    assert code == 0 and out.startswith("r2=")
    header = (report / "report/metrics.csv").read_text().splitlines()[0].split(",")
    assert "r2" in header and "mae" in header
    assert (report / "report/predicted_vs_truth.svg").stat().st_size > 0
    image = data / "images/000000.pgm"
    code, out, _ = run(capsys, "predict", "--bundle", str(model), "--image", str(image), "--out", str(sanity_dir / "p"))
    assert code == 0
    row = (sanity_dir / "p/predictions.csv").read_text().splitlines()[1].split(",")
    assert row[0] == str(image) and float(row[3]) > 0
    code, out, _ = run(capsys, "bench", "--bundle", str(model), "--out", str(sanity_dir / "b"), "--bench-shapes", "1",
                       "--bench-resolution", "32", "--t-end", "0.5", "--avg-start", "0.25")  # fmt: skip
    assert code == 0
    lines = (sanity_dir / "b/timing.csv").read_text().splitlines()
    assert lines[0] == "source,method,mean_s,std_s,n_trials,single_trial"
    assert lines[2].startswith("measured,oracle,") and lines[2].endswith(",1,1")


def test_search_and_bench(sanity_dir, capsys):
    data = sanity_dir / "data"
    code, out, _ = run(capsys, "search", "--dataset", str(data), "--out", str(sanity_dir / "s"),
                       "--search-budget", "1", "--search-epochs", "1", "--workers", "1")  # fmt: skip
    assert code == 0 and out.startswith("rank,")
    assert (sanity_dir / "s/best_spec.txt").read_text().startswith("name search_")
    code, out, _ = run(capsys, "grid-study", "--out", str(sanity_dir / "g"), "--grid-sets", "1",
                       "--grid-resolutions", "32", "--t-end", "0.5", "--avg-start", "0.25")  # fmt: skip
    assert code == 0 and (sanity_dir / "g/grid_study.csv").is_file()


def test_errors_are_one_line(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o"))
    assert code == 1
    assert err.startswith("finsurrogate: error: FileNotFoundError: ") and err.count("\n") == 1
    code, _, err = run(capsys, "train", "--out", str(tmp_path / "o"))
    assert code == 2 and "ConfigError" in err
    code, _, err = run(capsys, "gen", "--set", "bogus=1", "--out", str(tmp_path / "o"))
    assert code == 2 and "unknown config key" in err
    code, _, err = run(capsys, "gen", "--model", "rnn", "--out", str(tmp_path / "o"))
    assert code == 2


def test_argparse_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["gen", "--no-such-flag"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2


def test_config_file_errors_name_lines(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nseed = 4\nepochs = many\nnonsense\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    msg = str(info.value)
    assert f"{path}:3:" in msg and f"{path}:4:" in msg


def test_config_parsing_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 4  # trailing comment\npoints = 4\ngrid_resolutions = 32, 64\nfractions =\n")
    cfg = load_config(path, [("epochs", "7"), ("seed", "9")])
    assert cfg.seed == 9 and cfg.epochs == 7 and cfg.points == (4,) and cfg.grid_resolutions == (32, 64)
    assert cfg.fractions == ()
    assert parse_config_text(cfg.dumps()) == {f: getattr(cfg, f) for f in parse_config_text(cfg.dumps())}
    assert load_config(None) == RunConfig()
    assert cfg.generate_config().fractions is None
    assert cfg.train_config(epochs=2).epochs == 2


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "finsurrogate.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout


@pytest.mark.parametrize("text,value", [("true", True), ("Yes", True), ("1", True), ("false", False), ("no", False)])
def test_boolean_config_values(text, value):
    cfg = load_config(None, [("mirror_augment", text)])
    assert cfg.mirror_augment is value
    assert cfg.train_config().mirror_augment is value


def test_boolean_config_rejects_other_words():
    with pytest.raises(ConfigError, match="mirror_augment"):
        load_config(None, [("mirror_augment", "maybe")])
