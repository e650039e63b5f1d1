from pathlib import Path

import numpy as np
import pytest

from corpus import write_planted_features, write_station_files
from seasonal_forecast.cli import main
from seasonal_forecast.gp_engine import parse_archive_tsv
from seasonal_forecast.metrics import parse_cv_csv
from seasonal_forecast.mlp import load_model
from seasonal_forecast.weather_data import parse_feature_csv, read_feature_columns


def run(*argv):
    return main([str(a) for a in argv])


def snapshot(folder: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(folder.iterdir())}


@pytest.fixture(scope="module")
def stations(tmp_path_factory):
    return write_station_files(tmp_path_factory.mktemp("stations"))


@pytest.fixture(scope="module")
def features(stations, tmp_path_factory):
    out = tmp_path_factory.mktemp("features")
    daily, monthly = stations
    assert run("features", "--daily", daily, "--monthly", monthly, "--out", out) == 0
    return out / "features.csv"


class TestFeatures:
    def test_writes_rows_and_summary(self, features, capsys, tmp_path, stations):
        rows = parse_feature_csv(features.read_text())
        assert len(rows) == 143
        daily, monthly = stations
        run("features", "--daily", daily, "--monthly", monthly, "--out", tmp_path)
        out = capsys.readouterr().out
        assert "143 feature rows" in out and "years without a yearly mean: 1970" in out

    def test_zero_offsets_identical(self, stations, features, tmp_path):
        daily, monthly = stations
        offsets = tmp_path / "offsets.csv"
        offsets.write_text("station_id,season_code,variable,delta\nA,1,mst,0\nB,3,msr,0.0\n")
        assert run("features", "--daily", daily, "--monthly", monthly, "--offsets", offsets, "--out", tmp_path) == 0
        assert (tmp_path / "features.csv").read_bytes() == features.read_bytes()

    def test_corrupt_header(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("station,when,lo,hi\nA,2000-01-01,1,2\n")
        assert run("features", "--daily", bad, "--out", tmp_path) == 2
        assert "error:" in capsys.readouterr().err

    def test_overlapping_stations(self, stations, tmp_path):
        daily, _ = stations
        assert run("features", "--daily", daily, "--daily", daily, "--out", tmp_path) == 3

    def test_no_inputs(self, tmp_path):
        assert run("features", "--out", tmp_path) == 3


class TestEvolve:
    def test_identity_member(self, tmp_path):
        data = write_planted_features(tmp_path / "f.csv", 60, 0, lambda x, rng: x["MST"])
        assert run("evolve", data, "--population", 100, "--generations", 30, "--out", tmp_path, "--select", 1) == 0
        reports = parse_archive_tsv((tmp_path / "archive.tsv").read_text())
        assert (reports[0].complexity, reports[0].formula, reports[0].train_mse) == (1, "MST", 0.0)
        pairs = np.loadtxt(tmp_path / "gp_pairs.csv", delimiter=",", skiprows=4)
        np.testing.assert_array_equal(pairs[:, 0], pairs[:, 1])
        progress = (tmp_path / "progress.csv").read_text().splitlines()
        assert progress[0] == "generation,best_mse,archive_size" and len(progress) == 31

    def test_gaussian_noted(self, features, tmp_path):
        assert run("evolve", features, "--population", 20, "--generations", 2, "--enable-gaussian", "--out", tmp_path) == 0
        assert "gauss (extended with gauss)" in (tmp_path / "archive.tsv").read_text()

    def test_unknown_selection(self, features, tmp_path):
        assert run("evolve", features, "--population", 20, "--generations", 2, "--select", 999, "--out", tmp_path) == 3

    def test_inconsistent_config(self, features, tmp_path):
        assert run("evolve", features, "--split", 1.5, "--out", tmp_path) == 4
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"gp": {"crossover_prob": 0.5}}')
        assert run("evolve", features, "--config", cfg, "--out", tmp_path) == 4

    def test_too_few_rows(self, tmp_path):
        data = write_planted_features(tmp_path / "f.csv", 9, 0, lambda x, rng: x["MST"])
        assert run("evolve", data, "--out", tmp_path) == 3

    def test_config_file_and_flag_precedence(self, features, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"seed": 5, "gp": {"population_size": 20, "generations": 3}}')
        assert run("evolve", features, "--config", cfg, "--generations", 2, "--out", tmp_path) == 0
        head = (tmp_path / "archive.tsv").read_text()
        assert '"generations": 2' in head and '"population_size": 20' in head and '"seed": 5' in head


    def test_nested_config_sections(self, features, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"gp": {"population_size": 20, "generations": 2, '
                       '"mutation": {"sigma_decades": 1.0}, "terminals": {"const_low": -5, "const_high": 5}}}')
        assert run("evolve", features, "--config", cfg, "--out", tmp_path) == 0
        head = (tmp_path / "archive.tsv").read_text()
        assert '"sigma_decades": 1.0' in head and '"const_low": -5' in head
        cfg.write_text('{"gp": {"mutation": {"bogus": 1}}}')
        assert run("evolve", features, "--config", cfg, "--out", tmp_path) == 4


class TestTrainMLP:
    def test_outputs_round_trip(self, features, tmp_path):
        assert run("train-mlp", features, "--k", 4, "--epochs", 20, "--out", tmp_path) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == [
            "cv_report.csv", "mlp_pairs.csv", "model.mlp", "size_search.csv",
        ]
        report = parse_cv_csv((tmp_path / "cv_report.csv").read_text())
        assert report.k == 4
        model = load_model((tmp_path / "model.mlp").read_text())
        rows = parse_feature_csv(features.read_text())
        pairs = np.loadtxt(tmp_path / "mlp_pairs.csv", delimiter=",", skiprows=3)
        np.testing.assert_array_equal(pairs[:, 1], model.predict(rows))

    def test_linear_data_defaults(self, tmp_path):
        data = write_planted_features(tmp_path / "f.csv", 100, 1,
                                      lambda x, rng: 2 + 0.8 * x["MST"] + rng.normal(0, 0.2))
        assert run("train-mlp", data, "--out", tmp_path) == 0
        assert parse_cv_csv((tmp_path / "cv_report.csv").read_text()).mean_r2 >= 0.9

    def test_k_larger_than_rows(self, tmp_path):
        data = write_planted_features(tmp_path / "f.csv", 12, 0, lambda x, rng: x["MST"])
        assert run("train-mlp", data, "--k", 20, "--out", tmp_path) == 3

    def test_divergence_exit(self, features, tmp_path):
        code = run("train-mlp", features, "--k", 2, "--hidden", 2, "--epochs", 50,
                   "--learning-rate", 1e6, "--momentum", 0.99, "--out", tmp_path)
        assert code == 4


class TestSensitivity:
    def test_single_variable(self, features, tmp_path):
        (tmp_path / "f.txt").write_text("MSTNY = MST\n")
        assert run("sensitivity", tmp_path / "f.txt", features, "--out", tmp_path) == 0
        lines = [ln for ln in (tmp_path / "sensitivity.csv").read_text().splitlines() if not ln.startswith("#")]
        variable, sens, pct_pos = lines[1].split(",")[:3]
        assert len(lines) == 2 and variable == "MST"
        assert float(sens) == pytest.approx(1.0, rel=1e-9) and float(pct_pos) == 100.0

    def test_syntax_error_position(self, features, tmp_path, capsys):
        (tmp_path / "f.txt").write_text("MSTNY = MST + * 2\n")
        assert run("sensitivity", tmp_path / "f.txt", features, "--out", tmp_path) == 2
        assert "position" in capsys.readouterr().err

    def test_constant_formula(self, features, tmp_path):
        (tmp_path / "f.txt").write_text("MSTNY = 3.5\n")
        assert run("sensitivity", tmp_path / "f.txt", features, "--out", tmp_path) == 4


class TestPredict:
    def test_formula_identity(self, features, tmp_path):
        (tmp_path / "f.txt").write_text("MSTNY = MST\n")
        assert run("predict", tmp_path / "f.txt", features, "--out", tmp_path) == 0
        pred = np.loadtxt(tmp_path / "predictions.csv", delimiter=",", comments="#", skiprows=4)
        cols, actual, _ = read_feature_columns(features.read_text())
        np.testing.assert_array_equal(pred[:, 2], cols["MST"])
        np.testing.assert_array_equal(pred[:, 3], actual)

    def test_published_affine_solution(self, tmp_path):
        data = tmp_path / "one.csv"
        data.write_text("year,season_code,mst\n2000,2,10\n")
        (tmp_path / "f.txt").write_text("MSTNY = 0.51 + 0.96*MST\n")
        assert run("predict", tmp_path / "f.txt", data, "--out", tmp_path) == 0
        last = (tmp_path / "predictions.csv").read_text().splitlines()[-1]
        assert last.split(",")[:2] == ["2000", "2"]
        assert float(last.split(",")[2]) == pytest.approx(10.11, abs=1e-12)

    def test_missing_variable(self, tmp_path):
        data = tmp_path / "one.csv"
        data.write_text("year,season_code,mst\n2000,2,10\n")
        (tmp_path / "f.txt").write_text("MSTNY = MSR + MST\n")
        assert run("predict", tmp_path / "f.txt", data, "--out", tmp_path) == 3

    def test_saved_model_matches(self, features, tmp_path):
        assert run("train-mlp", features, "--k", 2, "--hidden", 2, "--epochs", 10, "--out", tmp_path) == 0
        assert run("predict", tmp_path / "model.mlp", features, "--out", tmp_path) == 0
        pred = np.loadtxt(tmp_path / "predictions.csv", delimiter=",", comments="#", skiprows=4)
        model = load_model((tmp_path / "model.mlp").read_text())
        np.testing.assert_array_equal(pred[:, 2], model.predict(parse_feature_csv(features.read_text())))

    def test_unreadable_model(self, features, tmp_path):
        assert run("predict", tmp_path / "absent.mlp", features, "--out", tmp_path) == 3


class TestDeterminism:
    def test_global_flags_anywhere(self, features, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run("--seed", 3, "evolve", features, "--population", 20, "--generations", 3, "--out", a) == 0
        assert run("evolve", features, "--population", 20, "--generations", 3, "--seed", 3, "--out", b) == 0
        assert snapshot(a) == snapshot(b)

    def test_evolve_independent_of_jobs(self, features, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        args = ("evolve", features, "--population", 40, "--generations", 5, "--select", 1)
        assert run(*args, "--out", a) == 0
        assert run(*args, "--jobs", 4, "--out", b) == 0
        assert snapshot(a) == snapshot(b)

    def test_train_independent_of_jobs(self, features, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        args = ("train-mlp", features, "--k", 3, "--epochs", 10)
        assert run(*args, "--out", a) == 0
        assert run(*args, "--jobs", 3, "--out", b) == 0
        assert snapshot(a) == snapshot(b)
