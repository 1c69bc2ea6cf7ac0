import csv
import json

import numpy as np
import pytest

from mvseg.cli import SWEEP_COLUMNS, main, plot_sweep, prepare_out, read_config, read_sweep_csv
from mvseg.errors import ConfigError, FormatError
from mvseg.model import load_provenance

TINY_TRAIN = {"schema_version": 1, "model": {"base_channels": 2}, "train": {"epochs": 1, "batch_size": 2, "random_positions": 0}}


def run(*argv):
    return main([str(a) for a in argv])


def write(path, doc):
    path.write_text(json.dumps(doc))
    return path


def files(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen", "--out", root / "ds", "--n-patients", 6, "--seed", 5) == 0
    cfg = write(root / "train.json", TINY_TRAIN)
    assert run("train", "--dataset", root / "ds", "--out", root / "tr", "--config", cfg) == 0
    return root


@pytest.fixture(scope="module")
def evaluated(work):
    out = work / "ev"
    args = ("eval", "--checkpoint", work / "tr" / "model.tun", "--dataset", work / "ds", "--out", out, "--views", "1", "2a", "2s", "3", "--subset", "all")
    assert run(*args) == 0
    return out


class TestConfigFiles:
    def test_schema_version_required(self, tmp_path):
        with pytest.raises(ConfigError, match="schema_version"):
            read_config(write(tmp_path / "c.json", {"model": {}}))

    def test_unknown_field(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown"):
            read_config(write(tmp_path / "c.json", {"schema_version": 1, "x": 1}), {"model"})

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(FormatError):
            read_config(tmp_path / "c.json")

    def test_unknown_train_field_exits_1(self, work, tmp_path, capsys):
        cfg = write(tmp_path / "c.json", {"schema_version": 1, "train": {"epoch": 3}})
        assert run("train", "--dataset", work / "ds", "--out", tmp_path / "o", "--config", cfg) == 1
        assert capsys.readouterr().err.startswith("error:")


class TestOutDir:
    def test_non_empty_needs_force(self, tmp_path):
        (tmp_path / "o").mkdir()
        (tmp_path / "o" / "f").write_text("x")
        with pytest.raises(ConfigError, match="--force"):
            prepare_out(tmp_path / "o", False)
        prepare_out(tmp_path / "o", True)
        assert not any((tmp_path / "o").iterdir())

    def test_force_refuses_to_clear_inputs(self, tmp_path):
        (tmp_path / "o").mkdir()
        (tmp_path / "o" / "data").write_text("x")
        with pytest.raises(ConfigError, match="input"):
            prepare_out(tmp_path / "o", True, [tmp_path / "o" / "data"])


class TestCommands:
    def test_gen_outputs(self, work):
        assert (work / "ds" / "manifest.json").exists()
        m = json.loads((work / "ds" / "manifest.json").read_text())
        assert m["command"] == "gen" and m["seeds"] == {"cohort": 5}

    def test_flags_override_config(self, work, tmp_path):
        cfg = write(tmp_path / "c.json", TINY_TRAIN)
        assert run("train", "--dataset", work / "ds", "--out", tmp_path / "o", "--config", cfg, "--lr", 0.0, "--seed", 4) == 0
        m = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert m["config"]["train"]["lr"] == 0.0
        assert m["config"]["model"]["base_channels"] == 2
        assert m["seeds"]["init"] == m["seeds"]["data"] == m["seeds"]["aug"] == 4

    def test_train_provenance(self, work):
        prov = load_provenance(work / "tr" / "model.tun")
        assert len(prov["train_ids"]) == 5 and len(prov["test_ids"]) == 1
        assert prov["selected_epoch"] == 1
        m = json.loads((work / "tr" / "manifest.json").read_text())
        assert set(m) >= {"command", "config", "seeds", "inputs", "outputs", "version", "started", "finished"}
        assert "model.tun" in m["outputs"]

    def test_eval_regimes(self, evaluated):
        out = evaluated
        for flag in ("1", "2a", "2s", "3"):
            rows = list(csv.DictReader((out / f"metrics_{flag}.csv").open()))
            assert len(rows) == 6 * 4
            summary = json.loads((out / f"summary_{flag}.json").read_text())
            assert summary["views"] == flag and summary["n_patients"] == 6
        assert (out / "regimes.svg").read_text().lstrip().startswith("<?xml")

    def test_eval_unknown_flag_is_usage_error(self, work, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("eval", "--checkpoint", work / "tr" / "model.tun", "--dataset", work / "ds", "--out", tmp_path / "o", "--views", "4")
        assert exc.value.code == 2

    def test_missing_input(self, tmp_path, capsys):
        assert run("train", "--dataset", tmp_path / "nope", "--out", tmp_path / "o") == 1
        assert "does not exist" in capsys.readouterr().err

    def test_stats(self, evaluated, tmp_path, capsys):
        ev = evaluated
        assert run("stats", ev / "metrics_1.csv", ev / "metrics_3.csv", "--out", tmp_path / "st") == 0
        text = capsys.readouterr().out
        assert "Welch t" in text and "Mann-Whitney U" in text
        doc = json.loads((tmp_path / "st" / "stats.json").read_text())
        assert doc["n_a"] == doc["n_b"] == 6
        assert set(doc["welch_t"]) == {"statistic", "p_value", "df", "significant"}

    def test_bad_threads(self, work, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("MVSEG_THREADS", "zero")
        assert run("gen", "--out", tmp_path / "g", "--n-patients", 1) == 1
        assert "MVSEG_THREADS" in capsys.readouterr().err


@pytest.fixture(scope="module")
def sweep(work):
    grid = write(work / "grid.json", {
        "schema_version": 1, "alpha": [0.25, 1.0], "temperature": [0.07], "views": [1, 3], "seeds": [0],
        "base": {k: v for k, v in TINY_TRAIN.items() if k != "schema_version"},
    })
    with pytest.warns(UserWarning, match="skipped"):
        assert run("sweep", "--dataset", work / "ds", "--out", work / "sw", "--grid", grid) == 0
    return work / "sw"


class TestSweep:
    def test_long_format(self, sweep):
        rows = read_sweep_csv(sweep / "sweep.csv")
        assert len(rows) == 4
        assert [(r["alpha"], r["views"]) for r in rows] == [(0.25, 1), (0.25, 3), (1.0, 1), (1.0, 3)]
        assert rows[0]["status"] == "skipped" and np.isnan(rows[0]["wg_dsc"]) and rows[0]["selected_epoch"] is None
        assert all(r["status"] == "ok" and np.isfinite(r["wg_dsc"]) for r in rows[1:])
        m = json.loads((sweep / "manifest.json").read_text())
        assert [s["cell"] for s in m["skipped"]] == ["a0.25_t0.07_v1_s0"]

    def test_header(self, sweep):
        assert (sweep / "sweep.csv").read_text().splitlines()[0] == ",".join(SWEEP_COLUMNS)

    def test_svgs_regenerate_from_csv(self, sweep, tmp_path):
        paths = plot_sweep(sweep / "sweep.csv", tmp_path)
        for p in paths:
            assert "<svg" in p.read_text()
            assert p.read_bytes() == (sweep / p.name).read_bytes()

    def test_malformed_csv(self, tmp_path):
        (tmp_path / "s.csv").write_text(",".join(SWEEP_COLUMNS) + "\n1,2\n")
        with pytest.raises(FormatError):
            read_sweep_csv(tmp_path / "s.csv")

    def test_baseline_cell_matches_train(self, work, sweep, tmp_path):
        cfg = write(tmp_path / "c.json", TINY_TRAIN)
        assert run("train", "--dataset", work / "ds", "--out", tmp_path / "b", "--config", cfg, "--alpha", 1.0, "--views", 1) == 0
        cell = sweep / "cells" / "a1_t0.07_v1_s0"
        assert (tmp_path / "b" / "model.tun").read_bytes() == (cell / "model.tun").read_bytes()
        assert (tmp_path / "b" / "train_log.csv").read_bytes() == (cell / "train_log.csv").read_bytes()


class TestReplay:
    @pytest.mark.parametrize("name", ["ds", "tr"])
    def test_byte_identical(self, work, tmp_path, name):
        assert run("replay", work / name / "manifest.json", "--out", tmp_path / "r") == 0
        assert files(tmp_path / "r") == files(work / name)

    def test_in_place_needs_force(self, work, capsys):
        assert run("replay", work / "tr" / "manifest.json") == 1
        assert "--force" in capsys.readouterr().err

    def test_not_a_manifest(self, tmp_path):
        write(tmp_path / "m.json", {"schema_version": 1, "command": "rm"})
        assert run("replay", tmp_path / "m.json", "--out", tmp_path / "o") == 1
