import csv
import json

import pytest

from beamopt import cli, experiments
from beamopt.errors import ConvergenceError


def run(*argv):
    return cli.main([str(a) for a in argv])


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture
def pinned_clock(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


def test_gen_train_eval_pipeline(tmp_path, pinned_clock):
    data, model, report = tmp_path / "d.bin", tmp_path / "m.bnn", tmp_path / "e.csv"
    assert run("gen-data", "--problem", "p2", "--n", 4, "--k", 3, "--sinr-target-db", 3,
               "--count", 120, "--seed", 1, "--out", data) == 0
    man = json.loads((tmp_path / "d.bin.manifest.json").read_text())
    assert man["command"] == "gen-data" and man["seed"] == 1
    assert man["started_utc"].startswith("2023-11-14")
    assert str(data) in man["outputs"] and man["kept"] == 120
    assert run("train", "--data", data, "--epochs", 2, "--out", model) == 0
    hist = _rows(str(model) + ".loss.csv")
    assert hist[0] == ["epoch", "train_loss", "val_loss"] and len(hist) == 3
    assert run("eval", "--data", data, "--model", model, "--no-timing", "--out", report) == 0
    rows = _rows(report)
    assert rows[0] == cli.EVAL_COLUMNS
    assert [r[0] for r in rows[1:]] == ["optimal", "zf", "bnn"]
    man = json.loads((tmp_path / "e.csv.manifest.json").read_text())
    assert set(man["inputs"]) == {str(data), str(model)}


def test_reruns_are_byte_identical(tmp_path, pinned_clock):
    data, model, report = tmp_path / "d.bin", tmp_path / "m.bnn", tmp_path / "e.csv"
    steps = [
        ("gen-data", "--problem", "p1", "--n", 3, "--k", 2, "--count", 60, "--seed", 4, "--out", data),
        ("train", "--data", data, "--epochs", 2, "--seed", 3, "--out", model),
        ("eval", "--data", data, "--model", model, "--no-timing", "--out", report),
    ]
    files = [data, model, report, str(model) + ".loss.csv"]
    files += [str(p) + ".manifest.json" for p in (data, model, report)]
    snapshots = []
    for _ in range(2):
        for s in steps:
            assert run(*s) == 0
        snapshots.append([open(f, "rb").read() for f in files])
    assert snapshots[0] == snapshots[1]


def test_reproduce_and_bench(tmp_path):
    out = tmp_path / "fig.csv"
    assert run("reproduce", "fig5a", "--train-count", 40, "--test-count", 10, "--epochs", 1, "--no-timing",
               "--quiet", "--out", out) == 0
    rows = _rows(out)
    assert rows[0] == experiments.FIGURE_HEADER
    assert len(rows) == 1 + 4 * len(experiments.FIGURES["fig5a"][2])
    bench = tmp_path / "bench.csv"
    assert run("bench", "--problem", "p2", "--n", 4, "--k", 3, "--count", 5, "--train-count", 60,
               "--epochs", 1, "--out", bench) == 0
    rows = _rows(bench)
    assert rows[0] == cli.BENCH_COLUMNS
    assert [r[0] for r in rows[1:]] == experiments.BENCH_METHODS["p2"]
    assert all(float(r[2]) > 0 for r in rows[1:])


def test_exit_codes(tmp_path, monkeypatch):
    out = tmp_path / "x"
    assert run("reproduce", "fig99", "--out", out) == 2
    assert run("gen-data", "--problem", "p1", "--sinr-target-db", 3, "--count", 2, "--out", out) == 2
    assert run("gen-data", "--k", 0, "--count", 2, "--out", out) == 2
    assert run("gen-data", "--bogus") == 2
    assert run("train", "--data", tmp_path / "missing.bin", "--out", out) == 3
    (tmp_path / "junk.bin").write_bytes(b"not a dataset")
    assert run("eval", "--data", tmp_path / "junk.bin", "--out", out) == 3
    # one antenna cannot serve three users at 10 dB each
    assert run("gen-data", "--problem", "p2", "--n", 1, "--k", 3, "--sinr-target-db", 10, "--count", 3,
               "--out", out) == 5
    data = tmp_path / "d.bin"
    assert run("gen-data", "--problem", "p1", "--n", 2, "--k", 2, "--count", 20, "--out", data) == 0
    assert run("train", "--data", data, "--stage", "hybrid", "--out", out) == 2
    assert run("eval", "--data", data, "--methods", "wmmse", "--out", out) == 2

    def stuck(*a, **k):
        raise ConvergenceError("stuck")

    monkeypatch.setattr(cli.bnn, "MAKE_TARGETS", {"p1": stuck})
    assert run("gen-data", "--problem", "p1", "--count", 2, "--out", out) == 4
