"""Artifact emission: exact numeric round trips and byte-stable reruns."""
import numpy as np
import pytest

from kickflow.errors import ReportError
from kickflow.report import (
    ReportWriter,
    config_hash,
    fmt_cell,
    write_manifest,
    write_series,
    write_summary,
    write_table,
)


def test_config_hash_tracks_content(tmp_path):
    p = tmp_path / "a.yaml"
    p.write_text("seed: 1\n")
    h1 = config_hash(p)
    assert len(h1) == 64 and h1 == config_hash(p)
    p.write_text("seed: 2\n")
    assert config_hash(p) != h1
    with pytest.raises(ReportError):
        config_hash(tmp_path / "missing.yaml")


def test_fmt_cell_round_trips_doubles():
    for x in (0.1, 1.0 / 3.0, 1e-300, -2.5e17, np.pi, 5e-324, 0.0):
        assert float(fmt_cell(x)) == x
    assert fmt_cell(True) == "true"
    assert fmt_cell(np.bool_(False)) == "false"
    assert fmt_cell(7) == "7"
    assert fmt_cell(np.int64(-3)) == "-3"
    assert fmt_cell("label") == "label"


def test_write_table_round_trip(tmp_path):
    p = tmp_path / "t.tsv"
    rows = [[1, 0.125, "a", True], [2, 1.0 / 3.0, "b", False]]
    write_table(p, ["n", "x", "tag", "ok"], rows, cfg_hash="deadbeef")
    lines = p.read_text().splitlines()
    assert lines[0] == "# config deadbeef"
    assert lines[1] == "n\tx\ttag\tok"
    got = lines[2].split("\t")
    assert int(got[0]) == 1 and float(got[1]) == 0.125
    assert float(lines[3].split("\t")[1]) == 1.0 / 3.0


def test_write_table_rejects_ragged_rows(tmp_path):
    with pytest.raises(ReportError):
        write_table(tmp_path / "bad.tsv", ["a", "b"], [[1, 2], [3]])


def test_write_summary_and_series(tmp_path):
    s = tmp_path / "s.txt"
    write_summary(s, {"count": 3, "value": 0.1}, cfg_hash="abc")
    text = s.read_text()
    assert text.startswith("# config abc\n")
    assert "count: 3\n" in text
    assert float(text.split("value: ")[1].strip()) == 0.1

    p = tmp_path / "c.dat"
    write_series(p, [0, 1, 2], [0.5, 0.25, 0.125], "step", "gap")
    lines = p.read_text().splitlines()
    assert lines[0] == "# step\tgap"
    assert [float(l.split("\t")[1]) for l in lines[1:]] == [0.5, 0.25, 0.125]
    with pytest.raises(ReportError):
        write_series(tmp_path / "bad.dat", [0, 1], [1.0], "x", "y")


def test_manifest_contents(tmp_path):
    path = write_manifest(tmp_path, "simulate", "ff00", 42, ["b.tsv", "a.txt"])
    lines = open(path).read().splitlines()
    assert lines[0] == "subcommand: simulate"
    assert lines[1] == "config: ff00"
    assert lines[2] == "seed: 42"
    assert any(l.startswith("version.kickflow: ") for l in lines)
    assert any(l.startswith("version.numpy: ") for l in lines)
    arts = [l for l in lines if l.startswith("artifact: ")]
    assert arts == ["artifact: a.txt", "artifact: b.tsv"]  # sorted


def test_report_writer_collects_and_reruns_identically(tmp_path):
    def emit(out_dir):
        w = ReportWriter(str(out_dir), "demo", "c0ffee", 7)
        w.table("rows.tsv", ["k", "v"], [[1, 0.5], [2, 0.25]])
        w.summary("summary.txt", {"total": 0.75})
        w.series("curve.dat", [0, 1], [1.0, 0.5], "n", "val")
        w.finish()

    emit(tmp_path / "one")
    emit(tmp_path / "two")
    names = ["rows.tsv", "summary.txt", "curve.dat", "manifest.txt"]
    for name in names:
        a = (tmp_path / "one" / name).read_bytes()
        b = (tmp_path / "two" / name).read_bytes()
        assert a == b, name
    manifest = (tmp_path / "one" / "manifest.txt").read_text()
    for name in names[:-1]:
        assert f"artifact: {name}" in manifest
