"""Report emission: delimited tables, key-value summaries, plot series,
and the run manifest.

Every numeric cell is printed with repr-exact precision and no file
carries a timestamp, so a re-run with the same config and seed is
byte-identical.  Each artifact opens with the hash of the config that
produced it.
"""

import hashlib
import os
import sys
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .errors import ReportError

__all__ = [
    "config_hash",
    "fmt_cell",
    "write_table",
    "write_summary",
    "write_series",
    "write_manifest",
    "ReportWriter",
]


def config_hash(path: str) -> str:
    try:
        with open(path, "rb") as fh:
            return hashlib.sha256(fh.read()).hexdigest()
    except OSError as e:
        raise ReportError(f"cannot hash config file {path}: {e}") from e


def fmt_cell(x) -> str:
    """One table cell. Floats keep 17 significant digits so parsing the
    table back recovers the exact double."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


def _open_out(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    try:
        return open(path, "w", encoding="utf-8", newline="\n")
    except OSError as e:
        raise ReportError(f"cannot write report {path}: {e}") from e


def write_table(path: str, columns: Sequence[str], rows: Iterable[Sequence],
                cfg_hash: str = "") -> None:
    """Tab-separated table with a header row; empty input leaves just the
    header so downstream parsers see the schema."""
    with _open_out(path) as fh:
        if cfg_hash:
            fh.write(f"# config {cfg_hash}\n")
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            if len(row) != len(columns):
                raise ReportError(
                    f"row width {len(row)} does not match {len(columns)} columns in {path}")
            fh.write("\t".join(fmt_cell(c) for c in row) + "\n")


def write_summary(path: str, entries: Dict[str, object], cfg_hash: str = "") -> None:
    """Flat `key: value` lines; loadable as YAML, greppable as text."""
    with _open_out(path) as fh:
        if cfg_hash:
            fh.write(f"# config {cfg_hash}\n")
        for key, val in entries.items():
            fh.write(f"{key}: {fmt_cell(val)}\n")


def write_series(path: str, x: Sequence, y: Sequence, xlabel: str, ylabel: str,
                 cfg_hash: str = "") -> None:
    """Two-column plot data."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape or x.ndim != 1:
        raise ReportError(f"series columns must be equal-length vectors in {path}")
    with _open_out(path) as fh:
        if cfg_hash:
            fh.write(f"# config {cfg_hash}\n")
        fh.write(f"# {xlabel}\t{ylabel}\n")
        for xi, yi in zip(x, y):
            fh.write(f"{fmt_cell(xi)}\t{fmt_cell(yi)}\n")


def _versions() -> Dict[str, str]:
    import scipy

    from . import __version__

    return {
        "kickflow": __version__,
        "python": "%d.%d.%d" % sys.version_info[:3],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def write_manifest(out_dir: str, subcommand: str, cfg_hash: str, seed: int,
                   artifacts: Sequence[str]) -> str:
    path = os.path.join(out_dir, "manifest.txt")
    with _open_out(path) as fh:
        fh.write(f"subcommand: {subcommand}\n")
        fh.write(f"config: {cfg_hash}\n")
        fh.write(f"seed: {seed}\n")
        for name, ver in _versions().items():
            fh.write(f"version.{name}: {ver}\n")
        for art in sorted(artifacts):
            fh.write(f"artifact: {art}\n")
    return path


class ReportWriter:
    """Collects the artifacts of one subcommand run and stamps each with
    the producing config hash; finish() writes the manifest."""

    def __init__(self, out_dir: str, subcommand: str, cfg_hash: str, seed: int):
        self.out_dir = out_dir
        self.subcommand = subcommand
        self.cfg_hash = cfg_hash
        self.seed = seed
        self.artifacts: List[str] = []

    def path(self, name: str) -> str:
        os.makedirs(self.out_dir, exist_ok=True)
        self.artifacts.append(name)
        return os.path.join(self.out_dir, name)

    def table(self, name: str, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
        write_table(self.path(name), columns, rows, self.cfg_hash)

    def summary(self, name: str, entries: Dict[str, object]) -> None:
        write_summary(self.path(name), entries, self.cfg_hash)

    def series(self, name: str, x, y, xlabel: str, ylabel: str) -> None:
        write_series(self.path(name), x, y, xlabel, ylabel, self.cfg_hash)

    def finish(self) -> str:
        return write_manifest(self.out_dir, self.subcommand, self.cfg_hash,
                              self.seed, self.artifacts)
