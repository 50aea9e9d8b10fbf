"""Shared helpers for run artifacts: config hashing, headers, float text.

Every artifact written by the pipeline embeds the experiment config hash
and seed in `#`-prefixed header lines so downstream stages can refuse
mismatched inputs. Floats are serialized with Python's shortest
round-trip repr, which parses back bit-exactly.
"""

from __future__ import annotations

import hashlib
import json


class ArtifactMismatchError(ValueError):
    """An input artifact belongs to a different config or seed."""


def config_hash(config_dict) -> str:
    """Stable short hash of a JSON-serializable config mapping."""
    canonical = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def fmt_float(x) -> str:
    return repr(float(x))


def fmt_floats(values, sep=",") -> str:
    return sep.join(repr(float(v)) for v in values)


def header_lines(kind: str, meta: dict) -> list[str]:
    lines = [f"# semidlab {kind} v1"]
    for key in sorted(meta):
        lines.append(f"# {key}={meta[key]}")
    return lines


def write_table(path, kind: str, meta: dict, columns, rows) -> None:
    """Write a line-delimited table with header comments; tab-separated."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines(kind, meta):
            fh.write(line + "\n")
        fh.write("# columns: " + "\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(row) + "\n")


def read_table(path, kind: str):
    """Read a table written by ``write_table``; returns (meta, columns, rows)."""
    meta: dict[str, str] = {}
    columns: list[str] = []
    rows: list[list[str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        expected = f"# semidlab {kind} v1"
        if first != expected:
            raise ArtifactMismatchError(f"{path}: expected header {expected!r}, got {first!r}")
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# columns: "):
                columns = line[len("# columns: ") :].split("\t")
            elif line.startswith("# "):
                key, _, value = line[2:].partition("=")
                meta[key] = value
            elif line:
                rows.append(line.split("\t"))
    return meta, columns, rows


def check_same_run(path_a, meta_a: dict, path_b, meta_b: dict) -> None:
    """Refuse to combine artifacts from different configs or seeds."""
    for key in ("config_hash", "seed"):
        if str(meta_a.get(key)) != str(meta_b.get(key)):
            raise ArtifactMismatchError(
                f"{key} mismatch: {path_a} has {meta_a.get(key)!r}, {path_b} has {meta_b.get(key)!r}"
            )
