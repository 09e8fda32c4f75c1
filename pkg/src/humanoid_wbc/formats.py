"""Versioned JSON / JSON-lines / CSV helpers shared by the file interfaces."""

import csv
import hashlib
import json
from pathlib import Path

from ._validation import InputError

SCHEMA_VERSION = "1.0"


def check_schema(data, kind=None):
    version = str(data.get("schema_version", SCHEMA_VERSION))
    major = version.split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise InputError(f"unsupported schema version {version} (reader supports {SCHEMA_VERSION})")
    if kind is not None and data.get("kind", kind) != kind:
        raise InputError(f"expected a {kind!r} file, got {data.get('kind')!r}")
    return data


def dumps(data):
    return json.dumps(data, indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, data, kind=None):
    payload = {"schema_version": SCHEMA_VERSION, **({"kind": kind} if kind else {}), **data}
    Path(path).write_text(dumps(payload))
    return payload


def read_json(path, kind=None):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise InputError(f"{path}: expected a JSON object")
    return check_schema(data, kind)


def write_jsonl(path, rows, kind=None):
    """One JSON object per line, preceded by a header line carrying the schema version."""
    header = {"schema_version": SCHEMA_VERSION, "header": True, **({"kind": kind} if kind else {})}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, allow_nan=False) + "\n")


def read_jsonl(path, kind=None):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise InputError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
    if rows and isinstance(rows[0], dict) and rows[0].get("header"):
        check_schema(rows.pop(0), kind)
    elif kind is not None:
        raise InputError(f"{path}: missing JSON-lines header")
    return rows


def write_csv(path, header, rows, kind=None):
    """CSV with a leading ``# schema_version=... kind=...`` comment line."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}" + (f" kind={kind}" if kind else "") + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path, kind=None):
    with open(path, newline="") as fh:
        first = fh.readline()
        meta = {}
        if first.startswith("#"):
            for item in first[1:].split():
                key, _, value = item.partition("=")
                meta[key] = value
            check_schema(meta, kind)
        else:
            fh.seek(0)
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise InputError(f"{path}: empty CSV file") from exc
        return header, [row for row in reader]


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
