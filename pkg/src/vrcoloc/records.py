"""Text record files: canonical JSON with a schema header.

Every file written by the package is a JSON object carrying ``schema`` and
``version`` keys. Floats are written with ``repr`` precision, so a write/read
cycle is lossless, and keys are sorted so identical content gives identical
bytes.
"""
import json
import os
import tempfile

import numpy as np

from .errors import ParseError, SchemaVersionError

__all__ = ["dumps", "write_record", "read_record", "check_header"]


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(payload):
    return json.dumps(payload, sort_keys=True, separators=(",", ":"),
                      default=_default, allow_nan=False) + "\n"


def write_record(path, schema, version, payload):
    """Atomically write ``payload`` under a schema header.

    The file is written to a temporary sibling and renamed into place.
    """
    body = dict(payload)
    body["schema"] = schema
    body["version"] = version
    text = dumps(body)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return text


def check_header(body, schema, version):
    if not isinstance(body, dict):
        raise ParseError("record must be a JSON object")
    if body.get("schema") != schema:
        raise SchemaVersionError(
            f"expected schema {schema!r}, found {body.get('schema')!r}")
    if body.get("version") != version:
        raise SchemaVersionError(
            f"{schema}: unsupported version {body.get('version')!r} (this build reads {version})")
    return body


def read_record(path, schema, version):
    try:
        with open(path, encoding="utf-8") as fh:
            body = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return check_header(body, schema, version)
