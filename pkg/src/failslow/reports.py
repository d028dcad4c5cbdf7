"""Report serialization: fixed-precision JSON lines and atomic file writes."""

import json
import os
import tempfile
from pathlib import Path


def _round(obj):
    if isinstance(obj, float):
        return float(f"{obj:.6f}")
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def dumps(record) -> str:
    """One JSON record, keys sorted, floats rounded to 6 decimals."""
    return json.dumps(_round(record), sort_keys=True, separators=(",", ":"))


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_jsonl(path, records) -> None:
    atomic_write_text(path, "".join(dumps(r) + "\n" for r in records))
