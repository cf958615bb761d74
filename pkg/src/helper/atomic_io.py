import csv
import io
import json
import os
import tempfile
from typing import Any, Iterable, Sequence


def write_text_atomic(path: str, text: str) -> None:
    """Write `text` to `path` through a temp file in the same directory and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def dumps_json(document: Any) -> str:
    # sorted keys + repr floats keep the output byte-stable across runs
    return json.dumps(document, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json_atomic(path: str, document: Any) -> None:
    write_text_atomic(path, dumps_json(document))


def write_csv_atomic(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    write_text_atomic(path, buffer.getvalue())
