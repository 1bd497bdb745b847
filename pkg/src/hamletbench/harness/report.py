"""Results serialization: a lossless JSON document plus a fixed-column CSV
derived from it, with an embedded config fingerprint."""

from __future__ import annotations

import csv
import io
import json

CSV_COLUMNS = ["variant", "task", "full", "partial", "n", "se", "ceiling",
               "chunk_acc", "tokens", "macs", "latency_ms", "peak_scalars"]


def results_row(variant, task, full=None, partial=None, n=None, se=None,
                ceiling=None, chunk_acc=None, tokens=None, macs=None,
                latency_ms=None, peak_scalars=None, **extra):
    row = {"variant": variant, "task": task, "full": full, "partial": partial,
           "n": n, "se": se, "ceiling": ceiling, "chunk_acc": chunk_acc,
           "tokens": tokens, "macs": macs, "latency_ms": latency_ms,
           "peak_scalars": peak_scalars}
    if extra:
        row["extra"] = extra
    return row


def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore",
                            lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k))
                         for k in CSV_COLUMNS})
    return buf.getvalue()


def write_report(results: dict, fmt: str, path) -> None:
    """``results`` must carry 'rows' (list of results_row dicts) and
    'fingerprint'; the JSON format is the lossless superset the CSV is cut
    from, so regeneration from stored JSON is byte-identical."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    if "rows" not in results or "fingerprint" not in results:
        raise ValueError("results must contain 'rows' and 'fingerprint'")
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as f:
            json.dump(results, f, sort_keys=True, indent=2)
            f.write("\n")
    else:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# fingerprint: {results['fingerprint']}\n")
            f.write(_csv_text(results["rows"]))


def load_results(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
