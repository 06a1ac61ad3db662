"""Report files: JSON + CSV writers and the check that both agree."""
import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence

from fedretina.errors import UsageError

logger = logging.getLogger(__name__)

# report name -> CSV column holding the row key
REPORTS = {"experiment1": "model", "experiment2": "model", "crossval": "variant"}
CONSISTENCY_TOLERANCE = 1e-12


def write_json(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    logger.debug("wrote %s", path)
    return path


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read report {path}: {exc}") from exc


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    """Floats are written with repr so values round-trip exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if value is None else repr(value) if isinstance(value, float) else value
                             for value in row])
    logger.debug("wrote %s", path)
    return path


def read_csv(path) -> List[Dict[str, str]]:
    try:
        with open(path, newline="") as handle:
            return list(csv.DictReader(handle))
    except OSError as exc:
        raise UsageError(f"cannot read report {path}: {exc}") from exc


def _as_float(value):
    if value in ("", None):
        return None
    return float(value)


def _json_rows(name: str, payload: dict) -> Dict[str, Dict[str, object]]:
    """Flatten a report's JSON table to row key -> {column: number}."""
    if name == "experiment1":
        rows = dict(payload["models"])
        rows.update(payload.get("baselines", {}))
        return {key: {"accuracy": r["accuracy"], "macro_roc_auc": r["macro_roc_auc"],
                      "n_samples": r["n_samples"], "model_size_bytes": r["model_size_bytes"]}
                for key, r in rows.items()}
    if name == "experiment2":
        return {model: dict(cells) for model, cells in payload["accuracy"].items()}
    return {v["name"]: {key: v[key] for key in ("mean_accuracy", "std_accuracy", "mean_macro_roc_auc",
                                                 "std_macro_roc_auc", "model_size_bytes")}
            for v in payload["variants"]}


def check_consistency(out_dir) -> List[str]:
    """Compare every JSON report in `out_dir` with its CSV twin; returns the mismatches."""
    out_dir = Path(out_dir)
    problems: List[str] = []
    found = False
    for name, key_column in REPORTS.items():
        json_path, csv_path = out_dir / f"{name}.json", out_dir / f"{name}.csv"
        if not json_path.exists():
            continue
        found = True
        if not csv_path.exists():
            problems.append(f"{csv_path.name} is missing")
            continue
        expected = _json_rows(name, read_json(json_path))
        actual = {row[key_column]: row for row in read_csv(csv_path)}
        if set(expected) != set(actual):
            problems.append(f"{name}: rows {sorted(expected)} in JSON vs {sorted(actual)} in CSV")
            continue
        for row_key, columns in expected.items():
            for column, value in columns.items():
                other = _as_float(actual[row_key].get(column))
                if value is None or other is None:
                    if value is not other:
                        problems.append(f"{name}/{row_key}/{column}: {value} vs {other}")
                elif abs(float(value) - other) > CONSISTENCY_TOLERANCE:
                    problems.append(f"{name}/{row_key}/{column}: {value} vs {other}")
    if not found:
        raise UsageError(f"no reports found in {out_dir}")
    return problems


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in header]] + [
        [f"{v:.4f}" if isinstance(v, float) else "-" if v is None else str(v) for v in row] for row in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines)


def summarize(out_dir) -> str:
    """Human-readable summaries of whichever reports exist in `out_dir`."""
    out_dir = Path(out_dir)
    sections = []
    if (out_dir / "experiment1.json").exists():
        payload = read_json(out_dir / "experiment1.json")
        rows = {**payload["models"], **payload.get("baselines", {})}
        sections.append("Independent test set accuracy\n" + format_table(
            ["model", "accuracy", "macro ROC AUC", "size (bytes)"],
            [[name, r["accuracy"], r["macro_roc_auc"], r["model_size_bytes"]] for name, r in rows.items()]))
    if (out_dir / "experiment2.json").exists():
        payload = read_json(out_dir / "experiment2.json")
        columns = payload["columns"]
        sections.append("Generalizability matrix (accuracy)\n" + format_table(
            ["model"] + columns,
            [[model] + [payload["accuracy"][model][c] for c in columns] for model in payload["rows"]])
            + "\nbest per test set: " + ", ".join(f"{c}={payload['best'][c]}" for c in columns))
    if (out_dir / "crossval.json").exists():
        payload = read_json(out_dir / "crossval.json")
        sections.append("Cross-validation\n" + format_table(
            ["variant", "accuracy", "std", "macro ROC AUC", "size (MB)"],
            [[v["name"], v["mean_accuracy"], v["std_accuracy"], v["mean_macro_roc_auc"], v["model_size_mb"]]
             for v in payload["variants"]]))
    if not sections:
        raise UsageError(f"no reports found in {out_dir}")
    return "\n\n".join(sections)
