"""JSON Schema validation for every JSON artifact camlink reads or writes.

Each artifact kind maps to its schema and to the error raised when a payload
does not conform. A few constraints JSON Schema cannot express (square score
matrices, unique account ids) are checked after the schema passes.
"""
from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from jsonschema import Draft202012Validator

from .errors import CamlinkError, ConfigError, ManifestError

SCHEMA_DIR = Path(__file__).resolve().parent / "schemas"

ARTIFACT_SCHEMAS: dict[str, tuple[str, type[CamlinkError]]] = {
    "manifest": ("manifest.schema.json", ManifestError),
    "clusters": ("clusters.schema.json", ConfigError),
    "fingerprint_index": ("fingerprint_index.schema.json", ConfigError),
    "scores": ("scores.schema.json", ConfigError),
    "metrics_report": ("metrics_report.schema.json", ConfigError),
    "run_record": ("run_record.schema.json", ConfigError),
}


@lru_cache(maxsize=None)
def _load_schema(schema_name: str) -> dict:
    schema_path = SCHEMA_DIR / schema_name
    if not schema_path.exists():
        raise FileNotFoundError(f"Schema not found: {schema_path}")
    return json.loads(schema_path.read_text(encoding="utf-8"))


def _format_errors(errors: Iterable[str], label: str) -> str:
    joined = "\n".join(f"- {error}" for error in errors)
    return f"Schema validation failed for {label}:\n{joined}"


def _square_scores(payload: Mapping[str, Any]) -> list[str]:
    size = len(payload["account_ids"])
    problems = []
    if len(payload["scores"]) != size:
        problems.append(f"scores: {len(payload['scores'])} rows for {size} accounts")
    for index, row in enumerate(payload["scores"]):
        if len(row) != size:
            problems.append(f"scores -> {index}: {len(row)} values for {size} accounts")
    return problems


def _unique_accounts(payload: Mapping[str, Any]) -> list[str]:
    ids = [account["account_id"] for account in payload["accounts"]]
    duplicates = sorted({account_id for account_id in ids if ids.count(account_id) > 1})
    return [f"accounts: duplicate account id {account_id}" for account_id in duplicates]


_EXTRA_CHECKS: dict[str, Callable[[Mapping[str, Any]], list[str]]] = {
    "scores": _square_scores,
    "manifest": _unique_accounts,
}


def validate_payload(
    payload: Mapping[str, object],
    schema_name: str,
    label: str,
    *,
    error: type[CamlinkError] = ManifestError,
) -> None:
    validator = Draft202012Validator(_load_schema(schema_name))
    errors = []
    for problem in sorted(validator.iter_errors(payload), key=lambda e: list(e.path)):
        location = " -> ".join(str(part) for part in problem.path) or "<root>"
        errors.append(f"{location}: {problem.message}")
    if errors:
        raise error(_format_errors(errors, label))


def validate_artifact(payload: Mapping[str, Any], kind: str, label: str | None = None) -> None:
    """Validate a camlink artifact of ``kind`` and raise that kind's error on failure."""
    try:
        schema_name, error = ARTIFACT_SCHEMAS[kind]
    except KeyError:
        raise ValueError(f"Unknown artifact kind '{kind}'") from None
    label = label or kind.replace("_", " ")
    validate_payload(payload, schema_name, label, error=error)
    check = _EXTRA_CHECKS.get(kind)
    problems = check(payload) if check is not None else []
    if problems:
        raise error(_format_errors(problems, label))
