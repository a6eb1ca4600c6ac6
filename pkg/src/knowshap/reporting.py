"""Machine-readable reports, their JSON schemas, and append-only manifests.

Reports are written canonically (sorted keys, fixed separators, trailing
newline) so identical runs produce byte-identical files. Anything that varies
between reruns, wall-clock above all, lives in the manifest, never in a
report.
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Any

import jsonschema

from .coalitions import ValueTable
from .shapley import Attribution, AxiomReport

SCHEMA_VERSION = 1

ATTRIBUTION_REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": [
        "schema_version",
        "method",
        "phi",
        "phi_percent_of_grand",
        "grand_value",
        "efficiency_gap",
        "ranking",
        "violations",
    ],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "method": {"enum": ["exact", "permutation", "monte_carlo"]},
        "players": {"type": ["array", "null"], "items": {"type": "string"}},
        "phi": {"type": "array", "items": {"type": "number"}},
        "phi_percent_of_grand": {
            "type": "array",
            "items": {"type": ["number", "null"]},
        },
        "grand_value": {"type": "number"},
        "baseline": {"type": ["number", "null"]},
        "efficiency_gap": {"type": "number"},
        "stderr": {"type": ["array", "null"], "items": {"type": "number"}},
        "evaluations_used": {"type": "integer"},
        "iterations": {"type": ["integer", "null"]},
        "ranking": {"type": "array", "items": {"type": "integer"}},
        "violations": {"type": "array", "items": {"type": "string"}},
        "axioms": {"type": "object"},
        "manifest": {"type": ["string", "null"]},
    },
    "additionalProperties": False,
}

COALITION_TABLE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "n_players", "players", "rows"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "n_players": {"type": "integer"},
        "players": {"type": "array", "items": {"type": "string"}},
        "baseline_accuracy": {"type": ["number", "null"]},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["members", "label"],
                "properties": {
                    "members": {"type": "array", "items": {"type": "integer"}},
                    "label": {"type": "string"},
                    "mean_accuracy": {"type": ["number", "null"]},
                    "improvement": {"type": ["number", "null"]},
                    "error": {"type": ["string", "null"]},
                },
                "additionalProperties": False,
            },
        },
        "manifest": {"type": ["string", "null"]},
    },
    "additionalProperties": False,
}

EXPERIMENT_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "dataset", "knowledge", "train", "attribution"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "dataset": {"type": "object", "required": ["source"]},
        "knowledge": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "family"],
                "properties": {
                    "name": {"type": "string"},
                    "family": {"enum": ["one_hot", "subset"]},
                    "subset": {"type": "array", "items": {"type": "integer"}},
                    "lambda": {"type": "number"},
                    "corruption_rate": {"type": "number"},
                    "seed": {"type": "integer"},
                },
            },
        },
        "train": {"type": "object"},
        "attribution": {
            "type": "object",
            "required": ["method"],
            "properties": {
                "method": {"enum": ["exact", "permutation", "monte_carlo"]},
                "max_iter": {"type": "integer"},
                "seed": {"type": "integer"},
                "target_stderr": {"type": ["number", "null"]},
            },
        },
        "repetition_seeds": {"type": "array", "items": {"type": "integer"}},
        "workers": {"type": "integer"},
    },
}


def validate_report(payload: dict, schema: dict) -> None:
    jsonschema.validate(payload, schema)


def dump_canonical(payload: Any) -> str:
    """Deterministic JSON text: sorted keys, stable float repr, newline end."""
    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_atomic(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
    return path


def attribution_report(
    attribution: Attribution,
    axioms: AxiomReport,
    grand_value: float,
    players: tuple[str, ...] | None = None,
    baseline: float | None = None,
    iterations: int | None = None,
    manifest: str | None = None,
) -> dict:
    """Assemble the attribution report payload (validated against schema)."""
    phi = [float(v) for v in attribution.phi]
    percent = [
        (100.0 * v / grand_value) if grand_value != 0.0 else None for v in phi
    ]
    payload = {
        "schema_version": SCHEMA_VERSION,
        "method": attribution.method,
        "players": list(players) if players is not None else None,
        "phi": phi,
        "phi_percent_of_grand": percent,
        "grand_value": float(grand_value),
        "baseline": baseline,
        "efficiency_gap": float(axioms.efficiency_gap),
        "stderr": [float(s) for s in attribution.stderr] if attribution.stderr is not None else None,
        "evaluations_used": int(attribution.evaluations_used),
        "iterations": iterations,
        "ranking": attribution.ranking(),
        "violations": axioms.violations,
        "axioms": axioms.to_dict(),
        "manifest": manifest,
    }
    validate_report(payload, ATTRIBUTION_REPORT_SCHEMA)
    return payload


def coalition_table_report(
    n_players: int,
    players: tuple[str, ...] | None,
    baseline_accuracy: float | None,
    mean_accuracy: dict,
    improvements: dict,
    errors: dict,
    manifest: str | None = None,
) -> dict:
    """Table-1-shaped summary: one row per coalition with accuracy and gain.

    Coalitions whose evaluation failed appear with an error message instead
    of numbers, so a partially failed experiment still reports what it can.
    """
    players = tuple(players) if players else tuple(f"player_{i}" for i in range(n_players))
    rows = []
    for coalition in sorted(set(mean_accuracy) | set(errors) | set(improvements)):
        label = " & ".join(players[i] for i in coalition.members()) or "none"
        rows.append(
            {
                "members": list(coalition.members()),
                "label": label,
                "mean_accuracy": mean_accuracy.get(coalition),
                "improvement": improvements.get(coalition),
                "error": errors.get(coalition),
            }
        )
    payload = {
        "schema_version": SCHEMA_VERSION,
        "n_players": n_players,
        "players": list(players),
        "baseline_accuracy": baseline_accuracy,
        "rows": rows,
        "manifest": manifest,
    }
    validate_report(payload, COALITION_TABLE_SCHEMA)
    return payload


def coalition_table_csv(payload: dict) -> str:
    """Plot-ready CSV projection of a coalition-table report."""
    lines = ["members,label,mean_accuracy,improvement,error"]
    for row in payload["rows"]:
        members = ";".join(str(i) for i in row["members"])
        acc = "" if row["mean_accuracy"] is None else repr(row["mean_accuracy"])
        imp = "" if row["improvement"] is None else repr(row["improvement"])
        err = row["error"] or ""
        label = row["label"]
        lines.append(f"{members},{label},{acc},{imp},{err}")
    return "\n".join(lines) + "\n"


def append_manifest(path: str | Path, entry: dict) -> Path:
    """Append one JSON line; the manifest is the only place wall-clock lives."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as handle:
        handle.write(json.dumps(entry, sort_keys=True) + "\n")
    return path


def manifest_entry(
    command: str,
    config: dict,
    seed: int | None,
    artifacts: list[str],
    started: float,
    cache_stats: dict | None = None,
) -> dict:
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "wall_clock_s": round(time.time() - started, 3),
        "cache": cache_stats or {},
    }


def format_ranking_text(payload: dict) -> str:
    """Human-readable ranking with the improvement decomposition."""
    players = payload["players"] or [f"player_{i}" for i in range(len(payload["phi"]))]
    lines = [
        f"method: {payload['method']}",
        f"grand improvement: {payload['grand_value']:+.6f}"
        + (f" over baseline {payload['baseline']:.6f}" if payload.get("baseline") is not None else ""),
    ]
    for rank, idx in enumerate(payload["ranking"], start=1):
        phi = payload["phi"][idx]
        pct = payload["phi_percent_of_grand"][idx]
        pct_text = f" ({pct:5.1f}% of grand)" if pct is not None else ""
        stderr = payload.get("stderr")
        err_text = f" +- {stderr[idx]:.6f}" if stderr else ""
        lines.append(f"  {rank}. {players[idx]:<16} phi = {phi:+.6f}{err_text}{pct_text}")
    if payload["violations"]:
        lines.append("axiom violations:")
        lines.extend(f"  - {v}" for v in payload["violations"])
    else:
        lines.append("axiom checks: all passed")
    return "\n".join(lines)
