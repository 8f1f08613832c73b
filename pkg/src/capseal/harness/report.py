"""Result serialization: one JSON document per run plus Markdown summary
tables (leakage / unauthorized use / completion / latency)."""

from __future__ import annotations

import json
from pathlib import Path

from capseal.harness.latency import LatencyResult
from capseal.harness.scenarios import ScenarioRun


def scenario_result_doc(run: ScenarioRun) -> dict:
    s = run.summary
    return {
        "system": run.system,
        "scenario": run.scenario,
        "n": run.n,
        "seed": run.seed,
        "rate": round(s.rate, 3),
        "ci": [round(s.wilson_low, 3), round(s.wilson_high, 3)],
    }


def latency_result_doc(result: LatencyResult,
                       direct_median_ms: float | None = None) -> dict:
    s = result.summary
    doc = {
        "system": result.system,
        "protocol": result.protocol,
        "n": s.n,
        "median_ms": round(s.median_ms, 3),
        "p95_ms": round(s.p95_ms, 3),
        "mean_ms": round(s.mean_ms, 3),
    }
    if direct_median_ms is not None:
        doc["overhead_ms"] = round(s.median_ms - direct_median_ms, 3)
    return doc


def write_json(path: str | Path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _md_table(headers: list[str], rows: list[list]) -> str:
    lines = ["| " + " | ".join(headers) + " |",
             "|" + "|".join("---" for _ in headers) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
    return "\n".join(lines)


def scenario_markdown(runs: list[ScenarioRun]) -> str:
    sections = []
    groups = {
        "Key leakage rate": "key_leakage",
        "Unauthorized credential use rate": "unauthorized_use",
        "Benign request completion rate": "benign_completion",
    }
    for title, tag in groups.items():
        rows = []
        for run in runs:
            if tag not in run.scenario:
                continue
            protocol = "HTTP" if run.scenario.startswith("http") else "SSH"
            s = run.summary
            rows.append([protocol, run.system, f"{s.rate:.3f}",
                         f"[{s.wilson_low:.3f}, {s.wilson_high:.3f}]", run.n])
        if rows:
            sections.append(f"## {title}\n\n" + _md_table(
                ["Protocol", "System", "Rate", "95% CI", "n"], rows))
    return "\n\n".join(sections) + "\n"


def latency_markdown(results: list[LatencyResult]) -> str:
    direct = {r.protocol: r.summary.median_ms
              for r in results if r.system == "Direct"}
    rows = []
    for r in results:
        overhead = r.summary.median_ms - direct.get(r.protocol, r.summary.median_ms)
        rows.append([r.protocol.upper(), r.system,
                     f"{r.summary.median_ms:.3f}", f"{r.summary.p95_ms:.3f}",
                     f"{max(overhead, 0.0):.3f}" if r.system != "Direct" else "0.000"])
    return ("## Same-harness latency comparison\n\n"
            + _md_table(["Protocol", "System", "Median (ms)", "P95 (ms)",
                         "Overhead (ms)"], rows) + "\n")
