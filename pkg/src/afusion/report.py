"""Cross-validation results grid: (emotion, method) rows by fold columns."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

EMOTIONS = ("valence", "arousal")
MISSING = "-"


def collect_results(paths) -> dict[tuple[str, int], dict]:
    """(method, fold) -> best report of the selected seed.

    Each path may be a single run directory or any parent of run
    directories. Within a (method, fold) the run with the highest best score
    wins, the lowest seed on ties, which matches the training-time selection.
    """
    found: dict[tuple[str, int], dict] = {}
    for root in paths:
        root = Path(root)
        reports = [root / "report.json"] if (root / "report.json").exists() else sorted(root.rglob("report.json"))
        for rp in reports:
            r = json.loads(rp.read_text())
            if not r.get("best_report"):
                continue
            key = (r.get("method", "?"), int(r["fold_index"]))
            score = r["best_report"]["mean_ccc"] if r.get("best_score") is None else r["best_score"]
            cur = found.get(key)
            if cur is None or score > cur["_score"] or (score == cur["_score"] and r["seed"] < cur["seed"]):
                found[key] = dict(r, _score=score)
    return found


def build_grid(results: dict[tuple[str, int], dict]) -> tuple[list[str], list[list[str]]]:
    methods = sorted({m for m, _ in results})
    folds = sorted({f for _, f in results})
    header = ["emotion", "method"] + [f"fold{f}" for f in folds] + ["mean"]
    rows = []
    for emo in EMOTIONS:
        for m in methods:
            vals = []
            for f in folds:
                r = results.get((m, f))
                vals.append(None if r is None else r["best_report"][f"ccc_{emo}"])
            have = [v for v in vals if v is not None]
            mean = sum(have) / len(have) if have else None
            rows.append([emo, m] + [MISSING if v is None else f"{v:.3f}" for v in vals]
                        + [MISSING if mean is None else f"{mean:.3f}"])
    return header, rows


def grid_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def grid_text(header, rows) -> str:
    table = [header] + rows
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = []
    for k, r in enumerate(table):
        cells = [c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))]
        lines.append("  ".join(cells).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
