import csv
import json
import os
from typing import Any, Dict, List, Sequence

from .pipeline import RunReport

CSV_FIELDS = [
    "method",
    "layer",
    "rows",
    "n_groups",
    "loss_gptq_grid",
    "loss_after_stage1_grid",
    "loss_after_stage2",
    "deviation_constant",
    "output_error",
    "skips",
    "clamps",
    "rows_improved",
]
TABLE_COLUMNS = ("method", "total_loss", "layer_loss", "final_mse", "time_s")


class ReportManager:
    """Writes run, comparison and verification reports as JSON (plus optional CSV)."""

    def __init__(self, path: str = "report.json"):
        self.path = os.fspath(path)

    def save(self, data: Dict[str, Any]) -> None:
        parent = os.path.dirname(self.path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(self.path, "w") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")

    def save_csv(self, reports: Sequence[RunReport], path: str) -> None:
        """Flat per-layer rows, one per (method, layer)."""
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
            writer.writeheader()
            for row in csv_rows(reports):
                writer.writerow(row)


def csv_rows(reports: Sequence[RunReport]) -> List[Dict[str, Any]]:
    rows = []
    for report in reports:
        for layer in report.layers:
            rows.append({
                "method": report.method,
                "layer": layer.index,
                "rows": layer.rows,
                "n_groups": layer.n_groups,
                "loss_gptq_grid": repr(layer.loss_gptq_grid),
                "loss_after_stage1_grid": repr(layer.loss_after_stage1_grid),
                "loss_after_stage2": repr(layer.loss_after_stage2),
                "deviation_constant": repr(layer.deviation_constant),
                "output_error": repr(layer.output_error),
                "skips": layer.skips,
                "clamps": layer.clamps,
                "rows_improved": layer.rows_improved,
            })
    return rows


def comparison_dict(reports: Sequence[RunReport]) -> Dict[str, Any]:
    return {
        "methods": [report.method for report in reports],
        "runs": [report.to_dict() for report in reports],
        "totals": {report.method: report.total_loss for report in reports},
        "best": min(reports, key=lambda r: r.total_loss).method if reports else None,
    }


def format_comparison_table(reports: Sequence[RunReport]) -> str:
    """Aligned text table: one row per method plus a per-layer output-error block."""
    body = [
        (
            report.method,
            f"{report.total_loss:.6e}",
            f"{report.total_layer_loss:.6e}",
            f"{report.evaluation.get('final_mse', float('nan')):.6e}",
            f"{report.timings.get('total', 0.0):.2f}",
        )
        for report in reports
    ]
    widths = [max(len(h), *(len(row[c]) for row in body)) for c, h in enumerate(TABLE_COLUMNS)]
    lines = [
        "  ".join(h.ljust(widths[c]) for c, h in enumerate(TABLE_COLUMNS)),
        "  ".join("-" * w for w in widths),
    ]
    lines += ["  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)) for row in body]

    if reports and reports[0].layers:
        n_layers = len(reports[0].layers)
        header = ["method"] + [f"layer_{k}" for k in range(n_layers)]
        cells = [[r.method] + [f"{layer.output_error:.4e}" for layer in r.layers] for r in reports]
        lw = [max(len(header[c]), *(len(row[c]) for row in cells)) for c in range(len(header))]
        lines += ["", "  ".join(h.ljust(lw[c]) for c, h in enumerate(header))]
        lines += ["  ".join(cell.ljust(lw[c]) for c, cell in enumerate(row)) for row in cells]
    return "\n".join(lines)
