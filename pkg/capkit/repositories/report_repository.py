import csv
import io
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from capkit.config import Settings, get_settings
from capkit.utils.atomic_io import atomic_write_bytes, atomic_write_text
from capkit.utils.plotting import line_plot_svg

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["case", "n", "epsilon_final", "value", "iterations", "grad_norm", "admissible"]


def _jsonable(value: Any) -> Any:
    """Plain JSON types; numpy scalars and arrays are converted, non-finite floats become null."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


class ReportRepository:
    """Repository pattern for experiment report files under one output directory"""

    def __init__(self, out_dir: Union[str, Path], settings: Optional[Settings] = None):
        self.out_dir = Path(out_dir)
        self.settings = settings or get_settings()

    def save(self, outcome) -> List[Path]:
        """
        Write report.json, summary.csv and, when enabled, one SVG per plot series.

        Args:
            outcome: ExperimentOutcome from the experiment service

        Returns:
            Paths of the written files
        """
        written = [
            self.write_json("report.json", outcome.to_dict()),
            self.write_csv("summary.csv", outcome.rows),
        ]
        plots = outcome.config.write_plots
        if plots is None:
            plots = self.settings.write_plots
        if plots:
            for name in sorted(outcome.series):
                series = outcome.series[name]
                written.append(self.write_plot(
                    f"{name}.svg", series.x, series.y, series.title, series.xlabel, series.ylabel,
                    series.logx, series.logy,
                ))
        logger.info(f"Wrote {len(written)} report files to {self.out_dir}")
        return written

    def write_json(self, filename: str, data: Dict[str, Any]) -> Path:
        text = json.dumps(_jsonable(data), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False)
        return atomic_write_text(self.out_dir / filename, text + "\n")

    def _format(self, value: Any) -> str:
        if isinstance(value, (bool, np.bool_)):
            return "true" if value else "false"
        if isinstance(value, (float, np.floating)):
            return f"{float(value):.{self.settings.csv_significant_digits}g}"
        return str(value)

    def write_csv(self, filename: str, rows: List[Dict[str, Any]]) -> Path:
        """Summary table with one row per solved case."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow([self._format(row.get(column, "")) for column in SUMMARY_COLUMNS])
        return atomic_write_text(self.out_dir / filename, buffer.getvalue())

    def write_plot(self, filename: str, x, y, title: str, xlabel: str, ylabel: str,
                   logx: bool = False, logy: bool = False) -> Path:
        data = line_plot_svg(x, y, title, xlabel, ylabel, logx, logy)
        return atomic_write_bytes(self.out_dir / filename, data)
