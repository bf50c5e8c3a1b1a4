import csv
import io
import logging
from collections.abc import Sequence
from pathlib import Path

from rich.console import Console
from rich.table import Table

from gmmcalib.evaluation import MetricsTable
from gmmcalib.utils import atomic_write_text

logger = logging.getLogger(__name__)
console = Console()

SUMMARY_COLUMNS = (
    "algorithm",
    "d_roll",
    "d_pitch",
    "d_yaw",
    "dx",
    "dy",
    "dz",
    "dist_x",
    "dist_y",
    "dist_z",
    "miscalibrations",
    "failures",
    "n_pairs",
    "fit_slope",
    "fit_intercept",
    "validation_error",
)


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.9g}"


def summary_row(table: MetricsTable) -> list[str]:
    """One summary line: mean absolute errors (rad, m), counts and range-fit terms."""
    fit = table.global_fit
    return [
        table.algorithm,
        *(_fmt(v) for v in table.mean_delta.as_array()),
        *(_fmt(v) for v in table.mean_abs_distance),
        str(table.miscalibration_count),
        str(table.failures),
        str(table.n_pairs),
        _fmt(fit.slope if fit else None),
        _fmt(fit.intercept if fit else None),
        _fmt(table.validation_error),
    ]


def summary_csv(tables: Sequence[MetricsTable]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for table in tables:
        writer.writerow(summary_row(table))
    return buffer.getvalue()


def _align(values: Sequence[str], widths: Sequence[int]) -> str:
    cells = [v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(values, widths, strict=True))]
    return "  ".join(cells).rstrip()


def summary_text(tables: Sequence[MetricsTable]) -> str:
    """Plain text version of the summary table."""
    lines = [
        "Calibration Error Summary",
        "=========================",
        "",
        "Mean absolute Euler angle [rad] and translation [m] errors per algorithm",
        "",
    ]
    first = max([len(SUMMARY_COLUMNS[0]), *(len(t.algorithm) for t in tables)])
    widths = [first] + [15] * (len(SUMMARY_COLUMNS) - 1)
    lines.append(_align(SUMMARY_COLUMNS, widths))
    lines.extend(_align(summary_row(t), widths) for t in tables)
    lines.append("")
    for table in tables:
        lines.append(
            f"[{table.algorithm}] {table.miscalibration_count} of {table.n_pairs} pairs miscalibrated "
            f"(> {table.threshold:g} m), {table.failures} failed"
        )
    return "\n".join(lines) + "\n"


def summary_table(tables: Sequence[MetricsTable]) -> Table:
    table = Table(title="Mean absolute calibration errors")
    table.add_column("Algorithm", style="green")
    for name in ("δroll", "δpitch", "δyaw"):
        table.add_column(f"{name} [rad]", style="cyan", justify="right")
    for name in ("δx", "δy", "δz"):
        table.add_column(f"{name} [m]", style="cyan", justify="right")
    table.add_column("Miscalibrated", style="magenta", justify="right")
    table.add_column("Failed", style="red", justify="right")
    table.add_column("Pairs", justify="right")
    for metrics in tables:
        delta = metrics.mean_delta.as_array()
        table.add_row(
            metrics.algorithm,
            *(f"{v:.4f}" for v in delta),
            str(metrics.miscalibration_count),
            str(metrics.failures),
            str(metrics.n_pairs),
        )
    return table


def write_summary(tables: Sequence[MetricsTable], output_dir: Path) -> tuple[Path, Path]:
    """Write ``summary.csv`` and ``summary.txt`` to ``output_dir``.

    Raises:
        OSError: If there are issues writing the files
    """
    csv_path = atomic_write_text(Path(output_dir) / "summary.csv", summary_csv(tables))
    text_path = atomic_write_text(Path(output_dir) / "summary.txt", summary_text(tables))
    logger.info(f"Summary written: {text_path}")
    return csv_path, text_path


def display_summary(tables: Sequence[MetricsTable]) -> None:
    if not tables:
        console.print("[yellow]No metrics to summarize.[/yellow]")
        return
    console.print(summary_table(tables))
