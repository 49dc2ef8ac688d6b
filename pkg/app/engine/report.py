"""Report rendering - markdown result tables and plot-data CSVs from persisted runs"""
import logging
from pathlib import Path
from typing import Dict, List, Union

import pandas as pd

from app.engine import ResultRow, read_results, results_table
from app.errors import MissingArtifactsError

logger = logging.getLogger(__name__)

# stage log name prefix -> stage label in the merged loss file
_LOG_STAGES = {"pretrain": "pretrain", "expert_": "experts", "distill": "distill", "lineval": "lineval"}


def find_run_dirs(root: Union[str, Path]) -> List[Path]:
    """Every directory under root (root included) holding a config.lock and results.csv"""
    root = Path(root)
    if not root.is_dir():
        return []
    return sorted(
        p.parent for p in root.rglob("results.csv")
        if (p.parent / "config.lock").exists()
    )


def markdown_table(frame: pd.DataFrame, float_format: str = "{:.2f}") -> str:
    """Pipe table with the index flattened into leading columns"""
    flat = frame.reset_index()
    header = [str(c) for c in flat.columns]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for record in flat.itertuples(index=False):
        cells = []
        for value in record:
            if isinstance(value, float):
                cells.append("" if pd.isna(value) else float_format.format(value))
            else:
                cells.append(str(value))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def _stage_of(log_name: str) -> str:
    for prefix, stage in _LOG_STAGES.items():
        if log_name.startswith(prefix):
            return stage
    return log_name


def _collect(run_dirs: List[Path], root: Path) -> Dict[str, pd.DataFrame]:
    distributions, pcas, losses = [], [], []
    for run_dir in run_dirs:
        name = str(run_dir.relative_to(root)) if run_dir != root else run_dir.name
        if (run_dir / "distribution.csv").exists():
            distributions.append(pd.read_csv(run_dir / "distribution.csv").assign(run=name))
        if (run_dir / "cluster" / "pca.csv").exists():
            pcas.append(pd.read_csv(run_dir / "cluster" / "pca.csv").assign(run=name))
        for log in sorted((run_dir / "logs").glob("*.csv")):
            frame = pd.read_csv(log)
            if {"epoch", "loss"} <= set(frame.columns):
                losses.append(frame[["epoch", "loss", "lr"]].assign(run=name, stage=_stage_of(log.stem), log=log.stem))
    out = {}
    if distributions:
        out["distribution"] = pd.concat(distributions, ignore_index=True)
    if pcas:
        out["pca"] = pd.concat(pcas, ignore_index=True)
    if losses:
        out["losses"] = pd.concat(losses, ignore_index=True)
    return out


def report(run_dir: Union[str, Path]) -> Path:
    """Write report.md plus plot_*.csv files into run_dir; returns the markdown path

    run_dir may be a single run or a grid directory containing runs.
    """
    root = Path(run_dir)
    run_dirs = find_run_dirs(root)
    if not run_dirs:
        raise MissingArtifactsError(f"no finished runs (results.csv + config.lock) under {root}")

    rows: List[ResultRow] = []
    for d in run_dirs:
        rows.extend(read_results(d / "results.csv"))

    table = results_table(rows)
    detail = pd.DataFrame([r.model_dump() for r in rows])[["subset", "n", "method", "seed", "accuracy", "epochs", "run"]]
    plot_data = _collect(run_dirs, root)

    lines = [
        "# Linear evaluation accuracy (%)",
        "",
        markdown_table(table),
        "",
        "## Runs",
        "",
        markdown_table(detail.set_index(["subset", "n"])),
        "",
    ]
    for key, frame in plot_data.items():
        path = root / f"plot_{key}.csv"
        frame.to_csv(path, index=False)
        lines.append(f"- `{path.name}`: {len(frame)} rows")
    lines.append("")

    out = root / "report.md"
    out.write_text("\n".join(lines))
    logger.info(f"📄 Report written: {out} ({len(rows)} rows, plot data {sorted(plot_data)})")
    return out
