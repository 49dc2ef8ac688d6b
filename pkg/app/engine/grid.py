"""Experiment grid - independent runs with bounded concurrency"""
import asyncio
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd

from app.config import RunConfig, subset_key
from app.engine import ResultRow, results_table, write_results
from app.engine.core import PipelineEngine, resolve_output_dir
from app.errors import DuplicateRunError
from app.utils import settings

logger = logging.getLogger(__name__)


@dataclass
class GridResult:
    rows: List[ResultRow] = field(default_factory=list)
    failures: Dict[str, str] = field(default_factory=dict)

    @property
    def table(self) -> pd.DataFrame:
        return results_table(self.rows)


def run_key(cfg: RunConfig) -> tuple:
    return subset_key(cfg.subset), cfg.method, cfg.seed


def check_unique(configs: List[RunConfig]) -> None:
    """Reject grids naming the same (subset, method, seed) or output directory twice"""
    seen_keys, seen_dirs = set(), set()
    for cfg in configs:
        key = run_key(cfg)
        if key in seen_keys:
            raise DuplicateRunError(f"duplicate run {key}")
        out = resolve_output_dir(cfg.output_dir).resolve()
        if out in seen_dirs:
            raise DuplicateRunError(f"two runs share output directory {out}")
        seen_keys.add(key)
        seen_dirs.add(out)


async def run_grid(
    configs: List[RunConfig],
    max_parallel: Optional[int] = None,
    device: Optional[str] = None,
    output_dir: Optional[Union[str, Path]] = None,
) -> GridResult:
    """Execute every run; a failed run is recorded and the grid continues

    Runs execute in worker threads, at most `max_parallel` at a time
    (default MAX_PARALLEL_RUNS). With output_dir set, the merged rows are
    written to <output_dir>/results.csv.
    """
    check_unique(configs)
    semaphore = asyncio.Semaphore(max_parallel or settings.MAX_PARALLEL_RUNS)
    result = GridResult()

    async def _one(cfg: RunConfig):
        async with semaphore:
            engine = PipelineEngine(cfg, device=device, configure_logging=False)
            try:
                rows = await asyncio.to_thread(engine.run)
            except Exception as e:
                logger.error(f"❌ Grid run {cfg.name} failed: {e}")
                result.failures[cfg.name] = str(e)
                return []
            return rows

    logger.info(f"🚀 Grid: {len(configs)} runs, {max_parallel or settings.MAX_PARALLEL_RUNS} at a time")
    for rows in await asyncio.gather(*(_one(cfg) for cfg in configs)):
        result.rows.extend(rows)

    if output_dir is not None:
        write_results(result.rows, resolve_output_dir(str(output_dir)) / "results.csv")
    logger.info(f"Grid finished: {len(result.rows)} rows, {len(result.failures)} failures")
    return result
