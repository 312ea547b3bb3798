"""
Run Manager
===========
Creates and inspects run directories without touching earlier runs.

Layout of one run:
    runs/<config-hash>_<timestamp>/
        config.resolved      sorted ``key = value`` text of the resolved RunConfig
        checkpoints/         ckpt_%08d.hvae
        train_log.jsonl      one JSON record per logged iteration
        reports/             metrics.json, probe.json, sensitivity.json, ...
        figures/             PGM grids and raw .f32 dumps

Usage:
    manager = RunManager("runs")
    run = manager.create(cfg)                 # fresh timestamped directory
    run = manager.create(cfg, out="my_run")   # pinned directory, reused as-is
"""

import logging
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Union

from .config import RunConfig, load_config_file
from .errors import DataError

logger = logging.getLogger(__name__)

CHECKPOINT_PATTERN = "ckpt_*.hvae"


def checkpoint_name(iteration: int) -> str:
    return f"ckpt_{iteration:08d}.hvae"


@dataclass(frozen=True)
class RunDirectory:
    """Paths of one run"""

    root: Path

    @property
    def config_path(self) -> Path:
        return self.root / "config.resolved"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def log_path(self) -> Path:
        return self.root / "train_log.jsonl"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def figures(self) -> Path:
        return self.root / "figures"

    def ensure(self) -> "RunDirectory":
        try:
            for directory in (self.root, self.checkpoints, self.reports, self.figures):
                directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataError(f"cannot create run directory {self.root}: {e}") from e
        return self

    def checkpoint_path(self, iteration: int) -> Path:
        return self.checkpoints / checkpoint_name(iteration)

    def list_checkpoints(self) -> List[Path]:
        return sorted(self.checkpoints.glob(CHECKPOINT_PATTERN))

    def latest_checkpoint(self) -> Optional[Path]:
        found = self.list_checkpoints()
        return found[-1] if found else None


class RunManager:
    """Manage run directories under one base directory"""

    def __init__(self, base_dir: Union[str, Path] = "runs"):
        self.base_dir = Path(base_dir)

    def create(self, cfg: RunConfig, out: Optional[Union[str, Path]] = None) -> RunDirectory:
        """Create (or reuse, when ``out`` pins it) a run directory and write config.resolved"""
        if out is not None:
            run = RunDirectory(Path(out))
        else:
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            run = RunDirectory(self.base_dir / f"{cfg.config_hash()}_{timestamp}")
        run.ensure()
        with open(run.config_path, "w", encoding="utf-8") as f:
            f.write(cfg.to_text())
        logger.info(f"Run directory: {run.root}")
        return run

    def list_runs(self) -> List[Dict]:
        """Summaries of every run under the base directory, newest first"""
        runs = []
        if not self.base_dir.exists():
            return runs
        for root in self.base_dir.iterdir():
            run = RunDirectory(root)
            if not run.config_path.exists():
                continue
            try:
                values = load_config_file(run.config_path)
            except Exception as e:
                logger.warning(f"Skipping {root}: {e}")
                continue
            latest = run.latest_checkpoint()
            runs.append({
                "name": root.name,
                "path": str(root),
                "config_hash": root.name.split("_", 1)[0],
                "variant": values.get("variant"),
                "created": root.stat().st_mtime,
                "last_iteration": int(latest.stem.split("_")[1]) if latest else None,
            })
        return sorted(runs, key=lambda r: r["created"], reverse=True)

