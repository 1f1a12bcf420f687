"""
Per-run records for dextts commands.

A run writes two files under the log directory: `run_<id>.log` with DEBUG
detail from the run's own logger, and `run_<id>.json` holding the resolved
config, epoch losses, checkpoints, samples and failures.
"""
import json
import logging
import threading
import time
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

from dextts.settings import get_settings

_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class RunLogger:
    """Collects one command's training and sampling events and mirrors them to disk."""

    def __init__(self, command: str, log_dir: Path, run_id: Optional[str] = None):
        self.id = run_id or datetime.now().strftime("%Y%m%d_%H%M%S_%f")
        log_dir.mkdir(parents=True, exist_ok=True)
        self.log_file = log_dir / f"run_{self.id}.log"
        self.json_file = log_dir / f"run_{self.id}.json"
        self._started = time.perf_counter()
        self._lock = threading.Lock()
        self.record: Dict[str, Any] = {
            "run_id": self.id,
            "command": command,
            "started": datetime.now().isoformat(timespec="seconds"),
            "seconds": None,
            "config": None,
            "epochs": [],
            "steps": 0,
            "variant_steps": {},
            "checkpoints": [],
            "samples": [],
            "errors": [],
        }

        # run detail stays in the run file; the console keeps the module loggers
        self.logger = logging.getLogger(f"dextts.run.{self.id}")
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = False
        self._handler = logging.FileHandler(self.log_file, encoding="utf-8")
        self._handler.setFormatter(logging.Formatter(_FORMAT))
        self.logger.addHandler(self._handler)
        self.logger.info(f"started: {command}")

    def log_config(self, config: Dict[str, Any]):
        self.record["config"] = config
        self.logger.debug(f"config {json.dumps(config, sort_keys=True, default=str)}")

    def log_epoch(self, epoch: int, losses: Dict[str, float], steps: int, label: Optional[str] = None):
        """
        Append one epoch's mean loss components; `steps` counts optimizer steps so far.

        Labeled epochs come from one of several trainings sharing this run
        (the ablation variants); their rows carry the label and their step
        counts are kept per label under `variant_steps`.
        """
        row = {"epoch": epoch, **losses}
        with self._lock:
            if label is None:
                self.record["steps"] = steps
            else:
                row["variant"] = label
                self.record["variant_steps"][label] = steps
                self.record["steps"] = sum(self.record["variant_steps"].values())
            self.record["epochs"].append(row)
        prefix = f"[{label}] " if label else ""
        self.logger.info(f"{prefix}epoch {epoch} step {steps} " + " ".join(f"{k}={v:.6g}" for k, v in losses.items()))

    def log_checkpoint(self, path: str, epoch: int):
        self.record["checkpoints"].append({"path": str(path), "epoch": epoch})
        self.logger.info(f"checkpoint {path} (epoch {epoch})")

    def log_sample(self, nfe: int, frames: int, seconds: float, path: Optional[str] = None):
        self.record["samples"].append({"nfe": nfe, "frames": frames, "seconds": seconds, "path": path})
        self.logger.debug(f"sample nfe={nfe} frames={frames} {seconds:.3f}s")

    def log_error(self, exc: BaseException):
        """Record a failure; numeric errors also name the op or loss component."""
        where = getattr(exc, "where", None)
        self.record["errors"].append({"type": type(exc).__name__, "message": str(exc), "where": where})
        self.logger.error(f"{type(exc).__name__}{f' in {where}' if where else ''}: {exc}", exc_info=exc)

    def summary(self) -> str:
        parts = [f"{self.record['seconds']:.2f}s"]
        epochs = self.record["epochs"]
        if epochs:
            parts.append(f"{len(epochs)} epochs, {self.record['steps']} steps, "
                         f"final total {epochs[-1].get('total', float('nan')):.6g}")
        if self.record["samples"]:
            parts.append(f"{len(self.record['samples'])} samples")
        if self.record["errors"]:
            parts.append(f"failed with {self.record['errors'][-1]['type']}")
        return "; ".join(parts)

    def close(self) -> Dict[str, Any]:
        """Write the JSON record and detach the file handler."""
        self.record["seconds"] = round(time.perf_counter() - self._started, 6)
        self.json_file.write_text(json.dumps(self.record, indent=2, default=str), encoding="utf-8")
        self.logger.info(f"finished: {self.summary()}")
        self.logger.removeHandler(self._handler)
        self._handler.close()
        return self.record


_active: Optional[RunLogger] = None


def active_run() -> Optional[RunLogger]:
    """The run opened by the innermost `run_logger` block, if any."""
    return _active


@contextmanager
def run_logger(command: str) -> Iterator[Optional[RunLogger]]:
    """Open a run for `command`; yields None when ENABLE_DETAILED_LOGS is off."""
    global _active
    settings = get_settings()
    if not settings.detailed_logs:
        yield None
        return

    run = RunLogger(command, Path(settings.log_dir))
    previous, _active = _active, run
    try:
        yield run
    except Exception as e:
        run.log_error(e)
        raise
    finally:
        run.close()
        _active = previous
