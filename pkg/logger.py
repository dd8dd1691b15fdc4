"""
Run logging for traceability.
RunLogger records every command, configuration and failure with timestamps;
MetricsLogger records training metrics without timestamps so that two runs
with the same seed produce identical files.
"""

from typing import Optional, Dict, Any
from pathlib import Path
from pydantic import BaseModel
from config import Config
from schemas import RunEvent


class RunLogger:
    """Centralized audit logging for all pipeline actions"""

    def __init__(self, log_file: str = "holgraph_log.jsonl", console: bool = True):
        """
        Initialize run logger.

        Args:
            log_file: Path to log file (JSONL format)
            console: Echo events to stdout
        """
        self.log_file = Path(log_file)
        self.console = console

    def log_event(
        self,
        action: str,
        component: str,
        details: Optional[Dict[str, Any]] = None,
        success: bool = True,
        error_message: Optional[str] = None
    ):
        """
        Log a pipeline event.

        Args:
            action: Description of the action
            component: Module or command that performed it
            details: Inputs, outputs or configuration
            success: Whether action succeeded
            error_message: Error message if failed
        """
        entry = RunEvent(
            action=action,
            component=component,
            details=details or {},
            success=success,
            error_message=error_message
        )

        self.log_file.parent.mkdir(parents=True, exist_ok=True)
        with open(self.log_file, "a", encoding="utf-8") as f:
            f.write(entry.model_dump_json() + "\n")

        if self.console:
            status = "[OK]" if success else "[FAIL]"
            print(f"[{component.upper()}] {status} {action}")
            if error_message:
                print(f"  Error: {error_message}")


class MetricsLogger:
    """Append-only JSONL writer for metric records"""

    def __init__(self, log_file: str, truncate: bool = True):
        self.log_file = Path(log_file)
        self.log_file.parent.mkdir(parents=True, exist_ok=True)
        if truncate:
            self.log_file.write_text("", encoding="utf-8")

    def write(self, record: BaseModel):
        with open(self.log_file, "a", encoding="utf-8") as f:
            f.write(record.model_dump_json() + "\n")


# Global logger instance
run_logger = RunLogger(Config.LOG_FILE, console=Config.LOG_CONSOLE)
