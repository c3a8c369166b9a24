"""
Timing utilities for measuring per-stage wall-clock time of an experiment.
"""
import time
from dataclasses import dataclass, field
from typing import Dict


@dataclass
class TimingInfo:
    """Container for stage timings in milliseconds, in the order they were recorded."""
    stages: Dict[str, float] = field(default_factory=dict)

    @property
    def total_ms(self) -> float:
        return sum(self.stages.values())

    def add(self, stage: str, elapsed_ms: float) -> None:
        self.stages[stage] = self.stages.get(stage, 0.0) + elapsed_ms

    def to_dict(self) -> Dict[str, float]:
        """Convert to dictionary for JSON serialization."""
        out = {f"{name}_ms": round(ms, 2) for name, ms in self.stages.items()}
        out["total_ms"] = round(self.total_ms, 2)
        return out

    def to_header_string(self) -> str:
        """Convert to a comma-separated summary for log lines and HTTP headers."""
        parts = [f"{name}={ms:.2f}" for name, ms in self.stages.items() if ms > 0]
        parts.append(f"total={self.total_ms:.2f}")
        return ",".join(parts)


class TimingContext:
    """Context manager for timing one stage; time accumulates if the stage repeats."""

    def __init__(self, timing_info: TimingInfo, stage: str):
        self.timing_info = timing_info
        self.stage = stage
        self.start_time = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        elapsed_ms = (time.perf_counter() - self.start_time) * 1000
        self.timing_info.add(self.stage, elapsed_ms)
        return False
