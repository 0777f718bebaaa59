"""Run records and operation counters shared by all training phases."""
from __future__ import annotations

import json
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

METHODS = ("cass", "dino", "byol", "mae", "supervised")


@dataclass
class Counters:
    augmentation_applications: int = 0
    forward_passes: int = 0
    parameter_copy_ops: int = 0
    optimizer_steps: int = 0


class PhaseTimer:
    """Accumulates wall-clock seconds per named phase."""

    def __init__(self):
        self.seconds: dict[str, float] = {}

    @contextmanager
    def __call__(self, phase: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[phase] = self.seconds.get(phase, 0.0) + time.perf_counter() - t0


@dataclass
class RunRecord:
    run_id: str
    method: str
    phase: str
    seed: int
    config: dict = field(default_factory=dict)
    loss_curve: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    wall_clock_seconds: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method tag {self.method!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


_store_lock = threading.Lock()


def append_record(store_dir, record: RunRecord) -> Path:
    """Write ``record`` as ``<store>/records/<run_id>.json``; appends are serialised."""
    with _store_lock:
        return record.save(Path(store_dir) / "records" / f"{record.run_id}.json")


def load_records(store_dir) -> list[RunRecord]:
    return [RunRecord.load(p) for p in sorted((Path(store_dir) / "records").glob("*.json"))]
