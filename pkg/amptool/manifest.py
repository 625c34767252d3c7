from __future__ import annotations

import json
import time
import uuid
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List

from . import __version__
from .utils import compute_file_hash


MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    """Provenance record written next to every artifact-producing command's output."""

    command: str
    config: Dict[str, Any]
    run_id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    tool_version: str = __version__
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    # Inputs: path -> sha256
    input_digests: Dict[str, str] = field(default_factory=dict)

    # Outputs
    outputs: List[str] = field(default_factory=list)

    # Wall-clock seconds per stage
    timings: Dict[str, float] = field(default_factory=dict)

    # Free-form counts and notes (exit status, per-pair counts, defaults used)
    summary: Dict[str, Any] = field(default_factory=dict)

    def add_input(self, path: str | Path) -> None:
        p = Path(path)
        if p.is_file():
            self.input_digests[str(p)] = compute_file_hash(p)
        elif p.is_dir():
            for child in sorted(c for c in p.rglob("*") if c.is_file() and c.name != MANIFEST_NAME):
                self.input_digests[str(child)] = compute_file_hash(child)

    def add_output(self, path: str | Path) -> None:
        if str(path) not in self.outputs:
            self.outputs.append(str(path))

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, output: str | Path) -> Path:
        """Write next to ``output``: inside it for a directory, else ``<output>.manifest.json``."""
        path = manifest_path_for(output)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def manifest_path_for(output: str | Path) -> Path:
    output = Path(output)
    if output.is_dir() or not output.suffix:
        return output / MANIFEST_NAME
    return output.with_name(f"{output.stem}.manifest.json")

