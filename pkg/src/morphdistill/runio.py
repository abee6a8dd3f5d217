"""Run manifests and atomic file output.

Every CLI command records a manifest sufficient to re-execute it: the
resolved arguments, seed, tool version, input checksums, and wall-clock per
phase. All structured outputs go through write-to-temp + atomic rename so a
failing command never leaves a partial metrics file behind.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional


def json_dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_json(path, obj) -> Path:
    return atomic_write_text(path, json_dumps(obj))


def checksum_path(path) -> Optional[str]:
    """sha256 of a file, or of a directory's (name, size) listing."""
    path = Path(path)
    if path.is_file():
        h = hashlib.sha256()
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        return h.hexdigest()
    if path.is_dir():
        h = hashlib.sha256()
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(f"{p.relative_to(path)}:{p.stat().st_size}\n".encode())
        return h.hexdigest()
    return None


@dataclass
class RunManifest:
    command: str
    args: Dict
    seed: int
    version: str
    deterministic: bool = True
    input_checksums: Dict[str, str] = field(default_factory=dict)
    wall_clock: Dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "command": self.command,
            "args": self.args,
            "seed": self.seed,
            "version": self.version,
            "deterministic": self.deterministic,
            "input_checksums": self.input_checksums,
            "wall_clock": self.wall_clock,
        }

    @classmethod
    def load(cls, path) -> "RunManifest":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            command=payload["command"],
            args=dict(payload["args"]),
            seed=int(payload["seed"]),
            version=str(payload.get("version", "")),
            deterministic=bool(payload.get("deterministic", True)),
            input_checksums=dict(payload.get("input_checksums", {})),
            wall_clock=dict(payload.get("wall_clock", {})),
        )

    def write(self, out_dir) -> Path:
        return atomic_write_json(Path(out_dir) / "run_manifest.json", self.to_json())


class PhaseTimer:
    """Accumulates wall-clock seconds per named phase."""

    def __init__(self):
        self.phases: Dict[str, float] = {}

    def time(self, name: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.start = time.perf_counter()
                return self

            def __exit__(self, *exc):
                timer.phases[name] = timer.phases.get(name, 0.0) + time.perf_counter() - self.start
                return False

        return _Ctx()
