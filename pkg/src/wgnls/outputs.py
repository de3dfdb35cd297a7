"""Run directories, CSV emission and digest manifests."""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import math
import platform
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__


def unique_dir(path) -> Path:
    """Create ``path``; on collision append ``-1``, ``-2``, ... and never reuse a directory."""
    base = Path(path)
    candidate = base
    k = 0
    while True:
        try:
            candidate.mkdir(parents=True, exist_ok=False)
            return candidate
        except FileExistsError:
            k += 1
            candidate = base.with_name(f"{base.name}-{k}")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path, header, rows) -> Path:
    """RFC-4180 CSV with CRLF line ends and shortest round-trip reals."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="milliseconds")


@dataclass
class RunManifest:
    """Everything needed to audit a run directory after the fact."""

    command: str
    config: dict
    outdir: Path
    started: str = field(default_factory=_now)
    finished: str | None = None
    status: str = "running"
    message: str | None = None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256(path)

    def add_output(self, path) -> None:
        p = Path(path)
        self.outputs[p.name] = sha256(p)

    def finish(self, status: str = "ok", message: str | None = None) -> Path:
        self.status = status
        self.message = message
        self.finished = _now()
        return write_json(self.outdir / "manifest.json", self.to_dict())

    def discard_outputs(self) -> None:
        """Remove emitted files (used when a run aborts); the manifest stays."""
        for name in list(self.outputs):
            target = self.outdir / name
            if target.is_dir():
                shutil.rmtree(target, ignore_errors=True)
            else:
                target.unlink(missing_ok=True)
        self.outputs.clear()
        for p in self.outdir.iterdir():
            if p.name != "manifest.json":
                shutil.rmtree(p, ignore_errors=True) if p.is_dir() else p.unlink(missing_ok=True)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "code_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "started": self.started,
            "finished": self.finished,
            "status": self.status,
            "message": self.message,
            "inputs": self.inputs,
            "outputs": self.outputs,
            **self.extra,
        }


def verify_manifest(outdir) -> bool:
    """True when every listed output exists and matches its digest."""
    outdir = Path(outdir)
    data = json.loads((outdir / "manifest.json").read_text())
    return all((outdir / name).is_file() and sha256(outdir / name) == digest
               for name, digest in data["outputs"].items())
