"""Run directories: a record of what ran, the call log, and hashed outputs.

Layout of a run directory::

    record.json   run_id, command, config snapshot, status, outputs manifest
    calls.jsonl   hash-chained provider call log (see providers.RunLog)
    ...           pipeline outputs, each listed in the manifest with its sha256

The run id is derived from the command and config, so rerunning the same
thing lands in the same directory and can resume from its log. Nothing
time-dependent goes into record.json, which keeps the manifest byte-identical
across repeat runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import UserError
from .providers import RunLog

RECORD_FILE = "record.json"
CALLS_FILE = "calls.jsonl"


def run_id_for(command: str, config: dict) -> str:
    blob = json.dumps({"command": command, "config": config}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunRecord:
    run_id: str
    command: str
    config: dict
    status: str = "running"
    outputs: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "command": self.command,
            "config": self.config,
            "status": self.status,
            "outputs": self.outputs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        missing = {"run_id", "command", "config"} - set(d)
        if missing:
            raise UserError(f"run record is missing {sorted(missing)}")
        return cls(d["run_id"], d["command"], d["config"], d.get("status", "running"),
                   list(d.get("outputs", [])))


class RunStore:
    """One writer per directory; the record is rewritten, the call log only appended."""

    def __init__(self, root: str | Path, record: RunRecord, log: RunLog):
        self.root = Path(root).resolve()
        self.record = record
        self.log = log

    @classmethod
    def create(cls, parent: str | Path, command: str, config: dict,
               run_dir: str | Path | None = None) -> "RunStore":
        rid = run_id_for(command, config)
        root = Path(run_dir) if run_dir is not None else Path(parent) / f"{command.replace(' ', '-')}-{rid}"
        root.mkdir(parents=True, exist_ok=True)
        if (root / RECORD_FILE).exists():
            existing = _read_record(root)
            if existing.run_id != rid:
                raise UserError(
                    f"{root} already holds run {existing.run_id}; use a different directory"
                )
            record = existing
            record.status = "running"
        else:
            record = RunRecord(rid, command, config)
        store = cls(root, record, RunLog(root / CALLS_FILE))
        store.write_record()
        return store

    @property
    def calls_path(self) -> Path:
        return self.root / CALLS_FILE

    def write_record(self) -> None:
        text = json.dumps(self.record.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)
        tmp = self.root / (RECORD_FILE + ".tmp")
        tmp.write_text(text + "\n", encoding="utf-8")
        tmp.replace(self.root / RECORD_FILE)

    def finish(self, outputs: Iterable[str | Path], status: str = "complete") -> RunRecord:
        """Hash every output (paths may be absolute or relative to the run dir) and close the record."""
        entries = {}
        for out in outputs:
            p = Path(out)
            if not p.is_absolute():
                p = self.root / p
            if not p.exists():
                raise UserError(f"output {p} does not exist")
            rel = p.relative_to(self.root).as_posix() if p.is_relative_to(self.root) else str(p)
            entries[rel] = file_sha256(p)
        self.record.outputs = [{"path": k, "sha256": v} for k, v in sorted(entries.items())]
        self.record.status = status
        self.write_record()
        return self.record


def _read_record(run_dir: Path) -> RunRecord:
    path = run_dir / RECORD_FILE
    if not path.exists():
        raise UserError(f"{run_dir} has no {RECORD_FILE}")
    try:
        return RunRecord.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: not valid JSON ({exc})") from None


def resume(run_dir: str | Path) -> RunStore:
    """Reopen a run directory; the call log is verified (CorruptRunLog names the bad line)."""
    root = Path(run_dir)
    record = _read_record(root)
    log = RunLog(root / CALLS_FILE)
    return RunStore(root, record, log)


def verify_outputs(run_dir: str | Path) -> list[str]:
    """Manifest entries whose file is missing or whose hash changed."""
    root = Path(run_dir)
    bad = []
    for entry in _read_record(root).outputs:
        p = Path(entry["path"])
        p = p if p.is_absolute() else root / p
        if not p.exists() or file_sha256(p) != entry["sha256"]:
            bad.append(entry["path"])
    return bad
