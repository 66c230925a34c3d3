"""
runlog: Run Manifests + Audit Trail

Every command leaves behind

    <out>/run_manifest.json  - what ran, with which config/seed/inputs, and
                               the hash of every file it wrote
    audit.jsonl              - one appended line per run

The timestamp is the only field that differs between identical runs.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

logger = logging.getLogger(__name__)

MANIFEST_NAME = "run_manifest.json"


def file_sha256(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_files(paths: Iterable[Path], root: Optional[Path] = None) -> Dict[str, str]:
    out = {}
    for p in sorted({Path(p) for p in paths}):
        if not p.is_file():
            continue
        key = p.relative_to(root).as_posix() if root and p.is_relative_to(root) else p.as_posix()
        out[key] = file_sha256(p)
    return out


@dataclass
class RunRecord:
    command: str
    flags: Dict[str, Any]
    config_hash: str
    seed: int
    version: str
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    status: str = "ok"
    timestamp: str = ""

    def add_inputs(self, paths: Iterable[Union[str, Path]]) -> None:
        self.inputs.update(_hash_files(Path(p) for p in paths))

    def add_outputs(self, paths: Iterable[Union[str, Path]], root: Path) -> None:
        self.outputs.update(_hash_files((Path(p) for p in paths), root))


def write_manifest(out_dir: Union[str, Path], record: RunRecord) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record.timestamp = record.timestamp or datetime.now().isoformat()
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(asdict(record), indent=2, sort_keys=True, default=str) + "\n",
                    encoding="utf-8")
    logger.info("[RUN] %s: manifest %s (%d outputs)", record.command, path, len(record.outputs))
    return path


def read_manifest(path: Union[str, Path]) -> RunRecord:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return RunRecord(**data)


def append_audit(path: Union[str, Path], record: RunRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entry = {
        "timestamp": record.timestamp or datetime.now().isoformat(),
        "command": record.command,
        "status": record.status,
        "config_hash": record.config_hash,
        "seed": record.seed,
        "n_outputs": len(record.outputs),
    }
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")
